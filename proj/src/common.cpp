#include "babelminer/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <fstream>
#include <sstream>
#include <thread>

namespace babelminer {

namespace {

// splitmix64 step; full-period, passes BigCrush as a mixer.
std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

Rng Rng::child(const std::string& name) const {
    std::uint64_t h = fnv1a(name);
    std::uint64_t mix = state_ ^ (h + 0x9e3779b97f4a7c15ull + (state_ << 6) + (state_ >> 2));
    return Rng(mix ? mix : 1);
}

std::uint64_t Rng::next_u64() {
    return splitmix64(state_);
}

std::uint64_t Rng::uniform(std::uint64_t n) {
    if (n == 0) throw Error("Rng::uniform: n must be positive");
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double Rng::uniform_real() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform_real(double lo, double hi) {
    return lo + (hi - lo) * uniform_real();
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform_real();
    } while (u1 <= 1e-300);
    double u2 = uniform_real();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t basis) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = basis;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(s.data(), s.size());
}

std::string file_checksum(const std::string& path) {
    std::string bytes = read_file(path);
    std::uint64_t h = fnv1a(bytes.data(), bytes.size());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path);
    out << contents;
    if (!out) throw IoError("write failed: " + path);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    unsigned threads = std::thread::hardware_concurrency();
    if (threads == 0) threads = 1;
    if (const char* cap = std::getenv("BABEL_MINER_THREADS")) {
        long v = std::strtol(cap, nullptr, 10);
        if (v >= 1) threads = static_cast<unsigned>(v);
    }
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    threads = std::min<unsigned>(threads, static_cast<unsigned>(n));
    std::vector<std::thread> pool;
    pool.reserve(threads);
    std::atomic_size_t next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace babelminer
