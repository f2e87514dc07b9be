#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace babelminer {

// Error taxonomy shared across the library. The C API maps each subclass
// to a stable numeric code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

struct ConsistencyError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Counter-based deterministic RNG. All randomness in the pipeline flows
// from one root seed through named substreams, so reruns are byte-identical
// regardless of platform or thread count (std:: distributions are
// implementation-defined and never used).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    // Derive an independent child stream from a stage name.
    Rng child(const std::string& name) const;

    std::uint64_t next_u64();

    // Uniform integer in [0, n), unbiased via rejection.
    std::uint64_t uniform(std::uint64_t n);

    // Uniform double in [0, 1).
    double uniform_real();

    // Uniform double in [lo, hi).
    double uniform_real(double lo, double hi);

    // Standard normal via Box-Muller.
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over arbitrary bytes; used for substream derivation and for the
// run-manifest artifact checksums.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t basis = 0xcbf29ce484222325ull);
std::uint64_t fnv1a(const std::string& s);

// Checksum of a file's raw bytes, formatted as 16 hex digits.
std::string file_checksum(const std::string& path);

// Whole-file helpers.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

// Bounded parallel map over [0, n). Thread count is capped by the
// BABEL_MINER_THREADS environment variable. Results are written by index so
// reductions stay deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace babelminer
