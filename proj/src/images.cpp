#include "babelminer/images.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "babelminer/common.hpp"

namespace babelminer::images {

namespace {

constexpr char kImageMagic[4] = {'B', 'M', 'I', '1'};
constexpr char kMaskMagic[4] = {'B', 'M', 'M', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw ParseError("image container truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

std::string get_str(const std::string& in, std::size_t& pos) {
    std::uint32_t len = get_u32(in, pos);
    if (pos + len > in.size()) throw ParseError("image container truncated");
    std::string s = in.substr(pos, len);
    pos += len;
    return s;
}

}  // namespace

const numerics::FeatureMap& ImageStore::get(const std::string& image_id) const {
    auto it = images.find(image_id);
    if (it == images.end()) throw Error("ImageStore: unknown image '" + image_id + "'");
    return it->second;
}

void ImageStore::save(const std::string& path) const {
    std::string out;
    out.append(kImageMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(images.size()));
    for (const auto& [id, img] : images) {
        put_u32(out, static_cast<std::uint32_t>(id.size()));
        out += id;
        put_u32(out, static_cast<std::uint32_t>(img.height));
        put_u32(out, static_cast<std::uint32_t>(img.width));
        // Pixels quantized to u8; the generator emits u8-valued textures so
        // the round trip is exact.
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x) {
                    double v = img.at(c, y, x);
                    int q = static_cast<int>(v * 255.0 + 0.5);
                    out.push_back(static_cast<char>(std::clamp(q, 0, 255)));
                }
    }
    write_file(path, out);
}

ImageStore ImageStore::load(const std::string& path) {
    std::string in = read_file(path);
    if (in.size() < 8 || std::memcmp(in.data(), kImageMagic, 4) != 0)
        throw ParseError("not an image container: " + path);
    std::size_t pos = 4;
    std::uint32_t count = get_u32(in, pos);
    ImageStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string id = get_str(in, pos);
        std::uint32_t h = get_u32(in, pos);
        std::uint32_t w = get_u32(in, pos);
        auto img = numerics::make_feature_map(3, static_cast<int>(h), static_cast<int>(w));
        std::size_t need = 3ull * h * w;
        if (pos + need > in.size()) throw ParseError("image container truncated");
        for (int c = 0; c < 3; ++c)
            for (std::uint32_t y = 0; y < h; ++y)
                for (std::uint32_t x = 0; x < w; ++x)
                    img.at(c, static_cast<int>(y), static_cast<int>(x)) =
                        static_cast<unsigned char>(in[pos++]) / 255.0;
        store.images.emplace(std::move(id), std::move(img));
    }
    return store;
}

void MaskStore::save(const std::string& path) const {
    std::string out;
    out.append(kMaskMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(masks.size()));
    put_u32(out, static_cast<std::uint32_t>(height));
    put_u32(out, static_cast<std::uint32_t>(width));
    for (const auto& [id, mask] : masks) {
        if (mask.size() != static_cast<std::size_t>(width) * height)
            throw Error("MaskStore: mask size mismatch for '" + id + "'");
        put_u32(out, static_cast<std::uint32_t>(id.size()));
        out += id;
        out.append(reinterpret_cast<const char*>(mask.data()), mask.size());
    }
    write_file(path, out);
}

MaskStore MaskStore::load(const std::string& path) {
    std::string in = read_file(path);
    if (in.size() < 16 || std::memcmp(in.data(), kMaskMagic, 4) != 0)
        throw ParseError("not a mask container: " + path);
    std::size_t pos = 4;
    std::uint32_t count = get_u32(in, pos);
    MaskStore store;
    store.height = static_cast<int>(get_u32(in, pos));
    store.width = static_cast<int>(get_u32(in, pos));
    std::size_t n = static_cast<std::size_t>(store.width) * store.height;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string id = get_str(in, pos);
        if (pos + n > in.size()) throw ParseError("mask container truncated");
        std::vector<std::uint8_t> mask(n);
        std::memcpy(mask.data(), in.data() + pos, n);
        pos += n;
        store.masks.emplace(std::move(id), std::move(mask));
    }
    return store;
}

}  // namespace babelminer::images
