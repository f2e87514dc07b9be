#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "babelminer/numerics.hpp"

namespace babelminer::images {

// RGB images as 3-channel float maps in [0,1], keyed by corpus image id.
struct ImageStore {
    std::map<std::string, numerics::FeatureMap> images;

    const numerics::FeatureMap& get(const std::string& image_id) const;

    void save(const std::string& path) const;
    static ImageStore load(const std::string& path);
};

// Per-pixel ground-truth concept index maps (255 = background), keyed by
// image id; resolution matches the source images.
struct MaskStore {
    std::map<std::string, std::vector<std::uint8_t>> masks;
    int width = 0;
    int height = 0;

    void save(const std::string& path) const;
    static MaskStore load(const std::string& path);
};

}  // namespace babelminer::images
