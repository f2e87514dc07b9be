#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "babelminer/corpus.hpp"
#include "babelminer/sfm.hpp"

namespace babelminer::pair_engine {

struct Correspondence {
    sfm::Pixel pixel_a;
    sfm::Pixel pixel_b;
    sfm::PointKey point;
};

struct GridPoint {
    int x = 0;
    int y = 0;
};

struct ImagePair {
    sfm::ImageKey image_a;
    sfm::ImageKey image_b;
    std::vector<sfm::PointKey> shared_point_ids;
};

// All unordered pairs of eligible images with shared_keypoints >= min_shared.
std::vector<ImagePair> enumerate_pairs(const sfm::TrackIndex& index,
                                       const std::vector<sfm::ImageKey>& eligible_images,
                                       std::size_t min_shared = 1);

// Maps an original-resolution pixel coordinate onto the feature grid by
// proportional rounding; ties round toward zero.
int to_grid(double coord, int original_extent, int grid_extent);

struct GridCorrespondence {
    GridPoint a;
    GridPoint b;
    sfm::PointKey point;
};

// n correspondences drawn uniformly with replacement from the pair's shared
// points; pixels mapped to the feature-grid resolution.
std::vector<GridCorrespondence> sample_correspondences(const ImagePair& pair,
                                                       const sfm::TrackIndex& index,
                                                       std::size_t n,
                                                       int image_w, int image_h,
                                                       int grid_w, int grid_h,
                                                       std::uint64_t seed);

struct NegativeSample {
    std::size_t batch_image_index;
    GridPoint pixel;
};

struct BatchItem {
    std::string image_id;  // corpus id
    sfm::ImageKey image_key;  // empty for unregistered images
};

struct BatchPair {
    std::size_t item_a;  // indices into Batch::items
    std::size_t item_b;
    bool real = false;
    std::vector<GridCorrespondence> correspondences;  // empty for pseudo-pairs
};

struct Batch {
    std::vector<BatchItem> items;  // 32 images
    std::vector<BatchPair> pairs;  // 16 pairs, first 8 real
};

// m negatives, each a uniform pixel of a uniformly-chosen batch image other
// than the anchor pair's two images.
std::vector<NegativeSample> sample_negatives_inter(const Batch& batch,
                                                   std::size_t anchor_pair_index,
                                                   std::size_t m,
                                                   int grid_w, int grid_h,
                                                   std::uint64_t seed);

// m pixels uniform over image b outside the centered w/4 x h/4 exclusion box
// around p_plus.
std::vector<GridPoint> sample_negatives_intra(GridPoint p_plus,
                                              std::size_t m,
                                              int grid_w, int grid_h,
                                              std::uint64_t seed);

// 8 real pairs + 8 pseudo-pairs built from 16 singles.
Batch compose_batch(const std::vector<ImagePair>& real_pairs,
                    const std::vector<std::string>& real_pair_image_ids,  // corpus ids, 2 per pair
                    const std::vector<std::string>& singles,
                    const sfm::TrackIndex& index,
                    std::size_t correspondences_per_pair,
                    int image_w, int image_h, int grid_w, int grid_h,
                    std::uint64_t seed);

struct AugmentedCaptionPair {
    std::string image_id;
    std::string caption;
    bool transferred = false;
    std::string donor_image_id;  // set when transferred
    double iou = 0.0;            // set when transferred
};

// Original caption pairs plus captions transferred between images whose
// 3D-keypoint IoU meets the threshold; exact duplicates removed.
std::vector<AugmentedCaptionPair> augment_caption_pairs(const corpus::Corpus& corpus,
                                                        const sfm::TrackIndex& index,
                                                        double threshold = 0.3);

std::string serialize_batch(const Batch& batch);
std::string serialize_augmented_pairs(const std::vector<AugmentedCaptionPair>& pairs);

}  // namespace babelminer::pair_engine
