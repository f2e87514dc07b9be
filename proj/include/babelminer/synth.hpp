#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "babelminer/corpus.hpp"
#include "babelminer/images.hpp"
#include "babelminer/sfm.hpp"

namespace babelminer::synth {

// Deterministic synthetic landmark collection with planted concepts.
// Every planted concept occupies one region per landmark: a block of 3D
// points fully co-observed by that region's cameras, so same-region image
// pairs share all region points and cross-region pairs share none.
// Outlier nouns are attached to camera pairs that share too few points to
// form graph edges, giving them full support but zero coherence.
struct SceneSpec {
    int num_landmarks = 30;
    std::vector<std::string> concepts = {"facade", "tower", "portal"};
    int cameras_per_region = 10;
    int points_per_region = 12;
    std::vector<std::string> outlier_nouns;
    int outlier_cameras = 10;     // per landmark and outlier noun, arranged in pairs
    int outlier_pair_points = 4;  // shared points inside each outlier pair
    double unregistered_rate = 0.0;   // extra unregistered images per region
    double outlier_caption_rate = 0.0;  // captions mentioning a wrong concept
    int image_size = 32;
    // Texture signature strength: how far region colors sit from the
    // background gray (1 = fully saturated) and per-pixel noise amplitude.
    // Lower contrast / higher noise make the recognition task harder.
    double texture_contrast = 1.0;
    double texture_noise = 0.04;
    // Amplitude of the scene-anchored pattern inside each region; the pattern
    // follows the 3D content across views, so corresponding pixels match and
    // non-corresponding ones differ.
    double pattern_amplitude = 0.25;
    // Per-view photometric nuisance: each rendered view draws an independent
    // gain per color channel from [1 - view_jitter, 1 + view_jitter].
    double view_jitter = 0.15;
    // Per-region offset added to the region base color. With a nonzero
    // jitter, color alone no longer identifies the concept and recognition
    // must lean on the scene-anchored pattern instead.
    double region_color_jitter = 0.0;
    // Probability that a region wears the color of the next concept in the
    // list ("deceptive" regions). Color-reliant recognizers misclassify
    // these regions with high confidence; pattern-reliant ones do not.
    double color_swap_rate = 0.0;
    // Consecutive concepts in groups of this size share one base color, so
    // color alone cannot separate concepts within a group; telling them
    // apart requires the per-region surface pattern.
    int color_group_size = 1;
    // Split each landmark into one reconstruction per concept polarity
    // (interior / exterior / other), mirroring interior-exterior scans.
    bool group_by_polarity = false;
    // Verify the engineered density separation (planted >= 0.16,
    // outliers <= 0.04) by brute force and fail generation otherwise.
    bool enforce_separation = true;
    std::uint64_t seed = 1;

    void validate() const;
};

struct GeneratedScene {
    std::vector<sfm::Reconstruction> reconstructions;
    corpus::Corpus corpus;
    corpus::NounLexicon lexicon;
    images::ImageStore images;
    images::MaskStore masks;  // per-pixel ground truth, 255 = background
    std::map<std::string, std::string> image_concept;      // image id -> planted concept
    std::map<sfm::PointKey, std::string> point_concept;    // 3D point -> planted concept
};

GeneratedScene generate(const SceneSpec& spec);

// Writes the scene through the public file formats: per-reconstruction
// cameras/images/points text files, corpus + ground truth records, lexicon
// word lists, and the image/mask containers.
void write_scene(const GeneratedScene& scene, const std::string& out_dir);

}  // namespace babelminer::synth
