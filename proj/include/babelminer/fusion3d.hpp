#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "babelminer/images.hpp"
#include "babelminer/numerics.hpp"
#include "babelminer/sfm.hpp"
#include "babelminer/trainer.hpp"

namespace babelminer::fusion3d {

struct ScoredPoint {
    sfm::PointKey point;
    double xyz[3] = {0, 0, 0};
    numerics::Vec probabilities;  // C+1, background last, sums to 1
    double confidence = 0.0;      // max foreground probability
    std::optional<int> assigned_concept;  // absent when ambiguous
};

struct ScoredCloud {
    std::string reconstruction_id;
    std::string landmark_id;
    std::vector<std::string> concept_names;  // index -> concept
    double confidence_threshold = 0.5;       // phi
    std::vector<ScoredPoint> points;
};

struct ConceptPolarity {
    std::set<std::string> interior = {"organ", "nave", "altar", "choir"};
    std::set<std::string> exterior = {"portal", "facade", "tower"};
};

// Averages the normalized descriptors of the point's 2D projections, applies
// the linear head, softmaxes. Equals averaging pre-softmax head outputs.
numerics::Vec fuse_point(const trainer::ToyModel& model,
                         const std::vector<std::pair<const numerics::FeatureMap*, sfm::Pixel>>& projections,
                         int image_w, int image_h);

// Scores every point of every reconstruction. image_of maps an indexed image
// key to a corpus image id present in the store; keys mapping to an empty id
// are skipped as unprocessable views.
std::vector<ScoredCloud> score_clouds(const trainer::ToyModel& model,
                                      const std::vector<sfm::Reconstruction>& recs,
                                      const images::ImageStore& store,
                                      const std::map<sfm::ImageKey, std::string>& image_of,
                                      const std::vector<std::string>& concept_names,
                                      double phi);

// Fraction of ambiguous points per landmark, unweighted mean over landmarks.
double theta(const std::vector<ScoredCloud>& clouds, double phi);

// Interior/exterior mixing error, weighted by reconstruction point count.
double delta(const std::vector<ScoredCloud>& clouds, const ConceptPolarity& polarity, double phi);

// ASCII polygon-format export; ambiguous points gray when included.
std::string export_ply(const ScoredCloud& cloud,
                       const std::map<std::string, std::array<std::uint8_t, 3>>& palette,
                       bool include_ambiguous = false);

struct PlyVertex {
    double x, y, z;
    std::uint8_t r, g, b;
};

std::vector<PlyVertex> parse_ply(const std::string& text);

std::string serialize_cloud(const ScoredCloud& cloud);

}  // namespace babelminer::fusion3d
