#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "babelminer/images.hpp"
#include "babelminer/numerics.hpp"
#include "babelminer/pair_engine.hpp"

namespace babelminer::trainer {

using numerics::FeatureMap;
using numerics::ScoreMaps;
using numerics::Vec;

struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    Vec weights;  // [out][in][3][3]
    Vec bias;     // [out]
};

// Small fixed-topology per-pixel featurizer: three 3x3 filter banks with
// tanh nonlinearities, followed by unit normalization and a linear 1x1
// classifier head producing C+1 score channels.
struct ToyModel {
    int num_concepts = 0;       // C
    int feature_channels = 32;  // K_f
    int grid_stride = 4;        // product of layer strides
    std::vector<ConvLayer> layers;
    Vec head_weight;  // [(C+1)][K_f]
    Vec head_bias;    // [(C+1)]
    std::string aggregator = "ngwp";

    static ToyModel init(int num_concepts, int feature_channels, std::uint64_t seed);

    void save(const std::string& path) const;
    static ToyModel load(const std::string& path);
};

struct ForwardResult {
    FeatureMap features;  // unit-normalized, K_f x gh x gw
    ScoreMaps maps;
};

// Internal activations kept for backprop.
struct ForwardCache {
    std::vector<FeatureMap> layer_inputs;   // input to each conv layer
    std::vector<FeatureMap> layer_outputs;  // post-tanh output of each layer
    FeatureMap pre_norm;                    // features before normalization
    std::vector<double> pixel_norms;        // per grid pixel
};

ForwardResult forward(const ToyModel& model, const FeatureMap& image,
                      ForwardCache* cache = nullptr);

struct TrainSchedule {
    int epochs = 25;
    std::set<int> decay_epochs = {15, 20};
    double decay_factor = 0.1;
    int pretrain_epochs = 5;
    double weight_decay = 5e-4;
    double learning_rate = 1e-3;
    // Photometric / geometric augmentation of the cited recipe; optional at
    // desk scale.
    bool augment = false;
    int crop_size = 0;  // 0 = keep input size
    double crop_scale_min = 0.9;
    double crop_scale_max = 1.0;
    double jitter_brightness = 0.3;
    double jitter_contrast = 0.3;
    double jitter_saturation = 0.3;
    double jitter_hue = 0.1;

    void validate() const;
    double lr_at_epoch(int epoch) const;
};

struct TraceEntry {
    int step = 0;
    int epoch = 0;
    double loss_cls_im = 0.0;
    double loss_cls_pix = 0.0;
    double loss_3d = 0.0;
    double total = 0.0;
};

struct TrainResult {
    std::vector<TraceEntry> trace;
};

// Runs the full objective over the batch stream: one pass over `batches`
// per epoch. Labels map corpus image ids to class indices. Throws on a
// non-finite loss with a diagnostic snapshot in the message.
TrainResult train(ToyModel& model,
                  const std::vector<pair_engine::Batch>& batches,
                  const images::ImageStore& store,
                  const std::map<std::string, int>& labels,
                  const TrainSchedule& schedule,
                  const numerics::LossConfig& loss_config,
                  std::uint64_t seed);

struct Segmentation {
    int label = 0;  // argmax image-level concept
    std::vector<std::uint8_t> mask;  // gh*gw, row-major
};

// mask[p] = 1 iff y_pix[label][p] > y_pix[background][p]^power.
Segmentation segment_2d(const ScoreMaps& maps, double background_power = 4.0);

// Mean cosine similarity of corresponding descriptors under the current
// model; augmentation-free, used for held-out evaluation.
double mean_correspondence_similarity(const ToyModel& model,
                                      const images::ImageStore& store,
                                      const std::vector<std::pair<std::string, std::string>>& image_pairs,
                                      const std::vector<std::vector<pair_engine::GridCorrespondence>>& correspondences);

std::string serialize_trace(const std::vector<TraceEntry>& trace);

}  // namespace babelminer::trainer
