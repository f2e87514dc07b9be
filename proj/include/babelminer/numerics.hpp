#pragma once

#include <functional>
#include <string>
#include <vector>

namespace babelminer::numerics {

using Vec = std::vector<double>;

// Dense per-pixel feature tensor, channel-major: values[c*h*w + y*w + x].
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    Vec values;
    bool normalized = false;

    double at(int c, int y, int x) const { return values[(c * height + y) * width + x]; }
    double& at(int c, int y, int x) { return values[(c * height + y) * width + x]; }
    Vec pixel(int y, int x) const;
    std::size_t size() const { return values.size(); }
};

FeatureMap make_feature_map(int channels, int height, int width);

// Raw class scores z (C+1 channels, background last) plus derived
// per-pixel softmax probabilities and image-level scores.
struct ScoreMaps {
    int num_concepts = 0;  // C; raw holds C+1 channels
    FeatureMap raw;        // unnormalized scores
    FeatureMap y_pix;      // pixel-wise softmax of raw, sums to 1 per pixel
    Vec image_scores;      // y, length C

    int background_channel() const { return num_concepts; }
};

enum class LossVariant { NceInter, NceIntra, Mse, Triplet };
enum class TrainPhase { Pretrain, Full };
enum class TripletForm { Standard, AsPrinted };

struct LossConfig {
    double temperature = 0.07;
    std::size_t num_negatives = 16;
    double lambda = 0.3;
    double triplet_margin = 3.0;
    LossVariant variant = LossVariant::NceInter;
    TripletForm triplet_form = TripletForm::Standard;
    double pixel_confidence_cutoff = 0.6;

    void validate() const;
};

// Scales every pixel vector to unit norm; throws on degenerate vectors.
void normalize_features(FeatureMap& map);

// phi = (f_p . f_q) / tau over unit-norm descriptors.
double similarity(const Vec& f_p, const Vec& f_q, double temperature);

struct PairLoss {
    double loss = 0.0;
    Vec grad_p;
    Vec grad_p_plus;
    std::vector<Vec> grad_negs;  // NCE only
};

// L = -log( e^{phi+} / (e^{phi+} + sum_i e^{phi-_i}) ), log-sum-exp shifted.
PairLoss nce_loss(const Vec& f_p, const Vec& f_p_plus, const std::vector<Vec>& f_negs,
                  double temperature);

// Squared Euclidean distance between descriptors.
PairLoss mse_loss(const Vec& f_p, const Vec& f_p_plus);

struct TripletLoss {
    double loss = 0.0;
    Vec grad_p;
    Vec grad_p_plus;
    Vec grad_p_minus;
};

TripletLoss triplet_loss(const Vec& f_p, const Vec& f_p_plus, const Vec& f_p_minus,
                         double margin, TripletForm form = TripletForm::Standard);

// Image-level score aggregation from raw scores + pixel probabilities.
// "ngwp": normalized global weighted pooling + focal penalty.
// "mean": plain global average pooling of foreground raw scores.
class Aggregator {
public:
    virtual ~Aggregator() = default;
    virtual std::string name() const = 0;
    // Fills image_scores (length C) from raw scores and y_pix.
    virtual Vec image_scores(const ScoreMaps& maps) const = 0;
    // Backprop: given dL/dy (length C), accumulate dL/d(raw scores).
    virtual void backprop(const ScoreMaps& maps, const Vec& grad_y, FeatureMap& grad_raw) const = 0;

    static const Aggregator& ngwp();
    static const Aggregator& mean();
    static const Aggregator& by_name(const std::string& name);
};

// Builds y_pix (softmax) and image scores from raw scores.
ScoreMaps make_score_maps(FeatureMap raw_scores, int num_concepts,
                          const Aggregator& agg = Aggregator::ngwp());

struct ClassificationLoss {
    double loss_image = 0.0;
    double loss_pixel = 0.0;
    double total = 0.0;
    FeatureMap grad_raw;  // dL/d(raw scores), same shape as raw
    std::size_t selected_pixels = 0;
};

// L_cls = L_cls_im + L_cls_pix. Image term: cross-entropy of softmaxed image
// scores against the single one-hot label. Pixel term: cross-entropy against
// each confident pixel's own argmax, averaged over selected pixels;
// dropped in the pretrain phase.
ClassificationLoss classification_loss(const ScoreMaps& maps, int label, TrainPhase phase,
                                       const LossConfig& config = {},
                                       const Aggregator& agg = Aggregator::ngwp());

// L = L_cls(I1) + L_cls(I2) + lambda * mean(pair_losses). Pseudo-pairs pass
// an empty pair_losses list.
double total_loss(const std::vector<double>& pair_losses, double cls_loss_a, double cls_loss_b,
                  double lambda);

// A scalar function returning (value, gradient).
using GradFn = std::function<double(const Vec&, Vec&)>;

// Max over coordinates of |analytic - central difference| / max(1e-8, |cd|).
double grad_check(const GradFn& fn, const Vec& point, double eps);

}  // namespace babelminer::numerics
