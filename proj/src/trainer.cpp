#include "babelminer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::trainer {

using nlohmann::json;

namespace {

int conv_out_extent(int in, int stride) {
    // 3x3 kernel, zero padding 1.
    return (in + 2 - 3) / stride + 1;
}

FeatureMap conv_forward(const ConvLayer& layer, const FeatureMap& in) {
    if (in.channels != layer.in_channels) throw Error("conv: channel mismatch");
    int oh = conv_out_extent(in.height, layer.stride);
    int ow = conv_out_extent(in.width, layer.stride);
    FeatureMap out = numerics::make_feature_map(layer.out_channels, oh, ow);
    const int st = layer.stride;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    // Accumulate one (input-channel, tap) plane at a time so the inner loop
    // runs along contiguous rows and vectorizes.
    for (int o = 0; o < layer.out_channels; ++o) {
        double* out_base = &out.at(o, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) out_base[p] = layer.bias[o];
        for (int i = 0; i < layer.in_channels; ++i) {
            const double* in_base =
                in.values.data() + static_cast<std::size_t>(i) * in.height * in.width;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double w =
                        layer.weights[((o * layer.in_channels + i) * 3 + ky) * 3 + kx];
                    for (int y = 0; y < oh; ++y) {
                        const int sy = y * st + ky - 1;
                        if (sy < 0 || sy >= in.height) continue;
                        double* out_row = out_base + static_cast<std::size_t>(y) * ow;
                        const double* in_row = in_base + static_cast<std::size_t>(sy) * in.width;
                        int x0 = 0, x1 = ow;
                        while (x0 < ow && x0 * st + kx - 1 < 0) ++x0;
                        while (x1 > x0 && (x1 - 1) * st + kx - 1 >= in.width) --x1;
                        for (int x = x0; x < x1; ++x) out_row[x] += w * in_row[x * st + kx - 1];
                    }
                }
            }
        }
    }
    return out;
}

void conv_backward(const ConvLayer& layer, const FeatureMap& in, const FeatureMap& grad_out,
                   Vec& grad_weights, Vec& grad_bias, FeatureMap& grad_in) {
    const int st = layer.stride;
    const int oh = grad_out.height, ow = grad_out.width;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int o = 0; o < layer.out_channels; ++o) {
        const double* g_base = grad_out.values.data() + static_cast<std::size_t>(o) * plane;
        double gb = 0.0;
        for (std::size_t p = 0; p < plane; ++p) gb += g_base[p];
        grad_bias[o] += gb;
        for (int i = 0; i < layer.in_channels; ++i) {
            const double* in_base =
                in.values.data() + static_cast<std::size_t>(i) * in.height * in.width;
            double* gi_base = &grad_in.at(i, 0, 0);
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const std::size_t widx = ((o * layer.in_channels + i) * 3 + ky) * 3 + kx;
                    const double w = layer.weights[widx];
                    double gw = 0.0;
                    for (int y = 0; y < oh; ++y) {
                        const int sy = y * st + ky - 1;
                        if (sy < 0 || sy >= in.height) continue;
                        const double* g_row = g_base + static_cast<std::size_t>(y) * ow;
                        const double* in_row = in_base + static_cast<std::size_t>(sy) * in.width;
                        double* gi_row = gi_base + static_cast<std::size_t>(sy) * in.width;
                        int x0 = 0, x1 = ow;
                        while (x0 < ow && x0 * st + kx - 1 < 0) ++x0;
                        while (x1 > x0 && (x1 - 1) * st + kx - 1 >= in.width) --x1;
                        for (int x = x0; x < x1; ++x) {
                            const double g = g_row[x];
                            gw += g * in_row[x * st + kx - 1];
                            gi_row[x * st + kx - 1] += g * w;
                        }
                    }
                    grad_weights[widx] += gw;
                }
            }
        }
    }
}

void tanh_inplace(FeatureMap& map) {
    for (double& v : map.values) v = std::tanh(v);
}

struct ModelGrad {
    std::vector<Vec> layer_weights;
    std::vector<Vec> layer_bias;
    Vec head_weight;
    Vec head_bias;

    static ModelGrad zeros(const ToyModel& model) {
        ModelGrad g;
        for (const auto& layer : model.layers) {
            g.layer_weights.emplace_back(layer.weights.size(), 0.0);
            g.layer_bias.emplace_back(layer.bias.size(), 0.0);
        }
        g.head_weight.assign(model.head_weight.size(), 0.0);
        g.head_bias.assign(model.head_bias.size(), 0.0);
        return g;
    }
};

// Backprop one image: dL/d(raw scores) and extra dL/d(normalized features)
// accumulate into the model gradient.
void backward(const ToyModel& model, const ForwardCache& cache, const FeatureMap& features_hat,
              const FeatureMap& grad_raw_scores, const FeatureMap& grad_features_hat_extra,
              ModelGrad& grad) {
    const int kf = model.feature_channels;
    const int gh = features_hat.height;
    const int gw = features_hat.width;
    const int score_channels = model.num_concepts + 1;

    // Head backward.
    FeatureMap grad_fhat = grad_features_hat_extra;
    for (int c = 0; c < score_channels; ++c) {
        for (int y = 0; y < gh; ++y) {
            for (int x = 0; x < gw; ++x) {
                double gz = grad_raw_scores.at(c, y, x);
                if (gz == 0.0) continue;
                grad.head_bias[c] += gz;
                for (int k = 0; k < kf; ++k) {
                    grad.head_weight[c * kf + k] += gz * features_hat.at(k, y, x);
                    grad_fhat.at(k, y, x) += gz * model.head_weight[c * kf + k];
                }
            }
        }
    }

    // Unit-normalization backward: dF = (g - (g.Fhat) Fhat) / |F|.
    FeatureMap grad_feat = numerics::make_feature_map(kf, gh, gw);
    for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
            double dotv = 0.0;
            for (int k = 0; k < kf; ++k) dotv += grad_fhat.at(k, y, x) * features_hat.at(k, y, x);
            double n = cache.pixel_norms[static_cast<std::size_t>(y) * gw + x];
            for (int k = 0; k < kf; ++k)
                grad_feat.at(k, y, x) =
                    (grad_fhat.at(k, y, x) - dotv * features_hat.at(k, y, x)) / n;
        }
    }

    // Conv stack backward, tanh first at each step.
    FeatureMap grad_post = std::move(grad_feat);
    for (int l = static_cast<int>(model.layers.size()) - 1; l >= 0; --l) {
        const FeatureMap& post = cache.layer_outputs[static_cast<std::size_t>(l)];
        FeatureMap grad_pre = numerics::make_feature_map(post.channels, post.height, post.width);
        for (std::size_t i = 0; i < post.values.size(); ++i)
            grad_pre.values[i] = grad_post.values[i] * (1.0 - post.values[i] * post.values[i]);
        const FeatureMap& in = cache.layer_inputs[static_cast<std::size_t>(l)];
        FeatureMap grad_in = numerics::make_feature_map(in.channels, in.height, in.width);
        conv_backward(model.layers[static_cast<std::size_t>(l)], in, grad_pre,
                      grad.layer_weights[static_cast<std::size_t>(l)],
                      grad.layer_bias[static_cast<std::size_t>(l)], grad_in);
        grad_post = std::move(grad_in);
    }
}

struct AdamState {
    Vec m;
    Vec v;
};

class Adam {
public:
    Adam(ToyModel& model, double weight_decay)
        : model_(model), weight_decay_(weight_decay) {
        for (auto& layer : model.layers) {
            params_.push_back(&layer.weights);
            params_.push_back(&layer.bias);
        }
        params_.push_back(&model.head_weight);
        params_.push_back(&model.head_bias);
        for (Vec* p : params_) states_.push_back({Vec(p->size(), 0.0), Vec(p->size(), 0.0)});
    }

    void step(const ModelGrad& grad, double lr) {
        std::vector<const Vec*> grads;
        for (std::size_t l = 0; l < grad.layer_weights.size(); ++l) {
            grads.push_back(&grad.layer_weights[l]);
            grads.push_back(&grad.layer_bias[l]);
        }
        grads.push_back(&grad.head_weight);
        grads.push_back(&grad.head_bias);

        ++t_;
        double bc1 = 1.0 - std::pow(kBeta1, t_);
        double bc2 = 1.0 - std::pow(kBeta2, t_);
        for (std::size_t p = 0; p < params_.size(); ++p) {
            Vec& theta = *params_[p];
            const Vec& g = *grads[p];
            AdamState& st = states_[p];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                st.m[i] = kBeta1 * st.m[i] + (1.0 - kBeta1) * g[i];
                st.v[i] = kBeta2 * st.v[i] + (1.0 - kBeta2) * g[i] * g[i];
                double mhat = st.m[i] / bc1;
                double vhat = st.v[i] / bc2;
                theta[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
                // Decoupled weight decay.
                theta[i] -= lr * weight_decay_ * theta[i];
            }
        }
    }

private:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    ToyModel& model_;
    double weight_decay_;
    std::vector<Vec*> params_;
    std::vector<AdamState> states_;
    int t_ = 0;
};

// Geometric part of the augmentation: crop window plus output size.
struct AugTransform {
    bool identity = true;
    int x0 = 0, y0 = 0;       // crop origin, source pixels
    int crop_w = 0, crop_h = 0;
    int out_w = 0, out_h = 0;

    // Maps a source-pixel coordinate; returns false when cropped away.
    bool map_pixel(double sx, double sy, double& ox, double& oy) const {
        if (identity) {
            ox = sx;
            oy = sy;
            return true;
        }
        if (sx < x0 || sy < y0 || sx >= x0 + crop_w || sy >= y0 + crop_h) return false;
        ox = (sx - x0) * static_cast<double>(out_w) / crop_w;
        oy = (sy - y0) * static_cast<double>(out_h) / crop_h;
        return true;
    }
};

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    double d = mx - mn;
    s = mx <= 0.0 ? 0.0 : d / mx;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1.0 - s);
    double q = v * (1.0 - f * s);
    double t = v * (1.0 - (1.0 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

FeatureMap augment_image(const FeatureMap& image, const TrainSchedule& sched, Rng& rng,
                         AugTransform& transform) {
    transform = AugTransform{};
    if (!sched.augment) return image;

    int out_w = sched.crop_size > 0 ? sched.crop_size : image.width;
    int out_h = sched.crop_size > 0 ? sched.crop_size : image.height;
    double scale = rng.uniform_real(sched.crop_scale_min, sched.crop_scale_max);
    int crop_w = std::max(1, static_cast<int>(std::lround(scale * image.width)));
    int crop_h = std::max(1, static_cast<int>(std::lround(scale * image.height)));
    crop_w = std::min(crop_w, image.width);
    crop_h = std::min(crop_h, image.height);
    int x0 = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(image.width - crop_w + 1)));
    int y0 = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(image.height - crop_h + 1)));

    transform.identity = false;
    transform.x0 = x0;
    transform.y0 = y0;
    transform.crop_w = crop_w;
    transform.crop_h = crop_h;
    transform.out_w = out_w;
    transform.out_h = out_h;

    FeatureMap out = numerics::make_feature_map(3, out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        int sy = y0 + std::min(crop_h - 1, y * crop_h / out_h);
        for (int x = 0; x < out_w; ++x) {
            int sx = x0 + std::min(crop_w - 1, x * crop_w / out_w);
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = image.at(c, sy, sx);
        }
    }

    // Color jitter: brightness, contrast, saturation, hue.
    double fb = 1.0 + sched.jitter_brightness * rng.uniform_real(-1.0, 1.0);
    double fc = 1.0 + sched.jitter_contrast * rng.uniform_real(-1.0, 1.0);
    double fs = 1.0 + sched.jitter_saturation * rng.uniform_real(-1.0, 1.0);
    double dh = sched.jitter_hue * rng.uniform_real(-1.0, 1.0);
    double mean = 0.0;
    for (double v : out.values) mean += v;
    mean /= static_cast<double>(out.values.size());
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            double r = out.at(0, y, x) * fb;
            double g = out.at(1, y, x) * fb;
            double b = out.at(2, y, x) * fb;
            r = mean + (r - mean) * fc;
            g = mean + (g - mean) * fc;
            b = mean + (b - mean) * fc;
            double h, s, v;
            rgb_to_hsv(std::clamp(r, 0.0, 1.0), std::clamp(g, 0.0, 1.0), std::clamp(b, 0.0, 1.0),
                       h, s, v);
            s = std::clamp(s * fs, 0.0, 1.0);
            h = std::fmod(h + dh + 1.0, 1.0);
            hsv_to_rgb(h, s, v, r, g, b);
            out.at(0, y, x) = std::clamp(r, 0.0, 1.0);
            out.at(1, y, x) = std::clamp(g, 0.0, 1.0);
            out.at(2, y, x) = std::clamp(b, 0.0, 1.0);
        }
    }
    return out;
}

// Re-expresses a base-grid correspondence endpoint in the augmented image's
// grid; false when the crop drops it.
bool map_grid_point(const pair_engine::GridPoint& p, const AugTransform& t, int stride,
                    int out_grid_w, int out_grid_h, pair_engine::GridPoint& out) {
    double sx = (p.x + 0.5) * stride;
    double sy = (p.y + 0.5) * stride;
    double ox, oy;
    if (!t.map_pixel(sx, sy, ox, oy)) return false;
    int gx = static_cast<int>(ox) / stride;
    int gy = static_cast<int>(oy) / stride;
    if (gx < 0 || gy < 0 || gx >= out_grid_w || gy >= out_grid_h) return false;
    out = {gx, gy};
    return true;
}

struct BinaryWriter {
    std::string out;
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out += s;
    }
    void doubles(const Vec& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        std::size_t base = out.size();
        out.resize(base + v.size() * sizeof(double));
        std::memcpy(out.data() + base, v.data(), v.size() * sizeof(double));
    }
};

struct BinaryReader {
    const std::string& in;
    std::size_t pos = 0;
    explicit BinaryReader(const std::string& s) : in(s) {}
    std::uint32_t u32() {
        if (pos + 4 > in.size()) throw ParseError("checkpoint truncated");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::string str() {
        std::uint32_t len = u32();
        if (pos + len > in.size()) throw ParseError("checkpoint truncated");
        std::string s = in.substr(pos, len);
        pos += len;
        return s;
    }
    Vec doubles() {
        std::uint32_t n = u32();
        if (pos + n * sizeof(double) > in.size()) throw ParseError("checkpoint truncated");
        Vec v(n);
        std::memcpy(v.data(), in.data() + pos, n * sizeof(double));
        pos += n * sizeof(double);
        return v;
    }
};

}  // namespace

ToyModel ToyModel::init(int num_concepts, int feature_channels, std::uint64_t seed) {
    if (num_concepts < 1) throw ConfigError("ToyModel: need at least one concept");
    ToyModel model;
    model.num_concepts = num_concepts;
    model.feature_channels = feature_channels;
    model.grid_stride = 4;
    int mid = std::max(8, feature_channels / 2);
    model.layers.push_back({3, mid, 2});
    model.layers.push_back({mid, feature_channels, 2});
    model.layers.push_back({feature_channels, feature_channels, 1});

    Rng rng = Rng(seed).child("model_init");
    for (auto& layer : model.layers) {
        std::size_t n = static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9;
        layer.weights.resize(n);
        double scale = 1.0 / std::sqrt(static_cast<double>(layer.in_channels) * 9.0);
        for (double& w : layer.weights) w = rng.normal() * scale;
        layer.bias.assign(static_cast<std::size_t>(layer.out_channels), 0.0);
    }
    // Zero head: uniform initial class scores, so the ln(C) property is exact
    // at step 0.
    model.head_weight.assign(static_cast<std::size_t>(num_concepts + 1) * feature_channels, 0.0);
    model.head_bias.assign(static_cast<std::size_t>(num_concepts + 1), 0.0);
    return model;
}

ForwardResult forward(const ToyModel& model, const FeatureMap& image, ForwardCache* cache) {
    if (image.channels != 3) throw Error("forward: expected a 3-channel image");
    if (image.width % model.grid_stride != 0 || image.height % model.grid_stride != 0)
        throw Error("forward: image dimensions must be divisible by the grid stride");

    FeatureMap current = image;
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.layer_inputs.clear();
    c.layer_outputs.clear();
    for (const auto& layer : model.layers) {
        c.layer_inputs.push_back(current);
        current = conv_forward(layer, current);
        tanh_inplace(current);
        c.layer_outputs.push_back(current);
    }
    c.pre_norm = current;

    // Unit-normalize each pixel descriptor, keeping the norms for backprop.
    const int gh = current.height, gw = current.width;
    c.pixel_norms.assign(static_cast<std::size_t>(gh) * gw, 0.0);
    for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
            double sq = 0.0;
            for (int k = 0; k < model.feature_channels; ++k)
                sq += current.at(k, y, x) * current.at(k, y, x);
            double n = std::sqrt(sq);
            // tanh stacks can produce near-zero descriptors at init; floor
            // the norm rather than fail.
            n = std::max(n, 1e-8);
            c.pixel_norms[static_cast<std::size_t>(y) * gw + x] = n;
            for (int k = 0; k < model.feature_channels; ++k) current.at(k, y, x) /= n;
        }
    }
    current.normalized = true;

    // Linear 1x1 head to C+1 raw score channels.
    FeatureMap raw = numerics::make_feature_map(model.num_concepts + 1, gh, gw);
    for (int ch = 0; ch <= model.num_concepts; ++ch) {
        for (int y = 0; y < gh; ++y) {
            for (int x = 0; x < gw; ++x) {
                double acc = model.head_bias[ch];
                for (int k = 0; k < model.feature_channels; ++k)
                    acc += model.head_weight[ch * model.feature_channels + k] * current.at(k, y, x);
                raw.at(ch, y, x) = acc;
            }
        }
    }

    ForwardResult out;
    out.features = std::move(current);
    out.maps = numerics::make_score_maps(std::move(raw), model.num_concepts,
                                         numerics::Aggregator::by_name(model.aggregator));
    return out;
}

void TrainSchedule::validate() const {
    if (epochs < 1) throw ConfigError("schedule: epochs must be >= 1");
    for (int e : decay_epochs)
        if (e >= epochs) throw ConfigError("schedule: decay epoch beyond total epochs");
    if (pretrain_epochs < 0 || pretrain_epochs > epochs)
        throw ConfigError("schedule: invalid pretrain_epochs");
    if (learning_rate <= 0.0) throw ConfigError("schedule: learning rate must be positive");
    if (crop_scale_min <= 0.0 || crop_scale_max < crop_scale_min || crop_scale_max > 1.0)
        throw ConfigError("schedule: invalid crop scale range");
}

double TrainSchedule::lr_at_epoch(int epoch) const {
    double lr = learning_rate;
    for (int e : decay_epochs)
        if (epoch >= e) lr *= decay_factor;
    return lr;
}

TrainResult train(ToyModel& model,
                  const std::vector<pair_engine::Batch>& batches,
                  const images::ImageStore& store,
                  const std::map<std::string, int>& labels,
                  const TrainSchedule& schedule,
                  const numerics::LossConfig& loss_config,
                  std::uint64_t seed) {
    schedule.validate();
    loss_config.validate();
    if (batches.empty()) throw Error("train: empty batch stream");

    const auto& agg = numerics::Aggregator::by_name(model.aggregator);
    Adam optimizer(model, schedule.weight_decay);
    Rng root = Rng(seed).child("train");
    TrainResult result;
    int step = 0;

    for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
        double lr = schedule.lr_at_epoch(epoch);
        auto phase = epoch < schedule.pretrain_epochs ? numerics::TrainPhase::Pretrain
                                                      : numerics::TrainPhase::Full;
        Rng epoch_rng = root.child("epoch" + std::to_string(epoch));

        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const pair_engine::Batch& batch = batches[bi];
            Rng batch_rng = epoch_rng.child("batch" + std::to_string(bi));
            const std::size_t n_items = batch.items.size();
            const double pair_norm = 1.0 / static_cast<double>(batch.pairs.size());

            std::vector<ForwardResult> fwd(n_items);
            std::vector<ForwardCache> caches(n_items);
            std::vector<AugTransform> transforms(n_items);
            for (std::size_t i = 0; i < n_items; ++i) {
                Rng aug_rng = batch_rng.child("aug" + std::to_string(i));
                FeatureMap img = augment_image(store.get(batch.items[i].image_id), schedule,
                                               aug_rng, transforms[i]);
                fwd[i] = forward(model, img, &caches[i]);
            }

            const int gh = fwd[0].features.height;
            const int gw = fwd[0].features.width;
            std::vector<FeatureMap> grad_z, grad_fhat;
            for (std::size_t i = 0; i < n_items; ++i) {
                grad_z.push_back(numerics::make_feature_map(model.num_concepts + 1, gh, gw));
                grad_fhat.push_back(numerics::make_feature_map(model.feature_channels, gh, gw));
            }

            double sum_cls_im = 0.0, sum_cls_pix = 0.0, sum_3d = 0.0;
            std::size_t n_cls = 0, n_3d = 0;

            // Classification terms.
            for (std::size_t i = 0; i < n_items; ++i) {
                auto it = labels.find(batch.items[i].image_id);
                if (it == labels.end()) continue;
                auto cls = numerics::classification_loss(fwd[i].maps, it->second, phase,
                                                         loss_config, agg);
                sum_cls_im += cls.loss_image;
                sum_cls_pix += cls.loss_pixel;
                ++n_cls;
                for (std::size_t v = 0; v < grad_z[i].values.size(); ++v)
                    grad_z[i].values[v] += cls.grad_raw.values[v] * pair_norm;
            }

            // 3D consistency terms on real pairs.
            if (loss_config.lambda != 0.0) {
                for (std::size_t p = 0; p < batch.pairs.size(); ++p) {
                    const auto& pair = batch.pairs[p];
                    if (!pair.real || pair.correspondences.empty()) continue;

                    // Transform correspondences through both crops.
                    struct LiveCorr {
                        pair_engine::GridPoint a, b;
                    };
                    std::vector<LiveCorr> live;
                    for (const auto& corr : pair.correspondences) {
                        LiveCorr lc;
                        if (!map_grid_point(corr.a, transforms[pair.item_a], model.grid_stride,
                                            gw, gh, lc.a))
                            continue;
                        if (!map_grid_point(corr.b, transforms[pair.item_b], model.grid_stride,
                                            gw, gh, lc.b))
                            continue;
                        live.push_back(lc);
                    }
                    if (live.empty()) continue;

                    double corr_norm =
                        loss_config.lambda * pair_norm / static_cast<double>(live.size());
                    Rng pair_rng = batch_rng.child("pair3d" + std::to_string(p));
                    for (std::size_t ci = 0; ci < live.size(); ++ci) {
                        const auto& lc = live[ci];
                        Vec f_p = fwd[pair.item_a].features.pixel(lc.a.y, lc.a.x);
                        Vec f_plus = fwd[pair.item_b].features.pixel(lc.b.y, lc.b.x);
                        std::uint64_t corr_seed =
                            pair_rng.child("corr" + std::to_string(ci)).next_u64();

                        switch (loss_config.variant) {
                            case numerics::LossVariant::NceInter: {
                                auto negs = pair_engine::sample_negatives_inter(
                                    batch, p, loss_config.num_negatives, gw, gh, corr_seed);
                                std::vector<Vec> f_negs;
                                for (const auto& n : negs)
                                    f_negs.push_back(fwd[n.batch_image_index].features.pixel(
                                        n.pixel.y, n.pixel.x));
                                auto l = numerics::nce_loss(f_p, f_plus, f_negs,
                                                            loss_config.temperature);
                                sum_3d += l.loss;
                                ++n_3d;
                                for (int k = 0; k < model.feature_channels; ++k) {
                                    grad_fhat[pair.item_a].at(k, lc.a.y, lc.a.x) +=
                                        corr_norm * l.grad_p[k];
                                    grad_fhat[pair.item_b].at(k, lc.b.y, lc.b.x) +=
                                        corr_norm * l.grad_p_plus[k];
                                }
                                for (std::size_t ni = 0; ni < negs.size(); ++ni)
                                    for (int k = 0; k < model.feature_channels; ++k)
                                        grad_fhat[negs[ni].batch_image_index].at(
                                            k, negs[ni].pixel.y, negs[ni].pixel.x) +=
                                            corr_norm * l.grad_negs[ni][k];
                                break;
                            }
                            case numerics::LossVariant::NceIntra: {
                                auto pixels = pair_engine::sample_negatives_intra(
                                    lc.b, loss_config.num_negatives, gw, gh, corr_seed);
                                std::vector<Vec> f_negs;
                                for (const auto& px : pixels)
                                    f_negs.push_back(fwd[pair.item_b].features.pixel(px.y, px.x));
                                auto l = numerics::nce_loss(f_p, f_plus, f_negs,
                                                            loss_config.temperature);
                                sum_3d += l.loss;
                                ++n_3d;
                                for (int k = 0; k < model.feature_channels; ++k) {
                                    grad_fhat[pair.item_a].at(k, lc.a.y, lc.a.x) +=
                                        corr_norm * l.grad_p[k];
                                    grad_fhat[pair.item_b].at(k, lc.b.y, lc.b.x) +=
                                        corr_norm * l.grad_p_plus[k];
                                }
                                for (std::size_t ni = 0; ni < pixels.size(); ++ni)
                                    for (int k = 0; k < model.feature_channels; ++k)
                                        grad_fhat[pair.item_b].at(k, pixels[ni].y, pixels[ni].x) +=
                                            corr_norm * l.grad_negs[ni][k];
                                break;
                            }
                            case numerics::LossVariant::Mse: {
                                auto l = numerics::mse_loss(f_p, f_plus);
                                sum_3d += l.loss;
                                ++n_3d;
                                for (int k = 0; k < model.feature_channels; ++k) {
                                    grad_fhat[pair.item_a].at(k, lc.a.y, lc.a.x) +=
                                        corr_norm * l.grad_p[k];
                                    grad_fhat[pair.item_b].at(k, lc.b.y, lc.b.x) +=
                                        corr_norm * l.grad_p_plus[k];
                                }
                                break;
                            }
                            case numerics::LossVariant::Triplet: {
                                auto negs = pair_engine::sample_negatives_inter(batch, p, 1, gw,
                                                                                gh, corr_seed);
                                Vec f_minus = fwd[negs[0].batch_image_index].features.pixel(
                                    negs[0].pixel.y, negs[0].pixel.x);
                                auto l = numerics::triplet_loss(f_p, f_plus, f_minus,
                                                                loss_config.triplet_margin,
                                                                loss_config.triplet_form);
                                sum_3d += l.loss;
                                ++n_3d;
                                for (int k = 0; k < model.feature_channels; ++k) {
                                    grad_fhat[pair.item_a].at(k, lc.a.y, lc.a.x) +=
                                        corr_norm * l.grad_p[k];
                                    grad_fhat[pair.item_b].at(k, lc.b.y, lc.b.x) +=
                                        corr_norm * l.grad_p_plus[k];
                                    grad_fhat[negs[0].batch_image_index].at(
                                        k, negs[0].pixel.y, negs[0].pixel.x) +=
                                        corr_norm * l.grad_p_minus[k];
                                }
                                break;
                            }
                        }
                    }
                }
            }

            ModelGrad grad = ModelGrad::zeros(model);
            for (std::size_t i = 0; i < n_items; ++i)
                backward(model, caches[i], fwd[i].features, grad_z[i], grad_fhat[i], grad);

            TraceEntry entry;
            entry.step = step;
            entry.epoch = epoch;
            entry.loss_cls_im = n_cls ? sum_cls_im / static_cast<double>(n_cls) : 0.0;
            entry.loss_cls_pix = n_cls ? sum_cls_pix / static_cast<double>(n_cls) : 0.0;
            entry.loss_3d = n_3d ? sum_3d / static_cast<double>(n_3d) : 0.0;
            entry.total = entry.loss_cls_im + entry.loss_cls_pix +
                          loss_config.lambda * entry.loss_3d;
            if (!std::isfinite(entry.total))
                throw Error("train: non-finite loss at step " + std::to_string(step) +
                            " (epoch " + std::to_string(epoch) + ", cls_im=" +
                            std::to_string(entry.loss_cls_im) + ", cls_pix=" +
                            std::to_string(entry.loss_cls_pix) + ", l3d=" +
                            std::to_string(entry.loss_3d) + ")");
            result.trace.push_back(entry);

            optimizer.step(grad, lr);
            ++step;
        }
    }
    return result;
}

Segmentation segment_2d(const ScoreMaps& maps, double background_power) {
    Segmentation out;
    // Image-level label: argmax of y.
    int best = 0;
    for (int c = 1; c < maps.num_concepts; ++c)
        if (maps.image_scores[c] > maps.image_scores[best]) best = c;
    out.label = best;

    const int bg = maps.background_channel();
    out.mask.assign(static_cast<std::size_t>(maps.raw.height) * maps.raw.width, 0);
    for (int y = 0; y < maps.raw.height; ++y)
        for (int x = 0; x < maps.raw.width; ++x) {
            double weakened = std::pow(maps.y_pix.at(bg, y, x), background_power);
            if (maps.y_pix.at(best, y, x) > weakened)
                out.mask[static_cast<std::size_t>(y) * maps.raw.width + x] = 1;
        }
    return out;
}

double mean_correspondence_similarity(
    const ToyModel& model,
    const images::ImageStore& store,
    const std::vector<std::pair<std::string, std::string>>& image_pairs,
    const std::vector<std::vector<pair_engine::GridCorrespondence>>& correspondences) {
    if (image_pairs.size() != correspondences.size())
        throw Error("mean_correspondence_similarity: size mismatch");
    std::map<std::string, FeatureMap> cache;
    auto features_of = [&](const std::string& id) -> const FeatureMap& {
        auto it = cache.find(id);
        if (it != cache.end()) return it->second;
        return cache.emplace(id, forward(model, store.get(id)).features).first->second;
    };

    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < image_pairs.size(); ++i) {
        const FeatureMap& fa = features_of(image_pairs[i].first);
        const FeatureMap& fb = features_of(image_pairs[i].second);
        for (const auto& c : correspondences[i]) {
            if (c.a.x >= fa.width || c.a.y >= fa.height || c.b.x >= fb.width ||
                c.b.y >= fb.height)
                continue;
            Vec va = fa.pixel(c.a.y, c.a.x);
            Vec vb = fb.pixel(c.b.y, c.b.x);
            sum += numerics::similarity(va, vb, 1.0);
            ++count;
        }
    }
    if (count == 0) throw Error("mean_correspondence_similarity: no usable correspondences");
    return sum / static_cast<double>(count);
}

std::string serialize_trace(const std::vector<TraceEntry>& trace) {
    std::ostringstream out;
    for (const auto& e : trace) {
        json rec;
        rec["step"] = e.step;
        rec["epoch"] = e.epoch;
        rec["L_cls_im"] = e.loss_cls_im;
        rec["L_cls_pix"] = e.loss_cls_pix;
        rec["L_3D"] = e.loss_3d;
        rec["total"] = e.total;
        out << rec.dump() << "\n";
    }
    return out.str();
}

void ToyModel::save(const std::string& path) const {
    BinaryWriter w;
    w.out.append("BMT1", 4);
    json config;
    config["num_concepts"] = num_concepts;
    config["feature_channels"] = feature_channels;
    config["grid_stride"] = grid_stride;
    config["aggregator"] = aggregator;
    json layer_spec = json::array();
    for (const auto& layer : layers)
        layer_spec.push_back({{"in", layer.in_channels}, {"out", layer.out_channels},
                              {"stride", layer.stride}});
    config["layers"] = layer_spec;
    w.str(config.dump());
    w.u32(static_cast<std::uint32_t>(layers.size()));
    for (const auto& layer : layers) {
        w.doubles(layer.weights);
        w.doubles(layer.bias);
    }
    w.doubles(head_weight);
    w.doubles(head_bias);
    write_file(path, w.out);
}

ToyModel ToyModel::load(const std::string& path) {
    std::string bytes = read_file(path);
    if (bytes.size() < 4 || bytes.compare(0, 4, "BMT1") != 0)
        throw ParseError("not a model checkpoint: " + path);
    BinaryReader r(bytes);
    r.pos = 4;
    json config = json::parse(r.str());
    ToyModel model;
    model.num_concepts = config.at("num_concepts").get<int>();
    model.feature_channels = config.at("feature_channels").get<int>();
    model.grid_stride = config.at("grid_stride").get<int>();
    model.aggregator = config.at("aggregator").get<std::string>();
    std::uint32_t n_layers = r.u32();
    if (n_layers != config.at("layers").size()) throw ParseError("checkpoint layer count mismatch");
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        ConvLayer layer;
        layer.in_channels = config["layers"][i].at("in").get<int>();
        layer.out_channels = config["layers"][i].at("out").get<int>();
        layer.stride = config["layers"][i].at("stride").get<int>();
        layer.weights = r.doubles();
        layer.bias = r.doubles();
        if (layer.weights.size() !=
                static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9 ||
            layer.bias.size() != static_cast<std::size_t>(layer.out_channels))
            throw ParseError("checkpoint layer shape mismatch");
        model.layers.push_back(std::move(layer));
    }
    model.head_weight = r.doubles();
    model.head_bias = r.doubles();
    return model;
}

}  // namespace babelminer::trainer
