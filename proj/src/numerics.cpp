#include "babelminer/numerics.hpp"

#include <algorithm>
#include <cmath>

#include "babelminer/common.hpp"

namespace babelminer::numerics {

namespace {

constexpr double kNgwpEps = 1e-4;
constexpr double kFocalP = 3.0;
constexpr double kFocalLambda = 0.01;

double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const Vec& a) {
    return std::sqrt(dot(a, a));
}

void require_unit(const Vec& v, const char* what) {
    if (std::abs(norm(v) - 1.0) > 1e-6)
        throw Error(std::string(what) + ": descriptor is not unit-normalized");
}

void require_same_length(const Vec& a, const Vec& b, const char* what) {
    if (a.size() != b.size()) throw Error(std::string(what) + ": descriptor length mismatch");
}

}  // namespace

Vec FeatureMap::pixel(int y, int x) const {
    Vec v(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) v[static_cast<std::size_t>(c)] = at(c, y, x);
    return v;
}

FeatureMap make_feature_map(int channels, int height, int width) {
    FeatureMap map;
    map.channels = channels;
    map.height = height;
    map.width = width;
    map.values.assign(static_cast<std::size_t>(channels) * height * width, 0.0);
    return map;
}

void LossConfig::validate() const {
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (num_negatives < 1) throw ConfigError("num_negatives must be >= 1");
    if (triplet_margin < 0.0) throw ConfigError("triplet margin must be >= 0");
    if (pixel_confidence_cutoff <= 0.0 || pixel_confidence_cutoff >= 1.0)
        throw ConfigError("pixel confidence cutoff must be in (0,1)");
}

void normalize_features(FeatureMap& map) {
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            double sq = 0.0;
            for (int c = 0; c < map.channels; ++c) sq += map.at(c, y, x) * map.at(c, y, x);
            double n = std::sqrt(sq);
            if (n < 1e-12)
                throw Error("normalize_features: degenerate (zero-norm) descriptor at pixel (" +
                            std::to_string(x) + "," + std::to_string(y) + ")");
            for (int c = 0; c < map.channels; ++c) map.at(c, y, x) /= n;
        }
    }
    map.normalized = true;
}

double similarity(const Vec& f_p, const Vec& f_q, double temperature) {
    require_same_length(f_p, f_q, "similarity");
    if (temperature <= 0.0) throw Error("similarity: temperature must be positive");
    return dot(f_p, f_q) / temperature;
}

PairLoss nce_loss(const Vec& f_p, const Vec& f_p_plus, const std::vector<Vec>& f_negs,
                  double temperature) {
    require_unit(f_p, "nce_loss");
    require_unit(f_p_plus, "nce_loss");
    if (f_negs.empty()) throw Error("nce_loss: at least one negative required");
    for (const Vec& n : f_negs) require_unit(n, "nce_loss");

    const std::size_t m = f_negs.size();
    std::vector<double> phis(m + 1);
    phis[0] = similarity(f_p, f_p_plus, temperature);
    for (std::size_t i = 0; i < m; ++i) phis[i + 1] = similarity(f_p, f_negs[i], temperature);

    double shift = *std::max_element(phis.begin(), phis.end());
    double denom = 0.0;
    for (double phi : phis) denom += std::exp(phi - shift);
    std::vector<double> softmax(m + 1);
    for (std::size_t i = 0; i <= m; ++i) softmax[i] = std::exp(phis[i] - shift) / denom;

    PairLoss out;
    out.loss = -(phis[0] - shift) + std::log(denom);

    // dL/dphi+ = s0 - 1; dL/dphi-_i = s_{i+1}; phi = f_p . f_x / tau.
    const std::size_t dim = f_p.size();
    out.grad_p.assign(dim, 0.0);
    out.grad_p_plus.assign(dim, 0.0);
    out.grad_negs.assign(m, Vec(dim, 0.0));
    double c_plus = (softmax[0] - 1.0) / temperature;
    for (std::size_t d = 0; d < dim; ++d) {
        out.grad_p[d] += c_plus * f_p_plus[d];
        out.grad_p_plus[d] = c_plus * f_p[d];
    }
    for (std::size_t i = 0; i < m; ++i) {
        double c_neg = softmax[i + 1] / temperature;
        for (std::size_t d = 0; d < dim; ++d) {
            out.grad_p[d] += c_neg * f_negs[i][d];
            out.grad_negs[i][d] = c_neg * f_p[d];
        }
    }
    return out;
}

PairLoss mse_loss(const Vec& f_p, const Vec& f_p_plus) {
    require_same_length(f_p, f_p_plus, "mse_loss");
    PairLoss out;
    const std::size_t dim = f_p.size();
    out.grad_p.assign(dim, 0.0);
    out.grad_p_plus.assign(dim, 0.0);
    for (std::size_t d = 0; d < dim; ++d) {
        double diff = f_p[d] - f_p_plus[d];
        out.loss += diff * diff;
        out.grad_p[d] = 2.0 * diff;
        out.grad_p_plus[d] = -2.0 * diff;
    }
    return out;
}

TripletLoss triplet_loss(const Vec& f_p, const Vec& f_p_plus, const Vec& f_p_minus,
                         double margin, TripletForm form) {
    require_same_length(f_p, f_p_plus, "triplet_loss");
    require_same_length(f_p, f_p_minus, "triplet_loss");
    if (margin < 0.0) throw Error("triplet_loss: margin must be >= 0");

    const std::size_t dim = f_p.size();
    double d_plus = 0.0, d_minus = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        double dp = f_p[d] - f_p_plus[d];
        double dm = f_p[d] - f_p_minus[d];
        d_plus += dp * dp;
        d_minus += dm * dm;
    }

    // Standard hinge pulls the positive closer than the negative; the
    // as-printed variant swaps the two distance terms.
    double pre = (form == TripletForm::Standard) ? d_plus - d_minus + margin
                                                 : d_minus - d_plus + margin;
    TripletLoss out;
    out.grad_p.assign(dim, 0.0);
    out.grad_p_plus.assign(dim, 0.0);
    out.grad_p_minus.assign(dim, 0.0);
    if (pre <= 0.0) return out;  // subgradient 0 at and below the hinge

    out.loss = pre;
    double sign = (form == TripletForm::Standard) ? 1.0 : -1.0;
    for (std::size_t d = 0; d < dim; ++d) {
        double dp = f_p[d] - f_p_plus[d];
        double dm = f_p[d] - f_p_minus[d];
        out.grad_p[d] = sign * 2.0 * (dp - dm);
        out.grad_p_plus[d] = sign * -2.0 * dp;
        out.grad_p_minus[d] = sign * 2.0 * dm;
    }
    return out;
}

namespace {

class MeanAggregator final : public Aggregator {
public:
    std::string name() const override { return "mean"; }

    Vec image_scores(const ScoreMaps& maps) const override {
        const FeatureMap& raw = maps.raw;
        const double n = static_cast<double>(raw.height) * raw.width;
        Vec y(static_cast<std::size_t>(maps.num_concepts), 0.0);
        for (int c = 0; c < maps.num_concepts; ++c) {
            double s = 0.0;
            for (int py = 0; py < raw.height; ++py)
                for (int px = 0; px < raw.width; ++px) s += raw.at(c, py, px);
            y[static_cast<std::size_t>(c)] = s / n;
        }
        return y;
    }

    void backprop(const ScoreMaps& maps, const Vec& grad_y, FeatureMap& grad_raw) const override {
        const double n = static_cast<double>(maps.raw.height) * maps.raw.width;
        for (int c = 0; c < maps.num_concepts; ++c)
            for (int py = 0; py < maps.raw.height; ++py)
                for (int px = 0; px < maps.raw.width; ++px)
                    grad_raw.at(c, py, px) += grad_y[static_cast<std::size_t>(c)] / n;
    }
};

// Normalized global weighted pooling plus a focal penalty:
//   y_c = sum_p(pi_cp z_cp) / (eps + sum_p pi_cp)
//         + (1 - m_c)^P * log(lf + m_c),   m_c = mean_p pi_cp.
class NgwpAggregator final : public Aggregator {
public:
    std::string name() const override { return "ngwp"; }

    Vec image_scores(const ScoreMaps& maps) const override {
        const FeatureMap& z = maps.raw;
        const FeatureMap& pi = maps.y_pix;
        const double n = static_cast<double>(z.height) * z.width;
        Vec y(static_cast<std::size_t>(maps.num_concepts), 0.0);
        for (int c = 0; c < maps.num_concepts; ++c) {
            double a = 0.0, b = kNgwpEps;
            for (int py = 0; py < z.height; ++py) {
                for (int px = 0; px < z.width; ++px) {
                    double p = pi.at(c, py, px);
                    a += p * z.at(c, py, px);
                    b += p;
                }
            }
            double m = (b - kNgwpEps) / n;
            y[static_cast<std::size_t>(c)] =
                a / b + std::pow(1.0 - m, kFocalP) * std::log(kFocalLambda + m);
        }
        return y;
    }

    void backprop(const ScoreMaps& maps, const Vec& grad_y, FeatureMap& grad_raw) const override {
        const FeatureMap& z = maps.raw;
        const FeatureMap& pi = maps.y_pix;
        const int channels = z.channels;  // C+1
        const double n = static_cast<double>(z.height) * z.width;

        for (int c = 0; c < maps.num_concepts; ++c) {
            double gy = grad_y[static_cast<std::size_t>(c)];
            if (gy == 0.0) continue;
            double a = 0.0, b = kNgwpEps;
            for (int py = 0; py < z.height; ++py) {
                for (int px = 0; px < z.width; ++px) {
                    a += pi.at(c, py, px) * z.at(c, py, px);
                    b += pi.at(c, py, px);
                }
            }
            double m = (b - kNgwpEps) / n;
            double dfocal_dm = -kFocalP * std::pow(1.0 - m, kFocalP - 1.0) * std::log(kFocalLambda + m) +
                               std::pow(1.0 - m, kFocalP) / (kFocalLambda + m);

            for (int py = 0; py < z.height; ++py) {
                for (int px = 0; px < z.width; ++px) {
                    double pi_cp = pi.at(c, py, px);
                    double z_cp = z.at(c, py, px);
                    for (int k = 0; k < channels; ++k) {
                        double dpi = pi_cp * ((k == c ? 1.0 : 0.0) - pi.at(k, py, px));
                        double da = (k == c ? pi_cp : 0.0) + z_cp * dpi;
                        double db = dpi;
                        double dquot = (da * b - a * db) / (b * b);
                        double dfocal = dfocal_dm * dpi / n;
                        grad_raw.at(k, py, px) += gy * (dquot + dfocal);
                    }
                }
            }
        }
    }
};

const MeanAggregator g_mean;
const NgwpAggregator g_ngwp;

}  // namespace

const Aggregator& Aggregator::ngwp() {
    return g_ngwp;
}

const Aggregator& Aggregator::mean() {
    return g_mean;
}

const Aggregator& Aggregator::by_name(const std::string& name) {
    if (name == "ngwp") return g_ngwp;
    if (name == "mean") return g_mean;
    throw ConfigError("unknown aggregator '" + name + "'");
}

ScoreMaps make_score_maps(FeatureMap raw_scores, int num_concepts, const Aggregator& agg) {
    if (raw_scores.channels != num_concepts + 1)
        throw Error("make_score_maps: raw scores must have C+1 channels");
    ScoreMaps maps;
    maps.num_concepts = num_concepts;
    maps.raw = std::move(raw_scores);
    maps.y_pix = make_feature_map(maps.raw.channels, maps.raw.height, maps.raw.width);
    for (int y = 0; y < maps.raw.height; ++y) {
        for (int x = 0; x < maps.raw.width; ++x) {
            double shift = maps.raw.at(0, y, x);
            for (int c = 1; c < maps.raw.channels; ++c) shift = std::max(shift, maps.raw.at(c, y, x));
            double denom = 0.0;
            for (int c = 0; c < maps.raw.channels; ++c)
                denom += std::exp(maps.raw.at(c, y, x) - shift);
            for (int c = 0; c < maps.raw.channels; ++c)
                maps.y_pix.at(c, y, x) = std::exp(maps.raw.at(c, y, x) - shift) / denom;
        }
    }
    maps.image_scores = agg.image_scores(maps);
    return maps;
}

ClassificationLoss classification_loss(const ScoreMaps& maps, int label, TrainPhase phase,
                                       const LossConfig& config, const Aggregator& agg) {
    if (label < 0 || label >= maps.num_concepts)
        throw Error("classification_loss: label out of range (single one-hot label required)");
    const int C = maps.num_concepts;

    ClassificationLoss out;
    out.grad_raw = make_feature_map(maps.raw.channels, maps.raw.height, maps.raw.width);

    // Image-level term: softmax cross-entropy over y.
    {
        const Vec& y = maps.image_scores;
        double shift = *std::max_element(y.begin(), y.end());
        double denom = 0.0;
        for (double v : y) denom += std::exp(v - shift);
        Vec p(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) p[c] = std::exp(y[c] - shift) / denom;
        out.loss_image = -(y[label] - shift) + std::log(denom);
        Vec grad_y(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) grad_y[c] = p[c] - (c == label ? 1.0 : 0.0);
        agg.backprop(maps, grad_y, out.grad_raw);
    }

    // Pixel-level self-supervised term: confident pixels label themselves.
    if (phase == TrainPhase::Full) {
        struct Selected {
            int x, y, target;
        };
        std::vector<Selected> selected;
        for (int py = 0; py < maps.raw.height; ++py) {
            for (int px = 0; px < maps.raw.width; ++px) {
                int best = 0;
                for (int c = 1; c < maps.raw.channels; ++c)
                    if (maps.y_pix.at(c, py, px) > maps.y_pix.at(best, py, px)) best = c;
                if (maps.y_pix.at(best, py, px) > config.pixel_confidence_cutoff)
                    selected.push_back({px, py, best});
            }
        }
        out.selected_pixels = selected.size();
        if (!selected.empty()) {
            double inv_n = 1.0 / static_cast<double>(selected.size());
            for (const Selected& s : selected) {
                out.loss_pixel += -std::log(maps.y_pix.at(s.target, s.y, s.x)) * inv_n;
                for (int c = 0; c < maps.raw.channels; ++c) {
                    double grad = maps.y_pix.at(c, s.y, s.x) - (c == s.target ? 1.0 : 0.0);
                    out.grad_raw.at(c, s.y, s.x) += grad * inv_n;
                }
            }
        }
    }

    out.total = out.loss_image + out.loss_pixel;
    return out;
}

double total_loss(const std::vector<double>& pair_losses, double cls_loss_a, double cls_loss_b,
                  double lambda) {
    double total = cls_loss_a + cls_loss_b;
    if (!pair_losses.empty()) {
        double sum = 0.0;
        for (double l : pair_losses) sum += l;
        total += lambda * sum / static_cast<double>(pair_losses.size());
    }
    return total;
}

double grad_check(const GradFn& fn, const Vec& point, double eps) {
    Vec analytic(point.size(), 0.0);
    double value = fn(point, analytic);
    if (!std::isfinite(value)) throw Error("grad_check: non-finite function value");

    double max_rel = 0.0;
    Vec x = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        double orig = x[i];
        Vec scratch(point.size());
        x[i] = orig + eps;
        double fp = fn(x, scratch);
        x[i] = orig - eps;
        double fm = fn(x, scratch);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw Error("grad_check: non-finite perturbed value");
        double numeric = (fp - fm) / (2.0 * eps);
        double rel = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace babelminer::numerics
