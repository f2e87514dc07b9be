// Acceptance gate: one check per release criterion, each printing a single
// PASS/FAIL line. Exit status is nonzero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "babelminer/common.hpp"
#include "babelminer/corpus.hpp"
#include "babelminer/evaluation.hpp"
#include "babelminer/fusion3d.hpp"
#include "babelminer/labeling.hpp"
#include "babelminer/mining.hpp"
#include "babelminer/numerics.hpp"
#include "babelminer/pair_engine.hpp"
#include "babelminer/sfm.hpp"
#include "babelminer/synth.hpp"
#include "babelminer/trainer.hpp"

namespace fs = std::filesystem;
using namespace babelminer;
using numerics::Vec;

namespace {

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

// ---------------------------------------------------------------- helpers

Vec random_unit(Rng& rng, std::size_t dim) {
    Vec v(dim);
    double sq = 0.0;
    for (double& x : v) {
        x = rng.normal();
        sq += x * x;
    }
    double n = std::sqrt(sq);
    for (double& x : v) x /= n;
    return v;
}

// Gradient of loss(normalize(x), ...) given the gradient at the unit vector:
// tangent projection divided by the pre-normalization norm.
Vec through_normalization(const Vec& x, const Vec& grad_unit) {
    double sq = 0.0;
    for (double d : x) sq += d * d;
    double n = std::sqrt(sq);
    Vec u(x.size());
    for (std::size_t d = 0; d < x.size(); ++d) u[d] = x[d] / n;
    double along = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) along += grad_unit[d] * u[d];
    Vec g(x.size());
    for (std::size_t d = 0; d < x.size(); ++d) g[d] = (grad_unit[d] - along * u[d]) / n;
    return g;
}

Vec normalized(const Vec& x) {
    double sq = 0.0;
    for (double d : x) sq += d * d;
    double n = std::sqrt(sq);
    Vec u(x.size());
    for (std::size_t d = 0; d < x.size(); ++d) u[d] = x[d] / n;
    return u;
}

// Random multi-view observation structure: images x points boolean matrix
// with every kept point observed by at least two images.
struct RandomScene {
    sfm::Reconstruction rec;
    std::vector<std::set<std::int64_t>> observed;  // per image (dense index)
    std::vector<int> image_ids;
};

RandomScene random_scene(Rng& rng, bool allow_empty_points) {
    RandomScene out;
    out.rec.reconstruction_id = "r";
    out.rec.landmark_id = "L";
    sfm::Camera cam;
    cam.camera_id = 1;
    cam.model = "PINHOLE";
    cam.width = 64;
    cam.height = 48;
    cam.params = {60.0, 60.0, 32.0, 24.0};
    out.rec.cameras.emplace(1, cam);

    std::size_t n_img = 2 + rng.uniform(5);
    std::size_t n_pts = allow_empty_points && rng.uniform(5) == 0 ? 0 : 1 + rng.uniform(30);

    std::vector<std::vector<bool>> obs(n_img, std::vector<bool>(n_pts, false));
    for (std::size_t p = 0; p < n_pts; ++p) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n_img; ++i) {
            obs[i][p] = rng.uniform(2) == 0;
            hits += obs[i][p];
        }
        while (hits < 2) {  // tracks need two views
            std::size_t i = rng.uniform(n_img);
            if (!obs[i][p]) {
                obs[i][p] = true;
                ++hits;
            }
        }
    }

    out.observed.assign(n_img, {});
    for (std::size_t i = 0; i < n_img; ++i) {
        sfm::Image img;
        img.image_id = static_cast<int>(i + 1);
        img.name = "img" + std::to_string(i);
        img.camera_id = 1;
        for (int q = 0; q < 4; ++q) img.qvec[q] = q == 0 ? 1.0 : 0.0;
        out.rec.images.emplace(img.image_id, img);
        out.image_ids.push_back(img.image_id);
    }
    for (std::size_t p = 0; p < n_pts; ++p) {
        sfm::Point3D pt;
        pt.point3d_id = static_cast<std::int64_t>(p + 1);
        for (int d = 0; d < 3; ++d) pt.xyz[d] = rng.uniform_real(-5.0, 5.0);
        pt.rgb[0] = static_cast<std::uint8_t>(rng.uniform(256));
        pt.error = rng.uniform_real(0.0, 2.0);
        out.rec.points.emplace(pt.point3d_id, pt);
    }
    for (std::size_t i = 0; i < n_img; ++i) {
        auto& img = out.rec.images.at(static_cast<int>(i + 1));
        for (std::size_t p = 0; p < n_pts; ++p) {
            if (!obs[i][p]) continue;
            sfm::Observation o;
            o.point3d_id = static_cast<std::int64_t>(p + 1);
            o.xy.x = rng.uniform_real(0.0, 64.0);
            o.xy.y = rng.uniform_real(0.0, 48.0);
            int idx = static_cast<int>(img.observed_points.size());
            img.observed_points.push_back(o);
            out.rec.points.at(o.point3d_id).track.push_back({img.image_id, idx, o.xy});
            out.observed[i].insert(o.point3d_id);
        }
    }
    sfm::validate_reconstruction(out.rec);
    return out;
}

// ---------------------------------------------------- directional fixture

struct DirectionalOutcome {
    double theta05 = 0.0;
    double delta075 = 0.0;
    double cosine = 0.0;
};

struct DirectionalContext {
    synth::GeneratedScene scene;
    sfm::TrackIndex index;
    std::vector<std::string> class_order;
    std::map<sfm::ImageKey, std::string> name_of_key;
    // Views below `held_from` are used for training; the rest are held out.
    std::vector<sfm::ImageKey> train_keys;
    std::vector<sfm::ImageKey> held_keys;
    // 3D scoring uses only the last held-out view of every region.
    std::map<sfm::ImageKey, std::string> eval_name_of_key;
    std::vector<std::pair<std::string, std::string>> eval_pairs;
    std::vector<std::vector<pair_engine::GridCorrespondence>> eval_corrs;
};

DirectionalContext make_directional_context() {
    synth::SceneSpec spec;
    spec.num_landmarks = 6;
    spec.concepts = {"facade", "organ", "tower", "altar"};
    spec.cameras_per_region = 5;
    spec.points_per_region = 12;
    spec.outlier_nouns = {};
    spec.image_size = 32;
    spec.texture_contrast = 0.35;
    spec.texture_noise = 0.06;
    spec.view_jitter = 0.5;
    spec.pattern_amplitude = 0.12;
    spec.region_color_jitter = 0.05;
    spec.group_by_polarity = true;
    spec.enforce_separation = false;  // only 6 landmarks; density check needs 10-node graphs
    // This scene seed yields several held-out views whose per-view color gain
    // makes a region's color resemble a wrong-polarity concept, so a model
    // that ignores cross-view consistency misassigns confidently.
    spec.seed = 35;

    DirectionalContext ctx;
    ctx.scene = synth::generate(spec);
    ctx.index = sfm::TrackIndex::build(ctx.scene.reconstructions);
    ctx.class_order = spec.concepts;
    for (const auto& rec : ctx.scene.reconstructions)
        for (const auto& [iid, img] : rec.images)
            ctx.name_of_key[sfm::make_image_key(rec.reconstruction_id, iid)] = img.name;

    auto view_of = [](const std::string& name) {
        return std::atoi(name.substr(name.rfind('v') + 1).c_str());
    };
    const int held_from = spec.cameras_per_region - 2;
    for (const auto& [key, name] : ctx.name_of_key) {
        if (view_of(name) < held_from) {
            ctx.train_keys.push_back(key);
        } else {
            ctx.held_keys.push_back(key);
            if (view_of(name) == spec.cameras_per_region - 1) ctx.eval_name_of_key[key] = name;
        }
    }

    // Held-out correspondence pairs are fixed across arms and seeds.
    auto held_pairs = pair_engine::enumerate_pairs(ctx.index, ctx.held_keys, 10);
    for (std::size_t p = 0; p < held_pairs.size(); ++p) {
        ctx.eval_pairs.emplace_back(ctx.name_of_key.at(held_pairs[p].image_a),
                                    ctx.name_of_key.at(held_pairs[p].image_b));
        ctx.eval_corrs.push_back(
            pair_engine::sample_correspondences(held_pairs[p], ctx.index, 8, spec.image_size,
                                                spec.image_size, 8, 8, 99 + p));
    }
    return ctx;
}

DirectionalOutcome run_directional(const DirectionalContext& ctx, double lambda,
                                   std::uint64_t seed,
                                   std::vector<fusion3d::ScoredCloud>* clouds_out = nullptr) {
    const int image_size = 32, grid = 8;
    Rng rng = Rng(seed).child("directional");

    auto pairs = pair_engine::enumerate_pairs(ctx.index, ctx.train_keys, 10);
    rng.shuffle(pairs);
    if (pairs.size() < 48) throw Error("directional fixture: too few image pairs");

    std::vector<std::string> all_ids;
    for (const auto& key : ctx.train_keys) all_ids.push_back(ctx.name_of_key.at(key));
    std::sort(all_ids.begin(), all_ids.end());

    const std::size_t n_batches = 6;
    std::vector<pair_engine::Batch> batches;
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<pair_engine::ImagePair> real(pairs.begin() + b * 8,
                                                 pairs.begin() + b * 8 + 8);
        std::vector<std::string> ids;
        for (const auto& pr : real) {
            ids.push_back(ctx.name_of_key.at(pr.image_a));
            ids.push_back(ctx.name_of_key.at(pr.image_b));
        }
        Rng brng = rng.child("batch" + std::to_string(b));
        std::vector<std::string> singles;
        for (int s = 0; s < 16; ++s) singles.push_back(all_ids[brng.uniform(all_ids.size())]);
        batches.push_back(pair_engine::compose_batch(real, ids, singles, ctx.index, 8,
                                                     image_size, image_size, grid, grid,
                                                     brng.next_u64()));
    }

    std::map<std::string, int> labels;
    for (const auto& [id, concept_name] : ctx.scene.image_concept)
        labels[id] = static_cast<int>(
            std::find(ctx.class_order.begin(), ctx.class_order.end(), concept_name) -
            ctx.class_order.begin());

    auto model = trainer::ToyModel::init(static_cast<int>(ctx.class_order.size()), 32, seed);
    trainer::TrainSchedule schedule;
    schedule.epochs = 100;
    schedule.pretrain_epochs = 3;
    schedule.decay_epochs = {66, 99};
    schedule.learning_rate = 5e-3;
    schedule.weight_decay = 5e-4;
    numerics::LossConfig loss;
    loss.lambda = lambda;
    trainer::train(model, batches, ctx.scene.images, labels, schedule, loss, seed);

    auto clouds = fusion3d::score_clouds(model, ctx.scene.reconstructions, ctx.scene.images,
                                         ctx.eval_name_of_key, ctx.class_order, 0.5);
    if (clouds_out)
        clouds_out->insert(clouds_out->end(), clouds.begin(), clouds.end());
    DirectionalOutcome out;
    out.theta05 = fusion3d::theta(clouds, 0.5);
    try {
        out.delta075 = fusion3d::delta(clouds, fusion3d::ConceptPolarity{}, 0.75);
    } catch (const Error&) {
        out.delta075 = 0.5;  // nothing confidently assigned: worst-case mixing
    }

    // Held-out correspondence similarity on views never used for training.
    out.cosine = trainer::mean_correspondence_similarity(model, ctx.scene.images, ctx.eval_pairs,
                                                         ctx.eval_corrs);
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ------------------------------------------------------------- criteria

std::string c_gradient_suite() {
    auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_case;
    auto note = [&](const std::string& name, double err) {
        if (err > worst) {
            worst = err;
            worst_case = name;
        }
    };
    const double eps = 1e-4;
    numerics::LossConfig lc;

    for (int seed = 0; seed < 100; ++seed) {
        Rng rng = Rng(1000 + seed).child("gradsuite");
        const std::size_t dim = 8;
        Vec p = random_unit(rng, dim);
        // Correlated samples keep all similarities in a moderate band; with
        // temperature 0.07, far-apart negatives get softmax weights below
        // what central differences can resolve at this epsilon.
        auto near_p = [&] {
            Vec v = p;
            for (std::size_t d = 0; d < dim; ++d) v[d] += 0.25 * rng.normal();
            return normalized(v);
        };
        Vec pp = near_p();
        std::vector<Vec> negs;
        for (std::size_t i = 0; i < lc.num_negatives; ++i) negs.push_back(near_p());

        note("nce/anchor", numerics::grad_check(
                               [&](const Vec& x, Vec& g) {
                                   auto r = numerics::nce_loss(normalized(x), pp, negs,
                                                               lc.temperature);
                                   g = through_normalization(x, r.grad_p);
                                   return r.loss;
                               },
                               p, eps));
        note("nce/positive", numerics::grad_check(
                                 [&](const Vec& x, Vec& g) {
                                     auto r = numerics::nce_loss(p, normalized(x), negs,
                                                                 lc.temperature);
                                     g = through_normalization(x, r.grad_p_plus);
                                     return r.loss;
                                 },
                                 pp, eps));
        note("nce/negative", numerics::grad_check(
                                 [&](const Vec& x, Vec& g) {
                                     auto local = negs;
                                     local[0] = normalized(x);
                                     auto r = numerics::nce_loss(p, pp, local, lc.temperature);
                                     g = through_normalization(x, r.grad_negs[0]);
                                     return r.loss;
                                 },
                                 negs[0], eps));
        note("mse", numerics::grad_check(
                        [&](const Vec& x, Vec& g) {
                            auto r = numerics::mse_loss(x, pp);
                            g = r.grad_p;
                            return r.loss;
                        },
                        p, eps));
        for (auto form : {numerics::TripletForm::Standard, numerics::TripletForm::AsPrinted}) {
            // Keep the probe away from the hinge so the subgradient is a
            // gradient in the probed neighborhood.
            auto probe = numerics::triplet_loss(p, pp, negs[0], lc.triplet_margin, form);
            auto active = numerics::triplet_loss(p, pp, negs[0], lc.triplet_margin, form);
            (void)probe;
            double d_plus = 0, d_minus = 0;
            for (std::size_t d = 0; d < dim; ++d) {
                d_plus += (p[d] - pp[d]) * (p[d] - pp[d]);
                d_minus += (p[d] - negs[0][d]) * (p[d] - negs[0][d]);
            }
            double pre = form == numerics::TripletForm::Standard
                             ? d_plus - d_minus + lc.triplet_margin
                             : d_minus - d_plus + lc.triplet_margin;
            if (std::abs(pre) < 1e-2) continue;
            (void)active;
            note("triplet", numerics::grad_check(
                                [&](const Vec& x, Vec& g) {
                                    auto r = numerics::triplet_loss(x, pp, negs[0],
                                                                    lc.triplet_margin, form);
                                    g = r.grad_p;
                                    return r.loss;
                                },
                                p, eps));
            note("triplet/neg", numerics::grad_check(
                                    [&](const Vec& x, Vec& g) {
                                        auto r = numerics::triplet_loss(p, pp, x,
                                                                        lc.triplet_margin, form);
                                        g = r.grad_p_minus;
                                        return r.loss;
                                    },
                                    negs[0], eps));
        }
    }

    // Classification objective: finite differences over the raw score maps.
    const int C = 3, H = 3, W = 3;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng = Rng(5000 + seed).child("clsgrad");
        Vec raw_values;
        bool safe = false;
        for (int attempt = 0; attempt < 50 && !safe; ++attempt) {
            raw_values.assign(static_cast<std::size_t>(C + 1) * H * W, 0.0);
            for (double& v : raw_values) v = rng.uniform_real(-1.0, 1.0);
            auto raw = numerics::make_feature_map(C + 1, H, W);
            raw.values = raw_values;
            auto maps = numerics::make_score_maps(raw, C);
            safe = true;
            for (int y = 0; y < H && safe; ++y)
                for (int x = 0; x < W && safe; ++x) {
                    Vec probs = maps.y_pix.pixel(y, x);
                    std::sort(probs.begin(), probs.end(), std::greater<>());
                    // Away from the confidence cutoff and from argmax ties, so
                    // the piecewise-constant pseudo-label set stays fixed
                    // under the finite-difference perturbation.
                    if (std::abs(probs[0] - lc.pixel_confidence_cutoff) < 5e-3) safe = false;
                    if (probs[0] - probs[1] < 5e-3) safe = false;
                }
        }
        if (!safe) continue;
        int label = static_cast<int>(rng.uniform(C));
        for (auto phase : {numerics::TrainPhase::Pretrain, numerics::TrainPhase::Full}) {
            note("classification", numerics::grad_check(
                                       [&](const Vec& x, Vec& g) {
                                           auto raw = numerics::make_feature_map(C + 1, H, W);
                                           raw.values = x;
                                           auto maps = numerics::make_score_maps(raw, C);
                                           auto r = numerics::classification_loss(maps, label,
                                                                                  phase, lc);
                                           g = r.grad_raw.values;
                                           return r.total;
                                       },
                                       raw_values, eps));
        }
    }

    double secs = elapsed_s(t0);
    if (worst >= 1e-4)
        return "max relative error " + fmt(worst) + " at " + worst_case + " (bound 1e-4)";
    if (secs >= 10.0) return "runtime " + fmt(secs) + "s exceeds 10s";
    return "";
}

std::string c_closed_forms() {
    const std::size_t m = 16;
    const std::size_t dim = 8;
    Vec p(dim, 0.0), pp(dim, 0.0);
    p[0] = 1.0;
    pp[1] = 1.0;
    std::vector<Vec> negs(m, pp);  // every similarity equals phi(p, p+)
    double nce = numerics::nce_loss(p, pp, negs, 0.07).loss;
    if (std::abs(nce - std::log(static_cast<double>(m) + 1.0)) > 1e-9)
        return "uniform-similarity contrastive loss " + fmt(nce) + " != ln(17)";

    const int C = 10;
    auto raw = numerics::make_feature_map(C + 1, 4, 4);
    auto maps = numerics::make_score_maps(raw, C, numerics::Aggregator::mean());
    auto cls = numerics::classification_loss(maps, 3, numerics::TrainPhase::Pretrain, {},
                                             numerics::Aggregator::mean());
    if (std::abs(cls.loss_image - std::log(10.0)) > 1e-9)
        return "uniform-score cross-entropy " + fmt(cls.loss_image) + " != ln(10)";
    return "";
}

std::string c_oracles() {
    Rng root(42);
    // Graph density vs the definition evaluated directly.
    for (int t = 0; t < 50; ++t) {
        Rng rng = root.child("density" + std::to_string(t));
        std::size_t v = 2 + rng.uniform(29);
        mining::AdjacencyGraph g;
        for (std::size_t i = 0; i < v; ++i) g.nodes.push_back("n" + std::to_string(i));
        for (std::size_t a = 0; a < v; ++a)
            for (std::size_t b = a + 1; b < v; ++b)
                if (rng.uniform(3) == 0) g.edges.emplace_back(a, b);
        double expected = 2.0 * static_cast<double>(g.edges.size()) /
                          (static_cast<double>(v) * static_cast<double>(v - 1));
        if (mining::graph_density(g) != expected) return "graph density mismatch";
    }

    // Shared keypoints and keypoint IoU against set operations on the raw
    // observation matrix.
    for (int t = 0; t < 50; ++t) {
        Rng rng = root.child("shared" + std::to_string(t));
        auto scene = random_scene(rng, false);
        auto index = sfm::TrackIndex::build({scene.rec});
        for (std::size_t a = 0; a < scene.image_ids.size(); ++a)
            for (std::size_t b = 0; b < scene.image_ids.size(); ++b) {
                auto ka = sfm::make_image_key("r", scene.image_ids[a]);
                auto kb = sfm::make_image_key("r", scene.image_ids[b]);
                std::vector<std::int64_t> inter, uni;
                std::set_intersection(scene.observed[a].begin(), scene.observed[a].end(),
                                      scene.observed[b].begin(), scene.observed[b].end(),
                                      std::back_inserter(inter));
                std::set_union(scene.observed[a].begin(), scene.observed[a].end(),
                               scene.observed[b].begin(), scene.observed[b].end(),
                               std::back_inserter(uni));
                if (index.shared_keypoints(ka, kb) != inter.size())
                    return "shared keypoint count mismatch";
                double expected = uni.empty() ? 0.0
                                              : static_cast<double>(inter.size()) /
                                                    static_cast<double>(uni.size());
                if (std::abs(index.keypoint_iou(ka, kb) - expected) > 1e-12)
                    return "keypoint IoU mismatch";
            }
    }

    // Average precision against a literal transcription of the definition.
    for (int t = 0; t < 50; ++t) {
        Rng rng = root.child("ap" + std::to_string(t));
        std::size_t n = 1 + rng.uniform(30);
        std::vector<evaluation::ScoredItem> items;
        std::size_t positives = 0;
        for (std::size_t i = 0; i < n; ++i) {
            evaluation::ScoredItem it;
            it.id = "i" + std::to_string(10 + i);
            it.score = 0.25 * static_cast<double>(rng.uniform(5));  // force ties
            it.positive = rng.uniform(2) == 0;
            positives += it.positive;
            items.push_back(it);
        }
        if (positives == 0) items[rng.uniform(n)].positive = true;

        auto ranked = items;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) {
                             return a.score > b.score || (a.score == b.score && a.id < b.id);
                         });
        double sum = 0.0;
        std::size_t hits = 0, n_pos = 0;
        for (std::size_t rank = 0; rank < ranked.size(); ++rank)
            if (ranked[rank].positive) {
                ++hits;
                ++n_pos;
                sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
            }
        double expected = sum / static_cast<double>(n_pos);
        if (std::abs(evaluation::average_precision(items) - expected) > 1e-12)
            return "average precision mismatch";
    }

    // Recall@K and semantic containment against brute-force scans.
    for (int t = 0; t < 50; ++t) {
        Rng rng = root.child("retrieval" + std::to_string(t));
        std::size_t pool = 3 + rng.uniform(27);
        std::vector<std::string> images;
        for (std::size_t i = 0; i < pool; ++i) images.push_back("p" + std::to_string(i));
        std::map<std::string, std::string> image_labels;
        for (std::size_t i = 0; i < pool; ++i)
            if (rng.uniform(4) != 0)
                image_labels[images[i]] = "c" + std::to_string(rng.uniform(3));

        std::size_t n_q = 1 + rng.uniform(10);
        std::vector<evaluation::RankedRetrieval> retrievals;
        for (std::size_t q = 0; q < n_q; ++q) {
            evaluation::RankedRetrieval r;
            r.query_id = "q" + std::to_string(q);
            r.ranked_image_ids = images;
            rng.shuffle(r.ranked_image_ids);
            r.target_image_id = images[rng.uniform(pool)];
            r.target_label = "c" + std::to_string(rng.uniform(3));
            retrievals.push_back(r);
        }
        std::size_t k = 1 + rng.uniform(pool);

        std::size_t recall_hits = 0;
        for (const auto& r : retrievals)
            for (std::size_t i = 0; i < k; ++i)
                if (r.ranked_image_ids[i] == r.target_image_id) {
                    ++recall_hits;
                    break;
                }
        double expected_recall =
            100.0 * static_cast<double>(recall_hits) / static_cast<double>(n_q);
        if (std::abs(evaluation::recall_at_k(retrievals, k) - expected_recall) > 1e-12)
            return "recall@K mismatch";

        std::map<std::string, std::pair<std::size_t, std::size_t>> per_class;
        std::size_t total_hits = 0;
        for (const auto& r : retrievals) {
            bool hit = false;
            for (std::size_t i = 0; i < k && !hit; ++i) {
                auto it = image_labels.find(r.ranked_image_ids[i]);
                hit = it != image_labels.end() && it->second == *r.target_label;
            }
            per_class[*r.target_label].first += hit;
            per_class[*r.target_label].second += 1;
            total_hits += hit;
        }
        double class_sum = 0.0;
        for (const auto& [cls, counts] : per_class)
            class_sum += 100.0 * static_cast<double>(counts.first) /
                         static_cast<double>(counts.second);
        auto sem = evaluation::semantic_s(retrievals, image_labels, k);
        if (std::abs(sem.s - class_sum / static_cast<double>(per_class.size())) > 1e-12)
            return "semantic S mismatch";
        if (std::abs(sem.s_star -
                     100.0 * static_cast<double>(total_hits) / static_cast<double>(n_q)) > 1e-12)
            return "semantic S* mismatch";
    }
    return "";
}

std::string c_distillation_recovery() {
    auto t0 = std::chrono::steady_clock::now();
    synth::SceneSpec spec;  // 30 landmarks, 3 planted concepts by default
    spec.outlier_nouns = {"statue", "window"};
    auto scene = synth::generate(spec);
    auto index = sfm::TrackIndex::build(scene.reconstructions);
    auto candidates = mining::candidate_concepts(scene.corpus, scene.lexicon);
    auto set = mining::distill(candidates, scene.corpus, index, {});

    std::set<std::string> expected(spec.concepts.begin(), spec.concepts.end());
    std::set<std::string> got;
    for (const auto& c : set.concepts) got.insert(c.noun);
    if (got != expected) {
        std::string detail = "recovered {";
        for (const auto& n : got) detail += n + ",";
        return detail + "} expected exactly the planted concepts";
    }
    double secs = elapsed_s(t0);
    if (secs >= 30.0) return "runtime " + fmt(secs) + "s exceeds 30s";
    return "";
}

std::string c_connector_suppression() {
    corpus::NounLexicon lexicon;
    lexicon.nouns = {"nave", "portal"};
    auto connectors = labeling::ConnectorList::defaults();

    mining::ConceptSet set;
    for (const char* noun : {"nave", "portal"}) {
        mining::DistilledConcept c;
        c.noun = noun;
        c.support = 30;
        set.concepts.push_back(c);
    }

    corpus::ImageDoc doc;
    doc.image_id = "x";
    doc.landmark_id = "L";
    doc.caption = "nave looking towards portal";
    doc.category_path = {"L", "interior views"};
    auto got = labeling::associate(doc, set, lexicon, connectors);
    if (got != std::set<std::string>{"nave"})
        return "expected exactly {nave} from the caption";
    if (labeling::unsuppressed_mentions(doc.caption, "portal", lexicon, connectors) != 0)
        return "'portal' after the connector must be suppressed";
    return "";
}

std::vector<fusion3d::ScoredCloud> g_directional_clouds;  // reused by monotonicity

std::string c_directional() {
    auto t0 = std::chrono::steady_clock::now();
    auto ctx = make_directional_context();
    std::vector<double> theta_with, theta_without, delta_with, delta_without, cos_with,
        cos_without;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto with = run_directional(ctx, 0.3, seed, &g_directional_clouds);
        auto without = run_directional(ctx, 0.0, seed, &g_directional_clouds);
        theta_with.push_back(with.theta05);
        theta_without.push_back(without.theta05);
        delta_with.push_back(with.delta075);
        delta_without.push_back(without.delta075);
        cos_with.push_back(with.cosine);
        cos_without.push_back(without.cosine);
    }
    double secs = elapsed_s(t0);
    std::ostringstream detail;
    detail << "theta_0.5 " << median(theta_without) << " -> " << median(theta_with)
           << ", delta_0.75 " << median(delta_without) << " -> " << median(delta_with)
           << ", cosine " << median(cos_without) << " -> " << median(cos_with) << ", "
           << fmt(secs) << "s";
    std::cout << "  [directional medians] " << detail.str() << "\n";
    if (!(median(theta_with) < median(theta_without)))
        return "theta_0.5 did not improve: " + detail.str();
    if (!(median(delta_with) < median(delta_without)))
        return "delta_0.75 did not improve: " + detail.str();
    if (!(median(cos_with) > median(cos_without)))
        return "held-out correspondence cosine did not improve: " + detail.str();
    if (secs >= 600.0) return "runtime " + fmt(secs) + "s exceeds 10 min";
    return "";
}

std::string c_theta_monotonicity() {
    if (g_directional_clouds.empty()) {
        // Monotonicity must hold for any model, trained or not.
        auto ctx = make_directional_context();
        auto model = trainer::ToyModel::init(static_cast<int>(ctx.class_order.size()), 32, 11);
        g_directional_clouds =
            fusion3d::score_clouds(model, ctx.scene.reconstructions, ctx.scene.images,
                                   ctx.name_of_key, ctx.class_order, 0.5);
    }
    for (const auto& cloud : g_directional_clouds) {
        std::vector<fusion3d::ScoredCloud> one = {cloud};
        if (fusion3d::theta(one, 0.75) + 1e-15 < fusion3d::theta(one, 0.5))
            return "theta_0.75 < theta_0.5 on reconstruction " + cloud.reconstruction_id;
    }
    if (fusion3d::theta(g_directional_clouds, 0.75) + 1e-15 <
        fusion3d::theta(g_directional_clouds, 0.5))
        return "aggregate theta_0.75 < theta_0.5";
    return "";
}

std::string c_round_trips() {
    Rng root(7);
    for (int t = 0; t < 20; ++t) {
        Rng rng = root.child("roundtrip" + std::to_string(t));
        auto scene = random_scene(rng, true);
        std::string cameras, images, points;
        sfm::serialize_reconstruction(scene.rec, cameras, images, points);
        // Inject comments; an empty points section stays empty.
        cameras = "# camera list\n" + cameras + "# trailing note\n";
        images = "# image list\n# two lines per image\n" + images;
        points = "# point list\n" + points;

        auto first = sfm::parse_reconstruction(cameras, images, points, "L", "r");
        std::string c1, i1, p1;
        sfm::serialize_reconstruction(first, c1, i1, p1);
        auto second = sfm::parse_reconstruction(c1, i1, p1, "L", "r");
        std::string c2, i2, p2;
        sfm::serialize_reconstruction(second, c2, i2, p2);
        if (c1 != c2 || i1 != i2 || p1 != p2)
            return "serialize(parse(.)) not a fixed point on trial " + std::to_string(t);
    }

    // Point-cloud export reparse.
    fusion3d::ScoredCloud cloud;
    cloud.reconstruction_id = "r";
    cloud.landmark_id = "L";
    cloud.concept_names = {"facade", "tower"};
    cloud.confidence_threshold = 0.5;
    Rng rng = root.child("ply");
    for (int i = 0; i < 40; ++i) {
        fusion3d::ScoredPoint pt;
        pt.point = sfm::make_point_key("r", i);
        for (int d = 0; d < 3; ++d) pt.xyz[d] = rng.uniform_real(-10.0, 10.0);
        pt.probabilities = {0.2, 0.2, 0.6};
        if (i % 3 == 0) {
            pt.probabilities = {0.8, 0.1, 0.1};
            pt.confidence = 0.8;
            pt.assigned_concept = 0;
        } else if (i % 3 == 1) {
            pt.probabilities = {0.1, 0.8, 0.1};
            pt.confidence = 0.8;
            pt.assigned_concept = 1;
        } else {
            pt.confidence = 0.2;
        }
        cloud.points.push_back(pt);
    }
    std::map<std::string, std::array<std::uint8_t, 3>> palette = {{"facade", {200, 10, 10}},
                                                                  {"tower", {10, 200, 10}}};
    auto text = fusion3d::export_ply(cloud, palette, true);
    auto vertices = fusion3d::parse_ply(text);
    if (vertices.size() != cloud.points.size()) return "vertex count changed in reparse";
    for (std::size_t i = 0; i < vertices.size(); ++i) {
        if (vertices[i].x != cloud.points[i].xyz[0] || vertices[i].y != cloud.points[i].xyz[1] ||
            vertices[i].z != cloud.points[i].xyz[2])
            return "coordinates changed in reparse";
        std::array<std::uint8_t, 3> expected = {128, 128, 128};
        if (cloud.points[i].assigned_concept)
            expected = palette.at(cloud.concept_names[*cloud.points[i].assigned_concept]);
        if (vertices[i].r != expected[0] || vertices[i].g != expected[1] ||
            vertices[i].b != expected[2])
            return "colors changed in reparse";
    }
    return "";
}

std::string c_augmentation_boundary() {
    // Two images sharing 3 of 10 union points: keypoint IoU exactly 3/10.
    sfm::Reconstruction rec;
    rec.reconstruction_id = "r";
    rec.landmark_id = "L";
    sfm::Camera cam;
    cam.camera_id = 1;
    cam.model = "PINHOLE";
    cam.width = 10;
    cam.height = 10;
    cam.params = {1, 1, 5, 5};
    rec.cameras.emplace(1, cam);
    auto add_image = [&](int id, const std::string& name, const std::set<std::int64_t>& pts) {
        sfm::Image img;
        img.image_id = id;
        img.name = name;
        img.camera_id = 1;
        for (std::int64_t p : pts) {
            sfm::Observation o;
            o.point3d_id = p;
            o.xy = {static_cast<double>(p), static_cast<double>(id)};
            img.observed_points.push_back(o);
        }
        rec.images.emplace(id, img);
    };
    std::set<std::int64_t> a_pts = {1, 2, 3, 4, 5, 6};
    std::set<std::int64_t> b_pts = {4, 5, 6, 7, 8, 9, 10};
    std::set<std::int64_t> all_pts = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    add_image(1, "a", a_pts);
    add_image(2, "b", b_pts);
    add_image(3, "c", a_pts);  // duplicate of a: IoU 1.0 with it
    add_image(4, "d", all_pts);
    for (std::int64_t p : all_pts) {
        sfm::Point3D pt;
        pt.point3d_id = p;
        rec.points.emplace(p, pt);
    }
    for (auto& [id, img] : rec.images)
        for (std::size_t i = 0; i < img.observed_points.size(); ++i)
            rec.points.at(img.observed_points[i].point3d_id)
                .track.push_back({id, static_cast<int>(i), img.observed_points[i].xy});
    sfm::validate_reconstruction(rec);
    auto index = sfm::TrackIndex::build({rec});
    if (index.keypoint_iou(sfm::make_image_key("r", 1), sfm::make_image_key("r", 2)) != 0.3)
        return "fixture pair IoU is not exactly 0.3";

    corpus::Corpus corpus;
    auto add_doc = [&](const std::string& id, const std::string& caption) {
        corpus::ImageDoc doc;
        doc.image_id = id;
        doc.landmark_id = "L";
        doc.caption = caption;
        doc.category_path = {"L"};
        doc.registered = true;
        doc.reconstruction_id = "r";
        corpus.docs.push_back(doc);
    };
    add_doc("a", "west view");
    add_doc("b", "");
    add_doc("c", "east view");
    add_doc("d", "");
    corpus.reindex();

    auto has_transfer = [](const std::vector<pair_engine::AugmentedCaptionPair>& pairs,
                           const std::string& image, const std::string& donor) {
        for (const auto& p : pairs)
            if (p.transferred && p.image_id == image && p.donor_image_id == donor) return true;
        return false;
    };

    auto at_threshold = pair_engine::augment_caption_pairs(corpus, index, 0.3);
    if (!has_transfer(at_threshold, "b", "a"))
        return "IoU exactly 0.3 must transfer at threshold 0.3";

    // Same comparison shifted by 1e-9: an IoU sitting 1e-9 below the
    // threshold must not transfer (the comparison is translation-invariant).
    auto below = pair_engine::augment_caption_pairs(corpus, index, 0.3 + 1e-9);
    if (has_transfer(below, "b", "a")) return "IoU 1e-9 below the threshold must not transfer";

    auto originals_only = pair_engine::augment_caption_pairs(corpus, index, 1.0 + 1e-9);
    auto originals = pair_engine::augment_caption_pairs(corpus, index, 2.0);
    if (originals_only.size() != 2) return "threshold above 1 must keep only original captions";
    for (const auto& p : originals_only)
        if (p.transferred) return "threshold above 1 produced a transfer";
    if (pair_engine::serialize_augmented_pairs(originals_only) !=
        pair_engine::serialize_augmented_pairs(originals))
        return "threshold above 1 must reproduce the original pair set exactly";
    return "";
}

std::string g_cli_path;
std::string g_scratch_dir;

std::string c_cli_determinism() {
    if (g_cli_path.empty()) return "CLI binary path not supplied to the acceptance runner";
    fs::path scratch = g_scratch_dir.empty() ? fs::temp_directory_path() / "bm_accept"
                                             : fs::path(g_scratch_dir);
    fs::remove_all(scratch);
    fs::create_directories(scratch);
    fs::path data = scratch / "data";

    auto shell = [&](const std::string& args) {
        std::string cmd = g_cli_path + " " + args + " > /dev/null 2>&1";
        return std::system(cmd.c_str());
    };

    const std::string fast_train =
        " --set train.epochs=2 --set train.pretrain_epochs=1 --set train.decay_epochs=[]";
    std::vector<std::pair<std::string, std::string>> runs = {
        {"synth", ""},       {"ingest", ""},  {"mine", ""},    {"label", ""},
        {"pairs", ""},       {"train-toy", fast_train}, {"fuse", ""}, {"metrics", ""},
        {"augment", ""},     {"selftest", ""},
    };
    for (const auto& [sub, extra] : runs) {
        fs::path out = scratch / ("run_" + sub);
        std::string args = sub + " --data-dir " + data.string() + " --output-dir " +
                           out.string() + " --seed 1" + extra;
        if (sub == "fuse" || sub == "metrics")
            args += " --set train.checkpoint=../run_train-toy/model.bmt";
        if (shell(args) != 0) return "subcommand '" + sub + "' failed (first run)";
        std::string manifest_1 = read_file((out / "manifest.json").string());
        if (shell(args) != 0) return "subcommand '" + sub + "' failed (second run)";
        std::string manifest_2 = read_file((out / "manifest.json").string());
        if (manifest_1 != manifest_2)
            return "subcommand '" + sub + "' is not byte-identical across reruns";
        if (manifest_1.find("artifacts") == std::string::npos)
            return "subcommand '" + sub + "' wrote no artifact manifest";
    }
    return "";
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string only;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--only" && i + 1 < args.size()) {
            only = args[++i];
        } else if (g_cli_path.empty()) {
            g_cli_path = args[i];
        } else if (g_scratch_dir.empty()) {
            g_scratch_dir = args[i];
        }
    }

    std::vector<std::pair<std::string, std::function<std::string()>>> criteria = {
        {"gradient-suite", c_gradient_suite},
        {"closed-form-losses", c_closed_forms},
        {"oracle-equivalence", c_oracles},
        {"distillation-recovery", c_distillation_recovery},
        {"connector-suppression", c_connector_suppression},
        {"directional-3d-benefit", c_directional},
        {"theta-monotonicity", c_theta_monotonicity},
        {"parser-round-trips", c_round_trips},
        {"augmentation-boundary", c_augmentation_boundary},
        {"cli-determinism", c_cli_determinism},
    };

    int failures = 0;
    for (const auto& [name, fn] : criteria) {
        if (!only.empty() && name != only) continue;
        std::string detail;
        try {
            detail = fn();
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        if (detail.empty()) {
            std::cout << "PASS " << name << "\n";
        } else {
            std::cout << "FAIL " << name << ": " << detail << "\n";
            ++failures;
        }
        std::cout.flush();
    }
    return failures == 0 ? 0 : 1;
}
