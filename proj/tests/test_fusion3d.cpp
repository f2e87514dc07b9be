#include <doctest.h>

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "babelminer/common.hpp"
#include "babelminer/fusion3d.hpp"
#include "babelminer/trainer.hpp"

using namespace babelminer;
using namespace babelminer::fusion3d;

namespace {

trainer::ToyModel random_model(int num_concepts, std::uint64_t seed) {
    trainer::ToyModel model = trainer::ToyModel::init(num_concepts, 16, seed);
    Rng rng(seed + 100);
    for (double& w : model.head_weight) w = rng.normal();
    for (double& b : model.head_bias) b = 0.1 * rng.normal();
    return model;
}

numerics::FeatureMap random_features(const trainer::ToyModel& model, int gh, int gw,
                                     std::uint64_t seed) {
    numerics::FeatureMap f = numerics::make_feature_map(model.feature_channels, gh, gw);
    Rng rng(seed);
    for (double& v : f.values) v = rng.normal();
    numerics::normalize_features(f);
    return f;
}

// concept_index -1 marks an ambiguous point.
ScoredPoint point_with(std::vector<double> probs, int concept_index, double phi) {
    ScoredPoint pt;
    pt.probabilities = std::move(probs);
    int best = 0;
    for (std::size_t c = 0; c + 1 < pt.probabilities.size(); ++c)
        if (pt.probabilities[c] > pt.probabilities[best]) best = static_cast<int>(c);
    pt.confidence = pt.probabilities[best];
    if (concept_index >= 0 && pt.confidence > phi) pt.assigned_concept = concept_index;
    return pt;
}

ScoredCloud cloud_of(const std::string& rec_id, const std::string& landmark,
                     std::vector<ScoredPoint> points,
                     std::vector<std::string> concept_names = {"facade", "organ"}) {
    ScoredCloud cloud;
    cloud.reconstruction_id = rec_id;
    cloud.landmark_id = landmark;
    cloud.concept_names = std::move(concept_names);
    cloud.confidence_threshold = 0.5;
    cloud.points = std::move(points);
    return cloud;
}

}  // namespace

TEST_CASE("single projection fusion equals that pixel's softmaxed head output") {
    trainer::ToyModel model = random_model(3, 1);
    numerics::FeatureMap f = random_features(model, 8, 8, 2);
    sfm::Pixel px{13.0, 21.0};
    numerics::Vec fused = fuse_point(model, {{&f, px}}, 32, 32);

    int gx = pair_engine::to_grid(px.x, 32, 8), gy = pair_engine::to_grid(px.y, 32, 8);
    const int channels = model.num_concepts + 1;
    numerics::Vec scores(channels, 0.0);
    for (int c = 0; c < channels; ++c) {
        scores[c] = model.head_bias[c];
        for (int k = 0; k < model.feature_channels; ++k)
            scores[c] += model.head_weight[c * model.feature_channels + k] * f.at(k, gy, gx);
    }
    double mx = *std::max_element(scores.begin(), scores.end());
    double denom = 0;
    for (double s : scores) denom += std::exp(s - mx);
    REQUIRE(fused.size() == scores.size());
    for (int c = 0; c < channels; ++c)
        CHECK(fused[c] == doctest::Approx(std::exp(scores[c] - mx) / denom).epsilon(1e-9));
}

TEST_CASE("duplicate projections do not change the fused result") {
    trainer::ToyModel model = random_model(2, 3);
    numerics::FeatureMap f = random_features(model, 8, 8, 4);
    sfm::Pixel px{5.0, 7.0};
    numerics::Vec one = fuse_point(model, {{&f, px}}, 32, 32);
    numerics::Vec two = fuse_point(model, {{&f, px}, {&f, px}}, 32, 32);
    for (std::size_t c = 0; c < one.size(); ++c)
        CHECK(two[c] == doctest::Approx(one[c]).epsilon(1e-12));
}

TEST_CASE("averaging descriptors commutes with the linear head") {
    // Mean-then-head equals head-then-mean on the pre-softmax scores.
    trainer::ToyModel model = random_model(3, 5);
    numerics::FeatureMap f1 = random_features(model, 8, 8, 6);
    numerics::FeatureMap f2 = random_features(model, 8, 8, 7);
    sfm::Pixel a{3.0, 9.0}, b{25.0, 17.0};
    numerics::Vec fused = fuse_point(model, {{&f1, a}, {&f2, b}}, 32, 32);

    auto head = [&](const numerics::FeatureMap& f, sfm::Pixel px) {
        int gx = pair_engine::to_grid(px.x, 32, 8), gy = pair_engine::to_grid(px.y, 32, 8);
        numerics::Vec scores(model.num_concepts + 1, 0.0);
        for (int c = 0; c <= model.num_concepts; ++c) {
            scores[c] = model.head_bias[c];
            for (int k = 0; k < model.feature_channels; ++k)
                scores[c] += model.head_weight[c * model.feature_channels + k] * f.at(k, gy, gx);
        }
        return scores;
    };
    numerics::Vec s1 = head(f1, a), s2 = head(f2, b);
    numerics::Vec mean(s1.size());
    for (std::size_t c = 0; c < s1.size(); ++c) mean[c] = 0.5 * (s1[c] + s2[c]);
    double mx = *std::max_element(mean.begin(), mean.end());
    double denom = 0;
    for (double s : mean) denom += std::exp(s - mx);
    for (std::size_t c = 0; c < mean.size(); ++c)
        CHECK(fused[c] == doctest::Approx(std::exp(mean[c] - mx) / denom).epsilon(1e-6));
}

TEST_CASE("fuse_point requires at least one projection") {
    trainer::ToyModel model = random_model(2, 8);
    CHECK_THROWS_AS(fuse_point(model, {}, 32, 32), Error);
}

TEST_CASE("theta closed forms") {
    auto confident = point_with({0.9, 0.05, 0.05}, 0, 0.5);
    auto ambiguous = point_with({0.4, 0.3, 0.3}, -1, 0.5);

    CHECK(theta({cloud_of("r1", "lm1", {confident, confident})}, 0.5) == doctest::Approx(0.0));
    CHECK(theta({cloud_of("r1", "lm1", {ambiguous, ambiguous})}, 0.5) == doctest::Approx(1.0));
    CHECK(theta({cloud_of("r1", "lm1", {confident, ambiguous})}, 0.5) == doctest::Approx(0.5));
    // Landmark averaging is unweighted: a tiny all-ambiguous landmark counts
    // as much as a large all-confident one.
    auto big = cloud_of("r1", "lm1", std::vector<ScoredPoint>(10, confident));
    auto small = cloud_of("r2", "lm2", {ambiguous});
    CHECK(theta({big, small}, 0.5) == doctest::Approx(0.5));
    CHECK_THROWS_AS(theta({}, 0.5), Error);
}

TEST_CASE("theta never decreases as the confidence bar rises") {
    Rng rng(9);
    std::vector<ScoredPoint> pts;
    for (int i = 0; i < 50; ++i) {
        double a = rng.uniform_real(), b = rng.uniform_real(), c = rng.uniform_real();
        double s = a + b + c;
        pts.push_back(point_with({a / s, b / s, c / s}, 0, 0.5));
    }
    auto cloud = cloud_of("r1", "lm1", pts);
    double prev = -1.0;
    for (double phi : {0.1, 0.3, 0.5, 0.75, 0.9}) {
        double t = theta({cloud}, phi);
        CHECK(t >= prev);
        prev = t;
    }
}

TEST_CASE("delta closed forms and weighting") {
    ConceptPolarity polarity;
    auto ext = point_with({0.9, 0.05, 0.05}, 0, 0.5);
    auto in = point_with({0.05, 0.9, 0.05}, 1, 0.5);

    // Purely exterior: no mixing.
    CHECK(delta({cloud_of("r1", "lm1", std::vector<ScoredPoint>(4, ext))}, polarity, 0.5) ==
          doctest::Approx(0.0));
    // Half and half: maximal mixing.
    CHECK(delta({cloud_of("r1", "lm1", {ext, in})}, polarity, 0.5) == doctest::Approx(0.5));
    // Two reconstructions of sizes 100 and 300 with mixing 0 and 0.5.
    auto pure = cloud_of("r1", "lm1", std::vector<ScoredPoint>(100, ext));
    std::vector<ScoredPoint> mixed;
    for (int i = 0; i < 150; ++i) {
        mixed.push_back(ext);
        mixed.push_back(in);
    }
    auto half = cloud_of("r2", "lm2", mixed);
    CHECK(delta({pure, half}, polarity, 0.5) == doctest::Approx(0.375));
    // No polarized assignments anywhere: undefined.
    auto ambiguous = point_with({0.4, 0.3, 0.3}, -1, 0.5);
    CHECK_THROWS_AS(delta({cloud_of("r1", "lm1", {ambiguous})}, polarity, 0.5), Error);
}

TEST_CASE("delta is symmetric under swapping polarity sets") {
    ConceptPolarity polarity;
    ConceptPolarity swapped;
    swapped.interior = polarity.exterior;
    swapped.exterior = polarity.interior;

    Rng rng(12);
    std::vector<ScoredPoint> pts;
    for (int i = 0; i < 40; ++i) {
        bool exterior = rng.uniform(2) != 0;
        pts.push_back(point_with(exterior ? std::vector<double>{0.8, 0.1, 0.1}
                                          : std::vector<double>{0.1, 0.8, 0.1},
                                 exterior ? 0 : 1, 0.5));
    }
    auto cloud = cloud_of("r1", "lm1", pts);
    CHECK(delta({cloud}, polarity, 0.5) == doctest::Approx(delta({cloud}, swapped, 0.5)));
}

TEST_CASE("ply export and reparse round trip") {
    std::map<std::string, std::array<std::uint8_t, 3>> palette{
        {"facade", {200, 30, 30}}, {"organ", {30, 200, 30}}};
    auto ext = point_with({0.9, 0.05, 0.05}, 0, 0.5);
    ext.xyz[0] = 1.25; ext.xyz[1] = -2.5; ext.xyz[2] = 3.75;
    auto in = point_with({0.05, 0.9, 0.05}, 1, 0.5);
    in.xyz[0] = 4.0; in.xyz[1] = 5.0; in.xyz[2] = 6.0;
    auto ambiguous = point_with({0.4, 0.3, 0.3}, -1, 0.5);
    ambiguous.xyz[0] = 7.0; ambiguous.xyz[1] = 8.0; ambiguous.xyz[2] = 9.0;
    auto cloud = cloud_of("r1", "lm1", {ext, in, ambiguous});

    std::string confident_only = export_ply(cloud, palette, false);
    auto parsed = parse_ply(confident_only);
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].x == doctest::Approx(1.25));
    CHECK(parsed[0].r == 200);
    CHECK(parsed[0].g == 30);
    CHECK(parsed[0].b == 30);
    CHECK(parse_ply(export_ply(cloud, palette, true)).size() == 3);

    // All-ambiguous cloud still produces a valid, empty-bodied file.
    auto empty = cloud_of("r2", "lm2", {ambiguous});
    std::string text = export_ply(empty, palette, false);
    CHECK(text.find("element vertex 0") != std::string::npos);
    CHECK(parse_ply(text).empty());
}

TEST_CASE("ply export requires palette coverage") {
    auto ext = point_with({0.9, 0.05, 0.05}, 0, 0.5);
    auto cloud = cloud_of("r1", "lm1", {ext});
    CHECK_THROWS_AS(export_ply(cloud, {{"organ", {1, 2, 3}}}, false), Error);
}
