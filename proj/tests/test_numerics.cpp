#include <doctest.h>

#include <cmath>
#include <vector>

#include "babelminer/common.hpp"
#include "babelminer/numerics.hpp"

using namespace babelminer;
using namespace babelminer::numerics;

namespace {

Vec unit(std::initializer_list<double> v) {
    Vec out(v);
    double n = 0;
    for (double x : out) n += x * x;
    n = std::sqrt(n);
    for (double& x : out) x /= n;
    return out;
}

Vec random_unit(Rng& rng, std::size_t dim) {
    Vec v(dim);
    for (double& x : v) x = rng.normal();
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    return v;
}

}  // namespace

TEST_CASE("normalize_features scales each pixel to unit norm") {
    FeatureMap m = make_feature_map(2, 1, 1);
    m.at(0, 0, 0) = 3.0;
    m.at(1, 0, 0) = 4.0;
    normalize_features(m);
    CHECK(m.at(0, 0, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(m.at(1, 0, 0) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(m.normalized);
}

TEST_CASE("normalize_features is idempotent") {
    FeatureMap m = make_feature_map(3, 2, 2);
    Rng rng(9);
    for (double& v : m.values) v = rng.normal();
    normalize_features(m);
    FeatureMap twice = m;
    normalize_features(twice);
    for (std::size_t i = 0; i < m.values.size(); ++i)
        CHECK(twice.values[i] == doctest::Approx(m.values[i]).epsilon(1e-7));
}

TEST_CASE("normalize_features rejects a zero pixel vector") {
    FeatureMap m = make_feature_map(2, 1, 1);
    CHECK_THROWS_AS(normalize_features(m), Error);
}

TEST_CASE("similarity closed forms") {
    Vec a = unit({1, 0, 0});
    Vec b = unit({0, 1, 0});
    CHECK(similarity(a, a, 0.07) == doctest::Approx(1.0 / 0.07).epsilon(1e-12));
    CHECK(similarity(a, b, 0.07) == doctest::Approx(0.0));
    Vec na{-a[0], -a[1], -a[2]};
    CHECK(similarity(a, na, 1.0) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("similarity rejects length mismatch") {
    CHECK_THROWS_AS(similarity(unit({1, 0}), unit({1, 0, 0}), 0.07), Error);
}

TEST_CASE("contrastive loss equals ln(m+1) when all similarities tie") {
    // Anchor orthogonal to the positive and to every negative: all pairwise
    // similarities are zero, so the softmax is uniform over m+1 entries.
    Vec p = unit({1, 0, 0});
    Vec plus = unit({0, 1, 0});
    std::vector<Vec> negs(16, unit({0, 0, 1}));
    PairLoss pl = nce_loss(p, plus, negs, 0.07);
    CHECK(pl.loss == doctest::Approx(std::log(17.0)).epsilon(1e-9));
}

TEST_CASE("contrastive loss direct evaluation with one negative") {
    // phi+ = 1, phi- = 0 at tau=1 gives -log(e / (e + 1)) = log(1 + e^-1).
    Vec p = unit({1, 0, 0});
    std::vector<Vec> negs{unit({0, 1, 0})};
    PairLoss pl = nce_loss(p, p, negs, 1.0);
    CHECK(pl.loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("contrastive loss is invariant under a common similarity shift") {
    // Rotating the anchor toward all other vectors by the same dot-product
    // delta is hard to construct directly; instead verify the underlying
    // softmax shift invariance: scaling tau rescales all similarities equally
    // and the loss of an all-equal configuration stays ln(m+1).
    Vec p = unit({1, 0, 0, 0});
    Vec plus = unit({0, 1, 0, 0});
    std::vector<Vec> negs{unit({0, 0, 1, 0}), unit({0, 0, 0, 1})};
    double l1 = nce_loss(p, plus, negs, 0.07).loss;
    double l2 = nce_loss(p, plus, negs, 1.0).loss;
    CHECK(l1 == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    CHECK(l2 == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("contrastive loss rejects non-unit inputs") {
    Vec p{2.0, 0.0};
    std::vector<Vec> negs{unit({0, 1})};
    CHECK_THROWS_AS(nce_loss(p, unit({1, 0}), negs, 0.07), Error);
}

TEST_CASE("contrastive loss decreases as the positive aligns with the anchor") {
    Vec p = unit({1, 0, 0});
    std::vector<Vec> negs{unit({0, 0, 1})};
    double worse = nce_loss(p, unit({0, 1, 0}), negs, 0.5).loss;
    double better = nce_loss(p, unit({1, 1, 0}), negs, 0.5).loss;
    double best = nce_loss(p, p, negs, 0.5).loss;
    CHECK(better < worse);
    CHECK(best < better);
}

TEST_CASE("mse loss closed forms") {
    Vec a = unit({3, 4});
    CHECK(mse_loss(a, a).loss == doctest::Approx(0.0));
    Vec na{-a[0], -a[1]};
    CHECK(mse_loss(a, na).loss == doctest::Approx(4.0).epsilon(1e-12));
    CHECK_THROWS_AS(mse_loss(a, unit({1, 0, 0})), Error);
}

TEST_CASE("mse gradient matches finite differences") {
    Rng rng(21);
    Vec p = random_unit(rng, 6);
    Vec q = random_unit(rng, 6);
    GradFn fn = [&](const Vec& x, Vec& grad) {
        PairLoss pl = mse_loss(x, q);
        grad = pl.grad_p;
        return pl.loss;
    };
    CHECK(grad_check(fn, p, 1e-4) < 1e-6);
}

TEST_CASE("triplet loss closed forms") {
    // d+ = 0, d- = 4, margin 3: hinge inactive.
    Vec a = unit({1, 0});
    Vec opposite{-1.0, 0.0};
    CHECK(triplet_loss(a, a, opposite, 3.0).loss == doctest::Approx(0.0));
    // d+ = d-: loss equals the margin.
    CHECK(triplet_loss(a, opposite, opposite, 3.0).loss == doctest::Approx(3.0));
}

TEST_CASE("triplet hinge subgradient is zero when inactive") {
    Vec a = unit({1, 0});
    Vec opposite{-1.0, 0.0};
    TripletLoss tl = triplet_loss(a, a, opposite, 3.0);
    for (double g : tl.grad_p) CHECK(g == 0.0);
    for (double g : tl.grad_p_plus) CHECK(g == 0.0);
    for (double g : tl.grad_p_minus) CHECK(g == 0.0);
}

TEST_CASE("uniform image scores give ln(C) classification loss") {
    // Zero raw scores: image softmax is uniform over C classes.
    const int C = 10;
    FeatureMap raw = make_feature_map(C + 1, 2, 2);
    ScoreMaps maps = make_score_maps(raw, C);
    ClassificationLoss cl = classification_loss(maps, 3, TrainPhase::Pretrain);
    CHECK(cl.loss_image == doctest::Approx(std::log(10.0)).epsilon(1e-9));
    CHECK(cl.loss_pixel == 0.0);
}

TEST_CASE("confident correct prediction drives the loss toward zero") {
    const int C = 3;
    FeatureMap raw = make_feature_map(C + 1, 2, 2);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) raw.at(1, y, x) = 50.0;
    ScoreMaps maps = make_score_maps(raw, C);
    ClassificationLoss cl = classification_loss(maps, 1, TrainPhase::Full);
    CHECK(cl.total < 1e-6);
}

TEST_CASE("pixel term is dropped in the pretrain phase") {
    const int C = 3;
    Rng rng(4);
    FeatureMap raw = make_feature_map(C + 1, 3, 3);
    for (double& v : raw.values) v = 3.0 * rng.normal();
    ScoreMaps maps = make_score_maps(raw, C);
    ClassificationLoss pre = classification_loss(maps, 0, TrainPhase::Pretrain);
    ClassificationLoss full = classification_loss(maps, 0, TrainPhase::Full);
    CHECK(pre.loss_pixel == 0.0);
    CHECK(pre.total == doctest::Approx(pre.loss_image));
    CHECK(full.loss_image == doctest::Approx(pre.loss_image));
}

TEST_CASE("total_loss composition") {
    CHECK(total_loss({}, 1.25, 0.5, 0.3) == doctest::Approx(1.75));
    CHECK(total_loss({2.0, 4.0}, 1.0, 1.0, 0.0) == doctest::Approx(2.0));
    CHECK(total_loss({2.0}, 1.0, 0.5, 0.3) == doctest::Approx(1.5 + 0.3 * 2.0));
    CHECK(total_loss({2.0, 4.0}, 1.0, 0.5, 0.5) == doctest::Approx(1.5 + 0.5 * 3.0));
}

TEST_CASE("grad_check is exact for quadratics and catches wrong gradients") {
    Rng rng(31);
    Vec x(5);
    for (double& v : x) v = rng.normal();
    GradFn quad = [](const Vec& p, Vec& grad) {
        double s = 0;
        grad.assign(p.size(), 0.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            s += p[i] * p[i];
            grad[i] = 2.0 * p[i];
        }
        return s;
    };
    CHECK(grad_check(quad, x, 1e-4) < 1e-7);

    GradFn wrong = [&](const Vec& p, Vec& grad) {
        double v = quad(p, grad);
        for (double& g : grad) g *= 2.0;  // deliberately scaled
        return v;
    };
    CHECK(grad_check(wrong, x, 1e-4) > 0.5);
}

TEST_CASE("aggregators are registered by name") {
    CHECK(Aggregator::by_name("ngwp").name() == "ngwp");
    CHECK(Aggregator::by_name("mean").name() == "mean");
    CHECK_THROWS_AS(Aggregator::by_name("nope"), Error);
}

TEST_CASE("loss config validation") {
    LossConfig ok;
    CHECK_NOTHROW(ok.validate());
    LossConfig bad;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
