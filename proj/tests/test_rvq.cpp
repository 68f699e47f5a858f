#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gsq/rvq.h"

using namespace gsq;

namespace {

Codebook make_codebook(std::initializer_list<std::initializer_list<double>> rows) {
    Codebook cb;
    const int n = static_cast<int>(rows.size());
    const int d = static_cast<int>(rows.begin()->size());
    cb.entries = Eigen::MatrixXd(n, d);
    int r = 0;
    for (const auto& row : rows) {
        int c = 0;
        for (double v : row) cb.entries(r, c++) = v;
        ++r;
    }
    return cb;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    int i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

// Exhaustive assignment optimum for tiny k-means instances.
double brute_force_kmeans_objective(const std::vector<Eigen::VectorXd>& points, int n_clusters) {
    const int n = static_cast<int>(points.size());
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> assign(n, 0);
    const int64_t combos = static_cast<int64_t>(std::pow(n_clusters, n));
    for (int64_t mask = 0; mask < combos; ++mask) {
        int64_t m = mask;
        for (int i = 0; i < n; ++i) {
            assign[i] = static_cast<int>(m % n_clusters);
            m /= n_clusters;
        }
        double obj = 0.0;
        for (int k = 0; k < n_clusters; ++k) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(points[0].size());
            int count = 0;
            for (int i = 0; i < n; ++i)
                if (assign[i] == k) {
                    mean += points[i];
                    ++count;
                }
            if (count == 0) continue;
            mean /= count;
            for (int i = 0; i < n; ++i)
                if (assign[i] == k) obj += (points[i] - mean).squaredNorm();
        }
        best = std::min(best, obj);
    }
    return best;
}

// Random codec assembled the way the artifact builds codecs: entry 0 of
// every stage is the reserved zero (skip) code.
RvqCodec random_codec(std::mt19937_64& rng, int depth, int n, int dim) {
    std::normal_distribution<double> g(0.0, 1.0);
    RvqCodec codec;
    for (int d = 0; d < depth; ++d) {
        Codebook cb;
        cb.entries = Eigen::MatrixXd(n, dim);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dim; ++j) cb.entries(i, j) = g(rng) / (d + 1);
        pin_zero_entry(cb);
        codec.stages.push_back(std::move(cb));
    }
    return codec;
}

} // namespace

TEST_CASE("vq_nearest distance and tie rules") {
    const Codebook cb = make_codebook({{0, 0}, {1, 1}});
    CHECK(vq_nearest(vec({0.9, 0.8}), cb).first == 1);
    CHECK(vq_nearest(vec({0.5, 0.5}), cb).first == 0); // equidistant -> lowest index
    auto [idx, e] = vq_nearest(vec({1, 1}), cb);
    CHECK(idx == 1);
    CHECK((e - vec({1, 1})).norm() == 0.0);
    CHECK_THROWS_AS(vq_nearest(vec({1, 2, 3}), cb), PreconditionError);
}

TEST_CASE("rvq_encode hand-evaluated chain") {
    RvqCodec codec;
    codec.stages.push_back(make_codebook({{1, 0}, {0, 1}}));
    codec.stages.push_back(make_codebook({{0.25, 0}, {0, 0.25}}));

    const auto codes = rvq_encode(vec({1.2, 0.1}), codec);
    REQUIRE(codes.size() == 2);
    CHECK(codes[0] == 0);
    CHECK(codes[1] == 0);
    const Eigen::VectorXd xhat = rvq_decode(codes, codec);
    CHECK((xhat - vec({1.25, 0.0})).norm() < 1e-15);

    // The final residual is x - xhat.
    CHECK((vec({1.2, 0.1}) - xhat - vec({-0.05, 0.1})).norm() < 1e-15);
}

TEST_CASE("rvq with a zero entry reaches zero residual on codebook vectors") {
    RvqCodec codec;
    codec.stages.push_back(make_codebook({{1, 0}, {0, 1}}));
    codec.stages.push_back(make_codebook({{0, 0}, {0.5, 0.5}}));
    const auto codes = rvq_encode(vec({0, 1}), codec);
    CHECK((rvq_decode(codes, codec) - vec({0, 1})).norm() == 0.0);
}

TEST_CASE("depth-1 rvq reduces to vq_nearest") {
    std::mt19937_64 rng(1);
    RvqCodec codec = random_codec(rng, 1, 16, 4);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 50; ++i) {
        Eigen::VectorXd x(4);
        for (int j = 0; j < 4; ++j) x[j] = g(rng);
        const auto codes = rvq_encode(x, codec);
        CHECK(codes[0] == vq_nearest(x, codec.stages[0]).first);
    }
}

TEST_CASE("rvq_decode validates codes") {
    std::mt19937_64 rng(2);
    const RvqCodec codec = random_codec(rng, 2, 8, 3);
    CHECK_THROWS_AS(rvq_decode({7, 8}, codec), CorruptStreamError);
    CHECK_THROWS_AS(rvq_decode({1}, codec), CorruptStreamError);
}

TEST_CASE("residual monotonicity in depth") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const int depth = 1 + static_cast<int>(rng() % 6);
        const int n = 2 + static_cast<int>(rng() % 15);
        const int dim = 2 + static_cast<int>(rng() % 6);
        const RvqCodec codec = random_codec(rng, depth, n, dim);
        Eigen::VectorXd x(dim);
        for (int j = 0; j < dim; ++j) x[j] = 2.0 * g(rng);
        const auto codes = rvq_encode(x, codec);
        double prev = x.norm();
        for (int d = 1; d <= depth; ++d) {
            const double err = (x - rvq_decode_prefix(codes, codec, d)).norm();
            CHECK(err <= prev + 1e-12);
            prev = err;
        }
    }
}

TEST_CASE("bits per input") {
    std::mt19937_64 rng(4);
    const RvqCodec codec = random_codec(rng, 4, 1024, 8);
    CHECK(codec.bits_per_input() == 40);
    CHECK(code_bits(1024) == 10);
    CHECK(code_bits(2) == 1);
    CHECK(code_bits(1) == 0);
    CHECK(code_bits(1000) == 10);
}

TEST_CASE("kmeans trivial instances") {
    {
        const std::vector<Eigen::VectorXd> pts = {vec({0, 0}), vec({0, 1})};
        const Codebook cb = kmeans_fit(pts, 2, 10, 0);
        CHECK(kmeans_objective(pts, cb) == doctest::Approx(0.0));
    }
    {
        const std::vector<Eigen::VectorXd> pts = {vec({0}), vec({2})};
        const Codebook cb = kmeans_fit(pts, 1, 10, 0);
        CHECK(cb.entries(0, 0) == doctest::Approx(1.0));
        CHECK(kmeans_objective(pts, cb) == doctest::Approx(2.0));
    }
    CHECK_THROWS_AS(kmeans_fit({}, 2, 5, 0), PreconditionError);
    CHECK_THROWS_AS(kmeans_fit({vec({0})}, 0, 5, 0), PreconditionError);
}

TEST_CASE("kmeans matches the exhaustive optimum on tiny instances") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 4 + static_cast<int>(rng() % 3); // 4..6 points
        std::vector<Eigen::VectorXd> pts;
        for (int i = 0; i < n; ++i) pts.push_back(vec({g(rng), g(rng)}));
        const double oracle = brute_force_kmeans_objective(pts, 2);
        // A few restarts to avoid a poor k-means++ draw.
        double best = std::numeric_limits<double>::infinity();
        for (uint64_t seed = 0; seed < 8; ++seed)
            best = std::min(best, kmeans_objective(pts, kmeans_fit(pts, 2, 25, seed)));
        CHECK(best == doctest::Approx(oracle).epsilon(1e-9));
    }
}

TEST_CASE("kmeans objective is non-increasing across iterations") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Eigen::VectorXd> pts;
    for (int i = 0; i < 64; ++i) pts.push_back(vec({g(rng), g(rng), g(rng)}));
    double prev = std::numeric_limits<double>::infinity();
    for (int iters = 1; iters <= 12; ++iters) {
        const double obj = kmeans_objective(pts, kmeans_fit(pts, 8, iters, 42));
        CHECK(obj <= prev + 1e-12);
        prev = obj;
    }
}

TEST_CASE("kmeans is deterministic given the seed") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Eigen::VectorXd> pts;
    for (int i = 0; i < 40; ++i) pts.push_back(vec({g(rng), g(rng)}));
    const Codebook a = kmeans_fit(pts, 5, 10, 123);
    const Codebook b = kmeans_fit(pts, 5, 10, 123);
    CHECK((a.entries - b.entries).norm() == 0.0);
}

TEST_CASE("ema_update semantics") {
    Codebook cb = make_codebook({{0, 0}, {4, 4}});
    EmaState state;

    // Empty batch leaves the codebook unchanged.
    const Eigen::MatrixXd before = cb.entries;
    ema_update(cb, state, {}, {}, 0.5);
    CHECK((cb.entries - before).norm() == 0.0);

    // All mass on entry 0 with decay -> 0 snaps to the batch mean.
    Codebook cb2 = make_codebook({{0, 0}, {4, 4}});
    EmaState st2;
    ema_update(cb2, st2, {vec({1, 0}), vec({3, 0})}, {0, 0}, 1e-12);
    CHECK((cb2.entries.row(0).transpose() - vec({2, 0})).norm() < 1e-6);
    CHECK((cb2.entries.row(1).transpose() - vec({4, 4})).norm() == 0.0);

    // Frozen codebooks reject updates.
    Codebook frozen = make_codebook({{0, 0}});
    frozen.frozen = true;
    EmaState st3;
    CHECK_THROWS_AS(ema_update(frozen, st3, {vec({1, 1})}, {0}, 0.9), FrozenCodebookError);
}

TEST_CASE("ema converges geometrically to the batch mean") {
    Codebook cb = make_codebook({{10, -10}});
    EmaState state;
    const std::vector<Eigen::VectorXd> batch = {vec({1, 2}), vec({3, 4})};
    const std::vector<int> assign = {0, 0};
    const double decay = 0.9;
    const Eigen::VectorXd mean = vec({2, 3});

    // Closed-form recurrence: counts_t = n*(1-decay^t)/(1-decay),
    // sums_t likewise, so the entry is a weighted mean approaching `mean`.
    for (int t = 1; t <= 60; ++t) {
        ema_update(cb, state, batch, assign, decay);
        const double factor = (1.0 - std::pow(decay, t)) / (1.0 - decay);
        CHECK(state.counts[0] == doctest::Approx(2.0 * factor).epsilon(1e-12));
        CHECK((state.sums.row(0).transpose() - 2.0 * factor * mean).norm() < 1e-9);
    }
    CHECK((cb.entries.row(0).transpose() - mean).norm() < 1e-9);
}

TEST_CASE("commitment loss values") {
    CHECK(commitment_loss(vec({1, 2}), vec({1, 2})) == doctest::Approx(0.0));
    CHECK(commitment_loss(vec({1, 0}), vec({0, 0})) == doctest::Approx(0.5));
    CHECK_THROWS_AS(commitment_loss(vec({1}), vec({1, 2})), PreconditionError);
}

TEST_CASE("frozen codebooks stay byte-identical through encode/decode") {
    std::mt19937_64 rng(8);
    RvqCodec codec = random_codec(rng, 3, 16, 4);
    for (Codebook& cb : codec.stages) cb.frozen = true;
    const Eigen::MatrixXd snapshot0 = codec.stages[0].entries;
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd x(4);
        for (int j = 0; j < 4; ++j) x[j] = g(rng);
        rvq_decode(rvq_encode(x, codec), codec);
    }
    CHECK((codec.stages[0].entries - snapshot0).norm() == 0.0);
}
