#include <doctest.h>

#include "fixtures.hpp"

#include <featpipe/cas.hpp>

#include <cmath>
#include <numeric>

using namespace featpipe;
using namespace featpipe::cas;

namespace {

ClusterModel manual_model(std::vector<std::vector<double>> centroids, std::vector<int> assignment, int h, int w) {
    ClusterModel m;
    m.dims = static_cast<int>(centroids.front().size());
    m.effective_clusters = static_cast<int>(centroids.size());
    m.requested_clusters = m.effective_clusters;
    for (const auto& c : centroids) m.centroids.insert(m.centroids.end(), c.begin(), c.end());
    m.assignment = LabelRaster(h, w, 1, std::vector<std::int32_t>(assignment.begin(), assignment.end()));
    return m;
}

// Feature map of Gaussian blobs in feature space with a Gaussian attention bump.
std::pair<FeatureMap, AttentionMap> blob_fixture(std::mt19937_64& rng, int size) {
    FeatureMap fm{FloatRaster(size, size, 3)};
    AttentionMap am{FloatRaster(size, size, 1)};
    std::normal_distribution<float> noise(0.0f, 4.0f);
    const double cy = featpipe::testing::uniform_int(rng, size / 4, 3 * size / 4);
    const double cx = featpipe::testing::uniform_int(rng, size / 4, 3 * size / 4);
    const double r = size / 6.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            const bool inside = d2 < r * r;
            const float base[2][3] = {{40, 120, 60}, {220, 60, 40}};
            for (int c = 0; c < 3; ++c) fm.data(y, x, c) = base[inside][c] + noise(rng);
            am.data(y, x) = static_cast<float>(std::exp(-d2 / (2 * r * r)) + 1e-4);
        }
    }
    return {fm, am};
}

}  // namespace

TEST_CASE("kmeans: two separated blobs match the exhaustive 2-means optimum") {
    std::mt19937_64 rng(21);
    std::normal_distribution<float> noise(0.0f, 0.3f);
    FloatRaster fm(3, 4, 2);
    std::vector<int> truth(12);
    for (int i = 0; i < 12; ++i) {
        truth[i] = (i * 7) % 3 == 0 ? 1 : 0;
        fm.data()[2 * i] = (truth[i] ? 10.0f : 0.0f) + noise(rng);
        fm.data()[2 * i + 1] = (truth[i] ? -5.0f : 0.0f) + noise(rng);
    }
    // Exhaustive oracle over all 2-partitions (point 0 fixed in part 0).
    double best = std::numeric_limits<double>::infinity();
    unsigned best_mask = 0;
    for (unsigned mask = 0; mask < (1u << 11); ++mask) {
        double sums[2][2] = {}, counts[2] = {};
        for (int i = 0; i < 12; ++i) {
            const int part = i == 0 ? 0 : (mask >> (i - 1)) & 1u;
            counts[part] += 1;
            for (int d = 0; d < 2; ++d) sums[part][d] += fm.data()[2 * i + d];
        }
        if (counts[0] == 0 || counts[1] == 0) continue;
        double inertia = 0.0;
        for (int i = 0; i < 12; ++i) {
            const int part = i == 0 ? 0 : (mask >> (i - 1)) & 1u;
            for (int d = 0; d < 2; ++d) {
                const double diff = fm.data()[2 * i + d] - sums[part][d] / counts[part];
                inertia += diff * diff;
            }
        }
        if (inertia < best) {
            best = inertia;
            best_mask = mask;
        }
    }
    const auto model = kmeans(fm, {2, 3, 300, 1e-4});
    CHECK(model.inertia == doctest::Approx(best).epsilon(1e-9));
    for (int i = 0; i < 12; ++i) {
        const int oracle_part = i == 0 ? 0 : (best_mask >> (i - 1)) & 1u;
        const bool same_as_zero_oracle = oracle_part == 0;
        const bool same_as_zero_model = model.assignment.data()[i] == model.assignment.data()[0];
        CHECK(same_as_zero_oracle == same_as_zero_model);
        CHECK((truth[i] == truth[0]) == same_as_zero_model);
    }
}

TEST_CASE("kmeans: one cluster per pixel has zero inertia; constant input collapses") {
    std::mt19937_64 rng(22);
    const auto fm = featpipe::testing::random_floats(rng, 3, 3, 4);
    const auto m = kmeans(fm, {9, 1, 300, 1e-4});
    CHECK(m.effective_clusters == 9);
    CHECK(m.inertia == 0.0);

    const auto c = kmeans(FloatRaster(10, 10, 3, 0.5f), {80, 1, 300, 1e-4});
    CHECK(c.effective_clusters == 1);
    CHECK(c.inertia == 0.0);
    CHECK_THROWS_AS(kmeans(FloatRaster(2, 2, 3), {5, 0, 300, 1e-4}), std::invalid_argument);
}

TEST_CASE("kmeans: nearest-centroid assignment, monotone inertia, determinism") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        const auto fm = featpipe::testing::random_floats(rng, 20, 20, 3);
        const auto m = kmeans(fm, {12, static_cast<std::uint64_t>(trial), 300, 1e-4});
        for (std::size_t i = 1; i < m.inertia_history.size(); ++i) {
            CHECK(m.inertia_history[i] <= m.inertia_history[i - 1] + 1e-9);
        }
        std::vector<int> counts(m.effective_clusters, 0);
        for (std::size_t i = 0; i < fm.pixels(); ++i) {
            const int a = m.assignment.data()[i];
            ++counts[a];
            double own = 0.0;
            std::vector<double> dists(m.effective_clusters, 0.0);
            for (int c = 0; c < m.effective_clusters; ++c) {
                for (int d = 0; d < 3; ++d) {
                    const double diff = fm.data()[i * 3 + d] - m.centroid(c)[d];
                    dists[c] += diff * diff;
                }
            }
            own = dists[a];
            for (double v : dists) CHECK(own <= v + 1e-6);
        }
        for (int c : counts) CHECK(c > 0);
        const auto again = kmeans(fm, {12, static_cast<std::uint64_t>(trial), 300, 1e-4});
        CHECK(again.assignment == m.assignment);
        CHECK(again.centroids == m.centroids);
    }
}

TEST_CASE("attention_density: worked examples") {
    SUBCASE("areas {10, 90}, masses {0.5, 0.5}") {
        LabelRaster groups(1, 100, 1);
        FloatRaster attn(1, 100, 1);
        for (int i = 0; i < 100; ++i) {
            groups.data()[i] = i < 10 ? 0 : 1;
            attn.data()[i] = i < 10 ? 0.05f : 0.5f / 90.0f;
        }
        const auto s = attention_density(groups, 2, attn);
        CHECK(s.rho[0] == doctest::Approx(0.05));
        CHECK(s.rho[1] == doctest::Approx(0.5 / 90.0));
        CHECK(s.mean_rho == doctest::Approx((0.05 + 0.5 / 90.0) / 2.0));
        CHECK(s.foreground == std::vector<bool>{true, false});
        CHECK_FALSE(s.fallback);
    }
    SUBCASE("uniform attention falls back to cluster 0") {
        LabelRaster groups(2, 2, 1, std::vector<std::int32_t>{0, 1, 2, 1});
        const auto s = attention_density(groups, 3, FloatRaster(2, 2, 1, 0.25f));
        CHECK(s.fallback);
        CHECK(s.foreground == std::vector<bool>{true, false, false});
    }
    SUBCASE("all mass inside one cluster") {
        LabelRaster groups(1, 6, 1, std::vector<std::int32_t>{0, 0, 1, 1, 2, 2});
        FloatRaster attn(1, 6, 1, std::vector<float>{0, 0, 0.5f, 0.5f, 0, 0});
        const auto s = attention_density(groups, 3, attn);
        CHECK(s.foreground == std::vector<bool>{false, true, false});
    }
    CHECK_THROWS_WITH(attention_density(LabelRaster(1, 2, 1), 1, FloatRaster(1, 2, 1)), "attention not normalized");
}

TEST_CASE("semantic distance: hand-binned histogram mode") {
    CHECK(modal_distance({0.30, 0.31, 0.80}) == doctest::Approx(0.296875));
    CHECK(modal_distance({0.70}) == doctest::Approx(0.703125));  // bin [0.6875, 0.71875)
    CHECK(modal_distance({0.1, 1.5}) == doctest::Approx(0.109375));  // tie -> lower bin
    CHECK(modal_distance({2.0}) == doctest::Approx(1.984375));        // right edge clamps

    // Orthogonal fg/bg centroids -> every pair at 1.0 -> bin [1.0, 1.03125).
    const auto m = manual_model({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {0, 1, 2, 2}, 2, 2);
    const auto s = semantic_distance(m, {true, false, false});
    CHECK(s.pair_distances.size() == 2);
    CHECK(s.value == doctest::Approx(1.015625));
    CHECK_FALSE(s.degenerate_split);

    const auto all_fg = semantic_distance(m, {true, true, true});
    CHECK(all_fg.degenerate_split);
    CHECK(all_fg.value == doctest::Approx(1.0));  // median of three pairwise distances of 1
}

TEST_CASE("complete linkage: hand-run merges") {
    // Distances {d01 = 0.1, d02 = 0.9, d12 = 0.9}; threshold 0.2.
    const std::vector<double> d{0, 0.1, 0.9, 0.1, 0, 0.9, 0.9, 0.9, 0};
    CHECK(complete_linkage(d, 3, 0.2) == std::vector<int>{0, 0, 1});
    // Chain A-B 0.1, B-C 0.15, A-C 0.5: single linkage would join all three,
    // complete linkage stops once {A,B} is 0.5 away from C.
    const std::vector<double> chain{0, 0.1, 0.5, 0.1, 0, 0.15, 0.5, 0.15, 0};
    CHECK(complete_linkage(chain, 3, 0.2) == std::vector<int>{0, 0, 1});
    CHECK(complete_linkage(chain, 3, 0.6) == std::vector<int>{0, 0, 0});
    CHECK(complete_linkage(chain, 3, 1e-9) == std::vector<int>{0, 1, 2});
}

TEST_CASE("merge: lambda extremes, certificate and bookkeeping") {
    std::mt19937_64 rng(24);
    auto [fm, am] = blob_fixture(rng, 32);
    const auto model = kmeans(fm.data, {20, 7, 300, 1e-4});
    const auto split = attention_density(model, am);
    const auto sem = semantic_distance(model, split.foreground);

    const auto none = merge(model, am, sem.value, 1e-12);
    CHECK(none.class_count() == model.effective_clusters);
    const auto one = merge(model, am, sem.value, 1e9);
    CHECK(one.class_count() == 1);
    CHECK(one.classes[0].foreground);

    int previous = std::numeric_limits<int>::max();
    for (double lambda : {0.5, 0.95, 1.0, 1.1, 2.0}) {
        const auto cas = merge(model, am, sem.value, lambda);
        CHECK(cas.class_count() <= previous);
        previous = cas.class_count();
        std::int64_t area = 0;
        double mass = 0.0;
        for (const auto& c : cas.classes) {
            area += c.area;
            mass += c.attention_mass;
            CHECK(c.rho == doctest::Approx(c.attention_mass / static_cast<double>(c.area)));
            for (int a : c.clusters)
                for (int b : c.clusters) CHECK(cosine_distance(model.centroid(a), model.centroid(b)) <= lambda * sem.value);
        }
        CHECK(area == 32 * 32);
        const double total = std::accumulate(am.data.data().begin(), am.data.data().end(), 0.0);
        CHECK(mass == doctest::Approx(total).epsilon(1e-6));
        for (int i = 1; i < cas.class_count(); ++i) CHECK(cas.classes[i - 1].area >= cas.classes[i].area);
        CHECK(std::any_of(cas.classes.begin(), cas.classes.end(), [](const ClassInfo& c) { return c.foreground; }));
    }
}

TEST_CASE("segment: deterministic under a fixed seed and isolates the blob") {
    std::mt19937_64 rng(25);
    auto [fm, am] = blob_fixture(rng, 40);
    CasOptions opts;
    opts.kmeans.clusters = 30;
    opts.kmeans.seed = 99;
    const auto a = segment(fm, am, opts);
    const auto b = segment(fm, am, opts);
    CHECK(a.labels == b.labels);
    CHECK(a.d_sem == b.d_sem);
    // Foreground classes cover the high-attention blob.
    std::int64_t fg_area = 0;
    for (const auto& c : a.classes)
        if (c.foreground) fg_area += c.area;
    const double blob_area = M_PI * (40 / 6.0) * (40 / 6.0);
    CHECK(std::abs(fg_area - blob_area) < 0.25 * blob_area);
    const auto side = a.sidecar();
    CHECK(side.at("classes").size() == a.classes.size());
    CHECK(side.contains("d_sem"));
}
