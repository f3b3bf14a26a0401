#include <doctest.h>

#include "fixtures.hpp"

#include <featpipe/pixelclf.hpp>

#include <cmath>
#include <numeric>
#include <random>

using namespace featpipe;
using namespace featpipe::pixelclf;

namespace {

// Direct (non-separable) 2-D convolution with reflective indexing.
std::vector<double> convolve2d(const std::vector<double>& p, int h, int w, const std::vector<double>& k, int r) {
    auto refl = [](int i, int n) {
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
        return i;
    };
    const int side = 2 * r + 1;
    std::vector<double> out(p.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) acc += k[(dy + r) * side + dx + r] * p[refl(y + dy, h) * w + refl(x + dx, w)];
            out[y * w + x] = acc;
        }
    return out;
}

FeatureRecipe deep_recipe(int d) {
    FeatureRecipe r;
    r.source = FeatureSource::deep;
    r.deep_dims = d;
    return r;
}

Samples random_problem(std::mt19937_64& rng, int n, int d, int k) {
    std::normal_distribution<double> g;
    Samples s{Eigen::MatrixXd(n, d), std::vector<int>(n)};
    for (int i = 0; i < n; ++i) {
        s.y[i] = 1 + i % k;
        for (int c = 0; c < d; ++c) s.x(i, c) = g(rng) * (1 + c) + 0.8 * s.y[i] * (c % 2 ? 1 : -1);
    }
    return s;
}

}  // namespace

TEST_CASE("classical: channel layout, constants and DoG of identical sigmas") {
    Image img(9, 11, 3, 77);
    const auto st = classical_features(img);
    CHECK(st.data.channels() == 30);
    CHECK(st.names.size() == 30);
    CHECK(st.names[0] == "raw");
    CHECK(st.names[1] == "gaussian(s=1.0)");
    CHECK(st.names[29] == "dog(s=8.0,16.0)");
    for (int c = 0; c < 30; ++c) {
        const auto& n = st.names[c];
        const bool smooth_channel = n == "raw" || n.rfind("gaussian", 0) == 0;
        for (std::size_t i = 0; i < st.data.pixels(); ++i) {
            const float v = st.data.data()[i * 30 + c];
            if (smooth_channel) CHECK(v == doctest::Approx(77.0).epsilon(1e-6));
            else CHECK(v == 0.0f);
        }
    }
    ClassicalRecipe twin{{2.0, 2.0}, false};
    std::mt19937_64 rng(3);
    const auto t = classical_features(featpipe::testing::random_image(rng, 12, 12, 1), twin);
    CHECK(t.data.channels() == twin.channels_per_band());
    const int dog = t.data.channels() - 1;
    for (std::size_t i = 0; i < t.data.pixels(); ++i) CHECK(t.data.data()[i * t.data.channels() + dog] == 0.0f);

    CHECK(classical_features(img, ClassicalRecipe{{1.0}, true}).data.channels() == 3 * 6);
    CHECK_THROWS_AS(classical_features(img, ClassicalRecipe{{1.0, 0.0}, false}), std::invalid_argument);
    CHECK_THROWS_AS(classical_features(img, ClassicalRecipe{{-2.0}, false}), std::invalid_argument);
}

TEST_CASE("classical: separable blur and Sobel agree with direct convolution") {
    std::mt19937_64 rng(5);
    const int h = 13, w = 10;
    std::vector<double> p(h * w);
    for (auto& v : p) v = std::uniform_real_distribution<double>(0, 255)(rng);
    for (double sigma : {0.7, 1.0, 2.5, 6.0}) {
        const auto k1 = gaussian_kernel(sigma);
        const int r = static_cast<int>(k1.size() / 2);
        std::vector<double> k2(k1.size() * k1.size());
        for (std::size_t a = 0; a < k1.size(); ++a)
            for (std::size_t b = 0; b < k1.size(); ++b) k2[a * k1.size() + b] = k1[a] * k1[b];
        const auto sep = gaussian_blur(p, h, w, sigma);
        const auto direct = convolve2d(p, h, w, k2, r);
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(sep[i] == doctest::Approx(direct[i]).epsilon(1e-9));
    }
    // Sobel magnitude from the two direct 3x3 correlations.
    const std::vector<double> kx{-1, 0, 1, -2, 0, 2, -1, 0, 1}, ky{-1, -2, -1, 0, 0, 0, 1, 2, 1};
    const auto gx = convolve2d(p, h, w, kx, 1), gy = convolve2d(p, h, w, ky, 1);
    const auto mag = sobel_magnitude(p, h, w);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(mag[i] == doctest::Approx(std::hypot(gx[i], gy[i])));
}

TEST_CASE("classical: vertical step edge gives a Sobel ridge at the step") {
    const int h = 16, w = 20, step = 10;
    Image img(h, w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = step; x < w; ++x) img(y, x) = 200;
    const auto st = classical_features(img, ClassicalRecipe{{1.0}, false});
    const int sobel = 2;  // raw, gaussian, sobel, ...
    REQUIRE(st.names[sobel] == "sobel(s=1.0)");
    for (int y = 0; y < h; ++y) {
        int best = 0;
        for (int x = 1; x < w; ++x)
            if (st.data(y, x, sobel) > st.data(y, best, sobel)) best = x;
        // The edge sits between columns step-1 and step; the ridge peaks on one of them.
        CHECK((best == step - 1 || best == step));
        CHECK(st.data(y, 0, sobel) == doctest::Approx(0.0).epsilon(1e-3));
    }
}

TEST_CASE("logistic: analytic gradient matches central differences") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 7 + trial, d = 1 + trial % 4, k = 2 + trial % 3;
        Eigen::MatrixXd z = Eigen::MatrixXd::Random(n, d);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) y[i] = static_cast<int>(rng() % k);
        LogisticObjective obj(z, y, k, 0.3 + trial * 0.2);
        Eigen::VectorXd theta = Eigen::VectorXd::Random(obj.parameters()), g, scratch;
        obj.value_and_gradient(theta, g);
        for (int i = 0; i < obj.parameters(); ++i) {
            const double eps = 1e-6;
            Eigen::VectorXd a = theta, b = theta;
            a[i] += eps;
            b[i] -= eps;
            const double fd = (obj.value_and_gradient(a, scratch) - obj.value_and_gradient(b, scratch)) / (2 * eps);
            CHECK(std::abs(fd - g[i]) <= 1e-4 * std::max(1.0, std::abs(g[i])));
        }
    }
}

TEST_CASE("logistic: loss is non-increasing and converges") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        const auto s = random_problem(rng, 120, 4, 3);
        const auto clf = train(s, deep_recipe(4));
        const auto hist = clf.training()["loss_history"].get<std::vector<double>>();
        for (std::size_t i = 1; i < hist.size(); ++i) CHECK(hist[i] <= hist[i - 1]);
        CHECK(clf.training()["converged"].get<bool>());
        CHECK(clf.training()["grad_norm"].get<double>() <= 1e-4);
        const auto p = clf.predict_proba(s.x);
        for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("logistic: worked examples") {
    SUBCASE("1-D separable points") {
        Samples s{Eigen::MatrixXd(2, 1), {1, 2}};
        s.x << -1, 1;
        const auto clf = train(s, deep_recipe(1));
        CHECK(clf.predict(s.x) == std::vector<int>{1, 2});
        Eigen::MatrixXd probe(4, 1);
        probe << -10, -0.1, 0.1, 10;
        CHECK(clf.predict(probe) == std::vector<int>{1, 1, 2, 2});
    }
    SUBCASE("conflicting labels at one vector fit the empirical posterior") {
        Samples s{Eigen::MatrixXd::Constant(4, 2, 0.5), {1, 1, 1, 2}};
        const auto clf = train(s, deep_recipe(2));
        const auto p = clf.predict_proba(s.x.topRows(1));
        CHECK(p(0, 0) == doctest::Approx(0.75).epsilon(1e-4));
        CHECK(p(0, 1) == doctest::Approx(0.25).epsilon(1e-4));
    }
    SUBCASE("balanced classes on identical vectors give one half everywhere") {
        FloatRaster f(6, 6, 3, 1.25f);
        LabelRaster l(6, 6, 1);
        l(0, 0) = l(1, 1) = 1;
        l(2, 2) = l(3, 3) = 2;
        const auto clf = train(f, l, deep_recipe(3));
        const auto pred = clf.predict(f, deep_recipe(3));
        for (float v : pred.probabilities.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));
        for (int v : pred.labels.data()) CHECK(v == 1);  // tie -> lowest class id
    }
    SUBCASE("errors") {
        Samples one{Eigen::MatrixXd::Zero(3, 1), {2, 2, 2}};
        CHECK_THROWS_WITH(train(one, deep_recipe(1)), "need ≥2 classes");
        FloatRaster f(2, 2, 2, 0.0f);
        f(1, 0, 1) = std::nanf("");
        LabelRaster l(2, 2, 1, std::vector<std::int32_t>{1, 2, 1, 2});
        CHECK_THROWS_WITH(train(f, l, deep_recipe(2)), doctest::Contains("deep[1]"));
    }
}

TEST_CASE("logistic: standardization and representation invariances") {
    std::mt19937_64 rng(13);
    const auto s = random_problem(rng, 150, 3, 3);
    const auto base = train(s, deep_recipe(3)).predict(s.x);

    Samples scaled = s;
    scaled.x.col(1) = scaled.x.col(1) * -37.5 + Eigen::VectorXd::Constant(s.x.rows(), 1000.0);
    const auto clf_scaled = train(scaled, deep_recipe(3));
    CHECK(clf_scaled.predict(scaled.x) == base);

    // Permute channels; weights come out permuted and predictions match.
    Samples perm = s;
    perm.x.col(0) = s.x.col(2);
    perm.x.col(2) = s.x.col(0);
    const auto a = train(s, deep_recipe(3)), b = train(perm, deep_recipe(3));
    CHECK(b.predict(perm.x) == base);
    CHECK(b.weights()(0, 0) == doctest::Approx(a.weights()(0, 2)).epsilon(1e-5));

    // Hybrid with an all-zero classical block equals deep-only.
    Samples hybrid = s;
    hybrid.x.conservativeResize(Eigen::NoChange, 5);
    hybrid.x.rightCols(2).setZero();
    FeatureRecipe hr;
    hr.source = FeatureSource::hybrid;
    hr.deep_dims = 3;
    hr.classical_dims = 2;
    const auto hclf = train(hybrid, hr);
    CHECK(hclf.predict(hybrid.x) == base);
    CHECK(hclf.weights().rightCols(2).norm() == 0.0);
}

TEST_CASE("hybrid_stack layout") {
    FloatRaster deep(2, 3, 3), cl(2, 3, 2);
    for (std::size_t i = 0; i < deep.size(); ++i) deep.data()[i] = static_cast<float>(i);
    for (std::size_t i = 0; i < cl.size(); ++i) cl.data()[i] = -static_cast<float>(i) - 1;
    const auto h = hybrid_stack(deep, cl);
    CHECK(h.channels() == 5);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x) {
            for (int c = 0; c < 3; ++c) CHECK(h(y, x, c) == deep(y, x, c));
            for (int c = 0; c < 2; ++c) CHECK(h(y, x, 3 + c) == cl(y, x, c));
        }
    CHECK_THROWS_AS(hybrid_stack(deep, FloatRaster(3, 3, 2)), std::invalid_argument);
}

TEST_CASE("forest: XOR, determinism and row-order invariance") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-1, 1);
    Samples s{Eigen::MatrixXd(200, 2), std::vector<int>(200)};
    for (int i = 0; i < 200; ++i) {
        s.x(i, 0) = u(rng);
        s.x(i, 1) = u(rng);
        s.y[i] = (s.x(i, 0) > 0) != (s.x(i, 1) > 0) ? 2 : 1;
    }
    TrainOptions opt;
    opt.kind = ClassifierKind::random_forest;
    opt.seed = 9;
    FeatureRecipe r;
    r.source = FeatureSource::classical;
    r.classical_dims = 2;
    const auto clf = train(s, r, opt);
    const auto pred = clf.predict(s.x);
    int correct = 0;
    for (int i = 0; i < 200; ++i) correct += pred[i] == s.y[i];
    CHECK(correct / 200.0 >= 0.95);

    // The four-point XOR itself.
    Samples four{Eigen::MatrixXd(4, 2), {1, 2, 2, 1}};
    four.x << 0, 0, 0, 1, 1, 0, 1, 1;
    Samples rep;
    for (int i = 0; i < 10; ++i) append_samples(rep, four);
    const auto xor_clf = train(rep, r, opt);
    CHECK(xor_clf.predict(four.x) == four.y);

    const auto again = train(s, r, opt);
    CHECK(again.predict_proba(s.x) == clf.predict_proba(s.x));

    Samples shuffled = s;
    std::vector<int> idx(200);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < 200; ++i) {
        shuffled.x.row(i) = s.x.row(idx[i]);
        shuffled.y[i] = s.y[idx[i]];
    }
    CHECK(train(shuffled, r, opt).predict_proba(s.x) == clf.predict_proba(s.x));

    opt.workers = 3;
    CHECK(train(s, r, opt).predict_proba(s.x) == clf.predict_proba(s.x));

    const auto p = clf.predict_proba(s.x);
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("predict: recipe checks, raster plumbing and archives") {
    std::mt19937_64 rng(31);
    FloatRaster f(8, 8, 2);
    LabelRaster l(8, 8, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            f(y, x, 0) = x < 4 ? -1.0f : 1.0f;
            f(y, x, 1) = static_cast<float>(std::normal_distribution<double>()(rng));
            if (y % 3 == 0) l(y, x) = x < 4 ? 3 : 5;
        }
    const auto recipe = deep_recipe(2);
    for (auto kind : {ClassifierKind::logistic, ClassifierKind::random_forest}) {
        TrainOptions opt;
        opt.kind = kind;
        opt.trees = 20;
        const auto clf = train(f, l, recipe, opt);
        CHECK(clf.classes() == std::vector<int>{3, 5});
        const auto pred = clf.predict(f, recipe);
        CHECK(pred.probabilities.channels() == 2);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                if (l(y, x)) CHECK(pred.labels(y, x) == l(y, x));
            }

        auto other = recipe;
        other.deep = {{"backend", "something-else"}};
        try {
            clf.predict(f, other);
            FAIL("expected a recipe mismatch");
        } catch (const PixelClfError& e) {
            const std::string msg = e.what();
            CHECK(msg.find(recipe.to_json().dump()) != std::string::npos);
            CHECK(msg.find(other.to_json().dump()) != std::string::npos);
        }

        const auto bytes = clf.serialize();
        const auto back = PixelClassifier::deserialize(bytes);
        CHECK(back.serialize() == bytes);
        CHECK(back.kind() == kind);
        CHECK(back.predict(f, recipe).probabilities == pred.probabilities);
        auto bad = bytes;
        bad.pop_back();
        CHECK_THROWS_AS(PixelClassifier::deserialize(bad), PixelClfError);
    }
}

TEST_CASE("smooth: fixed point, speckle removal and boundary preservation") {
    const std::vector<int> classes{1, 2};
    auto probs_for = [&](const LabelRaster& l) {
        FloatRaster p(l.height(), l.width(), 2);
        for (std::size_t i = 0; i < l.pixels(); ++i) p.data()[i * 2 + (l.data()[i] == 1 ? 0 : 1)] = 0.9f;
        for (std::size_t i = 0; i < l.pixels(); ++i) p.data()[i * 2 + (l.data()[i] == 1 ? 1 : 0)] = 0.1f;
        return p;
    };
    LabelRaster uniform(10, 10, 1, 2);
    CHECK(smooth(uniform, probs_for(uniform), classes, 2) == uniform);

    LabelRaster speckle = uniform;
    speckle(5, 5) = 1;
    CHECK(smooth(speckle, probs_for(speckle), classes, 2) == uniform);

    LabelRaster halves(12, 12, 1, 1);
    for (int y = 0; y < 12; ++y)
        for (int x = 6; x < 12; ++x) halves(y, x) = 2;
    CHECK(smooth(halves, probs_for(halves), classes, 2) == halves);

    // Never introduces an absent class.
    LabelRaster three(6, 6, 1, 1);
    three(0, 0) = 2;
    FloatRaster p3(6, 6, 3, 1.0f / 3);
    const auto out = smooth(three, p3, {1, 2, 3}, 1);
    for (int v : out.data()) CHECK(v != 3);
    CHECK_THROWS_AS(smooth(three, p3, {1, 2, 3}, 0), std::invalid_argument);
}
