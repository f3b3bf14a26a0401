#include <doctest.h>

#include "fixtures.hpp"

#include <featpipe/io.hpp>
#include <featpipe/workflows.hpp>

#include <set>
#include <sstream>

using namespace featpipe;
using featpipe::testing::TempDir;

TEST_CASE("cached featurization: miss then hit, keyed by backend, set and options") {
    TempDir tmp;
    std::mt19937_64 rng(4);
    const auto bytes = encode_png(featpipe::testing::random_image(rng, 26, 18));
    const auto backend = make_backend("synthetic:patch-mean+center-attention", 4, 4);
    const auto set = standard_transform_set(4, Neighborhood::moore, {1, 2}, false);
    store::FeatureCache cache(tmp.path);

    bool hit = true;
    const auto first = workflows::featurize_cached(*backend, set, bytes, cache, {}, &hit);
    CHECK_FALSE(hit);
    const auto second = workflows::featurize_cached(*backend, set, bytes, cache, {}, &hit);
    CHECK(hit);
    CHECK(second.features.data == first.features.data);
    CHECK(second.attention.data == first.attention.data);
    CHECK(first.features.data.height() == 26);

    const auto direct = workflows::upsample_native(*backend, decode_image(bytes), set);
    CHECK(direct.features.data == first.features.data);

    UpsampleOptions l2;
    l2.l2_normalize = true;
    workflows::featurize_cached(*backend, set, bytes, cache, l2, &hit);
    CHECK_FALSE(hit);
    workflows::featurize_cached(*backend, TransformSet(), bytes, cache, {}, &hit);
    CHECK_FALSE(hit);
    CHECK(workflows::backend_key(*backend, l2) != workflows::backend_key(*backend));
}

TEST_CASE("blob images: one blob inside its box, hue opposite to the background") {
    for (std::uint64_t seed : {0u, 1u, 7u}) {
        const auto b = workflows::make_blob_image(seed, 96);
        CHECK(b.image.height() == 96);
        CHECK(b.box.valid());
        std::int64_t inside = 0, outside = 0;
        for (int y = 0; y < 96; ++y)
            for (int x = 0; x < 96; ++x) {
                if (!b.mask(y, x)) continue;
                const bool in_box = x >= b.box.x0 && x < b.box.x1 && y >= b.box.y0 && y < b.box.y1;
                (in_box ? inside : outside) += 1;
            }
        CHECK(inside > 0);
        CHECK(outside == 0);
    }
    CHECK(workflows::make_blob_image(3, 64).image == workflows::make_blob_image(3, 64).image);
}

TEST_CASE("weak-seg fixtures: scribbles are sparse and agree with the truth") {
    for (const auto& f : {workflows::color_fixture(2, 64), workflows::interiority_fixture(2, 64)}) {
        CAPTURE(f.name);
        std::size_t labelled = 0;
        std::set<int> seen;
        for (std::size_t i = 0; i < f.scribbles.size(); ++i) {
            const int s = f.scribbles.data()[i];
            if (s == 0) continue;
            ++labelled;
            seen.insert(s);
            CHECK(s == f.truth.data()[i]);
        }
        CHECK(labelled > 0);
        CHECK(labelled < f.scribbles.size() / 5);
        CHECK(seen == std::set<int>(f.classes.begin(), f.classes.end()));
    }
}

TEST_CASE("profile rows render as CSV") {
    const auto backend = make_backend("synthetic:patch-mean", 4, 4);
    workflows::ProfileOptions opts;
    opts.lengths = {16, 32};
    opts.repeats = 1;
    const auto rows = workflows::profile(*backend, standard_transform_set(4, Neighborhood::moore, {1}, false), opts);
    CHECK(rows.size() == 4);
    std::istringstream csv(workflows::profile_csv(rows));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "length,mode,wall_ms,peak_bytes");
    int n = 0;
    while (std::getline(csv, line)) n += !line.empty();
    CHECK(n == 4);
    for (const auto& r : rows) CHECK(r.peak_bytes > 0);
}
