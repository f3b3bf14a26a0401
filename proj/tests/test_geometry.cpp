#include <doctest.h>

#include "fixtures.hpp"

#include <featpipe/geometry.hpp>

#include <set>
#include <tuple>

using namespace featpipe;
using featpipe::testing::random_floats;
using featpipe::testing::random_image;
using featpipe::testing::random_transform;

TEST_CASE("apply: identity returns the raster unchanged") {
    std::mt19937_64 rng(1);
    const auto r = random_image(rng, 5, 7);
    CHECK(apply(TransformSpec::identity(), r) == r);
    CHECK(apply(TransformSpec::compose({}), r) == r);
}

TEST_CASE("apply: wrap shift permutes a 1x4 row") {
    Raster<int> row(1, 4, 1, std::vector<int>{1, 2, 3, 4});  // a b c d
    const auto out = apply(TransformSpec::shift(1, 0), row);
    CHECK(out.data() == std::vector<int>{4, 1, 2, 3});
    const auto down = apply(TransformSpec::shift(0, 1), Raster<int>(3, 1, 1, std::vector<int>{1, 2, 3}));
    CHECK(down.data() == std::vector<int>{3, 1, 2});
}

TEST_CASE("apply: flips are involutions and mirror the right axis") {
    Raster<int> r(2, 3, 1, std::vector<int>{1, 2, 3, 4, 5, 6});
    CHECK(apply(TransformSpec::flip(FlipAxis::horizontal), r).data() == std::vector<int>{3, 2, 1, 6, 5, 4});
    CHECK(apply(TransformSpec::flip(FlipAxis::vertical), r).data() == std::vector<int>{4, 5, 6, 1, 2, 3});
    std::mt19937_64 rng(2);
    const auto img = random_image(rng, 6, 9);
    const auto h = TransformSpec::flip(FlipAxis::horizontal);
    CHECK(apply(h, apply(h, img)) == img);
}

TEST_CASE("apply: rotation swaps dimensions for odd quarter turns") {
    // [[1 2 3],[4 5 6]] rotated counter-clockwise -> [[3 6],[2 5],[1 4]]
    Raster<int> r(2, 3, 1, std::vector<int>{1, 2, 3, 4, 5, 6});
    const auto r1 = apply(TransformSpec::rotation(1), r);
    CHECK(r1.height() == 3);
    CHECK(r1.width() == 2);
    CHECK(r1.data() == std::vector<int>{3, 6, 2, 5, 1, 4});
    CHECK(apply(TransformSpec::rotation(2), r).data() == std::vector<int>{6, 5, 4, 3, 2, 1});
    CHECK(apply(TransformSpec::rotation(3), r).data() == std::vector<int>{4, 1, 5, 2, 6, 3});
    CHECK(TransformSpec::rotation(1).swaps_axes());
    CHECK_FALSE(TransformSpec::compose({TransformSpec::rotation(1), TransformSpec::rotation(3)}).swaps_axes());
}

TEST_CASE("apply: rejects out-of-range shifts and empty rasters") {
    Image img(4, 6, 1);
    CHECK_THROWS_AS(apply(TransformSpec::shift(6, 0), img), std::invalid_argument);
    CHECK_THROWS_AS(apply(TransformSpec::shift(0, -4), img), std::invalid_argument);
    CHECK_NOTHROW(apply(TransformSpec::shift(5, 3), img));
    CHECK_THROWS_AS(apply(TransformSpec::identity(), Image{}), std::invalid_argument);
    CHECK_THROWS_AS(TransformSpec::rotation(4), std::invalid_argument);
}

TEST_CASE("invert: closed forms") {
    CHECK(invert(TransformSpec::shift(2, -1)) == TransformSpec::shift(-2, 1));
    CHECK(invert(TransformSpec::flip(FlipAxis::vertical)) == TransformSpec::flip(FlipAxis::vertical));
    CHECK(invert(TransformSpec::rotation(1)) == TransformSpec::rotation(3));
    CHECK(invert(TransformSpec::rotation(2)) == TransformSpec::rotation(2));
    const auto a = TransformSpec::shift(1, 2);
    const auto b = TransformSpec::rotation(1);
    CHECK(invert(TransformSpec::compose({a, b})) == TransformSpec::compose({invert(b), invert(a)}));
}

TEST_CASE("property: round trip, composition coherence and shift group law") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const int h = featpipe::testing::uniform_int(rng, 1, 9);
        const int w = featpipe::testing::uniform_int(rng, 1, 9);
        const auto img = random_image(rng, h, w, 1 + static_cast<int>(rng() % 3));
        const auto f = random_floats(rng, h, w, 2);
        const auto t = random_transform(rng, h, w);
        CHECK(apply(invert(t), apply(t, img)) == img);
        CHECK(apply(invert(t), apply(t, f)) == f);

        const auto a = random_transform(rng, h, w);
        const auto b = random_transform(rng, h, w);
        CHECK(apply(TransformSpec::compose({a, b}), img) == apply(b, apply(a, img)));

        const int d1x = featpipe::testing::uniform_int(rng, -(w - 1), w - 1);
        const int d2x = featpipe::testing::uniform_int(rng, -(w - 1), w - 1);
        const int d1y = featpipe::testing::uniform_int(rng, -(h - 1), h - 1);
        const int d2y = featpipe::testing::uniform_int(rng, -(h - 1), h - 1);
        const auto lhs = apply(TransformSpec::shift(d1x, d1y), apply(TransformSpec::shift(d2x, d2y), img));
        const auto rhs = apply(TransformSpec::shift((d1x + d2x) % w, (d1y + d2y) % h), img);
        CHECK(lhs == rhs);
    }
}

TEST_CASE("standard_transform_set: documented cardinalities") {
    const auto s64 = standard_transform_set(4, Neighborhood::moore, {1, 2}, true);
    CHECK(s64.non_identity_count() == 64);
    CHECK(s64.size() == 65);
    CHECK(s64[0] == TransformSpec::identity());

    const auto id_only = standard_transform_set(4, Neighborhood::moore, {}, false);
    CHECK(id_only.size() == 1);
    CHECK(id_only[0] == TransformSpec::identity());

    const auto vn = standard_transform_set(4, Neighborhood::von_neumann, {1, 2}, false);
    REQUIRE(vn.non_identity_count() == 8);
    // Hand enumeration: 4 axis directions x distances {1, 2}.
    std::set<std::pair<int, int>> expected{{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {2, 0}, {-2, 0}, {0, 2}, {0, -2}};
    std::set<std::pair<int, int>> got;
    for (std::size_t i = 1; i < vn.size(); ++i) {
        REQUIRE(vn[i].is<ShiftOp>());
        got.insert({vn[i].as<ShiftOp>().dx, vn[i].as<ShiftOp>().dy});
    }
    CHECK(got == expected);

    const auto flips_only = standard_transform_set(4, Neighborhood::moore, {}, true);
    CHECK(flips_only.non_identity_count() == 3);
}

namespace {

// Effect of a generated transform on a 16x16 probe, used to check that
// elements are distinct as actions, not only structurally.
Raster<int> probe_action(const TransformSpec& t) {
    Raster<int> probe(16, 16, 1);
    for (std::size_t i = 0; i < probe.size(); ++i) probe.data()[i] = static_cast<int>(i);
    return apply(t, probe);
}

}  // namespace

TEST_CASE("standard_transform_set: exhaustive enumeration matches closed form") {
    for (int stride : {2, 4, 8}) {
        std::vector<int> distances;
        for (int d = 1; d <= stride / 2; ++d) distances.push_back(d);
        for (auto nb : {Neighborhood::moore, Neighborhood::von_neumann}) {
            for (bool flips : {false, true}) {
                const auto set = standard_transform_set(stride, nb, distances, flips);
                // Independent enumeration: (flip h, flip v, dx, dy) tuples.
                std::set<std::tuple<bool, bool, int, int>> tuples;
                const int dirs = nb == Neighborhood::moore ? 8 : 4;
                for (int fh = 0; fh < (flips ? 2 : 1); ++fh) {
                    for (int fv = 0; fv < (flips ? 2 : 1); ++fv) {
                        for (int d : distances) {
                            for (int dy = -1; dy <= 1; ++dy) {
                                for (int dx = -1; dx <= 1; ++dx) {
                                    if (dx == 0 && dy == 0) continue;
                                    if (dirs == 4 && dx != 0 && dy != 0) continue;
                                    tuples.insert({fh == 1, fv == 1, dx * d, dy * d});
                                }
                            }
                        }
                    }
                }
                CHECK(set.non_identity_count() == tuples.size());
                CHECK(set.non_identity_count() == standard_transform_count(nb, distances.size(), flips));
                std::set<std::vector<int>> actions;
                for (const auto& t : set.transforms()) actions.insert(probe_action(t).data());
                CHECK(actions.size() == set.size());
            }
        }
    }
}

TEST_CASE("TransformSet: identity first and duplicates dropped") {
    const auto s = TransformSet({TransformSpec::shift(1, 0), TransformSpec::identity(), TransformSpec::shift(1, 0)});
    REQUIRE(s.size() == 2);
    CHECK(s[0] == TransformSpec::identity());
    CHECK(s[1] == TransformSpec::shift(1, 0));
}

TEST_CASE("TransformSet: JSON document round trip") {
    const auto extra = TransformSpec::compose({TransformSpec::rotation(1), TransformSpec::shift(1, 1)});
    const auto set = standard_transform_set(4, Neighborhood::von_neumann, {1, 2}, true, {extra});
    const auto j = set.to_json();
    CHECK(j.at("stride") == 4);
    CHECK(j.at("neighborhood") == "von_neumann");
    CHECK(j.at("flips") == true);
    CHECK(j.at("extra").size() == 1);
    const auto back = TransformSet::from_json(j);
    CHECK(back.transforms() == set.transforms());
    CHECK(TransformSpec::from_json(extra.to_json()) == extra);
}
