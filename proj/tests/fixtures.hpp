#pragma once

// Random fixtures shared by the unit and acceptance suites.

#include <featpipe/geometry.hpp>
#include <featpipe/raster.hpp>

#include <filesystem>
#include <random>
#include <string>

namespace featpipe::testing {

inline Image random_image(std::mt19937_64& rng, int h, int w, int c = 3) {
    Image img(h, w, c);
    for (auto& v : img.data()) v = static_cast<std::uint8_t>(rng() & 0xFF);
    return img;
}

inline FloatRaster random_floats(std::mt19937_64& rng, int h, int w, int c) {
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    FloatRaster r(h, w, c);
    for (auto& v : r.data()) v = u(rng);
    return r;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

/// Random single transform valid for an h x w raster (non-composite).
inline TransformSpec random_primitive(std::mt19937_64& rng, int h, int w) {
    switch (rng() % 4) {
        case 0: return TransformSpec::identity();
        case 1: return TransformSpec::shift(uniform_int(rng, -(w - 1), w - 1), uniform_int(rng, -(h - 1), h - 1));
        case 2: return TransformSpec::flip(rng() % 2 ? FlipAxis::horizontal : FlipAxis::vertical);
        default: return TransformSpec::rotation(uniform_int(rng, 1, 3));
    }
}

/// Random transform; shifts are bounded by min(h, w) so they stay valid after rotations.
inline TransformSpec random_transform(std::mt19937_64& rng, int h, int w, int depth = 2) {
    const int m = std::min(h, w);
    if (depth > 0 && rng() % 3 == 0) {
        std::vector<TransformSpec> parts;
        const int n = uniform_int(rng, 0, 3);
        for (int i = 0; i < n; ++i) parts.push_back(random_transform(rng, m, m, depth - 1));
        return TransformSpec::compose(std::move(parts));
    }
    return random_primitive(rng, m, m);
}

/// Random set of wrap shifts and flips whose shifts are below the stride.
inline TransformSet random_shift_flip_set(std::mt19937_64& rng, int max_shift) {
    std::vector<TransformSpec> ts;
    const int n = uniform_int(rng, 1, 8);
    for (int i = 0; i < n; ++i) {
        auto s = TransformSpec::shift(uniform_int(rng, -max_shift, max_shift), uniform_int(rng, -max_shift, max_shift));
        switch (rng() % 4) {
            case 0: ts.push_back(s); break;
            case 1: ts.push_back(TransformSpec::compose({TransformSpec::flip(FlipAxis::horizontal), s})); break;
            case 2: ts.push_back(TransformSpec::compose({TransformSpec::flip(FlipAxis::vertical), s})); break;
            default: ts.push_back(TransformSpec::flip(rng() % 2 ? FlipAxis::horizontal : FlipAxis::vertical)); break;
        }
    }
    return TransformSet(std::move(ts));
}

/// Scratch directory removed on scope exit.
struct TempDir {
    std::filesystem::path path;

    TempDir() {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() /
               ("featpipe-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

}  // namespace featpipe::testing
