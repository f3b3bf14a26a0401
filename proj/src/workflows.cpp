#include <featpipe/workflows.hpp>

#include <featpipe/io.hpp>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace featpipe::workflows {

namespace {

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

int uniform(std::mt19937_64& rng, int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

LabelRaster binary(const LabelRaster& r) {
    LabelRaster out(r.height(), r.width(), 1);
    for (std::size_t i = 0; i < r.pixels(); ++i) out.data()[i] = r.data()[i] != 0 ? 1 : 0;
    return out;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : "—"; }

}  // namespace

// ---- unsupervised ------------------------------------------------------------

UnsupResult run_unsupervised(const FeaturizerBackend& backend, const Image& image, const TransformSet& set,
                             const UnsupOptions& options) {
    UnsupResult r;
    r.features = upsample_native(backend, image, set, options.upsample);
    r.cas = cas::segment(r.features.features, r.features.attention, options.cas);
    r.detection = detect::boxes(r.cas, options.min_area, options.connectivity);
    return r;
}

nlohmann::json BenchmarkReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"dataset", dataset},   {"mode", mode},     {"corloc", opt(corloc)},
            {"saliency_iou", opt(saliency_iou)}, {"miou", opt(miou)}, {"n_images", n_images},
            {"lambda", lambda},     {"seed", seed},     {"backend", backend},
            {"transform_set", transform_set}, {"per_image", per_image}};
}

std::string BenchmarkReport::markdown() const {
    std::ostringstream out;
    out << "| dataset | mode | CorLoc | saliency IoU | mIoU | images | lambda | seed | backend |\n";
    out << "|---|---|---|---|---|---|---|---|---|\n";
    out << fmt::format("| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n", dataset, mode, fmt_opt(corloc),
                       fmt_opt(saliency_iou), fmt_opt(miou), n_images, lambda, seed,
                       backend.value("name", std::string("?")));
    return out.str();
}

BenchmarkReport benchmark(const store::Dataset& dataset, const FeaturizerBackend& backend, const TransformSet& set,
                          const BenchmarkOptions& options) {
    BenchmarkReport report;
    report.dataset = options.dataset_name.empty() ? dataset.root.filename().string() : options.dataset_name;
    report.mode = options.single ? "single" : "multi";
    report.lambda = options.unsup.cas.lambda;
    report.seed = options.unsup.cas.kmeans.seed;
    report.backend = backend.descriptor().to_json();
    report.transform_set = set.to_json();
    report.n_images = dataset.entries.size();

    detect::BoxTable predictions, truth;
    double sal_sum = 0.0, miou_sum = 0.0;
    std::size_t masks = 0;
    for (const auto& entry : dataset.entries) {
        auto opts = options.unsup;
        opts.upsample.image_id = entry.id;
        const auto image = read_image(entry.image);
        const auto r = run_unsupervised(backend, image, set, opts);
        const auto boxes = r.detection.predictions(options.single);
        nlohmann::json row = {{"id", entry.id}, {"classes", r.cas.class_count()}, {"d_sem", r.cas.d_sem}};
        nlohmann::json jb = nlohmann::json::array();
        for (const auto& b : boxes) jb.push_back(detect::to_json(b));
        row["boxes"] = jb;
        if (entry.boxes) {
            truth[entry.id] = *entry.boxes;
            predictions[entry.id] = boxes;
            bool hit = false;
            for (const auto& p : boxes)
                for (const auto& g : *entry.boxes) hit = hit || detect::iou(p, g) > 0.5;
            row["hit"] = hit;
        }
        if (entry.mask) {
            const auto gt = binary(read_indexed_png(*entry.mask));
            const double s = detect::iou(r.detection.saliency, gt);
            const double m = detect::miou(r.detection.saliency, gt, {0, 1});
            sal_sum += s;
            miou_sum += m;
            ++masks;
            row["saliency_iou"] = s;
        }
        spdlog::debug("benchmark {}: {} boxes", entry.id, boxes.size());
        report.per_image.push_back(row);
    }
    if (!truth.empty()) report.corloc = detect::corloc(predictions, truth);
    if (masks > 0) {
        report.saliency_iou = sal_sum / static_cast<double>(masks);
        report.miou = miou_sum / static_cast<double>(masks);
    }
    return report;
}

// ---- cached featurization -------------------------------------------------------

nlohmann::json backend_key(const FeaturizerBackend& backend, const UpsampleOptions& options) {
    auto j = backend.descriptor().to_json();
    if (options.l2_normalize) j["l2_normalize"] = true;
    return j;
}

UpsampleResult upsample_native(const FeaturizerBackend& backend, const Image& image, const TransformSet& set,
                               const UpsampleOptions& options) {
    const auto conformed = store::conform(image, backend.descriptor());
    if (conformed.mapping.identity()) return upsample(backend, image, set, options);
    auto r = upsample(backend, conformed.image, set, options);
    r.features.data = store::restore(r.features.data, conformed.mapping);
    r.attention.data = store::restore(r.attention.data, conformed.mapping);
    r.features.provenance["conform"] = conformed.mapping.to_json();
    return r;
}

store::CachedFeatures featurize_cached(const FeaturizerBackend& backend, const TransformSet& set,
                                       std::span<const std::uint8_t> image_bytes, store::FeatureCache& cache,
                                       const UpsampleOptions& options, bool* hit) {
    const auto key = store::cache_key(image_bytes, backend_key(backend, options), set.to_json());
    if (auto cached = cache.get(key)) {
        if (hit) *hit = true;
        return std::move(*cached);
    }
    if (hit) *hit = false;
    auto r = upsample_native(backend, decode_image(image_bytes), set, options);
    store::CachedFeatures out{std::move(r.features), std::move(r.attention)};
    cache.put(key, out.features, out.attention);
    return out;
}

// ---- weak supervision ------------------------------------------------------------

pixelclf::FeatureRecipe recipe_for(const FeatureSpec& spec, int image_channels) {
    pixelclf::FeatureRecipe r;
    r.source = spec.source;
    if (spec.source != pixelclf::FeatureSource::classical) {
        if (!spec.backend) throw std::invalid_argument("deep features need a backend");
        r.deep_dims = spec.backend->descriptor().hidden_dim;
        r.deep = {{"backend", spec.backend->descriptor().to_json()},
                  {"transform_set", spec.transforms.to_json()},
                  {"l2_normalize", spec.upsample.l2_normalize}};
    }
    if (spec.source != pixelclf::FeatureSource::deep) {
        r.classical = spec.classical;
        r.classical_names = spec.classical.channel_names(image_channels);
        r.classical_dims = static_cast<int>(r.classical_names.size());
    }
    return r;
}

PixelFeatures pixel_features(const Image& image, const FeatureSpec& spec, const FeatureMap* deep) {
    PixelFeatures out;
    out.recipe = recipe_for(spec, image.channels());
    FloatRaster deep_data;
    if (spec.source != pixelclf::FeatureSource::classical) {
        if (deep) {
            deep_data = deep->data;
        } else {
            deep_data = upsample_native(*spec.backend, image, spec.transforms, spec.upsample).features.data;
        }
        if (deep_data.channels() != out.recipe.deep_dims) {
            throw std::invalid_argument("deep features have " + std::to_string(deep_data.channels()) +
                                        " channels but the backend declares " + std::to_string(out.recipe.deep_dims));
        }
    }
    switch (spec.source) {
        case pixelclf::FeatureSource::deep:
            out.data = std::move(deep_data);
            break;
        case pixelclf::FeatureSource::classical:
            out.data = pixelclf::classical_features(image, spec.classical).data;
            break;
        case pixelclf::FeatureSource::hybrid:
            out.data = pixelclf::hybrid_stack(deep_data, pixelclf::classical_features(image, spec.classical).data);
            break;
    }
    return out;
}

WeakSegFixture color_fixture(std::uint64_t seed, int size) {
    std::mt19937_64 rng(seed);
    WeakSegFixture f{"color", Image(size, size, 3), LabelRaster(size, size, 1), LabelRaster(size, size, 1), {1, 2, 3}};
    // Voronoi regions around three well separated sites.
    std::array<std::pair<double, double>, 3> sites;
    for (;;) {
        for (auto& s : sites) s = {uniform(rng, size / 8, size - size / 8), uniform(rng, size / 8, size - size / 8)};
        bool ok = true;
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b)
                ok = ok && std::hypot(sites[a].first - sites[b].first, sites[a].second - sites[b].second) > size / 2.5;
        if (ok) break;
    }
    const std::array<std::array<double, 3>, 3> base{{{200, 40, 40}, {40, 180, 60}, {50, 60, 210}}};
    std::normal_distribution<double> noise(0.0, 6.0);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            std::array<double, 3> d;
            for (int k = 0; k < 3; ++k) d[k] = std::hypot(y - sites[k].first, x - sites[k].second);
            const int k = static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin());
            f.truth(y, x) = k + 1;
            for (int c = 0; c < 3; ++c) f.image(y, x, c) = clamp_u8(base[k][c] + noise(rng));
            // Sparse labels away from region borders.
            std::array<double, 3> sorted = d;
            std::sort(sorted.begin(), sorted.end());
            if (sorted[1] - sorted[0] > 8.0 && unit(rng) < 0.03) f.scribbles(y, x) = k + 1;
        }
    }
    return f;
}

WeakSegFixture interiority_fixture(std::uint64_t seed, int size) {
    std::mt19937_64 rng(seed);
    WeakSegFixture f{"interiority", Image(size, size, 3), LabelRaster(size, size, 1), LabelRaster(size, size, 1), {1, 2}};
    const double cy = (size - 1) / 2.0, cx = (size - 1) / 2.0;
    const double outer = size / 4.0, inner = outer - 3.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double r = std::hypot(y - cy, x - cx);
            const bool ring = r >= inner && r <= outer;
            f.truth(y, x) = r <= outer ? 1 : 2;
            const auto v = static_cast<std::uint8_t>(uniform(rng, 60, 200));
            for (int c = 0; c < 3; ++c) f.image(y, x, c) = v;
            // Flat mid-grey contour: same mean as the texture, so blurred
            // responses far from the ring carry no trace of it.
            if (ring) {
                for (int c = 0; c < 3; ++c) f.image(y, x, c) = 130;
            }
            const bool labelable = r < inner - 2.0 || r > outer + 2.0 || ring;
            if (labelable && unit(rng) < 0.04) f.scribbles(y, x) = f.truth(y, x);
        }
    }
    return f;
}

WeakSegResult run_weak_seg(const WeakSegFixture& fixture, const FeatureSpec& features, const pixelclf::TrainOptions& train) {
    const auto pf = pixel_features(fixture.image, features);
    const auto clf = pixelclf::train(pf.data, fixture.scribbles, pf.recipe, train);
    WeakSegResult r;
    r.prediction = clf.predict(pf.data, pf.recipe);
    r.miou = detect::miou(r.prediction.labels, fixture.truth, fixture.classes);
    return r;
}

// ---- synthetic detection data ---------------------------------------------------------

BlobSample make_blob_image(std::uint64_t seed, int size) {
    std::mt19937_64 rng(seed);
    BlobSample s{Image(size, size, 3), {}, LabelRaster(size, size, 1)};
    // Opposite hues around mid-grey: brightness alone would be invisible to
    // cosine distances between patch features.
    std::array<double, 3> bg, fg;
    const double hue = uniform(rng, 0, 359) * std::numbers::pi / 180.0;
    for (int c = 0; c < 3; ++c) {
        const double v = 100.0 * std::cos(hue - c * 2.0 * std::numbers::pi / 3.0);
        bg[c] = 128.0 + v;
        fg[c] = 128.0 - v;
    }
    const double ry = uniform(rng, size / 8, size / 5), rx = uniform(rng, size / 8, size / 5);
    const double cy = uniform(rng, static_cast<int>(ry) + 2, size - static_cast<int>(ry) - 3);
    const double cx = uniform(rng, static_cast<int>(rx) + 2, size - static_cast<int>(rx) - 3);
    std::normal_distribution<double> noise(0.0, 4.0);
    int x0 = size, y0 = size, x1 = 0, y1 = 0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double e = (y - cy) * (y - cy) / (ry * ry) + (x - cx) * (x - cx) / (rx * rx);
            const bool inside = e <= 1.0;
            s.mask(y, x) = inside ? 1 : 0;
            for (int c = 0; c < 3; ++c) s.image(y, x, c) = clamp_u8((inside ? fg[c] : bg[c]) + noise(rng));
            if (inside) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x + 1);
                y1 = std::max(y1, y + 1);
            }
        }
    }
    s.box = {x0, y0, x1, y1};
    return s;
}

void write_blob_dataset(const fs::path& dir, int count, std::uint64_t seed, int size) {
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
        const auto id = fmt::format("blob_{:03d}", i);
        const auto s = make_blob_image(seed * 1000003ULL + static_cast<std::uint64_t>(i), size);
        write_png(dir / (id + ".png"), s.image);
        write_atomic(dir / (id + ".boxes.json"), detect::boxes_document(id, {s.box}).dump());
        write_indexed_png(dir / (id + ".mask.png"), s.mask);
    }
}

// ---- profiling -----------------------------------------------------------------------

std::vector<ProfileRow> profile(const FeaturizerBackend& backend, const TransformSet& set, const ProfileOptions& options) {
    std::vector<ProfileRow> rows;
    std::mt19937_64 rng(options.seed);
    for (const auto mode : options.modes) {
        for (const int length : options.lengths) {
            Image img(length, length, 3);
            for (auto& v : img.data()) v = static_cast<std::uint8_t>(rng() & 0xFF);
            UpsampleOptions uo;
            uo.mode = mode;
            uo.workers = options.workers;
            ProfileRow row{length, mode, 0.0, 0};
            for (int rep = 0; rep < std::max(1, options.repeats); ++rep) {
                const auto t0 = std::chrono::steady_clock::now();
                const auto r = upsample(backend, img, set, uo);
                const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                row.wall_ms = rep == 0 ? ms : std::min(row.wall_ms, ms);
                row.peak_bytes = r.stats.peak_buffer_bytes;
            }
            spdlog::info("profile {} {}: {:.2f} ms, {} bytes", to_string(mode), length, row.wall_ms, row.peak_bytes);
            rows.push_back(row);
        }
    }
    return rows;
}

std::string profile_csv(const std::vector<ProfileRow>& rows) {
    std::string out = "length,mode,wall_ms,peak_bytes\n";
    for (const auto& r : rows) out += fmt::format("{},{},{:.3f},{}\n", r.length, to_string(r.mode), r.wall_ms, r.peak_bytes);
    return out;
}

}  // namespace featpipe::workflows
