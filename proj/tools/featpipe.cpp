// featpipe command-line tool.
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <featpipe/cas.hpp>
#include <featpipe/detect.hpp>
#include <featpipe/featurize.hpp>
#include <featpipe/fmap.hpp>
#include <featpipe/geometry.hpp>
#include <featpipe/io.hpp>
#include <featpipe/pixelclf.hpp>
#include <featpipe/serve.hpp>
#include <featpipe/store.hpp>
#include <featpipe/workflows.hpp>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <iostream>
#include <thread>

using namespace featpipe;
namespace fs = std::filesystem;

namespace {

/// Bad flags, files or parameters (exit 1), as opposed to failures while running (exit 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Outputs are staged in memory and published together; if any write fails
/// the ones already published are removed again.
class Outputs {
public:
    void add(fs::path path, std::vector<std::uint8_t> bytes) { files_.emplace_back(std::move(path), std::move(bytes)); }
    void add(fs::path path, const std::string& text) { add(std::move(path), std::vector<std::uint8_t>(text.begin(), text.end())); }

    void commit() {
        std::vector<fs::path> done;
        try {
            for (const auto& [path, bytes] : files_) {
                if (path.has_parent_path()) fs::create_directories(path.parent_path());
                write_atomic(path, bytes);
                done.push_back(path);
            }
        } catch (...) {
            std::error_code ec;
            for (const auto& p : done) fs::remove(p, ec);
            throw;
        }
        for (const auto& [path, _] : files_) spdlog::info("wrote {}", path.string());
    }

private:
    std::vector<std::pair<fs::path, std::vector<std::uint8_t>>> files_;
};

struct BackendArgs {
    std::string backend = "synthetic:patch-mean";
    int patch = 4;
    int stride = 4;

    void add(CLI::App* app, const std::string& fallback) {
        backend = fallback;
        app->add_option("--backend", backend, "synthetic:<kind> | precomputed:<path> | external:<model>")->capture_default_str();
        app->add_option("--patch", patch, "patch size P (synthetic backends)")->capture_default_str()->check(CLI::PositiveNumber);
        app->add_option("--stride", stride, "stride S (synthetic backends)")->capture_default_str()->check(CLI::PositiveNumber);
    }
    std::unique_ptr<FeaturizerBackend> make() const {
        try {
            return make_backend(backend, patch, stride);
        } catch (const BackendError&) {
            throw;
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
};

struct SetArgs {
    std::string set = "standard";
    std::string neighborhood = "moore";
    std::vector<int> distances;
    bool flips = false;

    void add(CLI::App* app) {
        app->add_option("--set", set, "identity | standard | path to a TransformSet JSON file")->capture_default_str();
        app->add_option("--neighborhood", neighborhood, "moore | von_neumann (standard set)")->capture_default_str();
        app->add_option("--distances", distances, "shift distances in pixels (standard set; default 1..S/2)")->delimiter(',');
        app->add_flag("--flips", flips, "include flips in the standard set");
    }
    TransformSet make(int stride) const {
        try {
            if (set == "identity") return TransformSet();
            if (set == "standard") {
                auto d = distances;
                if (d.empty())
                    for (int i = 1; i <= stride / 2; ++i) d.push_back(i);
                return standard_transform_set(stride, neighborhood_from_string(neighborhood), d, flips);
            }
            const auto bytes = read_bytes(set);
            return TransformSet::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
        } catch (const std::exception& e) {
            throw UsageError("--set: " + std::string(e.what()));
        }
    }
};

struct CasArgs {
    double lambda = 1.0;
    std::uint64_t seed = 0;
    int clusters = 80;
    std::optional<std::int64_t> min_area;
    int connectivity = 8;

    void add(CLI::App* app) {
        app->add_option("--lambda", lambda, "merge threshold multiplier")->capture_default_str()->check(CLI::PositiveNumber);
        app->add_option("--seed", seed, "k-means seed")->capture_default_str();
        app->add_option("--clusters", clusters, "k-means clusters")->capture_default_str()->check(CLI::PositiveNumber);
        app->add_option("--min-area", min_area, "minimum component area in pixels (default: fraction of the image)");
        app->add_option("--connectivity", connectivity, "4 or 8")->capture_default_str()->check(CLI::IsMember({4, 8}));
    }
    workflows::UnsupOptions make() const {
        workflows::UnsupOptions o;
        o.cas.lambda = lambda;
        o.cas.kmeans.seed = seed;
        o.cas.kmeans.clusters = clusters;
        o.min_area = min_area;
        o.connectivity = connectivity;
        return o;
    }
};

Image load_image(const fs::path& p) {
    try {
        return read_image(p);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

std::vector<std::uint8_t> json_bytes(const nlohmann::json& j) {
    const auto s = j.dump(2) + "\n";
    return {s.begin(), s.end()};
}

std::vector<UpsampleMode> parse_modes(const std::vector<std::string>& names) {
    std::vector<UpsampleMode> modes;
    for (const auto& n : names) {
        try {
            modes.push_back(upsample_mode_from_string(n));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    return modes;
}

// ---- subcommands ----------------------------------------------------------------------

struct UpsampleCmd {
    fs::path image, out, attention_out, pca_out;
    BackendArgs backend;
    SetArgs set;
    std::string mode = "sequential";
    int workers = 1;
    bool l2 = false, f16 = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("upsample", "transform-ensemble feature upsampling to an FMAP file");
        c->add_option("--image", image, "input PNG/JPEG")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "output FMAP (H x W x D)")->required();
        c->add_option("--attention-out", attention_out, "optional attention FMAP (H x W x 1)");
        c->add_option("--pca-out", pca_out, "optional 3-component PCA PNG");
        backend.add(c, "synthetic:patch-mean");
        set.add(c);
        c->add_option("--mode", mode, "sequential | batched")->capture_default_str();
        c->add_option("--workers", workers, "threads for batched mode")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_flag("--l2", l2, "L2-normalise per-transform features before averaging");
        c->add_flag("--f16", f16, "store the payload as float16");
        c->callback([this] { run(); });
    }
    void run() {
        const auto img = load_image(image);
        auto be = backend.make();
        UpsampleOptions o;
        o.mode = parse_modes({mode}).front();
        o.workers = workers;
        o.l2_normalize = l2;
        o.image_id = image.filename().string();
        const auto r = workflows::upsample_native(*be, img, set.make(be->descriptor().stride), o);
        Outputs outs;
        outs.add(out, encode_fmap(r.features.data, &r.features.provenance, f16 ? FmapDtype::f16 : FmapDtype::f32));
        if (!attention_out.empty()) outs.add(attention_out, encode_fmap(r.attention.data, &r.attention.provenance));
        if (!pca_out.empty()) outs.add(pca_out, encode_png(pca_rgb(r.features).rgb));
        outs.commit();
    }
};

struct PcaCmd {
    fs::path fmap, out;
    void add(CLI::App& app) {
        auto* c = app.add_subcommand("pca", "3-component PCA of an FMAP rendered as RGB");
        c->add_option("--fmap", fmap, "input FMAP")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "output PNG")->required();
        c->callback([this] { run(); });
    }
    void run() {
        FmapRecord rec;
        try {
            rec = read_fmap(fmap);
        } catch (const FmapError& e) {
            throw UsageError(e.what());
        }
        FeatureMap fm{std::move(rec.data), rec.provenance.value_or(nlohmann::json::object())};
        const auto p = pca_rgb(fm);
        if (p.degenerate) spdlog::warn("features are constant; PCA image is uniform grey");
        Outputs outs;
        outs.add(out, encode_png(p.rgb));
        outs.commit();
    }
};

struct UnsupCmd {
    bool saliency_only = false;
    fs::path image, out, cas_out;
    BackendArgs backend;
    SetArgs set;
    CasArgs cas;
    std::string mode = "multi";

    void add(CLI::App& app, bool saliency) {
        saliency_only = saliency;
        auto* c = saliency ? app.add_subcommand("unsup-saliency", "unsupervised saliency mask (PNG, 1 = foreground)")
                           : app.add_subcommand("unsup-detect", "unsupervised object boxes (JSON)");
        c->add_option("--image", image, "input PNG/JPEG")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, saliency ? "output mask PNG" : "output boxes JSON")->required();
        c->add_option("--cas-out", cas_out, "optional class-aware segmentation PNG (+ JSON sidecar)");
        if (!saliency) c->add_option("--mode", mode, "single (superbox) | multi")->capture_default_str()->check(CLI::IsMember({"single", "multi"}));
        backend.add(c, "synthetic:patch-mean+contrast-attention");
        set.add(c);
        cas.add(c);
        c->callback([this] { run(); });
    }
    void run() {
        const auto img = load_image(image);
        auto be = backend.make();
        const auto r = workflows::run_unsupervised(*be, img, set.make(be->descriptor().stride), cas.make());
        Outputs outs;
        if (saliency_only) {
            outs.add(out, encode_indexed_png(r.detection.saliency));
        } else {
            auto doc = detect::boxes_document(image.stem().string(), r.detection.predictions(mode == "single"));
            doc["mode"] = mode;
            doc["superbox"] = r.detection.superbox ? detect::to_json(r.detection.superbox->box) : nlohmann::json(nullptr);
            doc["components"] = nlohmann::json::array();
            for (const auto& b : r.detection.boxes) {
                doc["components"].push_back(
                    {{"box", detect::to_json(b.box)}, {"class", b.class_id}, {"area", b.area}, {"is_superbox", b.is_superbox}});
            }
            outs.add(out, json_bytes(doc));
        }
        if (!cas_out.empty()) {
            auto sidecar = cas_out;
            sidecar.replace_extension(".json");
            outs.add(cas_out, encode_indexed_png(r.cas.labels));
            outs.add(sidecar, json_bytes(r.cas.sidecar()));
        }
        outs.commit();
    }
};

struct BenchmarkCmd {
    fs::path dataset, out, markdown;
    std::string layout = "flat", mode = "single";
    bool strict = false;
    int generate = 0;
    std::uint64_t generate_seed = 1;
    int generate_size = 128;
    BackendArgs backend;
    SetArgs set;
    CasArgs cas;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("benchmark", "CorLoc / saliency report over a dataset");
        c->add_option("--dataset", dataset, "dataset root")->required();
        c->add_option("--layout", layout, "flat | voc_like")->capture_default_str()->check(CLI::IsMember({"flat", "voc_like"}));
        c->add_option("--mode", mode, "single | multi")->capture_default_str()->check(CLI::IsMember({"single", "multi"}));
        c->add_flag("--strict", strict, "fail on unreadable dataset files");
        c->add_option("--generate-blobs", generate, "first write N synthetic blob images into --dataset");
        c->add_option("--generate-seed", generate_seed, "seed for --generate-blobs")->capture_default_str();
        c->add_option("--generate-size", generate_size, "edge length for --generate-blobs")->capture_default_str();
        c->add_option("--out", out, "report JSON (default: stdout)");
        c->add_option("--markdown", markdown, "report markdown table");
        backend.add(c, "synthetic:patch-mean+contrast-attention");
        set.add(c);
        cas.add(c);
        c->callback([this] { run(); });
    }
    void run() {
        if (generate > 0) workflows::write_blob_dataset(dataset, generate, generate_seed, generate_size);
        if (!fs::is_directory(dataset)) throw UsageError("dataset directory '" + dataset.string() + "' does not exist");
        store::Dataset ds;
        try {
            ds = store::ingest(dataset, store::layout_from_string(layout), {.strict = strict});
        } catch (const store::StoreError& e) {
            throw UsageError(e.what());
        }
        for (const auto& p : ds.problems) spdlog::warn("skipped: {}", p);
        auto be = backend.make();
        workflows::BenchmarkOptions o;
        o.single = mode == "single";
        o.unsup = cas.make();
        o.dataset_name = dataset.filename().string();
        const auto report = workflows::benchmark(ds, *be, set.make(be->descriptor().stride), o);
        Outputs outs;
        if (!out.empty()) outs.add(out, json_bytes(report.to_json()));
        if (!markdown.empty()) outs.add(markdown, report.markdown());
        outs.commit();
        if (out.empty()) std::cout << report.to_json().dump(2) << "\n";
        std::cerr << report.markdown();
    }
};

struct FeatureArgs {
    std::string features = "deep";
    BackendArgs backend;
    SetArgs set;
    std::vector<double> sigmas{1, 2, 4, 8, 16};
    bool per_channel = false;
    fs::path cache;

    void add(CLI::App* c) {
        c->add_option("--features", features, "deep | classical | hybrid")->capture_default_str()->check(CLI::IsMember({"deep", "classical", "hybrid"}));
        backend.add(c, "synthetic:patch-mean+center-attention");
        set.add(c);
        c->add_option("--sigmas", sigmas, "classical filter scales")->delimiter(',');
        c->add_flag("--per-channel", per_channel, "classical filters per colour channel instead of luminance");
        c->add_option("--cache", cache, "feature cache directory for deep features");
    }
};

workflows::PixelFeatures compute_features(const fs::path& image, const workflows::FeatureSpec& spec, const fs::path& cache_dir) {
    const auto img = load_image(image);
    if (spec.source == pixelclf::FeatureSource::classical || cache_dir.empty()) return workflows::pixel_features(img, spec);
    store::FeatureCache cache(cache_dir);
    const auto bytes = read_bytes(image);
    const auto cached = workflows::featurize_cached(*spec.backend, spec.transforms, bytes, cache, spec.upsample);
    return workflows::pixel_features(img, spec, &cached.features);
}

struct WeakTrainCmd {
    std::vector<fs::path> images, labels;
    fs::path out;
    FeatureArgs feat;
    std::string classifier;
    double c_reg = 1.0;
    int trees = 100, max_iter = 500, workers = 1;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("weak-train", "train a pixel classifier from sparse labels");
        c->add_option("--image", images, "training image (repeatable)")->required()->check(CLI::ExistingFile);
        c->add_option("--labels", labels, "indexed label PNG per image, 0 = unlabelled (repeatable)")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "classifier archive")->required();
        feat.add(c);
        c->add_option("--classifier", classifier, "logistic | random_forest (default: logistic for deep, forest otherwise)")
            ->check(CLI::IsMember({"logistic", "random_forest"}));
        c->add_option("--c-reg", c_reg, "logistic inverse regularisation strength")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--trees", trees, "forest size")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--max-iter", max_iter, "logistic iteration cap")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--workers", workers, "forest training threads")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--seed", seed, "forest seed")->capture_default_str();
        c->callback([this] { run(); });
    }
    void run() {
        if (images.size() != labels.size()) throw UsageError("--image and --labels must be given the same number of times");
        auto be = feat.backend.make();
        workflows::FeatureSpec spec;
        spec.source = pixelclf::feature_source_from_string(feat.features);
        spec.backend = be.get();
        spec.transforms = feat.set.make(be->descriptor().stride);
        spec.classical.sigmas = feat.sigmas;
        spec.classical.per_channel = feat.per_channel;
        pixelclf::TrainOptions o;
        o.kind = pixelclf::classifier_kind_from_string(
            !classifier.empty() ? classifier : spec.source == pixelclf::FeatureSource::deep ? "logistic" : "random_forest");
        o.c_reg = c_reg;
        o.trees = trees;
        o.max_iter = max_iter;
        o.workers = workers;
        o.seed = seed;
        pixelclf::Samples samples;
        std::optional<pixelclf::FeatureRecipe> recipe;
        for (std::size_t i = 0; i < images.size(); ++i) {
            const auto pf = compute_features(images[i], spec, feat.cache);
            LabelRaster l;
            try {
                l = read_indexed_png(labels[i]);
            } catch (const std::exception& e) {
                throw UsageError(e.what());
            }
            if (recipe && recipe->to_json() != pf.recipe.to_json()) {
                throw UsageError("image " + images[i].string() + " has a different channel layout than the first image");
            }
            recipe = pf.recipe;
            try {
                pixelclf::append_samples(samples, pixelclf::collect_samples(pf.data, l, &pf.recipe));
            } catch (const std::invalid_argument& e) {
                throw UsageError(labels[i].string() + ": " + e.what());
            }
        }
        pixelclf::PixelClassifier clf;
        try {
            clf = pixelclf::train(samples, *recipe, o);
        } catch (const pixelclf::PixelClfError& e) {
            throw UsageError(e.what());
        }
        Outputs outs;
        outs.add(out, clf.serialize());
        outs.commit();
        std::cout << nlohmann::json{{"kind", to_string(clf.kind())},
                                    {"classes", clf.classes()},
                                    {"samples", samples.x.rows()},
                                    {"recipe_checksum", clf.recipe().checksum()},
                                    {"training", clf.training()}}
                         .dump()
                  << "\n";
    }
};

struct WeakApplyCmd {
    fs::path model, image, out, prob_out;
    int smooth_radius = 0;
    std::string backend_override;
    fs::path cache;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("weak-apply", "apply a pixel classifier to an image");
        c->add_option("--model", model, "classifier archive")->required()->check(CLI::ExistingFile);
        c->add_option("--image", image, "input PNG/JPEG")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "predicted label PNG (indexed, class ids)")->required();
        c->add_option("--prob-out", prob_out, "optional probability FMAP (H x W x K)");
        c->add_option("--smooth", smooth_radius, "majority-smoothing window radius (0 = off)")->capture_default_str()->check(CLI::NonNegativeNumber);
        c->add_option("--backend", backend_override, "backend for deep features (default: the one recorded in the model)");
        c->add_option("--cache", cache, "feature cache directory for deep features");
        c->callback([this] { run(); });
    }
    void run() {
        pixelclf::PixelClassifier clf;
        try {
            clf = pixelclf::PixelClassifier::load(model);
        } catch (const std::exception& e) {
            throw UsageError(model.string() + ": " + e.what());
        }
        const auto& recipe = clf.recipe();
        workflows::FeatureSpec spec;
        spec.source = recipe.source;
        std::unique_ptr<FeaturizerBackend> be;
        if (recipe.source != pixelclf::FeatureSource::classical) {
            const auto desc = BackendDescriptor::from_json(recipe.deep.at("backend"));
            const auto name = backend_override.empty() ? desc.name : backend_override;
            try {
                be = make_backend(name, desc.patch_size, desc.stride);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            spec.backend = be.get();
            spec.transforms = TransformSet::from_json(recipe.deep.at("transform_set"));
            spec.upsample.l2_normalize = recipe.deep.value("l2_normalize", false);
        }
        if (recipe.classical) spec.classical = *recipe.classical;
        const auto pf = compute_features(image, spec, cache);
        pixelclf::Prediction p;
        try {
            p = clf.predict(pf.data, pf.recipe);
        } catch (const pixelclf::PixelClfError& e) {
            throw UsageError(e.what());
        }
        if (smooth_radius > 0) p.labels = pixelclf::smooth(p.labels, p.probabilities, clf.classes(), smooth_radius);
        Outputs outs;
        outs.add(out, encode_indexed_png(p.labels));
        if (!prob_out.empty()) {
            const nlohmann::json prov{{"classes", clf.classes()}, {"recipe_checksum", recipe.checksum()}};
            outs.add(prob_out, encode_fmap(p.probabilities, &prov));
        }
        outs.commit();
    }
};

struct ProfileCmd {
    BackendArgs backend;
    SetArgs set;
    std::vector<int> lengths{128, 256, 512};
    std::vector<std::string> modes{"sequential", "batched"};
    int repeats = 3, workers = 1;
    std::uint64_t seed = 0;
    fs::path out;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("profile", "wall time and peak buffer memory of upsampling vs image size");
        backend.add(c, "synthetic:patch-mean");
        set.add(c);
        c->add_option("--lengths", lengths, "square image edge lengths")->delimiter(',')->check(CLI::PositiveNumber);
        c->add_option("--mode", modes, "sequential, batched (repeatable or comma separated)")->delimiter(',');
        c->add_option("--repeats", repeats, "repetitions per point; the minimum is reported")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--workers", workers, "threads for batched mode")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--seed", seed, "random image seed")->capture_default_str();
        c->add_option("--out", out, "CSV path (default: stdout)");
        c->callback([this] { run(); });
    }
    void run() {
        auto be = backend.make();
        workflows::ProfileOptions o;
        o.lengths = lengths;
        o.modes = parse_modes(modes);
        o.repeats = repeats;
        o.workers = workers;
        o.seed = seed;
        for (int n : lengths) {
            if (n < be->descriptor().patch_size) throw UsageError(fmt::format("length {} is smaller than the patch size", n));
        }
        const auto csv = workflows::profile_csv(workflows::profile(*be, set.make(be->descriptor().stride), o));
        if (out.empty()) {
            std::cout << csv;
            return;
        }
        Outputs outs;
        outs.add(out, csv);
        outs.commit();
    }
};

serve::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server) std::thread([] { g_server->stop(); }).detach();
}

struct ServeCmd {
    fs::path config;
    std::optional<std::string> host, session_root;
    std::optional<int> port, workers;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("serve", "HTTP labelling-session service");
        c->add_option("--config", config, "JSON config file (FEATPIPE_* environment variables override it)")->check(CLI::ExistingFile);
        c->add_option("--host", host, "bind address (overrides config)");
        c->add_option("--port", port, "port, 0 = ephemeral (overrides config)");
        c->add_option("--session-root", session_root, "session directory (overrides config)");
        c->add_option("--workers", workers, "featurization workers (overrides config)");
        c->callback([this] { run(); });
    }
    void run() {
        auto cfg = serve::load_config(config.empty() ? std::nullopt : std::optional<fs::path>(config));
        auto j = cfg.to_json();
        if (host) j["host"] = *host;
        if (port) j["port"] = *port;
        if (session_root) j["session_root"] = *session_root;
        if (workers) j["workers"] = *workers;
        serve::Server server(serve::ApiConfig::from_json(j));
        g_server = &server;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        server.run();
        g_server = nullptr;
    }
};

}  // namespace

int main(int argc, char** argv) {
    // stdout carries command output (CSV, JSON); logs go to stderr.
    spdlog::set_default_logger(spdlog::stderr_color_mt("featpipe"));
    CLI::App app{"featpipe: dense visual features from patch backends, unsupervised detection and pixel classifiers"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace | debug | info | warn | error | off")->capture_default_str();
    app.parse_complete_callback([&] { spdlog::set_level(spdlog::level::from_str(log_level)); });

    UpsampleCmd upsample_cmd;
    PcaCmd pca_cmd;
    UnsupCmd detect_cmd, saliency_cmd;
    BenchmarkCmd benchmark_cmd;
    WeakTrainCmd train_cmd;
    WeakApplyCmd apply_cmd;
    ProfileCmd profile_cmd;
    ServeCmd serve_cmd;
    upsample_cmd.add(app);
    pca_cmd.add(app);
    detect_cmd.add(app, false);
    saliency_cmd.add(app, true);
    benchmark_cmd.add(app);
    train_cmd.add(app);
    apply_cmd.add(app);
    profile_cmd.add(app);
    serve_cmd.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        spdlog::error("{}", e.what());
        return 1;
    } catch (const serve::ConfigError& e) {
        spdlog::error("{}", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        spdlog::error("{}", e.what());
        return 1;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 2;
    }
    return 0;
}
