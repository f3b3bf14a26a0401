#include <featpipe/serve.hpp>

#include <featpipe/fmap.hpp>
#include <featpipe/io.hpp>
#include <featpipe/pixelclf.hpp>
#include <featpipe/store.hpp>
#include <featpipe/workflows.hpp>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <map>
#include <mutex>
#include <set>
#include <thread>

namespace featpipe::serve {

ConfigError::ConfigError(std::string field, const std::string& message)
    : std::invalid_argument("invalid config field '" + field + "': " + message), field_(std::move(field)) {}

// ---- configuration ---------------------------------------------------------------

namespace {

const std::vector<std::string> kConfigFields{"host",     "port",         "backend",      "model_path",
                                             "patch_size", "stride",     "transform_set", "session_root",
                                             "workers",  "feature_source", "classifier"};

template <typename T>
T field_as(const nlohmann::json& j, const std::string& name, const char* expected) {
    try {
        return j.at(name).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(name, std::string("expected ") + expected + ", got " + j.at(name).dump());
    }
}

TransformSet config_set(const ApiConfig& c) {
    if (c.transform_set.is_null()) {
        std::vector<int> d;
        for (int i = 1; i <= c.stride / 2; ++i) d.push_back(i);
        return standard_transform_set(c.stride, Neighborhood::moore, d, false);
    }
    return TransformSet::from_json(c.transform_set);
}

}  // namespace

nlohmann::json ApiConfig::to_json() const {
    return {{"host", host},
            {"port", port},
            {"backend", backend},
            {"model_path", model_path},
            {"patch_size", patch_size},
            {"stride", stride},
            {"transform_set", transform_set},
            {"session_root", session_root.string()},
            {"workers", workers},
            {"feature_source", feature_source},
            {"classifier", classifier}};
}

ApiConfig ApiConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(kConfigFields.begin(), kConfigFields.end(), key) == kConfigFields.end()) {
            throw ConfigError(key, "unknown field");
        }
    }
    ApiConfig c;
    if (j.contains("host")) c.host = field_as<std::string>(j, "host", "a string");
    if (c.host.empty()) throw ConfigError("host", "must not be empty");
    if (j.contains("port")) c.port = field_as<int>(j, "port", "an integer");
    if (c.port < 0 || c.port > 65535) throw ConfigError("port", "must be in 0..65535");
    if (j.contains("backend")) c.backend = field_as<std::string>(j, "backend", "a string");
    if (j.contains("model_path")) c.model_path = field_as<std::string>(j, "model_path", "a string");
    if (j.contains("patch_size")) c.patch_size = field_as<int>(j, "patch_size", "an integer");
    if (j.contains("stride")) c.stride = field_as<int>(j, "stride", "an integer");
    if (c.patch_size <= 0) throw ConfigError("patch_size", "must be positive");
    if (c.stride <= 0 || c.stride > c.patch_size) throw ConfigError("stride", "must be in 1..patch_size");
    if (j.contains("transform_set")) c.transform_set = j.at("transform_set");
    try {
        config_set(c);
    } catch (const std::exception& e) {
        throw ConfigError("transform_set", e.what());
    }
    if (j.contains("session_root")) c.session_root = field_as<std::string>(j, "session_root", "a string");
    if (c.session_root.empty()) throw ConfigError("session_root", "must not be empty");
    if (j.contains("workers")) c.workers = field_as<int>(j, "workers", "an integer");
    if (c.workers < 1 || c.workers > 256) throw ConfigError("workers", "must be in 1..256");
    if (j.contains("feature_source")) c.feature_source = field_as<std::string>(j, "feature_source", "a string");
    try {
        pixelclf::feature_source_from_string(c.feature_source);
    } catch (const std::exception& e) {
        throw ConfigError("feature_source", e.what());
    }
    if (j.contains("classifier")) c.classifier = field_as<std::string>(j, "classifier", "a string");
    try {
        pixelclf::classifier_kind_from_string(c.classifier);
    } catch (const std::exception& e) {
        throw ConfigError("classifier", e.what());
    }
    return c;
}

std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
}

ApiConfig load_config(const std::optional<fs::path>& file, const EnvLookup& env) {
    nlohmann::json j = nlohmann::json::object();
    if (file) {
        std::string text;
        try {
            const auto bytes = read_bytes(*file);
            text.assign(bytes.begin(), bytes.end());
        } catch (const std::exception& e) {
            throw ConfigError("<file>", e.what());
        }
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("<file>", file->string() + " is not valid JSON: " + e.what());
        }
        if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
    }
    for (const auto& field : kConfigFields) {
        std::string var = "FEATPIPE_" + field;
        std::transform(var.begin(), var.end(), var.begin(), [](unsigned char ch) { return std::toupper(ch); });
        const auto value = env(var);
        if (!value) continue;
        if (field == "port" || field == "patch_size" || field == "stride" || field == "workers") {
            try {
                std::size_t used = 0;
                const int v = std::stoi(*value, &used);
                if (used != value->size()) throw std::invalid_argument(*value);
                j[field] = v;
            } catch (const std::exception&) {
                throw ConfigError(field, var + "='" + *value + "' is not an integer");
            }
        } else if (field == "transform_set") {
            try {
                j[field] = nlohmann::json::parse(*value);
            } catch (const nlohmann::json::exception&) {
                throw ConfigError(field, var + " is not valid JSON");
            }
        } else {
            j[field] = *value;
        }
    }
    return ApiConfig::from_json(j);
}

// ---- run-length labels -----------------------------------------------------------------

LabelRaster labels_from_runs(const nlohmann::json& runs, int height, int width) {
    if (!runs.is_object()) throw std::invalid_argument("run-length labels must be an object {class: [[row, start, len], ...]}");
    LabelRaster out(height, width, 1);
    for (const auto& [key, list] : runs.items()) {
        int cls = 0;
        try {
            std::size_t used = 0;
            cls = std::stoi(key, &used);
            if (used != key.size()) throw std::invalid_argument(key);
        } catch (const std::exception&) {
            throw std::invalid_argument("class key '" + key + "' is not an integer");
        }
        if (cls < 0 || cls > 255) throw std::invalid_argument("class " + key + " outside 0..255");
        if (!list.is_array()) throw std::invalid_argument("runs for class " + key + " must be an array");
        for (const auto& run : list) {
            if (!run.is_array() || run.size() != 3 || !run[0].is_number_integer() || !run[1].is_number_integer() ||
                !run[2].is_number_integer()) {
                throw std::invalid_argument("run " + run.dump() + " is not [row, start, len]");
            }
            const long long row = run[0], start = run[1], len = run[2];
            if (row < 0 || row >= height || start < 0 || len < 0 || start + len > width) {
                throw std::out_of_range("run " + run.dump() + " outside the " + std::to_string(height) + "x" +
                                        std::to_string(width) + " image");
            }
            for (long long x = start; x < start + len; ++x) out(static_cast<int>(row), static_cast<int>(x)) = cls;
        }
    }
    return out;
}

nlohmann::json labels_to_runs(const LabelRaster& labels) {
    std::map<int, nlohmann::json> by_class;
    for (int y = 0; y < labels.height(); ++y) {
        int x = 0;
        while (x < labels.width()) {
            const int v = labels(y, x);
            int end = x + 1;
            while (end < labels.width() && labels(y, end) == v) ++end;
            if (v != 0) by_class[v].push_back({y, x, end - x});
            x = end;
        }
    }
    nlohmann::json out = nlohmann::json::object();
    for (auto& [cls, runs] : by_class) out[std::to_string(cls)] = std::move(runs);
    return out;
}

// ---- server ---------------------------------------------------------------------------

namespace {

struct HttpError : std::runtime_error {
    int status;
    HttpError(int s, const std::string& message) : std::runtime_error(message), status(s) {}
};

struct JobState {
    std::string state = "queued";  // queued | running | done | failed
    std::string error;
    int version = 0;  // apply jobs
};

struct SessionState {
    store::Session session;
    std::mutex mu;  // serializes mutations of this session
    std::map<std::string, JobState> featurize;
    std::map<std::string, JobState> apply;

    explicit SessionState(store::Session s) : session(std::move(s)) {}

    int pending_featurize() const {
        return static_cast<int>(std::count_if(featurize.begin(), featurize.end(), [](const auto& kv) {
            return kv.second.state == "queued" || kv.second.state == "running";
        }));
    }
};

nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    try {
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw HttpError(400, std::string("request body is not valid JSON: ") + e.what());
    }
}

template <typename T>
T body_value(const nlohmann::json& body, const std::string& key, T fallback) {
    if (!body.contains(key) || body[key].is_null()) return fallback;
    try {
        return body[key].get<T>();
    } catch (const nlohmann::json::exception&) {
        throw HttpError(400, "field '" + key + "' has the wrong type");
    }
}

void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

std::string prediction_meta_path(const store::Session& s, const std::string& image) {
    return (s.dir() / "predictions" / (image + ".json")).string();
}

}  // namespace

struct Server::Impl {
    ApiConfig config;
    std::shared_ptr<const FeaturizerBackend> backend;
    TransformSet set;
    httplib::Server http;
    std::unique_ptr<httplib::ThreadPool> jobs;
    std::thread listener;
    std::mutex sessions_mu;
    std::map<std::string, std::shared_ptr<SessionState>> sessions;
    bool running = false;
    bool jobs_stopped = false;

    Impl(ApiConfig c, std::shared_ptr<const FeaturizerBackend> b) : config(std::move(c)), backend(std::move(b)) {
        if (!backend) {
            try {
                const auto spec = config.model_path.empty() || config.backend.find(':') != std::string::npos
                                      ? config.backend
                                      : config.backend + ":" + config.model_path;
                backend = make_backend(spec, config.patch_size, config.stride);
            } catch (const std::exception& e) {
                throw ConfigError("backend", e.what());
            }
        }
        set = config_set(config);
        fs::create_directories(config.session_root);
        jobs = std::make_unique<httplib::ThreadPool>(static_cast<std::size_t>(config.workers));
        routes();
    }

    // -- helpers --

    std::shared_ptr<SessionState> session(const std::string& id) {
        std::lock_guard lock(sessions_mu);
        if (auto it = sessions.find(id); it != sessions.end()) return it->second;
        if (!store::Session::valid_id(id) || !fs::is_directory(config.session_root / id)) {
            throw HttpError(404, "unknown session '" + id + "'");
        }
        auto state = std::make_shared<SessionState>(store::Session::open(config.session_root, id));
        sessions.emplace(id, state);
        return state;
    }

    static void require_image(const SessionState& s, const std::string& image) {
        if (!s.session.has_image(image)) throw HttpError(404, "unknown image '" + image + "'");
    }

    workflows::FeatureSpec spec_for(pixelclf::FeatureSource source) const {
        workflows::FeatureSpec spec;
        spec.source = source;
        spec.backend = backend.get();
        spec.transforms = set;
        return spec;
    }

    std::string cache_key_for(const std::vector<std::uint8_t>& bytes) const {
        return store::cache_key(bytes, workflows::backend_key(*backend), set.to_json());
    }

    /// Features for one session image; deep channels must already be cached.
    workflows::PixelFeatures features_for(const SessionState& s, const std::string& image,
                                          pixelclf::FeatureSource source) const {
        const auto bytes = s.session.image_bytes(image);
        const auto img = decode_image(bytes);
        const auto spec = spec_for(source);
        if (source == pixelclf::FeatureSource::classical) return workflows::pixel_features(img, spec);
        auto cache = s.session.cache();
        const auto cached = cache.get(cache_key_for(bytes));
        if (!cached) {
            throw HttpError(409, "features for image '" + image + "' are not computed; POST /sessions/" + s.session.id() +
                                     "/featurize first");
        }
        spdlog::debug("session {} image {}: feature cache hit", s.session.id(), image);
        return workflows::pixel_features(img, spec, &cached->features);
    }

    pixelclf::Prediction predict(const SessionState& s, const pixelclf::PixelClassifier& clf, const std::string& image,
                                 pixelclf::FeatureSource source, int smooth_radius) const {
        const auto pf = features_for(s, image, source);
        auto p = clf.predict(pf.data, pf.recipe);
        if (smooth_radius > 0) p.labels = pixelclf::smooth(p.labels, p.probabilities, clf.classes(), smooth_radius);
        return p;
    }

    void write_prediction(const SessionState& s, const std::string& image, int version, const pixelclf::Prediction& p) {
        write_fmap(s.session.probability_path(image), p.probabilities);
        write_atomic(s.session.prediction_path(image), encode_indexed_png(p.labels));
        write_atomic(prediction_meta_path(s.session, image), nlohmann::json{{"version", version}}.dump());
    }

    int latest_version(const SessionState& s) const {
        const auto v = s.session.classifier_versions();
        if (v.empty()) throw HttpError(404, "session has no trained classifier");
        return v.back();
    }

    pixelclf::PixelClassifier classifier(const SessionState& s, int version) const {
        const auto v = s.session.classifier_versions();
        if (std::find(v.begin(), v.end(), version) == v.end()) {
            throw HttpError(404, "unknown classifier version " + std::to_string(version));
        }
        return s.session.load_classifier(version);
    }

    // -- handlers --

    void create_session(const httplib::Request& req, httplib::Response& res) {
        const auto body = parse_body(req);
        std::optional<std::string> id;
        if (body.contains("id")) id = body_value<std::string>(body, "id", "");
        if (id && !store::Session::valid_id(*id)) throw HttpError(400, "invalid session id '" + *id + "'");
        nlohmann::json cfg = {{"backend", backend->descriptor().to_json()},
                              {"transform_set", set.to_json()},
                              {"feature_source", config.feature_source},
                              {"classifier", config.classifier}};
        if (body.contains("config")) {
            const auto& extra = body["config"];
            if (!extra.is_object()) throw HttpError(400, "field 'config' must be an object");
            for (const auto& [k, v] : extra.items()) {
                if (k != "feature_source" && k != "classifier") {
                    throw HttpError(400, "session config field '" + k + "' cannot be overridden");
                }
                cfg[k] = v;
            }
            try {
                pixelclf::feature_source_from_string(cfg["feature_source"].get<std::string>());
                pixelclf::classifier_kind_from_string(cfg["classifier"].get<std::string>());
            } catch (const std::exception& e) {
                throw HttpError(400, e.what());
            }
        }
        std::lock_guard lock(sessions_mu);
        if (id && fs::exists(config.session_root / *id)) throw HttpError(409, "session '" + *id + "' already exists");
        auto s = store::Session::create(config.session_root, cfg, id);
        const auto sid = s.id();
        sessions.emplace(sid, std::make_shared<SessionState>(std::move(s)));
        spdlog::info("session {} created", sid);
        send_json(res, 201, {{"id", sid}, {"config", cfg}});
    }

    nlohmann::json status_json(SessionState& s) {
        nlohmann::json feat = nlohmann::json::object(), apply = nlohmann::json::object();
        for (const auto& [img, st] : s.featurize) {
            feat[img] = {{"state", st.state}};
            if (!st.error.empty()) feat[img]["error"] = st.error;
        }
        for (const auto& [img, st] : s.apply) {
            apply[img] = {{"state", st.state}, {"version", st.version}};
            if (!st.error.empty()) apply[img]["error"] = st.error;
        }
        const auto images = s.session.images();
        std::vector<std::string> labelled;
        for (const auto& img : images)
            if (fs::exists(s.session.labels_path(img))) labelled.push_back(img);
        return {{"id", s.session.id()},
                {"image_count", images.size()},
                {"images", images},
                {"labelled_images", labelled},
                {"featurize", feat},
                {"featurize_pending", s.pending_featurize()},
                {"apply", apply},
                {"classifier_versions", s.session.classifier_versions()}};
    }

    void status(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        std::lock_guard lock(s->mu);
        send_json(res, 200, status_json(*s));
    }

    void add_image(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        if (req.body.empty()) throw HttpError(400, "empty image body");
        std::optional<std::string> name;
        if (req.has_param("name")) name = req.get_param_value("name");
        const std::vector<std::uint8_t> bytes(req.body.begin(), req.body.end());
        std::lock_guard lock(s->mu);
        std::string image;
        try {
            image = s->session.add_image(bytes, name);
        } catch (const store::StoreError& e) {
            throw HttpError(409, e.what());
        } catch (const std::invalid_argument& e) {
            throw HttpError(400, e.what());
        }
        const auto img = decode_image(bytes);
        send_json(res, 201, {{"image", image}, {"height", img.height()}, {"width", img.width()}});
    }

    void featurize(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        const auto body = parse_body(req);
        std::lock_guard lock(s->mu);
        auto images = body_value<std::vector<std::string>>(body, "images", s->session.images());
        for (const auto& img : images) require_image(*s, img);
        std::vector<std::string> queued;
        for (const auto& img : images) {
            auto it = s->featurize.find(img);
            if (it != s->featurize.end() && (it->second.state == "queued" || it->second.state == "running")) continue;
            s->featurize[img] = JobState{};
            queued.push_back(img);
            jobs->enqueue([this, s, img] { featurize_job(s, img); });
        }
        send_json(res, 202, {{"queued", queued}, {"featurize_pending", s->pending_featurize()}});
    }

    void featurize_job(const std::shared_ptr<SessionState>& s, const std::string& image) {
        {
            std::lock_guard lock(s->mu);
            s->featurize[image].state = "running";
        }
        JobState done;
        try {
            const auto bytes = s->session.image_bytes(image);
            auto cache = s->session.cache();
            bool hit = false;
            workflows::featurize_cached(*backend, set, bytes, cache, {}, &hit);
            done.state = "done";
            spdlog::info("session {} image {} featurized ({})", s->session.id(), image, hit ? "cache hit" : "computed");
        } catch (const std::exception& e) {
            done.state = "failed";
            done.error = e.what();
            spdlog::warn("session {} image {} featurization failed: {}", s->session.id(), image, e.what());
        }
        std::lock_guard lock(s->mu);
        s->featurize[image] = done;
    }

    void put_labels(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        const std::string image = req.matches[2];
        std::lock_guard lock(s->mu);
        require_image(*s, image);
        const auto img = decode_image(s->session.image_bytes(image));
        LabelRaster labels;
        const auto type = req.get_header_value("Content-Type");
        if (type.rfind("application/json", 0) == 0) {
            nlohmann::json runs;
            try {
                runs = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception& e) {
                throw HttpError(400, std::string("labels are not valid JSON: ") + e.what());
            }
            try {
                labels = labels_from_runs(runs, img.height(), img.width());
            } catch (const std::out_of_range& e) {
                throw HttpError(422, e.what());
            } catch (const std::invalid_argument& e) {
                throw HttpError(400, e.what());
            }
        } else {
            const std::vector<std::uint8_t> bytes(req.body.begin(), req.body.end());
            try {
                labels = decode_indexed_png(bytes);
            } catch (const std::exception& e) {
                throw HttpError(400, std::string("labels must be an indexed PNG or run-length JSON: ") + e.what());
            }
            if (labels.height() != img.height() || labels.width() != img.width()) {
                throw HttpError(422, "labels are " + std::to_string(labels.height()) + "x" + std::to_string(labels.width()) +
                                         " but image '" + image + "' is " + std::to_string(img.height()) + "x" +
                                         std::to_string(img.width()));
            }
        }
        s->session.put_labels(image, labels);
        std::set<int> classes;
        std::size_t labelled = 0;
        for (int v : labels.data()) {
            if (v != 0) {
                classes.insert(v);
                ++labelled;
            }
        }
        send_json(res, 200, {{"image", image}, {"classes", classes}, {"labelled_pixels", labelled}});
    }

    void get_labels(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        const std::string image = req.matches[2];
        std::lock_guard lock(s->mu);
        require_image(*s, image);
        const auto labels = s->session.labels(image);
        if (!labels) throw HttpError(404, "no labels for image '" + image + "'");
        if (req.has_param("format") && req.get_param_value("format") == "json") {
            send_json(res, 200, labels_to_runs(*labels));
            return;
        }
        const auto png = encode_indexed_png(*labels);
        res.set_content(std::string(png.begin(), png.end()), "image/png");
    }

    void train(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        const auto body = parse_body(req);
        std::lock_guard lock(s->mu);
        if (s->pending_featurize() > 0) {
            throw HttpError(409, "featurization incomplete (" + std::to_string(s->pending_featurize()) + " image(s) pending)");
        }
        const auto cfg = s->session.config();
        pixelclf::FeatureSource source;
        pixelclf::TrainOptions opts;
        try {
            source = pixelclf::feature_source_from_string(
                body_value<std::string>(body, "features", cfg.value("feature_source", config.feature_source)));
            opts.kind = pixelclf::classifier_kind_from_string(
                body_value<std::string>(body, "classifier", cfg.value("classifier", config.classifier)));
        } catch (const HttpError&) {
            throw;
        } catch (const std::exception& e) {
            throw HttpError(400, e.what());
        }
        opts.c_reg = body_value<double>(body, "c_reg", opts.c_reg);
        opts.trees = body_value<int>(body, "trees", opts.trees);
        opts.seed = body_value<std::uint64_t>(body, "seed", opts.seed);
        opts.max_iter = body_value<int>(body, "max_iter", opts.max_iter);
        if (!(opts.c_reg > 0) || opts.trees < 1 || opts.max_iter < 1) throw HttpError(400, "c_reg, trees and max_iter must be positive");

        pixelclf::Samples samples;
        std::optional<pixelclf::FeatureRecipe> recipe;
        std::vector<std::string> used;
        for (const auto& image : s->session.images()) {
            const auto labels = s->session.labels(image);
            if (!labels) continue;
            const auto pf = features_for(*s, image, source);
            if (recipe && recipe->to_json() != pf.recipe.to_json()) {
                throw HttpError(422, "image '" + image + "' yields a different feature recipe than the other images");
            }
            recipe = pf.recipe;
            pixelclf::append_samples(samples, pixelclf::collect_samples(pf.data, *labels, &pf.recipe));
            used.push_back(image);
        }
        if (!recipe || samples.x.rows() == 0) throw HttpError(400, "no labels uploaded");
        pixelclf::PixelClassifier clf;
        try {
            clf = pixelclf::train(samples, *recipe, opts);
        } catch (const pixelclf::PixelClfError& e) {
            throw HttpError(400, e.what());
        }
        const int version = s->session.save_classifier(clf);
        spdlog::info("session {} trained {} classifier v{} on {} samples", s->session.id(), to_string(opts.kind), version,
                     samples.x.rows());
        send_json(res, 201,
                  {{"version", version},
                   {"kind", to_string(clf.kind())},
                   {"classes", clf.classes()},
                   {"samples", samples.x.rows()},
                   {"images", used},
                   {"recipe_checksum", clf.recipe().checksum()},
                   {"training", clf.training()}});
    }

    void apply(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        const auto body = parse_body(req);
        std::lock_guard lock(s->mu);
        if (s->pending_featurize() > 0) throw HttpError(409, "featurization incomplete");
        const int version = body_value<int>(body, "version", latest_version(*s));
        const auto clf = classifier(*s, version);
        auto source = clf.recipe().source;
        if (body.contains("features")) {
            try {
                source = pixelclf::feature_source_from_string(body_value<std::string>(body, "features", ""));
            } catch (const std::invalid_argument& e) {
                throw HttpError(400, e.what());
            }
        }
        const int radius = body_value<int>(body, "smooth_radius", 0);
        const auto images = body_value<std::vector<std::string>>(body, "images", s->session.images());
        for (const auto& img : images) require_image(*s, img);
        // Recipe agreement is checked up front so a mismatch is reported, not queued.
        if (!images.empty()) {
            const auto channels = decode_image(s->session.image_bytes(images.front())).channels();
            const auto recipe = workflows::recipe_for(spec_for(source), channels);
            if (recipe.to_json() != clf.recipe().to_json()) {
                throw HttpError(422, "feature recipe mismatch: classifier v" + std::to_string(version) + " was trained on " +
                                         clf.recipe().to_json().dump() + " but apply would build " + recipe.to_json().dump());
            }
        }
        for (const auto& img : images) {
            s->apply[img] = JobState{"queued", "", version};
            jobs->enqueue([this, s, img, version, source, radius] { apply_job(s, img, version, source, radius); });
        }
        send_json(res, 202, {{"version", version}, {"queued", images}});
    }

    void apply_job(const std::shared_ptr<SessionState>& s, const std::string& image, int version,
                   pixelclf::FeatureSource source, int radius) {
        {
            std::lock_guard lock(s->mu);
            s->apply[image].state = "running";
        }
        JobState done{"done", "", version};
        try {
            const auto clf = s->session.load_classifier(version);
            const auto p = predict(*s, clf, image, source, radius);
            std::lock_guard lock(s->mu);
            write_prediction(*s, image, version, p);
        } catch (const std::exception& e) {
            done.state = "failed";
            done.error = e.what();
        }
        std::lock_guard lock(s->mu);
        s->apply[image] = done;
    }

    void prediction(const httplib::Request& req, httplib::Response& res) {
        auto s = session(req.matches[1]);
        const std::string image = req.matches[2];
        std::lock_guard lock(s->mu);
        require_image(*s, image);
        int version = 0;
        if (req.has_param("version")) {
            try {
                version = std::stoi(req.get_param_value("version"));
            } catch (const std::exception&) {
                throw HttpError(400, "version must be an integer");
            }
        } else {
            version = latest_version(*s);
        }
        const std::string format = req.has_param("format") ? req.get_param_value("format") : "png";
        if (format != "png" && format != "fmap") throw HttpError(400, "format must be png or fmap");
        const fs::path meta = prediction_meta_path(s->session, image);
        bool fresh = false;
        if (fs::exists(meta) && fs::exists(s->session.prediction_path(image))) {
            const auto bytes = read_bytes(meta);
            fresh = nlohmann::json::parse(bytes.begin(), bytes.end()).value("version", 0) == version;
        }
        if (!fresh) {
            const auto clf = classifier(*s, version);
            write_prediction(*s, image, version, predict(*s, clf, image, clf.recipe().source, 0));
        }
        const auto path = format == "png" ? s->session.prediction_path(image) : s->session.probability_path(image);
        const auto bytes = read_bytes(path);
        res.set_header("X-Classifier-Version", std::to_string(version));
        res.set_content(std::string(bytes.begin(), bytes.end()), format == "png" ? "image/png" : "application/octet-stream");
    }

    // -- routing --

    using Handler = void (Impl::*)(const httplib::Request&, httplib::Response&);

    httplib::Server::Handler wrap(Handler h) {
        return [this, h](const httplib::Request& req, httplib::Response& res) {
            try {
                (this->*h)(req, res);
            } catch (const HttpError& e) {
                send_json(res, e.status, {{"error", e.what()}});
            } catch (const pixelclf::PixelClfError& e) {
                const std::string msg = e.what();
                send_json(res, msg.find("recipe mismatch") != std::string::npos ? 422 : 400, {{"error", msg}});
            } catch (const ImageDecodeError& e) {
                send_json(res, 400, {{"error", e.what()}});
            } catch (const std::exception& e) {
                spdlog::error("{} {}: {}", req.method, req.path, e.what());
                send_json(res, 500, {{"error", e.what()}});
            }
        };
    }

    void routes() {
        const std::string sid = R"(/sessions/([A-Za-z0-9_-]{1,64}))";
        http.set_payload_max_length(512ull << 20);
        http.Post("/sessions", wrap(&Impl::create_session));
        http.Get(sid + "/status", wrap(&Impl::status));
        http.Post(sid + "/images", wrap(&Impl::add_image));
        http.Post(sid + "/featurize", wrap(&Impl::featurize));
        http.Put(sid + "/labels/([^/]+)", wrap(&Impl::put_labels));
        http.Get(sid + "/labels/([^/]+)", wrap(&Impl::get_labels));
        http.Post(sid + "/train", wrap(&Impl::train));
        http.Post(sid + "/apply", wrap(&Impl::apply));
        http.Get(sid + "/predictions/([^/]+)", wrap(&Impl::prediction));
        http.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (res.body.empty()) send_json(res, res.status, {{"error", "no route for " + req.method + " " + req.path}});
        });
    }

    int bind() {
        const int port = config.port == 0 ? http.bind_to_any_port(config.host) : config.port;
        if (config.port != 0 && !http.bind_to_port(config.host, config.port)) {
            throw std::runtime_error("cannot bind " + config.host + ":" + std::to_string(config.port));
        }
        if (port < 0) throw std::runtime_error("cannot bind " + config.host);
        spdlog::info("serving on {}:{}, backend {}, {} transforms, sessions in {}", config.host, port,
                     backend->descriptor().name, set.size(), config.session_root.string());
        return port;
    }
};

Server::Server(ApiConfig config, std::shared_ptr<const FeaturizerBackend> backend)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(backend))) {}

Server::~Server() { stop(); }

int Server::start() {
    const int port = impl_->bind();
    impl_->running = true;
    impl_->listener = std::thread([this] { impl_->http.listen_after_bind(); });
    impl_->http.wait_until_ready();
    return port;
}

void Server::run() {
    impl_->bind();
    impl_->running = true;
    impl_->http.listen_after_bind();
}

void Server::stop() {
    if (!impl_) return;
    if (impl_->running) {
        impl_->running = false;
        impl_->http.stop();
        if (impl_->listener.joinable()) impl_->listener.join();
    }
    if (!impl_->jobs_stopped) {
        impl_->jobs_stopped = true;
        impl_->jobs->shutdown();
    }
}

const ApiConfig& Server::config() const { return impl_->config; }

}  // namespace featpipe::serve
