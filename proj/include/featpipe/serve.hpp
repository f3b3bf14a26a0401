#pragma once

// HTTP service for interactive labeling sessions (featurize once, paint,
// train, inspect, repeat) and its configuration.

#include <featpipe/featurize.hpp>
#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace featpipe::serve {

namespace fs = std::filesystem;

/// Invalid configuration; `field()` names the offending key.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& message);
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct ApiConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  ///< 0 binds an ephemeral port
    std::string backend = "synthetic:patch-mean+center-attention";
    std::string model_path;  ///< network file for external backends
    int patch_size = 4;
    int stride = 4;
    nlohmann::json transform_set;  ///< TransformSet JSON; null = moore shifts [1, S/2] at the stride
    fs::path session_root = "sessions";
    int workers = 2;  ///< featurization / apply pool size
    std::string feature_source = "deep";
    std::string classifier = "logistic";

    nlohmann::json to_json() const;
    /// Rejects unknown keys and out-of-range values.
    static ApiConfig from_json(const nlohmann::json& j);
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
std::optional<std::string> process_env(const std::string& name);

/// JSON file values (if any), then FEATPIPE_<FIELD> environment overrides
/// (e.g. FEATPIPE_PORT, FEATPIPE_SESSION_ROOT), then validation.
ApiConfig load_config(const std::optional<fs::path>& file, const EnvLookup& env = process_env);

/// Run-length labels {"<class>": [[row, start, len], ...]}; later runs overwrite earlier ones.
LabelRaster labels_from_runs(const nlohmann::json& runs, int height, int width);
nlohmann::json labels_to_runs(const LabelRaster& labels);

class Server {
public:
    /// `backend` overrides the configured backend (used by hosts that supply
    /// their own model runtime).
    explicit Server(ApiConfig config, std::shared_ptr<const FeaturizerBackend> backend = nullptr);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Binds and serves on the calling thread until stop().
    void run();
    /// Stops accepting requests and drains queued jobs.
    void stop();

    const ApiConfig& config() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace featpipe::serve
