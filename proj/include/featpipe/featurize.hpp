#pragma once

// Patch featurizer backends and the transform-ensemble upsampling engine.
//
// upsample() evaluates, for every transform t in the set,
//     F_t = t^-1( nearest_resize( G(t(image)) ) )
// and returns the mean over t. Attention maps go through the same path.

#include <featpipe/geometry.hpp>
#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace featpipe {

struct BackendDescriptor {
    std::string name;
    int patch_size = 4;
    int stride = 4;
    int hidden_dim = 3;
    /// When true, (H - P) and (W - P) must be multiples of the stride.
    bool require_divisible = false;
    /// "synthetic", "precomputed" or "external".
    std::string source = "synthetic";
    std::string attention = "final-block [CLS]->patch attention, mean over heads, normalised to sum 1";

    /// Patch grid extent along an axis of the given length: floor((n - P) / S) + 1.
    int grid_extent(int n) const { return n < patch_size ? 0 : (n - patch_size) / stride + 1; }

    nlohmann::json to_json() const;
    static BackendDescriptor from_json(const nlohmann::json& j);
};

struct PatchOutput {
    FloatRaster features;   ///< gh x gw x D
    FloatRaster attention;  ///< gh x gw x 1, sums to 1
};

class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FeaturizerBackend {
public:
    virtual ~FeaturizerBackend() = default;
    virtual const BackendDescriptor& descriptor() const = 0;
    /// False when calls must be serialised (the engine then runs one at a time).
    virtual bool concurrent_safe() const { return true; }

protected:
    friend PatchOutput featurize_patches(const FeaturizerBackend&, const Image&);
    virtual PatchOutput run(const Image& image) const = 0;
};

/// Validated entry point: checks input constraints and output shapes, and
/// renormalises attention to sum 1 over patches.
PatchOutput featurize_patches(const FeaturizerBackend& backend, const Image& image);

enum class SyntheticKind {
    patch_mean,              ///< D = 3, uniform attention
    patch_mean_center,       ///< D = 4 (RGB means + centre prior), centre-Gaussian attention
    patch_mean_contrast,     ///< D = 3, attention ~ |patch mean - median colour|^2
};

/// Deterministic analytic backend for testing downstream modules.
class SyntheticBackend final : public FeaturizerBackend {
public:
    SyntheticBackend(SyntheticKind kind, int patch_size, int stride);
    const BackendDescriptor& descriptor() const override { return descriptor_; }
    SyntheticKind kind() const noexcept { return kind_; }

protected:
    PatchOutput run(const Image& image) const override;

private:
    SyntheticKind kind_;
    BackendDescriptor descriptor_;
};

/// Returns archived tensors. A file path serves the same archive for every
/// image; a directory serves "<image-hash>.fmap" (+ "<image-hash>.attn.fmap").
class PrecomputedBackend final : public FeaturizerBackend {
public:
    PrecomputedBackend(std::filesystem::path archive, BackendDescriptor descriptor);
    explicit PrecomputedBackend(std::filesystem::path archive);
    const BackendDescriptor& descriptor() const override { return descriptor_; }

protected:
    PatchOutput run(const Image& image) const override;

private:
    std::filesystem::path archive_;
    BackendDescriptor descriptor_;
};

/// Backend driven by a caller-supplied function (used for externally hosted
/// model runtimes, e.g. from Python).
class CallbackBackend final : public FeaturizerBackend {
public:
    using Fn = std::function<PatchOutput(const Image&)>;
    CallbackBackend(BackendDescriptor descriptor, Fn fn, bool concurrent_safe = false);
    const BackendDescriptor& descriptor() const override { return descriptor_; }
    bool concurrent_safe() const override { return concurrent_safe_; }

protected:
    PatchOutput run(const Image& image) const override { return fn_(image); }

private:
    BackendDescriptor descriptor_;
    Fn fn_;
    bool concurrent_safe_;
};

/// Hash of a raster's shape and bytes; used to key precomputed archives.
std::string image_hash(const Image& image);

/// Parses "synthetic:<kind>", "precomputed:<path>". Patch/stride apply to
/// synthetic backends. "external:<path>" is reported as a BackendError here
/// since no model runtime is linked into the C++ core.
std::unique_ptr<FeaturizerBackend> make_backend(const std::string& spec, int patch_size = 4, int stride = 4);

struct FeatureMap {
    FloatRaster data;  ///< H x W x D
    nlohmann::json provenance = nlohmann::json::object();
};

struct AttentionMap {
    FloatRaster data;  ///< H x W x 1, non-negative
    nlohmann::json provenance = nlohmann::json::object();
};

/// Nearest-neighbour resize of a patch grid: pixel p maps to patch floor(p * grid / n).
FloatRaster nearest_resize(const FloatRaster& grid, int height, int width);

enum class UpsampleMode { batched, sequential };

struct UpsampleOptions {
    UpsampleMode mode = UpsampleMode::sequential;
    /// L2-normalise each per-transform feature vector before averaging.
    bool l2_normalize = false;
    /// Worker threads for batched mode (ignored for single-flight backends).
    int workers = 1;
    std::string image_id;
};

struct UpsampleStats {
    std::size_t transforms = 0;
    /// Peak bytes held in engine working buffers.
    std::size_t peak_buffer_bytes = 0;
};

struct UpsampleResult {
    FeatureMap features;
    AttentionMap attention;
    UpsampleStats stats;
};

UpsampleResult upsample(const FeaturizerBackend& backend, const Image& image, const TransformSet& set,
                        const UpsampleOptions& options = {});

struct PcaResult {
    Image rgb;                         ///< H x W x 3
    std::array<double, 3> variances{};  ///< eigenvalues of the leading components
    bool degenerate = false;           ///< constant features, output is uniform gray
};

/// 3-component PCA of all pixel feature vectors mapped to RGB by per-channel
/// min-max scaling. Component signs make the largest-magnitude loading positive.
PcaResult pca_rgb(const FeatureMap& fm, int components = 3);

struct KeypointMatch {
    FloatRaster similarity;  ///< H x W x 1 cosine similarity
    int x = 0;
    int y = 0;
    float score = 0.0f;
};

/// Cosine similarity of the query pixel's vector to every target pixel;
/// argmax with row-major (first) tie-breaking.
KeypointMatch keypoint_query(const FeatureMap& query, int x, int y, const FeatureMap& target);

std::string to_string(UpsampleMode m);
UpsampleMode upsample_mode_from_string(const std::string& s);

}  // namespace featpipe
