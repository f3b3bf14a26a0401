#pragma once

// End-to-end pipelines shared by the CLI, the HTTP service and the
// acceptance suite: unsupervised detection/saliency, benchmark reports,
// weakly supervised segmentation, synthetic fixtures and profiling.

#include <featpipe/cas.hpp>
#include <featpipe/detect.hpp>
#include <featpipe/featurize.hpp>
#include <featpipe/geometry.hpp>
#include <featpipe/pixelclf.hpp>
#include <featpipe/store.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace featpipe::workflows {

namespace fs = std::filesystem;

// ---- unsupervised ------------------------------------------------------------

struct UnsupOptions {
    cas::CasOptions cas;
    std::optional<std::int64_t> min_area;
    int connectivity = 8;
    UpsampleOptions upsample;
};

struct UnsupResult {
    UpsampleResult features;
    cas::CasMap cas;
    detect::DetectionResult detection;
};

UnsupResult run_unsupervised(const FeaturizerBackend& backend, const Image& image, const TransformSet& set,
                             const UnsupOptions& options = {});

struct BenchmarkOptions {
    bool single = true;  ///< single: superbox only; multi: every retained box
    UnsupOptions unsup;
    std::string dataset_name;
};

struct BenchmarkReport {
    std::string dataset;
    std::string mode;
    std::optional<double> corloc;        ///< over images with ground-truth boxes
    std::optional<double> saliency_iou;  ///< mean foreground IoU over images with masks
    std::optional<double> miou;          ///< mean {background, foreground} mIoU over images with masks
    std::size_t n_images = 0;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    nlohmann::json backend;
    nlohmann::json transform_set;
    nlohmann::json per_image = nlohmann::json::array();

    nlohmann::json to_json() const;
    std::string markdown() const;
};

BenchmarkReport benchmark(const store::Dataset& dataset, const FeaturizerBackend& backend, const TransformSet& set,
                          const BenchmarkOptions& options = {});

// ---- cached featurization -------------------------------------------------------

/// Cache key JSON for a backend under given upsampling options.
nlohmann::json backend_key(const FeaturizerBackend& backend, const UpsampleOptions& options = {});

/// Upsampled features at the image's native resolution (conformed to the
/// backend and restored when its input constraints require it), served from
/// `cache` when present and published to it otherwise.
store::CachedFeatures featurize_cached(const FeaturizerBackend& backend, const TransformSet& set,
                                       std::span<const std::uint8_t> image_bytes, store::FeatureCache& cache,
                                       const UpsampleOptions& options = {}, bool* hit = nullptr);
/// Same conform/restore handling without a cache.
UpsampleResult upsample_native(const FeaturizerBackend& backend, const Image& image, const TransformSet& set,
                               const UpsampleOptions& options = {});

// ---- weak supervision ------------------------------------------------------------

/// What to compute per image for a pixel classifier.
struct FeatureSpec {
    pixelclf::FeatureSource source = pixelclf::FeatureSource::deep;
    const FeaturizerBackend* backend = nullptr;  ///< required for deep / hybrid
    TransformSet transforms;
    pixelclf::ClassicalRecipe classical;
    UpsampleOptions upsample;
};

struct PixelFeatures {
    FloatRaster data;
    pixelclf::FeatureRecipe recipe;
};

/// deep: upsampled backend features; classical: filter bank; hybrid: deep then classical.
/// `deep` may carry precomputed (e.g. cached) upsampled features.
PixelFeatures pixel_features(const Image& image, const FeatureSpec& spec, const FeatureMap* deep = nullptr);
pixelclf::FeatureRecipe recipe_for(const FeatureSpec& spec, int image_channels);

struct WeakSegFixture {
    std::string name;
    Image image;
    LabelRaster scribbles;  ///< sparse labels, 0 = unlabelled
    LabelRaster truth;      ///< dense ground truth
    std::vector<int> classes;
};

/// Three constant-colour regions (plus mild noise), separable by colour alone.
WeakSegFixture color_fixture(std::uint64_t seed, int size = 128);
/// Identical i.i.d. texture everywhere with a thin mid-grey ring; class 1 = inside (ring included), class 2 = outside.
WeakSegFixture interiority_fixture(std::uint64_t seed, int size = 128);

struct WeakSegResult {
    pixelclf::Prediction prediction;
    double miou = 0.0;
};

WeakSegResult run_weak_seg(const WeakSegFixture& fixture, const FeatureSpec& features,
                           const pixelclf::TrainOptions& train = {});

// ---- synthetic detection data ---------------------------------------------------------

struct BlobSample {
    Image image;
    detect::Box box;
    LabelRaster mask;  ///< 1 inside the blob
};

/// One elliptical blob whose hue is opposite to the noisy background.
BlobSample make_blob_image(std::uint64_t seed, int size = 128);
/// Flat-layout dataset: blob_NNN.png, blob_NNN.boxes.json, blob_NNN.mask.png.
void write_blob_dataset(const fs::path& dir, int count, std::uint64_t seed, int size = 128);

// ---- profiling -----------------------------------------------------------------------

struct ProfileRow {
    int length = 0;
    UpsampleMode mode = UpsampleMode::sequential;
    double wall_ms = 0.0;
    std::size_t peak_bytes = 0;
};

struct ProfileOptions {
    std::vector<int> lengths{128, 256, 512};
    std::vector<UpsampleMode> modes{UpsampleMode::sequential, UpsampleMode::batched};
    int repeats = 3;  ///< wall time is the minimum over repeats
    int workers = 1;
    std::uint64_t seed = 0;
};

std::vector<ProfileRow> profile(const FeaturizerBackend& backend, const TransformSet& set, const ProfileOptions& options);
/// "length,mode,wall_ms,peak_bytes" header plus one row per measurement.
std::string profile_csv(const std::vector<ProfileRow>& rows);

}  // namespace featpipe::workflows
