#pragma once

// Datasets on disk, resizing to backend constraints, the content-addressed
// feature cache and the session directory layout used by the service.

#include <featpipe/detect.hpp>
#include <featpipe/featurize.hpp>
#include <featpipe/pixelclf.hpp>
#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace featpipe::store {

namespace fs = std::filesystem;

class StoreError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---- datasets ---------------------------------------------------------------

enum class Layout { flat, voc_like };
Layout layout_from_string(const std::string& s);
std::string to_string(Layout l);

struct DatasetEntry {
    std::string id;
    fs::path image;
    std::optional<fs::path> boxes_path;
    std::optional<std::vector<detect::Box>> boxes;
    std::optional<fs::path> mask;
    std::string split = "eval";

    friend bool operator==(const DatasetEntry&, const DatasetEntry&) = default;
};

struct Dataset {
    fs::path root;
    Layout layout = Layout::flat;
    std::vector<DatasetEntry> entries;  ///< sorted by id
    std::vector<std::string> problems;  ///< files skipped during a non-strict ingest

    const DatasetEntry& at(const std::string& id) const;
    detect::BoxTable ground_truth() const;
    nlohmann::json to_json() const;
};

struct IngestOptions {
    bool strict = false;
};

/// flat: `<id>.{png,jpg,jpeg}`, `<id>.boxes.json`, `<id>.mask.png` and an
/// optional `split.json` ({"<id>": "train"|"eval"}) in one directory.
/// voc_like: `JPEGImages/`, `Annotations/*.xml`, `SegmentationClass/*.png`,
/// `ImageSets/Main/train.txt` marks training ids.
Dataset ingest(const fs::path& root, Layout layout, const IngestOptions& options = {});

/// VOC XML objects to half-open boxes (VOC coordinates are 1-based, inclusive).
std::vector<detect::Box> parse_voc_boxes(const std::string& xml);

// ---- conforming images to a backend -----------------------------------------

struct ConformMapping {
    int source_height = 0;
    int source_width = 0;
    int scaled_height = 0;  ///< after resize, before padding
    int scaled_width = 0;
    int pad_bottom = 0;
    int pad_right = 0;

    int height() const { return scaled_height + pad_bottom; }
    int width() const { return scaled_width + pad_right; }
    bool identity() const {
        return scaled_height == source_height && scaled_width == source_width && pad_bottom == 0 && pad_right == 0;
    }
    nlohmann::json to_json() const;
    static ConformMapping from_json(const nlohmann::json& j);
};

/// Smallest n' >= n accepted by the backend (grid divides exactly when required).
int conform_extent(int n, const BackendDescriptor& backend);

/// Resize so the longer side equals target_edge (when given), then pad
/// bottom/right with edge replication until both sides satisfy the backend.
ConformMapping plan_conform(int height, int width, const BackendDescriptor& backend,
                            std::optional<int> target_edge = std::nullopt);

struct ConformedImage {
    Image image;
    ConformMapping mapping;
};
ConformedImage conform(const Image& image, const BackendDescriptor& backend, std::optional<int> target_edge = std::nullopt);
/// Masks follow the image's mapping with nearest-neighbour resizing; padding is 0 (unlabelled).
LabelRaster conform_mask(const LabelRaster& mask, const ConformMapping& mapping);
/// Crop padding and resize back to the source resolution (nearest).
LabelRaster restore(const LabelRaster& labels, const ConformMapping& mapping);
FloatRaster restore(const FloatRaster& values, const ConformMapping& mapping);

/// Bilinear, half-pixel centres.
Image resize_bilinear(const Image& image, int height, int width);
template <typename T>
Raster<T> resize_nearest(const Raster<T>& r, int height, int width);

// ---- feature cache ------------------------------------------------------------

/// SHA-256 over (image bytes, backend descriptor JSON, transform-set JSON).
std::string cache_key(std::span<const std::uint8_t> image_bytes, const nlohmann::json& backend,
                      const nlohmann::json& transform_set);

struct CachedFeatures {
    FeatureMap features;
    AttentionMap attention;
};

/// Content-addressed FMAP files, each with a `.sha256` sidecar naming the
/// digest of the published bytes. A mismatch discards the entry.
class FeatureCache {
public:
    explicit FeatureCache(fs::path dir);

    void put(const std::string& key, const FeatureMap& features, const AttentionMap& attention);
    std::optional<CachedFeatures> get(const std::string& key);
    bool contains(const std::string& key) const;
    void evict(const std::string& key);

    fs::path features_path(const std::string& key) const;
    fs::path attention_path(const std::string& key) const;
    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }

private:
    fs::path dir_;
    std::size_t hits_ = 0;
    std::size_t misses_ = 0;
};

// ---- sessions -------------------------------------------------------------------

/// session/<id>/{config.json, images/, features/, labels/, classifiers/<n>.clf, predictions/}
class Session {
public:
    static Session create(const fs::path& root, const nlohmann::json& config, std::optional<std::string> id = {});
    static Session open(const fs::path& root, const std::string& id);
    static bool valid_id(const std::string& id);

    const std::string& id() const { return id_; }
    const fs::path& dir() const { return dir_; }
    nlohmann::json config() const;

    /// Stores the encoded image; returns its id (sanitized name, or a content-hash prefix).
    std::string add_image(std::span<const std::uint8_t> bytes, std::optional<std::string> name = {});
    std::vector<std::string> images() const;
    bool has_image(const std::string& image) const;
    fs::path image_path(const std::string& image) const;
    std::vector<std::uint8_t> image_bytes(const std::string& image) const;

    void put_labels(const std::string& image, const LabelRaster& labels);
    std::optional<LabelRaster> labels(const std::string& image) const;
    fs::path labels_path(const std::string& image) const;

    /// Returns the new 1-based version.
    int save_classifier(const pixelclf::PixelClassifier& clf);
    std::vector<int> classifier_versions() const;
    pixelclf::PixelClassifier load_classifier(int version) const;

    fs::path prediction_path(const std::string& image) const;
    fs::path probability_path(const std::string& image) const;

    FeatureCache cache() const { return FeatureCache(dir_ / "features"); }

private:
    Session(fs::path dir, std::string id) : dir_(std::move(dir)), id_(std::move(id)) {}
    fs::path dir_;
    std::string id_;
};

}  // namespace featpipe::store
