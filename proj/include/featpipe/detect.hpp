#pragma once

// Boxes, saliency masks and the CorLoc / IoU / mIoU metrics computed from a
// class-agnostic segmentation.

#include <featpipe/cas.hpp>
#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace featpipe::detect {

/// Half-open pixel box [x0, x1) x [y0, y1).
struct Box {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;

    std::int64_t area() const { return static_cast<std::int64_t>(x1 - x0) * (y1 - y0); }
    bool valid() const { return x1 > x0 && y1 > y0; }
    friend bool operator==(const Box&, const Box&) = default;
};

struct DetectedBox {
    Box box;
    int class_id = -1;        ///< -1 for the superbox (spans the foreground union)
    std::int64_t area = 0;    ///< component pixel count
    bool is_superbox = false;
};

struct DetectionResult {
    std::vector<DetectedBox> boxes;  ///< retained boxes; holds at most one superbox
    std::optional<DetectedBox> superbox;  ///< present when the largest foreground component passes min_area
    LabelRaster saliency;              ///< 1 = foreground

    /// single: the superbox only; multi: every retained box.
    std::vector<Box> predictions(bool single) const;
};

struct Components {
    LabelRaster labels;  ///< -1 background, else component id in raster-scan order
    int count = 0;
    std::vector<std::int64_t> areas;
    std::vector<Box> bounds;
};

/// Connected components of the non-zero pixels of a mask (connectivity 4 or 8).
Components connected_components(const LabelRaster& mask, int connectivity = 8);

struct ClassComponents {
    int class_id = 0;
    Components components;
};

/// Components of every foreground class of a CAS map.
std::vector<ClassComponents> components(const cas::CasMap& cas, int connectivity = 8);

/// Default minimum component area: 0.1% of the image, at least one pixel.
std::int64_t default_min_area(int height, int width);

DetectionResult boxes(const cas::CasMap& cas, std::optional<std::int64_t> min_area = std::nullopt,
                      int connectivity = 8);

double iou(const Box& a, const Box& b);
/// IoU of the non-zero support of two same-shaped masks; 0 (with a warning) when both are empty.
double iou(const LabelRaster& a, const LabelRaster& b);

LabelRaster saliency(const cas::CasMap& cas);

using BoxTable = std::map<std::string, std::vector<Box>>;

/// Fraction of ground-truth images where some prediction has IoU > 0.5 with
/// some ground-truth box. Images without predictions count as misses.
double corloc(const BoxTable& predictions, const BoxTable& ground_truth);

/// Mean over declared classes of per-class IoU; classes absent from both rasters are skipped.
double miou(const LabelRaster& pred, const LabelRaster& gt, const std::vector<int>& classes);

nlohmann::json to_json(const Box& b);
Box box_from_json(const nlohmann::json& j);
/// {"image": id, "boxes": [[x0,y0,x1,y1], ...]}
nlohmann::json boxes_document(const std::string& image, const std::vector<Box>& boxes);
std::vector<Box> boxes_from_document(const nlohmann::json& j);

}  // namespace featpipe::detect
