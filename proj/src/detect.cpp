#include <featpipe/detect.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <set>

namespace featpipe::detect {

std::vector<Box> DetectionResult::predictions(bool single) const {
    std::vector<Box> out;
    if (single) {
        if (superbox) out.push_back(superbox->box);
        return out;
    }
    for (const auto& b : boxes) out.push_back(b.box);
    return out;
}

Components connected_components(const LabelRaster& mask, int connectivity) {
    if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
    const int h = mask.height(), w = mask.width();
    Components out;
    out.labels = LabelRaster(h, w, 1, -1);
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask(y, x) == 0 || out.labels(y, x) >= 0) continue;
            const int id = out.count++;
            Box bb{x, y, x + 1, y + 1};
            std::int64_t area = 0;
            out.labels(y, x) = id;
            stack.assign(1, {y, x});
            while (!stack.empty()) {
                const auto [cy, cx] = stack.back();
                stack.pop_back();
                ++area;
                bb.x0 = std::min(bb.x0, cx);
                bb.y0 = std::min(bb.y0, cy);
                bb.x1 = std::max(bb.x1, cx + 1);
                bb.y1 = std::max(bb.y1, cy + 1);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if ((dx == 0 && dy == 0) || (connectivity == 4 && dx != 0 && dy != 0)) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                        if (mask(ny, nx) != 0 && out.labels(ny, nx) < 0) {
                            out.labels(ny, nx) = id;
                            stack.emplace_back(ny, nx);
                        }
                    }
                }
            }
            out.areas.push_back(area);
            out.bounds.push_back(bb);
        }
    }
    return out;
}

std::vector<ClassComponents> components(const cas::CasMap& cas, int connectivity) {
    std::vector<ClassComponents> out;
    for (const auto& c : cas.classes) {
        if (!c.foreground) continue;
        LabelRaster mask(cas.labels.height(), cas.labels.width(), 1);
        for (std::size_t i = 0; i < mask.size(); ++i) mask.data()[i] = cas.labels.data()[i] == c.id ? 1 : 0;
        out.push_back({c.id, connected_components(mask, connectivity)});
    }
    return out;
}

std::int64_t default_min_area(int height, int width) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(0.001 * height * width)));
}

LabelRaster saliency(const cas::CasMap& cas) {
    std::vector<bool> fg(cas.classes.size());
    for (const auto& c : cas.classes) fg[c.id] = c.foreground;
    LabelRaster out(cas.labels.height(), cas.labels.width(), 1);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = fg[cas.labels.data()[i]] ? 1 : 0;
    return out;
}

DetectionResult boxes(const cas::CasMap& cas, std::optional<std::int64_t> min_area, int connectivity) {
    const std::int64_t threshold = min_area.value_or(default_min_area(cas.labels.height(), cas.labels.width()));
    DetectionResult out;
    for (const auto& cc : components(cas, connectivity)) {
        for (int i = 0; i < cc.components.count; ++i) {
            if (cc.components.areas[i] < threshold) continue;
            out.boxes.push_back({cc.components.bounds[i], cc.class_id, cc.components.areas[i], false});
        }
    }
    out.saliency = saliency(cas);
    const auto fg = connected_components(out.saliency, connectivity);
    const auto largest = std::max_element(fg.areas.begin(), fg.areas.end()) - fg.areas.begin();
    if (fg.count > 0 && fg.areas[largest] >= threshold) {
        out.superbox = DetectedBox{fg.bounds[largest], -1, fg.areas[largest], true};
        const bool duplicate = std::any_of(out.boxes.begin(), out.boxes.end(),
                                           [&](const DetectedBox& b) { return iou(b.box, out.superbox->box) > 0.8; });
        if (!duplicate) out.boxes.push_back(*out.superbox);
    }
    return out;
}

double iou(const Box& a, const Box& b) {
    const std::int64_t ix = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const std::int64_t iy = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const std::int64_t inter = ix * iy;
    const std::int64_t uni = std::max<std::int64_t>(0, a.area()) + std::max<std::int64_t>(0, b.area()) - inter;
    if (uni <= 0) {
        spdlog::warn("iou: both boxes are empty; defined as 0");
        return 0.0;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double iou(const LabelRaster& a, const LabelRaster& b) {
    if (a.height() != b.height() || a.width() != b.width()) throw std::invalid_argument("iou: mask shapes differ");
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.pixels(); ++i) {
        const bool pa = a.data()[i] != 0, pb = b.data()[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) {
        spdlog::warn("iou: both masks are empty; defined as 0");
        return 0.0;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double corloc(const BoxTable& predictions, const BoxTable& ground_truth) {
    std::vector<std::string> missing;
    for (const auto& [id, _] : predictions) {
        if (!ground_truth.contains(id)) missing.push_back(id);
    }
    if (!missing.empty()) {
        std::string msg = "missing ground truth for image(s):";
        for (const auto& id : missing) msg += " " + id;
        throw std::invalid_argument(msg);
    }
    if (ground_truth.empty()) throw std::invalid_argument("corloc over an empty ground-truth set");
    std::size_t hits = 0;
    for (const auto& [id, gt_boxes] : ground_truth) {
        const auto it = predictions.find(id);
        if (it == predictions.end()) continue;
        bool hit = false;
        for (const auto& p : it->second) {
            for (const auto& g : gt_boxes) hit = hit || iou(p, g) > 0.5;
        }
        hits += hit;
    }
    return static_cast<double>(hits) / static_cast<double>(ground_truth.size());
}

double miou(const LabelRaster& pred, const LabelRaster& gt, const std::vector<int>& classes) {
    if (classes.empty()) throw std::invalid_argument("miou needs a non-empty class list");
    if (pred.height() != gt.height() || pred.width() != gt.width()) throw std::invalid_argument("miou: shapes differ");
    double sum = 0.0;
    int counted = 0;
    for (int c : classes) {
        std::int64_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.pixels(); ++i) {
            const bool p = pred.data()[i] == c, g = gt.data()[i] == c;
            inter += p && g;
            uni += p || g;
        }
        if (uni == 0) continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++counted;
    }
    if (counted == 0) throw std::invalid_argument("miou: no declared class occurs in either raster");
    return sum / counted;
}

nlohmann::json to_json(const Box& b) { return {b.x0, b.y0, b.x1, b.y1}; }

Box box_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x0, y0, x1, y1]");
    Box b{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
    if (!b.valid()) throw std::invalid_argument("box must satisfy x1 > x0 and y1 > y0");
    return b;
}

nlohmann::json boxes_document(const std::string& image, const std::vector<Box>& boxes) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : boxes) arr.push_back(to_json(b));
    return {{"image", image}, {"boxes", arr}};
}

std::vector<Box> boxes_from_document(const nlohmann::json& j) {
    std::vector<Box> out;
    for (const auto& b : j.at("boxes")) out.push_back(box_from_json(b));
    return out;
}

}  // namespace featpipe::detect
