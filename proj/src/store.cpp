#include <featpipe/store.hpp>

#include <featpipe/fmap.hpp>
#include <featpipe/hash.hpp>
#include <featpipe/io.hpp>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace featpipe::store {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_image_name(const std::string& name) {
    const auto l = lower(name);
    return ends_with(l, ".png") || ends_with(l, ".jpg") || ends_with(l, ".jpeg");
}

std::string read_text(const fs::path& p) {
    const auto bytes = read_bytes(p);
    return {bytes.begin(), bytes.end()};
}

// Records a problem, or throws when strict.
struct Problems {
    bool strict;
    std::vector<std::string>& out;

    void add(const std::string& message) {
        if (strict) throw StoreError(message);
        spdlog::warn("ingest: {}", message);
        out.push_back(message);
    }
};

bool check_image(const fs::path& p, Problems& problems) {
    try {
        (void)read_image(p);
        return true;
    } catch (const std::exception& e) {
        problems.add("unreadable image " + p.string() + ": " + e.what());
        return false;
    }
}

std::string image_extension(std::span<const std::uint8_t> b) {
    if (b.size() >= 8 && b[0] == 0x89 && b[1] == 'P' && b[2] == 'N' && b[3] == 'G') return ".png";
    if (b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF) return ".jpg";
    return {};
}

std::string sanitize(const std::string& name) {
    std::string out;
    for (char c : name) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    while (!out.empty() && out.front() == '.') out.erase(out.begin());
    return out.substr(0, 96);
}

std::string random_id() {
    std::random_device rd;
    std::mt19937_64 rng((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
    static constexpr char hex[] = "0123456789abcdef";
    std::string id;
    for (int i = 0; i < 16; ++i) id += hex[rng() % 16];
    return id;
}

template <typename T>
Raster<T> pad_to(const Raster<T>& r, int height, int width, bool replicate) {
    Raster<T> out(height, width, r.channels());
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const bool inside = y < r.height() && x < r.width();
            if (!inside && !replicate) continue;
            const int sy = std::min(y, r.height() - 1), sx = std::min(x, r.width() - 1);
            for (int c = 0; c < r.channels(); ++c) out(y, x, c) = r(sy, sx, c);
        }
    }
    return out;
}

template <typename T>
Raster<T> crop(const Raster<T>& r, int height, int width) {
    Raster<T> out(height, width, r.channels());
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < r.channels(); ++c) out(y, x, c) = r(y, x, c);
    return out;
}

// Source index for nearest-neighbour resampling with pixel-centre alignment.
int nearest_source(int dst, int in, int out) {
    const auto s = static_cast<int>((2LL * dst + 1) * in / (2LL * out));
    return std::min(s, in - 1);
}

}  // namespace

// ---- datasets ---------------------------------------------------------------

Layout layout_from_string(const std::string& s) {
    if (s == "flat") return Layout::flat;
    if (s == "voc_like" || s == "voc") return Layout::voc_like;
    throw std::invalid_argument("unknown dataset layout '" + s + "' (expected flat or voc_like)");
}

std::string to_string(Layout l) { return l == Layout::flat ? "flat" : "voc_like"; }

const DatasetEntry& Dataset::at(const std::string& id) const {
    const auto it = std::lower_bound(entries.begin(), entries.end(), id,
                                     [](const DatasetEntry& e, const std::string& k) { return e.id < k; });
    if (it == entries.end() || it->id != id) throw StoreError("no image '" + id + "' in dataset " + root.string());
    return *it;
}

detect::BoxTable Dataset::ground_truth() const {
    detect::BoxTable t;
    for (const auto& e : entries) {
        if (e.boxes) t[e.id] = *e.boxes;
    }
    return t;
}

nlohmann::json Dataset::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries) {
        nlohmann::json j = {{"id", e.id}, {"image", fs::relative(e.image, root).generic_string()}, {"split", e.split}};
        if (e.boxes) {
            nlohmann::json b = nlohmann::json::array();
            for (const auto& box : *e.boxes) b.push_back(detect::to_json(box));
            j["boxes"] = b;
        }
        if (e.mask) j["mask"] = fs::relative(*e.mask, root).generic_string();
        arr.push_back(j);
    }
    return {{"root", root.generic_string()}, {"layout", to_string(layout)}, {"entries", arr}, {"problems", problems}};
}

std::vector<detect::Box> parse_voc_boxes(const std::string& xml) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(xml);
    try {
        pt::read_xml(in, tree);
    } catch (const pt::xml_parser_error& e) {
        throw StoreError(std::string("malformed VOC annotation: ") + e.what());
    }
    std::vector<detect::Box> out;
    const auto& ann = tree.get_child("annotation", pt::ptree());
    for (const auto& [name, obj] : ann) {
        if (name != "object") continue;
        const auto coord = [&](const char* key) {
            const auto v = obj.get_optional<double>(std::string("bndbox.") + key);
            if (!v) throw StoreError(std::string("VOC object without bndbox.") + key);
            return static_cast<int>(std::lround(*v));
        };
        detect::Box b{coord("xmin") - 1, coord("ymin") - 1, coord("xmax"), coord("ymax")};
        if (!b.valid()) throw StoreError("VOC object with an empty box");
        out.push_back(b);
    }
    return out;
}

Dataset ingest(const fs::path& root, Layout layout, const IngestOptions& options) {
    if (!fs::is_directory(root)) throw StoreError("dataset root is not a readable directory: " + root.string());
    Dataset ds;
    ds.root = root;
    ds.layout = layout;
    Problems problems{options.strict, ds.problems};
    std::map<std::string, DatasetEntry> found;

    const fs::path image_dir = layout == Layout::flat ? root : root / "JPEGImages";
    std::vector<fs::path> files;
    if (fs::is_directory(image_dir)) {
        for (const auto& de : fs::directory_iterator(image_dir)) {
            if (de.is_regular_file()) files.push_back(de.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        const auto name = p.filename().string();
        if (!is_image_name(name) || ends_with(lower(name), ".mask.png")) continue;
        const auto id = p.stem().string();
        if (found.contains(id)) {
            problems.add("duplicate image id '" + id + "': " + p.string());
            continue;
        }
        if (!check_image(p, problems)) continue;
        DatasetEntry e;
        e.id = id;
        e.image = p;
        const fs::path boxes = layout == Layout::flat ? root / (id + ".boxes.json") : root / "Annotations" / (id + ".xml");
        if (fs::is_regular_file(boxes)) {
            try {
                e.boxes = layout == Layout::flat ? detect::boxes_from_document(nlohmann::json::parse(read_text(boxes)))
                                                 : parse_voc_boxes(read_text(boxes));
                e.boxes_path = boxes;
            } catch (const std::exception& ex) {
                problems.add("unreadable boxes " + boxes.string() + ": " + ex.what());
            }
        }
        const fs::path mask = layout == Layout::flat ? root / (id + ".mask.png") : root / "SegmentationClass" / (id + ".png");
        if (fs::is_regular_file(mask)) e.mask = mask;
        found.emplace(id, std::move(e));
    }

    if (layout == Layout::flat && fs::is_regular_file(root / "split.json")) {
        try {
            const auto splits = nlohmann::json::parse(read_text(root / "split.json"));
            for (const auto& [id, split] : splits.items()) {
                const auto s = split.get<std::string>();
                if (s != "train" && s != "eval") throw StoreError("split for '" + id + "' must be train or eval");
                if (auto it = found.find(id); it != found.end()) it->second.split = s;
            }
        } catch (const StoreError&) {
            throw;
        } catch (const std::exception& ex) {
            problems.add("unreadable split.json: " + std::string(ex.what()));
        }
    }
    if (layout == Layout::voc_like) {
        const auto train = root / "ImageSets" / "Main" / "train.txt";
        if (fs::is_regular_file(train)) {
            std::istringstream in(read_text(train));
            for (std::string id; in >> id;) {
                if (auto it = found.find(id); it != found.end()) it->second.split = "train";
            }
        }
    }
    for (auto& [_, e] : found) ds.entries.push_back(std::move(e));
    return ds;
}

// ---- conform -------------------------------------------------------------------

nlohmann::json ConformMapping::to_json() const {
    return {{"source", {source_height, source_width}},
            {"scaled", {scaled_height, scaled_width}},
            {"pad", {pad_bottom, pad_right}}};
}

ConformMapping ConformMapping::from_json(const nlohmann::json& j) {
    return {j.at("source")[0], j.at("source")[1], j.at("scaled")[0], j.at("scaled")[1], j.at("pad")[0], j.at("pad")[1]};
}

int conform_extent(int n, const BackendDescriptor& backend) {
    int m = std::max(n, backend.patch_size);
    if (backend.require_divisible) {
        const int rem = (m - backend.patch_size) % backend.stride;
        if (rem) m += backend.stride - rem;
    }
    return m;
}

ConformMapping plan_conform(int height, int width, const BackendDescriptor& backend, std::optional<int> target_edge) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("cannot conform a zero-sized image");
    ConformMapping m{height, width, height, width, 0, 0};
    if (target_edge) {
        if (*target_edge <= 0) throw std::invalid_argument("target edge must be positive");
        const double scale = static_cast<double>(*target_edge) / std::max(height, width);
        m.scaled_height = height >= width ? *target_edge : std::max(1, static_cast<int>(std::lround(height * scale)));
        m.scaled_width = width >= height ? *target_edge : std::max(1, static_cast<int>(std::lround(width * scale)));
    }
    m.pad_bottom = conform_extent(m.scaled_height, backend) - m.scaled_height;
    m.pad_right = conform_extent(m.scaled_width, backend) - m.scaled_width;
    return m;
}

Image resize_bilinear(const Image& image, int height, int width) {
    if (height <= 0 || width <= 0 || image.empty()) throw std::invalid_argument("resize to or from an empty image");
    if (height == image.height() && width == image.width()) return image;
    Image out(height, width, image.channels());
    const double sy = static_cast<double>(image.height()) / height, sx = static_cast<double>(image.width()) / width;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height() - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, image.height() - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width() - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, image.width() - 1);
            const double wx = fx - x0;
            for (int c = 0; c < image.channels(); ++c) {
                const double v = (1 - wy) * ((1 - wx) * image(y0, x0, c) + wx * image(y0, x1, c)) +
                                 wy * ((1 - wx) * image(y1, x0, c) + wx * image(y1, x1, c));
                out(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

template <typename T>
Raster<T> resize_nearest(const Raster<T>& r, int height, int width) {
    if (height <= 0 || width <= 0 || r.empty()) throw std::invalid_argument("resize to or from an empty raster");
    if (height == r.height() && width == r.width()) return r;
    Raster<T> out(height, width, r.channels());
    for (int y = 0; y < height; ++y) {
        const int sy = nearest_source(y, r.height(), height);
        for (int x = 0; x < width; ++x) {
            const int sx = nearest_source(x, r.width(), width);
            for (int c = 0; c < r.channels(); ++c) out(y, x, c) = r(sy, sx, c);
        }
    }
    return out;
}

template Raster<std::uint8_t> resize_nearest(const Raster<std::uint8_t>&, int, int);
template Raster<std::int32_t> resize_nearest(const Raster<std::int32_t>&, int, int);
template Raster<float> resize_nearest(const Raster<float>&, int, int);

ConformedImage conform(const Image& image, const BackendDescriptor& backend, std::optional<int> target_edge) {
    const auto m = plan_conform(image.height(), image.width(), backend, target_edge);
    if (m.identity()) return {image, m};
    const Image scaled = resize_bilinear(image, m.scaled_height, m.scaled_width);
    return {pad_to(scaled, m.height(), m.width(), true), m};
}

LabelRaster conform_mask(const LabelRaster& mask, const ConformMapping& m) {
    if (mask.height() != m.source_height || mask.width() != m.source_width) {
        throw std::invalid_argument("mask does not match the conform mapping's source size");
    }
    if (m.identity()) return mask;
    return pad_to(resize_nearest(mask, m.scaled_height, m.scaled_width), m.height(), m.width(), false);
}

LabelRaster restore(const LabelRaster& labels, const ConformMapping& m) {
    if (labels.height() != m.height() || labels.width() != m.width()) {
        throw std::invalid_argument("labels do not match the conformed size");
    }
    if (m.identity()) return labels;
    return resize_nearest(crop(labels, m.scaled_height, m.scaled_width), m.source_height, m.source_width);
}

FloatRaster restore(const FloatRaster& values, const ConformMapping& m) {
    if (values.height() != m.height() || values.width() != m.width()) {
        throw std::invalid_argument("values do not match the conformed size");
    }
    if (m.identity()) return values;
    return resize_nearest(crop(values, m.scaled_height, m.scaled_width), m.source_height, m.source_width);
}

// ---- feature cache ---------------------------------------------------------------

std::string cache_key(std::span<const std::uint8_t> image_bytes, const nlohmann::json& backend,
                      const nlohmann::json& transform_set) {
    Sha256 h;
    h.update(image_bytes);
    h.update(std::string_view("\0backend\0", 9));
    h.update(backend.dump());
    h.update(std::string_view("\0transforms\0", 12));
    h.update(transform_set.dump());
    return h.hex();
}

FeatureCache::FeatureCache(fs::path dir) : dir_(std::move(dir)) {}

fs::path FeatureCache::features_path(const std::string& key) const { return dir_ / (key + ".fmap"); }
fs::path FeatureCache::attention_path(const std::string& key) const { return dir_ / (key + ".attn.fmap"); }

void FeatureCache::put(const std::string& key, const FeatureMap& features, const AttentionMap& attention) {
    fs::create_directories(dir_);
    const auto fbytes = encode_fmap(features.data, &features.provenance);
    const auto abytes = encode_fmap(attention.data, &attention.provenance);
    write_atomic(features_path(key), fbytes);
    write_atomic(attention_path(key), abytes);
    // The sidecar is published last: its presence marks a complete entry.
    const nlohmann::json sidecar = {{"features", sha256_hex(fbytes)}, {"attention", sha256_hex(abytes)}};
    write_atomic(dir_ / (key + ".sha256"), sidecar.dump());
}

bool FeatureCache::contains(const std::string& key) const { return fs::exists(dir_ / (key + ".sha256")); }

void FeatureCache::evict(const std::string& key) {
    std::error_code ec;
    fs::remove(dir_ / (key + ".sha256"), ec);
    fs::remove(features_path(key), ec);
    fs::remove(attention_path(key), ec);
}

std::optional<CachedFeatures> FeatureCache::get(const std::string& key) {
    const auto sidecar_path = dir_ / (key + ".sha256");
    if (!fs::exists(sidecar_path)) {
        ++misses_;
        return std::nullopt;
    }
    try {
        const auto sidecar = nlohmann::json::parse(read_text(sidecar_path));
        const auto fbytes = read_bytes(features_path(key));
        const auto abytes = read_bytes(attention_path(key));
        if (sha256_hex(fbytes) != sidecar.at("features").get<std::string>() ||
            sha256_hex(abytes) != sidecar.at("attention").get<std::string>()) {
            throw StoreError("checksum mismatch");
        }
        auto f = decode_fmap(fbytes);
        auto a = decode_fmap(abytes);
        ++hits_;
        spdlog::info("feature cache hit {}", key.substr(0, 16));
        return CachedFeatures{{std::move(f.data), f.provenance.value_or(nlohmann::json::object())},
                              {std::move(a.data), a.provenance.value_or(nlohmann::json::object())}};
    } catch (const std::exception& e) {
        spdlog::warn("feature cache entry {} discarded: {}", key.substr(0, 16), e.what());
        evict(key);
        ++misses_;
        return std::nullopt;
    }
}

// ---- sessions ----------------------------------------------------------------------

bool Session::valid_id(const std::string& id) {
    if (id.empty() || id.size() > 64) return false;
    return std::all_of(id.begin(), id.end(),
                       [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

Session Session::create(const fs::path& root, const nlohmann::json& config, std::optional<std::string> id) {
    std::string sid = id.value_or(random_id());
    if (!valid_id(sid)) throw std::invalid_argument("invalid session id '" + sid + "'");
    const auto dir = root / sid;
    if (fs::exists(dir)) throw StoreError("session '" + sid + "' already exists");
    for (const char* sub : {"images", "features", "labels", "classifiers", "predictions"}) {
        fs::create_directories(dir / sub);
    }
    write_atomic(dir / "config.json", config.dump(2));
    return Session(dir, sid);
}

Session Session::open(const fs::path& root, const std::string& id) {
    if (!valid_id(id) || !fs::is_regular_file(root / id / "config.json")) {
        throw StoreError("unknown session '" + id + "'");
    }
    return Session(root / id, id);
}

nlohmann::json Session::config() const { return nlohmann::json::parse(read_text(dir_ / "config.json")); }

std::string Session::add_image(std::span<const std::uint8_t> bytes, std::optional<std::string> name) {
    const auto ext = image_extension(bytes);
    if (ext.empty()) throw std::invalid_argument("unsupported image format (expected PNG or JPEG)");
    (void)decode_image(bytes);  // reject corrupt uploads up front
    std::string id = name ? sanitize(fs::path(*name).stem().string()) : std::string();
    if (id.empty()) id = sha256_hex(bytes).substr(0, 16);
    if (has_image(id)) {
        if (image_bytes(id) == std::vector<std::uint8_t>(bytes.begin(), bytes.end())) return id;
        throw StoreError("image '" + id + "' already exists with different content");
    }
    write_atomic(dir_ / "images" / (id + ext), bytes);
    return id;
}

std::vector<std::string> Session::images() const {
    std::vector<std::string> out;
    for (const auto& de : fs::directory_iterator(dir_ / "images")) {
        const auto name = de.path().filename().string();
        if (de.is_regular_file() && is_image_name(name)) out.push_back(de.path().stem().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

fs::path Session::image_path(const std::string& image) const {
    for (const char* ext : {".png", ".jpg"}) {
        auto p = dir_ / "images" / (image + ext);
        if (fs::is_regular_file(p)) return p;
    }
    throw StoreError("unknown image '" + image + "' in session '" + id_ + "'");
}

bool Session::has_image(const std::string& image) const {
    if (image.empty() || sanitize(image) != image) return false;
    return fs::is_regular_file(dir_ / "images" / (image + ".png")) || fs::is_regular_file(dir_ / "images" / (image + ".jpg"));
}

std::vector<std::uint8_t> Session::image_bytes(const std::string& image) const { return read_bytes(image_path(image)); }

fs::path Session::labels_path(const std::string& image) const { return dir_ / "labels" / (image + ".png"); }

void Session::put_labels(const std::string& image, const LabelRaster& labels) {
    if (!has_image(image)) throw StoreError("unknown image '" + image + "' in session '" + id_ + "'");
    write_indexed_png(labels_path(image), labels);
}

std::optional<LabelRaster> Session::labels(const std::string& image) const {
    const auto p = labels_path(image);
    if (!fs::is_regular_file(p)) return std::nullopt;
    return read_indexed_png(p);
}

std::vector<int> Session::classifier_versions() const {
    std::vector<int> out;
    for (const auto& de : fs::directory_iterator(dir_ / "classifiers")) {
        const auto p = de.path();
        if (p.extension() != ".clf") continue;
        try {
            out.push_back(std::stoi(p.stem().string()));
        } catch (const std::exception&) {
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

int Session::save_classifier(const pixelclf::PixelClassifier& clf) {
    const auto versions = classifier_versions();
    const int next = versions.empty() ? 1 : versions.back() + 1;
    clf.save(dir_ / "classifiers" / (std::to_string(next) + ".clf"));
    return next;
}

pixelclf::PixelClassifier Session::load_classifier(int version) const {
    const auto p = dir_ / "classifiers" / (std::to_string(version) + ".clf");
    if (!fs::is_regular_file(p)) throw StoreError("no classifier version " + std::to_string(version));
    return pixelclf::PixelClassifier::load(p);
}

fs::path Session::prediction_path(const std::string& image) const { return dir_ / "predictions" / (image + ".png"); }
fs::path Session::probability_path(const std::string& image) const {
    return dir_ / "predictions" / (image + ".prob.fmap");
}

}  // namespace featpipe::store
