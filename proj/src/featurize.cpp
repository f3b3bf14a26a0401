#include <featpipe/featurize.hpp>
#include <featpipe/fmap.hpp>
#include <featpipe/hash.hpp>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace featpipe {

namespace fs = std::filesystem;

nlohmann::json BackendDescriptor::to_json() const {
    return {{"name", name},
            {"patch_size", patch_size},
            {"stride", stride},
            {"hidden_dim", hidden_dim},
            {"require_divisible", require_divisible},
            {"source", source},
            {"attention", attention}};
}

BackendDescriptor BackendDescriptor::from_json(const nlohmann::json& j) {
    BackendDescriptor d;
    d.name = j.at("name").get<std::string>();
    d.patch_size = j.at("patch_size").get<int>();
    d.stride = j.at("stride").get<int>();
    d.hidden_dim = j.at("hidden_dim").get<int>();
    d.require_divisible = j.value("require_divisible", false);
    d.source = j.value("source", std::string{"synthetic"});
    d.attention = j.value("attention", d.attention);
    return d;
}

namespace {

std::string shape_string(int h, int w, int c) {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

}  // namespace

PatchOutput featurize_patches(const FeaturizerBackend& backend, const Image& image) {
    const auto& d = backend.descriptor();
    if (image.empty()) throw std::invalid_argument("cannot featurize an empty image");
    if (image.height() < d.patch_size || image.width() < d.patch_size) {
        throw std::invalid_argument("image " + shape_string(image.height(), image.width(), image.channels()) +
                                    " is smaller than patch size " + std::to_string(d.patch_size));
    }
    if (d.require_divisible &&
        ((image.height() - d.patch_size) % d.stride != 0 || (image.width() - d.patch_size) % d.stride != 0)) {
        throw std::invalid_argument("image " + shape_string(image.height(), image.width(), image.channels()) +
                                    " does not tile with patch " + std::to_string(d.patch_size) + " stride " +
                                    std::to_string(d.stride) + "; conform it first");
    }
    PatchOutput out = backend.run(image);
    const int gh = d.grid_extent(image.height());
    const int gw = d.grid_extent(image.width());
    if (out.features.height() != gh || out.features.width() != gw || out.features.channels() != d.hidden_dim) {
        throw BackendError("backend '" + d.name + "' returned features " +
                           shape_string(out.features.height(), out.features.width(), out.features.channels()) +
                           ", descriptor expects " + shape_string(gh, gw, d.hidden_dim));
    }
    if (out.attention.height() != gh || out.attention.width() != gw || out.attention.channels() != 1) {
        throw BackendError("backend '" + d.name + "' returned attention " +
                           shape_string(out.attention.height(), out.attention.width(), out.attention.channels()) +
                           ", descriptor expects " + shape_string(gh, gw, 1));
    }
    double total = 0.0;
    for (float v : out.attention.data()) {
        if (!std::isfinite(v) || v < 0.0f) throw BackendError("backend '" + d.name + "' returned invalid attention");
        total += v;
    }
    if (total <= 0.0) {
        std::fill(out.attention.data().begin(), out.attention.data().end(),
                  static_cast<float>(1.0 / static_cast<double>(out.attention.size())));
    } else if (std::abs(total - 1.0) > 1e-6) {
        for (float& v : out.attention.data()) v = static_cast<float>(v / total);
    }
    return out;
}

SyntheticBackend::SyntheticBackend(SyntheticKind kind, int patch_size, int stride) : kind_(kind) {
    if (patch_size <= 0 || stride <= 0 || stride > patch_size) {
        throw std::invalid_argument("synthetic backend needs 0 < stride <= patch_size");
    }
    descriptor_.patch_size = patch_size;
    descriptor_.stride = stride;
    descriptor_.source = "synthetic";
    switch (kind) {
        case SyntheticKind::patch_mean:
            descriptor_.name = "synthetic:patch-mean";
            descriptor_.hidden_dim = 3;
            descriptor_.attention = "uniform";
            break;
        case SyntheticKind::patch_mean_center:
            descriptor_.name = "synthetic:patch-mean+center-attention";
            descriptor_.hidden_dim = 4;
            descriptor_.attention = "gaussian of distance to image centre, sigma = min(H,W)/4";
            break;
        case SyntheticKind::patch_mean_contrast:
            descriptor_.name = "synthetic:patch-mean+contrast-attention";
            descriptor_.hidden_dim = 3;
            descriptor_.attention = "squared distance of patch mean from median colour";
            break;
    }
}

PatchOutput SyntheticBackend::run(const Image& image) const {
    const int p = descriptor_.patch_size, s = descriptor_.stride;
    const int gh = descriptor_.grid_extent(image.height());
    const int gw = descriptor_.grid_extent(image.width());
    const int ic = image.channels();
    const int d = descriptor_.hidden_dim;
    PatchOutput out{FloatRaster(gh, gw, d), FloatRaster(gh, gw, 1)};

    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            std::array<double, 3> sum{};
            for (int y = gy * s; y < gy * s + p; ++y) {
                for (int x = gx * s; x < gx * s + p; ++x) {
                    for (int c = 0; c < 3; ++c) sum[c] += image(y, x, ic == 1 ? 0 : c);
                }
            }
            for (int c = 0; c < 3; ++c) out.features(gy, gx, c) = static_cast<float>(sum[c] / (p * p));
        }
    }

    if (kind_ == SyntheticKind::patch_mean) {
        std::fill(out.attention.data().begin(), out.attention.data().end(), 1.0f / static_cast<float>(gh * gw));
        return out;
    }
    if (kind_ == SyntheticKind::patch_mean_center) {
        const double cy = (image.height() - 1) / 2.0, cx = (image.width() - 1) / 2.0;
        const double sigma = std::min(image.height(), image.width()) / 4.0;
        for (int gy = 0; gy < gh; ++gy) {
            for (int gx = 0; gx < gw; ++gx) {
                const double py = gy * s + (p - 1) / 2.0, px = gx * s + (p - 1) / 2.0;
                const double r2 = (py - cy) * (py - cy) + (px - cx) * (px - cx);
                const double g = std::exp(-r2 / (2.0 * sigma * sigma));
                out.attention(gy, gx) = static_cast<float>(g);
                out.features(gy, gx, 3) = static_cast<float>(255.0 * g);
            }
        }
        return out;
    }
    // Contrast attention relative to the per-channel median colour.
    std::array<double, 3> median{};
    std::vector<std::uint8_t> values(image.pixels());
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < image.pixels(); ++i) values[i] = image.data()[i * ic + (ic == 1 ? 0 : c)];
        auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
        std::nth_element(values.begin(), mid, values.end());
        median[c] = *mid;
    }
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double diff = out.features(gy, gx, c) - median[c];
                d2 += diff * diff;
            }
            out.attention(gy, gx) = static_cast<float>(d2 + 1e-6);
        }
    }
    return out;
}

std::string image_hash(const Image& image) {
    Sha256 h;
    h.update(shape_string(image.height(), image.width(), image.channels()) + ":");
    h.update(std::span<const std::uint8_t>(image.data()));
    return h.hex();
}

PrecomputedBackend::PrecomputedBackend(fs::path archive, BackendDescriptor descriptor)
    : archive_(std::move(archive)), descriptor_(std::move(descriptor)) {
    if (!fs::exists(archive_)) throw BackendError("precomputed archive '" + archive_.string() + "' not found");
    descriptor_.source = "precomputed";
}

PrecomputedBackend::PrecomputedBackend(fs::path archive) : archive_(std::move(archive)) {
    if (!fs::exists(archive_)) throw BackendError("precomputed archive '" + archive_.string() + "' not found");
    fs::path probe = archive_;
    if (fs::is_directory(archive_)) {
        probe.clear();
        for (const auto& e : fs::directory_iterator(archive_)) {
            if (e.path().extension() == ".fmap" && e.path().stem().extension() != ".attn") {
                probe = e.path();
                break;
            }
        }
        if (probe.empty()) throw BackendError("precomputed archive '" + archive_.string() + "' holds no .fmap files");
    }
    const auto rec = read_fmap(probe);
    if (rec.provenance && rec.provenance->contains("backend")) {
        descriptor_ = BackendDescriptor::from_json(rec.provenance->at("backend"));
    } else {
        throw BackendError("precomputed archive '" + probe.string() +
                           "' carries no backend descriptor; pass one explicitly");
    }
    descriptor_.source = "precomputed";
}

PatchOutput PrecomputedBackend::run(const Image& image) const {
    fs::path feat = archive_;
    if (fs::is_directory(archive_)) feat = archive_ / (image_hash(image) + ".fmap");
    if (!fs::exists(feat)) throw BackendError("no precomputed features for image at '" + feat.string() + "'");
    auto rec = read_fmap(feat);
    fs::path attn = feat;
    attn.replace_extension(".attn.fmap");
    PatchOutput out{std::move(rec.data), {}};
    if (fs::exists(attn)) {
        out.attention = read_fmap(attn).data;
    } else {
        out.attention = FloatRaster(out.features.height(), out.features.width(), 1,
                                    1.0f / static_cast<float>(std::max<std::size_t>(1, out.features.pixels())));
    }
    return out;
}

CallbackBackend::CallbackBackend(BackendDescriptor descriptor, Fn fn, bool concurrent_safe)
    : descriptor_(std::move(descriptor)), fn_(std::move(fn)), concurrent_safe_(concurrent_safe) {
    if (!fn_) throw std::invalid_argument("callback backend needs a callable");
}

std::unique_ptr<FeaturizerBackend> make_backend(const std::string& spec, int patch_size, int stride) {
    const auto colon = spec.find(':');
    const auto source = spec.substr(0, colon);
    const auto arg = colon == std::string::npos ? std::string{} : spec.substr(colon + 1);
    if (source == "synthetic") {
        if (arg == "patch-mean") return std::make_unique<SyntheticBackend>(SyntheticKind::patch_mean, patch_size, stride);
        if (arg == "patch-mean+center-attention") {
            return std::make_unique<SyntheticBackend>(SyntheticKind::patch_mean_center, patch_size, stride);
        }
        if (arg == "patch-mean+contrast-attention") {
            return std::make_unique<SyntheticBackend>(SyntheticKind::patch_mean_contrast, patch_size, stride);
        }
        throw std::invalid_argument("unknown synthetic backend '" + arg + "'");
    }
    if (source == "precomputed") return std::make_unique<PrecomputedBackend>(arg);
    if (source == "external" || source == "onnx") {
        throw BackendError("cannot load model '" + arg +
                           "': no external model runtime is linked; use the Python package's onnx backend");
    }
    throw std::invalid_argument("unknown backend spec '" + spec + "'");
}

FloatRaster nearest_resize(const FloatRaster& grid, int height, int width) {
    if (grid.empty()) throw std::invalid_argument("cannot resize an empty patch grid");
    const int gh = grid.height(), gw = grid.width(), d = grid.channels();
    FloatRaster out(height, width, d);
    std::vector<int> xmap(width);
    for (int x = 0; x < width; ++x) xmap[x] = static_cast<int>(static_cast<long long>(x) * gw / width);
    for (int y = 0; y < height; ++y) {
        const int gy = static_cast<int>(static_cast<long long>(y) * gh / height);
        for (int x = 0; x < width; ++x) std::copy_n(grid.pixel(gy, xmap[x]).data(), d, out.pixel(y, x).data());
    }
    return out;
}

std::string to_string(UpsampleMode m) { return m == UpsampleMode::batched ? "batched" : "sequential"; }

UpsampleMode upsample_mode_from_string(const std::string& s) {
    if (s == "batched") return UpsampleMode::batched;
    if (s == "sequential") return UpsampleMode::sequential;
    throw std::invalid_argument("unknown upsample mode '" + s + "' (expected batched|sequential)");
}

namespace {

struct TransformTerm {
    FloatRaster features;
    FloatRaster attention;
};

class BufferMeter {
public:
    void add(std::size_t bytes) {
        const auto now = current_.fetch_add(bytes) + bytes;
        auto prev = peak_.load();
        while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
        }
    }
    void release(std::size_t bytes) { current_.fetch_sub(bytes); }
    std::size_t peak() const { return peak_.load(); }

private:
    std::atomic<std::size_t> current_{0};
    std::atomic<std::size_t> peak_{0};
};

std::size_t term_bytes(const TransformTerm& t) {
    return (t.features.size() + t.attention.size()) * sizeof(float);
}

TransformTerm evaluate_transform(const FeaturizerBackend& backend, const Image& image, const TransformSpec& t,
                                 bool l2_normalize) {
    const Image transformed = apply(t, image);
    PatchOutput po = featurize_patches(backend, transformed);
    const auto inverse = invert(t);
    TransformTerm term{apply(inverse, nearest_resize(po.features, transformed.height(), transformed.width())),
                       apply(inverse, nearest_resize(po.attention, transformed.height(), transformed.width()))};
    if (term.features.height() != image.height() || term.features.width() != image.width()) {
        throw std::logic_error("inverse transform " + inverse.to_string() + " did not restore the image frame");
    }
    if (l2_normalize) {
        const int d = term.features.channels();
        for (std::size_t i = 0; i < term.features.pixels(); ++i) {
            float* v = term.features.data().data() + i * d;
            double n2 = 0.0;
            for (int c = 0; c < d; ++c) n2 += static_cast<double>(v[c]) * v[c];
            if (n2 > 0.0) {
                const double inv = 1.0 / std::sqrt(n2);
                for (int c = 0; c < d; ++c) v[c] = static_cast<float>(v[c] * inv);
            }
        }
    }
    return term;
}

void accumulate(std::vector<double>& acc, const FloatRaster& term) {
    const auto& src = term.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
}

}  // namespace

UpsampleResult upsample(const FeaturizerBackend& backend, const Image& image, const TransformSet& set,
                        const UpsampleOptions& options) {
    if (set.size() == 0) throw std::invalid_argument("transform set is empty");
    if (image.empty()) throw std::invalid_argument("cannot upsample an empty image");
    const auto& desc = backend.descriptor();
    const int h = image.height(), w = image.width(), d = desc.hidden_dim;
    const auto n = set.size();

    BufferMeter meter;
    std::vector<double> acc_f(static_cast<std::size_t>(h) * w * d, 0.0);
    std::vector<double> acc_a(static_cast<std::size_t>(h) * w, 0.0);
    meter.add((acc_f.size() + acc_a.size()) * sizeof(double));

    if (options.mode == UpsampleMode::sequential) {
        for (const auto& t : set.transforms()) {
            auto term = evaluate_transform(backend, image, t, options.l2_normalize);
            meter.add(term_bytes(term));
            accumulate(acc_f, term.features);
            accumulate(acc_a, term.attention);
            meter.release(term_bytes(term));
        }
    } else {
        std::vector<std::optional<TransformTerm>> terms(n);
        const int workers =
            backend.concurrent_safe() ? std::clamp(options.workers, 1, static_cast<int>(n)) : 1;
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        auto worker = [&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    terms[i] = evaluate_transform(backend, image, set[i], options.l2_normalize);
                    meter.add(term_bytes(*terms[i]));
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        };
        if (workers == 1) {
            worker();
        } else {
            std::vector<std::jthread> pool;
            for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        }
        if (failure) std::rethrow_exception(failure);
        // Canonical-order reduction keeps the result schedule independent.
        for (auto& term : terms) {
            accumulate(acc_f, term->features);
            accumulate(acc_a, term->attention);
        }
    }

    UpsampleResult result;
    result.features.data = FloatRaster(h, w, d);
    result.attention.data = FloatRaster(h, w, 1);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < acc_f.size(); ++i) {
        const double v = n == 1 ? acc_f[i] : acc_f[i] * inv_n;
        if (!std::isfinite(v)) throw BackendError("non-finite feature value produced by backend '" + desc.name + "'");
        result.features.data.data()[i] = static_cast<float>(v);
    }
    for (std::size_t i = 0; i < acc_a.size(); ++i) {
        result.attention.data.data()[i] = static_cast<float>(n == 1 ? acc_a[i] : acc_a[i] * inv_n);
    }

    nlohmann::json prov = {{"backend", desc.to_json()},
                           {"transform_set", set.to_json()},
                           {"transform_count", n},
                           {"image_id", options.image_id},
                           {"created", utc_timestamp()},
                           {"l2_normalize", options.l2_normalize},
                           {"mode", to_string(options.mode)}};
    result.features.provenance = prov;
    result.attention.provenance = prov;
    result.stats.transforms = n;
    result.stats.peak_buffer_bytes = meter.peak();
    return result;
}

PcaResult pca_rgb(const FeatureMap& fm, int components) {
    if (components != 3) throw std::invalid_argument("pca_rgb produces exactly 3 components");
    const int d = fm.data.channels();
    if (d < 3) throw std::invalid_argument("pca_rgb needs at least 3 feature dimensions, got " + std::to_string(d));
    const auto n = fm.data.pixels();
    if (n == 0) throw std::invalid_argument("pca_rgb on an empty feature map");

    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
        fm.data.data().data(), static_cast<Eigen::Index>(n), d);
    const Eigen::MatrixXd xd = x.cast<double>();
    const Eigen::RowVectorXd mean = xd.colwise().mean();
    const Eigen::MatrixXd centered = xd.rowwise() - mean;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);

    PcaResult out;
    out.rgb = Image(fm.data.height(), fm.data.width(), 3, 128);
    const double total_var = cov.trace();
    if (!(total_var > 1e-12)) {
        spdlog::warn("pca_rgb: feature map has zero variance; emitting uniform gray");
        out.degenerate = true;
        return out;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    // Eigen sorts ascending; take the three largest.
    for (int k = 0; k < 3; ++k) {
        const Eigen::Index col = d - 1 - k;
        const double lambda = std::max(0.0, solver.eigenvalues()(col));
        out.variances[k] = lambda;
        if (lambda <= 1e-9 * std::max(1.0, solver.eigenvalues()(d - 1))) continue;  // flat channel
        Eigen::VectorXd axis = solver.eigenvectors().col(col);
        Eigen::Index arg = 0;
        axis.cwiseAbs().maxCoeff(&arg);
        if (axis(arg) < 0) axis = -axis;
        const Eigen::VectorXd proj = centered * axis;
        const double lo = proj.minCoeff(), hi = proj.maxCoeff();
        if (hi - lo <= 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = (proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo);
            out.rgb.data()[i * 3 + k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return out;
}

KeypointMatch keypoint_query(const FeatureMap& query, int x, int y, const FeatureMap& target) {
    const int d = query.data.channels();
    if (d != target.data.channels()) {
        throw std::invalid_argument("feature dimension mismatch: query " + std::to_string(d) + ", target " +
                                    std::to_string(target.data.channels()));
    }
    if (x < 0 || y < 0 || x >= query.data.width() || y >= query.data.height()) {
        throw std::out_of_range("query point outside the query feature map");
    }
    const auto q = query.data.pixel(y, x);
    double qn = 0.0;
    for (float v : q) qn += static_cast<double>(v) * v;
    qn = std::sqrt(qn);
    if (qn == 0.0) throw std::invalid_argument("degenerate query feature");

    KeypointMatch m;
    m.similarity = FloatRaster(target.data.height(), target.data.width(), 1);
    double best = -std::numeric_limits<double>::infinity();
    for (int ty = 0; ty < target.data.height(); ++ty) {
        for (int tx = 0; tx < target.data.width(); ++tx) {
            const auto t = target.data.pixel(ty, tx);
            double dot = 0.0, tn = 0.0;
            for (int c = 0; c < d; ++c) {
                dot += static_cast<double>(q[c]) * t[c];
                tn += static_cast<double>(t[c]) * t[c];
            }
            const double sim = tn > 0.0 ? dot / (qn * std::sqrt(tn)) : 0.0;
            m.similarity(ty, tx) = static_cast<float>(sim);
            if (sim > best) {
                best = sim;
                m.x = tx;
                m.y = ty;
            }
        }
    }
    m.score = static_cast<float>(best);
    return m;
}

}  // namespace featpipe
