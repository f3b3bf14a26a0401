#include <featpipe/pixelclf.hpp>

#include <featpipe/hash.hpp>
#include <featpipe/io.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <numeric>
#include <random>
#include <thread>

namespace featpipe::pixelclf {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'C', 'L'};
constexpr std::uint32_t kArchiveVersion = 1;

using Plane = std::vector<double>;

Plane band_plane(const Image& img, int band, bool luma) {
    const int h = img.height(), w = img.width();
    Plane out(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v;
            if (luma && img.channels() >= 3) {
                v = 0.299 * img(y, x, 0) + 0.587 * img(y, x, 1) + 0.114 * img(y, x, 2);
            } else {
                v = img(y, x, band);
            }
            out[static_cast<std::size_t>(y) * w + x] = v;
        }
    }
    return out;
}

// 3x3 stencil with reflective boundary. Stencils are written as sums of
// differences so a constant input gives exactly zero.
template <typename F>
Plane stencil(const Plane& p, int h, int w, F&& f) {
    Plane out(p.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            auto at = [&](int dy, int dx) {
                return p[static_cast<std::size_t>(reflect_index(y + dy, h)) * w + reflect_index(x + dx, w)];
            };
            out[static_cast<std::size_t>(y) * w + x] = f(at);
        }
    }
    return out;
}

Plane laplacian(const Plane& p, int h, int w) {
    return stencil(p, h, w, [](auto at) {
        const double c = at(0, 0);
        return (at(-1, 0) - c) + (at(1, 0) - c) + (at(0, -1) - c) + (at(0, 1) - c); });
}

void hessian_eigen(const Plane& p, int h, int w, Plane& lo, Plane& hi) {
    const Plane xx = stencil(p, h, w, [](auto at) { return (at(0, 1) - at(0, 0)) + (at(0, -1) - at(0, 0)); });
    const Plane yy = stencil(p, h, w, [](auto at) { return (at(1, 0) - at(0, 0)) + (at(-1, 0) - at(0, 0)); });
    const Plane xy = stencil(p, h, w, [](auto at) { return 0.25 * ((at(1, 1) - at(1, -1)) - (at(-1, 1) - at(-1, -1))); });
    lo.resize(p.size());
    hi.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (xx[i] + yy[i]);
        const double r = std::hypot(0.5 * (xx[i] - yy[i]), xy[i]);
        lo[i] = m - r;
        hi[i] = m + r;
    }
}

std::string sigma_label(double s) {
    std::string t = nlohmann::json(s).dump();
    return t;
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.insert(out.end(), buf, buf + sizeof(U));  // little-endian hosts only; checked at load
}

struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    template <typename U>
    U get() {
        if (pos + sizeof(U) > bytes.size()) throw PixelClfError("classifier archive truncated");
        U v;
        std::memcpy(&v, bytes.data() + pos, sizeof(U));
        pos += sizeof(U);
        return v;
    }
};

Eigen::MatrixXd raster_rows(const FloatRaster& f) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(f.pixels()), f.channels());
    for (std::size_t i = 0; i < f.pixels(); ++i) {
        for (int c = 0; c < f.channels(); ++c) x(static_cast<Eigen::Index>(i), c) = f.data()[i * f.channels() + c];
    }
    return x;
}

int argmax_row(const Eigen::MatrixXd& p, Eigen::Index row) {
    int best = 0;
    for (int k = 1; k < p.cols(); ++k) {
        if (p(row, k) > p(row, best)) best = k;
    }
    return best;
}

// ---- random forest --------------------------------------------------------

struct ForestData {
    const Eigen::MatrixXd& x;
    const std::vector<int>& y;  // class index
    int classes;
};

Tree grow_tree(const ForestData& data, std::uint64_t seed, int max_features) {
    std::mt19937_64 rng(seed);
    const auto n = static_cast<std::size_t>(data.x.rows());
    const int d = static_cast<int>(data.x.cols());
    std::vector<std::size_t> boot(n);
    for (auto& b : boot) b = static_cast<std::size_t>(rng() % n);

    Tree tree;
    struct Work {
        int node;
        std::vector<std::size_t> rows;
    };
    std::vector<Work> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, std::move(boot)});
    std::vector<int> features(d);
    std::vector<std::pair<double, int>> column;

    while (!stack.empty()) {
        Work work = std::move(stack.back());
        stack.pop_back();
        const auto& rows = work.rows;
        std::vector<double> counts(data.classes, 0.0);
        for (auto r : rows) counts[data.y[r]] += 1.0;
        const bool pure = std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }) <= 1;

        int best_feature = -1;
        double best_threshold = 0.0, best_score = -1.0;
        if (!pure && rows.size() >= 2) {
            std::iota(features.begin(), features.end(), 0);
            for (int i = d - 1; i > 0; --i) std::swap(features[i], features[rng() % static_cast<std::uint64_t>(i + 1)]);
            for (int fi = 0; fi < d; ++fi) {
                // Keep drawing features past max_features until one splits.
                if (fi >= max_features && best_feature >= 0) break;
                const int f = features[fi];
                column.clear();
                for (auto r : rows) column.emplace_back(data.x(static_cast<Eigen::Index>(r), f), data.y[r]);
                std::sort(column.begin(), column.end());
                std::vector<double> left(data.classes, 0.0), right = counts;
                const double total = static_cast<double>(rows.size());
                for (std::size_t i = 0; i + 1 < column.size(); ++i) {
                    left[column[i].second] += 1.0;
                    right[column[i].second] -= 1.0;
                    if (!(column[i].first < column[i + 1].first)) continue;
                    const double nl = static_cast<double>(i + 1), nr = total - nl;
                    double sl = 0.0, sr = 0.0;
                    for (int k = 0; k < data.classes; ++k) {
                        sl += left[k] * left[k];
                        sr += right[k] * right[k];
                    }
                    // Maximizing this minimizes the weighted Gini impurity.
                    const double score = sl / nl + sr / nr;
                    if (score > best_score) {
                        best_score = score;
                        best_feature = f;
                        best_threshold = 0.5 * (column[i].first + column[i + 1].first);
                        if (!(best_threshold < column[i + 1].first)) best_threshold = column[i].first;
                    }
                }
            }
        }

        if (best_feature < 0) {
            const double total = static_cast<double>(rows.size());
            for (auto& c : counts) c /= total;
            tree.nodes[work.node].value = std::move(counts);
            continue;
        }
        std::vector<std::size_t> lrows, rrows;
        for (auto r : rows) {
            (data.x(static_cast<Eigen::Index>(r), best_feature) <= best_threshold ? lrows : rrows).push_back(r);
        }
        const int l = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        auto& node = tree.nodes[work.node];
        node.feature = best_feature;
        node.threshold = best_threshold;
        node.left = l;
        node.right = l + 1;
        stack.push_back({l + 1, std::move(rrows)});
        stack.push_back({l, std::move(lrows)});
    }
    return tree;
}

const std::vector<double>& tree_leaf(const Tree& t, const Eigen::MatrixXd& x, Eigen::Index row) {
    int i = 0;
    while (t.nodes[i].feature >= 0) {
        const auto& n = t.nodes[i];
        i = x(row, n.feature) <= n.threshold ? n.left : n.right;
    }
    return t.nodes[i].value;
}

std::uint64_t tree_seed(std::uint64_t seed, int t) {
    // splitmix64 step so neighbouring seeds give unrelated streams
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(t + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

// ---- classical features ---------------------------------------------------

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0)) throw std::invalid_argument("gaussian sigma must be > 0, got " + std::to_string(sigma));
    const int radius = std::max(1, static_cast<int>(4.0 * sigma + 0.5));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    return k;
}

// Accumulates weighted offsets from the centre value (the kernel sums to 1),
// which keeps constant regions exactly constant across different sigmas.
std::vector<double> gaussian_blur(const std::vector<double>& plane, int height, int width, double sigma) {
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    Plane tmp(plane.size()), out(plane.size());
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double c = plane[static_cast<std::size_t>(y) * width + x];
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * (plane[static_cast<std::size_t>(y) * width + reflect_index(x + i, width)] - c);
            tmp[static_cast<std::size_t>(y) * width + x] = c + acc;
        }
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double c = tmp[static_cast<std::size_t>(y) * width + x];
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * (tmp[static_cast<std::size_t>(reflect_index(y + i, height)) * width + x] - c);
            out[static_cast<std::size_t>(y) * width + x] = c + acc;
        }
    }
    return out;
}

std::vector<double> sobel_magnitude(const std::vector<double>& plane, int height, int width) {
    return stencil(plane, height, width, [](auto at) {
        const double gx = (at(-1, 1) - at(-1, -1)) + 2.0 * (at(0, 1) - at(0, -1)) + (at(1, 1) - at(1, -1));
        const double gy = (at(1, -1) - at(-1, -1)) + 2.0 * (at(1, 0) - at(-1, 0)) + (at(1, 1) - at(-1, 1));
        return std::sqrt(gx * gx + gy * gy);
    });
}

int ClassicalRecipe::channels_per_band() const {
    const int s = static_cast<int>(sigmas.size());
    return 1 + 5 * s + std::max(0, s - 1);
}

std::vector<std::string> ClassicalRecipe::channel_names(int image_channels) const {
    const int bands = per_channel ? image_channels : 1;
    std::vector<std::string> names;
    for (int b = 0; b < bands; ++b) {
        const std::string prefix = per_channel ? "c" + std::to_string(b) + ":" : "";
        names.push_back(prefix + "raw");
        for (double s : sigmas) {
            const auto sl = sigma_label(s);
            for (const char* kind : {"gaussian", "sobel", "log", "hessian_min", "hessian_max"}) {
                names.push_back(prefix + kind + "(s=" + sl + ")");
            }
        }
        for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
            names.push_back(prefix + "dog(s=" + sigma_label(sigmas[i]) + "," + sigma_label(sigmas[i + 1]) + ")");
        }
    }
    return names;
}

nlohmann::json ClassicalRecipe::to_json() const {
    return {{"sigmas", sigmas}, {"mode", per_channel ? "per_channel" : "gray"}};
}

ClassicalRecipe ClassicalRecipe::from_json(const nlohmann::json& j) {
    ClassicalRecipe r;
    r.sigmas = j.at("sigmas").get<std::vector<double>>();
    const auto mode = j.value("mode", std::string("gray"));
    if (mode != "gray" && mode != "per_channel") throw std::invalid_argument("classical mode must be gray or per_channel");
    r.per_channel = mode == "per_channel";
    return r;
}

ClassicalFeatureStack classical_features(const Image& image, const ClassicalRecipe& recipe) {
    if (recipe.sigmas.empty()) throw std::invalid_argument("classical recipe needs at least one sigma");
    for (double s : recipe.sigmas) {
        if (!(s > 0)) throw std::invalid_argument("classical sigma must be > 0, got " + std::to_string(s));
    }
    if (image.height() == 0 || image.width() == 0) throw std::invalid_argument("classical_features: empty image");
    const int h = image.height(), w = image.width();
    const int bands = recipe.per_channel ? image.channels() : 1;
    const int per_band = recipe.channels_per_band();
    ClassicalFeatureStack out{FloatRaster(h, w, bands * per_band), recipe, recipe.channel_names(image.channels())};
    const int total = bands * per_band;
    for (int b = 0; b < bands; ++b) {
        int ch = b * per_band;
        auto emit = [&](const Plane& p) {
            for (std::size_t i = 0; i < p.size(); ++i) out.data.data()[i * total + ch] = static_cast<float>(p[i]);
            ++ch;
        };
        const Plane raw = band_plane(image, b, !recipe.per_channel);
        emit(raw);
        std::vector<Plane> blurred;
        for (double s : recipe.sigmas) {
            Plane g = gaussian_blur(raw, h, w, s);
            emit(g);
            emit(sobel_magnitude(g, h, w));
            emit(laplacian(g, h, w));
            Plane lo, hi;
            hessian_eigen(g, h, w, lo, hi);
            emit(lo);
            emit(hi);
            blurred.push_back(std::move(g));
        }
        for (std::size_t i = 0; i + 1 < blurred.size(); ++i) {
            Plane dog(blurred[i].size());
            for (std::size_t p = 0; p < dog.size(); ++p) dog[p] = blurred[i][p] - blurred[i + 1][p];
            emit(dog);
        }
    }
    return out;
}

// ---- recipes --------------------------------------------------------------

std::string to_string(FeatureSource s) {
    switch (s) {
        case FeatureSource::deep: return "deep";
        case FeatureSource::classical: return "classical";
        case FeatureSource::hybrid: return "hybrid";
    }
    return "?";
}

FeatureSource feature_source_from_string(const std::string& s) {
    if (s == "deep") return FeatureSource::deep;
    if (s == "classical") return FeatureSource::classical;
    if (s == "hybrid") return FeatureSource::hybrid;
    throw std::invalid_argument("unknown feature source '" + s + "' (expected deep, classical or hybrid)");
}

std::string FeatureRecipe::channel_name(int i) const {
    if (i < deep_dims) return "deep[" + std::to_string(i) + "]";
    const int c = i - deep_dims;
    if (c < static_cast<int>(classical_names.size())) return "classical:" + classical_names[c];
    return "channel[" + std::to_string(i) + "]";
}

nlohmann::json FeatureRecipe::to_json() const {
    return {{"source", to_string(source)},
            {"deep_dims", deep_dims},
            {"deep", deep},
            {"classical", classical ? classical->to_json() : nlohmann::json(nullptr)},
            {"classical_dims", classical_dims},
            {"classical_names", classical_names}};
}

FeatureRecipe FeatureRecipe::from_json(const nlohmann::json& j) {
    FeatureRecipe r;
    r.source = feature_source_from_string(j.at("source").get<std::string>());
    r.deep_dims = j.value("deep_dims", 0);
    r.deep = j.value("deep", nlohmann::json(nullptr));
    if (j.contains("classical") && !j["classical"].is_null()) r.classical = ClassicalRecipe::from_json(j["classical"]);
    r.classical_dims = j.value("classical_dims", 0);
    r.classical_names = j.value("classical_names", std::vector<std::string>{});
    return r;
}

std::string FeatureRecipe::checksum() const { return sha256_hex(to_json().dump()); }

FloatRaster hybrid_stack(const FloatRaster& deep, const FloatRaster& classical) {
    if (deep.height() != classical.height() || deep.width() != classical.width()) {
        throw std::invalid_argument("hybrid_stack: deep features are " + std::to_string(deep.height()) + "x" +
                                    std::to_string(deep.width()) + " but classical features are " +
                                    std::to_string(classical.height()) + "x" + std::to_string(classical.width()));
    }
    const int d = deep.channels(), dc = classical.channels();
    FloatRaster out(deep.height(), deep.width(), d + dc);
    for (std::size_t i = 0; i < deep.pixels(); ++i) {
        std::copy_n(deep.data().data() + i * d, d, out.data().data() + i * (d + dc));
        std::copy_n(classical.data().data() + i * dc, dc, out.data().data() + i * (d + dc) + d);
    }
    return out;
}

Samples collect_samples(const FloatRaster& features, const LabelRaster& labels, const FeatureRecipe* recipe) {
    if (features.height() != labels.height() || features.width() != labels.width()) {
        throw std::invalid_argument("labels are " + std::to_string(labels.height()) + "x" +
                                    std::to_string(labels.width()) + " but features are " +
                                    std::to_string(features.height()) + "x" + std::to_string(features.width()));
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.pixels(); ++i) {
        if (labels.data()[i] != 0) idx.push_back(i);
    }
    const int d = features.channels();
    Samples s{Eigen::MatrixXd(static_cast<Eigen::Index>(idx.size()), d), {}};
    s.y.reserve(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (int c = 0; c < d; ++c) {
            const float v = features.data()[idx[r] * d + c];
            if (!std::isfinite(v)) {
                const auto name = recipe ? recipe->channel_name(c) : "channel[" + std::to_string(c) + "]";
                throw PixelClfError("non-finite feature in " + name + " at pixel (" +
                                    std::to_string(idx[r] / features.width()) + ", " +
                                    std::to_string(idx[r] % features.width()) + ")");
            }
            s.x(static_cast<Eigen::Index>(r), c) = v;
        }
        s.y.push_back(labels.data()[idx[r]]);
    }
    return s;
}

void append_samples(Samples& into, const Samples& more) {
    if (into.x.rows() == 0) {
        into = more;
        return;
    }
    if (more.x.rows() == 0) return;
    if (into.x.cols() != more.x.cols()) throw std::invalid_argument("append_samples: feature dimensions differ");
    Eigen::MatrixXd x(into.x.rows() + more.x.rows(), into.x.cols());
    x << into.x, more.x;
    into.x = std::move(x);
    into.y.insert(into.y.end(), more.y.begin(), more.y.end());
}

std::string to_string(ClassifierKind k) { return k == ClassifierKind::logistic ? "logistic" : "random_forest"; }

ClassifierKind classifier_kind_from_string(const std::string& s) {
    if (s == "logistic") return ClassifierKind::logistic;
    if (s == "random_forest" || s == "forest") return ClassifierKind::random_forest;
    throw std::invalid_argument("unknown classifier kind '" + s + "' (expected logistic or random_forest)");
}

// ---- logistic regression --------------------------------------------------

LogisticObjective::LogisticObjective(Eigen::MatrixXd z, std::vector<int> y_index, int classes, double c_reg)
    : z_(std::move(z)), y_(std::move(y_index)), classes_(classes), c_reg_(c_reg) {
    if (!(c_reg > 0)) throw std::invalid_argument("regularization C must be > 0");
}

double LogisticObjective::value_and_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
    const auto n = z_.rows();
    const auto d = z_.cols();
    const auto k = classes_;
    // theta is K rows of [w, b] stored contiguously.
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> p(theta.data(), k, d + 1);
    const Eigen::MatrixXd w = p.leftCols(d);
    const Eigen::VectorXd b = p.col(d);
    Eigen::MatrixXd logits = z_ * w.transpose();
    logits.rowwise() += b.transpose();
    double loss = 0.0;
    Eigen::MatrixXd resid(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = logits.row(i).maxCoeff();
        double s = 0.0;
        for (int c = 0; c < k; ++c) s += std::exp(logits(i, c) - m);
        const double lse = m + std::log(s);
        loss += lse - logits(i, y_[i]);
        for (int c = 0; c < k; ++c) resid(i, c) = std::exp(logits(i, c) - lse);
        resid(i, y_[i]) -= 1.0;
    }
    const double nn = static_cast<double>(n);
    const double reg = 1.0 / (c_reg_ * nn);
    loss = loss / nn + 0.5 * reg * w.squaredNorm();
    grad.resize(theta.size());
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> g(grad.data(), k, d + 1);
    g.leftCols(d) = resid.transpose() * z_ / nn + reg * w;
    g.col(d) = resid.colwise().sum().transpose() / nn;
    return loss;
}

OptimizerResult minimize_lbfgs(const LogisticObjective& objective, Eigen::VectorXd theta, int max_iter, double tol,
                               int memory) {
    OptimizerResult out;
    Eigen::VectorXd g, g_new;
    double f = objective.value_and_gradient(theta, g);
    out.loss_history.push_back(f);
    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;
    int it = 0;
    for (; it < max_iter; ++it) {
        if (g.norm() <= tol) {
            out.converged = true;
            break;
        }
        // Two-loop recursion.
        Eigen::VectorXd q = g;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= alpha[i] * y_hist[i];
        }
        if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(q);
            q += (alpha[i] - beta) * s_hist[i];
        }
        Eigen::VectorXd dir = -q;
        double slope = g.dot(dir);
        if (!(slope < 0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -g;
            slope = -g.squaredNorm();
        }
        double step = s_hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
        bool accepted = false;
        double f_new = f;
        Eigen::VectorXd theta_new;
        for (int bt = 0; bt < 60; ++bt) {
            theta_new = theta + step * dir;
            f_new = objective.value_and_gradient(theta_new, g_new);
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (!s_hist.empty()) {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            break;  // no representable descent left
        }
        Eigen::VectorXd s = theta_new - theta, y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * y.squaredNorm()) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        theta = std::move(theta_new);
        g = g_new;
        f = f_new;
        out.loss_history.push_back(f);
    }
    out.converged = out.converged || g.norm() <= tol;
    out.iterations = it;
    out.grad_norm = g.norm();
    out.theta = std::move(theta);
    return out;
}

// ---- classifier -----------------------------------------------------------

PixelClassifier train(const Samples& samples, const FeatureRecipe& recipe, const TrainOptions& options) {
    const auto n = samples.x.rows();
    const auto d = samples.x.cols();
    if (static_cast<std::size_t>(n) != samples.y.size()) throw std::invalid_argument("train: row/label count mismatch");
    std::vector<int> classes(samples.y.begin(), samples.y.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) throw PixelClfError("need ≥2 classes");
    if (recipe.dims() != 0 && recipe.dims() != d) {
        throw std::invalid_argument("train: recipe declares " + std::to_string(recipe.dims()) +
                                    " channels but samples have " + std::to_string(d));
    }
    for (Eigen::Index c = 0; c < d; ++c) {
        if (!samples.x.col(c).allFinite()) {
            throw PixelClfError("non-finite feature in " + recipe.channel_name(static_cast<int>(c)));
        }
    }
    std::vector<int> yi(samples.y.size());
    for (std::size_t i = 0; i < yi.size(); ++i) {
        yi[i] = static_cast<int>(std::lower_bound(classes.begin(), classes.end(), samples.y[i]) - classes.begin());
    }
    const int k = static_cast<int>(classes.size());

    PixelClassifier clf;
    clf.kind_ = options.kind;
    clf.recipe_ = recipe;
    clf.classes_ = classes;
    clf.seed_ = options.seed;
    clf.dims_ = static_cast<int>(d);

    if (options.kind == ClassifierKind::logistic) {
        clf.mean_ = samples.x.colwise().mean().transpose();
        clf.scale_ = Eigen::VectorXd::Zero(d);
        for (Eigen::Index c = 0; c < d; ++c) {
            const double var = (samples.x.col(c).array() - clf.mean_[c]).square().mean();
            const double sd = std::sqrt(var);
            // Zero-variance channels carry no information; standardize them to 0.
            if (sd > 1e-10 * std::max(1.0, std::abs(clf.mean_[c]))) clf.scale_[c] = 1.0 / sd;
        }
        Eigen::MatrixXd z = (samples.x.rowwise() - clf.mean_.transpose()) * clf.scale_.asDiagonal();
        LogisticObjective obj(std::move(z), yi, k, options.c_reg);
        auto res = minimize_lbfgs(obj, Eigen::VectorXd::Zero(obj.parameters()), options.max_iter, options.tol);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> p(res.theta.data(), k,
                                                                                                   d + 1);
        clf.weights_ = p.leftCols(d);
        clf.bias_ = p.col(d);
        clf.hyper_ = {{"c_reg", options.c_reg}, {"max_iter", options.max_iter}, {"tol", options.tol}};
        clf.training_ = {{"rows", n},
                         {"iterations", res.iterations},
                         {"grad_norm", res.grad_norm},
                         {"converged", res.converged},
                         {"loss_history", res.loss_history}};
        if (!res.converged) {
            spdlog::warn("logistic regression stopped after {} iterations with gradient norm {:.3g}", res.iterations,
                         res.grad_norm);
        }
        return clf;
    }

    // Canonical row order makes the forest independent of input row order.
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        for (Eigen::Index c = 0; c < d; ++c) {
            if (samples.x(a, c) != samples.x(b, c)) return samples.x(a, c) < samples.x(b, c);
        }
        return yi[a] < yi[b];
    });
    Eigen::MatrixXd xs(n, d);
    std::vector<int> ys(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        xs.row(i) = samples.x.row(order[i]);
        ys[i] = yi[order[i]];
    }
    const int max_features = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(d)))));
    if (options.trees < 1) throw std::invalid_argument("forest needs at least one tree");
    clf.trees_.resize(options.trees);
    const ForestData data{xs, ys, k};
    const int workers = std::clamp(options.workers, 1, options.trees);
    {
        std::vector<std::jthread> pool;
        for (int wkr = 0; wkr < workers; ++wkr) {
            pool.emplace_back([&, wkr] {
                for (int t = wkr; t < options.trees; t += workers) {
                    clf.trees_[t] = grow_tree(data, tree_seed(options.seed, t), max_features);
                }
            });
        }
    }
    clf.hyper_ = {{"trees", options.trees}, {"max_features", max_features}, {"criterion", "gini"}, {"bootstrap", true}};
    std::size_t nodes = 0;
    for (const auto& t : clf.trees_) nodes += t.nodes.size();
    clf.training_ = {{"rows", n}, {"nodes", nodes}};
    return clf;
}

PixelClassifier train(const FloatRaster& features, const LabelRaster& labels, const FeatureRecipe& recipe,
                      const TrainOptions& options) {
    return train(collect_samples(features, labels, &recipe), recipe, options);
}

Eigen::MatrixXd PixelClassifier::predict_proba(const Eigen::MatrixXd& x) const {
    if (x.cols() != dims_) {
        throw std::invalid_argument("classifier expects " + std::to_string(dims_) + " features, got " +
                                    std::to_string(x.cols()));
    }
    const int k = static_cast<int>(classes_.size());
    Eigen::MatrixXd p(x.rows(), k);
    if (kind_ == ClassifierKind::logistic) {
        const Eigen::MatrixXd z = (x.rowwise() - mean_.transpose()) * scale_.asDiagonal();
        Eigen::MatrixXd logits = z * weights_.transpose();
        logits.rowwise() += bias_.transpose();
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double m = logits.row(i).maxCoeff();
            double s = 0.0;
            for (int c = 0; c < k; ++c) s += p(i, c) = std::exp(logits(i, c) - m);
            p.row(i) /= s;
        }
        return p;
    }
    p.setZero();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (const auto& t : trees_) {
            const auto& v = tree_leaf(t, x, i);
            for (int c = 0; c < k; ++c) p(i, c) += v[c];
        }
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

std::vector<int> PixelClassifier::predict(const Eigen::MatrixXd& x) const {
    const auto p = predict_proba(x);
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) out[i] = classes_[argmax_row(p, i)];
    return out;
}

Prediction PixelClassifier::predict(const FloatRaster& features, const FeatureRecipe& recipe) const {
    if (recipe.checksum() != recipe_.checksum()) {
        throw PixelClfError("feature recipe mismatch: classifier was trained on " + recipe_.to_json().dump() +
                            " but features were built with " + recipe.to_json().dump());
    }
    const auto x = raster_rows(features);
    if (!x.allFinite()) throw PixelClfError("non-finite features passed to predict");
    const auto p = predict_proba(x);
    const int k = static_cast<int>(classes_.size());
    Prediction out{LabelRaster(features.height(), features.width(), 1), FloatRaster(features.height(), features.width(), k)};
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        out.labels.data()[i] = classes_[argmax_row(p, i)];
        for (int c = 0; c < k; ++c) out.probabilities.data()[i * k + c] = static_cast<float>(p(i, c));
    }
    return out;
}

std::vector<std::uint8_t> PixelClassifier::serialize() const {
    const nlohmann::json header = {{"kind", to_string(kind_)},
                                   {"recipe", recipe_.to_json()},
                                   {"recipe_checksum", recipe_.checksum()},
                                   {"classes", classes_},
                                   {"seed", seed_},
                                   {"dims", dims_},
                                   {"hyperparameters", hyper_},
                                   {"training", training_}};
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_le<std::uint32_t>(out, kArchiveVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const int k = static_cast<int>(classes_.size());
    if (kind_ == ClassifierKind::logistic) {
        for (Eigen::Index i = 0; i < dims_; ++i) put_le(out, mean_[i]);
        for (Eigen::Index i = 0; i < dims_; ++i) put_le(out, scale_[i]);
        for (int c = 0; c < k; ++c)
            for (Eigen::Index i = 0; i < dims_; ++i) put_le(out, weights_(c, i));
        for (int c = 0; c < k; ++c) put_le(out, bias_[c]);
    } else {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(trees_.size()));
        for (const auto& t : trees_) {
            put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.nodes.size()));
            for (const auto& n : t.nodes) {
                put_le<std::int32_t>(out, n.feature);
                if (n.feature >= 0) {
                    put_le(out, n.threshold);
                    put_le<std::int32_t>(out, n.left);
                    put_le<std::int32_t>(out, n.right);
                } else {
                    for (int c = 0; c < k; ++c) put_le(out, n.value[c]);
                }
            }
        }
    }
    return out;
}

PixelClassifier PixelClassifier::deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw PixelClfError("not a classifier archive");
    Reader rd{bytes, 4};
    if (const auto v = rd.get<std::uint32_t>(); v != kArchiveVersion) {
        throw PixelClfError("unsupported classifier archive version " + std::to_string(v));
    }
    const auto len = rd.get<std::uint64_t>();
    if (rd.pos + len > bytes.size()) throw PixelClfError("classifier archive truncated");
    const auto header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(rd.pos),
                                              bytes.begin() + static_cast<std::ptrdiff_t>(rd.pos + len));
    rd.pos += len;
    PixelClassifier clf;
    clf.kind_ = classifier_kind_from_string(header.at("kind"));
    clf.recipe_ = FeatureRecipe::from_json(header.at("recipe"));
    if (clf.recipe_.checksum() != header.at("recipe_checksum").get<std::string>()) {
        throw PixelClfError("classifier archive recipe checksum does not match its recipe");
    }
    clf.classes_ = header.at("classes").get<std::vector<int>>();
    clf.seed_ = header.at("seed").get<std::uint64_t>();
    clf.dims_ = header.at("dims").get<int>();
    clf.hyper_ = header.value("hyperparameters", nlohmann::json::object());
    clf.training_ = header.value("training", nlohmann::json::object());
    const int k = static_cast<int>(clf.classes_.size());
    const int d = clf.dims_;
    if (clf.kind_ == ClassifierKind::logistic) {
        clf.mean_.resize(d);
        clf.scale_.resize(d);
        clf.weights_.resize(k, d);
        clf.bias_.resize(k);
        for (int i = 0; i < d; ++i) clf.mean_[i] = rd.get<double>();
        for (int i = 0; i < d; ++i) clf.scale_[i] = rd.get<double>();
        for (int c = 0; c < k; ++c)
            for (int i = 0; i < d; ++i) clf.weights_(c, i) = rd.get<double>();
        for (int c = 0; c < k; ++c) clf.bias_[c] = rd.get<double>();
    } else {
        clf.trees_.resize(rd.get<std::uint32_t>());
        for (auto& t : clf.trees_) {
            t.nodes.resize(rd.get<std::uint32_t>());
            for (auto& n : t.nodes) {
                n.feature = rd.get<std::int32_t>();
                if (n.feature >= 0) {
                    n.threshold = rd.get<double>();
                    n.left = rd.get<std::int32_t>();
                    n.right = rd.get<std::int32_t>();
                    const auto sz = static_cast<int>(t.nodes.size());
                    if (n.feature >= d || n.left <= 0 || n.right <= 0 || n.left >= sz || n.right >= sz) {
                        throw PixelClfError("classifier archive has a malformed tree node");
                    }
                } else {
                    n.value.resize(k);
                    for (auto& v : n.value) v = rd.get<double>();
                }
            }
        }
    }
    if (rd.pos != bytes.size()) throw PixelClfError("classifier archive has trailing bytes");
    return clf;
}

void PixelClassifier::save(const std::filesystem::path& path) const { write_atomic(path, serialize()); }

PixelClassifier PixelClassifier::load(const std::filesystem::path& path) { return deserialize(read_bytes(path)); }

// ---- smoothing ------------------------------------------------------------

LabelRaster smooth(const LabelRaster& labels, const FloatRaster& probabilities, const std::vector<int>& classes,
                   int radius, int iterations) {
    if (radius < 1) throw std::invalid_argument("smooth radius must be >= 1");
    if (probabilities.height() != labels.height() || probabilities.width() != labels.width() ||
        probabilities.channels() != static_cast<int>(classes.size())) {
        throw std::invalid_argument("smooth: probabilities must be H x W x K matching the labels and classes");
    }
    const int h = labels.height(), w = labels.width(), k = static_cast<int>(classes.size());
    auto index_of = [&](int label) {
        const auto it = std::find(classes.begin(), classes.end(), label);
        return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
    };
    LabelRaster cur = labels;
    std::vector<double> score(k);
    for (int it = 0; it < std::min(iterations, 5); ++it) {
        LabelRaster next = cur;
        bool changed = false;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                std::fill(score.begin(), score.end(), 0.0);
                for (int yy = std::max(0, y - radius); yy <= std::min(h - 1, y + radius); ++yy) {
                    for (int xx = std::max(0, x - radius); xx <= std::min(w - 1, x + radius); ++xx) {
                        const int ci = index_of(cur(yy, xx));
                        if (ci >= 0) score[ci] += probabilities(yy, xx, ci);
                    }
                }
                const int own = index_of(cur(y, x));
                if (own < 0) continue;  // unlabelled pixels stay as they are
                int best = own;
                for (int c = 0; c < k; ++c) {
                    if (score[c] > score[best] || (score[c] == score[best] && c < best && score[own] < score[c])) best = c;
                }
                if (best != own) {
                    next(y, x) = classes[best];
                    changed = true;
                }
            }
        }
        cur = std::move(next);
        if (!changed) break;
    }
    return cur;
}

}  // namespace featpipe::pixelclf
