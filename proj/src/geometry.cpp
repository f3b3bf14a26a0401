#include <featpipe/geometry.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>

namespace featpipe {

bool operator==(const ComposeOp& a, const ComposeOp& b) { return a.parts == b.parts; }

TransformSpec::TransformSpec(Kind kind) : kind_(std::move(kind)) {
    if (const auto* r = std::get_if<RotationOp>(&kind_); r && (r->k < 1 || r->k > 3)) {
        throw std::invalid_argument("rotation quarter-turns must be in {1,2,3}, got " +
                                    std::to_string(r->k));
    }
}

TransformSpec TransformSpec::rotation(int k) { return TransformSpec{RotationOp{k}}; }

bool TransformSpec::is_trivial() const {
    if (is<IdentityOp>()) return true;
    if (const auto* c = std::get_if<ComposeOp>(&kind_)) {
        return std::all_of(c->parts.begin(), c->parts.end(),
                           [](const TransformSpec& p) { return p.is_trivial(); });
    }
    return false;
}

bool TransformSpec::swaps_axes() const {
    if (const auto* r = std::get_if<RotationOp>(&kind_)) return r->k % 2 == 1;
    if (const auto* c = std::get_if<ComposeOp>(&kind_)) {
        bool swapped = false;
        for (const auto& p : c->parts) swapped ^= p.swaps_axes();
        return swapped;
    }
    return false;
}

std::string to_string(FlipAxis a) { return a == FlipAxis::horizontal ? "horizontal" : "vertical"; }

std::string to_string(Neighborhood n) { return n == Neighborhood::moore ? "moore" : "von_neumann"; }

Neighborhood neighborhood_from_string(const std::string& s) {
    if (s == "moore") return Neighborhood::moore;
    if (s == "von_neumann") return Neighborhood::von_neumann;
    throw std::invalid_argument("unknown neighborhood '" + s + "' (expected moore|von_neumann)");
}

nlohmann::json TransformSpec::to_json() const {
    using nlohmann::json;
    return std::visit(
        [](const auto& op) -> json {
            using Op = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<Op, IdentityOp>) {
                return {{"kind", "identity"}};
            } else if constexpr (std::is_same_v<Op, ShiftOp>) {
                return {{"kind", "shift"}, {"dx", op.dx}, {"dy", op.dy}, {"boundary", "wrap"}};
            } else if constexpr (std::is_same_v<Op, FlipOp>) {
                return {{"kind", "flip"}, {"axis", featpipe::to_string(op.axis)}};
            } else if constexpr (std::is_same_v<Op, RotationOp>) {
                return {{"kind", "rotation"}, {"k", op.k}};
            } else {
                json parts = json::array();
                for (const auto& p : op.parts) parts.push_back(p.to_json());
                return {{"kind", "compose"}, {"parts", parts}};
            }
        },
        kind_);
}

TransformSpec TransformSpec::from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "identity") return identity();
    if (kind == "shift") {
        if (j.contains("boundary") && j.at("boundary") != "wrap") {
            throw std::invalid_argument("only wrap boundary shifts are supported");
        }
        return shift(j.at("dx").get<int>(), j.at("dy").get<int>());
    }
    if (kind == "flip") {
        const auto axis = j.at("axis").get<std::string>();
        if (axis == "horizontal") return flip(FlipAxis::horizontal);
        if (axis == "vertical") return flip(FlipAxis::vertical);
        throw std::invalid_argument("unknown flip axis '" + axis + "'");
    }
    if (kind == "rotation") return rotation(j.at("k").get<int>());
    if (kind == "compose") {
        std::vector<TransformSpec> parts;
        for (const auto& p : j.at("parts")) parts.push_back(from_json(p));
        return compose(std::move(parts));
    }
    throw std::invalid_argument("unknown transform kind '" + kind + "'");
}

std::string TransformSpec::to_string() const { return to_json().dump(); }

TransformSpec invert(const TransformSpec& t) {
    return std::visit(
        [](const auto& op) -> TransformSpec {
            using Op = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<Op, IdentityOp>) {
                return TransformSpec::identity();
            } else if constexpr (std::is_same_v<Op, ShiftOp>) {
                return TransformSpec::shift(-op.dx, -op.dy);
            } else if constexpr (std::is_same_v<Op, FlipOp>) {
                return TransformSpec::flip(op.axis);
            } else if constexpr (std::is_same_v<Op, RotationOp>) {
                return TransformSpec::rotation(4 - op.k);
            } else {
                std::vector<TransformSpec> parts;
                parts.reserve(op.parts.size());
                for (auto it = op.parts.rbegin(); it != op.parts.rend(); ++it) parts.push_back(invert(*it));
                return TransformSpec::compose(std::move(parts));
            }
        },
        t.kind());
}

namespace {

int wrap(int v, int n) {
    const int r = v % n;
    return r < 0 ? r + n : r;
}

template <typename T>
Raster<T> apply_shift(const ShiftOp& op, const Raster<T>& in) {
    const int h = in.height(), w = in.width(), k = in.channels();
    if (std::abs(op.dx) >= w || std::abs(op.dy) >= h) {
        std::ostringstream msg;
        msg << "shift (" << op.dx << ", " << op.dy << ") out of range for " << h << "x" << w
            << " raster";
        throw std::invalid_argument(msg.str());
    }
    Raster<T> out(h, w, k);
    const auto row_len = static_cast<std::size_t>(w) * k;
    const int sx = wrap(op.dx, w);
    for (int y = 0; y < h; ++y) {
        const T* src = in.data().data() + static_cast<std::size_t>(wrap(y - op.dy, h)) * row_len;
        T* dst = out.data().data() + static_cast<std::size_t>(y) * row_len;
        // out[x] = in[x - sx]: the tail of the source row lands first.
        const auto tail = static_cast<std::size_t>(sx) * k;
        std::copy(src + row_len - tail, src + row_len, dst);
        std::copy(src, src + row_len - tail, dst + tail);
    }
    return out;
}

template <typename T>
Raster<T> apply_flip(const FlipOp& op, const Raster<T>& in) {
    const int h = in.height(), w = in.width(), k = in.channels();
    Raster<T> out(h, w, k);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int sy = op.axis == FlipAxis::vertical ? h - 1 - y : y;
            const int sx = op.axis == FlipAxis::horizontal ? w - 1 - x : x;
            std::copy_n(in.pixel(sy, sx).data(), k, out.pixel(y, x).data());
        }
    }
    return out;
}

// Counter-clockwise quarter turns, matching numpy.rot90 on (rows, cols).
template <typename T>
Raster<T> apply_rotation(const RotationOp& op, const Raster<T>& in) {
    const int h = in.height(), w = in.width(), k = in.channels();
    const bool odd = op.k % 2 == 1;
    Raster<T> out(odd ? w : h, odd ? h : w, k);
    for (int i = 0; i < out.height(); ++i) {
        for (int j = 0; j < out.width(); ++j) {
            int sy = 0, sx = 0;
            switch (op.k) {
                case 1: sy = j; sx = w - 1 - i; break;
                case 2: sy = h - 1 - i; sx = w - 1 - j; break;
                default: sy = h - 1 - j; sx = i; break;
            }
            std::copy_n(in.pixel(sy, sx).data(), k, out.pixel(i, j).data());
        }
    }
    return out;
}

}  // namespace

template <typename T>
Raster<T> apply(const TransformSpec& t, const Raster<T>& raster) {
    if (raster.empty()) throw std::invalid_argument("cannot transform an empty raster");
    return std::visit(
        [&](const auto& op) -> Raster<T> {
            using Op = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<Op, IdentityOp>) {
                return raster;
            } else if constexpr (std::is_same_v<Op, ShiftOp>) {
                return apply_shift(op, raster);
            } else if constexpr (std::is_same_v<Op, FlipOp>) {
                return apply_flip(op, raster);
            } else if constexpr (std::is_same_v<Op, RotationOp>) {
                return apply_rotation(op, raster);
            } else {
                Raster<T> cur = raster;
                for (const auto& p : op.parts) cur = apply(p, cur);
                return cur;
            }
        },
        t.kind());
}

template Raster<std::uint8_t> apply(const TransformSpec&, const Raster<std::uint8_t>&);
template Raster<float> apply(const TransformSpec&, const Raster<float>&);
template Raster<double> apply(const TransformSpec&, const Raster<double>&);
template Raster<std::int32_t> apply(const TransformSpec&, const Raster<std::int32_t>&);

TransformSet::TransformSet() : transforms_{TransformSpec::identity()} {}

TransformSet::TransformSet(std::vector<TransformSpec> transforms, TransformSetParams params,
                           std::vector<TransformSpec> extra)
    : params_(std::move(params)), extra_(std::move(extra)) {
    transforms_.push_back(TransformSpec::identity());
    auto add = [this](TransformSpec t) {
        if (std::find(transforms_.begin(), transforms_.end(), t) == transforms_.end()) {
            transforms_.push_back(std::move(t));
        }
    };
    for (auto& t : transforms) add(std::move(t));
    for (const auto& t : extra_) add(t);
}

nlohmann::json TransformSet::to_json() const {
    nlohmann::json extra = nlohmann::json::array();
    for (const auto& t : extra_) extra.push_back(t.to_json());
    return {{"stride", params_.stride},
            {"neighborhood", to_string(params_.neighborhood)},
            {"distances", params_.distances},
            {"flips", params_.flips},
            {"extra", extra}};
}

TransformSet TransformSet::from_json(const nlohmann::json& j) {
    TransformSetParams p;
    p.stride = j.value("stride", 4);
    p.neighborhood = neighborhood_from_string(j.value("neighborhood", std::string{"moore"}));
    p.distances = j.value("distances", std::vector<int>{});
    p.flips = j.value("flips", false);
    std::vector<TransformSpec> extra;
    if (j.contains("extra")) {
        for (const auto& e : j.at("extra")) extra.push_back(TransformSpec::from_json(e));
    }
    return standard_transform_set(p, std::move(extra));
}

std::vector<std::pair<int, int>> neighborhood_directions(Neighborhood n) {
    if (n == Neighborhood::von_neumann) return {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    return {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}};
}

std::size_t standard_transform_count(Neighborhood neighborhood, std::size_t n_distances, bool flips) {
    const std::size_t directions = neighborhood == Neighborhood::moore ? 8 : 4;
    if (n_distances == 0) return flips ? 3 : 0;
    return (flips ? 4 : 1) * directions * n_distances;
}

TransformSet standard_transform_set(const TransformSetParams& params, std::vector<TransformSpec> extra) {
    if (params.stride <= 0) throw std::invalid_argument("stride must be positive");
    for (int d : params.distances) {
        if (d < 1 || 2 * d > params.stride) {
            spdlog::warn("shift distance {} is outside [1, {}] for stride {}", d, params.stride / 2,
                         params.stride);
        }
    }
    const auto h = TransformSpec::flip(FlipAxis::horizontal);
    const auto v = TransformSpec::flip(FlipAxis::vertical);
    std::vector<std::vector<TransformSpec>> flip_prefixes{{}};
    if (params.flips) flip_prefixes.insert(flip_prefixes.end(), {{h}, {v}, {h, v}});

    std::vector<TransformSpec> out;
    if (params.distances.empty()) {
        for (std::size_t i = 1; i < flip_prefixes.size(); ++i) {
            const auto& f = flip_prefixes[i];
            out.push_back(f.size() == 1 ? f.front() : TransformSpec::compose(f));
        }
    }
    for (const auto& prefix : flip_prefixes) {
        for (int d : params.distances) {
            for (auto [ux, uy] : neighborhood_directions(params.neighborhood)) {
                auto s = TransformSpec::shift(ux * d, uy * d);
                if (prefix.empty()) {
                    out.push_back(std::move(s));
                } else {
                    auto parts = prefix;
                    parts.push_back(std::move(s));
                    out.push_back(TransformSpec::compose(std::move(parts)));
                }
            }
        }
    }
    return TransformSet(std::move(out), params, std::move(extra));
}

TransformSet standard_transform_set(int stride, Neighborhood neighborhood, const std::vector<int>& distances,
                                    bool flips, std::vector<TransformSpec> extra) {
    return standard_transform_set(TransformSetParams{stride, neighborhood, distances, flips}, std::move(extra));
}

}  // namespace featpipe
