#pragma once

// Exact, invertible image-plane transforms (wrap shifts, flips, quarter-turn
// rotations and their compositions) and the generator for the standard
// shift/flip ensemble used by the upsampling engine.

#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <string>
#include <variant>
#include <vector>

namespace featpipe {

enum class FlipAxis { horizontal, vertical };
enum class Neighborhood { moore, von_neumann };

class TransformSpec;

struct IdentityOp {
    friend bool operator==(const IdentityOp&, const IdentityOp&) = default;
};
/// Torus shift: out(y, x) = in(y - dy mod H, x - dx mod W).
struct ShiftOp {
    int dx = 0;
    int dy = 0;
    friend bool operator==(const ShiftOp&, const ShiftOp&) = default;
};
/// horizontal mirrors columns, vertical mirrors rows.
struct FlipOp {
    FlipAxis axis = FlipAxis::horizontal;
    friend bool operator==(const FlipOp&, const FlipOp&) = default;
};
/// k counter-clockwise quarter turns, k in {1,2,3}.
struct RotationOp {
    int k = 1;
    friend bool operator==(const RotationOp&, const RotationOp&) = default;
};
/// Applies parts left to right.
struct ComposeOp {
    std::vector<TransformSpec> parts;
    friend bool operator==(const ComposeOp&, const ComposeOp&);
};

class TransformSpec {
public:
    using Kind = std::variant<IdentityOp, ShiftOp, FlipOp, RotationOp, ComposeOp>;

    TransformSpec() = default;
    TransformSpec(Kind kind);  // NOLINT(google-explicit-constructor)

    static TransformSpec identity() { return TransformSpec{IdentityOp{}}; }
    static TransformSpec shift(int dx, int dy) { return TransformSpec{ShiftOp{dx, dy}}; }
    static TransformSpec flip(FlipAxis axis) { return TransformSpec{FlipOp{axis}}; }
    static TransformSpec rotation(int k);
    static TransformSpec compose(std::vector<TransformSpec> parts) {
        return TransformSpec{ComposeOp{std::move(parts)}};
    }

    const Kind& kind() const noexcept { return kind_; }
    template <typename Op>
    bool is() const noexcept { return std::holds_alternative<Op>(kind_); }
    template <typename Op>
    const Op& as() const { return std::get<Op>(kind_); }

    /// True when the transform acts as the identity on every raster shape
    /// (identity, empty compose, compose of identities).
    bool is_trivial() const;
    /// Whether the output of an H x W input is W x H.
    bool swaps_axes() const;

    nlohmann::json to_json() const;
    static TransformSpec from_json(const nlohmann::json& j);
    std::string to_string() const;

    friend bool operator==(const TransformSpec& a, const TransformSpec& b) { return a.kind_ == b.kind_; }

private:
    Kind kind_ = IdentityOp{};
};

TransformSpec invert(const TransformSpec& t);

/// Applies t to an H x W x K raster. Throws std::invalid_argument for an
/// empty raster or a shift with |dx| >= W or |dy| >= H.
template <typename T>
Raster<T> apply(const TransformSpec& t, const Raster<T>& raster);

extern template Raster<std::uint8_t> apply(const TransformSpec&, const Raster<std::uint8_t>&);
extern template Raster<float> apply(const TransformSpec&, const Raster<float>&);
extern template Raster<double> apply(const TransformSpec&, const Raster<double>&);
extern template Raster<std::int32_t> apply(const TransformSpec&, const Raster<std::int32_t>&);

struct TransformSetParams {
    int stride = 4;
    Neighborhood neighborhood = Neighborhood::moore;
    std::vector<int> distances;
    bool flips = false;
};

/// Ordered, duplicate-free transform list whose first element is identity.
class TransformSet {
public:
    TransformSet();
    /// Builds a set from an explicit list; identity is moved/prepended to
    /// position 0 and structural duplicates are dropped (first kept).
    explicit TransformSet(std::vector<TransformSpec> transforms, TransformSetParams params = {},
                          std::vector<TransformSpec> extra = {});

    const std::vector<TransformSpec>& transforms() const noexcept { return transforms_; }
    const TransformSetParams& params() const noexcept { return params_; }
    const std::vector<TransformSpec>& extra() const noexcept { return extra_; }
    std::size_t size() const noexcept { return transforms_.size(); }
    std::size_t non_identity_count() const noexcept { return transforms_.size() - 1; }
    const TransformSpec& operator[](std::size_t i) const { return transforms_[i]; }

    /// {"stride", "neighborhood", "distances", "flips", "extra"}.
    nlohmann::json to_json() const;
    static TransformSet from_json(const nlohmann::json& j);

private:
    std::vector<TransformSpec> transforms_;
    TransformSetParams params_;
    std::vector<TransformSpec> extra_;
};

/// Direction unit vectors (dx, dy) for a neighbourhood, in generation order.
std::vector<std::pair<int, int>> neighborhood_directions(Neighborhood n);

/// Shift/flip ensemble. Non-identity count is F * N * |distances| where F is
/// 4 with flips (none, h, v, h+v) or 1 without and N is 8 (Moore) or 4 (von
/// Neumann); with no distances it is 3 pure flips or nothing. Distances
/// outside [1, stride/2] produce a warning, not an error.
TransformSet standard_transform_set(int stride, Neighborhood neighborhood,
                                    const std::vector<int>& distances, bool flips,
                                    std::vector<TransformSpec> extra = {});
TransformSet standard_transform_set(const TransformSetParams& params,
                                    std::vector<TransformSpec> extra = {});

/// Closed-form count of non-identity transforms produced by standard_transform_set.
std::size_t standard_transform_count(Neighborhood neighborhood, std::size_t n_distances, bool flips);

std::string to_string(Neighborhood n);
Neighborhood neighborhood_from_string(const std::string& s);
std::string to_string(FlipAxis a);

}  // namespace featpipe
