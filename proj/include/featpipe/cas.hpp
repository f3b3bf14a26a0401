#pragma once

// Class-agnostic segmentation: k-means over pixel features, attention-density
// foreground split, modal fg/bg semantic distance and complete-linkage merging.

#include <featpipe/featurize.hpp>
#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace featpipe::cas {

struct KMeansOptions {
    int clusters = 80;
    std::uint64_t seed = 0;
    int max_iter = 300;
    double tol = 1e-4;
};

struct ClusterModel {
    /// effective_clusters x D, row-major.
    std::vector<double> centroids;
    int dims = 0;
    int effective_clusters = 0;
    int requested_clusters = 0;
    LabelRaster assignment;  ///< H x W cluster ids
    double inertia = 0.0;
    std::vector<double> inertia_history;
    int iterations = 0;
    std::uint64_t seed = 0;

    std::span<const double> centroid(int c) const {
        return {centroids.data() + static_cast<std::size_t>(c) * dims, static_cast<std::size_t>(dims)};
    }
};

/// Lloyd's algorithm with farthest-point seeding. Duplicate input vectors are
/// collapsed, so effective_clusters may be below the requested count.
ClusterModel kmeans(const FloatRaster& features, const KMeansOptions& options = {});

struct DensitySplit {
    std::vector<std::int64_t> area;
    std::vector<double> attention_mass;
    std::vector<double> rho;
    std::vector<bool> foreground;
    double mean_rho = 0.0;
    bool fallback = false;  ///< no group exceeded the mean; max-density group chosen
};

/// rho(g) = attention mass / area for every group id in [0, groups). Groups
/// with rho above the mean over groups are foreground.
DensitySplit attention_density(const LabelRaster& groups, int n_groups, const FloatRaster& attention);
DensitySplit attention_density(const ClusterModel& model, const AttentionMap& attention);

/// 1 - cos(a, b); a zero vector is treated as orthogonal to everything.
double cosine_distance(std::span<const double> a, std::span<const double> b);

struct SemanticDistance {
    double value = 0.0;
    bool degenerate_split = false;
    std::vector<double> pair_distances;
};

inline constexpr int kHistogramBins = 64;

/// Centre of the most populated bin (lowest on ties) of a histogram over [0, 2].
double modal_distance(const std::vector<double>& distances, int bins = kHistogramBins);

/// Modal cosine distance over all (foreground, background) centroid pairs. With
/// no background cluster the median pairwise centroid distance is used instead.
SemanticDistance semantic_distance(const ClusterModel& model, const std::vector<bool>& foreground,
                                   int bins = kHistogramBins);

/// Complete-linkage agglomeration over a symmetric distance matrix (n x n,
/// row-major); groups keep merging while the closest pair is below threshold.
/// Returns a group id per item, numbered by first appearance.
std::vector<int> complete_linkage(const std::vector<double>& distances, int n, double threshold);

struct ClassInfo {
    int id = 0;
    std::int64_t area = 0;
    double attention_mass = 0.0;
    double rho = 0.0;
    bool foreground = false;
    std::vector<int> clusters;
};

struct CasMap {
    LabelRaster labels;  ///< H x W class ids 0..K-1, sorted by descending area
    std::vector<ClassInfo> classes;
    double d_sem = 0.0;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    bool degenerate_split = false;

    int class_count() const { return static_cast<int>(classes.size()); }
    nlohmann::json sidecar() const;
};

/// Merges clusters whose complete-linkage cosine distance is below lambda * d_sem
/// and recomputes per-class attention density and foreground flags.
CasMap merge(const ClusterModel& model, const AttentionMap& attention, double d_sem, double lambda);

struct CasOptions {
    KMeansOptions kmeans;
    double lambda = 1.0;
    int bins = kHistogramBins;
};

/// Full workflow: kmeans -> attention_density -> semantic_distance -> merge.
CasMap segment(const FeatureMap& features, const AttentionMap& attention, const CasOptions& options = {});

/// Writes "<stem>.png" (class id as palette index) and "<stem>.json".
void write_cas(const std::filesystem::path& png_path, const CasMap& cas);

}  // namespace featpipe::cas
