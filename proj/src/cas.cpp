#include <featpipe/cas.hpp>
#include <featpipe/io.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace featpipe::cas {

namespace {

double squared_distance(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int k = 0; k < d; ++k) {
        const double diff = a[k] - b[k];
        s += diff * diff;
    }
    return s;
}

// Nearest centroid per point, lowest id on ties. Returns per-point squared distance.
void assign_points(const std::vector<double>& x, std::size_t n, int d, const std::vector<double>& centroids, int k,
                   std::vector<int>& labels, std::vector<double>& d2) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* p = x.data() + i * d;
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            const double dist = squared_distance(p, centroids.data() + static_cast<std::size_t>(c) * d, d);
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        labels[i] = best;
        d2[i] = best_d;
    }
}

}  // namespace

ClusterModel kmeans(const FloatRaster& features, const KMeansOptions& options) {
    const std::size_t n = features.pixels();
    const int d = features.channels();
    if (options.clusters <= 0) throw std::invalid_argument("cluster count must be positive");
    if (n < static_cast<std::size_t>(options.clusters)) {
        throw std::invalid_argument("kmeans needs at least as many pixels (" + std::to_string(n) + ") as clusters (" +
                                    std::to_string(options.clusters) + ")");
    }
    if (d == 0) throw std::invalid_argument("kmeans needs at least one feature dimension");
    std::vector<double> x(features.data().begin(), features.data().end());

    // Farthest-point seeding; the first seed comes from the seeded stream.
    std::mt19937_64 rng(options.seed);
    std::vector<double> centroids;
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::size_t next = static_cast<std::size_t>(rng() % n);
    int k = 0;
    while (k < options.clusters) {
        const double* p = x.data() + next * d;
        centroids.insert(centroids.end(), p, p + d);
        ++k;
        for (std::size_t i = 0; i < n; ++i) min_d2[i] = std::min(min_d2[i], squared_distance(x.data() + i * d, p, d));
        const auto far = std::max_element(min_d2.begin(), min_d2.end());
        if (*far <= 0.0) break;
        next = static_cast<std::size_t>(far - min_d2.begin());
    }
    if (k < options.clusters) {
        spdlog::warn("kmeans: only {} distinct feature vectors; using {} clusters instead of {}", k, k,
                     options.clusters);
    }

    std::vector<int> labels(n, -1), previous;
    std::vector<double> d2(n);
    std::vector<std::int64_t> counts(k);
    ClusterModel model;
    model.requested_clusters = options.clusters;
    model.effective_clusters = k;
    model.dims = d;
    model.seed = options.seed;

    double prev_inertia = std::numeric_limits<double>::infinity();
    for (int iter = 1;; ++iter) {
        previous = labels;
        assign_points(x, n, d, centroids, k, labels, d2);
        // Re-seed empty clusters from the point farthest from its centroid,
        // drawn from clusters that can spare a member.
        for (int guard = 0; guard < k; ++guard) {
            std::fill(counts.begin(), counts.end(), 0);
            for (int l : labels) ++counts[l];
            const auto empty = std::find(counts.begin(), counts.end(), 0);
            if (empty == counts.end()) break;
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[labels[i]] > 1 && d2[i] > far_d) {
                    far_d = d2[i];
                    far = i;
                }
            }
            if (far == n) break;
            const int c = static_cast<int>(empty - counts.begin());
            std::copy_n(x.data() + far * d, d, centroids.data() + static_cast<std::size_t>(c) * d);
            assign_points(x, n, d, centroids, k, labels, d2);
        }
        const double inertia = std::accumulate(d2.begin(), d2.end(), 0.0);
        model.inertia_history.push_back(inertia);
        model.iterations = iter;

        const bool stable = labels == previous;
        const bool small_gain = std::isfinite(prev_inertia) &&
                                (prev_inertia <= 0.0 || (prev_inertia - inertia) <= options.tol * prev_inertia);
        if (stable || small_gain || iter >= options.max_iter) {
            model.inertia = inertia;
            break;
        }
        prev_inertia = inertia;

        std::vector<double> sums(static_cast<std::size_t>(k) * d, 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[labels[i]];
            for (int j = 0; j < d; ++j) sums[static_cast<std::size_t>(labels[i]) * d + j] += x[i * d + j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (int j = 0; j < d; ++j) {
                centroids[static_cast<std::size_t>(c) * d + j] = sums[static_cast<std::size_t>(c) * d + j] / counts[c];
            }
        }
    }

    model.centroids = std::move(centroids);
    model.assignment = LabelRaster(features.height(), features.width(), 1, std::vector<std::int32_t>(labels.begin(), labels.end()));
    return model;
}

DensitySplit attention_density(const LabelRaster& groups, int n_groups, const FloatRaster& attention) {
    if (groups.height() != attention.height() || groups.width() != attention.width() || attention.channels() != 1) {
        throw std::invalid_argument("attention map shape does not match the label raster");
    }
    DensitySplit out;
    out.area.assign(n_groups, 0);
    out.attention_mass.assign(n_groups, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const int g = groups.data()[i];
        if (g < 0 || g >= n_groups) throw std::out_of_range("group id out of range");
        ++out.area[g];
        out.attention_mass[g] += attention.data()[i];
        total += attention.data()[i];
    }
    if (!(total > 0.0)) throw std::invalid_argument("attention not normalized");
    out.rho.resize(n_groups);
    for (int g = 0; g < n_groups; ++g) {
        if (out.area[g] == 0) throw std::logic_error("group " + std::to_string(g) + " has zero area");
        out.rho[g] = out.attention_mass[g] / static_cast<double>(out.area[g]);
    }
    out.mean_rho = std::accumulate(out.rho.begin(), out.rho.end(), 0.0) / n_groups;
    out.foreground.resize(n_groups);
    bool any = false;
    for (int g = 0; g < n_groups; ++g) {
        out.foreground[g] = out.rho[g] > out.mean_rho;
        any = any || out.foreground[g];
    }
    if (!any) {
        const auto best = std::max_element(out.rho.begin(), out.rho.end()) - out.rho.begin();
        out.foreground[best] = true;
        out.fallback = true;
    }
    return out;
}

DensitySplit attention_density(const ClusterModel& model, const AttentionMap& attention) {
    return attention_density(model.assignment, model.effective_clusters, attention.data);
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 1.0;
    const double cos = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
    return 1.0 - cos;
}

double modal_distance(const std::vector<double>& distances, int bins) {
    if (distances.empty()) throw std::invalid_argument("modal distance of an empty sample");
    const double width = 2.0 / bins;
    std::vector<int> hist(bins, 0);
    for (double v : distances) {
        const int b = std::clamp(static_cast<int>(std::floor(v / width)), 0, bins - 1);
        ++hist[b];
    }
    const auto mode = std::max_element(hist.begin(), hist.end()) - hist.begin();  // first max
    return (static_cast<double>(mode) + 0.5) * width;
}

SemanticDistance semantic_distance(const ClusterModel& model, const std::vector<bool>& foreground, int bins) {
    const int k = model.effective_clusters;
    if (static_cast<int>(foreground.size()) != k) throw std::invalid_argument("foreground flag count mismatch");
    SemanticDistance out;
    for (int f = 0; f < k; ++f) {
        if (!foreground[f]) continue;
        for (int b = 0; b < k; ++b) {
            if (foreground[b]) continue;
            out.pair_distances.push_back(cosine_distance(model.centroid(f), model.centroid(b)));
        }
    }
    if (!out.pair_distances.empty()) {
        out.value = modal_distance(out.pair_distances, bins);
        return out;
    }
    out.degenerate_split = true;
    spdlog::warn("semantic_distance: degenerate split (no background clusters); using median centroid distance");
    for (int a = 0; a < k; ++a)
        for (int b = a + 1; b < k; ++b) out.pair_distances.push_back(cosine_distance(model.centroid(a), model.centroid(b)));
    if (out.pair_distances.empty()) return out;
    auto sorted = out.pair_distances;
    std::sort(sorted.begin(), sorted.end());
    const auto m = sorted.size();
    out.value = m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    return out;
}

std::vector<int> complete_linkage(const std::vector<double>& distances, int n, double threshold) {
    if (distances.size() != static_cast<std::size_t>(n) * n) throw std::invalid_argument("distance matrix size mismatch");
    // Active groups are indexed by their lowest member; linkage holds the
    // complete-linkage (max) distance between active groups.
    std::vector<double> linkage = distances;
    std::vector<int> owner(n);
    std::iota(owner.begin(), owner.end(), 0);
    std::vector<bool> active(n, true);
    for (;;) {
        int best_a = -1, best_b = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int a = 0; a < n; ++a) {
            if (!active[a]) continue;
            for (int b = a + 1; b < n; ++b) {
                if (!active[b]) continue;
                const double v = linkage[static_cast<std::size_t>(a) * n + b];
                if (v < best) {
                    best = v;
                    best_a = a;
                    best_b = b;
                }
            }
        }
        if (best_a < 0 || !(best < threshold)) break;
        active[best_b] = false;
        for (int i = 0; i < n; ++i) {
            if (owner[i] == best_b) owner[i] = best_a;
        }
        for (int c = 0; c < n; ++c) {
            if (!active[c] || c == best_a) continue;
            const double v = std::max(linkage[static_cast<std::size_t>(best_a) * n + c],
                                      linkage[static_cast<std::size_t>(best_b) * n + c]);
            linkage[static_cast<std::size_t>(best_a) * n + c] = v;
            linkage[static_cast<std::size_t>(c) * n + best_a] = v;
        }
    }
    std::vector<int> remap(n, -1), groups(n);
    int next = 0;
    for (int i = 0; i < n; ++i) {
        if (remap[owner[i]] < 0) remap[owner[i]] = next++;
        groups[i] = remap[owner[i]];
    }
    return groups;
}

CasMap merge(const ClusterModel& model, const AttentionMap& attention, double d_sem, double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
    const int k = model.effective_clusters;
    std::vector<double> dist(static_cast<std::size_t>(k) * k, 0.0);
    for (int a = 0; a < k; ++a)
        for (int b = a + 1; b < k; ++b) {
            const double v = cosine_distance(model.centroid(a), model.centroid(b));
            dist[static_cast<std::size_t>(a) * k + b] = v;
            dist[static_cast<std::size_t>(b) * k + a] = v;
        }
    const auto groups = complete_linkage(dist, k, lambda * d_sem);
    const int n_groups = groups.empty() ? 0 : *std::max_element(groups.begin(), groups.end()) + 1;

    std::vector<std::int64_t> area(n_groups, 0);
    for (auto c : model.assignment.data()) ++area[groups[c]];
    // Class ids by descending area; groups are numbered by lowest member cluster,
    // so stable sorting breaks area ties toward the lowest cluster id.
    std::vector<int> order(n_groups);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return area[a] > area[b]; });
    std::vector<int> class_of_group(n_groups);
    for (int i = 0; i < n_groups; ++i) class_of_group[order[i]] = i;

    CasMap out;
    out.d_sem = d_sem;
    out.lambda = lambda;
    out.seed = model.seed;
    out.labels = LabelRaster(model.assignment.height(), model.assignment.width(), 1);
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
        out.labels.data()[i] = class_of_group[groups[model.assignment.data()[i]]];
    }
    const auto split = attention_density(out.labels, n_groups, attention.data);
    out.classes.resize(n_groups);
    for (int c = 0; c < n_groups; ++c) {
        auto& ci = out.classes[c];
        ci.id = c;
        ci.area = split.area[c];
        ci.attention_mass = split.attention_mass[c];
        ci.rho = split.rho[c];
        ci.foreground = split.foreground[c];
    }
    for (int cl = 0; cl < k; ++cl) out.classes[class_of_group[groups[cl]]].clusters.push_back(cl);
    return out;
}

CasMap segment(const FeatureMap& features, const AttentionMap& attention, const CasOptions& options) {
    const auto model = kmeans(features.data, options.kmeans);
    const auto split = attention_density(model, attention);
    const auto sem = semantic_distance(model, split.foreground, options.bins);
    auto out = merge(model, attention, sem.value, options.lambda);
    out.degenerate_split = sem.degenerate_split;
    return out;
}

nlohmann::json CasMap::sidecar() const {
    nlohmann::json classes_json = nlohmann::json::array();
    for (const auto& c : classes) {
        classes_json.push_back({{"id", c.id}, {"area", c.area}, {"rho_A", c.rho}, {"foreground", c.foreground},
                                {"attention_mass", c.attention_mass}, {"clusters", c.clusters}});
    }
    return {{"classes", classes_json}, {"d_sem", d_sem}, {"lambda", lambda}, {"seed", seed},
            {"degenerate_split", degenerate_split}};
}

void write_cas(const std::filesystem::path& png_path, const CasMap& cas) {
    write_indexed_png(png_path, cas.labels);
    auto json_path = png_path;
    json_path.replace_extension(".json");
    write_atomic(json_path, cas.sidecar().dump(2));
}

}  // namespace featpipe::cas
