#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ssdt/corpus.hpp"
#include "ssdt/error.hpp"
#include "ssdt/rng.hpp"

namespace ssdt::cluster {

using Matrix = Eigen::MatrixXd; // points are rows

constexpr int kNoise = -1;

struct DbscanConfig {
    double eps = 0.0;
    int min_pts = 2;

    void validate() const {
        if (!(eps > 0.0))
            throw ParamError("dbscan: eps must be > 0");
        if (min_pts < 2)
            throw ParamError("dbscan: min_pts must be >= 2");
    }
};

struct ClusterAssignment {
    std::vector<int> labels; // cluster id in [0, n_clusters) or kNoise
    int n_clusters = 0;
};

// ---------------------------------------------------------------------------
// k-NN Eps estimation
// ---------------------------------------------------------------------------

/// Ascending list of each point's distance to its k-th nearest neighbor
/// (Euclidean, self excluded).
inline std::vector<double> kdist_curve(const Matrix& points, int k) {
    const Eigen::Index n = points.rows();
    if (k < 1)
        throw ParamError("kdist_curve: k must be >= 1");
    if (Eigen::Index(k) >= n)
        throw ParamError("kdist_curve: need more points than k");
    std::vector<double> curve;
    curve.reserve(std::size_t(n));
    std::vector<double> dists;
    for (Eigen::Index i = 0; i < n; ++i) {
        dists.clear();
        dists.reserve(std::size_t(n - 1));
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i)
                dists.push_back((points.row(i) - points.row(j)).norm());
        std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
        curve.push_back(dists[std::size_t(k - 1)]);
    }
    std::sort(curve.begin(), curve.end());
    return curve;
}

/// Knee of a sorted k-distance curve: the point with maximum perpendicular
/// distance to the chord from first to last sample. Ties break to the
/// smallest index. If the knee value itself is zero (flat start), the
/// smallest positive curve value is returned instead, so the result is
/// always a usable radius.
inline double estimate_eps(const std::vector<double>& curve) {
    if (curve.size() < 3)
        throw ParamError("estimate_eps: curve must have at least 3 values");
    const std::size_t n = curve.size();
    const double x1 = 0.0, y1 = curve.front();
    const double x2 = double(n - 1), y2 = curve.back();
    const double dx = x2 - x1, dy = y2 - y1;
    const double norm = std::sqrt(dx * dx + dy * dy);

    std::size_t knee = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = norm > 0.0
                             ? std::abs(dy * (double(i) - x1) - dx * (curve[i] - y1)) / norm
                             : 0.0;
        if (d > best) {
            best = d;
            knee = i;
        }
    }
    double eps = curve[knee];
    if (eps == 0.0) {
        for (double v : curve)
            if (v > 0.0) {
                eps = v;
                break;
            }
    }
    if (eps == 0.0)
        throw ParamError("estimate_eps: degenerate geometry, all k-distances are zero");
    return eps;
}

// ---------------------------------------------------------------------------
// DBSCAN
// ---------------------------------------------------------------------------

/// Standard DBSCAN over Euclidean distance with an O(n^2) neighborhood scan.
/// A point is core if at least min_pts points (itself included) lie within
/// eps. Expansion is breadth-first in ascending index order, so border points
/// join the first core cluster that reaches them.
inline ClusterAssignment dbscan(const Matrix& points, const DbscanConfig& config) {
    config.validate();
    const Eigen::Index n = points.rows();
    if (n == 0)
        throw ParamError("dbscan: empty point set");
    if (!points.allFinite())
        throw ParamError("dbscan: non-finite coordinates");

    const double eps2 = config.eps * config.eps;
    auto neighbors_of = [&](Eigen::Index i, std::vector<int>& out) {
        out.clear();
        for (Eigen::Index j = 0; j < n; ++j)
            if ((points.row(i) - points.row(j)).squaredNorm() <= eps2)
                out.push_back(int(j));
    };

    constexpr int kUnvisited = -2;
    ClusterAssignment result;
    result.labels.assign(std::size_t(n), kUnvisited);

    std::vector<int> neighbors, expansion;
    int next_cluster = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (result.labels[std::size_t(i)] != kUnvisited)
            continue;
        neighbors_of(i, neighbors);
        if (int(neighbors.size()) < config.min_pts) {
            result.labels[std::size_t(i)] = kNoise;
            continue;
        }
        const int cluster = next_cluster++;
        result.labels[std::size_t(i)] = cluster;
        std::deque<int> queue(neighbors.begin(), neighbors.end());
        while (!queue.empty()) {
            const int q = queue.front();
            queue.pop_front();
            int& label = result.labels[std::size_t(q)];
            if (label == kNoise) {
                label = cluster; // border point, previously unreachable
                continue;
            }
            if (label != kUnvisited)
                continue;
            label = cluster;
            neighbors_of(q, expansion);
            if (int(expansion.size()) >= config.min_pts)
                for (int e : expansion)
                    queue.push_back(e);
        }
    }
    result.n_clusters = next_cluster;
    return result;
}

// ---------------------------------------------------------------------------
// Pseudo-labeling
// ---------------------------------------------------------------------------

struct PseudoLabeled {
    corpus::Corpus corpus;            // non-noise images labeled "cluster_<id>"
    std::vector<std::size_t> kept;    // indices into the source corpus
    int noise_count = 0;
    int n_clusters = 0;
};

/// Pairs each non-noise image with its cluster id as a pseudo-label. Noise
/// images are excluded from the pretext set.
inline PseudoLabeled pseudo_label(const corpus::Corpus& unlabeled, const Matrix& features,
                                  const DbscanConfig& config) {
    if (std::size_t(features.rows()) != unlabeled.size())
        throw ShapeError("pseudo_label: one feature row per image required");
    const ClusterAssignment assignment = dbscan(features, config);
    if (assignment.n_clusters == 0)
        throw PipelineError(
            "pseudo_label: DBSCAN found no clusters; increase eps or decrease min_pts");

    PseudoLabeled out;
    out.n_clusters = assignment.n_clusters;
    out.corpus.seed = unlabeled.seed;
    for (int c = 0; c < assignment.n_clusters; ++c)
        out.corpus.class_set.push_back("cluster_" + std::to_string(c));
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
        const int label = assignment.labels[i];
        if (label == kNoise) {
            ++out.noise_count;
            continue;
        }
        out.corpus.samples.push_back(
            {unlabeled.samples[i].image, label, unlabeled.samples[i].origin});
        out.kept.push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct KMeansResult {
    Matrix centroids;              // k x d
    std::vector<int> assignment;   // per point, nearest centroid
    double sed = 0.0;              // sum of squared Euclidean distances
    std::vector<double> sed_trace; // one value per assignment pass
};

namespace detail {

inline int nearest_centroid(const Matrix& centroids, const Eigen::RowVectorXd& p) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
        const double d = (centroids.row(c) - p).squaredNorm();
        if (d < best_d) { // strict: ties keep the lowest index
            best_d = d;
            best = int(c);
        }
    }
    return best;
}

inline Matrix kmeanspp_init(const Matrix& points, int k, Rng& rng) {
    const Eigen::Index n = points.rows();
    Matrix centroids(k, points.cols());
    centroids.row(0) = points.row(Eigen::Index(rng.below(std::uint64_t(n))));
    std::vector<double> d2(std::size_t(n), 0.0);
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (int j = 0; j < c; ++j)
                best = std::min(best, (points.row(i) - centroids.row(j)).squaredNorm());
            d2[std::size_t(i)] = best;
            total += best;
        }
        if (total <= 0.0) {
            centroids.row(c) = points.row(Eigen::Index(rng.below(std::uint64_t(n))));
            continue;
        }
        double target = rng.uniform() * total;
        Eigen::Index pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
            target -= d2[std::size_t(i)];
            if (target <= 0.0) {
                pick = i;
                break;
            }
        }
        centroids.row(c) = points.row(pick);
    }
    return centroids;
}

} // namespace detail

/// Lloyd's algorithm from a k-means++-style seeded initialization. Empty
/// clusters are re-seeded to the point farthest from its assigned centroid.
/// Terminates on an assignment fixpoint or after max_iter passes.
inline KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 100) {
    const Eigen::Index n = points.rows();
    if (k < 1)
        throw ParamError("kmeans: k must be >= 1");
    if (Eigen::Index(k) > n)
        throw ParamError("kmeans: k exceeds number of points");

    Rng rng(seed);
    KMeansResult res;
    res.centroids = detail::kmeanspp_init(points, k, rng);
    res.assignment.assign(std::size_t(n), 0);

    auto assign_pass = [&]() {
        bool changed = false;
        double sed = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int c = detail::nearest_centroid(res.centroids, points.row(i));
            if (c != res.assignment[std::size_t(i)]) {
                res.assignment[std::size_t(i)] = c;
                changed = true;
            }
            sed += (points.row(i) - res.centroids.row(c)).squaredNorm();
        }
        res.sed_trace.push_back(sed);
        return changed;
    };

    assign_pass();
    for (int iter = 1; iter < max_iter; ++iter) {
        // update step: centroids become cluster means
        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<std::size_t> counts(std::size_t(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(res.assignment[std::size_t(i)]) += points.row(i);
            ++counts[std::size_t(res.assignment[std::size_t(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[std::size_t(c)] > 0) {
                res.centroids.row(c) = sums.row(c) / double(counts[std::size_t(c)]);
            } else {
                // re-seed an empty cluster to the worst-served point
                Eigen::Index farthest = 0;
                double worst = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double d =
                        (points.row(i) - res.centroids.row(res.assignment[std::size_t(i)]))
                            .squaredNorm();
                    if (d > worst) {
                        worst = d;
                        farthest = i;
                    }
                }
                res.centroids.row(c) = points.row(farthest);
            }
        }
        if (!assign_pass())
            break;
    }
    res.sed = res.sed_trace.back();
    return res;
}

} // namespace ssdt::cluster
