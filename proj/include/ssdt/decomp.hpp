#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "ssdt/cluster.hpp"
#include "ssdt/error.hpp"
#include "ssdt/rng.hpp"

namespace ssdt::decomp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaModel {
    Vector mean;
    Matrix components;          // m x d, orthonormal rows, descending variance
    Vector explained_variance;  // all d eigenvalues, descending
    int retained = 0;
    bool degenerate = false;    // input had zero variance

    int input_dim() const { return int(mean.size()); }
};

struct RetainPolicy {
    enum class Kind { dim, variance } kind = Kind::variance;
    int target_dim = 0;
    double fraction = 0.95;

    static RetainPolicy dim(int d) {
        if (d < 1)
            throw ParamError("RetainPolicy: target dimension must be >= 1");
        return {Kind::dim, d, 0.0};
    }
    static RetainPolicy variance(double f) {
        if (!(f > 0.0 && f <= 1.0))
            throw ParamError("RetainPolicy: variance fraction must lie in (0,1]");
        return {Kind::variance, 0, f};
    }
};

/// Fits PCA via eigendecomposition of the sample covariance. Component signs
/// are fixed by making each row's largest-magnitude entry positive, which
/// keeps the model deterministic.
inline PcaModel pca_fit(const Matrix& features, const RetainPolicy& retain) {
    const Eigen::Index n = features.rows();
    const Eigen::Index d = features.cols();
    if (n < 2)
        throw ParamError("pca_fit: need at least 2 samples");
    if (d < 1)
        throw ParamError("pca_fit: need at least 1 feature dimension");

    PcaModel model;
    model.mean = features.colwise().mean();
    Matrix centered = features.rowwise() - model.mean.transpose();
    Matrix cov = (centered.adjoint() * centered) / double(n - 1);

    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    if (solver.info() != Eigen::Success)
        throw ParamError("pca_fit: eigendecomposition failed");

    // Eigen returns ascending order; flip to descending.
    model.explained_variance = solver.eigenvalues().reverse();
    Matrix comps = solver.eigenvectors().rowwise().reverse().transpose(); // rows = components
    for (Eigen::Index i = 0; i < d; ++i) {
        if (model.explained_variance(i) < 0.0)
            model.explained_variance(i) = 0.0; // numerical dust
        Eigen::Index arg = 0;
        comps.row(i).cwiseAbs().maxCoeff(&arg);
        if (comps(i, arg) < 0.0)
            comps.row(i) = -comps.row(i);
    }

    const double total = model.explained_variance.sum();
    if (total <= 0.0) {
        model.degenerate = true;
        model.retained = 1;
    } else if (retain.kind == RetainPolicy::Kind::dim) {
        model.retained = int(std::min<Eigen::Index>(retain.target_dim, d));
    } else {
        double cum = 0.0;
        int m = int(d);
        for (Eigen::Index i = 0; i < d; ++i) {
            cum += model.explained_variance(i);
            if (cum / total >= retain.fraction) {
                m = int(i) + 1;
                break;
            }
        }
        model.retained = m;
    }
    model.components = comps.topRows(model.retained);
    return model;
}

/// Rows of the result are (x - mean) * components^T.
inline Matrix pca_project(const PcaModel& model, const Matrix& features) {
    if (features.cols() != model.mean.size())
        throw ShapeError("pca_project: feature dimension does not match model");
    return (features.rowwise() - model.mean.transpose()) * model.components.transpose();
}

// ---------------------------------------------------------------------------
// Class decomposition / composition
// ---------------------------------------------------------------------------

/// Bijective bookkeeping between c' parent classes and c'*k subclasses.
/// Subclass index = parent_index * k + cluster id.
struct DecompositionMap {
    std::vector<std::string> parents;
    int k = 1;
    std::vector<std::string> subclasses;
    std::vector<int> parent_of; // subclass index -> parent index

    int n_parents() const { return int(parents.size()); }
    int n_subclasses() const { return int(subclasses.size()); }

    static DecompositionMap identity(const std::vector<std::string>& parents) {
        DecompositionMap map;
        map.parents = parents;
        map.k = 1;
        map.subclasses = parents;
        map.parent_of.resize(parents.size());
        for (std::size_t i = 0; i < parents.size(); ++i)
            map.parent_of[i] = int(i);
        return map;
    }

    void validate() const {
        if (k < 1)
            throw ParamError("DecompositionMap: k must be >= 1");
        if (subclasses.size() != parents.size() * std::size_t(k))
            throw ParamError("DecompositionMap: expected c'*k subclasses");
        std::vector<int> seen(parents.size(), 0);
        for (std::size_t s = 0; s < parent_of.size(); ++s) {
            const int p = parent_of[s];
            if (p < 0 || std::size_t(p) >= parents.size())
                throw ParamError("DecompositionMap: parent index out of range");
            ++seen[std::size_t(p)];
        }
        for (int count : seen)
            if (count != k)
                throw ParamError("DecompositionMap: each parent needs exactly k subclasses");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["parents"] = parents;
        j["k"] = k;
        j["subclasses"] = nlohmann::json::array();
        for (std::size_t s = 0; s < subclasses.size(); ++s)
            j["subclasses"].push_back(
                {{"name", subclasses[s]}, {"parent", parents[std::size_t(parent_of[s])]}});
        return j;
    }

    static DecompositionMap from_json(const nlohmann::json& j) {
        DecompositionMap map;
        map.parents = j.at("parents").get<std::vector<std::string>>();
        map.k = j.at("k").get<int>();
        for (const auto& js : j.at("subclasses")) {
            map.subclasses.push_back(js.at("name").get<std::string>());
            const auto parent = js.at("parent").get<std::string>();
            const auto it = std::find(map.parents.begin(), map.parents.end(), parent);
            if (it == map.parents.end())
                throw SchemaError("DecompositionMap: unknown parent '" + parent + "'");
            map.parent_of.push_back(int(it - map.parents.begin()));
        }
        map.validate();
        return map;
    }
};

struct Decomposition {
    std::vector<int> sublabels; // per sample, index into map.subclasses
    DecompositionMap map;
};

/// Splits each parent class into k subclasses by clustering that class's
/// feature rows with k-means. Sample count and per-parent membership are
/// preserved; each parent's k-means uses a seed derived from (seed, parent).
inline Decomposition decompose(const Matrix& features, const std::vector<int>& labels,
                               const std::vector<std::string>& parents, int k,
                               std::uint64_t seed) {
    if (std::size_t(features.rows()) != labels.size())
        throw ShapeError("decompose: one feature row per label required");
    if (k < 1)
        throw ParamError("decompose: k must be >= 1");

    Decomposition out;
    out.map.parents = parents;
    out.map.k = k;
    out.map.subclasses.reserve(parents.size() * std::size_t(k));
    for (std::size_t p = 0; p < parents.size(); ++p)
        for (int c = 0; c < k; ++c) {
            out.map.subclasses.push_back(parents[p] + "." + std::to_string(c));
            out.map.parent_of.push_back(int(p));
        }
    out.sublabels.assign(labels.size(), -1);

    for (std::size_t p = 0; p < parents.size(); ++p) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || std::size_t(labels[i]) >= parents.size())
                throw ParamError("decompose: label index out of range");
            if (std::size_t(labels[i]) == p)
                members.push_back(i);
        }
        if (members.size() < std::size_t(k))
            throw DecompositionError("decompose: class '" + parents[p] + "' has " +
                                     std::to_string(members.size()) +
                                     " samples, fewer than k=" + std::to_string(k));
        Matrix rows(members.size(), features.cols());
        for (std::size_t r = 0; r < members.size(); ++r)
            rows.row(Eigen::Index(r)) = features.row(Eigen::Index(members[r]));
        const auto km = cluster::kmeans(rows, k, derived_seed(seed, 0x44000 + p));
        for (std::size_t r = 0; r < members.size(); ++r)
            out.sublabels[members[r]] = int(p) * k + km.assignment[r];
    }
    return out;
}

enum class ComposeMode { argmax_then_map, sum_then_argmax };

inline ComposeMode compose_mode_from_name(const std::string& name) {
    if (name == "argmax_then_map")
        return ComposeMode::argmax_then_map;
    if (name == "sum_then_argmax")
        return ComposeMode::sum_then_argmax;
    throw ConfigError("unknown compose mode: " + name);
}

/// Maps subclass probability rows back to parent-class predictions. Ties
/// break to the lowest index in both modes.
inline std::vector<int> compose(const Matrix& probabilities, const DecompositionMap& map,
                                ComposeMode mode = ComposeMode::argmax_then_map) {
    if (probabilities.cols() != map.n_subclasses())
        throw ShapeError("compose: row width does not match subclass count");
    std::vector<int> parents(std::size_t(probabilities.rows()));
    for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
        if (mode == ComposeMode::argmax_then_map) {
            int best = 0;
            double best_p = probabilities(i, 0);
            for (Eigen::Index j = 1; j < probabilities.cols(); ++j)
                if (probabilities(i, j) > best_p) {
                    best_p = probabilities(i, j);
                    best = int(j);
                }
            parents[std::size_t(i)] = map.parent_of[std::size_t(best)];
        } else {
            int best = 0;
            double best_p = -1.0;
            for (int p = 0; p < map.n_parents(); ++p) {
                double sum = 0.0;
                for (int s = 0; s < map.n_subclasses(); ++s)
                    if (map.parent_of[std::size_t(s)] == p)
                        sum += probabilities(i, s);
                if (sum > best_p) {
                    best_p = sum;
                    best = p;
                }
            }
            parents[std::size_t(i)] = best;
        }
    }
    return parents;
}

} // namespace ssdt::decomp
