#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ssdt/autoenc.hpp"
#include "ssdt/netcore.hpp"

namespace ssdt::gradcheck {

struct GroupResult {
    std::string name;
    double max_rel_err = 0.0;
};

struct Report {
    std::vector<GroupResult> groups;
    double threshold = 0.0;

    double worst() const {
        double w = 0.0;
        for (const auto& g : groups)
            w = std::max(w, g.max_rel_err);
        return w;
    }
    bool passed() const { return worst() < threshold; }
};

inline double relative_error(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / scale;
}

/// Central difference with step refinement. ReLU puts kinks in the loss; a
/// kink inside the sampling interval invalidates the difference quotient, so
/// on disagreement the step shrinks and the best estimate wins. A genuinely
/// wrong analytic gradient keeps its error at every step size, so refinement
/// cannot hide a bug.
template <typename LossFn>
double fd_error(double& entry, double analytic, double step, const LossFn& loss) {
    double best = std::numeric_limits<double>::infinity();
    const double saved = entry;
    for (int refine = 0; refine < 3 && !(best < 1e-7); ++refine) {
        const double h = step / std::pow(4.0, refine);
        entry = saved + h;
        const double hi = loss();
        entry = saved - h;
        const double lo = loss();
        entry = saved;
        best = std::min(best, relative_error(analytic, (hi - lo) / (2.0 * h)));
    }
    return best;
}

/// Central finite differences vs analytic gradients of the autoencoder cost.
/// One result group per weight matrix / bias vector.
inline Report check_autoencoder(int input_dim, int hidden, int code, int n_samples,
                                double lambda, double step, std::uint64_t seed,
                                bool corrupt = false) {
    Rng rng = Rng::derive(seed, 0x6C);
    autoenc::AutoencoderParams params =
        autoenc::ae_init(input_dim, autoenc::Activation::sigmoid, seed, hidden, code);
    autoenc::Matrix data(n_samples, input_dim);
    for (Eigen::Index i = 0; i < data.rows(); ++i)
        for (Eigen::Index j = 0; j < data.cols(); ++j)
            data(i, j) = rng.uniform();

    autoenc::AeGradient analytic = autoenc::ae_gradient(params, data, lambda);
    if (corrupt)
        analytic.w[0](0, 0) += 1.0;

    Report report;
    report.threshold = 1e-4;
    const auto loss = [&]() { return autoenc::ae_loss(params, data, lambda); };
    for (int l = 0; l < 4; ++l) {
        GroupResult gw{"w" + std::to_string(l), 0.0};
        for (Eigen::Index i = 0; i < params.w[l].rows(); ++i)
            for (Eigen::Index j = 0; j < params.w[l].cols(); ++j)
                gw.max_rel_err = std::max(
                    gw.max_rel_err, fd_error(params.w[l](i, j), analytic.w[l](i, j), step, loss));
        report.groups.push_back(gw);

        GroupResult gb{"b" + std::to_string(l), 0.0};
        for (Eigen::Index i = 0; i < params.b[l].size(); ++i)
            gb.max_rel_err = std::max(gb.max_rel_err,
                                      fd_error(params.b[l](i), analytic.b[l](i), step, loss));
        report.groups.push_back(gb);
    }
    return report;
}

/// Central finite differences vs analytic gradients of the classifier's
/// training-mode cross-entropy (batch statistics active). One result group
/// per parameter group (stem, blocks, head).
inline Report check_classifier(const netcore::NetworkSpec& spec, int n_samples, double step,
                               std::uint64_t seed, bool corrupt = false) {
    spec.validate();
    netcore::ModelParams params = netcore::model_init(spec, seed);
    Rng rng = Rng::derive(seed, 0x6D);
    netcore::Batch batch(n_samples, spec.input_channels, spec.input_h, spec.input_w);
    for (double& v : batch.v)
        v = rng.uniform();
    std::vector<int> targets(std::size_t(n_samples), 0);
    for (auto& t : targets)
        t = int(rng.below(std::uint64_t(spec.n_classes)));

    netcore::ModelParams analytic = netcore::training_gradient(params, batch, targets);
    if (corrupt)
        analytic.head.w(0, 0) += 1.0;

    Report report;
    report.threshold = 1e-3;
    report.groups.resize(std::size_t(spec.n_groups()));
    for (int g = 0; g < spec.n_groups(); ++g)
        report.groups[std::size_t(g)].name = spec.group_name(g);

    const auto loss = [&]() { return netcore::training_loss(params, batch, targets); };
    auto p_refs = netcore::collect_tensors(params);
    auto a_refs = netcore::collect_tensors(analytic);
    for (std::size_t t = 0; t < p_refs.size(); ++t) {
        if (!p_refs[t].trainable)
            continue;
        GroupResult& group = report.groups[std::size_t(p_refs[t].group)];
        for (std::size_t k = 0; k < p_refs[t].size; ++k)
            group.max_rel_err = std::max(
                group.max_rel_err, fd_error(p_refs[t].data[k], a_refs[t].data[k], step, loss));
    }
    return report;
}

} // namespace ssdt::gradcheck
