#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssdt/error.hpp"

namespace ssdt::metrics {

/// Square count grid; rows index the true class, columns the predicted class.
struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<std::uint64_t>> counts;

    std::size_t n_classes() const { return classes.size(); }

    std::uint64_t at(std::size_t i, std::size_t j) const { return counts[i][j]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto& row : counts)
            for (auto v : row)
                t += v;
        return t;
    }
};

struct ClassCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

struct Interval {
    double lo = 0.0, hi = 0.0;
};

struct MetricReport {
    std::vector<std::string> classes;
    std::vector<ClassCounts> per_class;
    double macro_accuracy = 0.0;
    double macro_sensitivity = 0.0;
    double macro_specificity = 0.0;
    // classes whose SN/SP denominator was zero are excluded from the macro
    // average; these counters record how many were skipped
    int undefined_sensitivity = 0;
    int undefined_specificity = 0;
    std::vector<std::optional<double>> per_class_auc; // empty unless filled by caller
    std::optional<Interval> accuracy_ci;              // CI of the overall correct proportion
    std::vector<std::optional<Interval>> sensitivity_ci;
    std::vector<std::optional<Interval>> specificity_ci;
};

inline ConfusionMatrix confusion(const std::vector<std::string>& truth,
                                 const std::vector<std::string>& predicted,
                                 const std::vector<std::string>& class_set) {
    if (truth.size() != predicted.size())
        throw ParamError("confusion: label lists differ in length");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < class_set.size(); ++i)
        index[class_set[i]] = i;
    ConfusionMatrix m;
    m.classes = class_set;
    m.counts.assign(class_set.size(), std::vector<std::uint64_t>(class_set.size(), 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        auto ti = index.find(truth[i]);
        auto pi = index.find(predicted[i]);
        if (ti == index.end())
            throw SchemaError("confusion: unknown true label '" + truth[i] + "'");
        if (pi == index.end())
            throw SchemaError("confusion: unknown predicted label '" + predicted[i] + "'");
        ++m.counts[ti->second][pi->second];
    }
    return m;
}

inline ConfusionMatrix confusion(const std::vector<int>& truth,
                                 const std::vector<int>& predicted,
                                 const std::vector<std::string>& class_set) {
    if (truth.size() != predicted.size())
        throw ParamError("confusion: label lists differ in length");
    ConfusionMatrix m;
    m.classes = class_set;
    m.counts.assign(class_set.size(), std::vector<std::uint64_t>(class_set.size(), 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || std::size_t(truth[i]) >= class_set.size())
            throw SchemaError("confusion: true label index out of range");
        if (predicted[i] < 0 || std::size_t(predicted[i]) >= class_set.size())
            throw SchemaError("confusion: predicted label index out of range");
        ++m.counts[std::size_t(truth[i])][std::size_t(predicted[i])];
    }
    return m;
}

/// Per-class TP/TN/FP/FN: TP is the diagonal entry, FP the rest of the
/// column, FN the rest of the row, TN everything outside row and column i.
inline ClassCounts class_counts(const ConfusionMatrix& m, std::size_t i) {
    ClassCounts c;
    const std::size_t n = m.n_classes();
    c.tp = m.counts[i][i];
    for (std::size_t j = 0; j < n; ++j) {
        if (j == i)
            continue;
        c.fp += m.counts[j][i];
        c.fn += m.counts[i][j];
        for (std::size_t k = 0; k < n; ++k)
            if (k != i)
                c.tn += m.counts[j][k];
    }
    return c;
}

/// Macro-averaged accuracy/sensitivity/specificity. Classes with an undefined
/// rate (zero denominator) are skipped and counted in the warning fields.
inline MetricReport report(const ConfusionMatrix& m) {
    const std::uint64_t total = m.total();
    if (m.n_classes() == 0 || total == 0)
        throw ParamError("report: empty confusion matrix");

    MetricReport r;
    r.classes = m.classes;
    double acc_sum = 0.0, sn_sum = 0.0, sp_sum = 0.0;
    int sn_defined = 0, sp_defined = 0;
    for (std::size_t i = 0; i < m.n_classes(); ++i) {
        const ClassCounts c = class_counts(m, i);
        r.per_class.push_back(c);
        acc_sum += double(c.tp + c.tn) / double(total);
        if (c.tp + c.fn > 0) {
            sn_sum += double(c.tp) / double(c.tp + c.fn);
            ++sn_defined;
        } else {
            ++r.undefined_sensitivity;
        }
        if (c.tn + c.fp > 0) {
            sp_sum += double(c.tn) / double(c.tn + c.fp);
            ++sp_defined;
        } else {
            ++r.undefined_specificity;
        }
    }
    r.macro_accuracy = acc_sum / double(m.n_classes());
    r.macro_sensitivity = sn_defined > 0 ? sn_sum / sn_defined : std::nan("");
    r.macro_specificity = sp_defined > 0 ? sp_sum / sp_defined : std::nan("");
    return r;
}

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

struct RocCurve {
    std::vector<std::pair<double, double>> points; // (fpr, tpr)
    double auc = 0.0;
};

/// Threshold sweep over the distinct scores, AUC by the trapezoid rule. The
/// area is accumulated as an exact integer numerator over 2*P*N, which makes
/// it identical to the Mann-Whitney pair statistic with ties credited 1/2.
inline RocCurve roc_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
    if (labels.size() != scores.size())
        throw ParamError("roc_auc: labels and scores differ in length");
    std::uint64_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y != 0 && y != 1)
            throw ParamError("roc_auc: labels must be 0 or 1");
        y == 1 ? ++pos : ++neg;
    }
    if (pos == 0 || neg == 0)
        throw ParamError("roc_auc: both classes must be present");

    std::vector<std::size_t> order(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    RocCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    std::uint64_t tp = 0, fp = 0;
    std::uint64_t numerator = 0; // 2 * P * N * AUC
    std::size_t i = 0;
    while (i < order.size()) {
        // group samples sharing a score so ties move diagonally in one step
        const double s = scores[order[i]];
        std::uint64_t dp = 0, dn = 0;
        while (i < order.size() && scores[order[i]] == s) {
            labels[order[i]] == 1 ? ++dp : ++dn;
            ++i;
        }
        numerator += dn * (2 * tp + dp);
        tp += dp;
        fp += dn;
        curve.points.emplace_back(double(fp) / double(neg), double(tp) / double(pos));
    }
    curve.auc = double(numerator) / (2.0 * double(pos) * double(neg));
    return curve;
}

// ---------------------------------------------------------------------------
// Confidence intervals
// ---------------------------------------------------------------------------

/// Inverse standard normal CDF (Acklam's rational approximation,
/// |relative error| < 1.2e-9).
inline double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw ParamError("inverse_normal_cdf: p must lie in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double p_low = 0.02425, p_high = 1.0 - p_low;
    double q, r;
    if (p < p_low) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p <= p_high) {
        q = p - 0.5;
        r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
}

/// Wilson score interval for a binomial proportion.
inline Interval confidence_interval(std::uint64_t successes, std::uint64_t trials,
                                    double level = 0.95) {
    if (trials == 0)
        throw ParamError("confidence_interval: trials must be >= 1");
    if (successes > trials)
        throw ParamError("confidence_interval: successes exceed trials");
    if (!(level > 0.0 && level < 1.0))
        throw ParamError("confidence_interval: level must lie in (0,1)");
    const double z = inverse_normal_cdf(0.5 + level / 2.0);
    const double n = double(trials);
    const double phat = double(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (phat + z2 / (2.0 * n)) / denom;
    const double half = z * std::sqrt(phat * (1.0 - phat) / n + z2 / (4.0 * n * n)) / denom;
    Interval ci;
    ci.lo = std::max(0.0, center - half);
    ci.hi = std::min(1.0, center + half);
    return ci;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json interval_json(const std::optional<Interval>& ci) {
    if (!ci)
        return nullptr;
    return nlohmann::json{{"lo", ci->lo}, {"hi", ci->hi}};
}

inline nlohmann::json finite_or_null(double v) {
    if (std::isfinite(v))
        return v;
    return nullptr;
}

} // namespace detail

inline nlohmann::json to_json(const ConfusionMatrix& m) {
    return nlohmann::json{{"classes", m.classes}, {"counts", m.counts}};
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j;
    j["classes"] = r.classes;
    j["macro"] = {{"accuracy", detail::finite_or_null(r.macro_accuracy)},
                  {"sensitivity", detail::finite_or_null(r.macro_sensitivity)},
                  {"specificity", detail::finite_or_null(r.macro_specificity)}};
    j["undefined"] = {{"sensitivity", r.undefined_sensitivity},
                      {"specificity", r.undefined_specificity}};
    j["per_class"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.per_class.size(); ++i) {
        const auto& c = r.per_class[i];
        nlohmann::json jc{{"class", r.classes[i]},
                          {"tp", c.tp},
                          {"tn", c.tn},
                          {"fp", c.fp},
                          {"fn", c.fn}};
        if (i < r.per_class_auc.size() && r.per_class_auc[i])
            jc["auc"] = *r.per_class_auc[i];
        if (i < r.sensitivity_ci.size())
            jc["sensitivity_ci"] = detail::interval_json(r.sensitivity_ci[i]);
        if (i < r.specificity_ci.size())
            jc["specificity_ci"] = detail::interval_json(r.specificity_ci[i]);
        j["per_class"].push_back(std::move(jc));
    }
    j["accuracy_ci"] = detail::interval_json(r.accuracy_ci);
    return j;
}

/// Plain-text aligned table of the report.
inline std::string to_text(const MetricReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "macro accuracy    " << r.macro_accuracy << "\n";
    os << "macro sensitivity " << r.macro_sensitivity;
    if (r.undefined_sensitivity > 0)
        os << "  (" << r.undefined_sensitivity << " class(es) undefined, excluded)";
    os << "\n";
    os << "macro specificity " << r.macro_specificity;
    if (r.undefined_specificity > 0)
        os << "  (" << r.undefined_specificity << " class(es) undefined, excluded)";
    os << "\n";
    if (r.accuracy_ci)
        os << "accuracy 95% CI   [" << r.accuracy_ci->lo << ", " << r.accuracy_ci->hi << "]\n";

    std::size_t w = 5;
    for (const auto& c : r.classes)
        w = std::max(w, c.size());
    os << "\n" << std::left << std::setw(int(w) + 2) << "class" << std::right
       << std::setw(8) << "TP" << std::setw(8) << "TN" << std::setw(8) << "FP"
       << std::setw(8) << "FN";
    if (!r.per_class_auc.empty())
        os << std::setw(10) << "AUC";
    os << "\n";
    for (std::size_t i = 0; i < r.per_class.size(); ++i) {
        const auto& c = r.per_class[i];
        os << std::left << std::setw(int(w) + 2) << r.classes[i] << std::right
           << std::setw(8) << c.tp << std::setw(8) << c.tn << std::setw(8) << c.fp
           << std::setw(8) << c.fn;
        if (i < r.per_class_auc.size() && r.per_class_auc[i])
            os << std::setw(10) << *r.per_class_auc[i];
        os << "\n";
    }
    return os.str();
}

/// CSV with header "fpr,tpr", one point per line.
inline std::string roc_to_csv(const RocCurve& curve) {
    std::ostringstream os;
    os << "fpr,tpr\n";
    os << std::setprecision(17);
    for (const auto& [fpr, tpr] : curve.points)
        os << fpr << "," << tpr << "\n";
    return os.str();
}

} // namespace ssdt::metrics
