#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "ssdt/metrics.hpp"
#include "ssdt/rng.hpp"

using namespace ssdt;
using namespace ssdt::metrics;

namespace {

ConfusionMatrix fixture_matrix() {
    ConfusionMatrix m;
    m.classes = {"a", "b", "c"};
    m.counts = {{5, 1, 0}, {0, 4, 0}, {2, 0, 8}};
    return m;
}

ConfusionMatrix random_matrix(Rng& rng, std::size_t n_classes, std::uint64_t max_count) {
    ConfusionMatrix m;
    for (std::size_t i = 0; i < n_classes; ++i)
        m.classes.push_back("c" + std::to_string(i));
    m.counts.assign(n_classes, std::vector<std::uint64_t>(n_classes, 0));
    for (auto& row : m.counts)
        for (auto& v : row)
            v = rng.below(max_count);
    return m;
}

} // namespace

TEST_CASE("hand-worked confusion fixture") {
    const auto m = fixture_matrix();
    const auto c0 = class_counts(m, 0);
    CHECK(c0.tp == 5);
    CHECK(c0.fn == 1);
    CHECK(c0.fp == 2);
    CHECK(c0.tn == 12);

    const auto r = report(m);
    CHECK_THAT(r.macro_accuracy, Catch::Matchers::WithinAbs(0.9, 1e-12));
    CHECK_THAT(r.macro_sensitivity,
               Catch::Matchers::WithinAbs((5.0 / 6.0 + 1.0 + 0.8) / 3.0, 1e-12));
    CHECK_THAT(r.macro_specificity,
               Catch::Matchers::WithinAbs((12.0 / 14.0 + 15.0 / 16.0 + 1.0) / 3.0, 1e-12));
}

TEST_CASE("confusion assembles counts from label lists") {
    const std::vector<std::string> truth{"a", "a", "b", "c", "c"};
    const std::vector<std::string> pred{"a", "b", "b", "c", "a"};
    const auto m = confusion(truth, pred, {"a", "b", "c"});
    CHECK(m.at(0, 0) == 1);
    CHECK(m.at(0, 1) == 1);
    CHECK(m.at(1, 1) == 1);
    CHECK(m.at(2, 2) == 1);
    CHECK(m.at(2, 0) == 1);
    CHECK(m.total() == 5);

    CHECK_THROWS_AS(confusion(truth, std::vector<std::string>{"a"}, {"a", "b", "c"}), ParamError);
    CHECK_THROWS_AS(confusion({"zzz"}, {"a"}, {"a", "b", "c"}), SchemaError);
}

TEST_CASE("perfect predictions give a diagonal matrix and unit rates") {
    const std::vector<int> labels{0, 1, 2, 1, 0, 2};
    const auto m = confusion(labels, labels, {"x", "y", "z"});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j)
                CHECK(m.at(i, j) == 0);
    const auto r = report(m);
    CHECK(r.macro_accuracy == 1.0);
    CHECK(r.macro_sensitivity == 1.0);
    CHECK(r.macro_specificity == 1.0);
    for (const auto& c : r.per_class) {
        CHECK(c.fp == 0);
        CHECK(c.fn == 0);
    }
}

TEST_CASE("swapping one prediction moves two units of count mass") {
    std::vector<int> truth{0, 1, 2, 1};
    std::vector<int> pred{0, 1, 2, 1};
    const auto before = confusion(truth, pred, {"a", "b", "c"});
    pred[3] = 2;
    const auto after = confusion(truth, pred, {"a", "b", "c"});
    std::uint64_t delta = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            delta += std::max(before.at(i, j), after.at(i, j)) -
                     std::min(before.at(i, j), after.at(i, j));
    CHECK(delta == 2);
}

TEST_CASE("count identities hold on random matrices") {
    Rng rng(42);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(5);
        auto m = random_matrix(rng, n, 20);
        if (m.total() == 0)
            m.counts[0][0] = 1;
        const std::uint64_t total = m.total();
        std::uint64_t trace = 0, tp_sum = 0;
        for (std::size_t i = 0; i < n; ++i)
            trace += m.at(i, i);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = class_counts(m, i);
            tp_sum += c.tp;
            std::uint64_t row = 0, col = 0;
            for (std::size_t j = 0; j < n; ++j) {
                row += m.at(i, j);
                col += m.at(j, i);
            }
            REQUIRE(c.tp + c.fp == col);
            REQUIRE(c.tp + c.fn == row);
            REQUIRE(c.tp + c.tn + c.fp + c.fn == total);
        }
        REQUIRE(tp_sum == trace);
    }
}

TEST_CASE("report is invariant under simultaneous class permutation") {
    Rng rng(17);
    auto m = random_matrix(rng, 4, 30);
    m.counts[0][0] += 1;
    const auto base = report(m);

    // rotate classes by one
    ConfusionMatrix p;
    p.classes = {"c1", "c2", "c3", "c0"};
    p.counts.assign(4, std::vector<std::uint64_t>(4, 0));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            p.counts[(i + 3) % 4][(j + 3) % 4] = m.counts[i][j];
    const auto rotated = report(p);
    CHECK_THAT(rotated.macro_accuracy, Catch::Matchers::WithinAbs(base.macro_accuracy, 1e-12));
    CHECK_THAT(rotated.macro_sensitivity,
               Catch::Matchers::WithinAbs(base.macro_sensitivity, 1e-12));
    CHECK_THAT(rotated.macro_specificity,
               Catch::Matchers::WithinAbs(base.macro_specificity, 1e-12));
}

TEST_CASE("classes without true samples are excluded with a warning") {
    ConfusionMatrix m;
    m.classes = {"a", "b"};
    m.counts = {{3, 1}, {0, 0}}; // class b never occurs
    const auto r = report(m);
    CHECK(r.undefined_sensitivity == 1);
    CHECK_THAT(r.macro_sensitivity, Catch::Matchers::WithinAbs(0.75, 1e-12));
}

TEST_CASE("report rejects an all-zero matrix") {
    ConfusionMatrix m;
    m.classes = {"a", "b"};
    m.counts = {{0, 0}, {0, 0}};
    CHECK_THROWS_AS(report(m), ParamError);
}

TEST_CASE("roc basics") {
    SECTION("perfect separation") {
        const auto roc = roc_auc({1, 1, 0, 0}, {0.9, 0.8, 0.2, 0.1});
        CHECK(roc.auc == 1.0);
        CHECK(roc.points.front() == std::pair<double, double>(0.0, 0.0));
        CHECK(roc.points.back() == std::pair<double, double>(1.0, 1.0));
    }
    SECTION("symmetric ties give exactly one half") {
        const auto roc = roc_auc({1, 1, 0, 0}, {0.4, 0.6, 0.4, 0.6});
        CHECK(roc.auc == 0.5);
    }
    SECTION("reversing scores flips the area") {
        const std::vector<int> labels{1, 0, 1, 0, 1, 0, 0};
        const std::vector<double> scores{0.9, 0.3, 0.55, 0.52, 0.2, 0.2, 0.8};
        std::vector<double> reversed;
        for (double s : scores)
            reversed.push_back(-s);
        const double a = roc_auc(labels, scores).auc;
        const double b = roc_auc(labels, reversed).auc;
        CHECK_THAT(a + b, Catch::Matchers::WithinAbs(1.0, 1e-15));
    }
    SECTION("single-class input is an error") {
        CHECK_THROWS_AS(roc_auc({1, 1}, {0.5, 0.2}), ParamError);
        CHECK_THROWS_AS(roc_auc({0, 0}, {0.5, 0.2}), ParamError);
    }
}

TEST_CASE("roc equals the Mann-Whitney statistic exactly") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(49);
        std::vector<int> labels(n);
        std::vector<double> scores(n);
        bool any_pos = false, any_neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = int(rng.below(2));
            labels[i] ? any_pos = true : any_neg = true;
            // coarse grid forces plenty of ties
            scores[i] = double(rng.below(8)) / 8.0;
        }
        if (!any_pos)
            labels[0] = 1;
        if (!any_neg)
            labels[n - 1] = 0;
        const double impl = roc_auc(labels, scores).auc;
        const double ref = oracle::mann_whitney_auc(labels, scores);
        REQUIRE(impl == ref); // exact: both divide the same integer numerator
    }
}

TEST_CASE("wilson interval fixtures") {
    SECTION("zero successes anchors the lower bound at zero") {
        const auto ci = confidence_interval(0, 10);
        CHECK(ci.lo == 0.0);
        CHECK(ci.hi > 0.0);
    }
    SECTION("50 of 100 at 95%") {
        const auto ci = confidence_interval(50, 100, 0.95);
        CHECK_THAT(ci.lo, Catch::Matchers::WithinAbs(0.4038, 1e-3));
        CHECK_THAT(ci.hi, Catch::Matchers::WithinAbs(0.5962, 1e-3));
    }
    SECTION("interval width shrinks with trials") {
        const auto narrow = confidence_interval(500000, 1000000);
        CHECK(narrow.hi - narrow.lo < 0.005);
    }
    SECTION("bounds stay in [0,1] and bracket the point estimate") {
        Rng rng(5);
        for (int t = 0; t < 50; ++t) {
            const std::uint64_t trials = 1 + rng.below(400);
            const std::uint64_t successes = rng.below(trials + 1);
            const auto ci = confidence_interval(successes, trials);
            const double phat = double(successes) / double(trials);
            REQUIRE(ci.lo >= 0.0);
            REQUIRE(ci.hi <= 1.0);
            REQUIRE(ci.lo <= phat + 1e-12);
            REQUIRE(ci.hi >= phat - 1e-12);
        }
    }
    SECTION("z value for the default level") {
        CHECK_THAT(inverse_normal_cdf(0.975), Catch::Matchers::WithinAbs(1.959964, 1e-6));
    }
    SECTION("argument validation") {
        CHECK_THROWS_AS(confidence_interval(1, 0), ParamError);
        CHECK_THROWS_AS(confidence_interval(5, 4), ParamError);
    }
}

TEST_CASE("emission formats") {
    const auto r = report(fixture_matrix());
    const auto j = to_json(r);
    CHECK(j["macro"]["accuracy"].get<double>() == Catch::Approx(0.9));
    CHECK(j["per_class"].size() == 3);

    const std::string text = to_text(r);
    CHECK(text.find("macro accuracy") != std::string::npos);
    CHECK(text.find("0.9000") != std::string::npos);

    const auto roc = roc_auc({1, 0}, {0.8, 0.2});
    const std::string csv = roc_to_csv(roc);
    CHECK(csv.rfind("fpr,tpr\n", 0) == 0);
}
