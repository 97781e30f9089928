#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssdt/autoenc.hpp"
#include "ssdt/cluster.hpp"
#include "ssdt/config.hpp"
#include "ssdt/corpus.hpp"
#include "ssdt/decomp.hpp"
#include "ssdt/error.hpp"
#include "ssdt/metrics.hpp"
#include "ssdt/netcore.hpp"

namespace ssdt::pipeline {

namespace fs = std::filesystem;

// Derived-stream ids; every phase draws its randomness from
// derived_seed(config.seed, <id>) so reruns and phase re-execution are
// bit-identical.
namespace stream {
constexpr std::uint64_t kAugment = 1;
constexpr std::uint64_t kAeTrain = 2;
constexpr std::uint64_t kPretextSplit = 3;
constexpr std::uint64_t kCoarseInit = 4;
constexpr std::uint64_t kCoarseTrain = 5;
constexpr std::uint64_t kDecompose = 6;
constexpr std::uint64_t kTransplant = 7;
constexpr std::uint64_t kFineTrain = 8;
} // namespace stream

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f)
        throw IoError("cannot write: " + path.string());
    f << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json trace_json(const netcore::TrainTrace& t) {
    nlohmann::json j{{"loss", t.loss}, {"accuracy", t.accuracy}, {"lr", t.lr}};
    if (!t.validation.empty())
        j["validation"] = t.validation;
    return j;
}

} // namespace detail

/// Loads or generates the corpus a source describes.
inline corpus::Corpus materialize(const CorpusSource& source, const std::string& what) {
    if (source.manifest)
        return corpus::load_manifest(*source.manifest);
    if (source.synthetic)
        return corpus::generate_synthetic(*source.synthetic);
    throw ConfigError("config.data." + what + ": no corpus source given");
}

// ---------------------------------------------------------------------------
// Pretext phase
// ---------------------------------------------------------------------------

struct PretextResult {
    fs::path ae_checkpoint;
    fs::path pseudo_dir;
    fs::path coarse_checkpoint;
    int n_clusters = 0;
    int noise_count = 0;
    double eps_used = 0.0;
    int min_pts_used = 0;
    double pretext_accuracy = 0.0;
    nlohmann::json record;
};

/// Autoencoder training, DBSCAN pseudo-labeling and coarse classifier
/// training on the pseudo-labeled split.
inline PretextResult run_pretext(const PipelineConfig& cfg, const corpus::Corpus& unlabeled_in,
                                 const fs::path& dir, bool verbose = false) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(dir);
    const corpus::Corpus unlabeled = unlabeled_in.labeled() ? unlabeled_in.without_labels()
                                                            : unlabeled_in;
    if (unlabeled.size() == 0)
        throw PipelineError("pretext: unlabeled corpus is empty");

    PretextResult out;

    // 1. autoencoder features
    autoenc::AeTrainConfig ae_cfg = cfg.ae;
    ae_cfg.seed = derived_seed(cfg.seed, stream::kAeTrain);
    if (verbose)
        std::cerr << "[pretext] training autoencoder on " << unlabeled.size() << " images\n";
    const auto ae = autoenc::ae_train(unlabeled, ae_cfg, cfg.ae_activation, cfg.ae_hidden,
                                      cfg.ae_code);
    out.ae_checkpoint = dir / "ae.ckpt";
    autoenc::ae_save(ae.params, out.ae_checkpoint);
    const Eigen::MatrixXd features = autoenc::ae_encode(ae.params, unlabeled);

    // 2. clustering into pseudo-labels
    out.min_pts_used = cfg.dbscan.min_pts.value_or(int(features.cols()) + 1);
    if (cfg.dbscan.eps) {
        out.eps_used = *cfg.dbscan.eps;
    } else {
        const auto curve = cluster::kdist_curve(features, std::max(1, out.min_pts_used - 1));
        out.eps_used = cluster::estimate_eps(curve);
    }
    cluster::DbscanConfig db{out.eps_used, out.min_pts_used};
    const auto pseudo = cluster::pseudo_label(unlabeled, features, db);
    out.n_clusters = pseudo.n_clusters;
    out.noise_count = pseudo.noise_count;
    if (verbose)
        std::cerr << "[pretext] eps=" << out.eps_used << " min_pts=" << out.min_pts_used
                  << " clusters=" << out.n_clusters << " noise=" << out.noise_count << "\n";

    out.pseudo_dir = dir / "pseudo";
    corpus::save_manifest(pseudo.corpus, out.pseudo_dir);
    detail::write_json(out.pseudo_dir / "clustering.json",
                       {{"eps", out.eps_used},
                        {"min_pts", out.min_pts_used},
                        {"n_clusters", out.n_clusters},
                        {"noise_count", out.noise_count}});

    // 3. coarse training on an 80/20 pseudo-label split
    Rng split_rng = Rng::derive(cfg.seed, stream::kPretextSplit);
    std::vector<std::size_t> order(pseudo.corpus.size());
    std::iota(order.begin(), order.end(), 0);
    split_rng.shuffle(order);
    const std::size_t holdout =
        std::max<std::size_t>(1, std::size_t(std::llround(double(order.size()) *
                                                          cfg.pretext_holdout)));
    if (holdout >= order.size())
        throw PipelineError("pretext: holdout fraction leaves no training samples");

    corpus::Corpus train_split, holdout_split;
    train_split.class_set = holdout_split.class_set = pseudo.corpus.class_set;
    train_split.seed = holdout_split.seed = pseudo.corpus.seed;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& target = i < holdout ? holdout_split : train_split;
        target.samples.push_back(pseudo.corpus.samples[order[i]]);
    }

    const auto& first = unlabeled.samples.front().image;
    netcore::NetworkSpec spec;
    spec.input_h = first.height;
    spec.input_w = first.width;
    spec.stem_channels = cfg.stem_channels;
    spec.blocks = cfg.blocks;
    spec.n_classes = pseudo.n_clusters;
    spec.validate();

    netcore::ModelParams init =
        netcore::model_init(spec, derived_seed(cfg.seed, stream::kCoarseInit));
    netcore::TrainConfig coarse_cfg = cfg.coarse;
    coarse_cfg.seed = derived_seed(cfg.seed, stream::kCoarseTrain);
    if (verbose)
        std::cerr << "[pretext] coarse training on " << train_split.size() << " pseudo-labeled"
                  << " images, head width " << spec.n_classes << "\n";
    auto trained = netcore::train(init, train_split, coarse_cfg);
    trained.params.phase = netcore::Phase::coarse;

    const Eigen::MatrixXd probs = netcore::forward_all(trained.params, holdout_split);
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index arg = 0;
        probs.row(i).maxCoeff(&arg);
        if (int(arg) == holdout_split.samples[std::size_t(i)].label)
            ++correct;
    }
    out.pretext_accuracy = double(correct) / double(holdout_split.size());

    out.coarse_checkpoint = dir / "coarse.ckpt";
    netcore::save_model(trained.params, out.coarse_checkpoint, &trained.state);

    out.record = {{"ae_checkpoint", "ae.ckpt"},
                  {"pseudo_manifest", "pseudo"},
                  {"coarse_checkpoint", "coarse.ckpt"},
                  {"eps", out.eps_used},
                  {"min_pts", out.min_pts_used},
                  {"n_clusters", out.n_clusters},
                  {"noise_count", out.noise_count},
                  {"pretext_accuracy", out.pretext_accuracy},
                  {"ae_loss_trace", ae.loss_trace},
                  {"coarse_trace", detail::trace_json(trained.trace)},
                  {"wall_seconds", detail::seconds_since(t0)}};
    return out;
}

/// The no-pretext ablations replace the coarse phase by a seeded random
/// initialization saved under the same artifact name.
inline fs::path write_seeded_coarse(const PipelineConfig& cfg, const corpus::Corpus& train,
                                    const fs::path& dir) {
    fs::create_directories(dir);
    const auto& first = train.samples.front().image;
    netcore::NetworkSpec spec;
    spec.input_h = first.height;
    spec.input_w = first.width;
    spec.stem_channels = cfg.stem_channels;
    spec.blocks = cfg.blocks;
    spec.n_classes = 1; // placeholder head; transplant replaces it
    spec.validate();
    netcore::ModelParams init =
        netcore::model_init(spec, derived_seed(cfg.seed, stream::kCoarseInit));
    init.phase = netcore::Phase::coarse;
    const fs::path path = dir / "coarse.ckpt";
    netcore::save_model(init, path);
    return path;
}

// ---------------------------------------------------------------------------
// Downstream phase
// ---------------------------------------------------------------------------

struct DownstreamResult {
    fs::path fine_checkpoint;
    fs::path map_path;
    decomp::DecompositionMap map;
    int epochs = 0;
    int best_val_epoch = 0; // 0 when no validation corpus was configured
    nlohmann::json record;
};

/// Feature extraction, PCA, per-class decomposition and fine training from a
/// coarse checkpoint.
inline DownstreamResult run_downstream(const PipelineConfig& cfg, const fs::path& coarse_ckpt,
                                       const corpus::Corpus& train_in,
                                       const corpus::Corpus* validation,
                                       const fs::path& dir, bool verbose = false) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(dir);
    if (!train_in.labeled())
        throw PipelineError("downstream: training corpus must be labeled");

    const auto loaded = netcore::load_model(coarse_ckpt);
    if (loaded.params.phase != netcore::Phase::coarse)
        throw PipelineError("downstream: checkpoint does not carry the coarse phase tag: " +
                            coarse_ckpt.string());
    const netcore::ModelParams& coarse = loaded.params;

    corpus::Corpus train = train_in;
    if (cfg.augment_plan) {
        corpus::AugmentPlan plan = *cfg.augment_plan;
        if (!cfg.augment_seed_explicit)
            plan.seed = derived_seed(cfg.seed, stream::kAugment);
        train = corpus::augment(train, plan);
        if (verbose)
            std::cerr << "[downstream] augmented " << train_in.size() << " -> " << train.size()
                      << " images\n";
    }

    DownstreamResult out;
    const int k = cfg.effective_k();
    std::vector<int> labels;
    labels.reserve(train.size());
    for (const auto& s : train.samples)
        labels.push_back(s.label);

    int pca_retained = 0;
    if (k == 1) {
        out.map = decomp::DecompositionMap::identity(train.class_set);
    } else {
        const Eigen::MatrixXd feats = netcore::extract_features(coarse, train);
        const auto pca = decomp::pca_fit(feats, cfg.pca_retain);
        pca_retained = pca.retained;
        const Eigen::MatrixXd projected = decomp::pca_project(pca, feats);
        auto decomposition = decomp::decompose(projected, labels, train.class_set, k,
                                               derived_seed(cfg.seed, stream::kDecompose));
        out.map = std::move(decomposition.map);
        labels = std::move(decomposition.sublabels);
    }
    out.map_path = dir / "decomposition_map.json";
    detail::write_json(out.map_path, out.map.to_json());

    corpus::Corpus sub = train;
    sub.class_set = out.map.subclasses;
    for (std::size_t i = 0; i < sub.samples.size(); ++i)
        sub.samples[i].label = labels[i];

    netcore::ModelParams fine_init = netcore::transplant(
        coarse, out.map.n_subclasses(), derived_seed(cfg.seed, stream::kTransplant));

    netcore::TrainConfig fine_cfg = cfg.fine;
    fine_cfg.seed = derived_seed(cfg.seed, stream::kFineTrain);

    netcore::EpochCallback callback;
    if (validation) {
        if (!validation->labeled() || validation->class_set != out.map.parents)
            throw PipelineError("downstream: validation corpus classes do not match training");
        callback = [&](const netcore::ModelParams& p, int) {
            const Eigen::MatrixXd probs = netcore::forward_all(p, *validation);
            const auto predicted = decomp::compose(probs, out.map, cfg.compose_mode);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < predicted.size(); ++i)
                if (predicted[i] == validation->samples[i].label)
                    ++correct;
            return double(correct) / double(validation->size());
        };
    }

    if (verbose)
        std::cerr << "[downstream] fine training on " << sub.size() << " images, head width "
                  << out.map.n_subclasses() << " (" << fine_cfg.tuning.to_string() << ")\n";
    auto trained = netcore::train(fine_init, sub, fine_cfg, callback);
    trained.params.phase = netcore::Phase::fine;
    out.fine_checkpoint = dir / "fine.ckpt";
    netcore::save_model(trained.params, out.fine_checkpoint, &trained.state);
    out.epochs = fine_cfg.epochs;

    if (!trained.trace.validation.empty()) {
        int best = 0;
        for (std::size_t e = 1; e < trained.trace.validation.size(); ++e)
            if (trained.trace.validation[e] > trained.trace.validation[std::size_t(best)])
                best = int(e);
        out.best_val_epoch = best + 1;
    }

    out.record = {{"fine_checkpoint", "fine.ckpt"},
                  {"decomposition_map", "decomposition_map.json"},
                  {"k", k},
                  {"subclass_count", out.map.n_subclasses()},
                  {"pca_retained", pca_retained},
                  {"train_size", sub.size()},
                  {"fine_trace", detail::trace_json(trained.trace)},
                  {"best_val_epoch", out.best_val_epoch},
                  {"wall_seconds", detail::seconds_since(t0)}};
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Forward pass on the test corpus, class composition back to parent labels,
/// the metric suite and per-class one-vs-rest ROC curves. Read-only with
/// respect to the checkpoint.
inline metrics::MetricReport evaluate(const PipelineConfig& cfg, const fs::path& fine_ckpt,
                                      const decomp::DecompositionMap& map,
                                      const corpus::Corpus& test, const fs::path& dir) {
    fs::create_directories(dir);
    if (!test.labeled())
        throw PipelineError("evaluate: test corpus must be labeled");
    if (test.class_set != map.parents)
        throw PipelineError("evaluate: test class_set does not match the decomposition map");

    const auto loaded = netcore::load_model(fine_ckpt);
    const Eigen::MatrixXd probs = netcore::forward_all(loaded.params, test);
    if (probs.cols() != map.n_subclasses())
        throw PipelineError("evaluate: checkpoint head width does not match the map");
    const std::vector<int> predicted = decomp::compose(probs, map, cfg.compose_mode);

    std::vector<int> truth;
    truth.reserve(test.size());
    for (const auto& s : test.samples)
        truth.push_back(s.label);

    const auto matrix = metrics::confusion(truth, predicted, map.parents);
    metrics::MetricReport report = metrics::report(matrix);

    std::uint64_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (truth[i] == predicted[i])
            ++correct;
    report.accuracy_ci = metrics::confidence_interval(correct, truth.size());
    report.sensitivity_ci.resize(report.per_class.size());
    report.specificity_ci.resize(report.per_class.size());
    report.per_class_auc.resize(report.per_class.size());

    for (std::size_t c = 0; c < map.parents.size(); ++c) {
        const auto& counts = report.per_class[c];
        if (counts.tp + counts.fn > 0)
            report.sensitivity_ci[c] =
                metrics::confidence_interval(counts.tp, counts.tp + counts.fn);
        if (counts.tn + counts.fp > 0)
            report.specificity_ci[c] =
                metrics::confidence_interval(counts.tn, counts.tn + counts.fp);

        // one-vs-rest ROC; the parent score sums its subclass probabilities
        std::vector<int> binary(truth.size());
        bool has_pos = false, has_neg = false;
        std::vector<double> scores(truth.size());
        for (std::size_t i = 0; i < truth.size(); ++i) {
            binary[i] = truth[i] == int(c) ? 1 : 0;
            binary[i] ? has_pos = true : has_neg = true;
            double score = 0.0;
            for (int s = 0; s < map.n_subclasses(); ++s)
                if (map.parent_of[std::size_t(s)] == int(c))
                    score += probs(Eigen::Index(i), s);
            scores[i] = score;
        }
        if (has_pos && has_neg) {
            const auto roc = metrics::roc_auc(binary, scores);
            report.per_class_auc[c] = roc.auc;
            detail::write_text(dir / ("roc_" + map.parents[c] + ".csv"),
                               metrics::roc_to_csv(roc));
        }
    }

    detail::write_json(dir / "report.json",
                       {{"metrics", metrics::to_json(report)},
                        {"confusion", metrics::to_json(matrix)}});
    detail::write_text(dir / "report.txt", metrics::to_text(report));
    return report;
}

// ---------------------------------------------------------------------------
// Whole runs
// ---------------------------------------------------------------------------

struct RunResult {
    fs::path dir;
    metrics::MetricReport report;
    int best_val_epoch = 0;
    int fine_epochs = 0;
    double pretext_accuracy = 0.0;
    nlohmann::json record;
};

/// Executes the configured phases end to end and writes run_record.json.
inline RunResult run_all(const PipelineConfig& cfg, const fs::path& out_dir,
                         bool verbose = false) {
    fs::create_directories(out_dir);
    RunResult result;
    result.dir = out_dir;
    nlohmann::json& record = result.record;
    record["format_version"] = 1;
    record["config"] = cfg.resolved;
    record["ablation"] = ablation_name(cfg.ablation);

    corpus::Corpus train = materialize(cfg.train, "train");
    if (!train.labeled())
        throw PipelineError("training corpus must be labeled");

    fs::path coarse_ckpt;
    if (cfg.pretext_enabled()) {
        corpus::Corpus unlabeled = materialize(cfg.unlabeled, "unlabeled");
        const auto pretext = run_pretext(cfg, unlabeled, out_dir, verbose);
        record["pretext"] = pretext.record;
        result.pretext_accuracy = pretext.pretext_accuracy;
        coarse_ckpt = pretext.coarse_checkpoint;
    } else {
        coarse_ckpt = write_seeded_coarse(cfg, train, out_dir);
        record["pretext"] = {{"skipped", true}, {"coarse_checkpoint", "coarse.ckpt"}};
    }

    std::optional<corpus::Corpus> validation;
    if (cfg.validation.present())
        validation = materialize(cfg.validation, "validation");

    const auto downstream = run_downstream(cfg, coarse_ckpt, train,
                                           validation ? &*validation : nullptr, out_dir, verbose);
    record["downstream"] = downstream.record;
    result.best_val_epoch = downstream.best_val_epoch;
    result.fine_epochs = downstream.epochs;

    corpus::Corpus test = materialize(cfg.test, "test");
    const auto t0 = std::chrono::steady_clock::now();
    result.report = evaluate(cfg, downstream.fine_checkpoint, downstream.map, test, out_dir);
    record["evaluate"] = {{"report", "report.json"},
                          {"macro_accuracy", result.report.macro_accuracy},
                          {"macro_sensitivity", result.report.macro_sensitivity},
                          {"macro_specificity", result.report.macro_specificity},
                          {"wall_seconds", detail::seconds_since(t0)}};

    detail::write_json(out_dir / "run_record.json", record);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string variant;
    std::vector<double> acc, sn, sp;
    std::vector<int> best_val_epochs;

    static double mean(const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    }
    static double sd(const std::vector<double>& v) {
        if (v.size() < 2)
            return 0.0;
        const double m = mean(v);
        double acc2 = 0.0;
        for (double x : v)
            acc2 += (x - m) * (x - m);
        return std::sqrt(acc2 / double(v.size() - 1));
    }
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seeds"] = seeds;
        j["variants"] = nlohmann::json::array();
        for (const auto& r : rows) {
            j["variants"].push_back({{"variant", r.variant},
                                     {"acc", r.acc},
                                     {"sn", r.sn},
                                     {"sp", r.sp},
                                     {"best_val_epochs", r.best_val_epochs},
                                     {"mean_acc", AblationRow::mean(r.acc)},
                                     {"sd_acc", AblationRow::sd(r.acc)},
                                     {"mean_sn", AblationRow::mean(r.sn)},
                                     {"sd_sn", AblationRow::sd(r.sn)},
                                     {"mean_sp", AblationRow::mean(r.sp)},
                                     {"sd_sp", AblationRow::sd(r.sp)}});
        }
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4);
        os << std::left << std::setw(20) << "variant" << std::right << std::setw(18)
           << "ACC (mean+-sd)" << std::setw(18) << "SN (mean+-sd)" << std::setw(18)
           << "SP (mean+-sd)" << std::setw(16) << "epochs-to-best" << "\n";
        for (const auto& r : rows) {
            double mean_epoch = 0.0;
            for (int e : r.best_val_epochs)
                mean_epoch += e;
            if (!r.best_val_epochs.empty())
                mean_epoch /= double(r.best_val_epochs.size());
            os << std::left << std::setw(20) << r.variant << std::right << std::setw(9)
               << AblationRow::mean(r.acc) << "+-" << std::setw(7) << AblationRow::sd(r.acc)
               << std::setw(9) << AblationRow::mean(r.sn) << "+-" << std::setw(7)
               << AblationRow::sd(r.sn) << std::setw(9) << AblationRow::mean(r.sp) << "+-"
               << std::setw(7) << AblationRow::sd(r.sp) << std::setw(16) << mean_epoch << "\n";
        }
        return os.str();
    }
};

/// Runs {full, no_pretext, no_pretext_no_cd, no_cd} x seeds. Partial results
/// stay on disk if a variant fails; the table written so far is preserved.
inline AblationTable run_ablation_suite(const nlohmann::json& base_config,
                                        const std::vector<std::uint64_t>& seeds,
                                        const fs::path& out_dir, bool verbose = false) {
    if (seeds.size() < 2)
        throw ParamError("run_ablation_suite: at least 2 seeds required");
    fs::create_directories(out_dir);

    static const char* variants[] = {"full", "no_pretext", "no_pretext_no_cd", "no_cd"};
    AblationTable table;
    table.seeds = seeds;

    auto flush = [&]() {
        detail::write_json(out_dir / "ablation_table.json", table.to_json());
        detail::write_text(out_dir / "ablation_table.txt", table.to_text());
    };

    for (const char* variant : variants) {
        AblationRow row;
        row.variant = variant;
        for (std::uint64_t seed : seeds) {
            nlohmann::json merged = deep_merge(default_config(), base_config);
            merged["seed"] = seed;
            merged["ablation"] = variant;
            const PipelineConfig cfg = parse_config(merged);
            const fs::path run_dir =
                out_dir / variant / ("seed_" + std::to_string(seed));
            if (verbose)
                std::cerr << "[ablate] " << variant << " seed " << seed << "\n";
            try {
                const RunResult run = run_all(cfg, run_dir, verbose);
                row.acc.push_back(run.report.macro_accuracy);
                row.sn.push_back(run.report.macro_sensitivity);
                row.sp.push_back(run.report.macro_specificity);
                row.best_val_epochs.push_back(run.best_val_epoch);
            } catch (...) {
                table.rows.push_back(row);
                flush();
                throw;
            }
        }
        table.rows.push_back(row);
        flush();
    }
    return table;
}

} // namespace ssdt::pipeline
