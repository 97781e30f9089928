#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssdt/config.hpp"
#include "ssdt/gradcheck.hpp"
#include "ssdt/pipeline.hpp"

namespace ssdt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    bool verbose = false;
};

inline void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true,
                       bool out_required = true) {
    auto* cfg = cmd->add_option("--config", opts.config_path, "JSON config file");
    if (config_required)
        cfg->required();
    cmd->add_option("--set", opts.overrides,
                    "Override a config key, dotted path (e.g. --set fine.epochs=40)");
    auto* out = cmd->add_option("--out", opts.out_dir, "Output directory");
    if (out_required)
        out->required();
    cmd->add_flag("-v,--verbose", opts.verbose, "Progress output on stderr");
}

/// Config file JSON plus the SSDT_SEED fallback: the environment seed applies
/// only when neither the file nor an override provides one.
inline json load_file_json(const CommonOpts& opts) {
    json file = opts.config_path.empty() ? json::object()
                                         : pipeline::read_json_file(opts.config_path);
    const bool override_has_seed =
        std::any_of(opts.overrides.begin(), opts.overrides.end(),
                    [](const std::string& o) { return o.rfind("seed=", 0) == 0; });
    if (!file.contains("seed") && !override_has_seed) {
        if (const char* env = std::getenv("SSDT_SEED")) {
            try {
                file["seed"] = std::stoull(env);
            } catch (const std::exception&) {
                throw ConfigError("SSDT_SEED must be an unsigned integer");
            }
        }
    }
    return file;
}

inline pipeline::PipelineConfig load_pipeline_config(const CommonOpts& opts) {
    return pipeline::load_config(load_file_json(opts), opts.overrides);
}

inline int run_generate(const CommonOpts& opts) {
    json file = load_file_json(opts);
    for (const auto& o : opts.overrides)
        pipeline::apply_override(file, o);
    pipeline::detail::Reader r(file, "generate config");
    r.mark("seed"); // may arrive via SSDT_SEED; the synthetic spec carries its own
    if (!r.has("synthetic"))
        throw ConfigError("generate config requires a 'synthetic' section");
    const auto spec = pipeline::detail::synthetic_from_json(r.raw("synthetic"),
                                                            "generate.synthetic", 1);
    corpus::Corpus c = corpus::generate_synthetic(spec);
    if (r.has("augment")) {
        bool seed_explicit = false;
        auto plan = pipeline::detail::augment_from_json(r.raw("augment"), "generate.augment",
                                                        seed_explicit);
        if (!seed_explicit)
            plan.seed = derived_seed(spec.seed, pipeline::stream::kAugment);
        c = corpus::augment(c, plan);
    } else {
        r.mark("augment");
    }
    r.finish();
    corpus::save_manifest(c, opts.out_dir);
    std::cout << "wrote " << c.size() << " images (" << c.class_set.size() << " classes) to "
              << opts.out_dir << "\n";
    return 0;
}

inline int run_pretext_cmd(const CommonOpts& opts) {
    const auto cfg = load_pipeline_config(opts);
    corpus::Corpus unlabeled = pipeline::materialize(cfg.unlabeled, "unlabeled");
    const auto result = pipeline::run_pretext(cfg, unlabeled, opts.out_dir, opts.verbose);
    json record = {{"config", cfg.resolved}, {"pretext", result.record}};
    pipeline::detail::write_json(fs::path(opts.out_dir) / "pretext_record.json", record);
    std::cout << "pretext: " << result.n_clusters << " clusters, " << result.noise_count
              << " noise, holdout accuracy " << result.pretext_accuracy << "\n";
    return 0;
}

inline int run_train_cmd(const CommonOpts& opts, const std::string& coarse_path) {
    const auto cfg = load_pipeline_config(opts);
    corpus::Corpus train = pipeline::materialize(cfg.train, "train");

    fs::path coarse;
    if (!coarse_path.empty()) {
        coarse = coarse_path;
    } else if (!cfg.pretext_enabled()) {
        coarse = pipeline::write_seeded_coarse(cfg, train, opts.out_dir);
    } else {
        throw ConfigError("train: --coarse is required unless the ablation skips the pretext "
                          "phase (no_pretext / no_pretext_no_cd)");
    }

    std::optional<corpus::Corpus> validation;
    if (cfg.validation.present())
        validation = pipeline::materialize(cfg.validation, "validation");

    const auto result = pipeline::run_downstream(cfg, coarse, train,
                                                 validation ? &*validation : nullptr,
                                                 opts.out_dir, opts.verbose);
    json record = {{"config", cfg.resolved}, {"downstream", result.record}};
    pipeline::detail::write_json(fs::path(opts.out_dir) / "downstream_record.json", record);
    std::cout << "fine checkpoint: " << result.fine_checkpoint.string() << " ("
              << result.map.n_subclasses() << " subclasses)\n";
    return 0;
}

inline int run_evaluate_cmd(const CommonOpts& opts, const std::string& model_path,
                            const std::string& map_path) {
    const auto cfg = load_pipeline_config(opts);
    corpus::Corpus test = pipeline::materialize(cfg.test, "test");
    const auto map = decomp::DecompositionMap::from_json(pipeline::read_json_file(map_path));
    const auto report = pipeline::evaluate(cfg, model_path, map, test, opts.out_dir);
    std::cout << metrics::to_text(report);
    return 0;
}

inline int run_ablate_cmd(const CommonOpts& opts, const std::string& seeds_arg) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(seeds_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty())
            continue;
        try {
            seeds.push_back(std::stoull(tok));
        } catch (const std::exception&) {
            throw ConfigError("--seeds must be a comma-separated list of integers");
        }
    }
    if (seeds.size() < 2)
        throw ConfigError("--seeds needs at least 2 seeds");
    json file = load_file_json(opts);
    for (const auto& o : opts.overrides)
        pipeline::apply_override(file, o);
    const auto table = pipeline::run_ablation_suite(file, seeds, opts.out_dir, opts.verbose);
    std::cout << table.to_text();
    return 0;
}

/// Renders the stored report.json of a finished run as an aligned table.
inline std::string render_report_text(const json& report_json) {
    std::ostringstream os;
    const json& m = report_json.at("metrics");
    const json& macro = m.at("macro");
    os << std::fixed << std::setprecision(4);
    auto val = [](const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); };
    os << "macro accuracy    " << val(macro.at("accuracy")) << "\n";
    os << "macro sensitivity " << val(macro.at("sensitivity")) << "\n";
    os << "macro specificity " << val(macro.at("specificity")) << "\n";
    os << "\nclass            TP      TN      FP      FN\n";
    for (const auto& jc : m.at("per_class"))
        os << std::left << std::setw(14) << jc.at("class").get<std::string>() << std::right
           << std::setw(8) << jc.at("tp").get<std::uint64_t>() << std::setw(8)
           << jc.at("tn").get<std::uint64_t>() << std::setw(8)
           << jc.at("fp").get<std::uint64_t>() << std::setw(8)
           << jc.at("fn").get<std::uint64_t>() << "\n";
    return os.str();
}

inline int run_report_cmd(const std::string& run_dir, const std::string& out_dir) {
    const fs::path run(run_dir);
    const json report_json = pipeline::read_json_file(run / "report.json");
    const std::string text = render_report_text(report_json);
    std::cout << text;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        pipeline::detail::write_text(fs::path(out_dir) / "report.txt", text);
        pipeline::detail::write_json(fs::path(out_dir) / "report.json", report_json);
        for (const auto& entry : fs::directory_iterator(run))
            if (entry.path().filename().string().rfind("roc_", 0) == 0)
                fs::copy_file(entry.path(), fs::path(out_dir) / entry.path().filename(),
                              fs::copy_options::overwrite_existing);
    }
    return 0;
}

inline int run_gradcheck_cmd(const CommonOpts& opts, bool corrupt) {
    // defaults are the seeded tiny instances; a config file may resize them
    int ae_input = 16, ae_hidden = 8, ae_code = 6, ae_samples = 4;
    double ae_lambda = 0.01, ae_step = 1e-5;
    netcore::NetworkSpec spec;
    spec.input_h = spec.input_w = 8;
    spec.stem_channels = 8;
    spec.blocks = {{8, 1}, {16, 2}};
    spec.n_classes = 3;
    int cnn_samples = 4;
    double cnn_step = 1e-4;
    std::uint64_t seed = 7;

    if (!opts.config_path.empty()) {
        json file = load_file_json(opts);
        for (const auto& o : opts.overrides)
            pipeline::apply_override(file, o);
        pipeline::detail::Reader r(file, "gradcheck config");
        seed = r.get("seed", seed);
        if (r.has("autoencoder")) {
            auto ra = r.child("autoencoder");
            ae_input = ra.get("input_dim", ae_input);
            ae_hidden = ra.get("hidden", ae_hidden);
            ae_code = ra.get("code", ae_code);
            ae_samples = ra.get("samples", ae_samples);
            ae_lambda = ra.get("weight_decay", ae_lambda);
            ae_step = ra.get("step", ae_step);
            ra.finish();
        } else {
            r.mark("autoencoder");
        }
        if (r.has("classifier")) {
            auto rc = r.child("classifier");
            spec.input_h = rc.get("input_h", spec.input_h);
            spec.input_w = rc.get("input_w", spec.input_w);
            spec.stem_channels = rc.get("stem_channels", spec.stem_channels);
            if (rc.has("blocks")) {
                spec.blocks.clear();
                for (const auto& jb : rc.raw("blocks"))
                    spec.blocks.push_back(
                        {jb.at("channels").get<int>(), jb.value("stride", 1)});
            } else {
                rc.mark("blocks");
            }
            spec.n_classes = rc.get("n_classes", spec.n_classes);
            cnn_samples = rc.get("samples", cnn_samples);
            cnn_step = rc.get("step", cnn_step);
            rc.finish();
        } else {
            r.mark("classifier");
        }
        r.finish();
    }

    const auto ae_report = gradcheck::check_autoencoder(ae_input, ae_hidden, ae_code, ae_samples,
                                                        ae_lambda, ae_step, seed, corrupt);
    const auto cnn_report = gradcheck::check_classifier(spec, cnn_samples, cnn_step, seed,
                                                        corrupt);

    bool ok = true;
    auto print = [&](const char* what, const gradcheck::Report& report) {
        for (const auto& g : report.groups) {
            const bool pass = g.max_rel_err < report.threshold;
            ok = ok && pass;
            std::cout << what << " " << std::left << std::setw(24) << g.name
                      << " max rel err " << std::scientific << std::setprecision(3)
                      << g.max_rel_err << (pass ? "  ok" : "  FAIL") << "\n";
        }
    };
    print("autoencoder", ae_report);
    print("classifier ", cnn_report);
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
    return ok ? 0 : 2;
}

} // namespace detail

/// Entry point shared by the binary and the tests. `args` excludes the
/// program name.
inline int run(const std::vector<std::string>& args) {
    CLI::App app{"Self-supervised sample-decomposition transfer pipeline"};
    app.require_subcommand(1);

    detail::CommonOpts gen_opts, pre_opts, train_opts, eval_opts, ablate_opts, grad_opts;
    std::string coarse_path, model_path, map_path, seeds_arg, run_dir, report_out;
    bool corrupt = false;

    auto* generate = app.add_subcommand("generate", "Generate a synthetic corpus on disk");
    detail::add_common(generate, gen_opts);

    auto* pretext = app.add_subcommand(
        "pretext", "Autoencoder + DBSCAN pseudo-labels + coarse classifier training");
    detail::add_common(pretext, pre_opts);

    auto* train = app.add_subcommand(
        "train", "Downstream training: decomposition + fine-tuning from a coarse checkpoint");
    detail::add_common(train, train_opts);
    train->add_option("--coarse", coarse_path, "Coarse checkpoint produced by 'pretext'");

    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a fine checkpoint on the test set");
    detail::add_common(evaluate, eval_opts);
    evaluate->add_option("--model", model_path, "Fine checkpoint")->required();
    evaluate->add_option("--map", map_path, "Decomposition map JSON")->required();

    auto* ablate = app.add_subcommand("ablate", "Run the ablation suite over several seeds");
    detail::add_common(ablate, ablate_opts);
    ablate->add_option("--seeds", seeds_arg, "Comma-separated seed list")->required();

    auto* report = app.add_subcommand("report", "Re-emit the report of a finished run");
    report->add_option("--run", run_dir, "Run directory containing report.json")->required();
    report->add_option("--out", report_out, "Optional directory for table + ROC CSV copies");

    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "Finite-difference checks of all analytic gradients");
    detail::add_common(gradcheck_cmd, grad_opts, /*config_required=*/false,
                       /*out_required=*/false);
    gradcheck_cmd->add_flag("--corrupt", corrupt,
                            "Deliberately corrupt one gradient (negative control)");

    std::vector<const char*> argv;
    argv.push_back("ssdt");
    for (const auto& a : args)
        argv.push_back(a.c_str());

    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (generate->parsed())
            return detail::run_generate(gen_opts);
        if (pretext->parsed())
            return detail::run_pretext_cmd(pre_opts);
        if (train->parsed())
            return detail::run_train_cmd(train_opts, coarse_path);
        if (evaluate->parsed())
            return detail::run_evaluate_cmd(eval_opts, model_path, map_path);
        if (ablate->parsed())
            return detail::run_ablate_cmd(ablate_opts, seeds_arg);
        if (report->parsed())
            return detail::run_report_cmd(run_dir, report_out);
        if (gradcheck_cmd->parsed())
            return detail::run_gradcheck_cmd(grad_opts, corrupt);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const ParamError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace ssdt::cli
