#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssdt/autoenc.hpp"
#include "ssdt/corpus.hpp"
#include "ssdt/decomp.hpp"
#include "ssdt/error.hpp"
#include "ssdt/netcore.hpp"

namespace ssdt::pipeline {

using nlohmann::json;

enum class Ablation { full, no_pretext, no_pretext_no_cd, no_cd };

inline const char* ablation_name(Ablation a) {
    switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_pretext: return "no_pretext";
    case Ablation::no_pretext_no_cd: return "no_pretext_no_cd";
    case Ablation::no_cd: return "no_cd";
    }
    return "full";
}

inline Ablation ablation_from_name(const std::string& name) {
    if (name == "full") return Ablation::full;
    if (name == "no_pretext") return Ablation::no_pretext;
    if (name == "no_pretext_no_cd") return Ablation::no_pretext_no_cd;
    if (name == "no_cd") return Ablation::no_cd;
    throw ConfigError("unknown ablation mode: " + name);
}

/// Where a corpus comes from: a saved manifest directory or an inline
/// synthetic generation spec.
struct CorpusSource {
    std::optional<std::string> manifest;
    std::optional<corpus::SyntheticSpec> synthetic;

    bool present() const { return manifest.has_value() || synthetic.has_value(); }
};

struct DbscanSettings {
    std::optional<double> eps;  // nullopt = estimate from the k-distance knee
    std::optional<int> min_pts; // nullopt = feature dimension + 1
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::full;

    CorpusSource unlabeled, train, test, validation;
    std::optional<corpus::AugmentPlan> augment_plan; // applied to the train corpus
    bool augment_seed_explicit = false;

    autoenc::AeTrainConfig ae;
    int ae_hidden = autoenc::kDefaultHidden;
    int ae_code = autoenc::kDefaultCode;
    autoenc::Activation ae_activation = autoenc::Activation::sigmoid;

    DbscanSettings dbscan;
    double pretext_holdout = 0.2;
    netcore::TrainConfig coarse;

    int stem_channels = 8;
    std::vector<netcore::BlockSpec> blocks{{8, 1}, {16, 2}};

    decomp::RetainPolicy pca_retain = decomp::RetainPolicy::variance(0.95);
    int k = 2;
    decomp::ComposeMode compose_mode = decomp::ComposeMode::argmax_then_map;
    netcore::TrainConfig fine;

    json resolved; // fully-merged JSON, echoed into run records

    /// k actually used for decomposition; the *_no_cd ablations force 1.
    int effective_k() const {
        return (ablation == Ablation::no_cd || ablation == Ablation::no_pretext_no_cd) ? 1 : k;
    }

    bool pretext_enabled() const {
        return ablation == Ablation::full || ablation == Ablation::no_cd;
    }
};

// ---------------------------------------------------------------------------
// Defaults and merging
// ---------------------------------------------------------------------------

// momentum/weight_decay come from the preset unless keys override them
inline json default_train_json(double lr, double head_lr, int batch, int epochs) {
    return json{{"preset", "momentum_0.95"},
                {"learning_rate", lr},
                {"head_learning_rate", head_lr},
                {"batch_size", batch},
                {"epochs", epochs},
                {"lr_drop", {{"factor", 0.95}, {"every", 5}}},
                {"tuning_mode", "deep"}};
}

/// Documented defaults for every key the pipeline understands.
inline json default_config() {
    return json{
        {"seed", 0},
        {"ablation", "full"},
        {"data",
         {{"unlabeled", nullptr}, {"train", nullptr}, {"test", nullptr}, {"validation", nullptr}}},
        {"augment", nullptr},
        {"autoenc",
         {{"weight_decay", 1e-4},
          {"learning_rate", 0.5},
          {"batch_size", 32},
          {"epochs", 30},
          {"hidden", autoenc::kDefaultHidden},
          {"code", autoenc::kDefaultCode},
          {"activation", "sigmoid"}}},
        {"dbscan", {{"eps", "auto"}, {"min_pts", "auto"}}},
        {"pretext",
         {{"holdout_fraction", 0.2}, {"train", default_train_json(0.01, 0.01, 64, 10)}}},
        {"network",
         {{"stem_channels", 8},
          {"blocks", json::array({{{"channels", 8}, {"stride", 1}},
                                  {{"channels", 16}, {"stride", 2}}})}}},
        {"pca", {{"retain_variance", 0.95}, {"retain_dim", nullptr}}},
        {"decompose", {{"k", 2}}},
        {"compose", "argmax_then_map"},
        {"fine", default_train_json(0.0001, 0.01, 32, 40)}};
}

/// Recursive object merge: overlay wins, objects merge key-wise.
inline json deep_merge(const json& base, const json& overlay) {
    if (!base.is_object() || !overlay.is_object())
        return overlay;
    json out = base;
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        if (out.contains(it.key()))
            out[it.key()] = deep_merge(out[it.key()], it.value());
        else
            out[it.key()] = it.value();
    }
    return out;
}

/// Applies one `a.b.c=value` override. Values parse as JSON when possible and
/// fall back to plain strings.
inline void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw; // bare strings are fine
    }

    json* cursor = &config;
    std::size_t begin = 0;
    while (true) {
        const auto dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot - begin);
        if (key.empty())
            throw ConfigError("override has an empty path segment: " + assignment);
        if (dot == std::string::npos) {
            (*cursor)[key] = value;
            return;
        }
        if (!cursor->contains(key) || !(*cursor)[key].is_object())
            (*cursor)[key] = json::object();
        cursor = &(*cursor)[key];
        begin = dot + 1;
    }
}

// ---------------------------------------------------------------------------
// Strict parsing
// ---------------------------------------------------------------------------

namespace detail {

/// Wraps a JSON object and records which keys were consumed, so typos and
/// invalid override paths surface as errors.
class Reader {
public:
    Reader(const json& j, std::string context) : j_(j), context_(std::move(context)) {
        if (!j.is_object())
            throw ConfigError(context_ + ": expected an object");
    }

    bool has(const std::string& key) const {
        return j_.contains(key) && !j_.at(key).is_null();
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    template <typename T>
    T get(const std::string& key, const T& fallback) {
        seen_.insert(key);
        if (!has(key))
            return fallback;
        try {
            return j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(context_ + "." + key + ": " + e.what());
        }
    }

    Reader child(const std::string& key) {
        seen_.insert(key);
        return Reader(j_.at(key), context_ + "." + key);
    }

    void mark(const std::string& key) { seen_.insert(key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(context_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string context_;
    std::set<std::string> seen_;
};

inline corpus::SyntheticSpec synthetic_from_json(const json& j, const std::string& context,
                                                 std::uint64_t default_family) {
    Reader r(j, context);
    corpus::SyntheticSpec s;
    s.n_classes = r.get("n_classes", s.n_classes);
    s.samples_per_class = r.get("samples_per_class", std::vector<int>{});
    s.height = r.get("height", s.height);
    s.width = r.get("width", s.width);
    s.modes_per_class = r.get("modes_per_class", s.modes_per_class);
    s.blobs_per_class = r.get("blobs_per_class", s.blobs_per_class);
    s.blob_sigma = r.get("blob_sigma", s.blob_sigma);
    s.blob_amplitude = r.get("blob_amplitude", s.blob_amplitude);
    s.position_jitter = r.get("position_jitter", s.position_jitter);
    s.sigma_jitter = r.get("sigma_jitter", s.sigma_jitter);
    s.amplitude_jitter = r.get("amplitude_jitter", s.amplitude_jitter);
    s.noise_level = r.get("noise_level", s.noise_level);
    s.background = r.get("background", s.background);
    s.family_seed = r.get("family_seed", default_family);
    s.seed = r.get("seed", std::uint64_t(0));
    r.finish();
    s.validate();
    return s;
}

inline CorpusSource source_from_json(const json& j, const std::string& context,
                                     std::uint64_t default_family) {
    CorpusSource src;
    if (j.is_null())
        return src;
    Reader r(j, context);
    if (r.has("manifest"))
        src.manifest = r.get<std::string>("manifest", "");
    else
        r.mark("manifest");
    if (r.has("synthetic"))
        src.synthetic = synthetic_from_json(r.raw("synthetic"), context + ".synthetic",
                                            default_family);
    else
        r.mark("synthetic");
    r.finish();
    if (src.manifest && src.synthetic)
        throw ConfigError(context + ": give either manifest or synthetic, not both");
    return src;
}

inline corpus::AugmentPlan augment_from_json(const json& j, const std::string& context,
                                             bool& seed_explicit) {
    Reader r(j, context);
    corpus::AugmentPlan plan;
    plan.flip_ud = r.get("flip_ud", false);
    plan.flip_lr = r.get("flip_lr", false);
    const auto translations = r.get("translations", std::vector<std::vector<int>>{});
    for (const auto& t : translations) {
        if (t.size() != 2)
            throw ConfigError(context + ".translations entries must be [dx, dy]");
        plan.translations.emplace_back(t[0], t[1]);
    }
    plan.n_rotation_angles = r.get("n_rotation_angles", 0);
    plan.angle_range = r.get("angle_range", 0.0);
    seed_explicit = r.has("seed");
    plan.seed = r.get("seed", std::uint64_t(0));
    r.finish();
    return plan;
}

inline netcore::TrainConfig train_from_json(const json& j, const std::string& context) {
    Reader r(j, context);
    netcore::TrainConfig cfg;
    // named presets for the two momentum/weight-decay regimes; explicit keys win
    const auto preset = r.get<std::string>("preset", "");
    if (preset == "momentum_0.90") {
        cfg.momentum = 0.90;
        cfg.weight_decay = 0.001;
    } else if (preset == "momentum_0.95") {
        cfg.momentum = 0.95;
        cfg.weight_decay = 0.0001;
    } else if (!preset.empty()) {
        throw ConfigError(context + ".preset: unknown preset '" + preset + "'");
    }
    cfg.learning_rate = r.get("learning_rate", cfg.learning_rate);
    cfg.head_learning_rate = r.get("head_learning_rate", cfg.head_learning_rate);
    cfg.batch_size = r.get("batch_size", cfg.batch_size);
    cfg.epochs = r.get("epochs", cfg.epochs);
    cfg.weight_decay = r.get("weight_decay", cfg.weight_decay);
    cfg.momentum = r.get("momentum", cfg.momentum);
    if (r.has("lr_drop")) {
        Reader rd = r.child("lr_drop");
        cfg.lr_drop.factor = rd.get("factor", 1.0);
        cfg.lr_drop.every = rd.get("every", 0);
        rd.finish();
    } else {
        r.mark("lr_drop");
    }
    cfg.tuning = netcore::TuningMode::parse(r.get<std::string>("tuning_mode", "deep"));
    r.finish();
    cfg.validate();
    return cfg;
}

} // namespace detail

/// Parses a fully-merged config JSON into the typed pipeline configuration.
/// Unknown keys anywhere are configuration errors.
inline PipelineConfig parse_config(const json& merged) {
    detail::Reader r(merged, "config");
    PipelineConfig cfg;
    cfg.resolved = merged;
    cfg.seed = r.get("seed", std::uint64_t(0));
    cfg.ablation = ablation_from_name(r.get<std::string>("ablation", "full"));

    {
        detail::Reader rd = r.child("data");
        cfg.unlabeled = detail::source_from_json(rd.has("unlabeled") ? rd.raw("unlabeled") : json(),
                                                 "config.data.unlabeled", cfg.seed);
        cfg.train = detail::source_from_json(rd.has("train") ? rd.raw("train") : json(),
                                             "config.data.train", cfg.seed);
        cfg.test = detail::source_from_json(rd.has("test") ? rd.raw("test") : json(),
                                            "config.data.test", cfg.seed);
        cfg.validation =
            detail::source_from_json(rd.has("validation") ? rd.raw("validation") : json(),
                                     "config.data.validation", cfg.seed);
        rd.mark("unlabeled");
        rd.mark("train");
        rd.mark("test");
        rd.mark("validation");
        rd.finish();
    }

    if (r.has("augment"))
        cfg.augment_plan = detail::augment_from_json(r.raw("augment"), "config.augment",
                                                     cfg.augment_seed_explicit);
    else
        r.mark("augment");

    {
        detail::Reader ra = r.child("autoenc");
        cfg.ae.weight_decay = ra.get("weight_decay", cfg.ae.weight_decay);
        cfg.ae.learning_rate = ra.get("learning_rate", cfg.ae.learning_rate);
        cfg.ae.batch_size = ra.get("batch_size", cfg.ae.batch_size);
        cfg.ae.epochs = ra.get("epochs", cfg.ae.epochs);
        cfg.ae_hidden = ra.get("hidden", cfg.ae_hidden);
        cfg.ae_code = ra.get("code", cfg.ae_code);
        cfg.ae_activation =
            autoenc::activation_from_name(ra.get<std::string>("activation", "sigmoid"));
        ra.finish();
        cfg.ae.validate();
    }

    {
        detail::Reader rd = r.child("dbscan");
        if (rd.has("eps")) {
            const json& eps = rd.raw("eps");
            if (eps.is_string()) {
                if (eps.get<std::string>() != "auto")
                    throw ConfigError("config.dbscan.eps must be a number or \"auto\"");
            } else {
                cfg.dbscan.eps = eps.get<double>();
            }
        } else {
            rd.mark("eps");
        }
        if (rd.has("min_pts")) {
            const json& mp = rd.raw("min_pts");
            if (mp.is_string()) {
                if (mp.get<std::string>() != "auto")
                    throw ConfigError("config.dbscan.min_pts must be an integer or \"auto\"");
            } else {
                cfg.dbscan.min_pts = mp.get<int>();
            }
        } else {
            rd.mark("min_pts");
        }
        rd.finish();
    }

    {
        detail::Reader rp = r.child("pretext");
        cfg.pretext_holdout = rp.get("holdout_fraction", 0.2);
        if (!(cfg.pretext_holdout > 0.0 && cfg.pretext_holdout < 1.0))
            throw ConfigError("config.pretext.holdout_fraction must lie in (0,1)");
        cfg.coarse = detail::train_from_json(rp.raw("train"), "config.pretext.train");
        rp.finish();
    }

    {
        detail::Reader rn = r.child("network");
        cfg.stem_channels = rn.get("stem_channels", cfg.stem_channels);
        if (rn.has("blocks")) {
            cfg.blocks.clear();
            for (const auto& jb : rn.raw("blocks")) {
                detail::Reader rb(jb, "config.network.blocks[]");
                netcore::BlockSpec bs;
                bs.channels = rb.get("channels", 8);
                bs.stride = rb.get("stride", 1);
                rb.finish();
                cfg.blocks.push_back(bs);
            }
        } else {
            rn.mark("blocks");
        }
        rn.finish();
    }

    {
        detail::Reader rp = r.child("pca");
        const bool has_dim = rp.has("retain_dim");
        const double fraction = rp.get("retain_variance", 0.95);
        const int dim = rp.get("retain_dim", 0);
        rp.finish();
        cfg.pca_retain = has_dim ? decomp::RetainPolicy::dim(dim)
                                 : decomp::RetainPolicy::variance(fraction);
    }

    {
        detail::Reader rd = r.child("decompose");
        cfg.k = rd.get("k", 2);
        if (cfg.k < 1)
            throw ConfigError("config.decompose.k must be >= 1");
        rd.finish();
    }

    cfg.compose_mode = decomp::compose_mode_from_name(r.get<std::string>("compose", "argmax_then_map"));
    cfg.fine = detail::train_from_json(r.raw("fine"), "config.fine");
    r.finish();
    return cfg;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f)
        throw ConfigError("cannot open config file: " + path.string());
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

/// defaults <- file <- overrides, then strict parse.
inline PipelineConfig load_config(const json& file_json,
                                  const std::vector<std::string>& overrides) {
    json merged = deep_merge(default_config(), file_json);
    for (const auto& o : overrides)
        apply_override(merged, o);
    return parse_config(merged);
}

} // namespace ssdt::pipeline
