#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ssdt/error.hpp"
#include "ssdt/image.hpp"
#include "ssdt/rng.hpp"

namespace ssdt::corpus {

enum class OriginKind { original, flip_ud, flip_lr, translate, rotate };

inline const char* origin_kind_name(OriginKind k) {
    switch (k) {
    case OriginKind::original: return "original";
    case OriginKind::flip_ud: return "flip_ud";
    case OriginKind::flip_lr: return "flip_lr";
    case OriginKind::translate: return "translate";
    case OriginKind::rotate: return "rotate";
    }
    return "original";
}

inline OriginKind origin_kind_from_name(const std::string& name) {
    if (name == "original") return OriginKind::original;
    if (name == "flip_ud") return OriginKind::flip_ud;
    if (name == "flip_lr") return OriginKind::flip_lr;
    if (name == "translate") return OriginKind::translate;
    if (name == "rotate") return OriginKind::rotate;
    throw SchemaError("unknown origin kind: " + name);
}

/// Records which transform produced a sample. `parameter` holds (dx, dy) for
/// translations and the angle in degrees for rotations.
struct Origin {
    OriginKind kind = OriginKind::original;
    std::vector<double> parameter;

    bool operator==(const Origin& other) const {
        return kind == other.kind && parameter == other.parameter;
    }
};

struct LabeledSample {
    ImageTensor image;
    int label = -1; // index into Corpus::class_set; -1 when unlabeled
    Origin origin;
};

/// Ordered image set, optionally labeled. An empty class_set means the corpus
/// is unlabeled.
struct Corpus {
    std::vector<LabeledSample> samples;
    std::vector<std::string> class_set;
    std::uint64_t seed = 0;

    bool labeled() const { return !class_set.empty(); }
    std::size_t size() const { return samples.size(); }

    const std::string& label_name(int label) const { return class_set.at(std::size_t(label)); }

    std::vector<std::size_t> per_class_counts() const {
        std::vector<std::size_t> counts(class_set.size(), 0);
        for (const auto& s : samples)
            ++counts.at(std::size_t(s.label));
        return counts;
    }

    Corpus without_labels() const {
        Corpus out;
        out.seed = seed;
        out.samples.reserve(samples.size());
        for (const auto& s : samples)
            out.samples.push_back({s.image, -1, s.origin});
        return out;
    }

    void validate() const {
        if (labeled()) {
            for (const auto& s : samples)
                if (s.label < 0 || std::size_t(s.label) >= class_set.size())
                    throw SchemaError("sample label outside declared class_set");
        } else {
            for (const auto& s : samples)
                if (s.label != -1)
                    throw SchemaError("labeled sample in unlabeled corpus");
        }
        for (const auto& s : samples)
            s.image.validate();
    }
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic corpus generator. Classes are mixtures of
/// Gaussian blobs whose anchor layout is a deterministic function of
/// (family_seed, class index); per-sample jitter and pixel noise control how
/// much the classes overlap. Corpora generated with different `seed` but the
/// same `family_seed` share class structure.
struct SyntheticSpec {
    int n_classes = 3;
    std::vector<int> samples_per_class;
    int height = 32;
    int width = 32;

    int modes_per_class = 1; // sub-archetypes per class (intra-class multimodality)
    int blobs_per_class = 3;
    double blob_sigma = 0.12;       // relative to min(height, width)
    double blob_amplitude = 0.75;
    double position_jitter = 0.04;  // relative sd of blob centers
    double sigma_jitter = 0.15;     // lognormal sd of blob size
    double amplitude_jitter = 0.15;
    double noise_level = 0.04;      // per-pixel Gaussian noise sd
    double background = 0.12;

    std::uint64_t family_seed = 1;  // fixes the class archetypes
    std::uint64_t seed = 0;         // drives per-sample variation

    void validate() const {
        if (n_classes < 2)
            throw ConfigError("synthetic spec requires at least 2 classes");
        if (samples_per_class.size() != std::size_t(n_classes))
            throw ConfigError("samples_per_class must list one count per class");
        for (int c : samples_per_class)
            if (c < 1)
                throw ConfigError("per-class sample counts must be >= 1");
        if (height < 8 || width < 8)
            throw ConfigError("synthetic image size must be at least 8x8");
        if (blobs_per_class < 1)
            throw ConfigError("blobs_per_class must be >= 1");
        if (modes_per_class < 1)
            throw ConfigError("modes_per_class must be >= 1");
    }
};

namespace detail {

struct BlobArchetype {
    double cy, cx;   // relative coordinates in [0, 1]
    double sigma;    // pixels
    double amplitude;
};

inline std::vector<BlobArchetype> class_archetype(const SyntheticSpec& spec, int cls, int mode) {
    Rng rng = Rng::derive(spec.family_seed,
                          0x11000 + std::uint64_t(cls) * 64 + std::uint64_t(mode));
    std::vector<BlobArchetype> blobs(std::size_t(spec.blobs_per_class));
    const double base_sigma = spec.blob_sigma * std::min(spec.height, spec.width);
    for (auto& b : blobs) {
        b.cy = rng.uniform(0.18, 0.82);
        b.cx = rng.uniform(0.18, 0.82);
        b.sigma = base_sigma * std::exp(0.25 * rng.normal());
        b.amplitude = spec.blob_amplitude * rng.uniform(0.75, 1.25);
    }
    return blobs;
}

inline ImageTensor render_sample(const SyntheticSpec& spec,
                                 const std::vector<std::vector<BlobArchetype>>& modes,
                                 std::uint64_t sample_index) {
    Rng rng = Rng::derive(spec.seed, 0x22000000 + sample_index);
    const auto& archetype = modes[std::size_t(rng.below(std::uint64_t(modes.size())))];
    ImageTensor img(spec.height, spec.width, 0.0);
    const double scale = std::min(spec.height, spec.width);

    struct Blob {
        double cy, cx, inv2s2, amp;
    };
    std::vector<Blob> blobs;
    blobs.reserve(archetype.size());
    for (const auto& a : archetype) {
        Blob b;
        b.cy = (a.cy + spec.position_jitter * rng.normal()) * (spec.height - 1);
        b.cx = (a.cx + spec.position_jitter * rng.normal()) * (spec.width - 1);
        const double sigma = std::max(0.5, a.sigma * std::exp(spec.sigma_jitter * rng.normal()));
        b.inv2s2 = 1.0 / (2.0 * sigma * sigma);
        b.amp = a.amplitude * (1.0 + spec.amplitude_jitter * rng.normal());
        blobs.push_back(b);
    }
    const double illumination = 1.0 + 0.08 * rng.normal();
    (void)scale;

    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            double v = spec.background;
            for (const auto& b : blobs) {
                const double dy = y - b.cy, dx = x - b.cx;
                v += b.amp * std::exp(-(dy * dy + dx * dx) * b.inv2s2);
            }
            v *= illumination;
            v += spec.noise_level * rng.normal();
            img.at(y, x) = snap_to_byte_grid(v);
        }
    }
    return img;
}

} // namespace detail

/// Generates a deterministic labeled corpus. Samples are ordered class-major;
/// each sample draws from an RNG stream keyed by (seed, global index), so the
/// result is independent of any parallel evaluation order.
inline Corpus generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Corpus out;
    out.seed = spec.seed;
    out.class_set.reserve(std::size_t(spec.n_classes));
    for (int c = 0; c < spec.n_classes; ++c)
        out.class_set.push_back("class_" + std::to_string(c));

    std::uint64_t index = 0;
    for (int c = 0; c < spec.n_classes; ++c) {
        std::vector<std::vector<detail::BlobArchetype>> modes;
        for (int m = 0; m < spec.modes_per_class; ++m)
            modes.push_back(detail::class_archetype(spec, c, m));
        for (int i = 0; i < spec.samples_per_class[std::size_t(c)]; ++i, ++index) {
            LabeledSample s;
            s.image = detail::render_sample(spec, modes, index);
            s.label = c;
            s.origin = {OriginKind::original, {}};
            out.samples.push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Augmentation plan: flips, a fixed list of translations and a number of
/// randomly drawn rotation angles per source image.
struct AugmentPlan {
    bool flip_ud = false;
    bool flip_lr = false;
    std::vector<std::pair<int, int>> translations; // (dx, dy) in pixels
    int n_rotation_angles = 0;
    double angle_range = 0.0; // degrees; angles drawn uniformly in [-range, range]
    std::uint64_t seed = 0;

    int instances() const {
        return int(flip_ud) + int(flip_lr) + int(translations.size()) + n_rotation_angles;
    }
};

/// Expands a labeled corpus with the planned transforms. Output keeps each
/// original followed by its augmented variants, so the augmented/original
/// ratio is identical for every class. Deterministic given plan.seed.
inline Corpus augment(const Corpus& input, const AugmentPlan& plan) {
    if (!input.labeled())
        throw ParamError("augment requires a labeled corpus");
    if (plan.n_rotation_angles < 0)
        throw ConfigError("n_rotation_angles must be >= 0");
    if (plan.n_rotation_angles > 0 && !(plan.angle_range > 0.0 && plan.angle_range <= 180.0))
        throw ConfigError("angle_range must be in (0, 180] when rotations are enabled");
    for (const auto& s : input.samples)
        for (const auto& [dx, dy] : plan.translations)
            if (std::abs(dx) >= s.image.width || std::abs(dy) >= s.image.height)
                throw ConfigError("translation exceeds image bounds");

    Corpus out;
    out.class_set = input.class_set;
    out.seed = plan.seed;
    out.samples.reserve(input.size() * std::size_t(1 + plan.instances()));

    for (std::size_t i = 0; i < input.samples.size(); ++i) {
        const auto& src = input.samples[i];
        out.samples.push_back(src);
        if (plan.flip_ud)
            out.samples.push_back({flip_ud(src.image), src.label, {OriginKind::flip_ud, {}}});
        if (plan.flip_lr)
            out.samples.push_back({flip_lr(src.image), src.label, {OriginKind::flip_lr, {}}});
        for (const auto& [dx, dy] : plan.translations)
            out.samples.push_back({translate(src.image, dx, dy),
                                   src.label,
                                   {OriginKind::translate, {double(dx), double(dy)}}});
        if (plan.n_rotation_angles > 0) {
            Rng rng = Rng::derive(plan.seed, 0x33000000 + i);
            std::vector<double> angles;
            angles.reserve(std::size_t(plan.n_rotation_angles));
            while (int(angles.size()) < plan.n_rotation_angles) {
                const double a = rng.uniform(-plan.angle_range, plan.angle_range);
                if (std::find(angles.begin(), angles.end(), a) == angles.end())
                    angles.push_back(a);
            }
            for (double a : angles)
                out.samples.push_back({rotate(src.image, a), src.label, {OriginKind::rotate, {a}}});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

constexpr int kManifestFormatVersion = 1;

struct ManifestEntry {
    std::string path;
    std::optional<std::string> label;
    Origin origin;
};

struct CorpusManifest {
    int format_version = kManifestFormatVersion;
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;
    std::vector<std::string> class_set;
};

namespace detail {

inline nlohmann::json origin_to_json(const Origin& o) {
    nlohmann::json j;
    j["kind"] = origin_kind_name(o.kind);
    if (!o.parameter.empty())
        j["parameter"] = o.parameter;
    return j;
}

inline Origin origin_from_json(const nlohmann::json& j) {
    Origin o;
    o.kind = origin_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("parameter"))
        o.parameter = j.at("parameter").get<std::vector<double>>();
    return o;
}

} // namespace detail

/// Writes `manifest.json` plus `images/NNNNN.pgm` under `directory`.
inline CorpusManifest save_manifest(const Corpus& corpus, const std::filesystem::path& directory) {
    namespace fs = std::filesystem;
    corpus.validate();
    fs::create_directories(directory / "images");

    CorpusManifest manifest;
    manifest.seed = corpus.seed;
    manifest.class_set = corpus.class_set;
    manifest.entries.reserve(corpus.size());

    nlohmann::json j;
    j["format_version"] = kManifestFormatVersion;
    j["seed"] = corpus.seed;
    j["class_set"] = corpus.class_set;
    j["entries"] = nlohmann::json::array();

    char name[32];
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        const auto& s = corpus.samples[i];
        std::snprintf(name, sizeof(name), "images/%05zu.pgm", i);
        write_pgm(s.image, directory / name);

        ManifestEntry entry;
        entry.path = name;
        entry.origin = s.origin;
        nlohmann::json je;
        je["path"] = entry.path;
        if (corpus.labeled()) {
            entry.label = corpus.label_name(s.label);
            je["label"] = *entry.label;
        }
        je["origin"] = detail::origin_to_json(s.origin);
        j["entries"].push_back(std::move(je));
        manifest.entries.push_back(std::move(entry));
    }

    std::ofstream f(directory / "manifest.json");
    if (!f)
        throw IoError("cannot write manifest: " + (directory / "manifest.json").string());
    f << j.dump(2) << "\n";
    return manifest;
}

/// Loads a corpus saved by save_manifest. Fails before touching any image if
/// the manifest itself is malformed (wrong version, unknown label, duplicate
/// path), so there is no partial load.
inline Corpus load_manifest(const std::filesystem::path& directory) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = directory / "manifest.json";
    std::ifstream f(manifest_path);
    if (!f)
        throw IoError("manifest not found: " + manifest_path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("malformed manifest JSON: " + std::string(e.what()));
    }

    if (!j.contains("format_version") || !j["format_version"].is_number_integer())
        throw SchemaError("manifest missing format_version");
    if (j["format_version"].get<int>() != kManifestFormatVersion)
        throw SchemaError("unsupported manifest format_version " +
                          std::to_string(j["format_version"].get<int>()));

    Corpus out;
    out.seed = j.value("seed", std::uint64_t(0));
    out.class_set = j.value("class_set", std::vector<std::string>{});
    std::map<std::string, int> label_index;
    for (std::size_t i = 0; i < out.class_set.size(); ++i)
        label_index[out.class_set[i]] = int(i);

    std::set<std::string> seen_paths;
    struct Pending {
        std::string path;
        int label;
        Origin origin;
    };
    std::vector<Pending> pending;
    for (const auto& je : j.at("entries")) {
        Pending p;
        p.path = je.at("path").get<std::string>();
        if (!seen_paths.insert(p.path).second)
            throw SchemaError("duplicate path in manifest: " + p.path);
        if (je.contains("label") && !je["label"].is_null()) {
            const auto name = je["label"].get<std::string>();
            auto it = label_index.find(name);
            if (it == label_index.end())
                throw SchemaError("manifest label '" + name + "' not in class_set");
            p.label = it->second;
        } else {
            if (!out.class_set.empty())
                throw SchemaError("unlabeled entry in labeled manifest: " + p.path);
            p.label = -1;
        }
        p.origin = je.contains("origin") ? detail::origin_from_json(je["origin"]) : Origin{};
        pending.push_back(std::move(p));
    }

    out.samples.reserve(pending.size());
    for (const auto& p : pending) {
        LabeledSample s;
        s.image = read_pgm(directory / p.path);
        s.label = p.label;
        s.origin = p.origin;
        out.samples.push_back(std::move(s));
    }
    return out;
}

} // namespace ssdt::corpus
