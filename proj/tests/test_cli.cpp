#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssdt/cli.hpp"

using namespace ssdt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("ssdt_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_json(const fs::path& dir, const std::string& name, const json& j) {
    const fs::path p = dir / name;
    std::ofstream f(p);
    f << j.dump(2);
    return p;
}

json synth_json(std::vector<int> counts, std::uint64_t seed) {
    return json{{"n_classes", 3},
                {"samples_per_class", counts},
                {"height", 16},
                {"width", 16},
                {"position_jitter", 0.02},
                {"noise_level", 0.02},
                {"family_seed", 5},
                {"seed", seed}};
}

json pipeline_json() {
    return json{
        {"seed", 1},
        {"data",
         {{"unlabeled", {{"synthetic", synth_json({25, 25, 25}, 100)}}},
          {"train", {{"synthetic", synth_json({10, 8, 10}, 200)}}},
          {"test", {{"synthetic", synth_json({8, 8, 8}, 300)}}}}},
        {"autoenc",
         {{"hidden", 12}, {"code", 6}, {"epochs", 4}, {"batch_size", 15}, {"learning_rate", 0.7}}},
        {"dbscan", {{"min_pts", 5}}},
        {"pretext",
         {{"train",
           {{"epochs", 1}, {"batch_size", 15}, {"learning_rate", 0.02}, {"tuning_mode", "deep"}}}}},
        {"network",
         {{"stem_channels", 4},
          {"blocks",
           json::array({{{"channels", 4}, {"stride", 1}}, {{"channels", 8}, {"stride", 2}}})}}},
        {"fine",
         {{"epochs", 2}, {"batch_size", 8}, {"learning_rate", 0.02}, {"tuning_mode", "deep"}}}};
}

struct CoutCapture {
    std::ostringstream stream;
    std::streambuf* saved;
    CoutCapture() : saved(std::cout.rdbuf(stream.rdbuf())) {}
    ~CoutCapture() { std::cout.rdbuf(saved); }
    std::string text() const { return stream.str(); }
};

} // namespace

TEST_CASE("help and argument errors") {
    CHECK(cli::run({"--help"}) == 0);
    CHECK(cli::run({"no_such_command"}) == 1);
    CHECK(cli::run({}) == 1);
    CHECK(cli::run({"generate"}) == 1); // missing required --config/--out
}

TEST_CASE("generate writes a corpus and respects augmentation") {
    const fs::path dir = fresh_dir("generate");
    const auto cfg = write_json(dir, "synth.json",
                                json{{"synthetic", synth_json({3, 3, 3}, 7)},
                                     {"augment", {{"flip_lr", true}, {"seed", 9}}}});
    const fs::path out = dir / "data";
    CHECK(cli::run({"generate", "--config", cfg.string(), "--out", out.string()}) == 0);
    CHECK(fs::exists(out / "manifest.json"));
    const auto corpus = corpus::load_manifest(out);
    CHECK(corpus.size() == 18); // 9 originals + 9 flips
    fs::remove_all(dir);
}

TEST_CASE("generate rejects a malformed config with exit 1") {
    const fs::path dir = fresh_dir("generate_bad");
    const auto cfg = write_json(dir, "bad.json", json{{"synthetic", {{"n_classes", 1}}}});
    CHECK(cli::run({"generate", "--config", cfg.string(), "--out", (dir / "o").string()}) == 1);
    CHECK(cli::run({"generate", "--config", (dir / "missing.json").string(), "--out",
                    (dir / "o").string()}) == 1);
    fs::remove_all(dir);
}

TEST_CASE("pretext, train, evaluate and report chain together") {
    const fs::path dir = fresh_dir("chain");
    const auto cfg = write_json(dir, "run.json", pipeline_json());
    const fs::path pre = dir / "pre";
    const fs::path fine = dir / "fine";
    const fs::path eval = dir / "eval";

    REQUIRE(cli::run({"pretext", "--config", cfg.string(), "--out", pre.string()}) == 0);
    CHECK(fs::exists(pre / "coarse.ckpt"));
    CHECK(fs::exists(pre / "pretext_record.json"));

    REQUIRE(cli::run({"train", "--config", cfg.string(), "--coarse",
                      (pre / "coarse.ckpt").string(), "--out", fine.string()}) == 0);
    CHECK(fs::exists(fine / "fine.ckpt"));
    CHECK(fs::exists(fine / "decomposition_map.json"));

    REQUIRE(cli::run({"evaluate", "--config", cfg.string(), "--model",
                      (fine / "fine.ckpt").string(), "--map",
                      (fine / "decomposition_map.json").string(), "--out", eval.string()}) == 0);
    CHECK(fs::exists(eval / "report.json"));
    CHECK(fs::exists(eval / "report.txt"));

    CoutCapture capture;
    REQUIRE(cli::run({"report", "--run", eval.string(), "--out",
                      (dir / "reemit").string()}) == 0);
    CHECK(capture.text().find("macro accuracy") != std::string::npos);
    CHECK(fs::exists(dir / "reemit" / "report.txt"));
    fs::remove_all(dir);
}

TEST_CASE("train without a coarse checkpoint follows the ablation contract") {
    const fs::path dir = fresh_dir("train_solo");
    auto cfg_json = pipeline_json();
    const auto cfg = write_json(dir, "run.json", cfg_json);

    // full ablation needs --coarse
    CHECK(cli::run({"train", "--config", cfg.string(), "--out", (dir / "a").string()}) == 1);

    // no_pretext synthesizes a seeded coarse checkpoint
    CHECK(cli::run({"train", "--config", cfg.string(), "--set", "ablation=no_pretext", "--out",
                    (dir / "b").string()}) == 0);
    CHECK(fs::exists(dir / "b" / "coarse.ckpt"));
    CHECK(fs::exists(dir / "b" / "fine.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("seed resolution: override beats file beats environment") {
    const fs::path dir = fresh_dir("seeds");
    auto with_seed = pipeline_json();
    const auto cfg_with = write_json(dir, "with_seed.json", with_seed);
    auto without_seed = pipeline_json();
    without_seed.erase("seed");
    const auto cfg_without = write_json(dir, "without_seed.json", without_seed);

    setenv("SSDT_SEED", "42", 1);
    const fs::path out1 = dir / "env";
    REQUIRE(cli::run({"pretext", "--config", cfg_without.string(), "--out", out1.string()}) == 0);
    auto record = pipeline::read_json_file(out1 / "pretext_record.json");
    CHECK(record["config"]["seed"] == 42);

    const fs::path out2 = dir / "file";
    REQUIRE(cli::run({"pretext", "--config", cfg_with.string(), "--out", out2.string()}) == 0);
    record = pipeline::read_json_file(out2 / "pretext_record.json");
    CHECK(record["config"]["seed"] == 1); // file seed wins over environment

    const fs::path out3 = dir / "override";
    REQUIRE(cli::run({"pretext", "--config", cfg_without.string(), "--set", "seed=9", "--out",
                      out3.string()}) == 0);
    record = pipeline::read_json_file(out3 / "pretext_record.json");
    CHECK(record["config"]["seed"] == 9);
    unsetenv("SSDT_SEED");
    fs::remove_all(dir);
}

TEST_CASE("invalid seeds list for ablate") {
    const fs::path dir = fresh_dir("ablate_bad");
    const auto cfg = write_json(dir, "run.json", pipeline_json());
    CHECK(cli::run({"ablate", "--config", cfg.string(), "--seeds", "1", "--out",
                    (dir / "o").string()}) == 1);
    CHECK(cli::run({"ablate", "--config", cfg.string(), "--seeds", "a,b", "--out",
                    (dir / "o").string()}) == 1);
    fs::remove_all(dir);
}

TEST_CASE("gradcheck command") {
    CoutCapture capture;
    SECTION("default tiny instances pass") {
        REQUIRE(cli::run({"gradcheck"}) == 0);
        const std::string text = capture.text();
        // every parameter group appears exactly once
        for (const char* name : {"stem", "block0", "block1", "head"}) {
            const auto first = text.find(std::string(" ") + name);
            REQUIRE(first != std::string::npos);
            CHECK(text.find(std::string(" ") + name, first + 1) == std::string::npos);
        }
        for (int l = 0; l < 4; ++l) {
            CHECK(text.find("w" + std::to_string(l)) != std::string::npos);
            CHECK(text.find("b" + std::to_string(l)) != std::string::npos);
        }
        CHECK(text.find("gradcheck passed") != std::string::npos);
    }
    SECTION("a corrupted gradient is detected") {
        REQUIRE(cli::run({"gradcheck", "--corrupt"}) == 2);
        CHECK(capture.text().find("FAIL") != std::string::npos);
    }
}
