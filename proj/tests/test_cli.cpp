#include "doctest.h"

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "omnimatte/cli_app.hpp"
#include "omnimatte/image_io.hpp"
#include "omnimatte/nn/checkpoint.hpp"
#include "omnimatte/rng.hpp"
#include "test_util.hpp"

using namespace omni;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = 0;
    std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = omni::cli::run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

json tiny_config() {
    return json::parse(R"({
        "generator": {"frames": 2, "height": 16, "width": 16},
        "data": {"train_count": 4, "val_count": 2},
        "model": {"dim": 16, "heads": 2, "blocks": 3, "mlp_ratio": 2},
        "pretrain": {"steps": 12, "batch": 2, "checkpoint_every": 4},
        "train_effect": {"steps": 4, "batch": 2},
        "train_quality": {"steps": 4, "batch": 2},
        "analysis": {"clips": 2, "timesteps": [0.7, 0.3]},
        "sampler": {"n_steps": 3},
        "sweep": {"taus": [0, 0.5, 1]}
    })");
}

fs::path write_config(const fs::path& dir, const json& j) {
    const fs::path p = dir / "config.json.in";
    io::write_text(p, j.dump());
    return p;
}

// synth + pretrain in `run` with the tiny config.
void base_run(const fs::path& run, const fs::path& config) {
    REQUIRE(invoke({"synth", "--run", run.string(), "--config", config.string(), "--seed", "5"}).code == 0);
    REQUIRE(invoke({"pretrain", "--run", run.string(), "--seed", "5"}).code == 0);
}

void experts(const fs::path& run) {
    REQUIRE(invoke({"train-expert", "--run", run.string(), "--seed", "5", "--kind", "effect", "--effect-blocks", "3"})
                .code == 0);
    REQUIRE(invoke({"train-expert", "--run", run.string(), "--seed", "5", "--kind", "quality"}).code == 0);
}

} // namespace

TEST_CASE("synth: empty dataset, determinism and config validation") {
    test::TempDir tmp("cli_synth");
    const fs::path cfg = write_config(tmp.path, tiny_config());

    const fs::path empty = tmp.path / "empty";
    const Outcome e = invoke({"synth", "--run", empty.string(), "--config", cfg.string(), "--split", "val", "--count", "0"});
    REQUIRE(e.code == 0);
    const json m = json::parse(io::read_text(empty / "data" / "val" / "manifest.json"));
    CHECK(m["count"] == 0);
    CHECK(test::tree(empty / "data" / "val").size() == 1);

    const fs::path a = tmp.path / "a", b = tmp.path / "b";
    for (const auto& d : {a, b}) REQUIRE(invoke({"synth", "--run", d.string(), "--config", cfg.string(), "--seed", "3"}).code == 0);
    CHECK(test::same_tree(a / "data", b / "data"));
    CHECK(invoke({"synth", "--run", a.string(), "--seed", "3"}).out.find("up to date") != std::string::npos);
    const Outcome changed = invoke({"synth", "--run", a.string(), "--seed", "4"});
    CHECK(changed.code == cli::kExitValidation);
    CHECK(changed.err.find("seed") != std::string::npos);

    json bad = tiny_config();
    bad["generator"]["shadow"] = {{"opacity", 0.9}};
    const Outcome v = invoke({"synth", "--run", (tmp.path / "bad").string(), "--config",
                           write_config(tmp.path, bad).string()});
    CHECK(v.code == cli::kExitValidation);
    CHECK(v.err.find("opacity") != std::string::npos);

    json unknown = tiny_config();
    unknown["pretrain"]["momentum"] = 0.9;
    const Outcome u = invoke({"synth", "--run", (tmp.path / "bad2").string(), "--config",
                           write_config(tmp.path, unknown).string()});
    CHECK(u.code == cli::kExitValidation);
    CHECK(u.err.find("pretrain.momentum") != std::string::npos);

    CHECK(invoke({"synth", "--run", a.string(), "--count", "3"}).code == cli::kExitValidation);
    CHECK(invoke({"bogus"}).code == cli::kExitValidation);
}

TEST_CASE("missing prerequisites exit with the prerequisite code") {
    test::TempDir tmp("cli_prereq");
    const fs::path cfg = write_config(tmp.path, tiny_config());
    const fs::path run = tmp.path / "run";
    CHECK(invoke({"pretrain", "--run", run.string(), "--config", cfg.string()}).code == cli::kExitPrerequisite);
    REQUIRE(invoke({"synth", "--run", run.string()}).code == 0);
    const Outcome t = invoke({"train-expert", "--run", run.string(), "--kind", "quality"});
    CHECK(t.code == cli::kExitPrerequisite);
    CHECK(t.err.find("pretrain") != std::string::npos);
    CHECK(invoke({"analyze", "--run", run.string()}).code == cli::kExitPrerequisite);
    CHECK(invoke({"sample", "--run", run.string()}).code == cli::kExitPrerequisite);
    CHECK(invoke({"eval", "--run", run.string()}).code == cli::kExitPrerequisite);
}

TEST_CASE("pretrain: zero steps, interrupt and resume") {
    test::TempDir tmp("cli_pretrain");
    const fs::path cfg = write_config(tmp.path, tiny_config());

    const fs::path zero = tmp.path / "zero";
    REQUIRE(invoke({"synth", "--run", zero.string(), "--config", cfg.string(), "--seed", "5"}).code == 0);
    REQUIRE(invoke({"pretrain", "--run", zero.string(), "--seed", "5", "--steps", "0"}).code == 0);
    const auto trained = nn::get_backbone(nn::Checkpoint::load(zero / "base" / "model.ckpt"));
    const auto rc = cli::RunConfig::from_json(tiny_config());
    CHECK(nn::base_checksum(trained) == nn::base_checksum(nn::init_backbone(rc.model, mix_seed(5, 7))));

    const fs::path full = tmp.path / "full", cut = tmp.path / "cut";
    base_run(full, cfg);
    REQUIRE(invoke({"synth", "--run", cut.string(), "--config", cfg.string(), "--seed", "5"}).code == 0);
    const Outcome stop = invoke({"pretrain", "--run", cut.string(), "--seed", "5", "--stop-after", "6"});
    CHECK(stop.code == cli::kExitInterrupted);
    CHECK(fs::exists(cut / "base" / "state.ckpt"));
    CHECK_FALSE(fs::exists(cut / "base" / "model.ckpt"));
    REQUIRE(invoke({"pretrain", "--run", cut.string(), "--seed", "5", "--resume"}).code == 0);
    CHECK(io::read_text(full / "base" / "loss.csv") == io::read_text(cut / "base" / "loss.csv"));
    CHECK(io::read_bytes(full / "base" / "model.ckpt") == io::read_bytes(cut / "base" / "model.ckpt"));

    CHECK(invoke({"pretrain", "--run", full.string(), "--seed", "5"}).out.find("up to date") != std::string::npos);
    CHECK(invoke({"pretrain", "--run", full.string(), "--seed", "5", "--steps", "3"}).code == cli::kExitValidation);
}

TEST_CASE("analyze, experts, sampling, evaluation and sweep") {
    test::TempDir tmp("cli_pipeline");
    const fs::path cfg = write_config(tmp.path, tiny_config());
    const fs::path run = tmp.path / "run";
    base_run(run, cfg);

    REQUIRE(invoke({"analyze", "--run", run.string(), "--seed", "5"}).code == 0);
    const std::string profile = io::read_text(run / "analysis" / "profile.csv");
    const json stages = json::parse(io::read_text(run / "analysis" / "stages.json"));
    CHECK(stages.contains("effect_blocks"));
    CHECK(fs::exists(run / "analysis" / "stage1.png"));
    REQUIRE(invoke({"analyze", "--run", run.string(), "--seed", "5", "--force", "--jobs", "2"}).code == 0);
    CHECK(io::read_text(run / "analysis" / "profile.csv") == profile);

    experts(run);
    const json train = json::parse(io::read_text(run / "experts" / "effect" / "train.json"));
    CHECK(train["expert"]["block_set"] == json::array({3}));

    REQUIRE(invoke({"sample", "--run", run.string(), "--seed", "5", "--tau", "1"}).code == 0);
    REQUIRE(invoke({"sample", "--run", run.string(), "--seed", "5", "--kind", "quality"}).code == 0);
    for (int i = 0; i < 2; ++i) {
        const fs::path rel = fs::path("clip_000" + std::to_string(i)) / "alpha";
        CHECK(test::same_tree(run / "samples" / "tau_1" / rel, run / "samples" / "quality" / rel));
    }
    CHECK(invoke({"sample", "--run", run.string(), "--tau", "0.5", "--kind", "effect"}).code == cli::kExitValidation);

    const Outcome gt = invoke({"eval", "--run", run.string(), "--layers", (run / "data" / "val").string()});
    REQUIRE(gt.code == 0);
    const std::string report = io::read_text(run / "eval" / "val" / "report.csv");
    CHECK(report.find("clip_0000,99") != std::string::npos);
    CHECK(report.find("clip_0001,99") != std::string::npos);

    REQUIRE(invoke({"sample", "--run", run.string(), "--seed", "5", "--kind", "effect"}).code == 0);
    REQUIRE(invoke({"eval", "--run", run.string(), "--kind", "effect"}).code == 0);
    REQUIRE(invoke({"eval", "--run", run.string(), "--kind", "quality"}).code == 0);
    REQUIRE(invoke({"sweep-tau", "--run", run.string(), "--seed", "5"}).code == 0);
    const std::string tradeoff = io::read_text(run / "sweep" / "tradeoff.csv");
    int rows = 0;
    std::istringstream lines(tradeoff);
    std::string line;
    std::vector<std::string> data;
    while (std::getline(lines, line))
        if (!line.empty() && line[0] != '#' && std::isdigit(static_cast<unsigned char>(line[0]))) data.push_back(line), ++rows;
    CHECK(rows == 3);

    // End points match the single-expert evaluations of the same clips.
    const json manifest = json::parse(io::read_text(run / "manifest.json"));
    auto column = [](const std::string& row, int k) {
        std::istringstream s(row);
        std::string cell;
        for (int i = 0; i <= k; ++i) std::getline(s, cell, ',');
        return std::stod(cell);
    };
    auto mean_fg = [&](const std::string& label) {
        std::istringstream s(io::read_text(run / "eval" / label / "report.csv"));
        std::string header, r;
        while (std::getline(s, header) && header[0] == '#') {}
        std::istringstream hs(header);
        std::string cell;
        int idx = 0, fg = -1;
        while (std::getline(hs, cell, ',')) {
            if (cell == "fg_mse") fg = idx;
            ++idx;
        }
        REQUIRE(fg >= 0);
        while (std::getline(s, r))
            if (r.rfind("mean,", 0) == 0) return column(r, fg);
        FAIL("no mean row");
        return 0.0;
    };
    // eval reads 8-bit alpha PNGs, so each error term moves by at most 1/510.
    REQUIRE(data.size() == 3);
    const double quant = 2.0 / 510 + 1.0 / (510.0 * 510.0);
    CHECK(std::abs(column(data[0], 1) - mean_fg("effect")) <= quant);
    CHECK(std::abs(column(data[2], 1) - mean_fg("quality")) <= quant);
    CHECK(manifest["stages"].contains("sweep-tau"));
}

TEST_CASE("experts on different bases are refused") {
    test::TempDir tmp("cli_bases");
    const fs::path cfg = write_config(tmp.path, tiny_config());
    const fs::path run = tmp.path / "run";
    base_run(run, cfg);
    REQUIRE(invoke({"train-expert", "--run", run.string(), "--seed", "5", "--kind", "effect", "--effect-blocks", "3"})
                .code == 0);
    const std::string first = json::parse(io::read_text(run / "base" / "train.json"))["base_checksum"];
    REQUIRE(invoke({"pretrain", "--run", run.string(), "--seed", "5", "--steps", "3", "--force"}).code == 0);
    const std::string second = json::parse(io::read_text(run / "base" / "train.json"))["base_checksum"];
    REQUIRE(first != second);
    REQUIRE(invoke({"train-expert", "--run", run.string(), "--seed", "5", "--kind", "quality"}).code == 0);
    const Outcome s = invoke({"sample", "--run", run.string(), "--seed", "5"});
    CHECK(s.code == cli::kExitValidation);
    CHECK(s.err.find(first) != std::string::npos);
    CHECK(s.err.find(second) != std::string::npos);
}
