#pragma once

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "omnimatte/analysis.hpp"
#include "omnimatte/media.hpp"
#include "omnimatte/nn/model.hpp"
#include "omnimatte/synth.hpp"
#include "omnimatte/trainer.hpp"

namespace omni::cli {

inline constexpr const char* kToolVersion = "1.0.0";

// Exit codes. An interrupted training run exits with kExitInterrupted after saving state.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitPrerequisite = 3;
inline constexpr int kExitInterrupted = 130;

inline constexpr double kTargetPsnrDb = 28.0;
inline constexpr double kTargetObjectAlphaMse = 0.02;

// Everything a run depends on besides --seed and per-command flags. Stored as
// <run>/config.json; every default is written out.
struct RunConfig {
    GeneratorConfig generator;
    int train_count = 500;
    int val_count = 20;
    nn::ModelConfig model;
    TrainConfig pretrain = TrainConfig::defaults(Phase::PretrainInpaint);
    TrainConfig effect = TrainConfig::defaults(Phase::TrainEffect);
    TrainConfig quality = TrainConfig::defaults(Phase::TrainQuality);
    int effect_rank = kDefaultEffectRank;
    int quality_rank = kDefaultQualityRank;
    AnalysisConfig analysis;
    int analysis_clips = 50;
    int sample_steps = 20;
    double tau = 0.5;
    float eps = kDefaultRecoverEps;
    std::vector<double> sweep_taus{0.0, 0.25, 0.5, 0.75, 1.0};

    void validate() const;
    nlohmann::json to_json() const;
    // Missing sections keep their defaults; unknown fields are rejected by name.
    static RunConfig from_json(const nlohmann::json& j);
};

// Set by the SIGINT handler; training commands save state and stop at the next step.
std::atomic<bool>& interrupt_flag();

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace omni::cli
