#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "omnimatte/grid.hpp"
#include "omnimatte/nn/model.hpp"
#include "omnimatte/synth.hpp"

namespace omni {

// Head-averaged attention of one block over the inpaint tokens of a clip.
struct AttentionRecord {
    int block = 1; // 1-based
    double t = 0.0;
    nn::Mat<float> weights; // queries x keys, rows sum to 1
};

// Per foreground pixel p: s(p) = sum_{y in effect} W[p, y] / sum_x W[p, x], with token
// attention spread uniformly over each key patch. Other pixels score 0.
ScoreMap association_scores(const nn::Mat<float>& attn, const BinaryMask& fg, const BinaryMask& effect,
                            const nn::PatchLayout& layout);

// Where the foreground looks: S(y) = mean over foreground pixels p of W[p, y] / sum_x W[p, x].
// Summing S over an effect mask gives the mean association score of the foreground.
ScoreMap effect_attention_map(const nn::Mat<float>& attn, const BinaryMask& fg, const nn::PatchLayout& layout);

struct ContributionProfile {
    std::vector<double> c;          // C_b, b = 1..B, sums to 1 when defined
    int n_clips = 0;                // clips that contributed
    int n_degenerate = 0;           // clips with zero effect mass, excluded
    std::vector<double> timesteps;
    std::optional<std::string> diagnostic; // set when no clip had effect mass

    bool defined() const { return !diagnostic.has_value(); }
    int blocks() const { return int(c.size()); }
};

// Per-clip raw_b = sum over frames and pixels of maps[b] * effect.
std::vector<double> raw_contributions(const std::vector<ScoreMap>& maps, const BinaryMask& effect);

// Normalizes raw block masses; an all-zero vector yields a diagnostic, not NaNs.
ContributionProfile contribution_profile(const std::vector<ScoreMap>& maps, const BinaryMask& effect);

// Uniform average of per-clip profiles; undefined clips are counted and skipped.
ContributionProfile average_profiles(const std::vector<ContributionProfile>& per_clip, int n_blocks);

struct StagePartition {
    std::vector<std::pair<int, int>> stages; // 1-based inclusive block ranges
    std::vector<int> troughs;                // 1-based blocks used as boundaries
    bool fallback = false;
    nlohmann::json to_json() const;
};

// Two deepest interior strict minima of the (optionally 3-point smoothed) profile mark
// the ends of the first two stages. Fewer than two troughs: equal thirds. B < 3: one stage.
StagePartition partition_stages(const ContributionProfile& profile, bool smooth = true);

// 3-point moving average; the end points average their two available neighbours.
std::vector<double> smooth3(const std::vector<double>& v);

struct AnalysisConfig {
    std::vector<double> timesteps{0.9, 0.7, 0.5, 0.3, 0.1};
    nn::HeadAverage head_average = nn::HeadAverage::Probabilities;
    bool smooth = true;
    float shadow_threshold = 0.05f;
    std::uint64_t seed = 0;
    int jobs = 1;
    void validate() const;
    nlohmann::json to_json() const;
};

struct ClipAnalysis {
    ContributionProfile profile;
    std::vector<std::vector<double>> raw_per_t; // [t][block]
    std::vector<ScoreMap> maps;                 // timestep-averaged S per block
};

// records: any number of timesteps, one record per (t, block).
ClipAnalysis analyze_records(const std::vector<AttentionRecord>& records, int n_blocks, const BinaryMask& fg,
                             const BinaryMask& effect, const nn::PatchLayout& layout);

struct AnalysisResult {
    ContributionProfile profile;
    StagePartition partition;
    std::vector<ScoreMap> stage_maps;         // mean S over stage blocks and clips
    std::vector<std::vector<double>> per_clip; // per-clip C_b (empty row if degenerate)
};

// Runs the inpaint branch on noised background latents for every clip and timestep.
AnalysisResult analyze_model(const nn::BackboneParams<float>& base, const std::vector<TrainingSample>& clips,
                             const AnalysisConfig& cfg);

std::string profile_csv(const ContributionProfile& profile);
std::string plot_data_csv(const AnalysisResult& result);

} // namespace omni
