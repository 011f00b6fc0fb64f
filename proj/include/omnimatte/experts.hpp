#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "omnimatte/analysis.hpp"
#include "omnimatte/nn/checkpoint.hpp"
#include "omnimatte/nn/model.hpp"

namespace omni {

enum class ExpertKind { Effect, Quality };

std::string expert_kind_name(ExpertKind k); // "effect", "quality"
ExpertKind parse_expert_kind(std::string_view s);

inline constexpr int kDefaultEffectRank = 8;
inline constexpr int kDefaultQualityRank = 4;
inline constexpr double kLoraMultiplier = 1.0;

nn::AttentionMaskType default_mask(ExpertKind k);
int default_rank(ExpertKind k);

struct ExpertConfig {
    ExpertKind kind = ExpertKind::Quality;
    std::vector<int> block_set; // sorted 1-based block indices
    int rank = kDefaultQualityRank;
    nn::AttentionMaskType mask_type = nn::AttentionMaskType::Isolated;
    bool mask_overridden = false; // ablation runs may train under another regime

    // EFFECT: a non-empty suffix {B-K+1..B} under mask b. QUALITY: all blocks under mask c.
    void validate(int n_blocks, int dim) const;
    nlohmann::json to_json() const;
    static ExpertConfig from_json(const nlohmann::json& j);
};

struct ExpertModel {
    std::shared_ptr<const nn::BackboneParams<float>> base;
    std::string base_checksum;
    nn::AdapterSet<float> adapters; // one slot per base block
    ExpertConfig config;

    std::size_t trainable_parameters() const;
};

// Adapters on Q, K, V, O of every listed block; `override_mask` replaces the kind's regime.
ExpertModel make_expert(std::shared_ptr<const nn::BackboneParams<float>> base, ExpertKind kind,
                        std::vector<int> block_set, int rank, std::uint64_t seed,
                        std::optional<nn::AttentionMaskType> override_mask = std::nullopt);

// Final stage of the trough partition, or the last ceil(B/3) blocks if the profile has
// fewer than two troughs (or is undefined).
std::vector<int> effect_blocks_from_profile(const ContributionProfile& profile, bool smooth = true);

// Adapter tensors as "expert/<kind>/block<i>/<proj>/{down,up}".
void put_expert(nn::Checkpoint& ckpt, const ExpertModel& expert);
void save_expert(const std::filesystem::path& path, const ExpertModel& expert);
// Rejects a checkpoint whose recorded base checksum differs from `base`.
ExpertModel get_expert(const nn::Checkpoint& ckpt, std::shared_ptr<const nn::BackboneParams<float>> base);
ExpertModel load_expert(const std::filesystem::path& path, std::shared_ptr<const nn::BackboneParams<float>> base);

// "1,2,5-8" -> {1,2,5,6,7,8}
std::vector<int> parse_block_list(const std::string& text);

} // namespace omni
