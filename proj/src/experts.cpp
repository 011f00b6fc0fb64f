#include "omnimatte/experts.hpp"

#include <algorithm>
#include <sstream>

#include "omnimatte/error.hpp"

namespace omni {

std::string expert_kind_name(ExpertKind k) { return k == ExpertKind::Effect ? "effect" : "quality"; }

ExpertKind parse_expert_kind(std::string_view s) {
    if (s == "effect") return ExpertKind::Effect;
    if (s == "quality") return ExpertKind::Quality;
    throw ValidationError("unknown expert kind '" + std::string(s) + "' (expected effect or quality)");
}

nn::AttentionMaskType default_mask(ExpertKind k) {
    return k == ExpertKind::Effect ? nn::AttentionMaskType::MatteReadsInpaint : nn::AttentionMaskType::Isolated;
}

int default_rank(ExpertKind k) { return k == ExpertKind::Effect ? kDefaultEffectRank : kDefaultQualityRank; }

void ExpertConfig::validate(int n_blocks, int dim) const {
    const std::string kind_name = expert_kind_name(kind);
    if (rank < 1 || rank > dim)
        throw ValidationError("expert.rank: expected 1 <= rank <= " + std::to_string(dim) + ", got " + std::to_string(rank));
    if (block_set.empty()) throw ValidationError("expert.block_set: must not be empty");
    if (!std::is_sorted(block_set.begin(), block_set.end()) ||
        std::adjacent_find(block_set.begin(), block_set.end()) != block_set.end())
        throw ValidationError("expert.block_set: must be sorted without duplicates");
    if (block_set.front() < 1 || block_set.back() > n_blocks)
        throw ValidationError("expert.block_set: indices must lie in 1.." + std::to_string(n_blocks));
    const int k = int(block_set.size());
    if (kind == ExpertKind::Effect) {
        for (int i = 0; i < k; ++i)
            if (block_set[i] != n_blocks - k + 1 + i)
                throw ValidationError("expert.block_set: the effect expert needs a suffix of blocks {B-K+1..B}");
    } else if (k != n_blocks) {
        throw ValidationError("expert.block_set: the quality expert covers all " + std::to_string(n_blocks) + " blocks");
    }
    if (!mask_overridden && mask_type != default_mask(kind))
        throw ValidationError("expert.mask_type: the " + kind_name + " expert uses mask " +
                              nn::mask_type_name(default_mask(kind)));
}

nlohmann::json ExpertConfig::to_json() const {
    return {{"kind", expert_kind_name(kind)},
            {"block_set", block_set},
            {"rank", rank},
            {"mask_type", nn::mask_type_name(mask_type)},
            {"mask_overridden", mask_overridden},
            {"lora_multiplier", kLoraMultiplier}};
}

ExpertConfig ExpertConfig::from_json(const nlohmann::json& j) {
    ExpertConfig c;
    for (const char* f : {"kind", "block_set", "rank", "mask_type"})
        if (!j.contains(f)) throw LoadError(std::string("expert metadata is missing field '") + f + "'");
    c.kind = parse_expert_kind(j["kind"].get<std::string>());
    c.block_set = j["block_set"].get<std::vector<int>>();
    c.rank = j["rank"].get<int>();
    c.mask_type = nn::parse_mask_type(j["mask_type"].get<std::string>());
    c.mask_overridden = j.value("mask_overridden", false);
    if (j.contains("lora_multiplier") && j["lora_multiplier"].get<double>() != kLoraMultiplier)
        throw LoadError("expert metadata: unsupported lora_multiplier " + j["lora_multiplier"].dump());
    return c;
}

std::size_t ExpertModel::trainable_parameters() const {
    std::size_t n = 0;
    for (const auto& blk : adapters)
        if (blk)
            for (const auto& a : blk->proj)
                if (a) n += std::size_t(a->down.size() + a->up.size());
    return n;
}

ExpertModel make_expert(std::shared_ptr<const nn::BackboneParams<float>> base, ExpertKind kind,
                        std::vector<int> block_set, int rank, std::uint64_t seed,
                        std::optional<nn::AttentionMaskType> override_mask) {
    if (!base) throw ValidationError("make_expert: no base model");
    ExpertModel e;
    e.config.kind = kind;
    e.config.block_set = std::move(block_set);
    e.config.rank = rank;
    e.config.mask_type = override_mask.value_or(default_mask(kind));
    e.config.mask_overridden = override_mask.has_value() && *override_mask != default_mask(kind);
    const int n_blocks = int(base->blocks.size());
    e.config.validate(n_blocks, base->config.dim);
    e.base = std::move(base);
    e.base_checksum = nn::base_checksum(*e.base);
    e.adapters.resize(std::size_t(n_blocks));
    Rng rng(seed, kind == ExpertKind::Effect ? 101 : 102);
    for (int b : e.config.block_set) {
        nn::BlockAdapters<float> blk;
        for (nn::Projection p : nn::kProjections) blk.proj[std::size_t(p)] = nn::init_lora(rank, e.base->config.dim, rng);
        e.adapters[std::size_t(b - 1)] = std::move(blk);
    }
    return e;
}

std::vector<int> effect_blocks_from_profile(const ContributionProfile& profile, bool smooth) {
    const int n = profile.blocks();
    if (n < 1) throw ValidationError("effect_blocks_from_profile: empty profile");
    std::vector<int> out;
    if (profile.defined()) {
        const StagePartition part = partition_stages(profile, smooth);
        if (!part.fallback) {
            for (int b = part.stages.back().first; b <= part.stages.back().second; ++b) out.push_back(b);
            return out;
        }
    }
    const int k = (n + 2) / 3;
    for (int b = n - k + 1; b <= n; ++b) out.push_back(b);
    return out;
}

namespace {

std::string adapter_name(ExpertKind kind, std::size_t block, nn::Projection p, const char* part) {
    return "expert/" + expert_kind_name(kind) + "/block" + std::to_string(block + 1) + "/" + nn::projection_name(p) +
           "/" + part;
}

} // namespace

void put_expert(nn::Checkpoint& ckpt, const ExpertModel& expert) {
    for (std::size_t b = 0; b < expert.adapters.size(); ++b) {
        if (!expert.adapters[b]) continue;
        for (nn::Projection p : nn::kProjections) {
            const auto* a = expert.adapters[b]->get(p);
            if (!a) continue;
            ckpt.put(adapter_name(expert.config.kind, b, p, "down"), a->down);
            ckpt.put(adapter_name(expert.config.kind, b, p, "up"), a->up);
        }
    }
    auto& meta = ckpt.metadata();
    meta["expert"] = nlohmann::ordered_json::parse(expert.config.to_json().dump());
    meta["base_checksum"] = expert.base_checksum;
    meta["model"] = nlohmann::ordered_json::parse(expert.base->config.to_json().dump());
}

void save_expert(const std::filesystem::path& path, const ExpertModel& expert) {
    nn::Checkpoint ck;
    put_expert(ck, expert);
    ck.save(path);
}

ExpertModel get_expert(const nn::Checkpoint& ckpt, std::shared_ptr<const nn::BackboneParams<float>> base) {
    const auto& meta = ckpt.metadata();
    for (const char* f : {"expert", "base_checksum"})
        if (!meta.contains(f)) throw LoadError(std::string("expert checkpoint is missing field '") + f + "'");
    const std::string recorded = meta["base_checksum"].get<std::string>();
    const std::string actual = nn::base_checksum(*base);
    if (recorded != actual)
        throw ValidationError("expert was trained on base " + recorded + " but the loaded base is " + actual);
    ExpertModel e;
    e.config = ExpertConfig::from_json(nlohmann::json::parse(meta["expert"].dump()));
    e.config.validate(int(base->blocks.size()), base->config.dim);
    e.base = std::move(base);
    e.base_checksum = actual;
    e.adapters.resize(e.base->blocks.size());
    const int d = e.base->config.dim;
    for (int b : e.config.block_set) {
        nn::BlockAdapters<float> blk;
        for (nn::Projection p : nn::kProjections) {
            nn::LoraAdapter<float> a{nn::Mat<float>(e.config.rank, d), nn::Mat<float>(d, e.config.rank)};
            ckpt.get_into(adapter_name(e.config.kind, std::size_t(b - 1), p, "down"), a.down);
            ckpt.get_into(adapter_name(e.config.kind, std::size_t(b - 1), p, "up"), a.up);
            blk.proj[std::size_t(p)] = std::move(a);
        }
        e.adapters[std::size_t(b - 1)] = std::move(blk);
    }
    return e;
}

ExpertModel load_expert(const std::filesystem::path& path, std::shared_ptr<const nn::BackboneParams<float>> base) {
    return get_expert(nn::Checkpoint::load(path), std::move(base));
}

std::vector<int> parse_block_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    auto to_int = [&](const std::string& s) {
        try {
            std::size_t used = 0;
            const int v = std::stoi(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ValidationError("--effect-blocks: '" + text + "' is not a block list like 9,10,11,12 or 9-12");
        }
    };
    while (std::getline(ss, item, ',')) {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
            out.push_back(to_int(item));
        } else {
            const int a = to_int(item.substr(0, dash)), b = to_int(item.substr(dash + 1));
            if (a > b) throw ValidationError("--effect-blocks: descending range '" + item + "'");
            for (int i = a; i <= b; ++i) out.push_back(i);
        }
    }
    if (out.empty()) throw ValidationError("--effect-blocks: empty block list");
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

} // namespace omni
