#include "omnimatte/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "omnimatte/error.hpp"
#include "omnimatte/media.hpp"
#include "omnimatte/parallel.hpp"

namespace omni {

namespace {

struct TokenGeometry {
    int rows = 0, cols = 0, area = 0, n = 0;
};

TokenGeometry geometry(const Shape& s, const nn::PatchLayout& layout) {
    layout.validate(s);
    TokenGeometry g;
    g.rows = s.height / layout.patch_h;
    g.cols = s.width / layout.patch_w;
    g.area = layout.patch_h * layout.patch_w;
    g.n = s.frames * g.rows * g.cols;
    return g;
}

int token_of(int f, int y, int x, const TokenGeometry& g, const nn::PatchLayout& layout) {
    return (f * g.rows + y / layout.patch_h) * g.cols + x / layout.patch_w;
}

// Set pixels per token.
std::vector<int> token_counts(const BinaryMask& m, const TokenGeometry& g, const nn::PatchLayout& layout) {
    std::vector<int> counts(std::size_t(g.n), 0);
    const Shape s = m.shape();
    for (int f = 0; f < s.frames; ++f)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                if (m.at(f, y, x)) ++counts[token_of(f, y, x, g, layout)];
    return counts;
}

void check_attention(const nn::Mat<float>& attn, const TokenGeometry& g) {
    if (attn.rows() != g.n || attn.cols() != g.n)
        throw ValidationError("attention matrix is " + std::to_string(attn.rows()) + "x" + std::to_string(attn.cols()) +
                              ", expected " + std::to_string(g.n) + "x" + std::to_string(g.n));
}

} // namespace

ScoreMap association_scores(const nn::Mat<float>& attn, const BinaryMask& fg, const BinaryMask& effect,
                            const nn::PatchLayout& layout) {
    require_same_shape(fg, effect, "association_scores");
    const Shape s = fg.shape();
    const TokenGeometry g = geometry(s, layout);
    check_attention(attn, g);
    const std::vector<int> eff = token_counts(effect, g, layout);
    std::vector<double> token_score(std::size_t(g.n), 0.0);
    for (int i = 0; i < g.n; ++i) {
        double num = 0.0, den = 0.0;
        for (int j = 0; j < g.n; ++j) {
            const double w = attn(i, j);
            den += w;
            if (eff[j]) num += w * eff[j] / g.area;
        }
        token_score[i] = den > 0.0 ? num / den : 0.0;
    }
    ScoreMap out(s, 0.0f);
    for (int f = 0; f < s.frames; ++f)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                if (fg.at(f, y, x)) out.at(f, y, x) = float(token_score[token_of(f, y, x, g, layout)]);
    return out;
}

ScoreMap effect_attention_map(const nn::Mat<float>& attn, const BinaryMask& fg, const nn::PatchLayout& layout) {
    const Shape s = fg.shape();
    const TokenGeometry g = geometry(s, layout);
    check_attention(attn, g);
    const std::vector<int> fgc = token_counts(fg, g, layout);
    const double total = std::accumulate(fgc.begin(), fgc.end(), 0.0);
    ScoreMap out(s, 0.0f);
    if (total == 0.0) return out;
    std::vector<double> key_mass(std::size_t(g.n), 0.0);
    for (int i = 0; i < g.n; ++i) {
        if (!fgc[i]) continue;
        double den = 0.0;
        for (int j = 0; j < g.n; ++j) den += attn(i, j);
        if (den <= 0.0) continue;
        const double w = fgc[i] / (total * den);
        for (int j = 0; j < g.n; ++j) key_mass[j] += w * attn(i, j);
    }
    for (int f = 0; f < s.frames; ++f)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                out.at(f, y, x) = float(key_mass[token_of(f, y, x, g, layout)] / g.area);
    return out;
}

std::vector<double> raw_contributions(const std::vector<ScoreMap>& maps, const BinaryMask& effect) {
    std::vector<double> raw;
    for (const auto& m : maps) {
        require_same_shape(m, effect, "contribution_profile");
        double sum = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (effect.data()[i]) sum += m.data()[i];
        raw.push_back(sum);
    }
    return raw;
}

namespace {

ContributionProfile normalize(std::vector<double> raw) {
    ContributionProfile p;
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    if (!(total > 0.0) || !std::isfinite(total)) {
        p.c.assign(raw.size(), 0.0);
        p.n_degenerate = 1;
        p.diagnostic = "zero effect-attention mass in every block (no effect pixels or no attention into them)";
        return p;
    }
    for (double& r : raw) r /= total;
    p.c = std::move(raw);
    p.n_clips = 1;
    return p;
}

} // namespace

ContributionProfile contribution_profile(const std::vector<ScoreMap>& maps, const BinaryMask& effect) {
    if (maps.empty()) throw ValidationError("contribution_profile: no blocks");
    return normalize(raw_contributions(maps, effect));
}

ContributionProfile average_profiles(const std::vector<ContributionProfile>& per_clip, int n_blocks) {
    ContributionProfile out;
    out.c.assign(std::size_t(n_blocks), 0.0);
    for (const auto& p : per_clip) {
        if (!p.defined()) {
            ++out.n_degenerate;
            continue;
        }
        if (p.blocks() != n_blocks) throw ValidationError("average_profiles: block count mismatch");
        for (int b = 0; b < n_blocks; ++b) out.c[b] += p.c[b];
        ++out.n_clips;
    }
    if (!per_clip.empty()) out.timesteps = per_clip.front().timesteps;
    if (out.n_clips == 0) {
        out.diagnostic = "no clip had effect mass (" + std::to_string(out.n_degenerate) + " degenerate clips)";
        return out;
    }
    for (double& c : out.c) c /= out.n_clips;
    // Renormalize so rounding in the average does not leave the sum off by more than 1 ulp-scale.
    const double total = std::accumulate(out.c.begin(), out.c.end(), 0.0);
    for (double& c : out.c) c /= total;
    return out;
}

std::vector<double> smooth3(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = v[i];
        int count = 1;
        if (i > 0) sum += v[i - 1], ++count;
        if (i + 1 < n) sum += v[i + 1], ++count;
        out[i] = sum / count;
    }
    return out;
}

nlohmann::json StagePartition::to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (auto [a, b] : stages) {
        std::vector<int> blocks;
        for (int i = a; i <= b; ++i) blocks.push_back(i);
        st.push_back(blocks);
    }
    return {{"stages", st}, {"troughs", troughs}, {"fallback", fallback}};
}

StagePartition partition_stages(const ContributionProfile& profile, bool smooth) {
    const int n = profile.blocks();
    StagePartition part;
    if (n < 1) throw ValidationError("partition_stages: empty profile");
    if (n < 3) {
        part.stages = {{1, n}};
        part.fallback = true;
        return part;
    }
    const std::vector<double> v = smooth ? smooth3(profile.c) : profile.c;
    std::vector<int> minima;
    for (int i = 1; i + 1 < n; ++i)
        if (v[i] < v[i - 1] && v[i] < v[i + 1]) minima.push_back(i);
    if (minima.size() >= 2) {
        std::stable_sort(minima.begin(), minima.end(), [&](int a, int b) { return v[a] < v[b]; });
        int t1 = minima[0], t2 = minima[1];
        if (t1 > t2) std::swap(t1, t2);
        part.troughs = {t1 + 1, t2 + 1};
        part.stages = {{1, t1 + 1}, {t1 + 2, t2 + 1}, {t2 + 2, n}};
        return part;
    }
    const int last = (n + 2) / 3;
    const int first = (n - last) / 2;
    part.fallback = true;
    part.stages = {{1, first}, {first + 1, n - last}, {n - last + 1, n}};
    return part;
}

void AnalysisConfig::validate() const {
    if (timesteps.empty()) throw ValidationError("analysis.timesteps: at least one timestep is required");
    for (double t : timesteps)
        if (!(t > 0.0 && t <= 1.0)) throw ValidationError("analysis.timesteps: values must lie in (0, 1]");
    if (!(shadow_threshold > 0.0f && shadow_threshold < 1.0f))
        throw ValidationError("analysis.shadow_threshold: expected a value in (0, 1)");
}

nlohmann::json AnalysisConfig::to_json() const {
    return {{"timesteps", timesteps},
            {"head_average", head_average == nn::HeadAverage::Probabilities ? "probabilities" : "logits"},
            {"smooth", smooth},
            {"shadow_threshold", shadow_threshold},
            {"seed", seed}};
}

ClipAnalysis analyze_records(const std::vector<AttentionRecord>& records, int n_blocks, const BinaryMask& fg,
                             const BinaryMask& effect, const nn::PatchLayout& layout) {
    if (n_blocks < 1) throw ValidationError("analyze_records: need at least one block");
    std::vector<double> ts;
    for (const auto& r : records) {
        if (r.block < 1 || r.block > n_blocks) throw ValidationError("analyze_records: block index out of range");
        if (std::find(ts.begin(), ts.end(), r.t) == ts.end()) ts.push_back(r.t);
    }
    if (ts.empty()) throw ValidationError("analyze_records: no attention records");
    ClipAnalysis out;
    out.maps.assign(std::size_t(n_blocks), ScoreMap(fg.shape(), 0.0f));
    std::vector<std::vector<int>> seen(ts.size(), std::vector<int>(std::size_t(n_blocks), 0));
    out.raw_per_t.assign(ts.size(), std::vector<double>(std::size_t(n_blocks), 0.0));
    for (const auto& r : records) {
        const std::size_t ti = std::size_t(std::find(ts.begin(), ts.end(), r.t) - ts.begin());
        if (seen[ti][r.block - 1]++) throw ValidationError("analyze_records: duplicate record for a block and timestep");
        const ScoreMap m = effect_attention_map(r.weights, fg, layout);
        out.raw_per_t[ti][r.block - 1] = raw_contributions({m}, effect)[0];
        auto& acc = out.maps[r.block - 1];
        for (std::size_t i = 0; i < m.size(); ++i) acc.data()[i] += m.data()[i] / float(ts.size());
    }
    for (const auto& row : seen)
        for (int c : row)
            if (!c) throw ValidationError("analyze_records: every block needs a record at every timestep");
    out.profile = contribution_profile(out.maps, effect);
    out.profile.timesteps = ts;
    return out;
}

AnalysisResult analyze_model(const nn::BackboneParams<float>& base, const std::vector<TrainingSample>& clips,
                             const AnalysisConfig& cfg) {
    cfg.validate();
    const int n_blocks = int(base.blocks.size());
    const Shape shape = base.config.shape();
    const nn::PatchLayout layout = base.config.layout();
    std::vector<ClipAnalysis> per(clips.size());
    parallel_for(clips.size(), cfg.jobs, [&](std::size_t k) {
        const TrainingSample& clip = clips[k];
        if (clip.shape() != shape)
            throw ValidationError("analyze: clip " + clip.shape().str() + " does not match the checkpoint layout " +
                                  shape.str());
        const Latent video = nn::encode_video(clip.composite);
        const Latent z0 = nn::encode_video(clip.background);
        const BinaryMask effect = binarize(clip.shadow_matte, cfg.shadow_threshold);
        std::vector<AttentionRecord> records;
        for (std::size_t ti = 0; ti < cfg.timesteps.size(); ++ti) {
            const double t = cfg.timesteps[ti];
            Rng rng(mix_seed(cfg.seed, k), ti + 1);
            Latent zt(shape);
            for (std::size_t i = 0; i < zt.size(); ++i)
                zt.data()[i] = float((1.0 - t) * z0.data()[i] + t * rng.normal());
            nn::AttentionCapture cap{cfg.head_average, {}};
            nn::backbone_forward(base, nullptr, video, clip.obj_mask, zt, nullptr, t, nn::AttentionMaskType::Isolated,
                                 nullptr, &cap);
            for (int b = 0; b < n_blocks; ++b) records.push_back({b + 1, t, std::move(cap.per_block[b])});
        }
        per[k] = analyze_records(records, n_blocks, clip.obj_mask, effect, layout);
    });

    AnalysisResult res;
    std::vector<ContributionProfile> profiles;
    for (const auto& p : per) {
        profiles.push_back(p.profile);
        res.per_clip.push_back(p.profile.defined() ? p.profile.c : std::vector<double>{});
    }
    res.profile = average_profiles(profiles, n_blocks);
    res.profile.timesteps = cfg.timesteps;
    if (res.profile.defined()) {
        res.partition = partition_stages(res.profile, cfg.smooth);
    } else {
        ContributionProfile flat;
        flat.c.assign(std::size_t(n_blocks), 1.0 / n_blocks);
        res.partition = partition_stages(flat, false);
    }
    for (auto [a, b] : res.partition.stages) {
        ScoreMap m(shape, 0.0f);
        const float w = 1.0f / float((b - a + 1) * std::max<std::size_t>(per.size(), 1));
        for (const auto& clip : per)
            for (int blk = a; blk <= b; ++blk)
                for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] += w * clip.maps[blk - 1].data()[i];
        res.stage_maps.push_back(std::move(m));
    }
    return res;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace

std::string profile_csv(const ContributionProfile& profile) {
    std::string out = "# block: 1-based block index; contribution: normalized effects contribution (sums to 1)\n";
    out += "block,contribution\n";
    for (int b = 0; b < profile.blocks(); ++b) out += std::to_string(b + 1) + "," + fmt(profile.c[b]) + "\n";
    return out;
}

std::string plot_data_csv(const AnalysisResult& result) {
    std::string out =
        "# block: 1-based; contribution: dataset C_b; smoothed: 3-point average; stage: 1-based stage index\n";
    out += "block,contribution,smoothed,stage\n";
    const auto sm = smooth3(result.profile.c);
    for (int b = 0; b < result.profile.blocks(); ++b) {
        int stage = 0;
        for (std::size_t s = 0; s < result.partition.stages.size(); ++s)
            if (b + 1 >= result.partition.stages[s].first && b + 1 <= result.partition.stages[s].second)
                stage = int(s) + 1;
        out += std::to_string(b + 1) + "," + fmt(result.profile.c[b]) + "," + fmt(sm[b]) + "," +
               std::to_string(stage) + "\n";
    }
    return out;
}

} // namespace omni
