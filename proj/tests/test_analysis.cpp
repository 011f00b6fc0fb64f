#include "doctest.h"

#include <cmath>
#include <numeric>

#include "omnimatte/analysis.hpp"
#include "omnimatte/rng.hpp"

using namespace omni;

namespace {

const nn::PatchLayout kPixelTokens{1, 1};

nn::Mat<float> random_attention(int n, Rng& rng) {
    nn::Mat<float> a(n, n);
    for (int i = 0; i < n; ++i) {
        double sum = 0;
        for (int j = 0; j < n; ++j) sum += a(i, j) = float(rng.uniform(0.01, 1.0));
        for (int j = 0; j < n; ++j) a(i, j) = float(a(i, j) / sum);
    }
    return a;
}

ContributionProfile profile_of(std::vector<double> c) {
    ContributionProfile p;
    p.c = std::move(c);
    p.n_clips = 1;
    return p;
}

} // namespace

TEST_CASE("association scores on hand cases") {
    const Shape s{1, 2, 2};
    BinaryMask fg(s), effect(s);
    fg.data()[0] = 1;
    effect.data()[2] = effect.data()[3] = 1;

    nn::Mat<float> a(4, 4);
    a.setConstant(0.25f);
    ScoreMap u = association_scores(a, fg, effect, kPixelTokens);
    CHECK(u.data()[0] == doctest::Approx(0.5));
    CHECK(u.data()[1] == 0.0f); // not foreground

    a.row(0) << 0.1f, 0.2f, 0.3f, 0.4f;
    CHECK(association_scores(a, fg, effect, kPixelTokens).data()[0] == doctest::Approx(0.7));

    BinaryMask none(s);
    for (const auto g = association_scores(a, fg, none, kPixelTokens); float v : g.data()) CHECK(v == 0.0f);

    // Patch tokens spread their attention evenly over their pixels.
    const Shape big{1, 4, 4};
    BinaryMask fg4(big), eff4(big);
    fg4.at(0, 0, 0) = 1;
    eff4.at(0, 2, 2) = 1; // one of four pixels in token 3
    nn::Mat<float> b(4, 4);
    b.setConstant(0.25f);
    CHECK(association_scores(b, fg4, eff4, {2, 2}).at(0, 0, 0) == doctest::Approx(0.25 * 0.25));
}

TEST_CASE("effect attention map sums to the mean association score") {
    Rng rng(31);
    const Shape s{2, 4, 4};
    for (int trial = 0; trial < 20; ++trial) {
        BinaryMask fg(s), effect(s);
        for (auto& v : fg.data()) v = rng.uniform() < 0.3;
        for (auto& v : effect.data()) v = rng.uniform() < 0.3;
        fg.data()[0] = 1;
        const auto attn = random_attention(8, rng);
        const nn::PatchLayout layout{2, 2};
        const ScoreMap assoc = association_scores(attn, fg, effect, layout);
        double mean = 0;
        int count = 0;
        for (std::size_t i = 0; i < fg.size(); ++i)
            if (fg.data()[i]) mean += assoc.data()[i], ++count;
        mean /= count;
        const ScoreMap S = effect_attention_map(attn, fg, layout);
        CHECK(raw_contributions({S}, effect)[0] == doctest::Approx(mean).epsilon(1e-5));
        // Without restriction the map carries the full attention mass.
        BinaryMask all(s, 1);
        CHECK(raw_contributions({S}, all)[0] == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("contribution profile normalization") {
    const Shape s{1, 2, 2};
    BinaryMask effect(s);
    effect.data()[1] = 1;
    ScoreMap m(s, 0.0f);
    m.data()[1] = 0.4f;

    const auto one = contribution_profile({m}, effect);
    CHECK(one.defined());
    CHECK(one.c == std::vector<double>{1.0});

    const auto same = contribution_profile({m, m, m, m}, effect);
    for (double c : same.c) CHECK(c == doctest::Approx(0.25));

    ScoreMap m3(s, 0.0f), m1(s, 0.0f);
    m3.data()[1] = 3.0f;
    m1.data()[1] = 1.0f;
    m1.data()[0] = 50.0f; // outside the effect mask
    const auto p = contribution_profile({m3, m1}, effect);
    CHECK(p.c[0] == doctest::Approx(0.75));
    CHECK(p.c[1] == doctest::Approx(0.25));

    const auto zero = contribution_profile({m, m}, BinaryMask(s));
    CHECK_FALSE(zero.defined());
    CHECK(zero.n_degenerate == 1);
    for (double c : zero.c) CHECK(c == 0.0);

    const auto avg = average_profiles({p, zero, profile_of({0.25, 0.75})}, 2);
    CHECK(avg.n_clips == 2);
    CHECK(avg.n_degenerate == 1);
    CHECK(avg.c[0] == doctest::Approx(0.5));
    const auto none = average_profiles({zero, zero}, 2);
    CHECK_FALSE(none.defined());
    for (double c : none.c) CHECK(std::isfinite(c));
}

TEST_CASE("profile property: random maps give a distribution") {
    Rng rng(5);
    const Shape s{2, 4, 4};
    for (int trial = 0; trial < 50; ++trial) {
        const int B = rng.uniform_int(1, 12);
        std::vector<ScoreMap> maps;
        for (int b = 0; b < B; ++b) {
            ScoreMap m(s);
            for (auto& v : m.data()) v = float(rng.uniform());
            maps.push_back(std::move(m));
        }
        BinaryMask effect(s);
        for (auto& v : effect.data()) v = rng.uniform() < 0.2;
        effect.data()[3] = 1;
        const auto p = contribution_profile(maps, effect);
        CHECK(p.blocks() == B);
        CHECK(std::accumulate(p.c.begin(), p.c.end(), 0.0) == doctest::Approx(1.0));
        for (double c : p.c) CHECK(c >= 0.0);
    }
}

TEST_CASE("stage partition") {
    const auto five = partition_stages(profile_of({0.30, 0.05, 0.25, 0.04, 0.36}), false);
    CHECK_FALSE(five.fallback);
    CHECK(five.troughs == std::vector<int>{2, 4});
    CHECK(five.stages == std::vector<std::pair<int, int>>{{1, 2}, {3, 4}, {5, 5}});

    const auto twelve = partition_stages(profile_of({4, 3, 2, 1, 2, 3, 2, 1, 2, 3, 4, 5}), true);
    CHECK_FALSE(twelve.fallback);
    CHECK(twelve.troughs == std::vector<int>{4, 8});
    CHECK(twelve.stages == std::vector<std::pair<int, int>>{{1, 4}, {5, 8}, {9, 12}});

    std::vector<double> rising(12);
    std::iota(rising.begin(), rising.end(), 1.0);
    const auto mono = partition_stages(profile_of(rising), true);
    CHECK(mono.fallback);
    CHECK(mono.stages == std::vector<std::pair<int, int>>{{1, 4}, {5, 8}, {9, 12}});
    CHECK(partition_stages(profile_of({1, 2, 3, 4, 5}), false).stages ==
          std::vector<std::pair<int, int>>{{1, 1}, {2, 3}, {4, 5}});
    CHECK(partition_stages(profile_of({0.5, 0.5}), true).stages == std::vector<std::pair<int, int>>{{1, 2}});

    // Three troughs: the two deepest win.
    const auto three = partition_stages(profile_of({5, 1, 5, 3, 5, 0.5, 5}), false);
    CHECK(three.troughs == std::vector<int>{2, 6});

    CHECK(smooth3({3, 0, 3}) == std::vector<double>{1.5, 2.0, 1.5});
}

TEST_CASE("partition property: stages cover every block once") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const int B = rng.uniform_int(1, 16);
        std::vector<double> c(static_cast<std::size_t>(B));
        for (double& v : c) v = rng.uniform();
        const auto part = partition_stages(profile_of(c), rng.uniform() < 0.5);
        int next = 1;
        for (auto [a, b] : part.stages) {
            CHECK(a == next);
            CHECK(b >= a);
            next = b + 1;
        }
        CHECK(next == B + 1);
    }
}

TEST_CASE("analyze_records averages over timesteps and rejects gaps") {
    const Shape s{1, 2, 2};
    BinaryMask fg(s), effect(s);
    fg.data()[0] = 1;
    effect.data()[3] = 1;
    nn::Mat<float> a(4, 4), b(4, 4);
    a.setConstant(0.25f);
    b.setConstant(0.0f);
    b.col(3).setConstant(1.0f);
    const std::vector<AttentionRecord> recs{{1, 0.9, a}, {2, 0.9, b}, {1, 0.1, b}, {2, 0.1, b}};
    const ClipAnalysis r = analyze_records(recs, 2, fg, effect, kPixelTokens);
    CHECK(r.raw_per_t[0][0] == doctest::Approx(0.25));
    CHECK(r.raw_per_t[1][0] == doctest::Approx(1.0));
    CHECK(r.profile.c[0] == doctest::Approx(0.625 / 1.625));
    CHECK(r.profile.timesteps == std::vector<double>{0.9, 0.1});
    CHECK_THROWS_AS(analyze_records({{1, 0.9, a}}, 2, fg, effect, kPixelTokens), ValidationError);
    CHECK_THROWS_AS(analyze_records({{3, 0.9, a}}, 2, fg, effect, kPixelTokens), ValidationError);
}

TEST_CASE("analysis of a model is deterministic and independent of job count") {
    nn::ModelConfig mc;
    mc.frames = 2;
    mc.height = mc.width = 16;
    mc.dim = 16;
    mc.heads = 2;
    mc.blocks = 4;
    mc.mlp_ratio = 2;
    const auto base = nn::init_backbone(mc, 3, false);
    GeneratorConfig g;
    g.frames = 2;
    g.height = g.width = 16;
    std::vector<TrainingSample> clips;
    for (int i = 0; i < 4; ++i) clips.push_back(generate_sample(100 + i, g));
    AnalysisConfig cfg;
    cfg.timesteps = {0.8, 0.3};
    const AnalysisResult r1 = analyze_model(base, clips, cfg);
    cfg.jobs = 2;
    const AnalysisResult r2 = analyze_model(base, clips, cfg);
    CHECK(profile_csv(r1.profile) == profile_csv(r2.profile));
    CHECK(plot_data_csv(r1) == plot_data_csv(r2));
    CHECK(r1.stage_maps.size() == r1.partition.stages.size());
    CHECK(r1.profile.n_clips + r1.profile.n_degenerate == 4);
    if (r1.profile.defined())
        CHECK(std::accumulate(r1.profile.c.begin(), r1.profile.c.end(), 0.0) == doctest::Approx(1.0));

    nn::ModelConfig other = mc;
    other.height = other.width = 8;
    GeneratorConfig g8 = g;
    g8.height = g8.width = 32;
    CHECK_THROWS_AS(analyze_model(base, {generate_sample(1, g8)}, cfg), ValidationError);
}
