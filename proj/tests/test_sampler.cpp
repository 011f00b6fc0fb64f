#include "doctest.h"

#include <cmath>

#include "omnimatte/metrics.hpp"
#include "omnimatte/sampler.hpp"

using namespace omni;
using namespace omni::nn;

namespace {

// Velocity of the straight path towards known targets: v = (z_t - z0) / t.
class OracleDenoiser : public Denoiser {
public:
    OracleDenoiser(Latent bg, Latent matte, std::string id = "oracle")
        : bg_(std::move(bg)), matte_(std::move(matte)), id_(std::move(id)) {}
    VelocityPair velocity(const Latent&, const BinaryMask&, const Latent& z_bg, const Latent& z_matte,
                          double t) const override {
        return {toward(z_bg, bg_, t), toward(z_matte, matte_, t)};
    }
    std::string base_id() const override { return id_; }

private:
    static Latent toward(const Latent& z, const Latent& target, double t) {
        Latent v(z.shape());
        for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = float((z.data()[i] - target.data()[i]) / t);
        return v;
    }
    Latent bg_, matte_;
    std::string id_;
};

// Constant velocity that records which expert ran.
class TaggedDenoiser : public Denoiser {
public:
    explicit TaggedDenoiser(float value) : value_(value) {}
    VelocityPair velocity(const Latent&, const BinaryMask&, const Latent& z_bg, const Latent&, double t) const override {
        Latent v(z_bg.shape(), value_ * float(t));
        return {v, v};
    }
    std::string base_id() const override { return "same"; }

private:
    float value_;
};

ModelConfig tiny_model() {
    ModelConfig c;
    c.frames = 2;
    c.height = c.width = 8;
    c.dim = 16;
    c.heads = 2;
    c.blocks = 3;
    c.mlp_ratio = 2;
    return c;
}

} // namespace

TEST_CASE("expert selection rule") {
    CHECK(select_expert(0.7, 0.5) == ExpertKind::Effect);
    CHECK(select_expert(0.3, 0.5) == ExpertKind::Quality);
    CHECK(select_expert(0.5, 0.5) == ExpertKind::Quality);
    for (double t : time_grid(20)) {
        CHECK(select_expert(t, 0.0) == ExpertKind::Effect);
        CHECK(select_expert(t, 1.0) == ExpertKind::Quality);
    }
}

TEST_CASE("euler steps and the time grid") {
    const Shape s{1, 1, 1};
    Latent z(s, 1.0f);
    euler_step(z, Latent(s, 2.0f), 0.25);
    for (float v : z.data()) CHECK(v == 0.5f);
    Latent w(s, 0.3f);
    euler_step(w, Latent(s, 0.0f), 0.1);
    for (float v : w.data()) CHECK(v == 0.3f);
    CHECK_THROWS_AS(euler_step(w, Latent(s), 0.0), ValidationError);

    const auto g = time_grid(4);
    CHECK(g == std::vector<double>{1.0, 0.75, 0.5, 0.25});
    CHECK_THROWS_AS(time_grid(0), ValidationError);

    // A constant field z1 - z0 carries z1 to z0 exactly along the straight path.
    Latent z0(s), z1(s);
    z0.data()[0] = 0.25f, z0.data()[1] = -0.5f, z0.data()[2] = 1.0f;
    z1.data()[0] = 1.0f, z1.data()[1] = 0.5f, z1.data()[2] = -2.0f;
    Latent v(s);
    for (std::size_t i = 0; i < 3; ++i) v.data()[i] = z1.data()[i] - z0.data()[i];
    Latent zz = z1;
    for (int i = 0; i < 8; ++i) euler_step(zz, v, 1.0 / 8);
    for (std::size_t i = 0; i < 3; ++i) CHECK(zz.data()[i] == doctest::Approx(z0.data()[i]).epsilon(1e-6));
}

TEST_CASE("alpha latent codec") {
    const Shape s{1, 1, 1};
    Latent z(s, -1.0f);
    for (const auto g = decode_alpha(z); float v : g.data()) CHECK(v == 0.0f);
    z.data()[0] = 0.2f, z.data()[1] = 0.0f, z.data()[2] = -0.2f;
    CHECK(decode_alpha(z).data()[0] == doctest::Approx(0.5f));
    AlphaMatte a(Shape{1, 16, 16});
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = float(i) / 255.0f;
    const AlphaMatte back = decode_alpha(encode_alpha(a));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(back.data()[i] - a.data()[i]) <= 1e-7f);
}

TEST_CASE("dual sampling endpoints match single-expert sampling bit for bit") {
    const Shape s{2, 4, 4};
    Latent video(s, 0.1f);
    BinaryMask mask(s);
    const TaggedDenoiser effect(1.0f), quality(-0.5f);
    SamplerConfig cfg;
    cfg.n_steps = 10;
    cfg.seed = 3;

    cfg.tau = 0.0;
    const SampleResult e_dual = sample_dual(effect, quality, video, mask, cfg);
    const SampleResult e_single = sample_single(effect, ExpertKind::Effect, video, mask, cfg);
    CHECK(e_dual.background == e_single.background);
    CHECK(e_dual.matte == e_single.matte);
    for (const auto& st : e_dual.trace.steps) CHECK(st.expert == ExpertKind::Effect);

    cfg.tau = 1.0;
    const SampleResult q_dual = sample_dual(effect, quality, video, mask, cfg);
    const SampleResult q_single = sample_single(quality, ExpertKind::Quality, video, mask, cfg);
    CHECK(q_dual.background == q_single.background);
    CHECK(q_dual.matte == q_single.matte);

    for (int k = 1; k <= 9; ++k) {
        cfg.tau = k / 10.0;
        const SampleResult r = sample_dual(effect, quality, video, mask, cfg);
        CHECK(r.trace.monotone());
        CHECK(r.trace.steps.size() == 10u);
        for (const auto& st : r.trace.steps) CHECK(st.expert == select_expert(st.t, cfg.tau));
    }
}

TEST_CASE("mismatched bases are rejected") {
    const Shape s{1, 4, 4};
    const Latent zero(s);
    const OracleDenoiser a(zero, zero, "base-a"), b(zero, zero, "base-b");
    try {
        sample_dual(a, b, zero, BinaryMask(s), SamplerConfig{});
        FAIL("expected a base mismatch");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("base-a") != std::string::npos);
        CHECK(std::string(e.what()).find("base-b") != std::string::npos);
    }
}

TEST_CASE("initial noise streams") {
    SamplerConfig cfg;
    cfg.seed = 9;
    const Shape s{1, 4, 4};
    auto [b, m] = initial_noise(s, cfg);
    CHECK_FALSE(b == m);
    cfg.shared_noise = true;
    auto [b2, m2] = initial_noise(s, cfg);
    CHECK(b2 == m2);
    CHECK(b2 == b);
}

TEST_CASE("zero-adapter experts give a matte branch equal to the inpaint branch") {
    auto base = std::make_shared<const BackboneParams<float>>(init_backbone(tiny_model(), 12, false));
    const ExpertModel e = make_expert(base, ExpertKind::Effect, {3}, 2, 1);
    const ExpertModel q = make_expert(base, ExpertKind::Quality, {1, 2, 3}, 2, 1);
    const ExpertDenoiser de(e), dq(q);
    const Shape s = tiny_model().shape();
    Rng rng(4);
    Latent video(s);
    for (auto& v : video.data()) v = float(rng.uniform(-1, 1));
    BinaryMask mask(s);
    for (auto& v : mask.data()) v = rng.uniform() < 0.3 ? 1 : 0;
    SamplerConfig cfg;
    cfg.n_steps = 6;
    cfg.shared_noise = true;
    for (double tau : {0.0, 0.5, 1.0}) {
        cfg.tau = tau;
        const SampleResult r = sample_dual(de, dq, video, mask, cfg);
        double worst = 0;
        for (std::size_t i = 0; i < r.matte.size(); ++i)
            worst = std::max(worst, double(std::abs(r.matte.data()[i] - r.background.data()[i])));
        INFO("tau " << tau);
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("oracle velocities reproduce the ground-truth layers") {
    GeneratorConfig g;
    g.frames = 4;
    g.height = g.width = 32;
    const TrainingSample t = generate_sample(17, g);
    const Video video = compose(t.foreground, t.alpha_full, t.background);
    const OracleDenoiser oracle(encode_video(t.background), encode_alpha(t.alpha_full));
    SamplerConfig cfg;
    cfg.n_steps = 20;
    const OmnimatteResult r = decompose(video, t.obj_mask, oracle, oracle, cfg);
    CHECK(r.layers.foreground.shape() == video.shape());
    CHECK(r.layers.alpha.shape() == video.shape());
    CHECK(r.layers.background.shape() == video.shape());
    for (std::size_t p = 0; p < r.layers.alpha.size(); ++p) {
        if (t.alpha_full.data()[p] < 0.2f) continue;
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(r.layers.foreground.data()[3 * p + c] - t.foreground.data()[3 * p + c]) <= 1e-3);
    }
    const ReconRow row = eval_reconstruction(r.layers, t.composite, t.motion);
    CHECK(row.psnr >= 40.0);
}
