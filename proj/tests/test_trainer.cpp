#include "doctest.h"

#include <cmath>

#include "omnimatte/nn/checkpoint.hpp"
#include "omnimatte/trainer.hpp"
#include "test_util.hpp"

using namespace omni;
using namespace omni::nn;

namespace {

GeneratorConfig tiny_generator() {
    GeneratorConfig g;
    g.frames = 2;
    g.height = g.width = 16;
    return g;
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.frames = 2;
    c.height = c.width = 16;
    c.dim = 16;
    c.heads = 2;
    c.blocks = 2;
    c.mlp_ratio = 2;
    return c;
}

std::vector<TrainClip> tiny_data(int n) {
    std::vector<TrainClip> out;
    for (int i = 0; i < n; ++i) out.push_back(TrainClip::from_sample(generate_sample(100 + i, tiny_generator())));
    return out;
}

TrainConfig quick(Phase p, long steps) {
    TrainConfig c = TrainConfig::defaults(p);
    c.steps = steps;
    c.batch = 2;
    c.seed = 4;
    return c;
}

std::string checksum(const BackboneParams<float>& p) { return base_checksum(p); }

} // namespace

TEST_CASE("interpolation and loss hand values") {
    const Shape s{1, 1, 1};
    const Latent z0(s, 2.0f), z1(s, -2.0f);
    CHECK(noisy_latent(z0, z1, 0.0) == z0);
    CHECK(noisy_latent(z0, z1, 1.0) == z1);
    for (const auto g = noisy_latent(z0, z1, 0.25); float v : g.data()) CHECK(v == 1.0f);

    const Latent a(s, 0.0f), b(s, 2.0f);
    CHECK(fm_loss(Latent(s, 2.0f), a, b) == 0.0);
    CHECK(fm_loss(Latent(s, 1.0f), a, b) == 1.0);
    CHECK(fm_loss(Latent(s, 0.0f), a, b) == 4.0);
}

TEST_CASE("AdamW first step against hand arithmetic") {
    TrainConfig cfg = TrainConfig::defaults(Phase::PretrainInpaint);
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    Mat<float> w(1, 2);
    w << 1.0f, -2.0f;
    Mat<float> g(1, 2);
    g << 0.5f, -0.25f;
    AdamW opt(cfg, {&w});
    opt.step({&g});
    // Bias-corrected first step: mhat / sqrt(vhat) = sign(g); decay is decoupled.
    CHECK(w(0, 0) == doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)).epsilon(1e-6));
    CHECK(w(0, 1) == doctest::Approx(-2.0 - 0.1 * (-0.25 / (0.25 + 1e-8) + 0.01 * -2.0)).epsilon(1e-6));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("train config json and validation") {
    const TrainConfig d = TrainConfig::defaults(Phase::TrainEffect);
    CHECK(d.steps == 1500);
    CHECK(TrainConfig::defaults(Phase::PretrainInpaint).steps == 3000);
    CHECK(TrainConfig::from_json(d.to_json(), Phase::TrainEffect).to_json() == d.to_json());
    CHECK_THROWS_WITH_AS(TrainConfig::from_json({{"lr", -1.0}}, Phase::TrainEffect), doctest::Contains("lr"),
                         ValidationError);
    CHECK_THROWS_WITH_AS(TrainConfig::from_json({{"lr_decay", 1.0}}, Phase::TrainEffect, "train_effect"),
                         doctest::Contains("train_effect.lr_decay"), ValidationError);
}

TEST_CASE("zero-step pretraining leaves the initialization") {
    auto model = init_backbone(tiny_model(), 3);
    const std::string before = checksum(model);
    const TrainResult r = pretrain_inpaint(model, tiny_data(2), quick(Phase::PretrainInpaint, 0));
    CHECK(r.steps_done == 0);
    CHECK(checksum(model) == before);
}

TEST_CASE("pretraining is deterministic and fits a fixed batch") {
    const auto data = tiny_data(2);
    TrainConfig cfg = quick(Phase::PretrainInpaint, 200);
    cfg.fixed_batch = true;
    auto a = init_backbone(tiny_model(), 3);
    const TrainResult ra = pretrain_inpaint(a, data, cfg);
    CHECK(ra.losses.size() == 200u);
    CHECK(ra.losses.back() < ra.losses.front());

    cfg.steps = 20;
    auto b = init_backbone(tiny_model(), 3), c = init_backbone(tiny_model(), 3);
    const TrainResult rb = pretrain_inpaint(b, data, cfg), rc = pretrain_inpaint(c, data, cfg);
    CHECK(rb.losses == rc.losses);
    CHECK(checksum(b) == checksum(c));
    for (std::size_t i = 0; i < rb.losses.size(); ++i) CHECK(rb.losses[i] == ra.losses[i]);
}

TEST_CASE("interrupted training resumes to the same trace") {
    const test::TempDir tmp("resume");
    const auto data = tiny_data(3);
    TrainConfig cfg = quick(Phase::PretrainInpaint, 12);
    cfg.checkpoint_every = 5;

    auto full = init_backbone(tiny_model(), 5);
    const TrainResult whole = pretrain_inpaint(full, data, cfg);

    auto part = init_backbone(tiny_model(), 5);
    TrainHooks hooks;
    hooks.state_path = tmp.path / "state.ckpt";
    hooks.dataset_hash = "h";
    hooks.should_stop = [](long step) { return step == 7; };
    const TrainResult first = pretrain_inpaint(part, data, cfg, hooks);
    CHECK(first.interrupted);
    CHECK(first.steps_done == 7);

    auto resumed = init_backbone(tiny_model(), 5);
    hooks.should_stop = nullptr;
    hooks.resume = true;
    const TrainResult second = pretrain_inpaint(resumed, data, cfg, hooks);
    CHECK_FALSE(second.interrupted);
    CHECK(second.losses == whole.losses);
    CHECK(checksum(resumed) == checksum(full));

    TrainConfig other = cfg;
    other.lr = 5e-4;
    auto again = init_backbone(tiny_model(), 5);
    CHECK_THROWS_WITH_AS(pretrain_inpaint(again, data, other, hooks), doctest::Contains("lr"), ValidationError);
    hooks.dataset_hash = "changed";
    CHECK_THROWS_AS(pretrain_inpaint(again, data, cfg, hooks), ValidationError);
}

TEST_CASE("a non-finite weight stops training with a divergence error") {
    auto model = init_backbone(tiny_model(), 3, false);
    model.out_proj.w(0, 0) = std::nanf("");
    CHECK_THROWS_AS(pretrain_inpaint(model, tiny_data(1), quick(Phase::PretrainInpaint, 3)), DivergenceError);
}

TEST_CASE("expert training touches only the adapters") {
    auto base = std::make_shared<const BackboneParams<float>>(init_backbone(tiny_model(), 6, false));
    const auto data = tiny_data(2);

    SUBCASE("zero learning rate keeps the adapters") {
        ExpertModel q = make_expert(base, ExpertKind::Quality, {1, 2}, 2, 1);
        const auto before = q.adapters;
        TrainConfig cfg = quick(Phase::TrainQuality, 1);
        cfg.lr = 0.0;
        train_expert(q, data, cfg);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t p = 0; p < 4; ++p) {
                CHECK(q.adapters[b]->proj[p]->down == before[b]->proj[p]->down);
                CHECK(q.adapters[b]->proj[p]->up == before[b]->proj[p]->up);
            }
    }
    SUBCASE("training changes adapters but not the base") {
        ExpertModel e = make_expert(base, ExpertKind::Effect, {2}, 2, 1);
        const std::string before = base_checksum(*base);
        const TrainResult r = train_expert(e, data, quick(Phase::TrainEffect, 5));
        CHECK(r.losses.size() == 5u);
        CHECK(base_checksum(*base) == before);
        CHECK_FALSE(e.adapters[1]->proj[0]->up.isZero());
        CHECK_FALSE(e.adapters[0].has_value());
    }
    SUBCASE("phase must match the expert") {
        ExpertModel e = make_expert(base, ExpertKind::Effect, {2}, 2, 1);
        CHECK_THROWS_AS(train_expert(e, data, quick(Phase::TrainQuality, 1)), ValidationError);
    }
}

TEST_CASE("a loss on the inpaint output gives the effect adapters no gradient") {
    const auto base = init_backbone(tiny_model(), 8, false);
    const ExpertModel e = make_expert(std::make_shared<const BackboneParams<float>>(base), ExpertKind::Effect, {1, 2}, 2, 3);
    AdapterSet<float> adapters = e.adapters;
    Rng rng(2);
    for (auto& blk : adapters)
        for (auto& a : blk->proj) a->up.setRandom();
    const Shape s = tiny_model().shape();
    Latent video(s), zb(s), zm(s);
    BinaryMask mask(s, 1);
    for (auto* l : {&video, &zb, &zm})
        for (auto& v : l->data()) v = float(rng.normal());
    ForwardCache<float> cache;
    const auto out = backbone_forward(base, &adapters, video, mask, zb, &zm, 0.5, AttentionMaskType::MatteReadsInpaint, &cache);
    const Mat<float> ones = Mat<float>::Ones(latent_to_tokens(out.inpaint, tiny_model().layout()).rows(),
                                             tiny_model().patch_out());
    AdapterSet<float> grad = zeros_like(adapters);
    backbone_backward_tokens<float>(base, &adapters, cache, {ones, Mat<float>::Zero(ones.rows(), ones.cols())}, nullptr,
                                    &grad, true);
    for (const auto& blk : grad)
        for (const auto& a : blk->proj) {
            CHECK(a->down.isZero());
            CHECK(a->up.isZero());
        }
}

TEST_CASE("loss csv layout") {
    const std::string csv = loss_csv(Phase::TrainQuality, {0.5, 0.25});
    CHECK(csv.find("step,phase,loss\n0,train_quality,0.5\n1,train_quality,0.25\n") != std::string::npos);
    CHECK(csv.rfind("#", 0) == 0);
}
