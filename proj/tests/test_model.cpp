#include "doctest.h"

#include <cmath>

#include "omnimatte/nn/model.hpp"

using namespace omni;
using namespace omni::nn;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.frames = 2;
    c.height = 8;
    c.width = 8;
    c.patch = 4;
    c.dim = 16;
    c.heads = 2;
    c.blocks = 2;
    c.mlp_ratio = 2;
    return c;
}

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * sd;
    return m;
}

AdapterSet<double> random_adapters(const ModelConfig& cfg, Rng& rng, int rank) {
    AdapterSet<double> set(std::size_t(cfg.blocks));
    for (int b = 0; b < cfg.blocks; ++b) {
        BlockAdapters<double> blk;
        for (Projection p : kProjections)
            blk.proj[std::size_t(p)] =
                LoraAdapter<double>{random_mat(rank, cfg.dim, rng, 0.3), random_mat(cfg.dim, rank, rng, 0.3)};
        set[std::size_t(b)] = blk;
    }
    return set;
}

struct Problem {
    BackboneParams<double> params;
    AdapterSet<double> adapters;
    std::vector<Mat<double>> inputs;
    std::vector<Mat<double>> weights; // loss = sum_s <out_s, weights_s>
    RopeTable rope;
    double t = 0.37;
};

Problem make_problem(std::uint64_t seed) {
    Problem pr;
    const ModelConfig cfg = tiny_config();
    pr.params = cast_params<double>(init_backbone(cfg, seed, false));
    Rng rng(seed, 5);
    pr.adapters = random_adapters(cfg, rng, 2);
    const int n = cfg.layout().n_tokens(cfg.shape());
    for (int s = 0; s < 2; ++s) {
        pr.inputs.push_back(random_mat(n, cfg.patch_in(), rng));
        pr.weights.push_back(random_mat(n, cfg.patch_out(), rng));
    }
    pr.rope = build_rope_table(token_positions(cfg.shape(), cfg.layout()), cfg.head_dim(), cfg.rope_base);
    return pr;
}

double loss_of(const Problem& pr, AttentionMaskType mask, const std::vector<double>& stream_weight) {
    auto out = backbone_forward_tokens<double>(pr.params, &pr.adapters, pr.inputs, pr.t, pr.rope, mask, nullptr);
    double l = 0;
    for (std::size_t s = 0; s < out.size(); ++s) l += stream_weight[s] * (out[s].array() * pr.weights[s].array()).sum();
    return l;
}

struct Grads {
    BackboneParams<double> base;
    AdapterSet<double> adapters;
};

Grads analytic(const Problem& pr, AttentionMaskType mask, const std::vector<double>& stream_weight, bool with_base,
               bool propagate_inpaint) {
    ForwardCache<double> cache;
    backbone_forward_tokens<double>(pr.params, &pr.adapters, pr.inputs, pr.t, pr.rope, mask, &cache);
    Grads g{zeros_like(pr.params), zeros_like(pr.adapters)};
    std::vector<Mat<double>> d_out;
    for (std::size_t s = 0; s < pr.inputs.size(); ++s) d_out.push_back(pr.weights[s] * stream_weight[s]);
    backbone_backward_tokens<double>(pr.params, &pr.adapters, cache, d_out, with_base ? &g.base : nullptr,
                                     &g.adapters, propagate_inpaint);
    return g;
}

// Central differences on a sample of entries of every tensor.
void check_base(Problem pr, AttentionMaskType mask, const std::vector<double>& sw) {
    const Grads g = analytic(pr, mask, sw, true, true);
    std::vector<Mat<double>*> tensors;
    std::vector<std::string> names;
    pr.params.visit([&](const std::string& n, Mat<double>& m) {
        tensors.push_back(&m);
        names.push_back(n);
    });
    std::vector<const Mat<double>*> grads;
    g.base.visit([&](const std::string&, const Mat<double>& m) { grads.push_back(&m); });
    Rng pick(99);
    const double h = 1e-5;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        for (int trial = 0; trial < 3; ++trial) {
            const Eigen::Index idx = pick.uniform_int(0, int(tensors[i]->size()) - 1);
            double& w = tensors[i]->data()[idx];
            const double w0 = w;
            w = w0 + h;
            const double lp = loss_of(pr, mask, sw);
            w = w0 - h;
            const double lm = loss_of(pr, mask, sw);
            w = w0;
            const double num = (lp - lm) / (2 * h);
            const double ana = grads[i]->data()[idx];
            INFO(names[i] << "[" << idx << "] numeric " << num << " analytic " << ana);
            CHECK(std::abs(num - ana) <= 1e-6 + 1e-5 * std::abs(num));
        }
    }
}

void check_adapters(Problem pr, AttentionMaskType mask, const std::vector<double>& sw, bool propagate_inpaint) {
    const Grads g = analytic(pr, mask, sw, false, propagate_inpaint);
    const double h = 1e-5;
    for (std::size_t b = 0; b < pr.adapters.size(); ++b)
        for (std::size_t p = 0; p < 4; ++p)
            for (int which = 0; which < 2; ++which) {
                Mat<double>& m = which ? pr.adapters[b]->proj[p]->up : pr.adapters[b]->proj[p]->down;
                const Mat<double>& gm = which ? g.adapters[b]->proj[p]->up : g.adapters[b]->proj[p]->down;
                for (Eigen::Index idx = 0; idx < m.size(); idx += 5) {
                    const double w0 = m.data()[idx];
                    m.data()[idx] = w0 + h;
                    const double lp = loss_of(pr, mask, sw);
                    m.data()[idx] = w0 - h;
                    const double lm = loss_of(pr, mask, sw);
                    m.data()[idx] = w0;
                    const double num = (lp - lm) / (2 * h);
                    INFO("block " << b << " proj " << p << (which ? " up" : " down") << "[" << idx << "]");
                    CHECK(std::abs(num - gm.data()[idx]) <= 1e-6 + 1e-5 * std::abs(num));
                }
            }
}

} // namespace

TEST_CASE("rope axis split and rejection of odd head dims") {
    CHECK(rope_axis_pairs(32) == std::array<int, 3>{6, 5, 5});
    CHECK(rope_axis_pairs(8) == std::array<int, 3>{2, 1, 1});
    CHECK(rope_axis_pairs(2) == std::array<int, 3>{1, 0, 0});
    CHECK_THROWS_AS(rope_axis_pairs(7), ValidationError);
}

TEST_CASE("rope rotation preserves norms and its inverse restores the input") {
    ModelConfig cfg = tiny_config();
    const auto pos = token_positions(cfg.shape(), cfg.layout());
    const RopeTable table = build_rope_table(pos, cfg.head_dim(), cfg.rope_base);
    Rng rng(3);
    Mat<double> x = random_mat(int(pos.size()), cfg.dim, rng);
    Mat<double> y = x;
    rope_rotate(y, table, cfg.heads);
    for (Eigen::Index i = 0; i < x.rows(); ++i) CHECK(y.row(i).norm() == doctest::Approx(x.row(i).norm()));
    rope_rotate(y, table, cfg.heads, true);
    CHECK((y - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rope dot products depend only on position offsets") {
    // q.k after rotation at positions (p, p') equals the same pair shifted by a common offset.
    const int hd = 8;
    std::vector<TokenPosition> a{{0, 1, 2}, {1, 3, 0}}, b{{2, 2, 5}, {3, 4, 3}};
    const RopeTable ta = build_rope_table(a, hd, 10000.0), tb = build_rope_table(b, hd, 10000.0);
    Rng rng(4);
    Mat<double> q = random_mat(1, hd, rng), k = random_mat(1, hd, rng);
    Mat<double> xa(2, hd), xb(2, hd);
    xa << q, k;
    xb << q, k;
    rope_rotate(xa, ta, 1);
    rope_rotate(xb, tb, 1);
    CHECK(xa.row(0).dot(xa.row(1)) == doctest::Approx(xb.row(0).dot(xb.row(1))).epsilon(1e-12));
}

TEST_CASE("rope table from explicit angles") {
    const RopeTable t = rope_table_from_angles({{0.0, M_PI / 2}});
    Mat<double> x(1, 4);
    x << 1, 2, 3, 4;
    rope_rotate(x, t, 1);
    CHECK(x(0, 0) == doctest::Approx(1));
    CHECK(x(0, 1) == doctest::Approx(2));
    CHECK(x(0, 2) == doctest::Approx(-4));
    CHECK(x(0, 3) == doctest::Approx(3));
}

TEST_CASE("attention masks match their definitions") {
    const int n = 3;
    const auto a = attention_mask_matrix(AttentionMaskType::Unrestricted, n, n);
    const auto b = attention_mask_matrix(AttentionMaskType::MatteReadsInpaint, n, n);
    const auto c = attention_mask_matrix(AttentionMaskType::Isolated, n, n);
    for (int q = 0; q < 2 * n; ++q)
        for (int k = 0; k < 2 * n; ++k) {
            const bool qi = q < n, ki = k < n;
            CHECK(a[q][k]);
            CHECK(b[q][k] == (qi ? ki : true));
            CHECK(c[q][k] == (qi == ki));
        }
    CHECK(parse_mask_type("b") == AttentionMaskType::MatteReadsInpaint);
    CHECK_THROWS_AS(parse_mask_type("d"), ValidationError);
}

TEST_CASE("patchify and unpatchify are inverse") {
    const Shape s{2, 8, 12};
    std::vector<float> grid(s.pixels() * 3);
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = float(i);
    const PatchLayout layout{4, 4};
    const Mat<float> tokens = patchify<float>(grid, s, 3, layout);
    CHECK(tokens.rows() == 2 * 2 * 3);
    CHECK(tokens.cols() == 48);
    // token 1 = frame 0, patch row 0, patch col 1; first entry is pixel (0, 0, 4) channel 0
    CHECK(tokens(1, 0) == float((0 * 12 + 4) * 3));
    // entry (py=1, px=2, ch=1) = index (1*4+2)*3+1
    CHECK(tokens(0, (1 * 4 + 2) * 3 + 1) == float((1 * 12 + 2) * 3 + 1));
    std::vector<float> back(grid.size());
    unpatchify<float>(tokens, s, 3, layout, back);
    CHECK(back == grid);
    CHECK_THROWS_AS(patchify<float>(grid, Shape{2, 8, 10}, 3, layout), ValidationError);
}

TEST_CASE("token positions are frame-major") {
    const auto pos = token_positions(Shape{2, 8, 8}, PatchLayout{4, 4});
    REQUIRE(pos.size() == 8);
    CHECK(pos[0] == TokenPosition{0, 0, 0});
    CHECK(pos[1] == TokenPosition{0, 0, 1});
    CHECK(pos[2] == TokenPosition{0, 1, 0});
    CHECK(pos[4] == TokenPosition{1, 0, 0});
}

TEST_CASE("input patches carry noise, video and mask channels") {
    const Shape s{1, 4, 4};
    Latent noise(s, 0.25f), video(s, -0.5f);
    BinaryMask mask(s, 0);
    mask.at(0, 0, 1, 0) = 1;
    const Mat<float> p = input_patches(noise, video, mask, PatchLayout{4, 4});
    REQUIRE(p.cols() == 7 * 16);
    CHECK(p(0, 0) == 0.25f);
    CHECK(p(0, 3) == -0.5f);
    CHECK(p(0, 6) == 0.0f);
    CHECK(p(0, 7 + 6) == 1.0f);
}

TEST_CASE("timestep embedding layout") {
    const auto e = timestep_embedding<double>(0.5, 8);
    CHECK(e(0, 0) == doctest::Approx(std::cos(500.0)));
    CHECK(e(0, 4) == doctest::Approx(std::sin(500.0)));
    const double f1 = std::exp(-std::log(10000.0) / 4);
    CHECK(e(0, 1) == doctest::Approx(std::cos(500.0 * f1)));
}

TEST_CASE("adaLN-zero init predicts zero velocity and zero LoRA is a no-op") {
    ModelConfig cfg = tiny_config();
    const auto p = init_backbone(cfg, 1);
    Rng rng(2);
    Latent z(cfg.shape()), v(cfg.shape());
    for (auto& x : z.data()) x = float(rng.normal());
    for (auto& x : v.data()) x = float(rng.uniform(-1, 1));
    BinaryMask m(cfg.shape(), 1);
    const auto out = backbone_forward(p, nullptr, v, m, z, &z, 0.5, AttentionMaskType::Isolated);
    for (float x : out.inpaint.data()) CHECK(x == 0.0f);

    const auto pr = init_backbone(cfg, 1, false);
    AdapterSet<float> ad(std::size_t(cfg.blocks));
    Rng r2(7);
    for (auto& blk : ad) {
        blk.emplace();
        for (auto& a : blk->proj) a = init_lora(4, cfg.dim, r2);
    }
    const auto with = backbone_forward(pr, &ad, v, m, z, &z, 0.5, AttentionMaskType::Isolated);
    const auto without = backbone_forward(pr, nullptr, v, m, z, &z, 0.5, AttentionMaskType::Isolated);
    CHECK(with.matte->data().size() == without.matte->data().size());
    for (std::size_t i = 0; i < with.matte->size(); ++i) CHECK(with.matte->data()[i] == without.matte->data()[i]);
}

TEST_CASE("inpaint branch output is independent of the matte branch under masks b and c") {
    ModelConfig cfg = tiny_config();
    const auto p = init_backbone(cfg, 4, false);
    Rng rng(9);
    Latent z(cfg.shape()), z2(cfg.shape()), z3(cfg.shape()), v(cfg.shape());
    for (auto* g : {&z, &z2, &z3, &v})
        for (auto& x : g->data()) x = float(rng.normal());
    BinaryMask m(cfg.shape(), 0);
    const auto alone = backbone_forward(p, nullptr, v, m, z, nullptr, 0.3, AttentionMaskType::Isolated);
    for (auto mask : {AttentionMaskType::MatteReadsInpaint, AttentionMaskType::Isolated}) {
        const auto a = backbone_forward(p, nullptr, v, m, z, &z2, 0.3, mask);
        const auto b = backbone_forward(p, nullptr, v, m, z, &z3, 0.3, mask);
        for (std::size_t i = 0; i < a.inpaint.size(); ++i) {
            CHECK(a.inpaint.data()[i] == b.inpaint.data()[i]);
            CHECK(a.inpaint.data()[i] == doctest::Approx(alone.inpaint.data()[i]).epsilon(1e-5));
        }
    }
    const auto a = backbone_forward(p, nullptr, v, m, z, &z2, 0.3, AttentionMaskType::Unrestricted);
    const auto b = backbone_forward(p, nullptr, v, m, z, &z3, 0.3, AttentionMaskType::Unrestricted);
    double diff = 0;
    for (std::size_t i = 0; i < a.inpaint.size(); ++i) diff += std::abs(a.inpaint.data()[i] - b.inpaint.data()[i]);
    CHECK(diff > 1e-3);
}

TEST_CASE("matte branch under mask c ignores the inpaint tokens") {
    ModelConfig cfg = tiny_config();
    const auto p = init_backbone(cfg, 5, false);
    Rng rng(11);
    Latent z(cfg.shape()), z2(cfg.shape()), zm(cfg.shape()), v(cfg.shape());
    for (auto* g : {&z, &z2, &zm, &v})
        for (auto& x : g->data()) x = float(rng.normal());
    BinaryMask m(cfg.shape(), 0);
    const auto a = backbone_forward(p, nullptr, v, m, z, &zm, 0.6, AttentionMaskType::Isolated);
    const auto b = backbone_forward(p, nullptr, v, m, z2, &zm, 0.6, AttentionMaskType::Isolated);
    for (std::size_t i = 0; i < a.matte->size(); ++i) CHECK(a.matte->data()[i] == b.matte->data()[i]);
}

TEST_CASE("attention capture rows are distributions over inpaint keys") {
    ModelConfig cfg = tiny_config();
    const auto p = init_backbone(cfg, 6, false);
    Latent z(cfg.shape(), 0.1f), v(cfg.shape(), 0.2f);
    BinaryMask m(cfg.shape(), 0);
    for (auto mode : {HeadAverage::Probabilities, HeadAverage::Logits}) {
        AttentionCapture cap{mode, {}};
        backbone_forward(p, nullptr, v, m, z, nullptr, 0.5, AttentionMaskType::Isolated, nullptr, &cap);
        REQUIRE(cap.per_block.size() == std::size_t(cfg.blocks));
        for (const auto& w : cap.per_block) {
            CHECK(w.rows() == 8);
            CHECK(w.cols() == 8);
            for (Eigen::Index i = 0; i < w.rows(); ++i) CHECK(w.row(i).sum() == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("base gradients match finite differences") {
    for (auto mask : {AttentionMaskType::Unrestricted, AttentionMaskType::MatteReadsInpaint, AttentionMaskType::Isolated}) {
        CAPTURE(mask_type_name(mask));
        check_base(make_problem(21), mask, {0.7, 1.3});
    }
}

TEST_CASE("adapter gradients match finite differences") {
    for (auto mask : {AttentionMaskType::Unrestricted, AttentionMaskType::MatteReadsInpaint, AttentionMaskType::Isolated}) {
        CAPTURE(mask_type_name(mask));
        check_adapters(make_problem(22), mask, {0.5, 1.0}, true);
    }
    // Skipping the inpaint stream stays exact when it cannot read the matte stream.
    for (auto mask : {AttentionMaskType::MatteReadsInpaint, AttentionMaskType::Isolated}) {
        CAPTURE(mask_type_name(mask));
        check_adapters(make_problem(23), mask, {0.5, 1.0}, false);
    }
}

TEST_CASE("single-stream gradients match finite differences") {
    Problem pr = make_problem(24);
    pr.inputs.pop_back();
    check_base(pr, AttentionMaskType::Isolated, {1.0});
}

TEST_CASE("model config validation names the field") {
    ModelConfig c = tiny_config();
    c.heads = 3;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("model.heads"), ValidationError);
    CHECK_THROWS_WITH_AS(ModelConfig::from_json({{"bogus", 1}}), doctest::Contains("model.bogus"), ValidationError);
    CHECK(ModelConfig::from_json(tiny_config().to_json()) == tiny_config());
}
