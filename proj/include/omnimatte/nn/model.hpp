#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "omnimatte/error.hpp"
#include "omnimatte/grid.hpp"
#include "omnimatte/nn/lora.hpp"

namespace omni::nn {

// Attention regimes over the concatenated [inpaint | matte] sequence.
enum class AttentionMaskType {
    Unrestricted,      // type A: every token sees every token
    MatteReadsInpaint, // type B: inpaint queries see inpaint keys only, matte queries see all
    Isolated,          // type C: block diagonal
};

std::string mask_type_name(AttentionMaskType m); // "a", "b", "c"
AttentionMaskType parse_mask_type(std::string_view s);

struct PatchLayout {
    int patch_h = 4;
    int patch_w = 4;

    void validate(const Shape& s) const;
    int tokens_per_frame(const Shape& s) const { return (s.height / patch_h) * (s.width / patch_w); }
    int n_tokens(const Shape& s) const { return s.frames * tokens_per_frame(s); }
};

struct TokenPosition {
    int frame = 0;
    int row = 0;
    int col = 0;
    bool operator==(const TokenPosition&) const = default;
};

// Token order is frame-major, then patch row, then patch column.
std::vector<TokenPosition> token_positions(const Shape& s, const PatchLayout& layout);

// Each row holds one patch flattened as (py, px, channel).
template <class T>
Mat<T> patchify(std::span<const float> grid, const Shape& s, int channels, const PatchLayout& layout);

template <class T>
void unpatchify(const Mat<T>& tokens, const Shape& s, int channels, const PatchLayout& layout,
                std::span<float> out);

struct ModelConfig {
    int frames = 8;
    int height = 32;
    int width = 32;
    int patch = 4;
    int dim = 128;
    int heads = 4;
    int blocks = 12;
    int mlp_ratio = 4;
    double rope_base = 10000.0;

    static constexpr int kLatentChannels = 3;
    static constexpr int kInputChannels = 7; // noise(3) | video(3) | mask(1)

    Shape shape() const { return {frames, height, width}; }
    PatchLayout layout() const { return {patch, patch}; }
    int head_dim() const { return dim / heads; }
    int patch_in() const { return kInputChannels * patch * patch; }
    int patch_out() const { return kLatentChannels * patch * patch; }
    int hidden() const { return mlp_ratio * dim; }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

// Rotary phases per token and per rotated pair, shared by every head.
struct RopeTable {
    int n_tokens = 0;
    int pairs = 0;
    std::vector<double> cos;
    std::vector<double> sin;
    bool operator==(const RopeTable&) const = default;
};

// Pair counts per axis (frame, row, col) for a head dimension; rejects odd dims.
std::array<int, 3> rope_axis_pairs(int head_dim);
RopeTable build_rope_table(std::span<const TokenPosition> positions, int head_dim, double base);
// angles[token][pair]
RopeTable rope_table_from_angles(const std::vector<std::vector<double>>& angles);

// Rotates consecutive pairs (2i, 2i+1) inside each head; inverse applies the transpose.
template <class T>
void rope_rotate(Mat<T>& x, const RopeTable& table, int heads, bool inverse = false);

// Rows are queries, columns keys, over [inpaint..., matte...].
std::vector<std::vector<bool>> attention_mask_matrix(AttentionMaskType m, int n_inpaint, int n_matte);

// Every mask row is a contiguous key range; stream 0 = inpaint, 1 = matte.
struct KeyRange {
    int begin = 0;
    int end = 0;
};
KeyRange key_range(AttentionMaskType m, int stream, int n_inpaint, int n_matte);

template <class T>
struct BlockParams {
    Linear<T> mod; // 6D outputs: shift1, scale1, gate1, shift2, scale2, gate2
    Linear<T> q, k, v, o;
    Linear<T> fc1, fc2;

    Linear<T>& proj(Projection p);
    const Linear<T>& proj(Projection p) const;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        for (auto [name, lin] : std::initializer_list<std::pair<const char*, Linear<T>*>>{
                 {"mod", &mod}, {"q", &q}, {"k", &k}, {"v", &v}, {"o", &o}, {"fc1", &fc1}, {"fc2", &fc2}}) {
            f(prefix + name + ".w", lin->w);
            f(prefix + name + ".b", lin->b);
        }
    }
};

template <class T>
struct BackboneParams {
    ModelConfig config;
    Linear<T> in_proj;
    Linear<T> time1, time2;
    std::vector<BlockParams<T>> blocks;
    Linear<T> final_mod; // 2D outputs: shift, scale
    Linear<T> out_proj;

    // Visits every tensor as (name, matrix) in a fixed order.
    template <class F>
    void visit(F&& f) {
        for (auto [name, lin] : std::initializer_list<std::pair<const char*, Linear<T>*>>{
                 {"in_proj", &in_proj}, {"time1", &time1}, {"time2", &time2}}) {
            f(std::string("base/") + name + ".w", lin->w);
            f(std::string("base/") + name + ".b", lin->b);
        }
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].visit("base/block" + std::to_string(i + 1) + "/", f);
        for (auto [name, lin] : std::initializer_list<std::pair<const char*, Linear<T>*>>{
                 {"final_mod", &final_mod}, {"out_proj", &out_proj}}) {
            f(std::string("base/") + name + ".w", lin->w);
            f(std::string("base/") + name + ".b", lin->b);
        }
    }
    template <class F>
    void visit(F&& f) const {
        const_cast<BackboneParams*>(this)->visit([&](const std::string& n, Mat<T>& m) { f(n, std::as_const(m)); });
    }

    std::size_t parameter_count() const;
};

template <class T>
BackboneParams<T> zeros_like(const BackboneParams<T>& p);

template <class U, class T>
BackboneParams<U> cast_params(const BackboneParams<T>& p);

// adaln_zero: modulation and output head start at zero (standard DiT init). Tests use
// false to get a fully random, non-degenerate network.
BackboneParams<float> init_backbone(const ModelConfig& cfg, std::uint64_t seed, bool adaln_zero = true);

// Attention capture for the inpaint stream, head-averaged, one matrix per block.
enum class HeadAverage { Probabilities, Logits };

struct AttentionCapture {
    HeadAverage mode = HeadAverage::Probabilities;
    std::vector<Mat<float>> per_block; // inpaint queries x inpaint keys, rows sum to 1
};

template <class T>
struct StreamCache {
    Mat<T> x_in, n1, h1, q, k, v, attn, o, x_mid, n2, h2, u, g, m;
    Mat<T> rstd1, rstd2;          // n x 1
    std::array<Mat<T>, 4> lora_mid; // x down^T per projection, for the matte stream
    std::vector<Mat<T>> probs;    // per head, queries x key range
    KeyRange keys;
};

template <class T>
struct BlockCache {
    Mat<T> mod;
    std::vector<StreamCache<T>> streams;
    int n_inpaint = 0;
    int n_matte = 0;
};

template <class T>
struct ForwardCache {
    AttentionMaskType mask = AttentionMaskType::Isolated;
    Mat<T> temb, t_hidden, c, cond; // cond = silu(c)
    std::vector<Mat<T>> inputs;     // patch vectors per stream
    std::vector<BlockCache<T>> blocks;
    std::vector<Mat<T>> final_n, final_h, final_rstd;
    Mat<T> final_mod;
    RopeTable rope;
};

template <class T>
Mat<T> timestep_embedding(double t, int dim);

template <class T>
void block_forward(const BlockParams<T>& p, const BlockAdapters<T>* adapters, const Mat<T>& cond,
                   std::vector<Mat<T>>& streams, const RopeTable& rope, int heads, AttentionMaskType mask,
                   BlockCache<T>* cache, AttentionCapture* capture = nullptr);

// d_streams holds dL/d(output) on entry and dL/d(input) on exit. Base gradients are
// accumulated only when grad is non-null; with propagate_inpaint == false the inpaint
// stream is treated as a constant (exact when only adapters train under masks B/C).
template <class T>
void block_backward(const BlockParams<T>& p, const BlockAdapters<T>* adapters, const BlockCache<T>& cache,
                    const Mat<T>& cond, const RopeTable& rope, int heads, std::vector<Mat<T>>& d_streams,
                    BlockParams<T>* grad, BlockAdapters<T>* grad_adapters, Mat<T>& d_cond,
                    bool propagate_inpaint);

// Token-level forward: patch vectors in (n x patch_in per stream), velocity patches out.
template <class T>
std::vector<Mat<T>> backbone_forward_tokens(const BackboneParams<T>& p, const AdapterSet<T>* adapters,
                                            const std::vector<Mat<T>>& inputs, double t,
                                            const RopeTable& rope, AttentionMaskType mask,
                                            ForwardCache<T>* cache, AttentionCapture* capture = nullptr);

template <class T>
void backbone_backward_tokens(const BackboneParams<T>& p, const AdapterSet<T>* adapters,
                              const ForwardCache<T>& cache, std::vector<Mat<T>> d_out,
                              BackboneParams<T>* grad, AdapterSet<T>* grad_adapters, bool propagate_inpaint);

// [noise | video | mask] per patch, before the input projection.
Mat<float> input_patches(const Latent& noise, const Latent& video, const BinaryMask& mask,
                         const PatchLayout& layout);

// Projected input tokens (n x D).
Mat<float> build_input_tokens(const Latent& noise, const Latent& video, const BinaryMask& mask,
                              const PatchLayout& layout, const BackboneParams<float>& weights);

struct VelocityPair {
    Latent inpaint;
    std::optional<Latent> matte;
};

// Runs the branched backbone on latents. z_matte == nullptr runs the inpaint branch alone.
VelocityPair backbone_forward(const BackboneParams<float>& p, const AdapterSet<float>* adapters,
                              const Latent& video, const BinaryMask& mask, const Latent& z_inpaint,
                              const Latent* z_matte, double t, AttentionMaskType mask_type,
                              ForwardCache<float>* cache = nullptr, AttentionCapture* capture = nullptr);

Latent tokens_to_latent(const Mat<float>& tokens, const Shape& s, const PatchLayout& layout);
Mat<float> latent_to_tokens(const Latent& latent, const PatchLayout& layout);

// [0,1] video <-> [-1,1] latent.
Latent encode_video(const Video& v);
Video decode_video(const Latent& z);

} // namespace omni::nn
