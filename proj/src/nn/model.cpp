#include "omnimatte/nn/model.hpp"

#include <algorithm>
#include <cmath>

namespace omni::nn {

using nlohmann::json;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

std::string mask_type_name(AttentionMaskType m) {
    switch (m) {
    case AttentionMaskType::Unrestricted: return "a";
    case AttentionMaskType::MatteReadsInpaint: return "b";
    case AttentionMaskType::Isolated: return "c";
    }
    return "?";
}

AttentionMaskType parse_mask_type(std::string_view s) {
    if (s == "a" || s == "A" || s == "unrestricted") return AttentionMaskType::Unrestricted;
    if (s == "b" || s == "B" || s == "matte_reads_inpaint") return AttentionMaskType::MatteReadsInpaint;
    if (s == "c" || s == "C" || s == "isolated") return AttentionMaskType::Isolated;
    throw ValidationError("unknown attention mask type '" + std::string(s) + "' (expected a, b or c)");
}

void PatchLayout::validate(const Shape& s) const {
    if (patch_h < 1 || patch_w < 1) throw ValidationError("patch size must be positive");
    if (s.height % patch_h != 0 || s.width % patch_w != 0)
        throw ValidationError("frame " + s.str() + " is not divisible by the " + std::to_string(patch_h) + "x" +
                              std::to_string(patch_w) + " patch");
}

std::vector<TokenPosition> token_positions(const Shape& s, const PatchLayout& layout) {
    layout.validate(s);
    std::vector<TokenPosition> out;
    const int rows = s.height / layout.patch_h, cols = s.width / layout.patch_w;
    out.reserve(std::size_t(s.frames) * rows * cols);
    for (int f = 0; f < s.frames; ++f)
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) out.push_back({f, r, c});
    return out;
}

template <class T>
Mat<T> patchify(std::span<const float> grid, const Shape& s, int channels, const PatchLayout& layout) {
    layout.validate(s);
    if (grid.size() != s.pixels() * channels) throw ValidationError("patchify: grid size does not match shape");
    const int ph = layout.patch_h, pw = layout.patch_w;
    const int rows = s.height / ph, cols = s.width / pw;
    Mat<T> out(layout.n_tokens(s), channels * ph * pw);
    int token = 0;
    for (int f = 0; f < s.frames; ++f)
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c, ++token) {
                int k = 0;
                for (int py = 0; py < ph; ++py)
                    for (int px = 0; px < pw; ++px) {
                        const std::size_t base =
                            ((std::size_t(f) * s.height + r * ph + py) * s.width + c * pw + px) * channels;
                        for (int ch = 0; ch < channels; ++ch) out(token, k++) = T(grid[base + ch]);
                    }
            }
    return out;
}

template <class T>
void unpatchify(const Mat<T>& tokens, const Shape& s, int channels, const PatchLayout& layout,
                std::span<float> out) {
    layout.validate(s);
    const int ph = layout.patch_h, pw = layout.patch_w;
    const int rows = s.height / ph, cols = s.width / pw;
    if (tokens.rows() != layout.n_tokens(s) || tokens.cols() != channels * ph * pw || out.size() != s.pixels() * channels)
        throw ValidationError("unpatchify: token matrix does not match layout");
    int token = 0;
    for (int f = 0; f < s.frames; ++f)
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c, ++token) {
                int k = 0;
                for (int py = 0; py < ph; ++py)
                    for (int px = 0; px < pw; ++px) {
                        const std::size_t base =
                            ((std::size_t(f) * s.height + r * ph + py) * s.width + c * pw + px) * channels;
                        for (int ch = 0; ch < channels; ++ch) out[base + ch] = float(tokens(token, k++));
                    }
            }
}

void ModelConfig::validate() const {
    if (frames < 1 || height < 1 || width < 1) throw ValidationError("model: clip dimensions must be positive");
    if (patch < 1 || height % patch || width % patch)
        throw ValidationError("model.patch: frame size must be divisible by the patch size");
    if (dim < 2 || heads < 1 || dim % heads) throw ValidationError("model.heads: dim must be divisible by heads");
    if (head_dim() % 2) throw ValidationError("model.dim: head dimension must be even for rotary embeddings");
    if (blocks < 1) throw ValidationError("model.blocks: must be >= 1");
    if (mlp_ratio < 1) throw ValidationError("model.mlp_ratio: must be >= 1");
    if (!(rope_base > 1.0)) throw ValidationError("model.rope_base: must be > 1");
}

json ModelConfig::to_json() const {
    return {{"frames", frames}, {"height", height}, {"width", width}, {"patch", patch},      {"dim", dim},
            {"heads", heads},   {"blocks", blocks}, {"mlp_ratio", mlp_ratio}, {"rope_base", rope_base}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    if (!j.is_object()) throw ValidationError("model: expected an object");
    for (const auto& [key, v] : j.items()) {
        const std::string field = "model." + key;
        auto integer = [&]() {
            if (!v.is_number_integer()) throw ValidationError(field + ": expected an integer");
            return v.get<int>();
        };
        if (key == "frames") c.frames = integer();
        else if (key == "height") c.height = integer();
        else if (key == "width") c.width = integer();
        else if (key == "patch") c.patch = integer();
        else if (key == "dim") c.dim = integer();
        else if (key == "heads") c.heads = integer();
        else if (key == "blocks") c.blocks = integer();
        else if (key == "mlp_ratio") c.mlp_ratio = integer();
        else if (key == "rope_base") {
            if (!v.is_number()) throw ValidationError(field + ": expected a number");
            c.rope_base = v.get<double>();
        } else throw ValidationError(field + ": unknown field");
    }
    c.validate();
    return c;
}

std::array<int, 3> rope_axis_pairs(int head_dim) {
    if (head_dim < 2 || head_dim % 2) throw ValidationError("rotary embedding needs an even head dimension");
    const int pairs = head_dim / 2;
    const int spatial = pairs / 3;
    return {pairs - 2 * spatial, spatial, spatial};
}

RopeTable build_rope_table(std::span<const TokenPosition> positions, int head_dim, double base) {
    const auto axis = rope_axis_pairs(head_dim);
    RopeTable t;
    t.n_tokens = int(positions.size());
    t.pairs = head_dim / 2;
    t.cos.resize(std::size_t(t.n_tokens) * t.pairs);
    t.sin.resize(t.cos.size());
    for (int i = 0; i < t.n_tokens; ++i) {
        const std::array<int, 3> pos{positions[i].frame, positions[i].row, positions[i].col};
        int pair = 0;
        for (int a = 0; a < 3; ++a) {
            for (int j = 0; j < axis[a]; ++j, ++pair) {
                const double freq = std::pow(base, -double(j) / axis[a]);
                const double angle = pos[a] * freq;
                t.cos[std::size_t(i) * t.pairs + pair] = std::cos(angle);
                t.sin[std::size_t(i) * t.pairs + pair] = std::sin(angle);
            }
        }
    }
    return t;
}

RopeTable rope_table_from_angles(const std::vector<std::vector<double>>& angles) {
    RopeTable t;
    t.n_tokens = int(angles.size());
    t.pairs = angles.empty() ? 0 : int(angles[0].size());
    for (const auto& row : angles) {
        if (int(row.size()) != t.pairs) throw ValidationError("rope table rows must have equal length");
        for (double a : row) {
            t.cos.push_back(std::cos(a));
            t.sin.push_back(std::sin(a));
        }
    }
    return t;
}

template <class T>
void rope_rotate(Mat<T>& x, const RopeTable& table, int heads, bool inverse) {
    if (x.cols() % heads) throw ValidationError("rope_rotate: width not divisible by heads");
    const int hd = int(x.cols()) / heads;
    if (hd % 2) throw ValidationError("rope_rotate: odd head dimension");
    if (hd / 2 != table.pairs || x.rows() != table.n_tokens)
        throw ValidationError("rope_rotate: table does not match the token matrix");
    const T sign = inverse ? T(-1) : T(1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double* cs = &table.cos[std::size_t(i) * table.pairs];
        const double* sn = &table.sin[std::size_t(i) * table.pairs];
        T* row = x.row(i).data();
        for (int h = 0; h < heads; ++h) {
            T* hp = row + h * hd;
            for (int j = 0; j < table.pairs; ++j) {
                const T c = T(cs[j]), s = sign * T(sn[j]);
                const T a = hp[2 * j], b = hp[2 * j + 1];
                hp[2 * j] = a * c - b * s;
                hp[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

KeyRange key_range(AttentionMaskType m, int stream, int n_inpaint, int n_matte) {
    const int total = n_inpaint + n_matte;
    if (n_matte == 0) return {0, n_inpaint};
    if (stream == 0) return m == AttentionMaskType::Unrestricted ? KeyRange{0, total} : KeyRange{0, n_inpaint};
    return m == AttentionMaskType::Isolated ? KeyRange{n_inpaint, total} : KeyRange{0, total};
}

std::vector<std::vector<bool>> attention_mask_matrix(AttentionMaskType m, int n_inpaint, int n_matte) {
    const int total = n_inpaint + n_matte;
    std::vector<std::vector<bool>> out(std::size_t(total), std::vector<bool>(std::size_t(total), false));
    for (int q = 0; q < total; ++q) {
        const KeyRange r = key_range(m, q < n_inpaint ? 0 : 1, n_inpaint, n_matte);
        for (int k = r.begin; k < r.end; ++k) out[q][k] = true;
    }
    return out;
}

template <class T>
Linear<T>& BlockParams<T>::proj(Projection p) {
    switch (p) {
    case Projection::Q: return q;
    case Projection::K: return k;
    case Projection::V: return v;
    default: return o;
    }
}

template <class T>
const Linear<T>& BlockParams<T>::proj(Projection p) const {
    return const_cast<BlockParams*>(this)->proj(p);
}

template <class T>
std::size_t BackboneParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<T>& m) { n += std::size_t(m.size()); });
    return n;
}

template <class T>
BackboneParams<T> zeros_like(const BackboneParams<T>& p) {
    BackboneParams<T> z = p;
    z.visit([](const std::string&, Mat<T>& m) { m.setZero(); });
    return z;
}

template <class U, class T>
BackboneParams<U> cast_params(const BackboneParams<T>& p) {
    BackboneParams<U> out;
    out.config = p.config;
    out.blocks.resize(p.blocks.size());
    std::vector<const Mat<T>*> src;
    p.visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
}

namespace {

Linear<float> random_linear(int out, int in, Rng& rng, double std_dev) {
    Linear<float> l;
    l.w.resize(out, in);
    for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = float(rng.normal() * std_dev);
    l.b = Mat<float>::Zero(1, out);
    return l;
}

Linear<float> zero_linear(int out, int in) { return {Mat<float>::Zero(out, in), Mat<float>::Zero(1, out)}; }

} // namespace

BackboneParams<float> init_backbone(const ModelConfig& cfg, std::uint64_t seed, bool adaln_zero) {
    cfg.validate();
    Rng rng(seed, 17);
    const int d = cfg.dim, h = cfg.hidden();
    BackboneParams<float> p;
    p.config = cfg;
    p.in_proj = random_linear(d, cfg.patch_in(), rng, 1.0 / std::sqrt(double(cfg.patch_in())));
    p.time1 = random_linear(d, d, rng, 1.0 / std::sqrt(double(d)));
    p.time2 = random_linear(d, d, rng, 1.0 / std::sqrt(double(d)));
    for (int b = 0; b < cfg.blocks; ++b) {
        BlockParams<float> blk;
        blk.mod = adaln_zero ? zero_linear(6 * d, d) : random_linear(6 * d, d, rng, 0.5 / std::sqrt(double(d)));
        blk.q = random_linear(d, d, rng, 1.0 / std::sqrt(double(d)));
        blk.k = random_linear(d, d, rng, 1.0 / std::sqrt(double(d)));
        blk.v = random_linear(d, d, rng, 1.0 / std::sqrt(double(d)));
        blk.o = random_linear(d, d, rng, 1.0 / std::sqrt(double(d)));
        blk.fc1 = random_linear(h, d, rng, 1.0 / std::sqrt(double(d)));
        blk.fc2 = random_linear(d, h, rng, 1.0 / std::sqrt(double(h)));
        p.blocks.push_back(std::move(blk));
    }
    p.final_mod = adaln_zero ? zero_linear(2 * d, d) : random_linear(2 * d, d, rng, 0.5 / std::sqrt(double(d)));
    p.out_proj = adaln_zero ? zero_linear(cfg.patch_out(), d)
                            : random_linear(cfg.patch_out(), d, rng, 1.0 / std::sqrt(double(d)));
    if (!adaln_zero) {
        // Non-zero biases so that tests exercise every parameter.
        p.visit([&](const std::string& name, Mat<float>& m) {
            if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0)
                for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = float(0.05 * rng.normal());
        });
    }
    return p;
}

template <class T>
Mat<T> timestep_embedding(double t, int dim) {
    Mat<T> e(1, dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = 1000.0 * t * freq;
        e(0, i) = T(std::cos(arg));
        e(0, half + i) = T(std::sin(arg));
    }
    if (dim % 2) e(0, dim - 1) = T(0);
    return e;
}

namespace {

constexpr double kLayerNormEps = 1e-6;

template <class T>
Mat<T> apply_linear(const Linear<T>& l, const Mat<T>& x) {
    Mat<T> y = x * l.w.transpose();
    y.rowwise() += l.b.row(0);
    return y;
}

template <class T>
void layer_norm(const Mat<T>& x, Mat<T>& n, Mat<T>& rstd) {
    const Eigen::Index d = x.cols();
    n.resize(x.rows(), d);
    rstd.resize(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const T mean = x.row(i).sum() / T(d);
        const T var = (x.row(i).array() - mean).square().sum() / T(d);
        const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
        rstd(i, 0) = r;
        n.row(i) = (x.row(i).array() - mean) * r;
    }
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dn, const Mat<T>& n, const Mat<T>& rstd) {
    const T d = T(dn.cols());
    Mat<T> dx(dn.rows(), dn.cols());
    for (Eigen::Index i = 0; i < dn.rows(); ++i) {
        const T mean_dn = dn.row(i).sum() / d;
        const T mean_dnn = dn.row(i).dot(n.row(i)) / d;
        dx.row(i) = rstd(i, 0) * (dn.row(i).array() - mean_dn - n.row(i).array() * mean_dnn);
    }
    return dx;
}

template <class T>
Mat<T> silu(const Mat<T>& x) {
    return (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

template <class T>
Mat<T> silu_grad(const Mat<T>& x) {
    const auto s = (T(1) / (T(1) + (-x.array()).exp()));
    return (s * (T(1) + x.array() * (T(1) - s))).matrix();
}

constexpr double kGeluK = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

template <class T>
Mat<T> gelu(const Mat<T>& u) {
    const auto a = u.array();
    return (T(0.5) * a * (T(1) + (T(kGeluK) * (a + T(kGeluC) * a.cube())).tanh())).matrix();
}

template <class T>
Mat<T> gelu_grad(const Mat<T>& u) {
    const auto a = u.array();
    const auto th = (T(kGeluK) * (a + T(kGeluC) * a.cube())).tanh();
    return (T(0.5) * (T(1) + th) +
            T(0.5) * a * (T(1) - th.square()) * T(kGeluK) * (T(1) + T(3 * kGeluC) * a.square()))
        .matrix();
}

template <class T>
void softmax_rows(Mat<T>& s) {
    const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = s.rowwise().maxCoeff();
    s.colwise() -= mx;
    s = s.array().exp().matrix();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> sum = s.rowwise().sum();
    s.array().colwise() /= sum.array();
}

// x W^T + b + (x down^T) up^T; stores x down^T in mid when an adapter is present.
template <class T>
Mat<T> project(const Linear<T>& l, const LoraAdapter<T>* a, const Mat<T>& x, Mat<T>* mid) {
    Mat<T> y = apply_linear(l, x);
    if (a) {
        Mat<T> m = x * a->down.transpose();
        y.noalias() += m * a->up.transpose();
        if (mid) *mid = std::move(m);
    }
    return y;
}

// Backward of project(); returns dL/dx.
template <class T>
Mat<T> project_backward(const Linear<T>& l, const LoraAdapter<T>* a, const Mat<T>& x, const Mat<T>& mid,
                        const Mat<T>& dy, Linear<T>* gl, LoraAdapter<T>* ga) {
    Mat<T> dx = dy * l.w;
    if (gl) {
        gl->w.noalias() += dy.transpose() * x;
        gl->b.row(0) += dy.colwise().sum();
    }
    if (a) {
        const Mat<T> dmid = dy * a->up;
        if (ga) {
            ga->up.noalias() += dy.transpose() * mid;
            ga->down.noalias() += dmid.transpose() * x;
        }
        dx.noalias() += dmid * a->down;
    }
    return dx;
}

template <class T>
const LoraAdapter<T>* adapter_for(const BlockAdapters<T>* adapters, int stream, Projection p) {
    return (adapters && stream == 1) ? adapters->get(p) : nullptr;
}

template <class T>
LoraAdapter<T>* grad_adapter_for(BlockAdapters<T>* adapters, int stream, Projection p) {
    return (adapters && stream == 1) ? adapters->get(p) : nullptr;
}

} // namespace

template <class T>
void block_forward(const BlockParams<T>& p, const BlockAdapters<T>* adapters, const Mat<T>& cond,
                   std::vector<Mat<T>>& streams, const RopeTable& rope, int heads, AttentionMaskType mask,
                   BlockCache<T>* cache, AttentionCapture* capture) {
    const int d = int(p.q.w.rows());
    const int hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    if (adapters) {
        for (Projection pr : kProjections)
            if (const auto* a = adapters->get(pr); a && (a->rank() > d || a->down.cols() != d || a->up.rows() != d))
                throw ValidationError("adapter shape does not fit the block (rank must not exceed D)");
    }
    const Mat<T> mod = apply_linear(p.mod, cond);
    const RowVec<T> shift1 = mod.row(0).segment(0, d), scale1 = mod.row(0).segment(d, d),
                    gate1 = mod.row(0).segment(2 * d, d), shift2 = mod.row(0).segment(3 * d, d),
                    scale2 = mod.row(0).segment(4 * d, d), gate2 = mod.row(0).segment(5 * d, d);
    const RowVec<T> one_scale1 = scale1.array() + T(1);
    const RowVec<T> one_scale2 = scale2.array() + T(1);

    const int n_streams = int(streams.size());
    const int n_inpaint = int(streams[0].rows());
    const int n_matte = n_streams > 1 ? int(streams[1].rows()) : 0;
    std::vector<StreamCache<T>> sc(static_cast<std::size_t>(n_streams));

    for (int s = 0; s < n_streams; ++s) {
        StreamCache<T>& c = sc[s];
        c.x_in = streams[s];
        layer_norm(c.x_in, c.n1, c.rstd1);
        c.h1 = c.n1;
        c.h1.array().rowwise() *= one_scale1.array();
        c.h1.rowwise() += shift1;
        c.q = project(p.q, adapter_for(adapters, s, Projection::Q), c.h1, &c.lora_mid[0]);
        c.k = project(p.k, adapter_for(adapters, s, Projection::K), c.h1, &c.lora_mid[1]);
        c.v = project(p.v, adapter_for(adapters, s, Projection::V), c.h1, &c.lora_mid[2]);
        rope_rotate(c.q, rope, heads);
        rope_rotate(c.k, rope, heads);
    }

    Mat<T> k_all(n_inpaint + n_matte, d), v_all(n_inpaint + n_matte, d);
    k_all.topRows(n_inpaint) = sc[0].k;
    v_all.topRows(n_inpaint) = sc[0].v;
    if (n_matte) {
        k_all.bottomRows(n_matte) = sc[1].k;
        v_all.bottomRows(n_matte) = sc[1].v;
    }

    Mat<T> logit_sum;
    for (int s = 0; s < n_streams; ++s) {
        StreamCache<T>& c = sc[s];
        c.keys = key_range(mask, s, n_inpaint, n_matte);
        const int nk = c.keys.end - c.keys.begin;
        c.attn.resize(c.q.rows(), d);
        if (cache) c.probs.resize(std::size_t(heads));
        const bool capture_here = capture && s == 0;
        if (capture_here && capture->mode == HeadAverage::Logits) logit_sum = Mat<T>::Zero(c.q.rows(), nk);
        Mat<float> prob_sum;
        if (capture_here && capture->mode == HeadAverage::Probabilities) prob_sum = Mat<float>::Zero(c.q.rows(), n_inpaint);
        for (int h = 0; h < heads; ++h) {
            Mat<T> scores = c.q.middleCols(h * hd, hd) * k_all.block(c.keys.begin, h * hd, nk, hd).transpose();
            scores *= scale;
            if (capture_here && capture->mode == HeadAverage::Logits) logit_sum += scores;
            softmax_rows(scores);
            if (capture_here && capture->mode == HeadAverage::Probabilities)
                prob_sum += scores.leftCols(std::min(nk, n_inpaint)).template cast<float>();
            c.attn.middleCols(h * hd, hd).noalias() = scores * v_all.block(c.keys.begin, h * hd, nk, hd);
            if (cache) c.probs[h] = std::move(scores);
        }
        if (capture_here) {
            if (capture->mode == HeadAverage::Logits) {
                logit_sum /= T(heads);
                softmax_rows(logit_sum);
                capture->per_block.push_back(logit_sum.leftCols(std::min(nk, n_inpaint)).template cast<float>());
            } else {
                capture->per_block.push_back(prob_sum / float(heads));
            }
        }
        c.o = project(p.o, adapter_for(adapters, s, Projection::O), c.attn, &c.lora_mid[3]);
        c.x_mid = c.o;
        c.x_mid.array().rowwise() *= gate1.array();
        c.x_mid += c.x_in;
        layer_norm(c.x_mid, c.n2, c.rstd2);
        c.h2 = c.n2;
        c.h2.array().rowwise() *= one_scale2.array();
        c.h2.rowwise() += shift2;
        c.u = apply_linear(p.fc1, c.h2);
        c.g = gelu(c.u);
        c.m = apply_linear(p.fc2, c.g);
        Mat<T> y = c.m;
        y.array().rowwise() *= gate2.array();
        y += c.x_mid;
        streams[s] = std::move(y);
    }

    if (cache) {
        cache->mod = mod;
        cache->streams = std::move(sc);
        cache->n_inpaint = n_inpaint;
        cache->n_matte = n_matte;
    }
}

template <class T>
void block_backward(const BlockParams<T>& p, const BlockAdapters<T>* adapters, const BlockCache<T>& cache,
                    const Mat<T>& cond, const RopeTable& rope, int heads, std::vector<Mat<T>>& d_streams,
                    BlockParams<T>* grad, BlockAdapters<T>* grad_adapters, Mat<T>& d_cond,
                    bool propagate_inpaint) {
    const int d = int(p.q.w.rows());
    const int hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    const Mat<T>& mod = cache.mod;
    const RowVec<T> scale1 = mod.row(0).segment(d, d), gate1 = mod.row(0).segment(2 * d, d),
                    scale2 = mod.row(0).segment(4 * d, d), gate2 = mod.row(0).segment(5 * d, d);
    const RowVec<T> one_scale1 = scale1.array() + T(1);
    const RowVec<T> one_scale2 = scale2.array() + T(1);
    const int n_streams = int(cache.streams.size());
    const int n_inpaint = cache.n_inpaint, n_matte = cache.n_matte;

    Mat<T> k_all(n_inpaint + n_matte, d), v_all(n_inpaint + n_matte, d);
    k_all.topRows(n_inpaint) = cache.streams[0].k;
    v_all.topRows(n_inpaint) = cache.streams[0].v;
    if (n_matte) {
        k_all.bottomRows(n_matte) = cache.streams[1].k;
        v_all.bottomRows(n_matte) = cache.streams[1].v;
    }
    Mat<T> dk_all = Mat<T>::Zero(n_inpaint + n_matte, d);
    Mat<T> dv_all = Mat<T>::Zero(n_inpaint + n_matte, d);
    RowVec<T> dmod = RowVec<T>::Zero(6 * d);
    std::vector<Mat<T>> dq(static_cast<std::size_t>(n_streams)), dx(static_cast<std::size_t>(n_streams));
    auto active = [&](int s) { return s == 1 || propagate_inpaint; };

    for (int s = 0; s < n_streams; ++s) {
        if (!active(s)) continue;
        const StreamCache<T>& c = cache.streams[s];
        const Mat<T>& dy = d_streams[s];
        dmod.segment(5 * d, d) += (dy.array() * c.m.array()).matrix().colwise().sum();
        Mat<T> dm = dy;
        dm.array().rowwise() *= gate2.array();
        Mat<T> dg = dm * p.fc2.w;
        if (grad) {
            grad->fc2.w.noalias() += dm.transpose() * c.g;
            grad->fc2.b.row(0) += dm.colwise().sum();
        }
        const Mat<T> du = (dg.array() * gelu_grad(c.u).array()).matrix();
        Mat<T> dh2 = du * p.fc1.w;
        if (grad) {
            grad->fc1.w.noalias() += du.transpose() * c.h2;
            grad->fc1.b.row(0) += du.colwise().sum();
        }
        dmod.segment(3 * d, d) += dh2.colwise().sum();
        dmod.segment(4 * d, d) += (dh2.array() * c.n2.array()).matrix().colwise().sum();
        dh2.array().rowwise() *= one_scale2.array();
        Mat<T> dxm = dy + layer_norm_backward(dh2, c.n2, c.rstd2);
        dmod.segment(2 * d, d) += (dxm.array() * c.o.array()).matrix().colwise().sum();
        Mat<T> d_o = dxm;
        d_o.array().rowwise() *= gate1.array();
        dx[s] = std::move(dxm);

        const Mat<T> dattn = project_backward(p.o, adapter_for(adapters, s, Projection::O), c.attn, c.lora_mid[3], d_o,
                                              grad ? &grad->o : nullptr,
                                              grad_adapter_for(grad_adapters, s, Projection::O));
        const int nk = c.keys.end - c.keys.begin;
        dq[s].resize(c.q.rows(), d);
        for (int h = 0; h < heads; ++h) {
            const Mat<T>& prob = c.probs[h];
            const auto da_h = dattn.middleCols(h * hd, hd);
            Mat<T> dp = da_h * v_all.block(c.keys.begin, h * hd, nk, hd).transpose();
            dv_all.block(c.keys.begin, h * hd, nk, hd).noalias() += prob.transpose() * da_h;
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * prob.array()).rowwise().sum();
            dp.colwise() -= rowdot;
            Mat<T> ds = (prob.array() * dp.array()).matrix() * scale;
            dq[s].middleCols(h * hd, hd).noalias() = ds * k_all.block(c.keys.begin, h * hd, nk, hd);
            dk_all.block(c.keys.begin, h * hd, nk, hd).noalias() += ds.transpose() * c.q.middleCols(h * hd, hd);
        }
    }

    for (int s = 0; s < n_streams; ++s) {
        if (!active(s)) continue;
        const StreamCache<T>& c = cache.streams[s];
        const int offset = s == 0 ? 0 : n_inpaint;
        const int rows = int(c.q.rows());
        Mat<T> dk = dk_all.middleRows(offset, rows);
        const Mat<T> dv = dv_all.middleRows(offset, rows);
        rope_rotate(dq[s], rope, heads, true);
        rope_rotate(dk, rope, heads, true);
        Mat<T> dh1 = project_backward(p.q, adapter_for(adapters, s, Projection::Q), c.h1, c.lora_mid[0], dq[s],
                                      grad ? &grad->q : nullptr, grad_adapter_for(grad_adapters, s, Projection::Q));
        dh1 += project_backward(p.k, adapter_for(adapters, s, Projection::K), c.h1, c.lora_mid[1], dk,
                                grad ? &grad->k : nullptr, grad_adapter_for(grad_adapters, s, Projection::K));
        dh1 += project_backward(p.v, adapter_for(adapters, s, Projection::V), c.h1, c.lora_mid[2], dv,
                                grad ? &grad->v : nullptr, grad_adapter_for(grad_adapters, s, Projection::V));
        dmod.segment(0, d) += dh1.colwise().sum();
        dmod.segment(d, d) += (dh1.array() * c.n1.array()).matrix().colwise().sum();
        dh1.array().rowwise() *= one_scale1.array();
        dx[s] += layer_norm_backward(dh1, c.n1, c.rstd1);
        d_streams[s] = std::move(dx[s]);
    }
    if (!propagate_inpaint) d_streams[0].setZero();

    if (grad) {
        grad->mod.w.noalias() += dmod.transpose() * cond;
        grad->mod.b.row(0) += dmod;
        d_cond.noalias() += dmod * p.mod.w;
    }
}

template <class T>
std::vector<Mat<T>> backbone_forward_tokens(const BackboneParams<T>& p, const AdapterSet<T>* adapters,
                                            const std::vector<Mat<T>>& inputs, double t,
                                            const RopeTable& rope, AttentionMaskType mask,
                                            ForwardCache<T>* cache, AttentionCapture* capture) {
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("backbone_forward: t must lie in [0, 1]");
    if (inputs.empty() || inputs.size() > 2) throw ValidationError("backbone_forward: expected one or two streams");
    const int d = p.config.dim;
    const int heads = p.config.heads;
    if (adapters && adapters->size() != p.blocks.size())
        throw ValidationError("adapter set does not match the number of blocks");
    for (const auto& in : inputs)
        if (in.cols() != p.in_proj.w.cols() || in.rows() != rope.n_tokens)
            throw ValidationError("backbone_forward: input patches do not match the model");

    const Mat<T> temb = timestep_embedding<T>(t, d);
    const Mat<T> t_hidden = apply_linear(p.time1, temb);
    const Mat<T> c = apply_linear(p.time2, silu(t_hidden));
    const Mat<T> cond = silu(c);

    std::vector<Mat<T>> streams;
    for (const auto& in : inputs) streams.push_back(apply_linear(p.in_proj, in));

    if (cache) {
        cache->mask = mask;
        cache->temb = temb;
        cache->t_hidden = t_hidden;
        cache->c = c;
        cache->cond = cond;
        cache->inputs = inputs;
        cache->blocks.assign(p.blocks.size(), {});
        cache->rope = rope;
    }
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const BlockAdapters<T>* ad = (adapters && (*adapters)[b]) ? &*(*adapters)[b] : nullptr;
        block_forward(p.blocks[b], ad, cond, streams, rope, heads, mask, cache ? &cache->blocks[b] : nullptr, capture);
    }

    const Mat<T> fmod = apply_linear(p.final_mod, cond);
    const RowVec<T> shift = fmod.row(0).segment(0, d);
    const RowVec<T> one_scale = fmod.row(0).segment(d, d).array() + T(1);
    std::vector<Mat<T>> out;
    if (cache) {
        cache->final_mod = fmod;
        cache->final_n.clear();
        cache->final_h.clear();
        cache->final_rstd.clear();
    }
    for (auto& x : streams) {
        Mat<T> n, rstd;
        layer_norm(x, n, rstd);
        Mat<T> h = n;
        h.array().rowwise() *= one_scale.array();
        h.rowwise() += shift;
        out.push_back(apply_linear(p.out_proj, h));
        if (cache) {
            cache->final_n.push_back(std::move(n));
            cache->final_h.push_back(std::move(h));
            cache->final_rstd.push_back(std::move(rstd));
        }
    }
    return out;
}

template <class T>
void backbone_backward_tokens(const BackboneParams<T>& p, const AdapterSet<T>* adapters,
                              const ForwardCache<T>& cache, std::vector<Mat<T>> d_out,
                              BackboneParams<T>* grad, AdapterSet<T>* grad_adapters, bool propagate_inpaint) {
    const int d = p.config.dim;
    const int n_streams = int(cache.inputs.size());
    if (int(d_out.size()) != n_streams) throw ValidationError("backbone_backward: gradient stream count mismatch");
    auto active = [&](int s) { return s == 1 || propagate_inpaint || n_streams == 1; };
    const bool prop_inpaint = propagate_inpaint || n_streams == 1;

    const RowVec<T> one_scale = cache.final_mod.row(0).segment(d, d).array() + T(1);
    RowVec<T> dfmod = RowVec<T>::Zero(2 * d);
    std::vector<Mat<T>> dx(static_cast<std::size_t>(n_streams));
    for (int s = 0; s < n_streams; ++s) {
        if (!active(s)) {
            dx[s] = Mat<T>::Zero(cache.inputs[s].rows(), d);
            continue;
        }
        Mat<T> dh = d_out[s] * p.out_proj.w;
        if (grad) {
            grad->out_proj.w.noalias() += d_out[s].transpose() * cache.final_h[s];
            grad->out_proj.b.row(0) += d_out[s].colwise().sum();
        }
        dfmod.segment(0, d) += dh.colwise().sum();
        dfmod.segment(d, d) += (dh.array() * cache.final_n[s].array()).matrix().colwise().sum();
        dh.array().rowwise() *= one_scale.array();
        dx[s] = layer_norm_backward(dh, cache.final_n[s], cache.final_rstd[s]);
    }
    Mat<T> d_cond = Mat<T>::Zero(1, d);
    if (grad) {
        grad->final_mod.w.noalias() += dfmod.transpose() * cache.cond;
        grad->final_mod.b.row(0) += dfmod;
        d_cond.noalias() += dfmod * p.final_mod.w;
    }

    for (int b = int(p.blocks.size()) - 1; b >= 0; --b) {
        const BlockAdapters<T>* ad = (adapters && (*adapters)[b]) ? &*(*adapters)[b] : nullptr;
        BlockAdapters<T>* gad = (grad_adapters && (*grad_adapters)[b]) ? &*(*grad_adapters)[b] : nullptr;
        block_backward(p.blocks[b], ad, cache.blocks[b], cache.cond, cache.rope, p.config.heads, dx,
                       grad ? &grad->blocks[b] : nullptr, gad, d_cond, prop_inpaint);
    }

    if (!grad) return;
    for (int s = 0; s < n_streams; ++s) {
        if (!active(s)) continue;
        grad->in_proj.w.noalias() += dx[s].transpose() * cache.inputs[s];
        grad->in_proj.b.row(0) += dx[s].colwise().sum();
    }
    const Mat<T> dc = (d_cond.array() * silu_grad(cache.c).array()).matrix();
    const Mat<T> th_act = silu(cache.t_hidden);
    grad->time2.w.noalias() += dc.transpose() * th_act;
    grad->time2.b += dc;
    const Mat<T> dth = ((dc * p.time2.w).array() * silu_grad(cache.t_hidden).array()).matrix();
    grad->time1.w.noalias() += dth.transpose() * cache.temb;
    grad->time1.b += dth;
}

Mat<float> input_patches(const Latent& noise, const Latent& video, const BinaryMask& mask, const PatchLayout& layout) {
    require_same_shape(noise, video, "build_input_tokens");
    require_same_shape(noise, mask, "build_input_tokens");
    const Shape s = noise.shape();
    std::vector<float> buf(s.pixels() * ModelConfig::kInputChannels);
    auto nz = noise.data();
    auto vd = video.data();
    auto mk = mask.data();
    for (std::size_t p = 0; p < s.pixels(); ++p) {
        float* o = &buf[p * 7];
        o[0] = nz[p * 3];
        o[1] = nz[p * 3 + 1];
        o[2] = nz[p * 3 + 2];
        o[3] = vd[p * 3];
        o[4] = vd[p * 3 + 1];
        o[5] = vd[p * 3 + 2];
        o[6] = mk[p] ? 1.0f : 0.0f;
    }
    return patchify<float>(buf, s, ModelConfig::kInputChannels, layout);
}

Mat<float> build_input_tokens(const Latent& noise, const Latent& video, const BinaryMask& mask,
                              const PatchLayout& layout, const BackboneParams<float>& weights) {
    const Mat<float> patches = input_patches(noise, video, mask, layout);
    if (patches.cols() != weights.in_proj.w.cols())
        throw ValidationError("build_input_tokens: patch size does not match the input projection");
    return apply_linear(weights.in_proj, patches);
}

Latent tokens_to_latent(const Mat<float>& tokens, const Shape& s, const PatchLayout& layout) {
    Latent out(s);
    unpatchify<float>(tokens, s, 3, layout, out.data());
    return out;
}

Mat<float> latent_to_tokens(const Latent& latent, const PatchLayout& layout) {
    return patchify<float>(latent.data(), latent.shape(), 3, layout);
}

VelocityPair backbone_forward(const BackboneParams<float>& p, const AdapterSet<float>* adapters,
                              const Latent& video, const BinaryMask& mask, const Latent& z_inpaint,
                              const Latent* z_matte, double t, AttentionMaskType mask_type,
                              ForwardCache<float>* cache, AttentionCapture* capture) {
    const Shape s = z_inpaint.shape();
    if (s != p.config.shape())
        throw ValidationError("backbone_forward: clip " + s.str() + " does not match the model layout " +
                              p.config.shape().str());
    const PatchLayout layout = p.config.layout();
    std::vector<Mat<float>> inputs;
    inputs.push_back(input_patches(z_inpaint, video, mask, layout));
    if (z_matte) inputs.push_back(input_patches(*z_matte, video, mask, layout));
    const auto positions = token_positions(s, layout);
    const RopeTable rope = build_rope_table(positions, p.config.head_dim(), p.config.rope_base);
    auto out = backbone_forward_tokens<float>(p, adapters, inputs, t, rope, mask_type, cache, capture);
    VelocityPair v{tokens_to_latent(out[0], s, layout), std::nullopt};
    if (z_matte) v.matte = tokens_to_latent(out[1], s, layout);
    return v;
}

Latent encode_video(const Video& v) {
    Latent z(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) z.data()[i] = 2.0f * v.data()[i] - 1.0f;
    return z;
}

Video decode_video(const Latent& z) {
    Video v(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) v.data()[i] = std::clamp((z.data()[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    return v;
}

#define OMNI_INSTANTIATE(T)                                                                                       \
    template Mat<T> patchify<T>(std::span<const float>, const Shape&, int, const PatchLayout&);                  \
    template void unpatchify<T>(const Mat<T>&, const Shape&, int, const PatchLayout&, std::span<float>);         \
    template void rope_rotate<T>(Mat<T>&, const RopeTable&, int, bool);                                           \
    template struct BlockParams<T>;                                                                               \
    template struct BackboneParams<T>;                                                                            \
    template BackboneParams<T> zeros_like<T>(const BackboneParams<T>&);                                          \
    template Mat<T> timestep_embedding<T>(double, int);                                                           \
    template void block_forward<T>(const BlockParams<T>&, const BlockAdapters<T>*, const Mat<T>&,                 \
                                   std::vector<Mat<T>>&, const RopeTable&, int, AttentionMaskType,               \
                                   BlockCache<T>*, AttentionCapture*);                                            \
    template void block_backward<T>(const BlockParams<T>&, const BlockAdapters<T>*, const BlockCache<T>&,         \
                                    const Mat<T>&, const RopeTable&, int, std::vector<Mat<T>>&, BlockParams<T>*, \
                                    BlockAdapters<T>*, Mat<T>&, bool);                                            \
    template std::vector<Mat<T>> backbone_forward_tokens<T>(const BackboneParams<T>&, const AdapterSet<T>*,       \
                                                            const std::vector<Mat<T>>&, double, const RopeTable&, \
                                                            AttentionMaskType, ForwardCache<T>*,                  \
                                                            AttentionCapture*);                                   \
    template void backbone_backward_tokens<T>(const BackboneParams<T>&, const AdapterSet<T>*,                     \
                                              const ForwardCache<T>&, std::vector<Mat<T>>, BackboneParams<T>*,    \
                                              AdapterSet<T>*, bool);

OMNI_INSTANTIATE(float)
OMNI_INSTANTIATE(double)
#undef OMNI_INSTANTIATE

template BackboneParams<double> cast_params<double, float>(const BackboneParams<float>&);
template BackboneParams<float> cast_params<float, double>(const BackboneParams<double>&);
template BackboneParams<float> cast_params<float, float>(const BackboneParams<float>&);

} // namespace omni::nn
