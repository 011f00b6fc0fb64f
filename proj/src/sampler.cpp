#include "omnimatte/sampler.hpp"

#include <cmath>

#include "omnimatte/error.hpp"

namespace omni {

void SamplerConfig::validate() const {
    if (n_steps < 1) throw ValidationError("sampler.n_steps: must be >= 1");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("sampler.tau: expected a value in [0, 1]");
    if (!(eps > 0.0f)) throw ValidationError("sampler.eps: must be > 0");
}

nlohmann::json SamplerConfig::to_json() const {
    nlohmann::json j{{"n_steps", n_steps}, {"tau", tau}, {"seed", seed}, {"eps", eps}, {"shared_noise", shared_noise}};
    j["mask_override"] = mask_override ? nlohmann::json(nn::mask_type_name(*mask_override)) : nlohmann::json(nullptr);
    return j;
}

nn::VelocityPair ExpertDenoiser::velocity(const Latent& video, const BinaryMask& mask, const Latent& z_bg,
                                          const Latent& z_matte, double t) const {
    return nn::backbone_forward(*expert_.base, &expert_.adapters, video, mask, z_bg, &z_matte, t,
                                mask_override_.value_or(expert_.config.mask_type));
}

ExpertKind select_expert(double t, double tau) { return t > tau ? ExpertKind::Effect : ExpertKind::Quality; }

void euler_step(Latent& z, const Latent& v, double dt) {
    require_same_shape(z, v, "euler_step");
    if (!(dt > 0.0)) throw ValidationError("euler_step: dt must be > 0");
    const float step = float(dt);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] -= step * v.data()[i];
}

std::vector<double> time_grid(int n_steps) {
    if (n_steps < 1) throw ValidationError("time_grid: n_steps must be >= 1");
    std::vector<double> g(static_cast<std::size_t>(n_steps));
    for (int i = 0; i < n_steps; ++i) g[i] = 1.0 - double(i) / n_steps;
    return g;
}

bool SampleTrace::monotone() const {
    bool seen_quality = false;
    for (const auto& s : steps) {
        if (s.expert == ExpertKind::Quality) seen_quality = true;
        else if (seen_quality) return false;
    }
    return true;
}

nlohmann::json SampleTrace::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : steps)
        arr.push_back({{"t", s.t}, {"expert", expert_kind_name(s.expert)}, {"bg_norm", s.bg_norm}, {"matte_norm", s.matte_norm}});
    return {{"steps", arr}, {"monotone", monotone()}};
}

std::pair<Latent, Latent> initial_noise(const Shape& shape, const SamplerConfig& cfg) {
    Latent bg(shape), matte(shape);
    Rng rb(cfg.seed, 1);
    for (auto& v : bg.data()) v = float(rb.normal());
    if (cfg.shared_noise) {
        matte = bg;
    } else {
        Rng rm(cfg.seed, 2);
        for (auto& v : matte.data()) v = float(rm.normal());
    }
    return {std::move(bg), std::move(matte)};
}

namespace {

double rms(const Latent& z) {
    double s = 0.0;
    for (float v : z.data()) s += double(v) * v;
    return std::sqrt(s / double(z.size()));
}

template <class Pick>
SampleResult run_sampler(Pick&& pick, const Latent& video, const BinaryMask& mask, const SamplerConfig& cfg) {
    cfg.validate();
    require_same_shape(video, mask, "sample");
    auto [bg, matte] = initial_noise(video.shape(), cfg);
    SampleResult res{std::move(bg), std::move(matte), {}};
    const double dt = 1.0 / cfg.n_steps;
    for (double t : time_grid(cfg.n_steps)) {
        const auto [kind, denoiser] = pick(t);
        const nn::VelocityPair v = denoiser->velocity(video, mask, res.background, res.matte, t);
        if (!v.matte) throw InvariantError("denoiser returned no matte velocity");
        euler_step(res.background, v.inpaint, dt);
        euler_step(res.matte, *v.matte, dt);
        res.trace.steps.push_back({t, kind, rms(res.background), rms(res.matte)});
    }
    return res;
}

} // namespace

SampleResult sample_dual(const Denoiser& effect, const Denoiser& quality, const Latent& video, const BinaryMask& mask,
                         const SamplerConfig& cfg) {
    if (effect.base_id() != quality.base_id())
        throw ValidationError("experts were trained on different bases: effect " + effect.base_id() + ", quality " +
                              quality.base_id());
    return run_sampler(
        [&](double t) {
            const ExpertKind k = select_expert(t, cfg.tau);
            return std::pair<ExpertKind, const Denoiser*>{k, k == ExpertKind::Effect ? &effect : &quality};
        },
        video, mask, cfg);
}

SampleResult sample_single(const Denoiser& expert, ExpertKind label, const Latent& video, const BinaryMask& mask,
                           const SamplerConfig& cfg) {
    return run_sampler([&](double) { return std::pair<ExpertKind, const Denoiser*>{label, &expert}; }, video, mask,
                       cfg);
}

Latent encode_alpha(const AlphaMatte& alpha) {
    Latent z(alpha.shape());
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        const float v = 2.0f * alpha.data()[i] - 1.0f;
        z.data()[3 * i] = z.data()[3 * i + 1] = z.data()[3 * i + 2] = v;
    }
    return z;
}

AlphaMatte decode_alpha(const Latent& z) {
    AlphaMatte a(z.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const float mean = (z.data()[3 * i] + z.data()[3 * i + 1] + z.data()[3 * i + 2]) / 3.0f;
        a.data()[i] = std::clamp((mean + 1.0f) * 0.5f, 0.0f, 1.0f);
    }
    return a;
}

namespace {

OmnimatteResult layers_from(const Video& video, const SampleResult& s, float eps) {
    OmnimatteResult out;
    out.layers.background = nn::decode_video(s.background);
    out.layers.alpha = decode_alpha(s.matte);
    out.layers.foreground = recover_foreground(video, out.layers.alpha, out.layers.background, eps);
    out.trace = s.trace;
    return out;
}

} // namespace

OmnimatteResult decompose(const Video& video, const BinaryMask& obj_mask, const Denoiser& effect,
                          const Denoiser& quality, const SamplerConfig& cfg) {
    require_same_shape(video, obj_mask, "omnimatte");
    return layers_from(video, sample_dual(effect, quality, nn::encode_video(video), obj_mask, cfg), cfg.eps);
}

OmnimatteResult decompose_single(const Video& video, const BinaryMask& obj_mask, const Denoiser& expert,
                                 ExpertKind label, const SamplerConfig& cfg) {
    require_same_shape(video, obj_mask, "omnimatte");
    return layers_from(video, sample_single(expert, label, nn::encode_video(video), obj_mask, cfg), cfg.eps);
}

LayerDecomposition omnimatte(const Video& video, const BinaryMask& obj_mask, const ExpertModel& effect,
                             const ExpertModel& quality, const SamplerConfig& cfg) {
    const ExpertDenoiser e(effect, cfg.mask_override), q(quality, cfg.mask_override);
    return decompose(video, obj_mask, e, q, cfg).layers;
}

} // namespace omni
