#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "omnimatte/experts.hpp"
#include "omnimatte/media.hpp"

namespace omni {

struct SamplerConfig {
    int n_steps = 20;
    double tau = 0.5;
    std::uint64_t seed = 0;
    float eps = kDefaultRecoverEps;
    bool shared_noise = false; // both branches start from the same draw (tests only)
    std::optional<nn::AttentionMaskType> mask_override;

    void validate() const;
    nlohmann::json to_json() const;
};

// Velocity field over the two branches at time t.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual nn::VelocityPair velocity(const Latent& video, const BinaryMask& mask, const Latent& z_bg,
                                      const Latent& z_matte, double t) const = 0;
    // Identifies the frozen base; paired denoisers must agree.
    virtual std::string base_id() const = 0;
};

// Runs an expert under its training regime unless a mask override is given.
class ExpertDenoiser : public Denoiser {
public:
    explicit ExpertDenoiser(const ExpertModel& expert, std::optional<nn::AttentionMaskType> mask_override = {})
        : expert_(expert), mask_override_(mask_override) {}
    nn::VelocityPair velocity(const Latent& video, const BinaryMask& mask, const Latent& z_bg, const Latent& z_matte,
                              double t) const override;
    std::string base_id() const override { return expert_.base_checksum; }

private:
    const ExpertModel& expert_;
    std::optional<nn::AttentionMaskType> mask_override_;
};

// EFFECT iff t > tau.
ExpertKind select_expert(double t, double tau);

// z <- z - dt * v
void euler_step(Latent& z, const Latent& v, double dt);

// Uniform grid t_i = 1 - i / n, i = 0..n-1; each node uses one Euler step of size 1/n.
std::vector<double> time_grid(int n_steps);

struct TraceStep {
    double t = 0.0;
    ExpertKind expert = ExpertKind::Effect;
    double bg_norm = 0.0;    // RMS of the background latent after the step
    double matte_norm = 0.0; // RMS of the matte latent after the step
};

struct SampleTrace {
    std::vector<TraceStep> steps;
    bool monotone() const; // no EFFECT after QUALITY
    nlohmann::json to_json() const;
};

struct SampleResult {
    Latent background;
    Latent matte;
    SampleTrace trace;
};

// Initial noise for a clip: independent streams per branch unless cfg.shared_noise.
std::pair<Latent, Latent> initial_noise(const Shape& shape, const SamplerConfig& cfg);

SampleResult sample_dual(const Denoiser& effect, const Denoiser& quality, const Latent& video,
                         const BinaryMask& mask, const SamplerConfig& cfg);
SampleResult sample_single(const Denoiser& expert, ExpertKind label, const Latent& video, const BinaryMask& mask,
                           const SamplerConfig& cfg);

// Replicate to 3 channels and map [0,1] -> [-1,1].
Latent encode_alpha(const AlphaMatte& alpha);
// Channel mean, [-1,1] -> [0,1], clamped.
AlphaMatte decode_alpha(const Latent& z);

struct OmnimatteResult {
    LayerDecomposition layers;
    SampleTrace trace;
};

OmnimatteResult decompose(const Video& video, const BinaryMask& obj_mask, const Denoiser& effect,
                          const Denoiser& quality, const SamplerConfig& cfg);
// Same layers from one expert over the whole trajectory.
OmnimatteResult decompose_single(const Video& video, const BinaryMask& obj_mask, const Denoiser& expert,
                                 ExpertKind label, const SamplerConfig& cfg);
LayerDecomposition omnimatte(const Video& video, const BinaryMask& obj_mask, const ExpertModel& effect,
                             const ExpertModel& quality, const SamplerConfig& cfg);

} // namespace omni
