#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "omnimatte/experts.hpp"
#include "omnimatte/synth.hpp"

namespace omni {

enum class Phase { PretrainInpaint, TrainEffect, TrainQuality };

std::string phase_name(Phase p); // "pretrain_inpaint", "train_effect", "train_quality"
Phase phase_for(ExpertKind k);

struct TrainConfig {
    Phase phase = Phase::PretrainInpaint;
    long steps = 3000;
    int batch = 4;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double max_grad_norm = 1.0; // 0 disables the guard
    std::uint64_t seed = 0;
    long checkpoint_every = 100; // steps between resumable state saves
    bool fixed_batch = false;    // reuse the step-0 batch (clips, t and noise) every step

    static TrainConfig defaults(Phase p);
    void validate() const;
    nlohmann::json to_json() const;
    // Unknown fields are rejected with their name.
    static TrainConfig from_json(const nlohmann::json& j, Phase p, const std::string& section = "train");
};

// Training view of a sample, stored as 8-bit values (samples are quantized to k/255).
class TrainClip {
public:
    static TrainClip from_sample(const TrainingSample& s);

    Shape shape() const { return shape_; }
    Latent video_latent() const;
    Latent background_latent() const;
    Latent alpha_latent() const;
    const BinaryMask& mask() const { return mask_; }

private:
    Shape shape_;
    std::vector<std::uint8_t> video_, background_, alpha_;
    BinaryMask mask_;
};

// (1 - t) z0 + t z1
Latent noisy_latent(const Latent& z0, const Latent& z1, double t);
// mean((z1 - z0 - v)^2)
double fm_loss(const Latent& v_pred, const Latent& z0, const Latent& z1);

// Decoupled weight decay Adam over a fixed list of tensors.
class AdamW {
public:
    AdamW(const TrainConfig& cfg, std::vector<nn::Mat<float>*> params);
    void step(const std::vector<const nn::Mat<float>*>& grads);
    long steps_taken() const { return t_; }
    std::vector<nn::Mat<float>>& first_moments() { return m_; }
    std::vector<nn::Mat<float>>& second_moments() { return v_; }
    void set_steps_taken(long t) { t_ = t; }

private:
    double lr_, wd_, b1_, b2_, eps_;
    std::vector<nn::Mat<float>*> params_;
    std::vector<nn::Mat<float>> m_, v_;
    long t_ = 0;
};

struct TrainHooks {
    // Checked before every step; returning true saves state (if a path is set) and stops.
    std::function<bool(long step)> should_stop;
    std::function<void(long step, double loss)> on_step;
    std::optional<std::filesystem::path> state_path; // resumable state, saved periodically
    bool resume = false;                              // continue from state_path when it exists
    std::string dataset_hash;                         // recorded in saved state and checked on resume
};

struct TrainResult {
    std::vector<double> losses; // one per completed step, including resumed ones
    long steps_done = 0;
    bool interrupted = false;
};

// Trains every base weight to predict background velocity from (noised background,
// composite, object mask).
TrainResult pretrain_inpaint(nn::BackboneParams<float>& model, const std::vector<TrainClip>& data,
                             const TrainConfig& cfg, const TrainHooks& hooks = {});

// Trains the expert's adapters on the matte-branch loss; the base stays frozen.
TrainResult train_expert(ExpertModel& expert, const std::vector<TrainClip>& data, const TrainConfig& cfg,
                         const TrainHooks& hooks = {});

// "step,phase,loss" rows with a header comment.
std::string loss_csv(Phase phase, const std::vector<double>& losses);

} // namespace omni
