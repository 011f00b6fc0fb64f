#include "omnimatte/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "omnimatte/error.hpp"
#include "omnimatte/image_io.hpp"
#include "omnimatte/nn/checkpoint.hpp"
#include "omnimatte/sampler.hpp"

namespace omni {

using nn::Mat;

std::string phase_name(Phase p) {
    switch (p) {
    case Phase::PretrainInpaint: return "pretrain_inpaint";
    case Phase::TrainEffect: return "train_effect";
    case Phase::TrainQuality: return "train_quality";
    }
    return "?";
}

Phase phase_for(ExpertKind k) { return k == ExpertKind::Effect ? Phase::TrainEffect : Phase::TrainQuality; }

TrainConfig TrainConfig::defaults(Phase p) {
    TrainConfig c;
    c.phase = p;
    c.steps = p == Phase::PretrainInpaint ? 3000 : 1500;
    return c;
}

void TrainConfig::validate() const {
    if (steps < 0) throw ValidationError("train.steps: must be >= 0");
    if (batch < 1) throw ValidationError("train.batch: must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("train.lr: must be a finite value >= 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("train.weight_decay: must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("train.beta1: expected a value in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("train.beta2: expected a value in [0, 1)");
    if (!(adam_eps > 0.0)) throw ValidationError("train.adam_eps: must be > 0");
    if (!(max_grad_norm >= 0.0)) throw ValidationError("train.max_grad_norm: must be >= 0 (0 disables)");
    if (checkpoint_every < 1) throw ValidationError("train.checkpoint_every: must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"phase", phase_name(phase)},   {"steps", steps},         {"batch", batch},
            {"lr", lr},                     {"weight_decay", weight_decay}, {"beta1", beta1},
            {"beta2", beta2},               {"adam_eps", adam_eps},   {"max_grad_norm", max_grad_norm},
            {"seed", seed},                 {"checkpoint_every", checkpoint_every}, {"fixed_batch", fixed_batch}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, Phase p, const std::string& section) {
    TrainConfig c = defaults(p);
    if (!j.is_object()) throw ValidationError(section + ": expected an object");
    for (const auto& [key, v] : j.items()) {
        const std::string field = section + "." + key;
        auto number = [&]() {
            if (!v.is_number()) throw ValidationError(field + ": expected a number");
            return v.get<double>();
        };
        auto integer = [&]() {
            if (!v.is_number_integer()) throw ValidationError(field + ": expected an integer");
            return v.get<long>();
        };
        if (key == "steps") c.steps = integer();
        else if (key == "batch") c.batch = int(integer());
        else if (key == "lr") c.lr = number();
        else if (key == "weight_decay") c.weight_decay = number();
        else if (key == "beta1") c.beta1 = number();
        else if (key == "beta2") c.beta2 = number();
        else if (key == "adam_eps") c.adam_eps = number();
        else if (key == "max_grad_norm") c.max_grad_norm = number();
        else if (key == "seed") c.seed = std::uint64_t(integer());
        else if (key == "checkpoint_every") c.checkpoint_every = integer();
        else if (key == "fixed_batch") {
            if (!v.is_boolean()) throw ValidationError(field + ": expected true or false");
            c.fixed_batch = v.get<bool>();
        } else if (key == "phase") {
            if (v != phase_name(p)) throw ValidationError(field + ": expected " + phase_name(p));
        } else throw ValidationError(field + ": unknown field");
    }
    c.validate();
    return c;
}

TrainClip TrainClip::from_sample(const TrainingSample& s) {
    TrainClip c;
    c.shape_ = s.shape();
    for (float v : s.composite.data()) c.video_.push_back(io::quantize(v));
    for (float v : s.background.data()) c.background_.push_back(io::quantize(v));
    for (float v : s.alpha_full.data()) c.alpha_.push_back(io::quantize(v));
    c.mask_ = s.obj_mask;
    return c;
}

namespace {

Latent bytes_to_latent(const Shape& s, const std::vector<std::uint8_t>& bytes) {
    Latent z(s);
    for (std::size_t i = 0; i < bytes.size(); ++i) z.data()[i] = 2.0f * io::dequantize(bytes[i]) - 1.0f;
    return z;
}

} // namespace

Latent TrainClip::video_latent() const { return bytes_to_latent(shape_, video_); }
Latent TrainClip::background_latent() const { return bytes_to_latent(shape_, background_); }
Latent TrainClip::alpha_latent() const {
    AlphaMatte a(shape_);
    for (std::size_t i = 0; i < alpha_.size(); ++i) a.data()[i] = io::dequantize(alpha_[i]);
    return encode_alpha(a);
}

Latent noisy_latent(const Latent& z0, const Latent& z1, double t) {
    require_same_shape(z0, z1, "noisy_latent");
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("noisy_latent: t must lie in [0, 1]");
    Latent z(z0.shape());
    const float a = float(1.0 - t), b = float(t);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = a * z0.data()[i] + b * z1.data()[i];
    return z;
}

double fm_loss(const Latent& v_pred, const Latent& z0, const Latent& z1) {
    require_same_shape(v_pred, z0, "fm_loss");
    require_same_shape(z0, z1, "fm_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < v_pred.size(); ++i) {
        const double d = double(z1.data()[i]) - z0.data()[i] - v_pred.data()[i];
        s += d * d;
    }
    return s / double(v_pred.size());
}

AdamW::AdamW(const TrainConfig& cfg, std::vector<Mat<float>*> params)
    : lr_(cfg.lr), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps), params_(std::move(params)) {
    for (auto* p : params_) {
        m_.push_back(Mat<float>::Zero(p->rows(), p->cols()));
        v_.push_back(Mat<float>::Zero(p->rows(), p->cols()));
    }
}

void AdamW::step(const std::vector<const Mat<float>*>& grads) {
    if (grads.size() != params_.size()) throw InvariantError("AdamW: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    const float b1 = float(b1_), b2 = float(b2_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto g = grads[i]->array();
        m_[i].array() = b1 * m_[i].array() + (1.0f - b1) * g;
        v_[i].array() = b2 * v_[i].array() + (1.0f - b2) * g.square();
        const auto mhat = m_[i].array() / float(c1);
        const auto vhat = v_[i].array() / float(c2);
        params_[i]->array() -= float(lr_) * (mhat / (vhat.sqrt() + float(eps_)) + float(wd_) * params_[i]->array());
    }
}

namespace {

struct Named {
    std::string name;
    Mat<float>* param;
    Mat<float>* grad;
};

nlohmann::json without_steps(nlohmann::json j) {
    j.erase("steps");
    return j;
}

void save_state(const std::filesystem::path& path, const TrainConfig& cfg, const TrainHooks& hooks,
                const std::vector<Named>& tensors, AdamW& opt, const std::vector<double>& losses) {
    nn::Checkpoint ck;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        ck.put(tensors[i].name, *tensors[i].param);
        ck.put("optim/m/" + tensors[i].name, opt.first_moments()[i]);
        ck.put("optim/v/" + tensors[i].name, opt.second_moments()[i]);
    }
    auto& meta = ck.metadata();
    meta["phase"] = phase_name(cfg.phase);
    meta["steps_done"] = long(losses.size());
    meta["optimizer_steps"] = opt.steps_taken();
    meta["train_config"] = nlohmann::ordered_json::parse(cfg.to_json().dump());
    meta["dataset_hash"] = hooks.dataset_hash;
    meta["losses"] = losses;
    ck.save(path);
}

long load_state(const std::filesystem::path& path, const TrainConfig& cfg, const TrainHooks& hooks,
                const std::vector<Named>& tensors, AdamW& opt, std::vector<double>& losses) {
    const nn::Checkpoint ck = nn::Checkpoint::load(path);
    const auto& meta = ck.metadata();
    for (const char* f : {"phase", "steps_done", "optimizer_steps", "train_config", "dataset_hash", "losses"})
        if (!meta.contains(f)) throw LoadError(path.string() + ": resume state is missing field '" + f + "'");
    if (meta["phase"] != phase_name(cfg.phase))
        throw ValidationError("--resume: saved state belongs to phase " + meta["phase"].get<std::string>());
    const auto saved = without_steps(nlohmann::json::parse(meta["train_config"].dump()));
    const auto current = without_steps(cfg.to_json());
    if (saved != current) {
        for (const auto& [k, v] : current.items())
            if (!saved.contains(k) || saved[k] != v)
                throw ValidationError("--resume: train." + k + " differs from the saved state (" +
                                      (saved.contains(k) ? saved[k].dump() : "absent") + " vs " + v.dump() + ")");
        throw ValidationError("--resume: training configuration differs from the saved state");
    }
    if (meta["dataset_hash"] != hooks.dataset_hash) throw ValidationError("--resume: the dataset changed since the state was saved");
    const long done = meta["steps_done"].get<long>();
    if (done > cfg.steps)
        throw ValidationError("--resume: saved state has " + std::to_string(done) + " steps, more than --steps " +
                              std::to_string(cfg.steps));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        ck.get_into(tensors[i].name, *tensors[i].param);
        ck.get_into("optim/m/" + tensors[i].name, opt.first_moments()[i]);
        ck.get_into("optim/v/" + tensors[i].name, opt.second_moments()[i]);
    }
    opt.set_steps_taken(meta["optimizer_steps"].get<long>());
    losses = meta["losses"].get<std::vector<double>>();
    if (long(losses.size()) != done) throw LoadError(path.string() + ": loss trace length does not match steps_done");
    return done;
}

double clip_gradients(const std::vector<Named>& tensors, double max_norm) {
    double sq = 0.0;
    for (const auto& t : tensors) sq += t.grad->template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const float s = float(max_norm / norm);
        for (const auto& t : tensors) *t.grad *= s;
    }
    return norm;
}

template <class Compute>
TrainResult run_loop(const TrainConfig& cfg, const TrainHooks& hooks, const std::vector<Named>& tensors,
                     Compute&& compute) {
    cfg.validate();
    std::vector<Mat<float>*> params;
    std::vector<const Mat<float>*> grads;
    for (const auto& t : tensors) {
        params.push_back(t.param);
        grads.push_back(t.grad);
    }
    AdamW opt(cfg, params);
    TrainResult res;
    long step = 0;
    if (hooks.resume && hooks.state_path && std::filesystem::exists(*hooks.state_path))
        step = load_state(*hooks.state_path, cfg, hooks, tensors, opt, res.losses);

    for (; step < cfg.steps; ++step) {
        if (hooks.should_stop && hooks.should_stop(step)) {
            if (hooks.state_path) save_state(*hooks.state_path, cfg, hooks, tensors, opt, res.losses);
            res.interrupted = true;
            break;
        }
        for (const auto& t : tensors) t.grad->setZero();
        Rng rng(mix_seed(cfg.seed, cfg.fixed_batch ? 0 : std::uint64_t(step)));
        const double loss = compute(rng);
        if (!std::isfinite(loss)) throw DivergenceError(step, "loss is " + std::to_string(loss));
        const double norm = clip_gradients(tensors, cfg.max_grad_norm);
        if (!std::isfinite(norm)) throw DivergenceError(step, "gradient norm is not finite");
        opt.step(grads);
        res.losses.push_back(loss);
        if (hooks.on_step) hooks.on_step(step, loss);
        if (hooks.state_path && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps)
            save_state(*hooks.state_path, cfg, hooks, tensors, opt, res.losses);
    }
    if (!res.interrupted && hooks.state_path) save_state(*hooks.state_path, cfg, hooks, tensors, opt, res.losses);
    res.steps_done = long(res.losses.size());
    return res;
}

Latent normal_latent(const Shape& s, Rng& rng) {
    Latent z(s);
    for (auto& v : z.data()) v = float(rng.normal());
    return z;
}

void check_data(const std::vector<TrainClip>& data, const nn::ModelConfig& cfg) {
    if (data.empty()) throw PrerequisiteError("training needs at least one clip");
    for (const auto& c : data)
        if (c.shape() != cfg.shape())
            throw ValidationError("training clip " + c.shape().str() + " does not match the model layout " +
                                  cfg.shape().str());
}

Latent difference(const Latent& a, const Latent& b) {
    Latent d(a.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = a.data()[i] - b.data()[i];
    return d;
}

} // namespace

TrainResult pretrain_inpaint(nn::BackboneParams<float>& model, const std::vector<TrainClip>& data,
                             const TrainConfig& cfg, const TrainHooks& hooks) {
    if (cfg.phase != Phase::PretrainInpaint) throw ValidationError("pretrain_inpaint: config phase must be pretrain_inpaint");
    check_data(data, model.config);
    nn::BackboneParams<float> grad = nn::zeros_like(model);
    std::vector<Named> tensors;
    model.visit([&](const std::string& name, Mat<float>& m) { tensors.push_back({name, &m, nullptr}); });
    std::size_t i = 0;
    grad.visit([&](const std::string&, Mat<float>& m) { tensors[i++].grad = &m; });

    const Shape shape = model.config.shape();
    const nn::PatchLayout layout = model.config.layout();
    const nn::RopeTable rope = nn::build_rope_table(nn::token_positions(shape, layout), model.config.head_dim(),
                                                    model.config.rope_base);
    auto compute = [&](Rng& rng) {
        double loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const TrainClip& clip = data[std::size_t(rng.uniform_int(0, int(data.size()) - 1))];
            const double t = rng.uniform();
            const Latent z0 = clip.background_latent();
            const Latent z1 = normal_latent(shape, rng);
            const Latent zt = noisy_latent(z0, z1, t);
            nn::ForwardCache<float> cache;
            std::vector<Mat<float>> inputs{nn::input_patches(zt, clip.video_latent(), clip.mask(), layout)};
            auto out = nn::backbone_forward_tokens<float>(model, nullptr, inputs, t, rope,
                                                          nn::AttentionMaskType::Isolated, &cache);
            const Mat<float> diff = out[0] - nn::latent_to_tokens(difference(z1, z0), layout);
            const double numel = double(diff.size());
            loss += diff.template cast<double>().squaredNorm() / numel;
            std::vector<Mat<float>> d_out{diff * float(2.0 / (numel * cfg.batch))};
            nn::backbone_backward_tokens<float>(model, nullptr, cache, std::move(d_out), &grad, nullptr, true);
        }
        return loss / cfg.batch;
    };
    return run_loop(cfg, hooks, tensors, compute);
}

TrainResult train_expert(ExpertModel& expert, const std::vector<TrainClip>& data, const TrainConfig& cfg,
                         const TrainHooks& hooks) {
    if (cfg.phase != phase_for(expert.config.kind))
        throw ValidationError("train_expert: phase " + phase_name(cfg.phase) + " does not match the " +
                              expert_kind_name(expert.config.kind) + " expert");
    const nn::BackboneParams<float>& base = *expert.base;
    check_data(data, base.config);
    const std::string checksum_before = nn::base_checksum(base);
    if (checksum_before != expert.base_checksum) throw InvariantError("expert base does not match its recorded checksum");

    nn::AdapterSet<float> grad = nn::zeros_like(expert.adapters);
    std::vector<Named> tensors;
    for (std::size_t b = 0; b < expert.adapters.size(); ++b) {
        if (!expert.adapters[b]) continue;
        for (nn::Projection p : nn::kProjections) {
            auto* a = expert.adapters[b]->get(p);
            auto* g = grad[b]->get(p);
            if (!a) continue;
            const std::string prefix = "expert/" + expert_kind_name(expert.config.kind) + "/block" +
                                       std::to_string(b + 1) + "/" + nn::projection_name(p) + "/";
            tensors.push_back({prefix + "down", &a->down, &g->down});
            tensors.push_back({prefix + "up", &a->up, &g->up});
        }
    }

    const Shape shape = base.config.shape();
    const nn::PatchLayout layout = base.config.layout();
    const nn::RopeTable rope =
        nn::build_rope_table(nn::token_positions(shape, layout), base.config.head_dim(), base.config.rope_base);
    const nn::AttentionMaskType mask = expert.config.mask_type;
    // Under b and c the inpaint stream never reads the matte stream, so it carries no adapter gradient.
    const bool propagate_inpaint = mask == nn::AttentionMaskType::Unrestricted;
    auto compute = [&](Rng& rng) {
        double loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const TrainClip& clip = data[std::size_t(rng.uniform_int(0, int(data.size()) - 1))];
            const double t = rng.uniform();
            const Latent video = clip.video_latent();
            const Latent bg0 = clip.background_latent();
            const Latent bg1 = normal_latent(shape, rng);
            const Latent m0 = clip.alpha_latent();
            const Latent m1 = normal_latent(shape, rng);
            std::vector<Mat<float>> inputs{nn::input_patches(noisy_latent(bg0, bg1, t), video, clip.mask(), layout),
                                           nn::input_patches(noisy_latent(m0, m1, t), video, clip.mask(), layout)};
            nn::ForwardCache<float> cache;
            auto out = nn::backbone_forward_tokens<float>(base, &expert.adapters, inputs, t, rope, mask, &cache);
            const Mat<float> diff = out[1] - nn::latent_to_tokens(difference(m1, m0), layout);
            const double numel = double(diff.size());
            loss += diff.template cast<double>().squaredNorm() / numel;
            std::vector<Mat<float>> d_out{Mat<float>::Zero(out[0].rows(), out[0].cols()),
                                          diff * float(2.0 / (numel * cfg.batch))};
            nn::backbone_backward_tokens<float>(base, &expert.adapters, cache, std::move(d_out), nullptr, &grad,
                                                propagate_inpaint);
        }
        return loss / cfg.batch;
    };
    TrainResult res = run_loop(cfg, hooks, tensors, compute);
    if (nn::base_checksum(base) != checksum_before)
        throw InvariantError("base weights changed during expert training");
    return res;
}

std::string loss_csv(Phase phase, const std::vector<double>& losses) {
    std::string out = "# step: 0-based optimizer step; phase: training phase; loss: batch-mean flow-matching loss\n";
    out += "step,phase,loss\n";
    const std::string name = phase_name(phase);
    char buf[48];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g", losses[i]);
        out += std::to_string(i) + "," + name + "," + buf + "\n";
    }
    return out;
}

} // namespace omni
