#include "omnimatte/cli_app.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "omnimatte/hash.hpp"
#include "omnimatte/image_io.hpp"
#include "omnimatte/metrics.hpp"
#include "omnimatte/nn/checkpoint.hpp"
#include "omnimatte/parallel.hpp"

namespace omni::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed streams derived from --seed, one per stage.
enum SeedStream : std::uint64_t {
    kSynthStream = 1,
    kPretrainStream = 2,
    kAnalysisStream = 3,
    kEffectStream = 4,
    kQualityStream = 5,
    kSamplerStream = 6,
    kInitStream = 7,
    kEffectInitStream = 8,
    kQualityInitStream = 9,
};

int int_field(const json& v, const std::string& field) {
    if (!v.is_number_integer()) throw ValidationError(field + ": expected an integer");
    return v.get<int>();
}

double number_field(const json& v, const std::string& field) {
    if (!v.is_number()) throw ValidationError(field + ": expected a number");
    return v.get<double>();
}

std::vector<double> number_list(const json& v, const std::string& field) {
    if (!v.is_array()) throw ValidationError(field + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) out.push_back(number_field(x, field));
    return out;
}

const json& object_field(const json& v, const std::string& field) {
    if (!v.is_object()) throw ValidationError(field + ": expected an object");
    return v;
}

TrainConfig train_section(const json& v, Phase p, const std::string& field) {
    if (v.is_object() && v.contains("seed"))
        throw ValidationError(field + ".seed: training seeds are derived from --seed");
    return TrainConfig::from_json(v, p, field);
}

json without_seed(json j) {
    j.erase("seed");
    return j;
}

std::string tau_label(double tau) {
    std::ostringstream s;
    s << "tau_" << tau;
    return s.str();
}

std::string clip_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip_%04zu", i);
    return buf;
}

json parse_json_file(const fs::path& path, bool prerequisite) {
    if (!fs::exists(path)) {
        if (prerequisite) throw PrerequisiteError("missing " + path.string());
        throw ValidationError("cannot read " + path.string());
    }
    try {
        return json::parse(io::read_text(path));
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": invalid JSON: " + e.what());
    }
}

} // namespace

void RunConfig::validate() const {
    generator.validate();
    model.validate();
    if (model.shape() != generator.shape())
        throw ValidationError("model: clip shape " + model.shape().str() + " does not match generator shape " +
                              generator.shape().str());
    if (train_count < 0) throw ValidationError("data.train_count: must be >= 0");
    if (val_count < 0) throw ValidationError("data.val_count: must be >= 0");
    pretrain.validate();
    effect.validate();
    quality.validate();
    if (effect_rank < 1 || effect_rank > model.dim)
        throw ValidationError("experts.effect_rank: must be in [1, " + std::to_string(model.dim) + "]");
    if (quality_rank < 1 || quality_rank > model.dim)
        throw ValidationError("experts.quality_rank: must be in [1, " + std::to_string(model.dim) + "]");
    analysis.validate();
    if (analysis_clips < 1) throw ValidationError("analysis.clips: must be >= 1");
    SamplerConfig s;
    s.n_steps = sample_steps;
    s.tau = tau;
    s.eps = eps;
    s.validate();
    if (sweep_taus.empty()) throw ValidationError("sweep.taus: must not be empty");
    for (double t : sweep_taus)
        if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("sweep.taus: values must be in [0, 1]");
}

json RunConfig::to_json() const {
    json j;
    j["generator"] = generator.to_json();
    j["data"] = {{"train_count", train_count}, {"val_count", val_count}};
    json m = model.to_json();
    for (const char* k : {"frames", "height", "width"}) m.erase(k);
    j["model"] = m;
    j["pretrain"] = without_seed(pretrain.to_json());
    j["train_effect"] = without_seed(effect.to_json());
    j["train_quality"] = without_seed(quality.to_json());
    j["experts"] = {{"effect_rank", effect_rank}, {"quality_rank", quality_rank}};
    json a = without_seed(analysis.to_json());
    a["clips"] = analysis_clips;
    j["analysis"] = a;
    j["sampler"] = {{"n_steps", sample_steps}, {"tau", tau}, {"eps", eps}};
    j["sweep"] = {{"taus", sweep_taus}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    if (!j.is_object()) throw ValidationError("config: expected an object");
    json model = json::object();
    for (const auto& [key, v] : j.items()) {
        if (key == "generator") c.generator = GeneratorConfig::from_json(v);
        else if (key == "data") {
            for (const auto& [k, x] : object_field(v, key).items()) {
                if (k == "train_count") c.train_count = int_field(x, "data." + k);
                else if (k == "val_count") c.val_count = int_field(x, "data." + k);
                else throw ValidationError("data." + k + ": unknown field");
            }
        } else if (key == "model") model = object_field(v, key);
        else if (key == "pretrain") c.pretrain = train_section(v, Phase::PretrainInpaint, key);
        else if (key == "train_effect") c.effect = train_section(v, Phase::TrainEffect, key);
        else if (key == "train_quality") c.quality = train_section(v, Phase::TrainQuality, key);
        else if (key == "experts") {
            for (const auto& [k, x] : object_field(v, key).items()) {
                if (k == "effect_rank") c.effect_rank = int_field(x, "experts." + k);
                else if (k == "quality_rank") c.quality_rank = int_field(x, "experts." + k);
                else throw ValidationError("experts." + k + ": unknown field");
            }
        } else if (key == "analysis") {
            for (const auto& [k, x] : object_field(v, key).items()) {
                const std::string field = "analysis." + k;
                if (k == "clips") c.analysis_clips = int_field(x, field);
                else if (k == "timesteps") c.analysis.timesteps = number_list(x, field);
                else if (k == "smooth") {
                    if (!x.is_boolean()) throw ValidationError(field + ": expected a boolean");
                    c.analysis.smooth = x.get<bool>();
                } else if (k == "shadow_threshold") c.analysis.shadow_threshold = float(number_field(x, field));
                else if (k == "head_average") {
                    const std::string mode = x.is_string() ? x.get<std::string>() : "";
                    if (mode == "probabilities") c.analysis.head_average = nn::HeadAverage::Probabilities;
                    else if (mode == "logits") c.analysis.head_average = nn::HeadAverage::Logits;
                    else throw ValidationError(field + ": expected \"probabilities\" or \"logits\"");
                } else throw ValidationError(field + ": unknown field");
            }
        } else if (key == "sampler") {
            for (const auto& [k, x] : object_field(v, key).items()) {
                const std::string field = "sampler." + k;
                if (k == "n_steps") c.sample_steps = int_field(x, field);
                else if (k == "tau") c.tau = number_field(x, field);
                else if (k == "eps") c.eps = float(number_field(x, field));
                else throw ValidationError(field + ": unknown field");
            }
        } else if (key == "sweep") {
            for (const auto& [k, x] : object_field(v, key).items()) {
                if (k == "taus") c.sweep_taus = number_list(x, "sweep.taus");
                else throw ValidationError("sweep." + k + ": unknown field");
            }
        } else throw ValidationError(key + ": unknown config section");
    }
    // The clip shape comes from the generator.
    for (const char* k : {"frames", "height", "width"})
        if (model.contains(k)) throw ValidationError(std::string("model.") + k + ": set the clip shape under generator");
    model["frames"] = c.generator.frames;
    model["height"] = c.generator.height;
    model["width"] = c.generator.width;
    c.model = nn::ModelConfig::from_json(model);
    c.validate();
    return c;
}

std::atomic<bool>& interrupt_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

namespace {

struct Options {
    std::string command;
    fs::path run;
    std::optional<fs::path> config;
    std::uint64_t seed = 0;
    std::optional<long> steps;
    std::optional<double> tau;
    std::optional<std::string> taus;
    std::string effect_blocks = "auto";
    std::optional<std::string> mask_override;
    int jobs = 1;
    bool force = false;
    bool resume = false;
    std::string split = "all";
    std::optional<int> count;
    std::optional<std::string> kind;
    std::optional<fs::path> layers;
    std::optional<long> stop_after; // simulated interrupt, for tests
};

class Run {
public:
    Run(const Options& opt, std::ostream& out) : opt_(opt), out_(out), dir_(opt.run) {
        fs::create_directories(dir_);
        const fs::path stored = dir_ / "config.json";
        if (opt.config) {
            config_ = RunConfig::from_json(parse_json_file(*opt.config, false));
            if (fs::exists(stored)) {
                const RunConfig previous = RunConfig::from_json(parse_json_file(stored, true));
                if (previous.to_json() != config_.to_json() && !opt.force)
                    throw ValidationError("--config differs from " + stored.string() +
                                          "; pass --force to replace the run config");
            }
        } else if (fs::exists(stored)) {
            config_ = RunConfig::from_json(parse_json_file(stored, true));
        }
        io::write_text(stored, config_.to_json().dump(2) + "\n");

        const fs::path mpath = dir_ / "manifest.json";
        if (fs::exists(mpath)) manifest_ = parse_json_file(mpath, true);
        if (!manifest_.is_object()) manifest_ = json::object();
        if (!manifest_.contains("run_id")) {
            Fnv1a h;
            h.update(config_.to_json().dump());
            manifest_["run_id"] = h.hex();
        }
        if (!manifest_.contains("stages")) manifest_["stages"] = json::object();
        manifest_["tool"] = "omnimatte";
        manifest_["tool_version"] = kToolVersion;
        manifest_["config"] = config_.to_json();
        manifest_["acceptance_targets"] = {{"psnr_min_db", kTargetPsnrDb},
                                           {"object_alpha_mse_max", kTargetObjectAlphaMse}};
    }

    const RunConfig& config() const { return config_; }
    const fs::path& dir() const { return dir_; }
    const Options& opt() const { return opt_; }
    std::ostream& out() { return out_; }
    std::uint64_t seed(SeedStream s) const { return mix_seed(opt_.seed, s); }

    // False when the stage already completed with these exact arguments (and no --force).
    bool begin(const std::string& key, const json& args) {
        const json& stages = manifest_["stages"];
        if (stages.contains(key) && stages[key].value("complete", false)) {
            const json& prev = stages[key]["args"];
            if (prev == args && !opt_.force) {
                out_ << key << ": up to date\n";
                return false;
            }
            if (!opt_.force) {
                std::string what = "arguments";
                for (const auto& [k, v] : args.items())
                    if (!prev.contains(k) || prev[k] != v) {
                        what = "'" + k + "'";
                        break;
                    }
                throw ValidationError(key + " already completed with different " + what +
                                      "; rerun with --force to replace it");
            }
        }
        manifest_["stages"].erase(key);
        save();
        return true;
    }

    void finish(const std::string& key, const json& args, const json& outputs) {
        manifest_["stages"][key] = {{"args", args}, {"outputs", outputs}, {"complete", true}};
        save();
    }

    std::optional<json> stage_outputs(const std::string& key) const {
        const json& stages = manifest_["stages"];
        if (stages.contains(key) && stages[key].value("complete", false)) return stages[key]["outputs"];
        return std::nullopt;
    }

    std::string dataset_hash(const std::string& split) const {
        if (auto o = stage_outputs("synth:" + split)) return (*o)["dataset_hash"].get<std::string>();
        const fs::path dir = dir_ / "data" / split;
        if (!fs::exists(dir / "manifest.json"))
            throw PrerequisiteError("missing dataset " + dir.string() + ": run `synth` first");
        return hash_directory(dir);
    }

    std::vector<TrainingSample> load_split(const std::string& split, std::size_t limit = SIZE_MAX) const {
        const fs::path dir = dir_ / "data" / split;
        const json m = [&] {
            if (!fs::exists(dir / "manifest.json"))
                throw PrerequisiteError("missing dataset " + dir.string() + ": run `synth` first");
            return parse_json_file(dir / "manifest.json", true);
        }();
        const std::size_t count = std::min<std::size_t>(m.at("count").get<std::size_t>(), limit);
        std::vector<TrainingSample> clips(count);
        parallel_for(count, opt_.jobs, [&](std::size_t i) { clips[i] = read_sample(dir / clip_name(i)); });
        return clips;
    }

    std::shared_ptr<const nn::BackboneParams<float>> load_base() const {
        const fs::path path = dir_ / "base" / "model.ckpt";
        if (!fs::exists(path)) throw PrerequisiteError("missing base checkpoint " + path.string() + ": run `pretrain` first");
        return std::make_shared<const nn::BackboneParams<float>>(nn::get_backbone(nn::Checkpoint::load(path)));
    }

    fs::path expert_path(ExpertKind k) const { return dir_ / "experts" / expert_kind_name(k) / "adapters.ckpt"; }

private:
    void save() { io::write_text(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

    const Options& opt_;
    std::ostream& out_;
    fs::path dir_;
    RunConfig config_;
    json manifest_;
};

std::optional<nn::AttentionMaskType> mask_override(const Options& opt) {
    if (!opt.mask_override) return std::nullopt;
    return nn::parse_mask_type(*opt.mask_override);
}

void reset_dir(const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
}

// ---- synth

void synth_split(Run& run, const std::string& split, int count) {
    const GeneratorConfig& gen = run.config().generator;
    const std::uint64_t split_seed = mix_seed(run.seed(kSynthStream), split == "train" ? 0 : 1);
    const json args{{"count", count}, {"seed", run.opt().seed}, {"generator", gen.to_json()},
                    {"generator_version", kGeneratorVersion}};
    const std::string key = "synth:" + split;
    if (!run.begin(key, args)) return;
    const fs::path dir = run.dir() / "data" / split;
    reset_dir(dir);
    parallel_for(std::size_t(count), run.opt().jobs, [&](std::size_t i) {
        write_sample(generate_sample(mix_seed(split_seed, i), gen), dir / clip_name(i));
    });
    const json manifest{{"split", split},
                        {"count", count},
                        {"seed", split_seed},
                        {"generator_version", kGeneratorVersion},
                        {"generator", gen.to_json()},
                        {"clip_seeds", "mix_seed(seed, clip_index)"}};
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    const std::string hash = hash_directory(dir);
    run.out() << "synth: wrote " << count << " " << split << " clips to " << dir.string() << " (hash " << hash << ")\n";
    run.finish(key, args, {{"path", "data/" + split}, {"dataset_hash", hash}});
}

void cmd_synth(Run& run) {
    const Options& opt = run.opt();
    if (opt.split == "all") {
        if (opt.count) throw ValidationError("--count needs --split train or --split val");
        synth_split(run, "train", run.config().train_count);
        synth_split(run, "val", run.config().val_count);
        return;
    }
    if (opt.split != "train" && opt.split != "val") throw ValidationError("--split: expected train, val or all");
    const int count = opt.count.value_or(opt.split == "train" ? run.config().train_count : run.config().val_count);
    if (count < 0) throw ValidationError("--count: must be >= 0");
    synth_split(run, opt.split, count);
}

// ---- training

TrainHooks training_hooks(Run& run, const fs::path& dir, const std::string& label, long total,
                          const std::string& dataset_hash) {
    TrainHooks hooks;
    const auto stop_after = run.opt().stop_after;
    hooks.should_stop = [stop_after](long step) {
        return interrupt_flag().load() || (stop_after && step >= *stop_after);
    };
    std::ostream& out = run.out();
    const long every = std::max<long>(1, total / 20);
    hooks.on_step = [&out, label, total, every](long step, double loss) {
        if ((step + 1) % every == 0 || step + 1 == total)
            out << label << ": step " << step + 1 << "/" << total << " loss " << loss << "\n" << std::flush;
    };
    hooks.state_path = dir / "state.ckpt";
    hooks.resume = run.opt().resume;
    hooks.dataset_hash = dataset_hash;
    return hooks;
}

std::vector<TrainClip> train_clips(const std::vector<TrainingSample>& samples) {
    std::vector<TrainClip> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(TrainClip::from_sample(s));
    return out;
}

int interrupted(Run& run, const std::string& label, long steps_done) {
    run.out() << label << ": interrupted after " << steps_done << " steps; state saved, rerun with --resume\n";
    return kExitInterrupted;
}

int cmd_pretrain(Run& run) {
    TrainConfig cfg = run.config().pretrain;
    if (run.opt().steps) cfg.steps = *run.opt().steps;
    cfg.seed = run.seed(kPretrainStream);
    cfg.validate();
    const std::string hash = run.dataset_hash("train");
    const json args{{"seed", run.opt().seed},
                    {"train", cfg.to_json()},
                    {"model", run.config().model.to_json()},
                    {"dataset_hash", hash}};
    if (!run.begin("pretrain", args)) return kExitOk;
    const fs::path dir = run.dir() / "base";
    if (!run.opt().resume) reset_dir(dir);
    const auto data = train_clips(run.load_split("train"));
    auto model = nn::init_backbone(run.config().model, run.seed(kInitStream));
    const TrainResult r =
        pretrain_inpaint(model, data, cfg, training_hooks(run, dir, "pretrain", cfg.steps, hash));
    if (r.interrupted) return interrupted(run, "pretrain", r.steps_done);

    nn::Checkpoint ckpt;
    nn::put_backbone(ckpt, model);
    const std::string checksum = nn::base_checksum(model);
    ckpt.metadata()["phase"] = phase_name(cfg.phase);
    ckpt.metadata()["steps"] = r.steps_done;
    ckpt.metadata()["dataset_hash"] = hash;
    ckpt.metadata()["base_checksum"] = checksum;
    ckpt.save(dir / "model.ckpt");
    io::write_text(dir / "loss.csv", loss_csv(cfg.phase, r.losses));
    const json info{{"train", cfg.to_json()}, {"dataset_hash", hash}, {"steps_done", r.steps_done},
                    {"base_checksum", checksum}};
    io::write_text(dir / "train.json", info.dump(2) + "\n");
    run.out() << "pretrain: wrote " << (dir / "model.ckpt").string() << " (base " << checksum << ")\n";
    json outputs{{"checkpoint", "base/model.ckpt"}, {"base_checksum", checksum}, {"loss_csv", "base/loss.csv"}};
    if (!r.losses.empty()) outputs["final_loss"] = r.losses.back();
    run.finish("pretrain", args, outputs);
    return kExitOk;
}

std::vector<int> effect_blocks(Run& run) {
    if (run.opt().effect_blocks != "auto") return parse_block_list(run.opt().effect_blocks);
    const fs::path path = run.dir() / "analysis" / "stages.json";
    if (!fs::exists(path))
        throw PrerequisiteError("missing " + path.string() + ": run `analyze` first or pass --effect-blocks LIST");
    const json stages = parse_json_file(path, true);
    if (!stages.contains("effect_blocks")) throw LoadError(path.string() + " has no field 'effect_blocks'");
    return stages["effect_blocks"].get<std::vector<int>>();
}

int cmd_train_expert(Run& run) {
    const Options& opt = run.opt();
    if (!opt.kind) throw ValidationError("train-expert needs --kind effect|quality");
    const ExpertKind kind = parse_expert_kind(*opt.kind);
    const bool effect = kind == ExpertKind::Effect;
    const int n_blocks = run.config().model.blocks;
    std::vector<int> blocks;
    if (effect) blocks = effect_blocks(run);
    else {
        if (opt.effect_blocks != "auto") throw ValidationError("--effect-blocks applies to the effect expert only");
        for (int b = 1; b <= n_blocks; ++b) blocks.push_back(b);
    }
    TrainConfig cfg = effect ? run.config().effect : run.config().quality;
    if (opt.steps) cfg.steps = *opt.steps;
    cfg.seed = run.seed(effect ? kEffectStream : kQualityStream);
    cfg.validate();
    const int rank = effect ? run.config().effect_rank : run.config().quality_rank;
    const auto mask = mask_override(opt);

    const auto base = run.load_base();
    const std::string checksum = nn::base_checksum(*base);
    const std::string hash = run.dataset_hash("train");
    ExpertModel expert =
        make_expert(base, kind, blocks, rank, run.seed(effect ? kEffectInitStream : kQualityInitStream), mask);
    const json args{{"seed", opt.seed},         {"kind", expert_kind_name(kind)},
                    {"expert", expert.config.to_json()}, {"train", cfg.to_json()},
                    {"base_checksum", checksum}, {"dataset_hash", hash}};
    const std::string key = "train-expert:" + expert_kind_name(kind);
    if (!run.begin(key, args)) return kExitOk;
    const fs::path dir = run.expert_path(kind).parent_path();
    if (!opt.resume) reset_dir(dir);
    const auto data = train_clips(run.load_split("train"));
    const TrainResult r = train_expert(expert, data, cfg, training_hooks(run, dir, key, cfg.steps, hash));
    if (r.interrupted) return interrupted(run, key, r.steps_done);

    save_expert(dir / "adapters.ckpt", expert);
    io::write_text(dir / "loss.csv", loss_csv(cfg.phase, r.losses));
    const json info{{"train", cfg.to_json()}, {"expert", expert.config.to_json()}, {"dataset_hash", hash},
                    {"steps_done", r.steps_done}, {"base_checksum", checksum},
                    {"trainable_parameters", expert.trainable_parameters()}};
    io::write_text(dir / "train.json", info.dump(2) + "\n");
    run.out() << key << ": wrote " << (dir / "adapters.ckpt").string() << " (blocks";
    for (int b : blocks) run.out() << " " << b;
    run.out() << ", " << expert.trainable_parameters() << " trainable parameters)\n";
    const std::string rel = "experts/" + expert_kind_name(kind) + "/adapters.ckpt";
    json outputs{{"checkpoint", rel}, {"file_hash", hash_file(dir / "adapters.ckpt")}};
    if (!r.losses.empty()) outputs["final_loss"] = r.losses.back();
    run.finish(key, args, outputs);
    return kExitOk;
}

// ---- analysis

int cmd_analyze(Run& run) {
    const auto base = run.load_base();
    const std::string checksum = nn::base_checksum(*base);
    const std::string hash = run.dataset_hash("train");
    AnalysisConfig cfg = run.config().analysis;
    cfg.seed = run.seed(kAnalysisStream);
    cfg.jobs = run.opt().jobs;
    const json args{{"seed", run.opt().seed}, {"analysis", cfg.to_json()}, {"clips", run.config().analysis_clips},
                    {"base_checksum", checksum}, {"dataset_hash", hash}};
    if (!run.begin("analyze", args)) return kExitOk;
    const auto clips = run.load_split("train", std::size_t(run.config().analysis_clips));
    if (clips.empty()) throw PrerequisiteError("analyze: the train split has no clips");
    const AnalysisResult r = analyze_model(*base, clips, cfg);

    const fs::path dir = run.dir() / "analysis";
    reset_dir(dir);
    io::write_text(dir / "profile.csv", profile_csv(r.profile));
    io::write_text(dir / "plot_data.csv", plot_data_csv(r));
    const std::vector<int> blocks = effect_blocks_from_profile(r.profile, cfg.smooth);
    json stages = r.partition.to_json();
    stages["effect_blocks"] = blocks;
    stages["profile_defined"] = r.profile.defined();
    if (r.profile.diagnostic) stages["diagnostic"] = *r.profile.diagnostic;
    stages["n_clips"] = r.profile.n_clips;
    stages["n_degenerate"] = r.profile.n_degenerate;
    stages["timesteps"] = r.profile.timesteps;
    io::write_text(dir / "stages.json", stages.dump(2) + "\n");
    for (std::size_t k = 0; k < r.stage_maps.size(); ++k) {
        const ScoreMap& m = r.stage_maps[k];
        std::vector<float> mean(m.shape().frame_pixels(), 0.0f);
        for (int f = 0; f < m.frames(); ++f) {
            const auto frame = m.frame(f);
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += frame[i] / float(m.frames());
        }
        io::write_heatmap(dir / ("stage" + std::to_string(k + 1) + ".png"), mean, m.width(), m.height());
    }
    run.out() << "analyze: " << r.profile.n_clips << " clips (" << r.profile.n_degenerate
              << " without effects), effect blocks";
    for (int b : blocks) run.out() << " " << b;
    run.out() << (r.partition.fallback ? " (equal-thirds fallback)" : "") << "\n";
    run.finish("analyze", args, {{"stages", "analysis/stages.json"}, {"profile", "analysis/profile.csv"},
                                 {"effect_blocks", blocks}});
    return kExitOk;
}

// ---- sampling and evaluation

struct Experts {
    std::shared_ptr<const nn::BackboneParams<float>> base;
    std::optional<ExpertModel> effect, quality;
    json hashes = json::object();
};

std::string recorded_base(const fs::path& path) {
    if (!fs::exists(path)) throw PrerequisiteError("missing expert checkpoint " + path.string() + ": run `train-expert` first");
    const auto ckpt = nn::Checkpoint::load(path);
    if (!ckpt.metadata().contains("base_checksum")) throw LoadError(path.string() + " has no field 'base_checksum'");
    return ckpt.metadata()["base_checksum"].get<std::string>();
}

Experts load_experts(Run& run, bool effect, bool quality) {
    Experts e;
    const fs::path pe = run.expert_path(ExpertKind::Effect), pq = run.expert_path(ExpertKind::Quality);
    if (effect && quality) {
        const std::string he = recorded_base(pe), hq = recorded_base(pq);
        if (he != hq)
            throw ValidationError("experts were trained on different bases: effect " + he + ", quality " + hq);
    }
    e.base = run.load_base();
    if (effect) {
        e.effect = load_expert(pe, e.base);
        e.hashes["effect"] = hash_file(pe);
    }
    if (quality) {
        e.quality = load_expert(pq, e.base);
        e.hashes["quality"] = hash_file(pq);
    }
    return e;
}

SamplerConfig sampler_config(Run& run, double tau) {
    SamplerConfig cfg;
    cfg.n_steps = run.config().sample_steps;
    cfg.tau = tau;
    cfg.eps = run.config().eps;
    cfg.seed = run.seed(kSamplerStream);
    cfg.mask_override = mask_override(run.opt());
    cfg.validate();
    return cfg;
}

std::string eval_split(const Options& opt) { return opt.split == "all" ? "val" : opt.split; }

int cmd_sample(Run& run) {
    const Options& opt = run.opt();
    std::optional<ExpertKind> single;
    if (opt.kind) single = parse_expert_kind(*opt.kind);
    if (single && opt.tau) throw ValidationError("--tau and --kind are exclusive");
    const double tau = opt.tau.value_or(run.config().tau);
    const SamplerConfig cfg = sampler_config(run, tau);
    const Experts ex = load_experts(run, !single || *single == ExpertKind::Effect,
                                    !single || *single == ExpertKind::Quality);
    const std::string split = eval_split(opt);
    const std::string hash = run.dataset_hash(split);
    const std::string label = single ? expert_kind_name(*single) : tau_label(tau);
    json args{{"seed", opt.seed}, {"sampler", cfg.to_json()}, {"experts", ex.hashes}, {"split", split},
              {"dataset_hash", hash}};
    if (single) args["kind"] = expert_kind_name(*single);
    const std::string key = "sample:" + label;
    if (!run.begin(key, args)) return kExitOk;

    const auto clips = run.load_split(split);
    const fs::path dir = run.dir() / "samples" / label;
    reset_dir(dir);
    std::optional<ExpertDenoiser> de, dq;
    if (ex.effect) de.emplace(*ex.effect, cfg.mask_override);
    if (ex.quality) dq.emplace(*ex.quality, cfg.mask_override);
    std::vector<int> monotone(clips.size(), 1);
    parallel_for(clips.size(), opt.jobs, [&](std::size_t i) {
        const SamplerConfig c = clip_sampler_config(cfg, i);
        const auto& clip = clips[i];
        const OmnimatteResult r =
            single ? decompose_single(clip.composite, clip.obj_mask, *single == ExpertKind::Effect ? *de : *dq,
                                      *single, c)
                   : decompose(clip.composite, clip.obj_mask, *de, *dq, c);
        const fs::path cdir = dir / clip_name(i);
        io::write_video(cdir / "foreground", r.layers.foreground, "foreground");
        io::write_matte(cdir / "alpha", r.layers.alpha, "alpha");
        io::write_video(cdir / "background", r.layers.background, "background");
        io::write_text(cdir / "trace.json", r.trace.to_json().dump(2) + "\n");
        monotone[i] = r.trace.monotone();
    });
    const json manifest{{"label", label}, {"count", clips.size()}, {"sampler", cfg.to_json()},
                        {"clip_seeds", "mix_seed(sampler.seed, clip_index)"}};
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    const bool all_monotone = std::all_of(monotone.begin(), monotone.end(), [](int m) { return m != 0; });
    run.out() << key << ": wrote " << clips.size() << " decompositions to " << dir.string() << "\n";
    run.finish(key, args, {{"path", "samples/" + label}, {"count", clips.size()}, {"monotone", all_monotone}});
    return kExitOk;
}

int cmd_eval(Run& run) {
    const Options& opt = run.opt();
    const std::string split = eval_split(opt);
    fs::path layers;
    std::string label;
    if (opt.layers) {
        layers = fs::absolute(*opt.layers).lexically_normal();
        label = layers.filename().string();
        if (label.empty()) label = layers.parent_path().filename().string();
        if (opt.tau || opt.kind) throw ValidationError("--layers excludes --tau and --kind");
    } else {
        if (opt.tau && opt.kind) throw ValidationError("--tau and --kind are exclusive");
        label = opt.kind ? expert_kind_name(parse_expert_kind(*opt.kind)) : tau_label(opt.tau.value_or(run.config().tau));
        layers = run.dir() / "samples" / label;
        if (!run.stage_outputs("sample:" + label))
            throw PrerequisiteError("missing decompositions " + layers.string() + ": run `sample` first");
    }
    if (!fs::is_directory(layers)) throw PrerequisiteError("missing layers directory " + layers.string());
    const std::string hash = run.dataset_hash(split);
    const json args{{"layers", hash_directory(layers)}, {"split", split}, {"dataset_hash", hash}};
    const std::string key = "eval:" + label;
    if (!run.begin(key, args)) return kExitOk;

    const auto clips = run.load_split(split);
    std::vector<ReconRow> rows(clips.size());
    parallel_for(clips.size(), opt.jobs, [&](std::size_t i) {
        const fs::path cdir = layers / clip_name(i);
        if (!fs::is_directory(cdir)) throw PrerequisiteError("missing layers for " + cdir.string());
        LayerDecomposition d{io::read_video(cdir / "foreground"), io::read_matte(cdir / "alpha"),
                             io::read_video(cdir / "background")};
        ReconRow row = eval_reconstruction(d, clips[i].composite, clips[i].motion);
        const ClipScores s = score_alpha(d.alpha, clips[i]);
        row.clip = clip_name(i);
        row.fg_mse = s.fg_mse;
        row.effect_mse = s.effect_mse;
        rows[i] = row;
    });
    const fs::path dir = run.dir() / "eval" / label;
    reset_dir(dir);
    io::write_text(dir / "report.csv", report_csv(rows));

    double psnr_sum = 0.0, fg_sum = 0.0;
    int fg_n = 0;
    for (const auto& r : rows) {
        psnr_sum += r.psnr;
        if (r.fg_mse) fg_sum += *r.fg_mse, ++fg_n;
    }
    json outputs{{"report", "eval/" + label + "/report.csv"}, {"clips", rows.size()}};
    run.out() << key << ": " << rows.size() << " clips";
    if (!rows.empty()) {
        outputs["mean_psnr"] = psnr_sum / double(rows.size());
        run.out() << ", mean PSNR " << psnr_sum / double(rows.size()) << " dB";
    }
    if (fg_n > 0) {
        outputs["mean_object_alpha_mse"] = fg_sum / fg_n;
        run.out() << ", object alpha MSE " << fg_sum / fg_n;
    }
    run.out() << "\n";
    run.finish(key, args, outputs);
    return kExitOk;
}

std::vector<double> parse_taus(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ValidationError("--taus: '" + item + "' is not a number");
        }
        if (!(out.back() >= 0.0 && out.back() <= 1.0)) throw ValidationError("--taus: values must be in [0, 1]");
    }
    if (out.empty()) throw ValidationError("--taus: empty list");
    return out;
}

int cmd_sweep(Run& run) {
    const Options& opt = run.opt();
    const std::vector<double> taus = opt.taus ? parse_taus(*opt.taus) : run.config().sweep_taus;
    const SamplerConfig cfg = sampler_config(run, run.config().tau);
    const Experts ex = load_experts(run, true, true);
    const std::string split = eval_split(opt);
    const std::string hash = run.dataset_hash(split);
    const json args{{"seed", opt.seed}, {"taus", taus}, {"sampler", cfg.to_json()}, {"experts", ex.hashes},
                    {"split", split}, {"dataset_hash", hash}};
    if (!run.begin("sweep-tau", args)) return kExitOk;
    const auto clips = run.load_split(split);
    const ExpertDenoiser de(*ex.effect, cfg.mask_override), dq(*ex.quality, cfg.mask_override);
    const auto points = sweep_tau(de, dq, clips, taus, cfg, opt.jobs);
    const fs::path dir = run.dir() / "sweep";
    reset_dir(dir);
    const std::string csv = tradeoff_csv(points);
    io::write_text(dir / "tradeoff.csv", csv);
    std::string plot = "# effect_mse against fg_mse, one point per tau\nfg_mse,effect_mse,tau\n";
    for (const auto& p : points) {
        std::ostringstream row;
        row << std::setprecision(9) << p.fg_mse << "," << p.effect_mse << "," << p.tau << "\n";
        plot += row.str();
    }
    io::write_text(dir / "plot_data.csv", plot);
    run.out() << "sweep-tau: " << points.size() << " points over " << clips.size() << " clips\n";
    for (const auto& p : points)
        run.out() << "  tau " << p.tau << ": fg_mse " << p.fg_mse << ", effect_mse " << p.effect_mse << "\n";
    run.finish("sweep-tau", args, {{"tradeoff", "sweep/tradeoff.csv"}, {"points", points.size()}});
    return kExitOk;
}

int dispatch(const Options& opt, std::ostream& out) {
    if (opt.jobs < 1) throw ValidationError("--jobs: must be >= 1");
    if (opt.steps && *opt.steps < 0) throw ValidationError("--steps: must be >= 0");
    if (opt.tau && !(*opt.tau >= 0.0 && *opt.tau <= 1.0)) throw ValidationError("--tau: must be in [0, 1]");
    if (opt.mask_override) nn::parse_mask_type(*opt.mask_override);
    Run run(opt, out);
    if (opt.command == "synth") {
        cmd_synth(run);
        return kExitOk;
    }
    if (opt.command == "pretrain") return cmd_pretrain(run);
    if (opt.command == "analyze") return cmd_analyze(run);
    if (opt.command == "train-expert") return cmd_train_expert(run);
    if (opt.command == "sample") return cmd_sample(run);
    if (opt.command == "eval") return cmd_eval(run);
    if (opt.command == "sweep-tau") return cmd_sweep(run);
    throw ValidationError("unknown command " + opt.command);
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
#if defined(__GLIBC__)
    // Training allocates and frees large activations every step; keeping them on the heap
    // instead of fresh mmaps avoids a page-fault storm.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    Options opt;
    CLI::App app{"Layer decomposition of object videos with dual LoRA experts", "omnimatte"};
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", kToolVersion);

    auto common = [&](CLI::App* sub) {
        sub->add_option("--run", opt.run, "run directory")->required();
        sub->add_option("--config", opt.config, "JSON run config (stored as <run>/config.json)");
        sub->add_option("--seed", opt.seed, "base seed; each stage derives its own");
        sub->add_option("--jobs", opt.jobs, "threads for per-clip work");
        sub->add_flag("--force", opt.force, "replace artifacts produced with different arguments");
    };
    auto* synth = app.add_subcommand("synth", "generate the synthetic train/val clips");
    common(synth);
    synth->add_option("--split", opt.split, "train, val or all");
    synth->add_option("--count", opt.count, "number of clips (with --split)");

    auto* pretrain = app.add_subcommand("pretrain", "train the inpainting base");
    auto* expert = app.add_subcommand("train-expert", "train an expert's adapters on the frozen base");
    for (auto* sub : {pretrain, expert}) {
        common(sub);
        sub->add_option("--steps", opt.steps, "override the configured step count");
        sub->add_flag("--resume", opt.resume, "continue from the saved state");
        sub->add_option("--stop-after", opt.stop_after)->group("");
    }
    expert->add_option("--kind", opt.kind, "effect or quality")->required();
    expert->add_option("--effect-blocks", opt.effect_blocks, "auto (from analyze) or a list like 9-12");
    expert->add_option("--mask-override", opt.mask_override, "train under mask a, b or c");

    auto* analyze = app.add_subcommand("analyze", "per-block effect attention profile and stage partition");
    common(analyze);

    auto* sample = app.add_subcommand("sample", "decompose the held-out clips");
    auto* eval = app.add_subcommand("eval", "score decompositions against the held-out clips");
    auto* sweep = app.add_subcommand("sweep-tau", "alpha error in object and effect regions against tau");
    for (auto* sub : {sample, eval, sweep}) {
        common(sub);
        sub->add_option("--split", opt.split, "clips to use (default val)");
    }
    for (auto* sub : {sample, eval}) {
        sub->add_option("--tau", opt.tau, "switch time between experts");
        sub->add_option("--kind", opt.kind, "single-expert run: effect or quality");
    }
    for (auto* sub : {sample, sweep}) sub->add_option("--mask-override", opt.mask_override, "inference mask a, b or c");
    eval->add_option("--layers", opt.layers, "directory of clip_NNNN layer folders");
    sweep->add_option("--taus", opt.taus, "comma-separated list of tau values");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    for (auto* sub : app.get_subcommands()) opt.command = sub->get_name();

    try {
        return dispatch(opt, out);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const PrerequisiteError& e) {
        err << "error: " << e.what() << "\n";
        return kExitPrerequisite;
    } catch (const LoadError& e) {
        err << "error: " << e.what() << "\n";
        return kExitPrerequisite;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

} // namespace omni::cli
