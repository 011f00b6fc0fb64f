#pragma once

#include <optional>
#include <string>
#include <vector>

#include "omnimatte/media.hpp"
#include "omnimatte/sampler.hpp"
#include "omnimatte/synth.hpp"

namespace omni {

inline constexpr double kPsnrCap = 99.0;

double mse(const Video& a, const Video& b);
// 10 log10(1 / mse), peak 1, capped at 99 dB.
double psnr(const Video& a, const Video& b);
double psnr_from_mse(double mse);

// Gaussian window 11x11, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, valid positions only,
// averaged over channels and frames. Frames smaller than the window use the largest odd
// window that fits, with a notice.
double ssim(const Video& a, const Video& b);

// Mean squared residual between frame f+1 and frame f warped by the recorded motion,
// over pixels whose source lies inside the frame, averaged over consecutive pairs.
// With `moving_layer`, pixels where it is below 0.5 in frame f+1 use the identity flow
// (the synthetic background is static).
double warping_error(const Video& video, const std::vector<AffineState>& motion,
                     const AlphaMatte* moving_layer = nullptr);

// Mean of (pred - gt)^2 over the region; nullopt when the region is empty.
std::optional<double> region_mse(const AlphaMatte& pred, const AlphaMatte& gt, const BinaryMask& region);

struct ReconRow {
    std::string clip;
    double psnr = 0.0;
    double ssim = 0.0;
    double warping_error = 0.0;
    std::optional<double> fg_mse, effect_mse; // alpha error, when ground truth is known
};

// Recomposes the layers and scores them against the original clip. The recomposition is
// rounded to 8 bits first, as it would be when stored, unless `quantize` is false.
ReconRow eval_reconstruction(const LayerDecomposition& decomp, const Video& original,
                             const std::vector<AffineState>& motion, bool quantize = true);

std::string report_csv(const std::vector<ReconRow>& rows);

// Foreground region: object mask dilated by the default radius. Effect region: shadow support.
BinaryMask foreground_region(const TrainingSample& s);
BinaryMask effect_region(const TrainingSample& s);

struct TradeoffPoint {
    double tau = 0.0;
    double fg_mse = 0.0;
    double effect_mse = 0.0;
    int fg_clips = 0;     // clips with a non-empty foreground region
    int effect_clips = 0; // clips with a non-empty effect region
};

struct ClipScores {
    std::optional<double> fg_mse, effect_mse;
};

ClipScores score_alpha(const AlphaMatte& pred, const TrainingSample& truth);
TradeoffPoint average_scores(double tau, const std::vector<ClipScores>& scores);

// Clip i is sampled with seed mix_seed(cfg.seed, i), as the sample command does.
SamplerConfig clip_sampler_config(const SamplerConfig& cfg, std::size_t clip_index);

std::vector<TradeoffPoint> sweep_tau(const Denoiser& effect, const Denoiser& quality,
                                     const std::vector<TrainingSample>& clips, const std::vector<double>& taus,
                                     const SamplerConfig& cfg, int jobs = 1);
// Single-expert evaluation reported as a point at tau 0 (effect) or 1 (quality).
TradeoffPoint evaluate_single(const Denoiser& expert, ExpertKind kind, const std::vector<TrainingSample>& clips,
                              const SamplerConfig& cfg, int jobs = 1);

std::string tradeoff_csv(const std::vector<TradeoffPoint>& points);

} // namespace omni
