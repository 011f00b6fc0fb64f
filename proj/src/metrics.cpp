#include "omnimatte/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "omnimatte/error.hpp"
#include "omnimatte/image_io.hpp"
#include "omnimatte/log.hpp"
#include "omnimatte/parallel.hpp"

namespace omni {

double mse(const Video& a, const Video& b) {
    require_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.data()[i]) - b.data()[i];
        s += d * d;
    }
    return s / double(a.size());
}

double psnr_from_mse(double m) {
    if (!(m > 0.0)) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double psnr(const Video& a, const Video& b) { return psnr_from_mse(mse(a, b)); }

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) sum += w[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    for (double& v : w) v /= sum;
    return w;
}

// Valid separable filtering of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k) {
    const int n = int(k.size());
    const int oh = h - n + 1, ow = w - n + 1;
    std::vector<double> tmp(std::size_t(h) * ow), out(std::size_t(oh) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * img[std::size_t(y) * w + x + i];
            tmp[std::size_t(y) * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * tmp[std::size_t(y + i) * ow + x];
            out[std::size_t(y) * ow + x] = s;
        }
    return out;
}

} // namespace

double ssim(const Video& a, const Video& b) {
    require_same_shape(a, b, "ssim");
    const Shape s = a.shape();
    int win = 11;
    const int fit = std::min(s.height, s.width);
    if (fit < win) {
        win = fit % 2 ? fit : fit - 1;
        log_notice("ssim: " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                   " frames are smaller than the 11x11 window; using " + std::to_string(win) + "x" + std::to_string(win));
    }
    const auto k = gaussian_window(win, 1.5);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const std::size_t plane = s.frame_pixels();
    double total = 0.0;
    for (int f = 0; f < s.frames; ++f)
        for (int c = 0; c < 3; ++c) {
            std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
            for (std::size_t p = 0; p < plane; ++p) {
                x[p] = a.frame(f)[p * 3 + c];
                y[p] = b.frame(f)[p * 3 + c];
                xx[p] = x[p] * x[p];
                yy[p] = y[p] * y[p];
                xy[p] = x[p] * y[p];
            }
            const auto mx = filter_valid(x, s.height, s.width, k), my = filter_valid(y, s.height, s.width, k);
            const auto sxx = filter_valid(xx, s.height, s.width, k), syy = filter_valid(yy, s.height, s.width, k);
            const auto sxy = filter_valid(xy, s.height, s.width, k);
            double acc = 0.0;
            for (std::size_t i = 0; i < mx.size(); ++i) {
                const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
                acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
                       ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            }
            total += acc / double(mx.size());
        }
    return total / (3.0 * s.frames);
}

double warping_error(const Video& video, const std::vector<AffineState>& motion, const AlphaMatte* moving_layer) {
    const Shape s = video.shape();
    if (int(motion.size()) != s.frames)
        throw ValidationError("warping_error: motion metadata has " + std::to_string(motion.size()) +
                              " entries for " + std::to_string(s.frames) + " frames");
    if (moving_layer) require_same_shape(video, *moving_layer, "warping_error");
    if (s.frames < 2) return 0.0;
    double total = 0.0;
    for (int f = 0; f + 1 < s.frames; ++f) {
        double sum = 0.0;
        std::size_t count = 0;
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                double sx = x, sy = y;
                if (!moving_layer || moving_layer->at(f + 1, y, x) >= 0.5f) {
                    const auto src = map_between_frames(motion[f + 1], motion[f], x, y, s);
                    sx = src[0];
                    sy = src[1];
                }
                if (sx < 0.0 || sy < 0.0 || sx > s.width - 1 || sy > s.height - 1) continue;
                const int x0 = std::min(int(sx), s.width - 1), y0 = std::min(int(sy), s.height - 1);
                const int x1 = std::min(x0 + 1, s.width - 1), y1 = std::min(y0 + 1, s.height - 1);
                const double fx = sx - x0, fy = sy - y0;
                for (int c = 0; c < 3; ++c) {
                    const double v = (1 - fy) * ((1 - fx) * video.at(f, y0, x0, c) + fx * video.at(f, y0, x1, c)) +
                                     fy * ((1 - fx) * video.at(f, y1, x0, c) + fx * video.at(f, y1, x1, c));
                    const double d = v - video.at(f + 1, y, x, c);
                    sum += d * d;
                }
                count += 3;
            }
        total += count ? sum / double(count) : 0.0;
    }
    return total / (s.frames - 1);
}

std::optional<double> region_mse(const AlphaMatte& pred, const AlphaMatte& gt, const BinaryMask& region) {
    require_same_shape(pred, gt, "region_mse");
    require_same_shape(pred, region, "region_mse");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (region.data()[i]) {
            const double d = double(pred.data()[i]) - gt.data()[i];
            s += d * d;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / double(n);
}

ReconRow eval_reconstruction(const LayerDecomposition& decomp, const Video& original,
                             const std::vector<AffineState>& motion, bool quantize) {
    Video recomposed = compose(decomp.foreground, decomp.alpha, decomp.background);
    if (quantize) io::quantize_in_place(recomposed);
    require_same_shape(recomposed, original, "eval_reconstruction");
    ReconRow row;
    row.psnr = psnr(recomposed, original);
    row.ssim = ssim(recomposed, original);
    row.warping_error = warping_error(recomposed, motion, &decomp.alpha);
    return row;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace

std::string report_csv(const std::vector<ReconRow>& rows) {
    std::string out =
        "# clip: clip id; psnr: dB against the input (capped at 99); ssim: mean SSIM; we: warping error (mean squared "
        "residual); "
        "fg_mse/effect_mse: alpha MSE in the dilated object region / shadow support, or 'undefined'\n";
    out += "clip,psnr,ssim,we,fg_mse,effect_mse\n";
    auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("undefined"); };
    double p = 0, s = 0, w = 0;
    for (const auto& r : rows) {
        out += r.clip + "," + fmt(r.psnr) + "," + fmt(r.ssim) + "," + fmt(r.warping_error) + "," + opt(r.fg_mse) + "," +
               opt(r.effect_mse) + "\n";
        p += r.psnr;
        s += r.ssim;
        w += r.warping_error;
    }
    if (!rows.empty()) {
        const double n = double(rows.size());
        std::vector<ClipScores> scores;
        for (const auto& r : rows) scores.push_back({r.fg_mse, r.effect_mse});
        const TradeoffPoint m = average_scores(0.0, scores);
        out += "mean," + fmt(p / n) + "," + fmt(s / n) + "," + fmt(w / n) + "," +
               (m.fg_clips ? fmt(m.fg_mse) : std::string("undefined")) + "," +
               (m.effect_clips ? fmt(m.effect_mse) : std::string("undefined")) + "\n";
    }
    return out;
}

BinaryMask foreground_region(const TrainingSample& s) { return dilate(s.obj_mask, default_dilation_radius(s.shape())); }

BinaryMask effect_region(const TrainingSample& s) {
    BinaryMask m(s.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = s.shadow_matte.data()[i] > 0.0f;
    return m;
}

ClipScores score_alpha(const AlphaMatte& pred, const TrainingSample& truth) {
    return {region_mse(pred, truth.alpha_full, foreground_region(truth)),
            region_mse(pred, truth.alpha_full, effect_region(truth))};
}

TradeoffPoint average_scores(double tau, const std::vector<ClipScores>& scores) {
    TradeoffPoint p;
    p.tau = tau;
    for (const auto& s : scores) {
        if (s.fg_mse) p.fg_mse += *s.fg_mse, ++p.fg_clips;
        if (s.effect_mse) p.effect_mse += *s.effect_mse, ++p.effect_clips;
    }
    if (p.fg_clips) p.fg_mse /= p.fg_clips;
    if (p.effect_clips) p.effect_mse /= p.effect_clips;
    return p;
}

SamplerConfig clip_sampler_config(const SamplerConfig& cfg, std::size_t clip_index) {
    SamplerConfig c = cfg;
    c.seed = mix_seed(cfg.seed, clip_index);
    return c;
}

std::vector<TradeoffPoint> sweep_tau(const Denoiser& effect, const Denoiser& quality,
                                     const std::vector<TrainingSample>& clips, const std::vector<double>& taus,
                                     const SamplerConfig& cfg, int jobs) {
    std::vector<TradeoffPoint> out;
    for (double tau : taus) {
        SamplerConfig c = cfg;
        c.tau = tau;
        c.validate();
        std::vector<ClipScores> scores(clips.size());
        parallel_for(clips.size(), jobs, [&](std::size_t i) {
            const auto r = decompose(clips[i].composite, clips[i].obj_mask, effect, quality, clip_sampler_config(c, i));
            scores[i] = score_alpha(r.layers.alpha, clips[i]);
        });
        out.push_back(average_scores(tau, scores));
    }
    return out;
}

TradeoffPoint evaluate_single(const Denoiser& expert, ExpertKind kind, const std::vector<TrainingSample>& clips,
                              const SamplerConfig& cfg, int jobs) {
    std::vector<ClipScores> scores(clips.size());
    parallel_for(clips.size(), jobs, [&](std::size_t i) {
        const SampleResult r = sample_single(expert, kind, nn::encode_video(clips[i].composite), clips[i].obj_mask,
                                             clip_sampler_config(cfg, i));
        scores[i] = score_alpha(decode_alpha(r.matte), clips[i]);
    });
    return average_scores(kind == ExpertKind::Effect ? 0.0 : 1.0, scores);
}

std::string tradeoff_csv(const std::vector<TradeoffPoint>& points) {
    std::string out =
        "# tau: switch time; fg_mse: alpha MSE in the dilated object region; effect_mse: alpha MSE in the shadow "
        "support; fg_clips/effect_clips: clips with a non-empty region\n";
    out += "tau,fg_mse,effect_mse,fg_clips,effect_clips\n";
    for (const auto& p : points)
        out += fmt(p.tau) + "," + fmt(p.fg_mse) + "," + fmt(p.effect_mse) + "," + std::to_string(p.fg_clips) + "," +
               std::to_string(p.effect_clips) + "\n";
    return out;
}

} // namespace omni
