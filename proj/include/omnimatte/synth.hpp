#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "omnimatte/grid.hpp"
#include "omnimatte/rng.hpp"

namespace omni {

inline constexpr int kGeneratorVersion = 1;

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    bool operator==(const Range&) const = default;
};

// Foreground pose: translation as a fraction of width/height, angles in degrees.
struct AffineState {
    double tx = 0.0;
    double ty = 0.0;
    double rotation_deg = 0.0;
    double scale = 1.0;
    double shear_deg = 0.0;
    bool operator==(const AffineState&) const = default;
};

struct ShadowParams {
    double v_compress = 0.2;
    double h_shear_deg = 45.0;
    double opacity = 0.5;
    int blur_radius = 2;
    bool operator==(const ShadowParams&) const = default;
};

// Every sampled quantity has an explicit range. Ranges must stay inside the bounds
// checked by validate(); a collapsed range [x, x] pins the value.
struct GeneratorConfig {
    int frames = 8;
    int height = 32;
    int width = 32;

    Range tx_magnitude{0.15, 0.30};
    Range ty{-0.05, 0.05};
    Range rotation_deg{-5.0, 5.0};
    Range scale{0.95, 1.05};
    Range shear_deg{-3.0, 3.0};
    Range padding{0.3, 0.5};     // total canvas padding, fraction of target width
    Range pad_split{0.35, 0.65}; // share of the padding placed before the content

    bool shadow_enabled = true;
    Range v_compress{0.10, 0.30};
    Range h_shear_deg{30.0, 60.0};
    Range opacity{0.30, 0.70};
    int blur_radius = 2;
    int object_margin = 1; // dilation radius keeping the shadow matte off the object

    Range sprite_width{0.22, 0.34};  // fraction of W
    Range sprite_height{0.34, 0.50}; // fraction of H

    Shape shape() const { return {frames, height, width}; }
    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j);
    bool operator==(const GeneratorConfig&) const = default;
};

struct TrainingSample {
    Video composite;
    Video background; // clean background (the inpainting target)
    Video foreground; // omnimatte foreground colour layer (object, shadow pixels are black)
    AlphaMatte alpha_full; // object alpha combined with the shadow matte
    BinaryMask obj_mask;
    AlphaMatte shadow_matte;
    std::vector<AffineState> motion;
    ShadowParams shadow_params;
    bool has_shadow = false;
    std::uint64_t seed = 0;

    Shape shape() const { return composite.shape(); }
};

std::pair<AffineState, AffineState> sample_affine_pair(Rng& rng, const GeneratorConfig& cfg = {});

// Fieldwise smoothstep blend, s(u) = 3u^2 - 2u^3.
AffineState ease_interpolate(const AffineState& a, const AffineState& b, double u);

// 2x2 linear part (rotation * shear * scale), row-major.
std::array<double, 4> affine_linear(const AffineState& s);

// Maps a pixel of frame `from` to its position in frame `to` for content that follows
// the recorded foreground motion. Transforms pivot about the frame centre.
std::array<double, 2> map_between_frames(const AffineState& from, const AffineState& to, double x,
                                         double y, const Shape& shape);

// Pseudo-shadow: per frame, the alpha support is compressed vertically to v_compress of
// its height and laid below the anchor row (default: bottom row of the bounding box),
// sheared horizontally, scaled by opacity and box blurred.
AlphaMatte synth_shadow(const AlphaMatte& alpha, const ShadowParams& params,
                        std::span<const int> anchor_rows = {});

// Normalized separable box filter with zero padding.
AlphaMatte box_blur(const AlphaMatte& matte, int radius);

ShadowParams sample_shadow_params(Rng& rng, const GeneratorConfig& cfg);

// Procedural soft-edged sprite (rounded box, ellipse or capsule) centred in the frame.
std::pair<Video, AlphaMatte> make_sprite(Rng& rng, const GeneratorConfig& cfg);
Video make_background(Rng& rng, const GeneratorConfig& cfg);

TrainingSample render_clip(const Video& fg, const AlphaMatte& fg_alpha, const Video& bg, Rng& rng,
                           const GeneratorConfig& cfg);

TrainingSample generate_sample(std::uint64_t seed, const GeneratorConfig& cfg);

void write_sample(const TrainingSample& sample, const std::filesystem::path& dir);
TrainingSample read_sample(const std::filesystem::path& dir);

nlohmann::json affine_to_json(const AffineState& s);
AffineState affine_from_json(const nlohmann::json& j);

} // namespace omni
