#pragma once

#include "omnimatte/grid.hpp"

namespace omni {

inline constexpr float kDefaultRecoverEps = 1e-4f;
inline constexpr float kDefaultBinarizeThreshold = 0.1f;

// (F, alpha, B) with V = alpha * F + (1 - alpha) * B.
struct LayerDecomposition {
    Video foreground;
    AlphaMatte alpha;
    Video background;
};

// ceil(2% of max(H, W)); the default margin separating an object from its effects.
int default_dilation_radius(const Shape& shape);

Video compose(const Video& fg, const AlphaMatte& alpha, const Video& bg);

// F = clip(I - (1 - alpha) * B) / (alpha + eps), numerator clamped to [0,1] and the
// quotient clamped again so the layer stays a valid video.
Video recover_foreground(const Video& frame, const AlphaMatte& alpha, const Video& bg,
                         float eps = kDefaultRecoverEps);

// pixel = 1 iff alpha >= thresh, thresh in (0, 1).
BinaryMask binarize(const AlphaMatte& alpha, float thresh);

// Per-frame dilation with a (2r+1) x (2r+1) square.
BinaryMask dilate(const BinaryMask& mask, int radius);

// binarize(alpha) AND NOT dilate(obj_mask).
BinaryMask extract_effect_mask(const AlphaMatte& alpha, const BinaryMask& obj_mask, float thresh,
                               int radius);

// Throws ValidationError if any value is non-finite or outside [0, 1].
template <typename G>
void validate_unit_range(const G& grid, const char* what);

std::size_t count_set(const BinaryMask& mask);

} // namespace omni
