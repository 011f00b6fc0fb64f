#include "omnimatte/media.hpp"

#include <algorithm>
#include <cmath>

namespace omni {

int default_dilation_radius(const Shape& shape) {
    return int(std::ceil(0.02 * std::max(shape.height, shape.width)));
}

Video compose(const Video& fg, const AlphaMatte& alpha, const Video& bg) {
    require_same_shape(fg, bg, "compose");
    require_same_shape(fg, alpha, "compose");
    Video out(fg.shape());
    auto a = alpha.data();
    auto f = fg.data();
    auto b = bg.data();
    auto o = out.data();
    for (std::size_t p = 0; p < a.size(); ++p) {
        const float ap = a[p];
        for (int c = 0; c < 3; ++c) {
            const std::size_t i = p * 3 + c;
            o[i] = std::clamp(ap * f[i] + (1.0f - ap) * b[i], 0.0f, 1.0f);
        }
    }
    return out;
}

Video recover_foreground(const Video& frame, const AlphaMatte& alpha, const Video& bg, float eps) {
    if (!(eps > 0.0f)) throw ValidationError("recover_foreground: eps must be > 0");
    require_same_shape(frame, bg, "recover_foreground");
    require_same_shape(frame, alpha, "recover_foreground");
    Video out(frame.shape());
    auto a = alpha.data();
    auto v = frame.data();
    auto b = bg.data();
    auto o = out.data();
    for (std::size_t p = 0; p < a.size(); ++p) {
        const float ap = a[p];
        for (int c = 0; c < 3; ++c) {
            const std::size_t i = p * 3 + c;
            const float num = std::clamp(v[i] - (1.0f - ap) * b[i], 0.0f, 1.0f);
            o[i] = std::clamp(num / (ap + eps), 0.0f, 1.0f);
        }
    }
    return out;
}

BinaryMask binarize(const AlphaMatte& alpha, float thresh) {
    if (!(thresh > 0.0f && thresh < 1.0f))
        throw ValidationError("binarize: threshold must lie in (0, 1)");
    BinaryMask out(alpha.shape());
    auto a = alpha.data();
    auto o = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) o[i] = a[i] >= thresh ? 1 : 0;
    return out;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
    if (radius < 0) throw ValidationError("dilate: radius must be >= 0");
    if (radius == 0) return mask;
    const Shape s = mask.shape();
    BinaryMask rows(s);
    BinaryMask out(s);
    // Separable max filter: horizontal pass, then vertical.
    for (int f = 0; f < s.frames; ++f) {
        for (int y = 0; y < s.height; ++y) {
            for (int x = 0; x < s.width; ++x) {
                std::uint8_t v = 0;
                const int x0 = std::max(0, x - radius), x1 = std::min(s.width - 1, x + radius);
                for (int xx = x0; xx <= x1 && !v; ++xx) v = mask.at(f, y, xx);
                rows.at(f, y, x) = v;
            }
        }
        for (int y = 0; y < s.height; ++y) {
            const int y0 = std::max(0, y - radius), y1 = std::min(s.height - 1, y + radius);
            for (int x = 0; x < s.width; ++x) {
                std::uint8_t v = 0;
                for (int yy = y0; yy <= y1 && !v; ++yy) v = rows.at(f, yy, x);
                out.at(f, y, x) = v;
            }
        }
    }
    return out;
}

BinaryMask extract_effect_mask(const AlphaMatte& alpha, const BinaryMask& obj_mask, float thresh,
                               int radius) {
    require_same_shape(alpha, obj_mask, "extract_effect_mask");
    BinaryMask support = binarize(alpha, thresh);
    const BinaryMask grown = dilate(obj_mask, radius);
    auto o = support.data();
    auto g = grown.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (o[i] && !g[i]) ? 1 : 0;
    return support;
}

template <typename G>
void validate_unit_range(const G& grid, const char* what) {
    for (float v : grid.data()) {
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
            throw ValidationError(std::string(what) + ": values must be finite and within [0, 1]");
    }
}

template void validate_unit_range<Video>(const Video&, const char*);
template void validate_unit_range<AlphaMatte>(const AlphaMatte&, const char*);

std::size_t count_set(const BinaryMask& mask) {
    std::size_t n = 0;
    for (auto v : mask.data()) n += v ? 1 : 0;
    return n;
}

} // namespace omni
