#include "omnimatte/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "omnimatte/image_io.hpp"
#include "omnimatte/media.hpp"

namespace omni {

using nlohmann::json;

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

double draw(Rng& rng, const Range& r) { return rng.uniform(r.lo, r.hi); }

void check_range(const std::string& field, const Range& r, double lo, double hi) {
    if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) {
        throw ValidationError(field + ": expected a range within [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "], got [" + std::to_string(r.lo) + ", " +
                              std::to_string(r.hi) + "]");
    }
}

Range range_from_json(const json& j, const std::string& field) {
    if (j.is_number()) return {j.get<double>(), j.get<double>()};
    if (j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number())
        return {j[0].get<double>(), j[1].get<double>()};
    throw ValidationError(field + ": expected a number or a [lo, hi] pair");
}

json range_to_json(const Range& r) { return json::array({r.lo, r.hi}); }

int int_from_json(const json& j, const std::string& field) {
    if (!j.is_number_integer()) throw ValidationError(field + ": expected an integer");
    return j.get<int>();
}

float sample_bilinear(const float* plane, int w, int h, int stride, double x, double y) {
    const int x0 = int(std::floor(x));
    const int y0 = int(std::floor(y));
    const double fx = x - x0;
    const double fy = y - y0;
    auto px = [&](int xx, int yy) -> double {
        if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
        return plane[(std::size_t(yy) * w + xx) * stride];
    };
    const double top = px(x0, y0) * (1 - fx) + px(x0 + 1, y0) * fx;
    const double bot = px(x0, y0 + 1) * (1 - fx) + px(x0 + 1, y0 + 1) * fx;
    return float(top * (1 - fy) + bot * fy);
}

} // namespace

void GeneratorConfig::validate() const {
    if (frames < 1 || height < 1 || width < 1)
        throw ValidationError("generator.frames/height/width: must be positive");
    check_range("generator.tx_magnitude", tx_magnitude, 0.15, 0.30);
    check_range("generator.ty", ty, -0.25, 0.25);
    check_range("generator.rotation_deg", rotation_deg, -5.0, 5.0);
    check_range("generator.scale", scale, 0.95, 1.05);
    check_range("generator.shear_deg", shear_deg, -3.0, 3.0);
    check_range("generator.padding", padding, 0.3, 0.5);
    check_range("generator.pad_split", pad_split, 0.0, 1.0);
    check_range("generator.shadow.v_compress", v_compress, 0.10, 0.30);
    check_range("generator.shadow.h_shear_deg", h_shear_deg, 30.0, 60.0);
    check_range("generator.shadow.opacity", opacity, 0.30, 0.70);
    if (blur_radius < 1) throw ValidationError("generator.shadow.blur_radius: expected an integer >= 1");
    if (object_margin < 0) throw ValidationError("generator.shadow.object_margin: expected an integer >= 0");
    check_range("generator.sprite_width", sprite_width, 0.05, 0.8);
    check_range("generator.sprite_height", sprite_height, 0.05, 0.8);
}

json GeneratorConfig::to_json() const {
    json j;
    j["frames"] = frames;
    j["height"] = height;
    j["width"] = width;
    j["tx_magnitude"] = range_to_json(tx_magnitude);
    j["ty"] = range_to_json(ty);
    j["rotation_deg"] = range_to_json(rotation_deg);
    j["scale"] = range_to_json(scale);
    j["shear_deg"] = range_to_json(shear_deg);
    j["padding"] = range_to_json(padding);
    j["pad_split"] = range_to_json(pad_split);
    j["sprite_width"] = range_to_json(sprite_width);
    j["sprite_height"] = range_to_json(sprite_height);
    j["shadow"] = {{"enabled", shadow_enabled},
                   {"v_compress", range_to_json(v_compress)},
                   {"h_shear_deg", range_to_json(h_shear_deg)},
                   {"opacity", range_to_json(opacity)},
                   {"blur_radius", blur_radius},
                   {"object_margin", object_margin}};
    return j;
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
    GeneratorConfig c;
    if (!j.is_object()) throw ValidationError("generator: expected an object");
    for (const auto& [key, value] : j.items()) {
        const std::string field = "generator." + key;
        if (key == "frames") c.frames = int_from_json(value, field);
        else if (key == "height") c.height = int_from_json(value, field);
        else if (key == "width") c.width = int_from_json(value, field);
        else if (key == "tx_magnitude") c.tx_magnitude = range_from_json(value, field);
        else if (key == "ty") c.ty = range_from_json(value, field);
        else if (key == "rotation_deg") c.rotation_deg = range_from_json(value, field);
        else if (key == "scale") c.scale = range_from_json(value, field);
        else if (key == "shear_deg") c.shear_deg = range_from_json(value, field);
        else if (key == "padding") c.padding = range_from_json(value, field);
        else if (key == "pad_split") c.pad_split = range_from_json(value, field);
        else if (key == "sprite_width") c.sprite_width = range_from_json(value, field);
        else if (key == "sprite_height") c.sprite_height = range_from_json(value, field);
        else if (key == "shadow") {
            if (!value.is_object()) throw ValidationError(field + ": expected an object");
            for (const auto& [sk, sv] : value.items()) {
                const std::string sfield = field + "." + sk;
                if (sk == "enabled") {
                    if (!sv.is_boolean()) throw ValidationError(sfield + ": expected a boolean");
                    c.shadow_enabled = sv.get<bool>();
                } else if (sk == "v_compress") c.v_compress = range_from_json(sv, sfield);
                else if (sk == "h_shear_deg") c.h_shear_deg = range_from_json(sv, sfield);
                else if (sk == "opacity") c.opacity = range_from_json(sv, sfield);
                else if (sk == "blur_radius") c.blur_radius = int_from_json(sv, sfield);
                else if (sk == "object_margin") c.object_margin = int_from_json(sv, sfield);
                else throw ValidationError(sfield + ": unknown field");
            }
        } else {
            throw ValidationError(field + ": unknown field");
        }
    }
    c.validate();
    return c;
}

std::pair<AffineState, AffineState> sample_affine_pair(Rng& rng, const GeneratorConfig& cfg) {
    const double sign = rng.coin() ? 1.0 : -1.0;
    AffineState a, b;
    a.tx = sign * draw(rng, cfg.tx_magnitude);
    b.tx = -sign * draw(rng, cfg.tx_magnitude);
    for (AffineState* s : {&a, &b}) {
        s->ty = draw(rng, cfg.ty);
        s->rotation_deg = draw(rng, cfg.rotation_deg);
        s->scale = draw(rng, cfg.scale);
        s->shear_deg = draw(rng, cfg.shear_deg);
    }
    return {a, b};
}

AffineState ease_interpolate(const AffineState& a, const AffineState& b, double u) {
    if (!(u >= 0.0 && u <= 1.0)) throw ValidationError("ease_interpolate: u must lie in [0, 1]");
    const double s = u * u * (3.0 - 2.0 * u);
    auto mix = [s](double x, double y) { return (1.0 - s) * x + s * y; };
    return {mix(a.tx, b.tx), mix(a.ty, b.ty), mix(a.rotation_deg, b.rotation_deg), mix(a.scale, b.scale),
            mix(a.shear_deg, b.shear_deg)};
}

std::array<double, 4> affine_linear(const AffineState& s) {
    const double c = std::cos(s.rotation_deg * kDegToRad);
    const double n = std::sin(s.rotation_deg * kDegToRad);
    const double k = std::tan(s.shear_deg * kDegToRad);
    // R * Sh * S with Sh = [[1, k], [0, 1]].
    return {s.scale * c, s.scale * (c * k - n), s.scale * n, s.scale * (n * k + c)};
}

namespace {

std::array<double, 4> invert2(const std::array<double, 4>& m) {
    const double det = m[0] * m[3] - m[1] * m[2];
    return {m[3] / det, -m[1] / det, -m[2] / det, m[0] / det};
}

// Position in the untransformed source for a pixel of a frame posed by `s`.
std::array<double, 2> to_source(const AffineState& s, double x, double y, const Shape& shape) {
    const double cx = (shape.width - 1) * 0.5, cy = (shape.height - 1) * 0.5;
    const auto inv = invert2(affine_linear(s));
    const double dx = x - cx - s.tx * shape.width;
    const double dy = y - cy - s.ty * shape.height;
    return {cx + inv[0] * dx + inv[1] * dy, cy + inv[2] * dx + inv[3] * dy};
}

std::array<double, 2> from_source(const AffineState& s, double x, double y, const Shape& shape) {
    const double cx = (shape.width - 1) * 0.5, cy = (shape.height - 1) * 0.5;
    const auto m = affine_linear(s);
    const double dx = x - cx, dy = y - cy;
    return {cx + m[0] * dx + m[1] * dy + s.tx * shape.width, cy + m[2] * dx + m[3] * dy + s.ty * shape.height};
}

} // namespace

std::array<double, 2> map_between_frames(const AffineState& from, const AffineState& to, double x,
                                         double y, const Shape& shape) {
    const auto src = to_source(from, x, y, shape);
    return from_source(to, src[0], src[1], shape);
}

AlphaMatte box_blur(const AlphaMatte& matte, int radius) {
    if (radius < 0) throw ValidationError("box_blur: radius must be >= 0");
    if (radius == 0) return matte;
    const Shape s = matte.shape();
    const float norm = 1.0f / float(2 * radius + 1);
    AlphaMatte tmp(s), out(s);
    for (int f = 0; f < s.frames; ++f) {
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                float acc = 0.0f;
                for (int d = -radius; d <= radius; ++d) {
                    const int xx = x + d;
                    if (xx >= 0 && xx < s.width) acc += matte.at(f, y, xx);
                }
                tmp.at(f, y, x) = acc * norm;
            }
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                float acc = 0.0f;
                for (int d = -radius; d <= radius; ++d) {
                    const int yy = y + d;
                    if (yy >= 0 && yy < s.height) acc += tmp.at(f, yy, x);
                }
                out.at(f, y, x) = acc * norm;
            }
    }
    return out;
}

AlphaMatte synth_shadow(const AlphaMatte& alpha, const ShadowParams& params, std::span<const int> anchor_rows) {
    const Shape s = alpha.shape();
    if (!anchor_rows.empty() && int(anchor_rows.size()) != s.frames)
        throw ValidationError("synth_shadow: one anchor row per frame is required");
    if (!(params.v_compress > 0.0)) throw ValidationError("synth_shadow: v_compress must be > 0");
    AlphaMatte out(s);
    const double shear = std::tan(params.h_shear_deg * kDegToRad);
    for (int f = 0; f < s.frames; ++f) {
        int top = -1, bottom = -1;
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                if (alpha.at(f, y, x) > 0.0f) {
                    if (top < 0) top = y;
                    bottom = y;
                }
        if (top < 0) continue;
        const int h = bottom - top + 1;
        const int hc = std::max(1, int(std::lround(params.v_compress * h)));
        const int anchor = anchor_rows.empty() ? bottom : anchor_rows[f];
        for (int k = 0; k < hc; ++k) {
            const int y_out = anchor + 1 + k;
            if (y_out < 0 || y_out >= s.height) continue;
            const int y_src = bottom - int(std::floor((k + 0.5) / hc * h));
            const int shift = int(std::lround(shear * (k + 1)));
            for (int x = 0; x < s.width; ++x) {
                const int x_out = x + shift;
                if (x_out < 0 || x_out >= s.width) continue;
                out.at(f, y_out, x_out) = float(alpha.at(f, y_src, x) * params.opacity);
            }
        }
    }
    return box_blur(out, params.blur_radius);
}

ShadowParams sample_shadow_params(Rng& rng, const GeneratorConfig& cfg) {
    ShadowParams p;
    p.v_compress = draw(rng, cfg.v_compress);
    p.h_shear_deg = draw(rng, cfg.h_shear_deg);
    p.opacity = draw(rng, cfg.opacity);
    p.blur_radius = cfg.blur_radius;
    return p;
}

std::pair<Video, AlphaMatte> make_sprite(Rng& rng, const GeneratorConfig& cfg) {
    const Shape s = cfg.shape();
    Video color(s);
    AlphaMatte alpha(s);
    const double w = draw(rng, cfg.sprite_width) * s.width;
    const double h = draw(rng, cfg.sprite_height) * s.height;
    const double cx = (s.width - 1) * 0.5;
    const double cy = (s.height - 1) * 0.42;
    const int kind = rng.uniform_int(0, 2);
    std::array<double, 3> c0{}, c1{};
    for (int c = 0; c < 3; ++c) {
        c0[c] = rng.uniform(0.05, 0.95);
        c1[c] = rng.uniform(0.05, 0.95);
    }
    const double stripe_angle = rng.uniform(0.0, std::numbers::pi);
    const double stripe_freq = rng.uniform(0.5, 1.5);

    auto signed_distance = [&](double dx, double dy) {
        switch (kind) {
        case 0: { // rounded box
            const double r = 1.5;
            const double qx = std::abs(dx) - (w * 0.5 - r);
            const double qy = std::abs(dy) - (h * 0.5 - r);
            const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
            return std::hypot(ox, oy) + std::min(std::max(qx, qy), 0.0) - r;
        }
        case 1: { // ellipse
            const double k = std::hypot(dx / (w * 0.5), dy / (h * 0.5));
            return (k - 1.0) * std::min(w, h) * 0.5;
        }
        default: { // vertical capsule
            const double half = std::max(0.0, h * 0.5 - w * 0.5);
            return std::hypot(dx, std::max(std::abs(dy) - half, 0.0)) - w * 0.5;
        }
        }
    };

    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const double dx = x - cx, dy = y - cy;
            const float a = float(std::clamp(0.5 - signed_distance(dx, dy), 0.0, 1.0));
            const double g = std::clamp((dy + h * 0.5) / h, 0.0, 1.0);
            const double stripe =
                0.1 * std::sin(stripe_freq * (dx * std::cos(stripe_angle) + dy * std::sin(stripe_angle)));
            for (int f = 0; f < s.frames; ++f) {
                alpha.at(f, y, x) = a;
                for (int c = 0; c < 3; ++c)
                    color.at(f, y, x, c) = float(std::clamp((1 - g) * c0[c] + g * c1[c] + stripe, 0.0, 1.0));
            }
        }
    }
    return {std::move(color), std::move(alpha)};
}

Video make_background(Rng& rng, const GeneratorConfig& cfg) {
    const Shape s = cfg.shape();
    Video bg(s);
    std::array<double, 3> c0{}, c1{};
    for (int c = 0; c < 3; ++c) {
        c0[c] = rng.uniform(0.35, 0.95);
        c1[c] = rng.uniform(0.35, 0.95);
    }
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double stripe_angle = rng.uniform(0.0, std::numbers::pi);
    const double stripe_freq = rng.uniform(0.3, 1.2);
    const double stripe_amp = rng.uniform(0.02, 0.08);
    const double cx = (s.width - 1) * 0.5, cy = (s.height - 1) * 0.5;
    const double radius = std::max(s.width, s.height) * 0.5;
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double g = std::clamp(0.5 + 0.5 * (dx * std::cos(angle) + dy * std::sin(angle)) / radius, 0.0, 1.0);
            const double stripe =
                stripe_amp * std::sin(stripe_freq * (dx * std::cos(stripe_angle) + dy * std::sin(stripe_angle)));
            std::array<double, 3> noise{};
            for (auto& n : noise) n = 0.02 * rng.normal();
            for (int f = 0; f < s.frames; ++f)
                for (int c = 0; c < 3; ++c)
                    bg.at(f, y, x, c) = float(std::clamp((1 - g) * c0[c] + g * c1[c] + stripe + noise[c], 0.0, 1.0));
        }
    }
    return bg;
}

TrainingSample render_clip(const Video& fg, const AlphaMatte& fg_alpha, const Video& bg, Rng& rng,
                           const GeneratorConfig& cfg) {
    const Shape s = cfg.shape();
    if (fg.shape() != s || fg_alpha.shape() != s)
        throw ValidationError("render_clip: foreground must match the target shape " + s.str());
    if (bg.frames() != s.frames || bg.height() < s.height || bg.width() < s.width)
        throw ValidationError("render_clip: background " + bg.shape().str() +
                              " is smaller than the required canvas " + s.str());

    // Asymmetric padding of the foreground canvas.
    const double pad_x = std::round(draw(rng, cfg.padding) * s.width);
    const double pad_y = std::round(draw(rng, cfg.padding) * s.width);
    const double left = std::round(draw(rng, cfg.pad_split) * pad_x);
    const double top = std::round(draw(rng, cfg.pad_split) * pad_y);
    const double off_x = left - pad_x * 0.5;
    const double off_y = top - pad_y * 0.5;

    const auto [state_a, state_b] = sample_affine_pair(rng, cfg);
    const ShadowParams shadow_params = sample_shadow_params(rng, cfg);

    TrainingSample out;
    out.shadow_params = shadow_params;
    out.has_shadow = cfg.shadow_enabled;

    AlphaMatte obj_alpha(s);
    Video obj_color(s);
    for (int f = 0; f < s.frames; ++f) {
        const AffineState st = ease_interpolate(state_a, state_b, (f + 0.5) / s.frames);
        out.motion.push_back(st);
        const float* a_plane = &fg_alpha.at(f, 0, 0);
        std::vector<float> premul(s.frame_pixels() * 3);
        for (std::size_t p = 0; p < s.frame_pixels(); ++p)
            for (int c = 0; c < 3; ++c) premul[p * 3 + c] = a_plane[p] * fg.frame(f)[p * 3 + c];
        for (int y = 0; y < s.height; ++y) {
            for (int x = 0; x < s.width; ++x) {
                const auto src = to_source(st, x, y, s);
                const double sx = src[0] - off_x, sy = src[1] - off_y;
                const float a = std::clamp(sample_bilinear(a_plane, s.width, s.height, 1, sx, sy), 0.0f, 1.0f);
                obj_alpha.at(f, y, x) = a;
                for (int c = 0; c < 3; ++c) {
                    const float pc = sample_bilinear(premul.data() + c, s.width, s.height, 3, sx, sy);
                    obj_color.at(f, y, x, c) = a > 1e-6f ? std::clamp(pc / a, 0.0f, 1.0f) : 0.0f;
                }
            }
        }
    }
    io::quantize_in_place(obj_alpha);
    out.obj_mask = BinaryMask(s);
    for (std::size_t i = 0; i < obj_alpha.size(); ++i) out.obj_mask.data()[i] = obj_alpha.data()[i] >= 0.5f;

    out.shadow_matte = AlphaMatte(s);
    if (cfg.shadow_enabled) {
        AlphaMatte raw = synth_shadow(obj_alpha, shadow_params);
        const BinaryMask keep_out = dilate(out.obj_mask, cfg.object_margin);
        for (std::size_t i = 0; i < raw.size(); ++i)
            out.shadow_matte.data()[i] = keep_out.data()[i] ? 0.0f : raw.data()[i];
        io::quantize_in_place(out.shadow_matte);
    }

    out.background = Video(s);
    const int by = (bg.height() - s.height) / 2, bx = (bg.width() - s.width) / 2;
    for (int f = 0; f < s.frames; ++f)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < 3; ++c) out.background.at(f, y, x, c) = bg.at(f, y + by, x + bx, c);
    io::quantize_in_place(out.background);

    // Shadow darkens the background (B * (1 - s)) and the object is composited on top, so
    // alpha_full = a + (1 - a) s and the layer colour is a * F / alpha_full.
    out.alpha_full = AlphaMatte(s);
    out.foreground = Video(s);
    for (std::size_t p = 0; p < s.pixels(); ++p) {
        const float a = obj_alpha.data()[p];
        const float sh = out.shadow_matte.data()[p];
        const float full = io::dequantize(io::quantize(a + (1.0f - a) * sh));
        out.alpha_full.data()[p] = full;
        for (int c = 0; c < 3; ++c)
            out.foreground.data()[p * 3 + c] =
                full > 0.0f ? std::clamp(a * obj_color.data()[p * 3 + c] / full, 0.0f, 1.0f) : 0.0f;
    }
    io::quantize_in_place(out.foreground);
    out.composite = compose(out.foreground, out.alpha_full, out.background);
    io::quantize_in_place(out.composite);
    return out;
}

TrainingSample generate_sample(std::uint64_t seed, const GeneratorConfig& cfg) {
    cfg.validate();
    Rng rng(seed, 0);
    auto [color, alpha] = make_sprite(rng, cfg);
    const Video bg = make_background(rng, cfg);
    TrainingSample s = render_clip(color, alpha, bg, rng, cfg);
    s.seed = seed;
    return s;
}

json affine_to_json(const AffineState& s) {
    return {{"tx", s.tx}, {"ty", s.ty}, {"rotation_deg", s.rotation_deg}, {"scale", s.scale}, {"shear_deg", s.shear_deg}};
}

namespace {

const json& require_field(const json& j, const std::string& key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw LoadError(where + " is missing field '" + key + "'");
    return j.at(key);
}

double require_number(const json& j, const std::string& key, const std::string& where) {
    const json& v = require_field(j, key, where);
    if (!v.is_number()) throw LoadError(where + " field '" + key + "' is not a number");
    return v.get<double>();
}

} // namespace

AffineState affine_from_json(const json& j) {
    const std::string where = "motion entry";
    return {require_number(j, "tx", where), require_number(j, "ty", where),
            require_number(j, "rotation_deg", where), require_number(j, "scale", where),
            require_number(j, "shear_deg", where)};
}

void write_sample(const TrainingSample& sample, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_video(dir / "composite", sample.composite, "composite");
    io::write_video(dir / "background", sample.background, "background");
    io::write_video(dir / "foreground", sample.foreground, "foreground");
    io::write_matte(dir / "alpha", sample.alpha_full, "alpha");
    io::write_mask(dir / "obj_mask", sample.obj_mask, "obj_mask");
    io::write_matte(dir / "shadow", sample.shadow_matte, "shadow");
    json meta;
    meta["generator_version"] = kGeneratorVersion;
    meta["seed"] = sample.seed;
    meta["n_frames"] = sample.shape().frames;
    meta["height"] = sample.shape().height;
    meta["width"] = sample.shape().width;
    meta["has_shadow"] = sample.has_shadow;
    meta["shadow_params"] = {{"v_compress", sample.shadow_params.v_compress},
                             {"h_shear_deg", sample.shadow_params.h_shear_deg},
                             {"opacity", sample.shadow_params.opacity},
                             {"blur_radius", sample.shadow_params.blur_radius}};
    json motion = json::array();
    for (const auto& m : sample.motion) motion.push_back(affine_to_json(m));
    meta["motion"] = motion;
    io::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

TrainingSample read_sample(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    if (!std::filesystem::exists(meta_path)) throw LoadError("missing sample manifest " + meta_path.string());
    json meta;
    try {
        meta = json::parse(io::read_text(meta_path));
    } catch (const json::exception& e) {
        throw LoadError("corrupt sample manifest " + meta_path.string() + ": " + e.what());
    }
    const std::string where = meta_path.string();
    TrainingSample s;
    const json& seed = require_field(meta, "seed", where);
    if (!seed.is_number_unsigned() && !seed.is_number_integer())
        throw LoadError(where + " field 'seed' is not an integer");
    s.seed = seed.get<std::uint64_t>();
    require_field(meta, "generator_version", where);
    const json& has_shadow = require_field(meta, "has_shadow", where);
    s.has_shadow = has_shadow.is_boolean() && has_shadow.get<bool>();
    const json& sp = require_field(meta, "shadow_params", where);
    s.shadow_params.v_compress = require_number(sp, "v_compress", where + " shadow_params");
    s.shadow_params.h_shear_deg = require_number(sp, "h_shear_deg", where + " shadow_params");
    s.shadow_params.opacity = require_number(sp, "opacity", where + " shadow_params");
    s.shadow_params.blur_radius = int(require_number(sp, "blur_radius", where + " shadow_params"));
    const json& motion = require_field(meta, "motion", where);
    if (!motion.is_array()) throw LoadError(where + " field 'motion' is not an array");
    for (const auto& m : motion) s.motion.push_back(affine_from_json(m));

    s.composite = io::read_video(dir / "composite");
    s.background = io::read_video(dir / "background");
    s.foreground = io::read_video(dir / "foreground");
    s.alpha_full = io::read_matte(dir / "alpha");
    s.obj_mask = io::read_mask(dir / "obj_mask");
    s.shadow_matte = io::read_matte(dir / "shadow");
    const Shape shape = s.composite.shape();
    for (const Shape& other : {s.background.shape(), s.foreground.shape(), s.alpha_full.shape(),
                               s.obj_mask.shape(), s.shadow_matte.shape()})
        if (other != shape) throw LoadError(dir.string() + ": layer shapes disagree");
    if (int(s.motion.size()) != shape.frames)
        throw LoadError(where + ": motion has " + std::to_string(s.motion.size()) + " entries for " +
                        std::to_string(shape.frames) + " frames");
    return s;
}

} // namespace omni
