#include "omnimatte/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace omni::io {

using nlohmann::json;

void write_png(const fs::path& path, const Image8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw ValidationError("write_png: only gray or RGB images are supported");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = png_uint_32(image.width);
    img.height = png_uint_32(image.height);
    img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
        throw Error("write_png: cannot write " + path.string() + ": " + img.message);
}

Image8 read_png(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("missing frame file " + path.string());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw LoadError("cannot read " + path.string() + ": " + img.message);
    Image8 out;
    out.width = int(img.width);
    out.height = int(img.height);
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    out.channels = gray ? 1 : 3;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr))
        throw LoadError("cannot decode " + path.string() + ": " + img.message);
    return out;
}

std::uint8_t quantize(float v) {
    const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
    return std::uint8_t(std::lround(c * 255.0f));
}

std::string frame_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d.png", index);
    return buf;
}

namespace {

void write_manifest(const fs::path& dir, const Shape& s, const std::string& role) {
    json m;
    m["n_frames"] = s.frames;
    m["height"] = s.height;
    m["width"] = s.width;
    m["role"] = role;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Shape read_manifest(const fs::path& dir) {
    const fs::path p = dir / "manifest.json";
    if (!fs::exists(p)) throw LoadError("missing manifest " + p.string());
    json m;
    try {
        m = json::parse(read_text(p));
    } catch (const json::exception& e) {
        throw LoadError("corrupt manifest " + p.string() + ": " + e.what());
    }
    Shape s;
    for (const char* key : {"n_frames", "height", "width"}) {
        if (!m.contains(key) || !m[key].is_number_integer())
            throw LoadError("manifest " + p.string() + " is missing field '" + key + "'");
    }
    s.frames = m["n_frames"].get<int>();
    s.height = m["height"].get<int>();
    s.width = m["width"].get<int>();
    if (s.frames < 1 || s.height < 1 || s.width < 1)
        throw LoadError("manifest " + p.string() + " has non-positive dimensions");
    return s;
}

template <typename G, typename ToByte>
void write_frames(const fs::path& dir, const G& grid, const std::string& role, ToByte to_byte) {
    fs::create_directories(dir);
    const Shape s = grid.shape();
    constexpr int C = G::kChannels;
    for (int f = 0; f < s.frames; ++f) {
        Image8 img{s.width, s.height, C, {}};
        auto fr = grid.frame(f);
        img.pixels.resize(fr.size());
        for (std::size_t i = 0; i < fr.size(); ++i) img.pixels[i] = to_byte(fr[i]);
        write_png(dir / frame_name(f), img);
    }
    write_manifest(dir, s, role);
}

template <typename G, typename FromByte>
G read_frames(const fs::path& dir, FromByte from_byte) {
    const Shape s = read_manifest(dir);
    constexpr int C = G::kChannels;
    G grid(s);
    for (int f = 0; f < s.frames; ++f) {
        const Image8 img = read_png(dir / frame_name(f));
        if (img.width != s.width || img.height != s.height || img.channels != C)
            throw LoadError("frame " + (dir / frame_name(f)).string() + " does not match manifest");
        auto fr = grid.frame(f);
        for (std::size_t i = 0; i < fr.size(); ++i) fr[i] = from_byte(img.pixels[i]);
    }
    return grid;
}

} // namespace

void write_video(const fs::path& dir, const Video& video, const std::string& role) {
    write_frames(dir, video, role, [](float v) { return quantize(v); });
}

void write_matte(const fs::path& dir, const AlphaMatte& matte, const std::string& role) {
    write_frames(dir, matte, role, [](float v) { return quantize(v); });
}

void write_mask(const fs::path& dir, const BinaryMask& mask, const std::string& role) {
    write_frames(dir, mask, role, [](std::uint8_t v) { return std::uint8_t(v ? 255 : 0); });
}

Video read_video(const fs::path& dir) {
    return read_frames<Video>(dir, [](std::uint8_t b) { return dequantize(b); });
}

AlphaMatte read_matte(const fs::path& dir) {
    return read_frames<AlphaMatte>(dir, [](std::uint8_t b) { return dequantize(b); });
}

BinaryMask read_mask(const fs::path& dir) {
    return read_frames<BinaryMask>(dir, [](std::uint8_t b) { return std::uint8_t(b >= 128 ? 1 : 0); });
}

void write_heatmap(const fs::path& path, const std::vector<float>& values, int width, int height) {
    float peak = 0.0f;
    for (float v : values) peak = std::max(peak, v);
    Image8 img{width, height, 1, std::vector<std::uint8_t>(values.size())};
    for (std::size_t i = 0; i < values.size(); ++i)
        img.pixels[i] = peak > 0.0f ? quantize(values[i] / peak) : 0;
    write_png(path, img);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace omni::io
