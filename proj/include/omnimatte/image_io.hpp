#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "omnimatte/grid.hpp"

namespace omni::io {

namespace fs = std::filesystem;

struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 0; // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;
};

void write_png(const fs::path& path, const Image8& image);
Image8 read_png(const fs::path& path);

std::uint8_t quantize(float v);
inline float dequantize(std::uint8_t v) { return float(v) / 255.0f; }

// Rounds every value to the nearest k/255 so a PNG round trip is exact.
template <typename G>
void quantize_in_place(G& grid) {
    for (auto& v : grid.data()) v = dequantize(quantize(v));
}

// Frame directories: <dir>/%04d.png plus <dir>/manifest.json {n_frames, height, width, role}.
void write_video(const fs::path& dir, const Video& video, const std::string& role);
void write_matte(const fs::path& dir, const AlphaMatte& matte, const std::string& role);
void write_mask(const fs::path& dir, const BinaryMask& mask, const std::string& role);

Video read_video(const fs::path& dir);
AlphaMatte read_matte(const fs::path& dir);
BinaryMask read_mask(const fs::path& dir);

// Grayscale heatmap PNG, values normalized to the map's maximum.
void write_heatmap(const fs::path& path, const std::vector<float>& values, int width, int height);

std::string frame_name(int index);

std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

} // namespace omni::io
