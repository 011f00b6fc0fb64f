#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omnimatte/error.hpp"

namespace omni {

struct Shape {
    int frames = 0;
    int height = 0;
    int width = 0;

    std::size_t pixels() const { return std::size_t(frames) * height * width; }
    std::size_t frame_pixels() const { return std::size_t(height) * width; }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return std::to_string(frames) + "x" + std::to_string(height) + "x" + std::to_string(width);
    }
};

// Frame-indexed pixel grid with C interleaved channels, addressed (frame, y, x, c).
// The tag distinguishes domain types that share a layout (a Video is not a Latent).
template <typename T, int C, typename Tag>
class Grid {
public:
    using value_type = T;
    static constexpr int kChannels = C;

    Grid() = default;

    explicit Grid(Shape shape, T fill = T{}) : shape_(checked(shape)), data_(shape.pixels() * C, fill) {}

    Grid(Shape shape, std::vector<T> data) : shape_(checked(shape)), data_(std::move(data)) {
        if (data_.size() != shape_.pixels() * C)
            throw ValidationError("grid data size does not match shape " + shape_.str());
    }

    const Shape& shape() const { return shape_; }
    int frames() const { return shape_.frames; }
    int height() const { return shape_.height; }
    int width() const { return shape_.width; }
    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }

    std::size_t index(int f, int y, int x, int c = 0) const {
        return ((std::size_t(f) * shape_.height + y) * shape_.width + x) * C + c;
    }
    T& at(int f, int y, int x, int c = 0) { return data_[index(f, y, x, c)]; }
    const T& at(int f, int y, int x, int c = 0) const { return data_[index(f, y, x, c)]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    std::span<T> frame(int f) {
        return std::span<T>(data_).subspan(std::size_t(f) * shape_.frame_pixels() * C,
                                           shape_.frame_pixels() * C);
    }
    std::span<const T> frame(int f) const {
        return std::span<const T>(data_).subspan(std::size_t(f) * shape_.frame_pixels() * C,
                                                 shape_.frame_pixels() * C);
    }

    bool operator==(const Grid&) const = default;

private:
    static Shape checked(Shape s) {
        if (s.frames < 1 || s.height < 1 || s.width < 1)
            throw ValidationError("grid dimensions must be positive, got " + s.str());
        return s;
    }

    Shape shape_;
    std::vector<T> data_;
};

struct VideoTag {};
struct MatteTag {};
struct MaskTag {};
struct LatentTag {};
struct ScoreTag {};

using Video = Grid<float, 3, VideoTag>;
using AlphaMatte = Grid<float, 1, MatteTag>;
using BinaryMask = Grid<std::uint8_t, 1, MaskTag>;
// Three-channel network-space grid (values in roughly [-1, 1] plus noise).
using Latent = Grid<float, 3, LatentTag>;
// Per-pixel analysis scores.
using ScoreMap = Grid<float, 1, ScoreTag>;

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (a.shape() != b.shape())
        throw ValidationError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                              b.shape().str());
}

} // namespace omni
