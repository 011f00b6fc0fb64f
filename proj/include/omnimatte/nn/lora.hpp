#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "omnimatte/rng.hpp"

namespace omni::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// y = x W^T + b, one token per row of x.
template <class T>
struct Linear {
    Mat<T> w; // out x in
    Mat<T> b; // 1 x out

    int in_dim() const { return int(w.cols()); }
    int out_dim() const { return int(w.rows()); }
};

enum class Projection { Q = 0, K = 1, V = 2, O = 3 };
inline constexpr std::array<Projection, 4> kProjections{Projection::Q, Projection::K, Projection::V,
                                                       Projection::O};
std::string projection_name(Projection p);

// Low-rank update h = W0 x + up (down x); multiplier fixed at 1.
template <class T>
struct LoraAdapter {
    Mat<T> down; // r x D
    Mat<T> up;   // D x r

    int rank() const { return int(down.rows()); }
};

template <class T>
struct BlockAdapters {
    std::array<std::optional<LoraAdapter<T>>, 4> proj;

    const LoraAdapter<T>* get(Projection p) const {
        const auto& a = proj[std::size_t(p)];
        return a ? &*a : nullptr;
    }
    LoraAdapter<T>* get(Projection p) {
        auto& a = proj[std::size_t(p)];
        return a ? &*a : nullptr;
    }
};

// One optional entry per backbone block (index 0 is block 1).
template <class T>
using AdapterSet = std::vector<std::optional<BlockAdapters<T>>>;

// base(x) + (x down^T) up^T. Rejects mismatched dimensions.
template <class T>
Mat<T> lora_forward(const Linear<T>& base, const LoraAdapter<T>* adapter, const Mat<T>& x);

// down ~ N(0, 1/D), up = 0, so the initial delta is exactly zero.
LoraAdapter<float> init_lora(int rank, int dim, Rng& rng);

template <class T>
AdapterSet<T> zeros_like(const AdapterSet<T>& adapters);

template <class U, class T>
AdapterSet<U> cast_adapters(const AdapterSet<T>& adapters);

} // namespace omni::nn
