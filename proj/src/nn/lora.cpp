#include "omnimatte/nn/lora.hpp"

#include <cmath>

#include "omnimatte/error.hpp"

namespace omni::nn {

std::string projection_name(Projection p) {
    switch (p) {
    case Projection::Q: return "q";
    case Projection::K: return "k";
    case Projection::V: return "v";
    case Projection::O: return "o";
    }
    return "?";
}

template <class T>
Mat<T> lora_forward(const Linear<T>& base, const LoraAdapter<T>* adapter, const Mat<T>& x) {
    if (x.cols() != base.w.cols()) throw ValidationError("lora_forward: input width does not match the layer");
    Mat<T> y = x * base.w.transpose();
    y.rowwise() += base.b.row(0);
    if (adapter) {
        if (adapter->down.cols() != base.w.cols() || adapter->up.rows() != base.w.rows() ||
            adapter->up.cols() != adapter->down.rows())
            throw ValidationError("lora_forward: adapter shape does not match the layer");
        y.noalias() += (x * adapter->down.transpose()) * adapter->up.transpose();
    }
    return y;
}

LoraAdapter<float> init_lora(int rank, int dim, Rng& rng) {
    if (rank < 1 || rank > dim) throw ValidationError("lora rank must lie in [1, D]");
    LoraAdapter<float> a;
    a.down.resize(rank, dim);
    const double sd = 1.0 / std::sqrt(double(dim));
    for (Eigen::Index i = 0; i < a.down.size(); ++i) a.down.data()[i] = float(rng.normal() * sd);
    a.up = Mat<float>::Zero(dim, rank);
    return a;
}

template <class T>
AdapterSet<T> zeros_like(const AdapterSet<T>& adapters) {
    AdapterSet<T> out = adapters;
    for (auto& blk : out)
        if (blk)
            for (auto& a : blk->proj)
                if (a) {
                    a->down.setZero();
                    a->up.setZero();
                }
    return out;
}

template <class U, class T>
AdapterSet<U> cast_adapters(const AdapterSet<T>& adapters) {
    AdapterSet<U> out(adapters.size());
    for (std::size_t b = 0; b < adapters.size(); ++b) {
        if (!adapters[b]) continue;
        BlockAdapters<U> blk;
        for (std::size_t p = 0; p < 4; ++p)
            if (adapters[b]->proj[p])
                blk.proj[p] = LoraAdapter<U>{adapters[b]->proj[p]->down.template cast<U>(),
                                             adapters[b]->proj[p]->up.template cast<U>()};
        out[b] = std::move(blk);
    }
    return out;
}

template Mat<float> lora_forward<float>(const Linear<float>&, const LoraAdapter<float>*, const Mat<float>&);
template Mat<double> lora_forward<double>(const Linear<double>&, const LoraAdapter<double>*, const Mat<double>&);
template AdapterSet<float> zeros_like<float>(const AdapterSet<float>&);
template AdapterSet<double> zeros_like<double>(const AdapterSet<double>&);
template AdapterSet<double> cast_adapters<double, float>(const AdapterSet<float>&);
template AdapterSet<float> cast_adapters<float, double>(const AdapterSet<double>&);
template AdapterSet<float> cast_adapters<float, float>(const AdapterSet<float>&);

} // namespace omni::nn
