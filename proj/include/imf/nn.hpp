#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "imf/ops.hpp"
#include "imf/rng.hpp"
#include "imf/tensor.hpp"

namespace imf {

template <class T>
struct TensorEntry {
    std::string name;
    Tensor<T> tensor;
};

template <class T>
struct BufferEntry {
    std::string name;
    std::vector<T>* data;
};

// Kaiming-uniform fan-in init; biases start at zero, BN at identity.
template <class T>
inline Tensor<T> kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i)
        t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <class T>
struct Conv2d {
    Tensor<T> weight;
    Tensor<T> bias;
    int stride = 1;
    int padding = 0;

    Conv2d() = default;
    Conv2d(std::size_t in_ch, std::size_t out_ch, int k, int stride_, int padding_, Rng& rng)
        : stride(stride_), padding(padding_) {
        const std::size_t ks = static_cast<std::size_t>(k);
        weight = kaiming_uniform<T>({out_ch, in_ch, ks, ks}, in_ch * ks * ks, rng);
        bias = Tensor<T>::zeros({out_ch}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    void collect(const std::string& prefix, std::vector<TensorEntry<T>>& params,
                 std::vector<BufferEntry<T>>&) {
        params.push_back({prefix + ".weight", weight});
        params.push_back({prefix + ".bias", bias});
    }
};

template <class T>
struct BatchNorm2d {
    Tensor<T> gamma;
    Tensor<T> beta;
    RunningStats<T> stats;

    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t channels)
        : gamma(Tensor<T>::full({channels}, T(1), true)),
          beta(Tensor<T>::zeros({channels}, true)),
          stats(channels) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return batchnorm2d(x, gamma, beta, stats, training);
    }

    void collect(const std::string& prefix, std::vector<TensorEntry<T>>& params,
                 std::vector<BufferEntry<T>>& buffers) {
        params.push_back({prefix + ".gamma", gamma});
        params.push_back({prefix + ".beta", beta});
        buffers.push_back({prefix + ".running_mean", &stats.mean});
        buffers.push_back({prefix + ".running_var", &stats.var});
    }
};

template <class T>
struct Linear {
    Tensor<T> weight;
    Tensor<T> bias;

    Linear() = default;
    Linear(std::size_t in_dim, std::size_t out_dim, Rng& rng)
        : weight(kaiming_uniform<T>({out_dim, in_dim}, in_dim, rng)),
          bias(Tensor<T>::zeros({out_dim}, true)) {}

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }

    void collect(const std::string& prefix, std::vector<TensorEntry<T>>& params,
                 std::vector<BufferEntry<T>>&) {
        params.push_back({prefix + ".weight", weight});
        params.push_back({prefix + ".bias", bias});
    }
};

// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> +skip -> ReLU, channel count kept.
template <class T>
struct BasicBlock {
    Conv2d<T> conv1, conv2;
    BatchNorm2d<T> bn1, bn2;

    BasicBlock() = default;
    BasicBlock(std::size_t channels, Rng& rng)
        : conv1(channels, channels, 3, 1, 1, rng),
          conv2(channels, channels, 3, 1, 1, rng),
          bn1(channels),
          bn2(channels) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        Tensor<T> h = relu(bn1.forward(conv1.forward(x), training));
        h = bn2.forward(conv2.forward(h), training);
        return relu(add(h, x));
    }

    void collect(const std::string& prefix, std::vector<TensorEntry<T>>& params,
                 std::vector<BufferEntry<T>>& buffers) {
        conv1.collect(prefix + ".conv1", params, buffers);
        bn1.collect(prefix + ".bn1", params, buffers);
        conv2.collect(prefix + ".conv2", params, buffers);
        bn2.collect(prefix + ".bn2", params, buffers);
    }
};

// conv(k7,s3,p3) -> BN -> ReLU -> maxpool(k3,s3,p1); the shared stem layout of
// every feature extractor in the network.
template <class T>
struct ExtractorStem {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;

    ExtractorStem() = default;
    ExtractorStem(std::size_t in_ch, std::size_t width, Rng& rng)
        : conv(in_ch, width, 7, 3, 3, rng), bn(width) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return maxpool2d(relu(bn.forward(conv.forward(x), training)), 3, 3, 1);
    }

    void collect(const std::string& prefix, std::vector<TensorEntry<T>>& params,
                 std::vector<BufferEntry<T>>& buffers) {
        conv.collect(prefix + ".conv", params, buffers);
        bn.collect(prefix + ".bn", params, buffers);
    }
};

}  // namespace imf
