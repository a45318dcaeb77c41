#pragma once

#include <vector>

#include "imf/rng.hpp"
#include "imf/tensor.hpp"

namespace imf {

// All operations record their backward closure on the thread's GradTape when
// grad mode is on and any input requires grad. Inputs are 4D [N,C,H,W] where
// spatial layout matters, 2D [N,K] elsewhere.

template <class T>
struct RunningStats {
    std::vector<T> mean;
    std::vector<T> var;

    explicit RunningStats(std::size_t channels = 0)
        : mean(channels, T(0)), var(channels, T(1)) {}
};

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// scale * x + shift with plain scalars.
template <class T> Tensor<T> affine(const Tensor<T>& x, T scale, T shift);
template <class T> Tensor<T> scalar_mul(const Tensor<T>& x, T scale);

template <class T> Tensor<T> sum(const Tensor<T>& x);

// x:[N,D] weight:[Dout,D] bias:[Dout] -> [N,Dout]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// x:[N,C,H,W] weight:[Cout,C,k,k] bias:[Cout]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

// Padded cells act as -inf; ties resolve to the first position in row-major
// scan so gradients are routed deterministically.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int padding);

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      RunningStats<T>& stats, bool training, T momentum = T(0.1),
                      T eps = T(1e-5));

template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);

// Row-wise softmax over [N,K].
template <class T> Tensor<T> softmax_rows(const Tensor<T>& x);

// Training mode keeps units with probability 1-p and scales them by 1/(1-p);
// eval mode is the identity.
template <class T> Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng);

// [N,C,H,W] -> [N,C]
template <class T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// Concatenate along axis 1; both 2D and 4D supported.
template <class T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// y[n,c,h,w] = x[n,c,h,w] * s[n];  s:[N,1] or [N]
template <class T> Tensor<T> scale_per_sample(const Tensor<T>& x, const Tensor<T>& s);

// y[n,c,h,w] = x[n,c,h,w] * g[n,c];  g:[N,C]
template <class T> Tensor<T> scale_per_channel(const Tensor<T>& x, const Tensor<T>& g);

// y[n,k] = x[n,k] * w[k] with a constant (non-differentiated) row vector.
template <class T> Tensor<T> mul_rowvec(const Tensor<T>& x, const std::vector<T>& w);

// [N,K] -> [N,1]
template <class T> Tensor<T> sum_rows(const Tensor<T>& x);

// Mean over the batch of -log softmax(logits)[label].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

// Mean over the batch of -log(probs[label]); for losses taken on already
// averaged probability outputs.
template <class T>
Tensor<T> nll_probs(const Tensor<T>& probs, const std::vector<int>& labels);

// Mean squared error of x:[N] or [N,1] against plain targets.
template <class T>
Tensor<T> mse_scalar_targets(const Tensor<T>& x, const std::vector<T>& targets);

inline int conv_out_extent(int in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

}  // namespace imf
