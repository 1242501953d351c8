#pragma once

#include <cstddef>
#include <vector>

#include "eend/numerics/tensor.hpp"

// Differentiable primitives. Every op validates its inputs (defined,
// non-empty, finite) and throws DimensionError / NumericError otherwise.
//
// Broadcasting in add/sub/mul is limited to three forms for `b`:
//   - same shape as `a`;
//   - a trailing suffix of `a`'s shape (leading batch dims), incl. one element;
//   - `a`'s leading dims followed by singleton dims (trailing singletons).
namespace eend::num {

inline constexpr double kNormEps = 1e-8;

// Caps the BLAS worker pool; one thread keeps reductions reproducible.
void set_blas_threads(int threads);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);

// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);

// x / max(rms(x), eps) * gain over the last axis; gain has the last-axis size.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(kNormEps));

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

// x / max(||x||_2, eps) over the last axis.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(kNormEps));

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

struct Conv2dSpec {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

// x: [N, C, H, W], weight: [O, C, KH, KW], bias: [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dSpec& spec);

// Per-channel convolution along time with same padding.
// x: [T, C], weight: [C, K] with K odd, bias: [C] or undefined.
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> index_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows);

}  // namespace eend::num
