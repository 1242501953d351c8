#include "eend/model/layers.hpp"

#include <cmath>

#include "eend/error.hpp"
#include "eend/numerics/ops.hpp"

namespace eend::model {

using namespace eend::num;

template <typename T>
Tensor<T> Builder<T>::weight(const std::string& name, Shape shape, double stddev) const {
  return store.add(prefix + "." + name, normal_init<T>(std::move(shape), stddev, rng));
}

template <typename T>
Tensor<T> Builder<T>::constant(const std::string& name, Shape shape, T value) const {
  return store.add(prefix + "." + name, Tensor<T>::full(std::move(shape), value));
}

template <typename T>
Linear<T>::Linear(const Builder<T>& b, std::size_t in, std::size_t out, bool with_bias,
                  double init_scale) {
  weight = b.weight("weight", {in, out}, init_scale / std::sqrt(static_cast<double>(in)));
  if (with_bias) bias = b.constant("bias", {out}, T(0));
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

template <typename T>
LayerNorm<T>::LayerNorm(const Builder<T>& b, std::size_t dim) {
  gain = b.constant("gain", {dim}, T(1));
  bias = b.constant("bias", {dim}, T(0));
}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
  return layer_norm(x, gain, bias);
}

template <typename T>
FeedForward<T>::FeedForward(const Builder<T>& b, std::size_t dim, std::size_t expansion)
    : norm_(b.child("norm"), dim),
      up_(b.child("up"), dim, dim * expansion),
      down_(b.child("down"), dim * expansion, dim) {}

template <typename T>
Tensor<T> FeedForward<T>::operator()(const Tensor<T>& x) const {
  return down_(silu(up_(norm_(x))));
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(const Builder<T>& b, std::size_t dim, std::size_t heads)
    : q_proj(b.child("q"), dim, dim, false),
      k_proj(b.child("k"), dim, dim, false),
      v_proj(b.child("v"), dim, dim, false),
      out_proj(b.child("out"), dim, dim, false),
      heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& queries,
                                            const Tensor<T>& memory) const {
  const Tensor<T> q = q_proj(queries);
  const Tensor<T> k = k_proj(memory);
  const Tensor<T> v = v_proj(memory);
  const std::size_t dim = q.dim(1);
  const std::size_t dh = dim / heads_;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> parts;
  parts.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor<T> qh = slice_cols(q, h * dh, dh);
    const Tensor<T> kh = slice_cols(k, h * dh, dh);
    const Tensor<T> vh = slice_cols(v, h * dh, dh);
    const Tensor<T> weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    parts.push_back(matmul(weights, vh));
  }
  return out_proj(heads_ == 1 ? parts.front() : concat_cols(parts));
}

template <typename T>
ConvModule<T>::ConvModule(const Builder<T>& b, std::size_t dim, std::size_t kernel)
    : dim_(dim),
      norm_(b.child("norm"), dim),
      expand_(b.child("expand"), dim, 2 * dim),
      mid_norm_(b.child("mid_norm"), dim),
      project_(b.child("project"), dim, dim) {
  depthwise_weight_ =
      b.weight("depthwise.weight", {dim, kernel}, 1.0 / std::sqrt(static_cast<double>(kernel)));
  depthwise_bias_ = b.constant("depthwise.bias", {dim}, T(0));
}

template <typename T>
Tensor<T> ConvModule<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> e = expand_(norm_(x));
  const Tensor<T> gated = mul(slice_cols(e, 0, dim_), sigmoid(slice_cols(e, dim_, dim_)));
  const Tensor<T> d = depthwise_conv1d(gated, depthwise_weight_, depthwise_bias_);
  return project_(silu(mid_norm_(d)));
}

template <typename T>
LatteAttention<T>::LatteAttention(const Builder<T>& b, std::size_t dim, std::size_t latte_dim,
                                  std::size_t n_latents, std::size_t heads)
    : q_proj(b.child("q"), dim, latte_dim, false),
      k_proj(b.child("k"), dim, latte_dim, false),
      v_proj(b.child("v"), dim, latte_dim, false),
      out_proj(b.child("out"), latte_dim, dim, false),
      latte_dim_(latte_dim),
      heads_(heads) {
  if (heads == 0 || latte_dim % heads != 0) {
    throw ConfigError("latte width " + std::to_string(latte_dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  latents = b.weight("latents", {n_latents, latte_dim}, 1.0);
}

template <typename T>
Tensor<T> LatteAttention<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> q = q_proj(x);
  const Tensor<T> k = k_proj(x);
  const Tensor<T> v = v_proj(x);
  const std::size_t dh = latte_dim_ / heads_;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> parts;
  parts.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor<T> lh = slice_cols(latents, h * dh, dh);   // [L, dh]
    const Tensor<T> kh = slice_cols(k, h * dh, dh);         // [T, dh]
    const Tensor<T> vh = slice_cols(v, h * dh, dh);         // [T, dh]
    const Tensor<T> qh = slice_cols(q, h * dh, dh);         // [T, dh]
    // Stage 1: [L, T], normalised over time.
    const Tensor<T> gather = softmax(scale(matmul(lh, transpose(kh)), inv_sqrt));
    const Tensor<T> summary = matmul(gather, vh);  // [L, dh]
    // Stage 2: [T, L], normalised over latents.
    const Tensor<T> scatter = softmax(scale(matmul(qh, transpose(summary)), inv_sqrt));
    parts.push_back(matmul(scatter, summary));  // [T, dh]
  }
  return out_proj(heads_ == 1 ? parts.front() : concat_cols(parts));
}

template struct Builder<float>;
template struct Builder<double>;
template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class FeedForward<float>;
template class FeedForward<double>;
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class ConvModule<float>;
template class ConvModule<double>;
template class LatteAttention<float>;
template class LatteAttention<double>;

}  // namespace eend::model
