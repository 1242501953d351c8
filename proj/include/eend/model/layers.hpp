#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "eend/numerics/params.hpp"
#include "eend/numerics/tensor.hpp"

namespace eend::model {

template <typename T>
using Tensor = num::Tensor<T>;

// Shared construction context: parameters register under `prefix.name`.
template <typename T>
struct Builder {
  num::ParamStore<T>& store;
  std::mt19937_64& rng;
  std::string prefix;

  Builder child(const std::string& name) const { return {store, rng, prefix + "." + name}; }
  Tensor<T> weight(const std::string& name, num::Shape shape, double stddev) const;
  Tensor<T> constant(const std::string& name, num::Shape shape, T value) const;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const Builder<T>& b, std::size_t in, std::size_t out, bool bias = true,
         double init_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const Builder<T>& b, std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> gain;
  Tensor<T> bias;
};

// LayerNorm -> Linear(E, k*E) -> SiLU -> Linear(k*E, E). No residual.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const Builder<T>& b, std::size_t dim, std::size_t expansion);
  Tensor<T> operator()(const Tensor<T>& x) const;

 private:
  LayerNorm<T> norm_;
  Linear<T> up_;
  Linear<T> down_;
};

// Multi-head scaled dot-product attention without projection biases, so a
// zero value projection yields an exactly zero output.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const Builder<T>& b, std::size_t dim, std::size_t heads);
  // queries: [Nq, E], memory: [Nk, E] -> [Nq, E]
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& memory) const;

  Linear<T> q_proj, k_proj, v_proj, out_proj;

 private:
  std::size_t heads_ = 1;
};

// Conformer convolution module: LN, pointwise expansion with GLU, depthwise
// convolution over time, LN, SiLU, pointwise projection.
template <typename T>
class ConvModule {
 public:
  ConvModule() = default;
  ConvModule(const Builder<T>& b, std::size_t dim, std::size_t kernel);
  Tensor<T> operator()(const Tensor<T>& x) const;

 private:
  std::size_t dim_ = 0;
  LayerNorm<T> norm_;
  Linear<T> expand_;
  Tensor<T> depthwise_weight_;
  Tensor<T> depthwise_bias_;
  LayerNorm<T> mid_norm_;
  Linear<T> project_;
};

// Latent attention, linear in sequence length. A learned bank of latent
// queries first attends over the sequence (softmax over time, per latent);
// every position then attends over the summarised latents (softmax over
// latents, per position). Heads split the latte width. Nothing of size
// T x T is ever formed.
template <typename T>
class LatteAttention {
 public:
  LatteAttention() = default;
  LatteAttention(const Builder<T>& b, std::size_t dim, std::size_t latte_dim,
                 std::size_t n_latents, std::size_t heads);
  // x: [T, E] -> [T, E]; the caller adds the residual.
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> latents;  // [n_latents, latte_dim]
  Linear<T> q_proj, k_proj, v_proj, out_proj;

 private:
  std::size_t latte_dim_ = 0;
  std::size_t heads_ = 1;
};

}  // namespace eend::model
