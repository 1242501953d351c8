#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "eend/frontend/cnn.hpp"
#include "eend/model/config.hpp"
#include "eend/model/layers.hpp"

namespace eend::model {

// Half-weighted FF, latent self-attention, conv, cross-attention to the
// attractors, conv, half-weighted FF, final layer norm. Every sublayer is
// residual.
template <typename T>
class ConformerBlock {
 public:
  ConformerBlock(const Builder<T>& b, const ModelConfig& config);
  // x: [T, E], attractors: [S, E] -> [T, E]
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& attractors) const;

  FeedForward<T> ff1;
  LayerNorm<T> latte_norm;
  LatteAttention<T> latte;
  ConvModule<T> conv1;
  LayerNorm<T> cross_norm;
  MultiHeadAttention<T> cross;
  ConvModule<T> conv2;
  FeedForward<T> ff2;
  LayerNorm<T> final_norm;
};

// One transformer-decoder layer over the attractor slots: self-attention,
// FF, cross-attention into the frames, FF. The frames are not normalized.
template <typename T>
class AttractorDecoder {
 public:
  AttractorDecoder(const Builder<T>& b, const ModelConfig& config);
  // attractors: [S, E], frames: [T, E] -> [S, E]
  Tensor<T> operator()(const Tensor<T>& attractors, const Tensor<T>& frames) const;

  LayerNorm<T> self_norm;
  MultiHeadAttention<T> self_attn;
  FeedForward<T> ff1;
  LayerNorm<T> cross_norm;
  MultiHeadAttention<T> cross;
  FeedForward<T> ff2;
};

// Self-attentive pooling over depth: score_d = tanh(h_d W1 + b1) w2 per frame,
// softmax over d, weighted sum of the entries.
template <typename T>
class DepthPool {
 public:
  DepthPool(const Builder<T>& b, std::size_t dim, std::size_t hidden);
  // Each entry is [T, E]; returns [T, E].
  Tensor<T> operator()(const std::vector<Tensor<T>>& stack) const;

  Linear<T> hidden;
  Linear<T> score;  // hidden -> 1, no bias: a shared offset cancels in softmax
};

// logits[t, s] = x_t . directions_s + slot_bias_s + global_bias
template <typename T>
Tensor<T> attractor_logits(const Tensor<T>& frames, const Tensor<T>& directions,
                           const Tensor<T>& slot_bias, const Tensor<T>& global_bias);

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;       // [T, S]
  Tensor<T> frames;       // [T, E], last block output
  Tensor<T> attractors;   // [S, E], last decoder output
  Tensor<T> directions;   // [S, E]
  Tensor<T> slot_bias;    // [S]
  Tensor<T> global_bias;  // [1]
};

template <typename T>
class EendModel {
 public:
  explicit EendModel(const ModelConfig& config);

  // images: [T, 1, 15, 23]
  ForwardOutput<T> forward(const Tensor<T>& images) const;
  ForwardOutput<T> forward(const frontend::WindowTensor& windows) const;
  // Skips the CNN; x0: [T, E].
  ForwardOutput<T> forward_embeddings(const Tensor<T>& x0) const;

  const ModelConfig& config() const { return config_; }
  num::ParamStore<T>& params() { return store_; }
  const num::ParamStore<T>& params() const { return store_; }

  const frontend::CnnEncoder<T>& frontend() const { return cnn_; }
  const std::vector<ConformerBlock<T>>& blocks() const { return blocks_; }
  const std::vector<AttractorDecoder<T>>& decoders() const { return decoders_; }
  // pools()[i] runs before block i + 1.
  const std::vector<DepthPool<T>>& pools() const { return pools_; }
  Tensor<T> initial_attractors() const { return initial_attractors_; }
  const Linear<T>& head() const { return head_; }
  Tensor<T> global_bias() const { return global_bias_; }

 private:
  ModelConfig config_;
  num::ParamStore<T> store_;
  std::mt19937_64 rng_;
  frontend::CnnEncoder<T> cnn_;
  Tensor<T> initial_attractors_;
  std::vector<DepthPool<T>> pools_;
  std::vector<AttractorDecoder<T>> decoders_;
  std::vector<ConformerBlock<T>> blocks_;
  Linear<T> head_;
  Tensor<T> global_bias_;
};

// Layout: "EENDCKPT", u32 version, u32 header length, JSON header holding the
// config and a [{name, shape}] manifest, then every tensor in manifest order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::string& path, const EendModel<T>& model);

// Rebuilds the model from the stored config and loads every tensor.
template <typename T>
EendModel<T> load_checkpoint(const std::string& path);

// Copies values (not graph state) from one model into another of equal shape.
template <typename T>
void copy_parameters(const EendModel<T>& from, EendModel<T>& to);

}  // namespace eend::model
