#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eend/frontend/features.hpp"
#include "eend/numerics/params.hpp"
#include "eend/numerics/tensor.hpp"

namespace eend::frontend {

struct CnnConfig {
  // Output filters per layer; the last entry is the embedding width.
  std::vector<std::size_t> channels{16, 32, 64, 128, 256};
  std::size_t window_frames = kWindowFrames;
  std::size_t n_mels = 23;
};

// Spatial size after each layer: all but the last layer are stride-2 3x3
// convolutions with one pixel of zero padding; the last layer's kernel covers
// the remaining map with valid padding. 15x23 gives 8x12, 4x6, 2x3, 1x2, 1x1.
std::vector<std::pair<std::size_t, std::size_t>> cnn_shape_trace(const CnnConfig& config);

// Encodes every window image independently into one RMS-normalized vector.
template <typename T>
class CnnEncoder {
 public:
  CnnEncoder(const CnnConfig& config, num::ParamStore<T>& store, std::mt19937_64& rng,
             const std::string& prefix = "frontend");

  // images: [T, 1, window_frames, n_mels] -> [T, E]
  num::Tensor<T> encode(const num::Tensor<T>& images) const;
  num::Tensor<T> encode(const WindowTensor& windows) const;

  std::size_t output_dim() const { return config_.channels.back(); }
  const CnnConfig& config() const { return config_; }

 private:
  CnnConfig config_;
  std::vector<num::Tensor<T>> weights_;
  std::vector<num::Tensor<T>> biases_;
  num::Tensor<T> gain_;
  std::pair<std::size_t, std::size_t> last_kernel_;
};

template <typename T>
num::Tensor<T> windows_to_images(const WindowTensor& windows);

}  // namespace eend::frontend
