#include "eend/frontend/cnn.hpp"

#include <cmath>

#include "eend/error.hpp"
#include "eend/numerics/ops.hpp"

namespace eend::frontend {

std::vector<std::pair<std::size_t, std::size_t>> cnn_shape_trace(const CnnConfig& config) {
  if (config.channels.size() < 2) throw ConfigError("CNN needs at least two layers");
  std::vector<std::pair<std::size_t, std::size_t>> trace;
  std::size_t h = config.window_frames, w = config.n_mels;
  for (std::size_t layer = 0; layer + 1 < config.channels.size(); ++layer) {
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;
    trace.emplace_back(h, w);
  }
  trace.emplace_back(1, 1);
  return trace;
}

template <typename T>
num::Tensor<T> windows_to_images(const WindowTensor& windows) {
  std::vector<T> v(windows.values.begin(), windows.values.end());
  return num::Tensor<T>({windows.num_windows, 1, windows.window_frames, windows.n_mels},
                        std::move(v));
}

template <typename T>
CnnEncoder<T>::CnnEncoder(const CnnConfig& config, num::ParamStore<T>& store,
                          std::mt19937_64& rng, const std::string& prefix)
    : config_(config) {
  const auto trace = cnn_shape_trace(config);
  const std::size_t layers = config.channels.size();
  last_kernel_ = layers >= 2 ? trace[layers - 2] : std::pair<std::size_t, std::size_t>{1, 1};
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    const std::size_t kh = last ? last_kernel_.first : 3;
    const std::size_t kw = last ? last_kernel_.second : 3;
    const std::size_t out_ch = config.channels[l];
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch * kh * kw));
    const std::string name = prefix + ".conv" + std::to_string(l);
    weights_.push_back(
        store.add(name + ".weight", num::normal_init<T>({out_ch, in_ch, kh, kw}, stddev, rng)));
    biases_.push_back(store.add(name + ".bias", num::Tensor<T>({out_ch})));
    in_ch = out_ch;
  }
  gain_ = store.add(prefix + ".norm.gain", num::Tensor<T>::full({config.channels.back()}, T(1)));
}

template <typename T>
num::Tensor<T> CnnEncoder<T>::encode(const num::Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != config_.window_frames ||
      images.dim(3) != config_.n_mels) {
    throw ConfigError("CNN expects [T, 1, " + std::to_string(config_.window_frames) + ", " +
                      std::to_string(config_.n_mels) + "] input, got " +
                      num::shape_str(images.shape()));
  }
  num::Tensor<T> x = images;
  const std::size_t layers = weights_.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    const num::Conv2dSpec spec = last ? num::Conv2dSpec{1, 1, 0, 0} : num::Conv2dSpec{2, 2, 1, 1};
    x = num::conv2d(x, weights_[l], biases_[l], spec);
    if (!last) x = num::relu(x);
  }
  x = num::reshape(x, {images.dim(0), output_dim()});
  return num::rms_norm(x, gain_);
}

template <typename T>
num::Tensor<T> CnnEncoder<T>::encode(const WindowTensor& windows) const {
  return encode(windows_to_images<T>(windows));
}

template class CnnEncoder<float>;
template class CnnEncoder<double>;
template num::Tensor<float> windows_to_images<float>(const WindowTensor&);
template num::Tensor<double> windows_to_images<double>(const WindowTensor&);

}  // namespace eend::frontend
