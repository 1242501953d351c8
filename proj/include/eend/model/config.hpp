#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace eend::model {

struct ModelConfig {
  std::size_t depth = 5;
  std::size_t embed_dim = 256;
  std::size_t latte_dim = 128;
  std::size_t n_latents = 16;
  std::size_t n_attractors = 8;
  std::size_t ff_expansion = 4;
  std::size_t conv_kernel = 9;
  std::size_t heads = 4;
  // Hidden width of the depth-pooling score MLP.
  std::size_t sap_hidden = 64;
  // Front-end filters; the last entry must equal embed_dim.
  std::vector<std::size_t> cnn_channels{16, 32, 64, 128, 256};
  std::uint64_t seed = 0;

  // Throws ConfigError when the fields are inconsistent.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

ModelConfig load_model_config(const std::string& path);

}  // namespace eend::model
