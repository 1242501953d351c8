#include "eend/model/config.hpp"

#include <fstream>

#include "eend/error.hpp"

namespace eend::model {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (depth == 0) fail("depth must be positive");
  if (embed_dim == 0 || heads == 0) fail("embed_dim and heads must be positive");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (latte_dim == 0 || latte_dim % heads != 0) fail("latte_dim must be divisible by heads");
  if (n_latents == 0) fail("n_latents must be positive");
  if (n_attractors == 0) fail("n_attractors must be positive");
  if (ff_expansion == 0) fail("ff_expansion must be positive");
  if (conv_kernel % 2 == 0) fail("conv_kernel must be odd");
  if (sap_hidden == 0) fail("sap_hidden must be positive");
  if (cnn_channels.size() < 2) fail("cnn_channels needs at least two layers");
  if (cnn_channels.back() != embed_dim) fail("last cnn channel count must equal embed_dim");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"depth", c.depth},
                     {"embed_dim", c.embed_dim},
                     {"latte_dim", c.latte_dim},
                     {"n_latents", c.n_latents},
                     {"n_attractors", c.n_attractors},
                     {"ff_expansion", c.ff_expansion},
                     {"conv_kernel", c.conv_kernel},
                     {"heads", c.heads},
                     {"sap_hidden", c.sap_hidden},
                     {"cnn_channels", c.cnn_channels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig defaults;
  c.depth = j.value("depth", defaults.depth);
  c.embed_dim = j.value("embed_dim", defaults.embed_dim);
  c.latte_dim = j.value("latte_dim", defaults.latte_dim);
  c.n_latents = j.value("n_latents", defaults.n_latents);
  c.n_attractors = j.value("n_attractors", defaults.n_attractors);
  c.ff_expansion = j.value("ff_expansion", defaults.ff_expansion);
  c.conv_kernel = j.value("conv_kernel", defaults.conv_kernel);
  c.heads = j.value("heads", defaults.heads);
  c.sap_hidden = j.value("sap_hidden", defaults.sap_hidden);
  c.cnn_channels = j.value("cnn_channels", defaults.cnn_channels);
  c.seed = j.value("seed", defaults.seed);
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    const auto j = nlohmann::json::parse(in);
    ModelConfig c = j.contains("model") ? j.at("model").get<ModelConfig>() : j.get<ModelConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace eend::model
