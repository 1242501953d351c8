#include "eend/model/eend.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "eend/error.hpp"
#include "eend/numerics/ops.hpp"
#include "eend/numerics/serialize.hpp"
#include "json.hpp"

namespace eend::model {

using namespace eend::num;

template <typename T>
ConformerBlock<T>::ConformerBlock(const Builder<T>& b, const ModelConfig& c)
    : ff1(b.child("ff1"), c.embed_dim, c.ff_expansion),
      latte_norm(b.child("latte_norm"), c.embed_dim),
      latte(b.child("latte"), c.embed_dim, c.latte_dim, c.n_latents, c.heads),
      conv1(b.child("conv1"), c.embed_dim, c.conv_kernel),
      cross_norm(b.child("cross_norm"), c.embed_dim),
      cross(b.child("cross"), c.embed_dim, c.heads),
      conv2(b.child("conv2"), c.embed_dim, c.conv_kernel),
      ff2(b.child("ff2"), c.embed_dim, c.ff_expansion),
      final_norm(b.child("final_norm"), c.embed_dim) {}

template <typename T>
Tensor<T> ConformerBlock<T>::operator()(const Tensor<T>& x, const Tensor<T>& attractors) const {
  Tensor<T> h = add(x, scale(ff1(x), T(0.5)));
  h = add(h, latte(latte_norm(h)));
  h = add(h, conv1(h));
  h = add(h, cross(cross_norm(h), attractors));
  h = add(h, conv2(h));
  h = add(h, scale(ff2(h), T(0.5)));
  return final_norm(h);
}

template <typename T>
AttractorDecoder<T>::AttractorDecoder(const Builder<T>& b, const ModelConfig& c)
    : self_norm(b.child("self_norm"), c.embed_dim),
      self_attn(b.child("self_attn"), c.embed_dim, c.heads),
      ff1(b.child("ff1"), c.embed_dim, c.ff_expansion),
      cross_norm(b.child("cross_norm"), c.embed_dim),
      cross(b.child("cross"), c.embed_dim, c.heads),
      ff2(b.child("ff2"), c.embed_dim, c.ff_expansion) {}

template <typename T>
Tensor<T> AttractorDecoder<T>::operator()(const Tensor<T>& attractors,
                                          const Tensor<T>& frames) const {
  const Tensor<T> normed = self_norm(attractors);
  Tensor<T> a = add(attractors, self_attn(normed, normed));
  a = add(a, ff1(a));
  a = add(a, cross(cross_norm(a), frames));
  return add(a, ff2(a));
}

template <typename T>
DepthPool<T>::DepthPool(const Builder<T>& b, std::size_t dim, std::size_t hidden_dim)
    : hidden(b.child("hidden"), dim, hidden_dim),
      score(b.child("score"), hidden_dim, 1, false) {}

template <typename T>
Tensor<T> DepthPool<T>::operator()(const std::vector<Tensor<T>>& stack) const {
  if (stack.empty()) throw DimensionError("depth pooling over an empty stack");
  std::vector<Tensor<T>> scores;
  scores.reserve(stack.size());
  for (const auto& h : stack) scores.push_back(score(tanh(hidden(h))));
  const Tensor<T> weights = softmax(stack.size() == 1 ? scores.front() : concat_cols(scores));
  Tensor<T> pooled = mul(stack.front(), slice_cols(weights, 0, 1));
  for (std::size_t d = 1; d < stack.size(); ++d)
    pooled = add(pooled, mul(stack[d], slice_cols(weights, d, 1)));
  return pooled;
}

template <typename T>
Tensor<T> attractor_logits(const Tensor<T>& frames, const Tensor<T>& directions,
                           const Tensor<T>& slot_bias, const Tensor<T>& global_bias) {
  return add(add(matmul(frames, transpose(directions)), slot_bias), global_bias);
}

namespace {

frontend::CnnConfig cnn_config(const ModelConfig& c) {
  frontend::CnnConfig cc;
  cc.channels = c.cnn_channels;
  return cc;
}

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

template <typename T>
EendModel<T>::EendModel(const ModelConfig& config)
    : config_(validated(config)),
      rng_(config.seed),
      cnn_(cnn_config(config), store_, rng_) {
  const std::size_t e = config_.embed_dim;
  const Builder<T> root{store_, rng_, "model"};
  initial_attractors_ = root.weight("attractors", {config_.n_attractors, e}, 1.0);
  for (std::size_t d = 0; d < config_.depth; ++d) {
    const Builder<T> layer = root.child("layer" + std::to_string(d));
    if (d > 0) pools_.emplace_back(layer.child("pool"), e, config_.sap_hidden);
    decoders_.emplace_back(layer.child("decoder"), config_);
    blocks_.emplace_back(layer.child("block"), config_);
  }
  head_ = Linear<T>(root.child("head"), e, e + 1);
  global_bias_ = root.constant("global_bias", {1}, T(0));
}

template <typename T>
ForwardOutput<T> EendModel<T>::forward(const Tensor<T>& images) const {
  return forward_embeddings(cnn_.encode(images));
}

template <typename T>
ForwardOutput<T> EendModel<T>::forward(const frontend::WindowTensor& windows) const {
  return forward_embeddings(cnn_.encode(windows));
}

template <typename T>
ForwardOutput<T> EendModel<T>::forward_embeddings(const Tensor<T>& x0) const {
  const std::size_t e = config_.embed_dim;
  if (x0.rank() != 2 || x0.dim(1) != e) {
    throw ConfigError("frame embeddings " + shape_str(x0.shape()) + " do not match embed_dim " +
                      std::to_string(e));
  }
  std::vector<Tensor<T>> stack{x0};
  Tensor<T> x = x0;
  Tensor<T> a = initial_attractors_;
  for (std::size_t d = 0; d < config_.depth; ++d) {
    if (d > 0) x = add(x, pools_[d - 1](stack));
    a = decoders_[d](a, x);
    x = blocks_[d](x, a);
    stack.push_back(x);
  }
  ForwardOutput<T> out;
  const Tensor<T> projected = head_(a);
  out.frames = x;
  out.attractors = a;
  out.directions = slice_cols(projected, 0, e);
  out.slot_bias = reshape(slice_cols(projected, e, 1), {config_.n_attractors});
  out.global_bias = global_bias_;
  out.logits = attractor_logits(x, out.directions, out.slot_bias, out.global_bias);
  return out;
}

namespace {

constexpr char kMagic[8] = {'E', 'E', 'N', 'D', 'C', 'K', 'P', 'T'};

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const EendModel<T>& model) {
  nlohmann::json header;
  header["config"] = model.config();
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, tensor] : model.params().entries())
    header["tensors"].push_back({{"name", name}, {"shape", tensor.shape()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : model.params().entries()) write_tensor(out, entry.second);
  if (!out) throw IoError("write failed for " + path);
}

template <typename T>
EendModel<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError(path + ": not a checkpoint");
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::string text(read_u32(in), '\0');
  in.read(text.data(), static_cast<std::streamsize>(text.size()));
  if (!in) throw FormatError(path + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  EendModel<T> model(header.at("config").get<ModelConfig>());
  const auto& manifest = header.at("tensors");
  const auto& entries = model.params().entries();
  if (manifest.size() != entries.size())
    throw FormatError(path + ": manifest lists " + std::to_string(manifest.size()) +
                      " tensors, model has " + std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, param] = entries[i];
    if (manifest[i].at("name").get<std::string>() != name)
      throw FormatError(path + ": expected tensor " + name);
    const Tensor<T> loaded = read_tensor<T>(in);
    if (loaded.shape() != param.shape())
      throw FormatError(path + ": " + name + " has shape " + shape_str(loaded.shape()) +
                        ", expected " + shape_str(param.shape()));
    Tensor<T> target = param;
    std::copy(loaded.data().begin(), loaded.data().end(), target.mutable_data().begin());
  }
  return model;
}

template <typename T>
void copy_parameters(const EendModel<T>& from, EendModel<T>& to) {
  const auto& src = from.params().entries();
  const auto& dst = to.params().entries();
  if (src.size() != dst.size()) throw ConfigError("parameter sets differ in size");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].second.shape() != dst[i].second.shape())
      throw ConfigError("parameter " + src[i].first + " differs in shape");
    Tensor<T> target = dst[i].second;
    std::copy(src[i].second.data().begin(), src[i].second.data().end(),
              target.mutable_data().begin());
  }
}

#define EEND_INSTANTIATE_MODEL(T)                                                           \
  template class ConformerBlock<T>;                                                        \
  template class AttractorDecoder<T>;                                                      \
  template class DepthPool<T>;                                                             \
  template class EendModel<T>;                                                             \
  template Tensor<T> attractor_logits(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                      const Tensor<T>&);                                   \
  template void save_checkpoint(const std::string&, const EendModel<T>&);                  \
  template EendModel<T> load_checkpoint<T>(const std::string&);                            \
  template void copy_parameters(const EendModel<T>&, EendModel<T>&);

EEND_INSTANTIATE_MODEL(float)
EEND_INSTANTIATE_MODEL(double)

}  // namespace eend::model
