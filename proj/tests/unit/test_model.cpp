#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "eend/error.hpp"
#include "eend/model/eend.hpp"
#include "eend/numerics/audit.hpp"
#include "eend/numerics/grad_check.hpp"
#include "eend/numerics/ops.hpp"
#include "test_util.hpp"

using namespace eend;
using namespace eend::model;
using eend::testing::random_tensor;
using TD = num::Tensor<double>;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.depth = 2;
  c.embed_dim = 8;
  c.latte_dim = 4;
  c.n_latents = 3;
  c.n_attractors = 3;
  c.ff_expansion = 2;
  c.conv_kernel = 3;
  c.heads = 2;
  c.sap_hidden = 4;
  c.cnn_channels = {2, 4, 4, 4, 8};
  c.seed = 11;
  return c;
}

void fill(num::Tensor<double> t, double value) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), value);
}

double max_abs_diff(const TD& a, const TD& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("latte: a single latent broadcasts one vector to every position") {
  num::ParamStore<double> store;
  std::mt19937_64 rng(1);
  LatteAttention<double> latte(Builder<double>{store, rng, "l"}, 16, 8, 1, 2);
  const auto y = latte(random_tensor({12, 16}, rng));
  for (std::size_t t = 1; t < 12; ++t)
    for (std::size_t j = 0; j < 16; ++j) CHECK(y.at(t, j) == doctest::Approx(y.at(0, j)));
}

TEST_CASE("latte: one position reduces to the value path") {
  num::ParamStore<double> store;
  std::mt19937_64 rng(2);
  LatteAttention<double> latte(Builder<double>{store, rng, "l"}, 16, 8, 5, 4);
  const auto x = random_tensor({1, 16}, rng);
  const auto expected = latte.out_proj(latte.v_proj(x));
  CHECK(max_abs_diff(latte(x), expected) < 1e-12);
}

TEST_CASE("latte: multiply-accumulate count is linear in T") {
  num::ParamStore<float> store;
  std::mt19937_64 rng(3);
  LatteAttention<float> latte(Builder<float>{store, rng, "l"}, 64, 32, 16, 4);
  auto count = [&](std::size_t t) {
    const auto x = random_tensor<float>({t, 64}, rng);
    num::OpAudit audit;
    latte(x);
    return static_cast<double>(audit.macs());
  };
  for (std::size_t t : {50, 200, 700}) {
    const double ratio = count(2 * t) / count(t);
    CHECK(std::abs(ratio - 2.0) < 0.02);
  }
}

TEST_CASE("conformer block: shape") {
  num::ParamStore<float> store;
  std::mt19937_64 rng(4);
  const ModelConfig config;
  ConformerBlock<float> block(Builder<float>{store, rng, "b"}, config);
  const auto y = block(random_tensor<float>({50, 256}, rng), random_tensor<float>({8, 256}, rng));
  CHECK(y.shape() == num::Shape{50, 256});
}

TEST_CASE("conformer block: zero attractors with zero values make cross-attention a passthrough") {
  num::ParamStore<double> store;
  std::mt19937_64 rng(5);
  const ModelConfig config = tiny_config();
  ConformerBlock<double> block(Builder<double>{store, rng, "b"}, config);
  fill(block.cross.v_proj.weight, 0.0);
  const auto x = random_tensor({9, 8}, rng);
  const TD attractors({3, 8});

  TD h = num::add(x, num::scale(block.ff1(x), 0.5));
  h = num::add(h, block.latte(block.latte_norm(h)));
  h = num::add(h, block.conv1(h));
  h = num::add(h, block.conv2(h));
  h = num::add(h, num::scale(block.ff2(h), 0.5));
  const auto expected = block.final_norm(h);
  CHECK(max_abs_diff(block(x, attractors), expected) == 0.0);
}

TEST_CASE("conformer block: attractor order does not matter") {
  num::ParamStore<double> store;
  std::mt19937_64 rng(6);
  ConformerBlock<double> block(Builder<double>{store, rng, "b"}, tiny_config());
  const auto x = random_tensor({7, 8}, rng);
  const auto a = random_tensor({3, 8}, rng);
  const auto permuted = num::index_rows(a, {2, 0, 1});
  CHECK(max_abs_diff(block(x, a), block(x, permuted)) < 1e-12);
}

TEST_CASE("depth pool: singleton, identical entries and saturation") {
  num::ParamStore<double> store;
  std::mt19937_64 rng(7);
  DepthPool<double> pool(Builder<double>{store, rng, "p"}, 8, 4);
  const auto h0 = random_tensor({5, 8}, rng);
  CHECK(max_abs_diff(pool({h0}), h0) < 1e-15);
  CHECK(max_abs_diff(pool({h0, h0, h0}), h0) < 1e-12);

  // Hidden unit 0 reads feature 0, which is +1 on entry 0 and -1 on entry 1;
  // a score weight of 500 turns the saturated tanh into a 1000 logit margin.
  fill(pool.hidden.weight, 0.0);
  fill(pool.score.weight, 0.0);
  pool.hidden.weight.mutable_data()[0] = 100.0;
  pool.score.weight.mutable_data()[0] = 500.0;
  auto e0 = random_tensor({5, 8}, rng);
  auto e1 = random_tensor({5, 8}, rng);
  for (std::size_t t = 0; t < 5; ++t) {
    e0.mutable_data()[t * 8] = 1.0;
    e1.mutable_data()[t * 8] = -1.0;
  }
  CHECK(max_abs_diff(pool({e0, e1}), e0) < 1e-6);
}

TEST_CASE("attractor decoder: zero frames and zero cross values leave the self branch") {
  num::ParamStore<double> store;
  std::mt19937_64 rng(8);
  AttractorDecoder<double> dec(Builder<double>{store, rng, "d"}, tiny_config());
  fill(dec.cross.v_proj.weight, 0.0);
  const auto a = random_tensor({3, 8}, rng);
  const TD frames({6, 8});
  const auto normed = dec.self_norm(a);
  TD expected = num::add(a, dec.self_attn(normed, normed));
  expected = num::add(expected, dec.ff1(expected));
  expected = num::add(expected, dec.ff2(expected));
  CHECK(max_abs_diff(dec(a, frames), expected) == 0.0);
}

TEST_CASE("attractor decoder: shape and batch independence") {
  num::ParamStore<float> store;
  std::mt19937_64 rng(9);
  AttractorDecoder<float> dec(Builder<float>{store, rng, "d"}, ModelConfig{});
  const auto a = random_tensor<float>({8, 256}, rng);
  const auto x1 = random_tensor<float>({40, 256}, rng);
  const auto x2 = random_tensor<float>({40, 256}, rng);
  const auto first = dec(a, x1);
  CHECK(first.shape() == num::Shape{8, 256});
  dec(a, x2);
  const auto again = dec(a, x1);
  CHECK(testing::to_vector(first) == testing::to_vector(again));
}

TEST_CASE("logits: closed form for zero frames and directions") {
  const TD frames({4, 256});
  const TD directions({8, 256});
  const auto logits =
      attractor_logits(frames, directions, TD::full({8}, 0.3), TD::full({1}, -0.1));
  CHECK(logits.shape() == num::Shape{4, 8});
  const auto probs = num::sigmoid(logits);
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    CHECK(logits.data()[i] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(probs.data()[i] == doctest::Approx(0.549834).epsilon(1e-6));
  }
}

TEST_CASE("forward: depth one skips pooling") {
  ModelConfig c = tiny_config();
  c.depth = 1;
  EendModel<double> model(c);
  CHECK(model.pools().empty());
  std::mt19937_64 rng(10);
  const auto x0 = random_tensor({6, 8}, rng);
  const auto out = model.forward_embeddings(x0);
  const auto a = model.decoders()[0](model.initial_attractors(), x0);
  const auto x = model.blocks()[0](x0, a);
  CHECK(max_abs_diff(out.frames, x) == 0.0);
  CHECK(max_abs_diff(out.attractors, a) == 0.0);
}

TEST_CASE("forward: full-size shapes without any T x T intermediate") {
  EendModel<float> model(ModelConfig{});
  std::mt19937_64 rng(11);
  const auto images = random_tensor<float>({500, 1, 15, 23}, rng);
  num::NoGradGuard no_grad;
  num::OpAudit audit;
  const auto out = model.forward(images);
  CHECK(out.logits.shape() == num::Shape{500, 8});
  CHECK(out.frames.shape() == num::Shape{500, 256});
  CHECK(out.directions.shape() == num::Shape{8, 256});
  CHECK(out.slot_bias.shape() == num::Shape{8});
  CHECK_FALSE(audit.has_square_axes(500));
  for (const auto& r : audit.records()) {
    INFO(r.op << " " << num::shape_str(r.shape));
    CHECK(std::count(r.shape.begin(), r.shape.end(), 500u) <= 1);
  }
}

TEST_CASE("forward: deterministic for a fixed seed") {
  std::mt19937_64 rng(12);
  const auto images = random_tensor<float>({20, 1, 15, 23}, rng);
  ModelConfig c = tiny_config();
  EendModel<float> m1(c), m2(c);
  CHECK(testing::to_vector(m1.forward(images).logits) ==
        testing::to_vector(m2.forward(images).logits));
  c.seed = 12;
  EendModel<float> m3(c);
  CHECK(testing::to_vector(m1.forward(images).logits) !=
        testing::to_vector(m3.forward(images).logits));
}

TEST_CASE("forward: wrong embedding width is a configuration error") {
  EendModel<double> model(tiny_config());
  CHECK_THROWS_AS(model.forward_embeddings(TD({4, 9})), ConfigError);
}

TEST_CASE("forward: every parameter receives a gradient") {
  ModelConfig c = tiny_config();
  c.depth = 3;
  EendModel<double> model(c);
  std::mt19937_64 rng(13);
  const auto images = random_tensor({6, 1, 15, 23}, rng);
  const auto weights = random_tensor({6, 3}, rng);
  const auto out = model.forward(images);
  num::sum(num::mul(out.logits, weights)).backward();
  for (const auto& [name, p] : model.params().entries()) {
    INFO(name);
    REQUIRE(p.has_grad());
    double norm = 0.0;
    for (double g : p.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("forward: analytic gradient matches finite differences") {
  EendModel<double> model(tiny_config());
  std::mt19937_64 rng(14);
  const auto x0 = random_tensor({5, 8}, rng);
  const auto weights = random_tensor({5, 3}, rng);
  std::vector<TD> wrt;
  for (const auto& e : model.params().entries()) wrt.push_back(e.second);
  num::GradCheckOptions opts;
  opts.tolerance = 1e-5;
  opts.max_elements_per_tensor = 4;
  const auto report = num::grad_check(
      "model", [&] { return num::sum(num::mul(model.forward_embeddings(x0).logits, weights)); },
      wrt, opts);
  INFO(report.max_rel_error);
  CHECK(report.passed);
}

TEST_CASE("checkpoint: round trip and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "eend_model_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  ModelConfig c = tiny_config();
  c.seed = 99;
  EendModel<float> model(c);
  save_checkpoint(path, model);
  const auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.config().seed == 99);
  REQUIRE(loaded.params().entries().size() == model.params().entries().size());
  for (std::size_t i = 0; i < model.params().entries().size(); ++i) {
    CHECK(loaded.params().entries()[i].first == model.params().entries()[i].first);
    CHECK(testing::to_vector(loaded.params().entries()[i].second) ==
          testing::to_vector(model.params().entries()[i].second));
  }

  const auto bad = (dir / "bad.ckpt").string();
  std::ofstream(bad) << "EENDCKPX";
  CHECK_THROWS_AS(load_checkpoint<float>(bad), FormatError);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::copy_file(path, dir / "cut.ckpt",
                             std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(dir / "cut.ckpt", size - 10);
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "cut.ckpt").string()), FormatError);
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "missing.ckpt").string()), IoError);
}

TEST_CASE("config: validation and json round trip") {
  ModelConfig c;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.cnn_channels.back() = 128;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const ModelConfig t = tiny_config();
  const nlohmann::json j = t;
  const auto back = j.get<ModelConfig>();
  CHECK(back.embed_dim == t.embed_dim);
  CHECK(back.cnn_channels == t.cnn_channels);
  CHECK(nlohmann::json::parse(R"({"depth": 2})").get<ModelConfig>().embed_dim == 256);
}
