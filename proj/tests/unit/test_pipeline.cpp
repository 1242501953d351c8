#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "eend/error.hpp"
#include "eend/frontend/features.hpp"
#include "eend/pipeline/synth.hpp"
#include "eend/pipeline/train.hpp"

using namespace eend;
using namespace eend::pipeline;
namespace fs = std::filesystem;

namespace {

model::ModelConfig micro_model() {
  model::ModelConfig c;
  c.depth = 2;
  c.embed_dim = 8;
  c.latte_dim = 4;
  c.n_latents = 2;
  c.n_attractors = 3;
  c.ff_expansion = 2;
  c.conv_kernel = 3;
  c.heads = 2;
  c.sap_hidden = 4;
  c.cnn_channels = {2, 4, 4, 4, 8};
  c.seed = 1;
  return c;
}

std::vector<TrainingExample> examples(std::size_t n, double duration, std::uint64_t seed,
                                      std::size_t slots) {
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    MixtureSpec s;
    s.duration_s = duration;
    s.seed = seed + i;
    out.push_back(make_example(synth_mixture(s), slots));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "eend_pipeline_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("synth: single speaker never overlaps") {
  MixtureSpec s;
  s.n_speakers = 1;
  s.overlap_ratio = 0.0;
  s.duration_s = 20.0;
  s.seed = 3;
  const auto rec = synth_mixture(s);
  CHECK(rec.labels.columns() == 1);
  CHECK(rec.labels.n_speakers() == 1);
  CHECK(overlap_fraction(rec.labels) == 0.0);
}

TEST_CASE("synth: same seed gives identical output") {
  MixtureSpec s;
  s.duration_s = 12.0;
  s.seed = 77;
  const auto a = synth_mixture(s);
  const auto b = synth_mixture(s);
  CHECK(a.clip.samples == b.clip.samples);
  CHECK(a.labels == b.labels);
  s.seed = 78;
  CHECK(synth_mixture(s).clip.samples != a.clip.samples);
}

TEST_CASE("synth: overlap ratio is met") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MixtureSpec s;
    s.overlap_ratio = 0.3;
    s.seed = seed;
    const auto rec = synth_mixture(s);
    CHECK(std::abs(overlap_fraction(rec.labels) - 0.3) <= 0.1);
  }
}

TEST_CASE("synth: label and front-end frame counts agree") {
  const std::pair<double, std::size_t> cases[] = {{2.0, 1}, {4.0, 2},  {7.3, 2}, {30.0, 3},
                                                  {30.0, 4}, {60.0, 2}, {60.0, 4}};
  for (const auto& [d, n] : cases) {
    {
      MixtureSpec s;
      s.duration_s = d;
      s.n_speakers = n;
      s.overlap_ratio = n == 1 ? 0.0 : 0.2;
      s.seed = static_cast<std::uint64_t>(d * 10) + n;
      const auto rec = synth_mixture(s);
      CHECK(rec.clip.samples.size() == frontend::AudioClip::samples_for(d));
      CHECK(rec.labels.frames() == frontend::frontend_frames(rec.clip.samples.size()));
      CHECK(rec.labels.frames() ==
            frontend::window_stack(frontend::log_mel(rec.clip)).num_windows);
      CHECK(rec.labels.n_speakers() == n);
      float peak = 0.0f;
      for (float x : rec.clip.samples) peak = std::max(peak, std::abs(x));
      CHECK(peak <= 0.9f);
      std::size_t covered = 0;
      for (const auto& u : rec.utterances) covered += u.end - u.start;
      std::size_t active = 0;
      for (std::size_t t = 0; t < rec.labels.frames(); ++t)
        for (std::size_t k = 0; k < n; ++k) active += rec.labels.y01(t, k);
      CHECK(covered == active);
    }
  }
}

TEST_CASE("synth: infeasible specs") {
  MixtureSpec s;
  s.n_speakers = 1;
  s.overlap_ratio = 0.2;
  CHECK_THROWS_AS(synth_mixture(s), GenerationError);
  s.n_speakers = 2;
  s.overlap_ratio = 1.0;
  CHECK_THROWS_AS(synth_mixture(s), GenerationError);
  s.overlap_ratio = 0.2;
  s.duration_s = 0.1;
  CHECK_THROWS_AS(synth_mixture(s), GenerationError);
  s.duration_s = 10.0;
  s.n_speakers = 0;
  CHECK_THROWS_AS(synth_mixture(s), GenerationError);
}

TEST_CASE("crop: arithmetic and consistency") {
  MixtureSpec s;
  s.seed = 5;
  const auto rec = synth_mixture(s);
  CHECK(rec.labels.frames() == 599);

  std::mt19937_64 rng(9);
  const auto whole = crop_sample(rec, 100.0, rng);
  CHECK(whole.clip.samples == rec.clip.samples);
  CHECK(whole.labels == rec.labels);

  for (int trial = 0; trial < 5; ++trial) {
    std::mt19937_64 probe = rng;
    const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, 99)(probe);
    const auto crop = crop_sample(rec, 50.0, rng);
    CHECK(crop.labels.frames() == 500);
    CHECK(frontend::frontend_frames(crop.clip.samples.size()) == 500);
    CHECK(crop.labels == rec.labels.slice(offset, 500));
    // Raw log-mel of the crop equals the matching frames of the full clip.
    const auto full_mel = frontend::log_mel(rec.clip);
    const auto crop_mel = frontend::log_mel(crop.clip);
    REQUIRE(10 * offset + crop_mel.num_frames <= full_mel.num_frames);
    for (std::size_t f = 0; f < crop_mel.num_frames; f += 97)
      for (std::size_t b = 0; b < 23; ++b)
        CHECK(crop_mel.at(f, b) == full_mel.at(10 * offset + f, b));
  }
}

TEST_CASE("one-cycle schedule") {
  const double max_lr = 1e-3;
  const std::size_t total = 1000;
  CHECK(one_cycle_lr(0, total, max_lr) == doctest::Approx(max_lr / 25.0));
  CHECK(one_cycle_lr(300, total, max_lr) == doctest::Approx(max_lr));
  CHECK(one_cycle_lr(total - 1, total, max_lr) <= max_lr / 1e3);
  CHECK(one_cycle_lr(total - 1, total, max_lr) == doctest::Approx(max_lr / 1e4));
  for (std::size_t s = 1; s < total; ++s) {
    if (s <= 300) {
      CHECK(one_cycle_lr(s, total, max_lr) >= one_cycle_lr(s - 1, total, max_lr));
    } else {
      CHECK(one_cycle_lr(s, total, max_lr) <= one_cycle_lr(s - 1, total, max_lr));
    }
  }
  CHECK_THROWS_AS(one_cycle_lr(total, total, max_lr), ScheduleError);
  CHECK_THROWS_AS(one_cycle_lr(0, 0, max_lr), ScheduleError);
}

TEST_CASE("adamw: closed-form steps") {
  auto make = [](float value) {
    num::ParamStore<float> store;
    store.add("w", num::Tensor<float>::full({3}, value));
    return store;
  };
  const double lr = 0.01;

  auto store = make(1.0f);
  AdamW no_decay(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  for (float& g : store.get("w").mutable_grad()) g = 1.0f;
  CHECK(no_decay.step(store, lr));
  for (float w : store.get("w").data()) CHECK(w == doctest::Approx(1.0 - lr).epsilon(1e-6));

  store = make(2.0f);
  AdamW zero_grad(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  store.get("w").mutable_grad();
  zero_grad.step(store, lr);
  for (float w : store.get("w").data()) CHECK(w == 2.0f);

  store = make(2.0f);
  AdamW decay(AdamWConfig{0.9, 0.999, 1e-8, 0.1});
  store.get("w").mutable_grad();
  decay.step(store, lr);
  for (float w : store.get("w").data()) CHECK(w == doctest::Approx(2.0 * (1.0 - lr * 0.1)));

  store = make(2.0f);
  AdamW guard;
  store.get("w").mutable_grad()[1] = std::nanf("");
  CHECK_FALSE(guard.step(store, lr));
  CHECK(guard.skipped_steps() == 1);
  for (float w : store.get("w").data()) CHECK(w == 2.0f);
}

TEST_CASE("clip_grad_norm caps the global norm") {
  num::ParamStore<float> store;
  store.add("a", num::Tensor<float>({2}));
  store.add("b", num::Tensor<float>({1}));
  store.get("a").mutable_grad()[0] = 6.0f;
  store.get("a").mutable_grad()[1] = 0.0f;
  store.get("b").mutable_grad()[0] = 8.0f;
  CHECK(clip_grad_norm(store, 5.0) == doctest::Approx(10.0));
  CHECK(store.get("a").grad()[0] == doctest::Approx(3.0));
  CHECK(store.get("b").grad()[0] == doctest::Approx(4.0));
  CHECK(clip_grad_norm(store, 5.0) == doctest::Approx(5.0));
}

TEST_CASE("train config: json round trip and defaults") {
  TrainConfig c;
  c.model = micro_model();
  c.batch_size = 3;
  c.dpcl_mode = losses::DpclMode::kADpcl;
  c.weights.ortho = 0.25;
  const nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  CHECK(back.batch_size == 3);
  CHECK(back.dpcl_mode == losses::DpclMode::kADpcl);
  CHECK(back.weights.ortho == 0.25);
  CHECK(back.model.embed_dim == 8);
  const auto defaults = nlohmann::json::object().get<TrainConfig>();
  CHECK(defaults.batch_size == 64);
  CHECK(defaults.crop_s == 50.0);
  CHECK(defaults.weights.dpcl == 0.5);
}

TEST_CASE("train: zero epochs writes the initial checkpoint") {
  const auto dir = temp_dir("zero");
  TrainConfig c;
  c.model = micro_model();
  c.epochs = 0;
  const auto r = train(c, {}, {}, dir.string());
  CHECK(r.steps == 0);
  CHECK(fs::exists(dir / "final.ckpt"));
  const auto loaded = model::load_checkpoint<float>((dir / "best.ckpt").string());
  const model::EendModel<float> fresh(c.model);
  CHECK(loaded.params().get("model.attractors").data()[0] ==
        fresh.params().get("model.attractors").data()[0]);
}

TEST_CASE("train: zero loss weights leave parameters unchanged") {
  const auto dir = temp_dir("frozen");
  TrainConfig c;
  c.model = micro_model();
  c.epochs = 1;
  c.batch_size = 2;
  c.crop_s = 3.0;
  c.weights = {0.0, 0.0, 0.0, 0.0};
  c.optimizer.weight_decay = 0.0;
  const auto data = examples(3, 6.0, 40, c.model.n_attractors);
  const auto r = train(c, data, {}, dir.string());
  CHECK(r.steps == 2);
  const auto after = model::load_checkpoint<float>((dir / "final.ckpt").string());
  const model::EendModel<float> before(c.model);
  for (std::size_t i = 0; i < before.params().entries().size(); ++i) {
    const auto& a = before.params().entries()[i].second;
    const auto& b = after.params().entries()[i].second;
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }
}

TEST_CASE("train: identical seeds give identical metrics logs") {
  TrainConfig c;
  c.model = micro_model();
  c.epochs = 3;
  c.batch_size = 2;
  c.crop_s = 4.0;
  c.validate_every = 2;
  const auto data = examples(3, 6.0, 50, c.model.n_attractors);
  const auto valid = examples(1, 5.0, 90, c.model.n_attractors);
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2"), d3 = temp_dir("det3");
  const auto r1 = train(c, data, valid, d1.string());
  train(c, data, valid, d2.string());
  CHECK(r1.steps == 6);
  CHECK(slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv"));
  CHECK(slurp(d1 / "loss_debug.csv") == slurp(d2 / "loss_debug.csv"));
  c.seed = 1;
  train(c, data, valid, d3.string());
  CHECK(slurp(d1 / "metrics.csv") != slurp(d3 / "metrics.csv"));

  const auto log = slurp(d1 / "metrics.csv");
  CHECK(log.starts_with("step,epoch,split,bce,dpcl,ortho,suppress,total,lr\n"));
  CHECK(log.find(",valid,") != std::string::npos);
}

TEST_CASE("make_example: label count must match windows") {
  MixtureSpec s;
  s.duration_s = 4.0;
  auto rec = synth_mixture(s);
  const auto ex = make_example(rec, 4);
  CHECK(ex.labels.columns() == 4);
  CHECK(window_images(ex.windows, 2, 5).shape() == num::Shape{5, 1, 15, 23});
  rec.labels = rec.labels.slice(0, rec.labels.frames() - 1);
  CHECK_THROWS_AS(make_example(rec, 4), DimensionError);
}
