#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "eend/frontend/features.hpp"
#include "eend/losses/losses.hpp"
#include "eend/model/eend.hpp"
#include "eend/pipeline/synth.hpp"
#include "json.hpp"

namespace eend::pipeline {

struct OneCycle {
  double warmup_fraction = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
};

// Cosine ramp from max_lr / div_factor to max_lr over the warmup steps, then
// cosine decay to max_lr / final_div_factor at the last step.
double one_cycle_lr(std::size_t step, std::size_t total_steps, double max_lr,
                    const OneCycle& shape = {});

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Applies one update from the accumulated gradients. A non-finite gradient
  // anywhere skips the whole step and returns false.
  bool step(num::ParamStore<float>& params, double lr);

  std::size_t steps_taken() const { return t_; }
  std::size_t skipped_steps() const { return skipped_; }

 private:
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
};

// Rescales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(num::ParamStore<float>& params, double max_norm);

struct TrainConfig {
  model::ModelConfig model;
  std::size_t batch_size = 64;
  std::size_t epochs = 2000;
  double max_lr = 1e-3;
  double crop_s = 50.0;
  std::uint64_t seed = 0;
  losses::LossWeights weights;
  losses::DpclMode dpcl_mode = losses::DpclMode::kMoDpcl;
  OneCycle schedule;
  AdamWConfig optimizer;
  double clip_norm = 5.0;
  std::size_t validate_every = 10;  // epochs
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::string& path);

// Normalized log-mel windows of a whole recording plus its labels padded to
// the model's slot count.
struct TrainingExample {
  std::string id;
  frontend::WindowTensor windows;
  losses::LabelMatrix labels;
};

TrainingExample make_example(const LabeledRecording& rec, std::size_t slots);

// Windows [start, start + count) as a [count, 1, 15, 23] float tensor.
num::Tensor<float> window_images(const frontend::WindowTensor& windows, std::size_t start,
                                 std::size_t count);

struct TrainResult {
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;
  double best_validation = 0.0;
  std::size_t best_epoch = 0;
  std::vector<double> train_losses;  // one per optimizer step
  bool diverged = false;
};

// Writes metrics.csv, loss_debug.csv, best.ckpt and final.ckpt into out_dir.
// With zero epochs only the initial checkpoints are written. A non-finite
// training loss stops the run; best.ckpt then holds the last good state.
TrainResult train(const TrainConfig& config, const std::vector<TrainingExample>& train_set,
                  const std::vector<TrainingExample>& valid_set, const std::string& out_dir);

// Loss of the model on whole recordings, without gradients.
double validation_loss(const model::EendModel<float>& model,
                       const std::vector<TrainingExample>& examples,
                       const losses::LossWeights& weights, losses::DpclMode mode);

}  // namespace eend::pipeline
