#include "eend/pipeline/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>

#include "eend/error.hpp"
#include "eend/numerics/ops.hpp"

namespace eend::pipeline {

namespace fs = std::filesystem;

double one_cycle_lr(std::size_t step, std::size_t total_steps, double max_lr,
                    const OneCycle& shape) {
  if (step >= total_steps) {
    throw ScheduleError("step " + std::to_string(step) + " outside schedule of " +
                        std::to_string(total_steps) + " steps");
  }
  const auto warmup =
      static_cast<std::size_t>(std::floor(shape.warmup_fraction * static_cast<double>(total_steps)));
  const double initial = max_lr / shape.div_factor;
  const double final_lr = max_lr / shape.final_div_factor;
  if (step < warmup) {
    const double pct = static_cast<double>(step) / static_cast<double>(warmup);
    return initial + (max_lr - initial) * 0.5 * (1.0 - std::cos(std::numbers::pi * pct));
  }
  const std::size_t span = total_steps - 1 - warmup;
  if (span == 0) return max_lr;
  const double pct = static_cast<double>(step - warmup) / static_cast<double>(span);
  return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * pct));
}

bool AdamW::step(num::ParamStore<float>& params, double lr) {
  const auto& entries = params.entries();
  for (const auto& [name, p] : entries) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
    }
  }
  if (m_.empty()) {
    for (const auto& [name, p] : entries) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    num::Tensor<float> p = entries[i].second;
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? static_cast<double>(p.grad()[j]) : 0.0;
      double w = static_cast<double>(data[j]);
      w -= lr * config_.weight_decay * w;
      m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g;
      v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g * g;
      w -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.eps);
      data[j] = static_cast<float>(w);
    }
  }
  return true;
}

double clip_grad_norm(num::ParamStore<float>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params.entries())
    if (p.has_grad())
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (const auto& [name, p] : params.entries()) {
      if (!p.has_grad()) continue;
      num::Tensor<float> t = p;
      for (float& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"model", c.model},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"max_lr", c.max_lr},
      {"crop_s", c.crop_s},
      {"seed", c.seed},
      {"weights",
       {{"bce", c.weights.bce},
        {"dpcl", c.weights.dpcl},
        {"ortho", c.weights.ortho},
        {"suppress", c.weights.suppress}}},
      {"dpcl_mode", losses::to_string(c.dpcl_mode)},
      {"schedule",
       {{"warmup_fraction", c.schedule.warmup_fraction},
        {"div_factor", c.schedule.div_factor},
        {"final_div_factor", c.schedule.final_div_factor}}},
      {"optimizer",
       {{"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"clip_norm", c.clip_norm},
      {"validate_every", c.validate_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.model = j.value("model", d.model);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.max_lr = j.value("max_lr", d.max_lr);
  c.crop_s = j.value("crop_s", d.crop_s);
  c.seed = j.value("seed", d.seed);
  const auto w = j.value("weights", nlohmann::json::object());
  c.weights.bce = w.value("bce", d.weights.bce);
  c.weights.dpcl = w.value("dpcl", d.weights.dpcl);
  c.weights.ortho = w.value("ortho", d.weights.ortho);
  c.weights.suppress = w.value("suppress", d.weights.suppress);
  c.dpcl_mode = losses::parse_dpcl_mode(j.value("dpcl_mode", losses::to_string(d.dpcl_mode)));
  const auto s = j.value("schedule", nlohmann::json::object());
  c.schedule.warmup_fraction = s.value("warmup_fraction", d.schedule.warmup_fraction);
  c.schedule.div_factor = s.value("div_factor", d.schedule.div_factor);
  c.schedule.final_div_factor = s.value("final_div_factor", d.schedule.final_div_factor);
  const auto o = j.value("optimizer", nlohmann::json::object());
  c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
  c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
  c.optimizer.eps = o.value("eps", d.optimizer.eps);
  c.optimizer.weight_decay = o.value("weight_decay", d.optimizer.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.validate_every = j.value("validate_every", d.validate_every);
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  TrainConfig c;
  try {
    c = nlohmann::json::parse(in).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  c.model.validate();
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (crop_frames(c.crop_s) == 0) throw ConfigError("crop_s must cover one label frame");
  if (c.validate_every == 0) throw ConfigError("validate_every must be positive");
  return c;
}

TrainingExample make_example(const LabeledRecording& rec, std::size_t slots) {
  frontend::MelFrames mel = frontend::log_mel(rec.clip);
  frontend::normalize_mel(mel);
  TrainingExample ex;
  ex.id = rec.id;
  ex.windows = frontend::window_stack(mel);
  if (ex.windows.num_windows != rec.labels.frames()) {
    throw DimensionError(rec.id + ": " + std::to_string(rec.labels.frames()) +
                         " label frames but " + std::to_string(ex.windows.num_windows) +
                         " windows");
  }
  ex.labels = rec.labels.with_columns(slots);
  return ex;
}

num::Tensor<float> window_images(const frontend::WindowTensor& windows, std::size_t start,
                                 std::size_t count) {
  const auto part = frontend::slice_windows(windows, start, count);
  return num::Tensor<float>({count, 1, part.window_frames, part.n_mels}, part.values);
}

double validation_loss(const model::EendModel<float>& model,
                       const std::vector<TrainingExample>& examples,
                       const losses::LossWeights& weights, losses::DpclMode mode) {
  if (examples.empty()) return 0.0;
  num::NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& ex : examples) {
    const auto out = model.forward(window_images(ex.windows, 0, ex.windows.num_windows));
    total += losses::total_loss(out, ex.labels, weights, mode).total_value;
  }
  return total / static_cast<double>(examples.size());
}

namespace {

struct Components {
  double bce = 0, dpcl = 0, ortho = 0, suppress = 0, total = 0;

  void add(const losses::LossBundle<float>& b, double w) {
    bce += w * b.bce;
    dpcl += w * b.dpcl;
    ortho += w * b.ortho;
    suppress += w * b.suppress;
    total += w * b.total_value;
  }
};

void metrics_row(std::ofstream& out, std::size_t step, std::size_t epoch, const char* split,
                 const Components& c, double lr) {
  out << step << ',' << epoch << ',' << split << ',' << c.bce << ',' << c.dpcl << ',' << c.ortho
      << ',' << c.suppress << ',' << c.total << ',' << lr << '\n';
  out.flush();
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<TrainingExample>& train_set,
                  const std::vector<TrainingExample>& valid_set, const std::string& out_dir) {
  config.model.validate();
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::size_t crop = crop_frames(config.crop_s);
  if (crop == 0) throw ConfigError("crop_s must cover one label frame");
  if (config.epochs > 0 && train_set.empty()) throw ConfigError("empty training set");
  num::set_blas_threads(1);

  fs::create_directories(out_dir);
  const std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
  const std::string final_path = (fs::path(out_dir) / "final.ckpt").string();
  std::ofstream metrics(fs::path(out_dir) / "metrics.csv");
  if (!metrics) throw IoError("cannot write metrics in " + out_dir);
  metrics << std::setprecision(9);
  metrics << "step,epoch,split,bce,dpcl,ortho,suppress,total,lr\n";
  const auto debug_path = fs::path(out_dir) / "loss_debug.csv";
  fs::remove(debug_path);
  losses::LossLog debug(debug_path.string());

  model::EendModel<float> model(config.model);
  AdamW optimizer(config.optimizer);
  std::mt19937_64 rng(config.seed);
  TrainResult result;
  save_checkpoint(best_path, model);
  if (config.epochs == 0) {
    save_checkpoint(final_path, model);
    return result;
  }

  const std::size_t per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * per_epoch;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;
  double epoch_loss = 0.0;

  for (std::size_t epoch = 0; epoch < config.epochs && !result.diverged; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t first = b * config.batch_size;
      const std::size_t last = std::min(first + config.batch_size, order.size());
      const double weight = 1.0 / static_cast<double>(last - first);
      const double lr = one_cycle_lr(result.steps, total_steps, config.max_lr, config.schedule);
      model.params().zero_grad();
      Components comp;
      losses::LossBundle<float> bundle;
      for (std::size_t i = first; i < last; ++i) {
        const auto& ex = train_set[order[i]];
        const std::size_t frames = ex.labels.frames();
        const std::size_t count = std::min(crop, frames);
        const std::size_t offset =
            std::uniform_int_distribution<std::size_t>(0, frames - count)(rng);
        const auto out = model.forward(window_images(ex.windows, offset, count));
        bundle = losses::total_loss(out, ex.labels.slice(offset, count), config.weights,
                                    config.dpcl_mode);
        comp.add(bundle, weight);
        if (!std::isfinite(bundle.total_value)) break;
        num::scale(bundle.total, static_cast<float>(weight)).backward();
      }
      bundle.bce = comp.bce;
      bundle.dpcl = comp.dpcl;
      bundle.ortho = comp.ortho;
      bundle.suppress = comp.suppress;
      bundle.total_value = comp.total;
      metrics_row(metrics, result.steps, epoch, "train", comp, lr);
      debug.append(result.steps, bundle, lr);
      if (!std::isfinite(comp.total)) {
        result.diverged = true;
        break;
      }
      result.train_losses.push_back(comp.total);
      epoch_loss += comp.total / static_cast<double>(per_epoch);
      clip_grad_norm(model.params(), config.clip_norm);
      optimizer.step(model.params(), lr);
      ++result.steps;
    }
    if (result.diverged) break;

    const bool last_epoch = epoch + 1 == config.epochs;
    if ((epoch + 1) % config.validate_every == 0 || last_epoch) {
      const double score = valid_set.empty()
                               ? epoch_loss
                               : validation_loss(model, valid_set, config.weights,
                                                 config.dpcl_mode);
      if (!valid_set.empty()) {
        Components v;
        v.total = score;
        metrics_row(metrics, result.steps, epoch, "valid", v, 0.0);
      }
      if (std::isfinite(score) && (!have_best || score < result.best_validation)) {
        have_best = true;
        result.best_validation = score;
        result.best_epoch = epoch;
        save_checkpoint(best_path, model);
      }
    }
  }
  result.skipped_steps = optimizer.skipped_steps();
  if (!result.diverged) save_checkpoint(final_path, model);
  return result;
}

}  // namespace eend::pipeline
