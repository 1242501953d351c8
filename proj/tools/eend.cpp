#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "eend/error.hpp"
#include "eend/eval/corpus.hpp"
#include "eend/eval/diarization.hpp"
#include "eend/numerics/ops.hpp"
#include "eend/pipeline/train.hpp"

namespace fs = std::filesystem;
using namespace eend;

namespace {

constexpr int kUsageExit = 2;
constexpr int kFailureExit = 1;

std::optional<std::uint64_t> seed_override() {
  const char* value = std::getenv("EEND_SEED");
  if (!value || !*value) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto seed = std::stoull(value, &used);
    if (used == std::string(value).size()) return seed;
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string("EEND_SEED is not an unsigned integer: ") + value);
}

void synth_data(const std::string& spec_path, const std::string& out_dir) {
  auto spec = eval::load_corpus_spec(spec_path);
  if (const auto seed = seed_override()) spec.seed = *seed;
  eval::write_corpus(out_dir, spec);
  std::size_t total = 0;
  for (const auto& [name, split] : spec.splits) total += split.count;
  std::printf("wrote %zu recordings to %s\n", total, out_dir.c_str());
}

void train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
           std::optional<std::size_t> epochs) {
  auto config = pipeline::load_train_config(config_path);
  if (epochs) config.epochs = *epochs;
  if (const auto seed = seed_override()) config.seed = *seed;
  const std::size_t slots = config.model.n_attractors;
  auto examples = [&](const std::string& split) {
    std::vector<pipeline::TrainingExample> out;
    for (const auto& rec : eval::load_corpus(data_dir, split))
      out.push_back(pipeline::make_example(rec, slots));
    return out;
  };
  const auto train_set = examples("train");
  if (train_set.empty()) throw ConfigError("no training recordings in " + data_dir);
  const auto valid_set = examples("valid");
  fs::create_directories(out_dir);
  const auto result = pipeline::train(config, train_set, valid_set, out_dir);
  std::printf("steps %zu skipped %zu best_epoch %zu best_loss %.6f%s\n", result.steps,
              result.skipped_steps, result.best_epoch, result.best_validation,
              result.diverged ? " diverged" : "");
  if (result.diverged) throw NumericError("training loss became non-finite");
}

void infer(const std::string& ckpt, const std::string& wav, const std::string& rttm,
           const eval::PostProcess& post, std::string file_id) {
  const auto model = model::load_checkpoint<float>(ckpt);
  const auto clip = frontend::load_wav(wav);
  if (file_id.empty()) file_id = fs::path(wav).stem().string();
  eval::RttmFile out;
  out[file_id] = eval::diarize(model, clip, post);
  eval::write_rttm(rttm, out);
}

void score(const std::string& ref_path, const std::string& hyp_path, double collar,
           const std::string& csv_path) {
  const auto ref = eval::read_rttm(ref_path);
  const auto hyp = eval::read_rttm(hyp_path);
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path);
    csv << "file,der,ms,fa,cf,sad_ms,sad_fa,scored_s\n";
    char line[256];
    for (const auto& [file, segments] : ref) {
      const auto found = hyp.find(file);
      const auto r = eval::der_score(segments, found == hyp.end() ? eval::Hypothesis{} : found->second,
                                     collar);
      std::snprintf(line, sizeof(line), "%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.3f\n", file.c_str(),
                    r.der, r.ms, r.fa, r.cf, r.sad_ms, r.sad_fa, r.total_scored_s);
      csv << line;
    }
  }
  const auto r = eval::der_score_files(ref, hyp, collar);
  std::printf("DER %.2f MS %.2f FA %.2f CF %.2f SAD-MS %.2f SAD-FA %.2f\n", r.der, r.ms, r.fa, r.cf,
              r.sad_ms, r.sad_fa);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"End-to-end neural speaker diarization"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "BLAS threads")->check(CLI::PositiveNumber);

  std::string spec_path, data_dir, out_dir, config_path, ckpt, wav, rttm, ref, hyp, csv, file_id;
  std::optional<std::size_t> epochs;
  eval::PostProcess post;
  double collar = 0.25;

  auto* synth_cmd = app.add_subcommand("synth-data", "Generate a labeled synthetic corpus");
  synth_cmd->add_option("--spec", spec_path, "corpus spec JSON")->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus");
  train_cmd->add_option("--config", config_path, "training config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_dir, "corpus directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", out_dir, "run directory")->required();
  train_cmd->add_option("--epochs", epochs, "override the configured epoch count");

  auto* infer_cmd = app.add_subcommand("infer", "Diarize one recording");
  infer_cmd->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--wav", wav, "input WAV")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--rttm", rttm, "output RTTM")->required();
  infer_cmd->add_option("--threshold", post.threshold, "activity threshold")
      ->check(CLI::Range(0.0, 1.0));
  infer_cmd->add_option("--median", post.median_width, "median filter width in frames")
      ->check(CLI::PositiveNumber);
  infer_cmd->add_option("--file-id", file_id, "RTTM file-id (default: WAV stem)");

  auto* score_cmd = app.add_subcommand("score", "Score a hypothesis RTTM");
  score_cmd->add_option("--ref", ref, "reference RTTM")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--hyp", hyp, "hypothesis RTTM")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--collar", collar, "no-score collar in seconds")
      ->check(CLI::NonNegativeNumber);
  score_cmd->add_option("--csv", csv, "per-file report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "eend: usage error: %s\n", e.what());
    return kUsageExit;
  }

  try {
    num::set_blas_threads(threads);
    if (*synth_cmd) synth_data(spec_path, out_dir);
    if (*train_cmd) train(config_path, data_dir, out_dir, epochs);
    if (*infer_cmd) infer(ckpt, wav, rttm, post, file_id);
    if (*score_cmd) score(ref, hyp, collar, csv);
  } catch (const IoError& e) {
    std::fprintf(stderr, "eend: %s\n", e.what());
    return kUsageExit;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "eend: %s\n", e.what());
    return kFailureExit;
  }
  return 0;
}
