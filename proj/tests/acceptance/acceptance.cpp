#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "eend/eval/corpus.hpp"
#include "eend/eval/diarization.hpp"
#include "eend/losses/losses.hpp"
#include "eend/model/eend.hpp"
#include "eend/model/layers.hpp"
#include "eend/numerics/audit.hpp"
#include "eend/numerics/grad_check.hpp"
#include "eend/numerics/ops.hpp"
#include "eend/pipeline/train.hpp"
#include "oracles.hpp"

using namespace eend;
using namespace eend::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path work_dir() {
  const auto dir = fs::current_path() / "acceptance_work";
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Gradient integrity.
Outcome criterion1() {
  const auto t0 = Clock::now();
  num::GradCheckOptions opts;
  opts.tolerance = 1e-4;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  bool ok = true;
  auto record = [&](const num::GradReport& r) {
    ++checks;
    ok &= r.passed && r.max_rel_error < 1e-4;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.op_name;
    }
  };

  const std::vector<std::pair<std::size_t, std::size_t>> shapes{{3, 4}, {5, 7}, {8, 3}};
  std::uint64_t seed = 1000;
  for (auto [r, c] : shapes)
    for (const auto& gc : primitive_cases(r, c, seed++))
      record(num::grad_check(gc.name, gc.fn, gc.inputs, 1e-4));
  for (const auto& gc : convolution_cases(2000))
    record(num::grad_check(gc.name, gc.fn, gc.inputs, 1e-4));

  // Loss components on three instances with T <= 8, S <= 4, E <= 16.
  const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> inst{
      {8, 4, 16, 2}, {6, 3, 8, 2}, {5, 4, 12, 3}};
  for (auto [t, s, e, k] : inst) {
    std::mt19937_64 rng(3000 + t);
    const auto labels = random_labels(t, k, rng).with_columns(s);
    const std::vector<TD> inputs{random_tensor({t, e}, rng), random_tensor({s, e}, rng),
                                 random_tensor({s}, rng), random_tensor({1}, rng)};
    const auto align = losses::pit_align(
        head_only(inputs[0], inputs[1], inputs[2], inputs[3]).logits, labels);
    const auto ordered = losses::slot_labels(labels, align, s);
    auto out = [](const std::vector<TD>& in) { return head_only(in[0], in[1], in[2], in[3]); };
    const std::vector<std::pair<std::string, GradFn>> fns{
        {"bce-pit", [&](const auto& in) { return losses::suppressive_bce(out(in), labels, align).bce; }},
        {"suppress",
         [&](const auto& in) { return losses::suppressive_bce(out(in), labels, align).suppress; }},
        {"mo-dpcl",
         [&](const auto& in) { return losses::dpcl_loss(losses::mo_dpcl_labels<double>(ordered), in[0]); }},
        {"a-dpcl",
         [&](const auto& in) { return losses::dpcl_loss(losses::a_dpcl_labels(ordered, in[1]), in[0]); }},
        {"ortho", [&](const auto& in) { return losses::ortho_loss(in[1], align); }},
        {"total-mo-dpcl",
         [&](const auto& in) {
           return losses::total_loss(out(in), labels, {}, losses::DpclMode::kMoDpcl).total;
         }},
        {"total-a-dpcl",
         [&](const auto& in) {
           return losses::total_loss(out(in), labels, {}, losses::DpclMode::kADpcl).total;
         }},
    };
    for (const auto& [name, fn] : fns) {
      std::vector<TD> copy;
      for (const auto& x : inputs) copy.push_back(x.detach());
      record(num::grad_check(name, fn, copy, 1e-4));
    }
  }

  // Total loss through every parameter of a tiny model.
  {
    std::mt19937_64 rng(4000);
    const auto x0 = random_tensor({6, 8}, rng);
    const auto labels = random_labels(6, 2, rng).with_columns(3);
    model::EendModel<double> net(tiny_config());
    std::vector<TD> wrt;
    for (const auto& e : net.params().entries()) wrt.push_back(e.second);
    opts.max_elements_per_tensor = 4;
    record(num::grad_check(
        "total-through-model",
        [&] {
          return losses::total_loss(net.forward_embeddings(x0), labels, {},
                                    losses::DpclMode::kMoDpcl)
              .total;
        },
        wrt, opts));
  }
  const double elapsed = seconds_since(t0);
  ok &= elapsed < 60.0;
  return {ok, fmt("%zu checks, worst rel err %.2e (%s), %.1f s", checks, worst,
                  worst_name.c_str(), elapsed)};
}

// Sum of the chosen entries in ascending order, so assignments tied through
// identical speaker columns compare bit-for-bit.
double canonical_cost(const std::vector<double>& cost, std::size_t slots,
                      const std::vector<std::size_t>& choice) {
  std::vector<double> picked;
  for (std::size_t i = 0; i < choice.size(); ++i) picked.push_back(cost[i * slots + choice[i]]);
  std::sort(picked.begin(), picked.end());
  return std::accumulate(picked.begin(), picked.end(), 0.0);
}

double exhaustive_cost(const std::vector<double>& cost, std::size_t k, std::size_t s) {
  std::vector<std::size_t> slots(s);
  std::iota(slots.begin(), slots.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    best = std::min(best, canonical_cost(cost, s, {slots.begin(), slots.begin() + static_cast<long>(k)}));
  } while (std::next_permutation(slots.begin(), slots.end()));
  return best;
}

// PIT invariance and assignment optimality.
Outcome criterion2() {
  std::mt19937_64 rng(5000);
  const std::size_t s = 8, e = 6;
  double worst_rel = 0.0;
  std::size_t exact = 0;
  const losses::DpclMode modes[] = {losses::DpclMode::kMoDpcl, losses::DpclMode::kADpcl,
                                    losses::DpclMode::kNone};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(4, 24)(rng);
    const std::size_t k = 1 + trial % 4;
    const auto labels = random_labels(t, k, rng);
    const auto out = head_only(random_tensor({t, e}, rng), random_tensor({s, e}, rng),
                               random_tensor({s}, rng), random_tensor({1}, rng));
    const auto mode = modes[trial % 3];
    const double base = losses::total_loss(out, labels, {}, mode).total_value;
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    losses::LabelMatrix permuted(t, k);
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t c = 0; c < k; ++c) permuted.set_active(f, perm[c], labels.pm(f, c) > 0);
    const double moved = losses::total_loss(out, permuted, {}, mode).total_value;
    worst_rel = std::max(worst_rel, std::abs(moved - base) / std::abs(base));

    const auto cost = losses::pit_cost_matrix(out.logits, labels);
    const auto align = losses::pit_align(out.logits, labels);
    if (canonical_cost(cost, s, align.slots) == exhaustive_cost(cost, k, s)) ++exact;
  }
  return {worst_rel < 1e-6 && exact == 100,
          fmt("worst relative change %.2e, assignment optimal on %zu/100", worst_rel, exact)};
}

double gram_mismatch(const TD& l, const TD& x) {
  double worst = 0.0;
  for (std::size_t i = 0; i < l.dim(0); ++i) {
    for (std::size_t j = 0; j < l.dim(0); ++j) {
      double ll = 0.0, xx = 0.0, ni = 0.0, nj = 0.0;
      for (std::size_t c = 0; c < l.dim(1); ++c) ll += l.at(i, c) * l.at(j, c);
      for (std::size_t c = 0; c < x.dim(1); ++c) {
        xx += x.at(i, c) * x.at(j, c);
        ni += x.at(i, c) * x.at(i, c);
        nj += x.at(j, c) * x.at(j, c);
      }
      worst = std::max(worst, std::abs(ll - xx / std::sqrt(ni * nj)));
    }
  }
  return worst;
}

// DPCL geometry.
Outcome criterion3() {
  bool ok = true;
  const double ulp = 4.0 * std::numeric_limits<double>::epsilon();

  // All four S = 2 activity patterns against each other.
  losses::LabelMatrix patterns(4, 2);
  patterns.set_active(1, 0, true);
  patterns.set_active(2, 1, true);
  patterns.set_active(3, 0, true);
  patterns.set_active(3, 1, true);
  const auto l = losses::mo_dpcl_labels<double>(patterns);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double ip = l.at(i, 0) * l.at(j, 0) + l.at(i, 1) * l.at(j, 1);
      const bool same = i == j;
      const bool complement = patterns.pm(i, 0) == -patterns.pm(j, 0) &&
                              patterns.pm(i, 1) == -patterns.pm(j, 1);
      if (same) ok &= std::abs(ip - 1.0) <= ulp, ++pairs;
      if (complement) ok &= std::abs(ip + 1.0) <= ulp, ++pairs;
    }
  }

  // Identity-based loss against the pairwise oracle.
  std::mt19937_64 rng(6000);
  double worst = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    const auto labels = random_labels(t, 2, rng);
    const auto lt = trial % 2 ? losses::mo_dpcl_labels<double>(labels)
                              : losses::a_dpcl_labels(labels, random_tensor({2, 5}, rng));
    const auto xt = random_tensor({t, 5}, rng);
    const double fast = losses::dpcl_loss(lt, xt).item();
    const double slow = naive_dpcl(lt, xt);
    worst = std::max(worst, std::abs(fast - slow) / std::max(1.0, std::abs(slow)));
  }
  ok &= worst <= 1e-10;

  // Zero loss exactly when the Grams agree.
  std::size_t iff_cases = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto labels = random_labels(16, 2, rng);
    const auto lt = losses::mo_dpcl_labels<double>(labels);
    std::vector<double> x(16 * 4, 0.0);
    for (std::size_t f = 0; f < 16; ++f) {
      const double scale = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
      for (std::size_t c = 0; c < 2; ++c) x[f * 4 + c] = scale * lt.at(f, c);
    }
    const TD matched({16, 4}, x);
    const bool zero_loss = std::abs(losses::dpcl_loss(lt, matched).item()) < 1e-12;
    const bool same_gram = gram_mismatch(lt, matched) < 1e-12;
    ok &= zero_loss && same_gram;
    x[std::uniform_int_distribution<std::size_t>(0, 15)(rng) * 4 + 2] = 1.0;
    const TD broken({16, 4}, x);
    const bool positive = losses::dpcl_loss(lt, broken).item() > 1e-6;
    const bool differs = gram_mismatch(lt, broken) > 1e-6;
    ok &= positive && differs;
    iff_cases += 2;
  }
  return {ok, fmt("%zu Gram target pairs, oracle gap %.1e, %zu zero/non-zero cases", pairs, worst,
                  iff_cases)};
}

// Suppression contract.
Outcome criterion4() {
  bool ok = true;
  std::size_t inactive_checked = 0;
  for (std::uint64_t seed = 7000; seed < 7003; ++seed) {
    std::mt19937_64 rng(seed);
    const auto labels = random_labels(8, 2, rng);
    const auto dirs = random_tensor({4, 16}, rng, 1.0, true);
    const auto out = head_only(random_tensor({8, 16}, rng, 1.0, true), dirs,
                               random_tensor({4}, rng, 1.0, true), random_tensor({1}, rng, 1.0, true));
    const auto align = losses::pit_align(out.logits, labels);
    losses::suppressive_bce(out, labels, align).bce.backward();
    for (std::size_t s = 0; s < 4; ++s) {
      if (align.slot_active(s)) continue;
      ++inactive_checked;
      for (std::size_t e = 0; e < 16; ++e) ok &= dirs.grad()[s * 16 + e] == 0.0;
    }
  }

  std::mt19937_64 rng(7100);
  losses::LabelMatrix labels(8, 3);
  for (std::size_t k = 0; k < 3; ++k) labels.set_active(k, k, true);
  const auto frames = random_tensor({8, 16}, rng);
  auto base = random_tensor({4, 16}, rng);
  losses::Alignment align;
  align.columns = {0, 1, 2};
  align.slots = {0, 1, 2};
  std::vector<double> values;
  for (double norm : {1.0, 0.1, 0.0}) {
    auto dirs = base.detach();
    auto d = dirs.mutable_data();
    double n = 0.0;
    for (std::size_t e = 0; e < 16; ++e) n += d[48 + e] * d[48 + e];
    for (std::size_t e = 0; e < 16; ++e) d[48 + e] *= norm / std::sqrt(n);
    const auto out = head_only(frames, dirs, TD({4}), TD({1}));
    values.push_back(losses::suppressive_bce(out, labels, align).suppress.item());
  }
  ok &= std::abs(values[0] - 1.0) < 1e-12 && std::abs(values[1] - 0.01) < 1e-12 &&
        values[2] == 0.0;
  return {ok && inactive_checked > 0,
          fmt("%zu inactive slots with zero gradient, suppress %.3g / %.3g / %.3g", inactive_checked,
              values[0], values[1], values[2])};
}

// Architecture shape and complexity.
Outcome criterion5() {
  const model::ModelConfig config;
  model::EendModel<float> net(config);
  std::mt19937_64 rng(8000);
  const auto images = random_tensor<float>({500, 1, 15, 23}, rng);
  num::NoGradGuard no_grad;
  num::OpAudit audit;
  const auto out = net.forward(images);
  bool ok = out.logits.shape() == num::Shape{500, 8} && out.frames.shape() == num::Shape{500, 256} &&
            out.attractors.shape() == num::Shape{8, 256} &&
            out.directions.shape() == num::Shape{8, 256};
  ok &= config.depth == 5 && config.latte_dim == 128;
  std::size_t layers = 0;
  for (const auto& [name, tensor] : net.params().entries()) {
    if (name.ends_with(".block.latte.latents")) {
      ++layers;
      ok &= tensor.dim(1) == 128;
    }
    if (name == "model.attractors") ok &= tensor.shape() == num::Shape{8, 256};
  }
  ok &= layers == 5;
  bool square = audit.has_square_axes(500);
  for (const auto& r : audit.records())
    square |= std::count(r.shape.begin(), r.shape.end(), std::size_t{500}) > 1;
  ok &= !square;

  num::ParamStore<float> store;
  model::LatteAttention<float> latte(model::Builder<float>{store, rng, "latte"}, 256, 128, 16, 4);
  auto macs = [&](std::size_t t) {
    const auto x = random_tensor<float>({t, 256}, rng);
    num::OpAudit a;
    latte(x);
    return static_cast<double>(a.macs());
  };
  const double ratio = macs(1000) / macs(500);
  ok &= std::abs(ratio - 2.0) <= 0.02;
  return {ok, fmt("logits %zux%zu, %zu conformer layers, latent attention MAC ratio %.4f, "
                  "T x T intermediate %s",
                  out.logits.dim(0), out.logits.dim(1), layers, ratio, square ? "found" : "absent")};
}

eval::DerReport score_model(const model::EendModel<float>& net,
                            const std::vector<pipeline::LabeledRecording>& recs) {
  eval::RttmFile ref, hyp;
  for (const auto& r : recs) {
    ref[r.id] = eval::labels_to_segments(r.labels);
    hyp[r.id] = eval::diarize(net, r.clip);
  }
  return eval::der_score_files(ref, hyp);
}

double moving_average(const std::vector<double>& xs, std::size_t end_step, std::size_t window) {
  return std::accumulate(xs.begin() + static_cast<long>(end_step + 1 - window),
                         xs.begin() + static_cast<long>(end_step + 1), 0.0) /
         static_cast<double>(window);
}

// End-to-end desk-scale training.
Outcome criterion6() {
  num::set_blas_threads(1);
  const fs::path source(EEND_SOURCE_DIR);
  const auto corpus = eval::load_corpus_spec((source / "configs/desk_corpus.json").string());
  const auto config = pipeline::load_train_config((source / "configs/desk_train.json").string());
  const auto train_recs = eval::synth_split(corpus, "train");
  const auto valid_recs = eval::synth_split(corpus, "valid");
  std::vector<pipeline::TrainingExample> train_set, valid_set;
  for (const auto& r : train_recs)
    train_set.push_back(pipeline::make_example(r, config.model.n_attractors));
  for (const auto& r : valid_recs)
    valid_set.push_back(pipeline::make_example(r, config.model.n_attractors));

  const auto run = work_dir() / "desk_run";
  fs::remove_all(run);
  fs::create_directories(run);
  const auto t0 = Clock::now();
  const auto result = pipeline::train(config, train_set, valid_set, run.string());
  const double elapsed = seconds_since(t0);

  const auto net = model::load_checkpoint<float>((run / "best.ckpt").string());
  const auto train_der = score_model(net, train_recs);
  const auto valid_der = score_model(net, valid_recs);
  eval::RttmFile ref, silence, single;
  for (const auto& r : valid_recs) {
    ref[r.id] = eval::labels_to_segments(r.labels);
    silence[r.id] = {};
    single[r.id] = {{0.0, r.clip.duration_s(), "all"}};
  }
  const double silence_der = eval::der_score_files(ref, silence).der;
  std::set<std::string> found;
  for (const auto& seg : eval::diarize(net, valid_recs.front().clip)) found.insert(seg.speaker);
  const double single_der = eval::der_score_files(ref, single).der;

  const auto& losses = result.train_losses;
  const bool enough_steps = losses.size() > 500;
  const double ma50 = enough_steps ? moving_average(losses, 50, 20) : 0.0;
  const double ma500 = enough_steps ? moving_average(losses, 500, 20) : 0.0;

  const bool ok = !result.diverged && train_recs.size() == 20 && config.epochs == 200 &&
                  elapsed <= 1800.0 && train_der.der <= 10.0 && valid_der.der < silence_der &&
                  valid_der.der < single_der && enough_steps && ma500 < ma50;
  return {ok, fmt("%zu steps in %.0f s, train DER %.2f%%, valid DER %.2f%% (silence %.2f%%, "
                  "single speaker %.2f%%), loss MA@50 %.3f -> MA@500 %.3f, %zu speakers found in %s",
                  result.steps, elapsed, train_der.der, valid_der.der, silence_der, single_der,
                  ma50, ma500, found.size(), valid_recs.front().id.c_str())};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string("\"") + EEND_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

// Determinism and RTTM round trip.
Outcome criterion8() {
  const fs::path source(EEND_SOURCE_DIR);
  const auto dir = work_dir() / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };
  bool ok = run_cli("synth-data --spec " + q(source / "configs/smoke_corpus.json") + " --out " +
                        q(dir / "data"),
                    dir / "synth.log") == 0;
  for (const char* name : {"run_a", "run_b"}) {
    ok &= run_cli("train --config " + q(source / "configs/smoke_train.json") + " --data " +
                      q(dir / "data") + " --out " + q(dir / name),
                  dir / (std::string(name) + ".log")) == 0;
  }
  const auto metrics_a = read_file(dir / "run_a/metrics.csv");
  const bool same_metrics = !metrics_a.empty() && metrics_a == read_file(dir / "run_b/metrics.csv");
  const bool same_ckpt = read_file(dir / "run_a/final.ckpt") == read_file(dir / "run_b/final.ckpt");
  ok &= same_metrics && same_ckpt;

  std::mt19937_64 rng(9000);
  std::size_t round_trips = 0;
  for (int trial = 0; trial < 50; ++trial) {
    eval::RttmFile content;
    const int files = 1 + trial % 3;
    for (int f = 0; f < files; ++f) {
      auto& segs = content["rec" + std::to_string(f)];
      for (int i = 0; i < 20; ++i) {
        const long start = std::uniform_int_distribution<long>(0, 600000)(rng);
        const long dur = std::uniform_int_distribution<long>(1, 20000)(rng);
        segs.push_back({static_cast<double>(start) / 1000.0,
                        static_cast<double>(start + dur) / 1000.0, "spk" + std::to_string(i % 3)});
      }
    }
    const auto path = dir / "round_trip.rttm";
    eval::write_rttm(path.string(), content);
    if (eval::read_rttm(path.string()) == content) ++round_trips;
  }
  ok &= round_trips == 50;
  return {ok, fmt("metrics %s, checkpoints %s, RTTM round trips %zu/50",
                  same_metrics ? "identical" : "differ", same_ckpt ? "identical" : "differ",
                  round_trips)};
}

// Scorer fidelity.
Outcome criterion7() {
  std::mt19937_64 rng(10000);
  double worst_gap = 0.0, worst_sum = 0.0, worst_self = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto ref = random_reference(rng, 2 + trial % 2);
    const auto hyp = perturb(ref, rng);
    const double collar = trial % 2 ? 0.25 : 0.0;
    const auto fast = eval::der_score(ref, hyp, collar);
    const auto slow = brute_force_der(ref, hyp, collar);
    worst_gap = std::max({worst_gap, std::abs(fast.der - slow.der), std::abs(fast.ms - slow.ms),
                          std::abs(fast.fa - slow.fa), std::abs(fast.cf - slow.cf)});
    worst_sum = std::max(worst_sum, std::abs(fast.ms + fast.fa + fast.cf - fast.der));
    worst_self = std::max(worst_self, eval::der_score(ref, ref, collar).der);
  }
  return {worst_gap < 0.05 && worst_sum < 0.01 && worst_self == 0.0,
          fmt("max gap to frame scorer %.4f points, recomposition %.1e, DER(ref, ref) %.1f",
              worst_gap, worst_sum, worst_self)};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient integrity", criterion1},   {"PIT invariance", criterion2},
      {"DPCL geometry", criterion3},        {"suppression contract", criterion4},
      {"architecture shape and complexity", criterion5},
      {"desk-scale training", criterion6},  {"scorer fidelity", criterion7},
      {"determinism", criterion8},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && std::find(selected.begin(), selected.end(), id) == selected.end())
      continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
