#include "eend/eval/diarization.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "eend/error.hpp"
#include "eend/numerics/assignment.hpp"
#include "eend/numerics/ops.hpp"
#include "eend/pipeline/synth.hpp"
#include "eend/pipeline/train.hpp"

namespace eend::eval {

namespace {

constexpr double kFrame = pipeline::kLabelFrameS;

double frame_time(std::size_t t) { return static_cast<double>(t) * kFrame; }

double round_ms(double t) { return std::round(t * 1000.0) / 1000.0; }

std::vector<bool> median_filter(const std::vector<bool>& x, std::size_t width) {
  if (width <= 1) return x;
  const std::size_t half = width / 2;
  std::vector<std::size_t> prefix(x.size() + 1, 0);
  for (std::size_t i = 0; i < x.size(); ++i) prefix[i + 1] = prefix[i] + (x[i] ? 1 : 0);
  std::vector<bool> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t a = i >= half ? i - half : 0;
    const std::size_t b = std::min(x.size(), i + half + 1);
    out[i] = 2 * (prefix[b] - prefix[a]) > b - a;
  }
  return out;
}

void append_runs(const std::vector<bool>& active, const std::string& name, Hypothesis& out) {
  std::size_t t = 0;
  while (t < active.size()) {
    if (!active[t]) {
      ++t;
      continue;
    }
    std::size_t end = t;
    while (end < active.size() && active[end]) ++end;
    out.push_back({frame_time(t), frame_time(end), name});
    t = end;
  }
}

void sort_segments(Hypothesis& h) {
  std::sort(h.begin(), h.end(), [](const Segment& a, const Segment& b) {
    if (a.start != b.start) return a.start < b.start;
    if (a.speaker != b.speaker) return a.speaker < b.speaker;
    return a.end < b.end;
  });
}

std::vector<std::string> speaker_names(const Hypothesis& h) {
  std::set<std::string> names;
  for (const auto& s : h) names.insert(s.speaker);
  return {names.begin(), names.end()};
}

}  // namespace

Hypothesis posterior_to_segments(const std::vector<float>& probs, std::size_t frames,
                                 std::size_t slots, double threshold,
                                 std::size_t median_width) {
  if (probs.size() != frames * slots) {
    throw DimensionError("posteriors hold " + std::to_string(probs.size()) + " values, expected " +
                         std::to_string(frames * slots));
  }
  Hypothesis out;
  std::vector<bool> active(frames);
  for (std::size_t s = 0; s < slots; ++s) {
    for (std::size_t t = 0; t < frames; ++t) active[t] = probs[t * slots + s] > threshold;
    append_runs(median_filter(active, median_width), std::to_string(s), out);
  }
  sort_segments(out);
  return out;
}

Hypothesis labels_to_segments(const losses::LabelMatrix& labels,
                              const std::vector<std::string>& names) {
  Hypothesis out;
  std::vector<bool> active(labels.frames());
  for (std::size_t k = 0; k < labels.columns(); ++k) {
    for (std::size_t t = 0; t < labels.frames(); ++t) active[t] = labels.pm(t, k) > 0;
    append_runs(active, k < names.size() ? names[k] : std::to_string(k), out);
  }
  sort_segments(out);
  return out;
}

losses::LabelMatrix segments_to_labels(const Hypothesis& segments, std::size_t frames,
                                       std::vector<std::string>* names) {
  const auto order = speaker_names(segments);
  losses::LabelMatrix labels(frames, order.size());
  for (const auto& seg : segments) {
    const auto k = static_cast<std::size_t>(
        std::lower_bound(order.begin(), order.end(), seg.speaker) - order.begin());
    for (std::size_t t = 0; t < frames; ++t) {
      const double centre = frame_time(t) + 0.5 * kFrame;
      if (centre >= seg.start && centre < seg.end) labels.set_active(t, k, true);
    }
  }
  if (names) *names = order;
  return labels;
}

double total_duration(const Hypothesis& segments) {
  double total = 0.0;
  for (const auto& s : segments) total += s.end - s.start;
  return total;
}

DerReport der_score(const Hypothesis& ref, const Hypothesis& hyp, double collar_s) {
  for (const auto* h : {&ref, &hyp}) {
    for (const auto& s : *h) {
      if (!std::isfinite(s.start) || !std::isfinite(s.end) || s.end < s.start)
        throw ScoringError("invalid segment for speaker " + s.speaker);
    }
  }
  const auto ref_names = speaker_names(ref);
  const auto hyp_names = speaker_names(hyp);
  auto index_of = [](const std::vector<std::string>& names, const std::string& n) {
    return static_cast<std::size_t>(std::lower_bound(names.begin(), names.end(), n) -
                                    names.begin());
  };

  // Elementary intervals between every boundary, including collar edges.
  std::vector<std::pair<double, double>> no_score;
  std::vector<double> points;
  for (const auto& s : ref) {
    for (double b : {s.start, s.end}) {
      points.push_back(b);
      if (collar_s > 0.0) {
        no_score.emplace_back(b - collar_s, b + collar_s);
        points.push_back(b - collar_s);
        points.push_back(b + collar_s);
      }
    }
  }
  for (const auto& s : hyp) {
    points.push_back(s.start);
    points.push_back(s.end);
  }
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());

  struct Piece {
    double duration;
    std::vector<std::size_t> r, h;
  };
  std::vector<Piece> pieces;
  std::vector<double> overlap(ref_names.size() * hyp_names.size(), 0.0);
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    const double a = points[i], b = points[i + 1];
    const double mid = 0.5 * (a + b);
    if (std::any_of(no_score.begin(), no_score.end(),
                    [mid](const auto& z) { return mid > z.first && mid < z.second; }))
      continue;
    Piece p{b - a, {}, {}};
    for (const auto& s : ref)
      if (mid > s.start && mid < s.end) p.r.push_back(index_of(ref_names, s.speaker));
    for (const auto& s : hyp)
      if (mid > s.start && mid < s.end) p.h.push_back(index_of(hyp_names, s.speaker));
    for (auto* v : {&p.r, &p.h}) {
      std::sort(v->begin(), v->end());
      v->erase(std::unique(v->begin(), v->end()), v->end());
    }
    if (p.r.empty() && p.h.empty()) continue;
    for (std::size_t r : p.r)
      for (std::size_t h : p.h) overlap[r * hyp_names.size() + h] += p.duration;
    pieces.push_back(std::move(p));
  }

  // Optimal one-to-one mapping ref -> hyp maximizing co-active time.
  const std::size_t nr = ref_names.size(), nh = hyp_names.size();
  std::vector<long> mapped(nr, -1);
  if (nr > 0 && nh > 0) {
    if (nr <= nh) {
      std::vector<double> cost(nr * nh);
      for (std::size_t i = 0; i < cost.size(); ++i) cost[i] = -overlap[i];
      const auto choice = num::solve_assignment(cost, nr, nh);
      for (std::size_t r = 0; r < nr; ++r) mapped[r] = static_cast<long>(choice[r]);
    } else {
      std::vector<double> cost(nh * nr);
      for (std::size_t h = 0; h < nh; ++h)
        for (std::size_t r = 0; r < nr; ++r) cost[h * nr + r] = -overlap[r * nh + h];
      const auto choice = num::solve_assignment(cost, nh, nr);
      for (std::size_t h = 0; h < nh; ++h) mapped[choice[h]] = static_cast<long>(h);
    }
  }

  double total = 0.0, ms = 0.0, fa = 0.0, cf = 0.0, speech = 0.0, sad_ms = 0.0, sad_fa = 0.0;
  for (const auto& p : pieces) {
    const double nref = static_cast<double>(p.r.size());
    const double nhyp = static_cast<double>(p.h.size());
    double correct = 0.0;
    for (std::size_t r : p.r)
      if (mapped[r] >= 0 &&
          std::binary_search(p.h.begin(), p.h.end(), static_cast<std::size_t>(mapped[r])))
        correct += 1.0;
    total += p.duration * nref;
    ms += p.duration * std::max(0.0, nref - nhyp);
    fa += p.duration * std::max(0.0, nhyp - nref);
    cf += p.duration * (std::min(nref, nhyp) - correct);
    if (!p.r.empty()) speech += p.duration;
    if (!p.r.empty() && p.h.empty()) sad_ms += p.duration;
    if (p.r.empty() && !p.h.empty()) sad_fa += p.duration;
  }
  if (total <= 0.0) throw ScoringError("reference has no scored speech");

  DerReport rep;
  rep.ms = 100.0 * ms / total;
  rep.fa = 100.0 * fa / total;
  rep.cf = 100.0 * cf / total;
  rep.der = rep.ms + rep.fa + rep.cf;
  rep.sad_ms = 100.0 * sad_ms / speech;
  rep.sad_fa = 100.0 * sad_fa / speech;
  rep.total_scored_s = total;
  rep.speech_scored_s = speech;
  return rep;
}

DerReport der_score_files(const std::map<std::string, Hypothesis>& ref,
                          const std::map<std::string, Hypothesis>& hyp, double collar_s) {
  double total = 0.0, ms = 0.0, fa = 0.0, cf = 0.0, speech = 0.0, sad_ms = 0.0, sad_fa = 0.0;
  for (const auto& [file, segments] : ref) {
    const auto found = hyp.find(file);
    const auto rep = der_score(segments, found == hyp.end() ? Hypothesis{} : found->second, collar_s);
    total += rep.total_scored_s;
    ms += rep.ms * rep.total_scored_s;
    fa += rep.fa * rep.total_scored_s;
    cf += rep.cf * rep.total_scored_s;
    speech += rep.speech_scored_s;
    sad_ms += rep.sad_ms * rep.speech_scored_s;
    sad_fa += rep.sad_fa * rep.speech_scored_s;
  }
  if (total <= 0.0) throw ScoringError("reference has no scored speech");
  DerReport rep;
  rep.ms = ms / total;
  rep.fa = fa / total;
  rep.cf = cf / total;
  rep.der = rep.ms + rep.fa + rep.cf;
  rep.sad_ms = sad_ms / speech;
  rep.sad_fa = sad_fa / speech;
  rep.total_scored_s = total;
  rep.speech_scored_s = speech;
  return rep;
}

void write_rttm(const std::string& path, const RttmFile& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  char line[512];
  for (const auto& [file, segments] : content) {
    for (const auto& s : segments) {
      const double start = round_ms(s.start);
      const double dur = round_ms(round_ms(s.end) - start);
      std::snprintf(line, sizeof(line), "SPEAKER %s 1 %.3f %.3f <NA> <NA> %s <NA> <NA>\n",
                    file.c_str(), start, dur, s.speaker.c_str());
      out << line;
    }
  }
  if (!out) throw IoError("write failed for " + path);
}

RttmFile read_rttm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  RttmFile result;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t;) tok.push_back(t);
    if (tok.empty() || tok[0].starts_with("#")) continue;
    auto fail = [&](const std::string& why) {
      throw ParseError(path + ":" + std::to_string(number) + ": " + why);
    };
    if (tok[0] != "SPEAKER") fail("expected SPEAKER record, got '" + tok[0] + "'");
    if (tok.size() < 8) fail("expected at least 8 fields");
    double tbeg = 0.0, tdur = 0.0;
    try {
      std::size_t used = 0;
      tbeg = std::stod(tok[3], &used);
      if (used != tok[3].size()) fail("bad onset '" + tok[3] + "'");
      tdur = std::stod(tok[4], &used);
      if (used != tok[4].size()) fail("bad duration '" + tok[4] + "'");
    } catch (const std::logic_error&) {
      fail("bad time field");
    }
    if (!std::isfinite(tbeg) || !std::isfinite(tdur) || tbeg < 0.0) fail("bad onset");
    if (tdur <= 0.0) fail("duration must be positive");
    result[tok[1]].push_back({round_ms(tbeg), round_ms(tbeg + tdur), tok[7]});
  }
  return result;
}

std::vector<float> speaker_posteriors(const model::EendModel<float>& model,
                                      const frontend::AudioClip& clip) {
  frontend::MelFrames mel = frontend::log_mel(clip);
  frontend::normalize_mel(mel);
  const auto windows = frontend::window_stack(mel);
  num::NoGradGuard no_grad;
  const auto out = model.forward(pipeline::window_images(windows, 0, windows.num_windows));
  const auto probs = num::sigmoid(out.logits);
  return {probs.data().begin(), probs.data().end()};
}

Hypothesis diarize(const model::EendModel<float>& model, const frontend::AudioClip& clip,
                   const PostProcess& post) {
  const auto probs = speaker_posteriors(model, clip);
  const std::size_t slots = model.config().n_attractors;
  return posterior_to_segments(probs, probs.size() / slots, slots, post.threshold,
                               post.median_width);
}

}  // namespace eend::eval
