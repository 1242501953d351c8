#include "eend/pipeline/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "eend/error.hpp"
#include "eend/frontend/features.hpp"

namespace eend::pipeline {

void to_json(nlohmann::json& j, const MixtureSpec& s) {
  j = nlohmann::json{{"n_speakers", s.n_speakers},
                     {"duration_s", s.duration_s},
                     {"overlap_ratio", s.overlap_ratio},
                     {"noise_snr_db", s.noise_snr_db},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, MixtureSpec& s) {
  const MixtureSpec d;
  s.n_speakers = j.value("n_speakers", d.n_speakers);
  s.duration_s = j.value("duration_s", d.duration_s);
  s.overlap_ratio = j.value("overlap_ratio", d.overlap_ratio);
  s.noise_snr_db = j.value("noise_snr_db", d.noise_snr_db);
  s.seed = j.value("seed", d.seed);
}

double overlap_fraction(const losses::LabelMatrix& labels) {
  std::size_t speech = 0, overlap = 0;
  for (std::size_t t = 0; t < labels.frames(); ++t) {
    std::size_t active = 0;
    for (std::size_t k = 0; k < labels.columns(); ++k) active += labels.y01(t, k);
    speech += active >= 1;
    overlap += active >= 2;
  }
  return speech == 0 ? 0.0 : static_cast<double>(overlap) / static_cast<double>(speech);
}

std::size_t crop_frames(double crop_s) {
  return static_cast<std::size_t>(std::llround(crop_s / kLabelFrameS));
}

std::pair<std::size_t, std::size_t> window_sample_span(std::size_t start, std::size_t count) {
  const frontend::MelConfig mel;
  const std::size_t window_hop = mel.hop_samples() * frontend::kWindowHop;
  const std::size_t window_len =
      mel.hop_samples() * (frontend::kWindowFrames - 1) + mel.window_samples();
  return {start * window_hop, (start + count - 1) * window_hop + window_len};
}

namespace {

struct Voice {
  double f0;
  double centre_hz;
  double width_hz;
  double vibrato_hz;
  double syllable_hz;
};

// Distinct pitch and formant regions; each recording draws from these.
constexpr Voice kPalette[] = {
    {110.0, 450.0, 250.0, 4.0, 3.5},  {135.0, 800.0, 300.0, 5.0, 4.0},
    {165.0, 1250.0, 320.0, 4.5, 4.5}, {200.0, 1800.0, 350.0, 5.5, 3.8},
    {240.0, 2450.0, 380.0, 4.2, 4.2}, {285.0, 3200.0, 400.0, 5.2, 3.2},
};
constexpr std::size_t kPaletteSize = std::size(kPalette);
constexpr int kMaxAttempts = 64;
constexpr double kOverlapTolerance = 0.05;

// Per-speaker activity on the label grid, or empty when the draw missed the
// overlap target or left a speaker silent.
std::vector<std::vector<bool>> place_turns(const MixtureSpec& spec, std::size_t frames,
                                           std::mt19937_64& rng) {
  const std::size_t n = spec.n_speakers;
  std::vector<std::vector<bool>> active(n, std::vector<bool>(frames, false));
  std::vector<std::size_t> count(frames, 0);
  std::size_t speech = 0, overlapped = 0;
  auto place = [&](std::size_t spk, std::size_t a, std::size_t b) {
    for (std::size_t t = a; t < b; ++t) {
      if (active[spk][t]) continue;
      active[spk][t] = true;
      if (++count[t] == 1) ++speech;
      if (count[t] == 2) ++overlapped;
    }
  };

  std::uniform_int_distribution<std::size_t> length(10, 40);
  std::uniform_int_distribution<std::size_t> gap(0, 8);
  std::uniform_int_distribution<std::size_t> who(0, n - 1);
  std::size_t last_spk = who(rng);
  std::size_t prev_start = 0, prev_end = std::uniform_int_distribution<std::size_t>(0, 10)(rng);
  bool first = true;
  while (prev_end < frames) {
    std::size_t spk = who(rng);
    if (n > 1)
      while (spk == last_spk) spk = who(rng);
    const std::size_t len = length(rng);
    std::size_t start = prev_end;
    const double ratio = speech == 0 ? 0.0 : static_cast<double>(overlapped) / speech;
    if (!first && spec.overlap_ratio > 0.0 && ratio < spec.overlap_ratio) {
      const std::size_t room = std::min(len, prev_end - prev_start);
      if (room > 2) start = prev_end - std::uniform_int_distribution<std::size_t>(2, room - 1)(rng);
    } else if (!first) {
      start = prev_end + gap(rng);
    }
    const std::size_t end = std::min(start + len, frames);
    if (start >= frames || end - start < 3) break;
    place(spk, start, end);
    prev_start = start;
    prev_end = std::max(prev_end, end);
    last_spk = spk;
    first = false;
  }

  for (std::size_t k = 0; k < n; ++k)
    if (std::find(active[k].begin(), active[k].end(), true) == active[k].end()) return {};
  const double ratio = speech == 0 ? 0.0 : static_cast<double>(overlapped) / speech;
  if (std::abs(ratio - spec.overlap_ratio) > kOverlapTolerance) return {};
  return active;
}

void render_voice(const Voice& v, const std::vector<bool>& active, std::mt19937_64& rng,
                  std::vector<double>& out) {
  const double fs = frontend::kSampleRate;
  const std::size_t per_frame = static_cast<std::size_t>(fs * kLabelFrameS);
  const std::size_t fade = static_cast<std::size_t>(0.01 * fs);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double gain = 0.7 + 0.3 * unit(rng);
  const double am_phase = unit(rng) * std::numbers::pi;

  std::vector<double> harmonic_phase;
  std::size_t t = 0;
  while (t < active.size()) {
    if (!active[t]) {
      ++t;
      continue;
    }
    std::size_t end = t;
    while (end < active.size() && active[end]) ++end;
    const std::size_t a = t * per_frame;
    const std::size_t b = std::min(end * per_frame, out.size());
    const double f0 = v.f0 * (0.97 + 0.06 * unit(rng));
    const std::size_t harmonics = static_cast<std::size_t>(3900.0 / (f0 * 1.03));
    harmonic_phase.assign(harmonics, 0.0);
    for (auto& p : harmonic_phase) p = unit(rng) * 2.0 * std::numbers::pi;
    std::vector<double> weight(harmonics);
    for (std::size_t h = 0; h < harmonics; ++h) {
      const double f = f0 * static_cast<double>(h + 1);
      const double z = (f - v.centre_hz) / v.width_hz;
      weight[h] = std::exp(-0.5 * z * z) + 0.05;
    }
    std::vector<double> seg(b - a, 0.0);
    double power = 0.0;
    for (std::size_t i = 0; i < seg.size(); ++i) {
      const double time = static_cast<double>(a + i) / fs;
      const double inst = f0 * (1.0 + 0.02 * std::sin(2.0 * std::numbers::pi * v.vibrato_hz * time));
      double s = 0.0;
      for (std::size_t h = 0; h < harmonics; ++h) {
        harmonic_phase[h] += 2.0 * std::numbers::pi * inst * static_cast<double>(h + 1) / fs;
        s += weight[h] * std::sin(harmonic_phase[h]);
      }
      const double am = std::sin(std::numbers::pi * v.syllable_hz * time + am_phase);
      s *= 0.35 + 0.65 * am * am;
      const double edge = std::min({1.0, static_cast<double>(i) / fade,
                                    static_cast<double>(seg.size() - i) / fade});
      seg[i] = s * edge;
      power += seg[i] * seg[i];
    }
    const double rms = std::sqrt(power / std::max<std::size_t>(seg.size(), 1));
    if (rms > 0.0)
      for (std::size_t i = 0; i < seg.size(); ++i) out[a + i] += gain * seg[i] / rms;
    t = end;
  }
}

}  // namespace

LabeledRecording synth_mixture(const MixtureSpec& spec) {
  if (spec.n_speakers == 0 || spec.n_speakers > kPaletteSize) {
    throw GenerationError("n_speakers must be in 1.." + std::to_string(kPaletteSize));
  }
  if (spec.overlap_ratio < 0.0 || spec.overlap_ratio > 1.0) {
    throw GenerationError("overlap_ratio must be in [0, 1]");
  }
  if (spec.n_speakers == 1 && spec.overlap_ratio > 0.0) {
    throw GenerationError("a single speaker cannot overlap");
  }
  const std::size_t samples = frontend::AudioClip::samples_for(spec.duration_s);
  if (samples < window_sample_span(0, 1).second) {
    throw GenerationError("duration " + std::to_string(spec.duration_s) +
                          " s is shorter than one analysis window");
  }
  const std::size_t frames = frontend::frontend_frames(samples);

  std::mt19937_64 rng(spec.seed);
  std::vector<std::vector<bool>> active;
  for (int attempt = 0; attempt < kMaxAttempts && active.empty(); ++attempt)
    active = place_turns(spec, frames, rng);
  if (active.empty()) {
    throw GenerationError("could not reach overlap ratio " + std::to_string(spec.overlap_ratio) +
                          " in " + std::to_string(kMaxAttempts) + " attempts");
  }

  std::vector<std::size_t> palette(kPaletteSize);
  for (std::size_t i = 0; i < kPaletteSize; ++i) palette[i] = i;
  std::shuffle(palette.begin(), palette.end(), rng);

  std::vector<double> mix(samples, 0.0);
  for (std::size_t k = 0; k < spec.n_speakers; ++k) {
    Voice v = kPalette[palette[k]];
    std::uniform_real_distribution<double> jitter(0.95, 1.05);
    v.f0 *= jitter(rng);
    v.centre_hz *= jitter(rng);
    render_voice(v, active[k], rng, mix);
  }

  double power = 0.0;
  for (double s : mix) power += s * s;
  power /= static_cast<double>(samples);
  const double noise_std = std::sqrt(power / std::pow(10.0, spec.noise_snr_db / 10.0));
  std::normal_distribution<double> noise(0.0, noise_std > 0.0 ? noise_std : 1e-4);
  double peak = 0.0;
  for (double& s : mix) {
    s += noise(rng);
    peak = std::max(peak, std::abs(s));
  }
  const double norm = peak > 0.9 ? 0.9 / peak : 1.0;

  LabeledRecording rec;
  rec.id = "mix" + std::to_string(spec.seed);
  rec.clip.samples.resize(samples);
  for (std::size_t i = 0; i < samples; ++i)
    rec.clip.samples[i] = static_cast<float>(mix[i] * norm);
  rec.labels = losses::LabelMatrix(frames, spec.n_speakers);
  for (std::size_t k = 0; k < spec.n_speakers; ++k) {
    for (std::size_t t = 0; t < frames; ++t) {
      if (!active[k][t]) continue;
      rec.labels.set_active(t, k, true);
      if (t == 0 || !active[k][t - 1]) rec.utterances.push_back({k, t, t + 1});
      else rec.utterances.back().end = t + 1;
    }
  }
  std::sort(rec.utterances.begin(), rec.utterances.end(),
            [](const Utterance& a, const Utterance& b) {
              return a.start != b.start ? a.start < b.start : a.speaker < b.speaker;
            });
  return rec;
}

LabeledRecording crop_sample(const LabeledRecording& rec, double crop_s, std::mt19937_64& rng) {
  const std::size_t total = rec.labels.frames();
  const std::size_t k = crop_frames(crop_s);
  if (k == 0) throw ConfigError("crop length must cover at least one label frame");
  if (k >= total) return rec;
  const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, total - k)(rng);
  const auto [first, last] = window_sample_span(offset, k);

  LabeledRecording out;
  out.id = rec.id;
  out.clip.samples.assign(rec.clip.samples.begin() + static_cast<std::ptrdiff_t>(first),
                          rec.clip.samples.begin() + static_cast<std::ptrdiff_t>(last));
  out.labels = rec.labels.slice(offset, k);
  for (const auto& u : rec.utterances) {
    const std::size_t a = std::max(u.start, offset), b = std::min(u.end, offset + k);
    if (a < b) out.utterances.push_back({u.speaker, a - offset, b - offset});
  }
  return out;
}

}  // namespace eend::pipeline
