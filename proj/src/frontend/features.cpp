#include "eend/frontend/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "eend/error.hpp"

namespace eend::frontend {

namespace {

double hz_to_mel(double hz) { return 1127.0 * std::log1p(hz / 700.0); }

struct FftwPlan {
  fftw_plan plan = nullptr;
  ~FftwPlan() {
    if (plan) fftw_destroy_plan(plan);
  }
};

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

}  // namespace

std::size_t MelConfig::window_samples() const {
  return static_cast<std::size_t>(std::llround(window_ms * kSampleRate / 1000.0));
}

std::size_t MelConfig::hop_samples() const {
  return static_cast<std::size_t>(std::llround(hop_ms * kSampleRate / 1000.0));
}

std::size_t mel_frame_count(std::size_t num_samples, const MelConfig& config) {
  const std::size_t win = config.window_samples();
  if (num_samples < win) return 0;
  return (num_samples - win) / config.hop_samples() + 1;
}

std::size_t window_count(std::size_t num_mel_frames) {
  if (num_mel_frames < kWindowFrames) return 0;
  return (num_mel_frames - kWindowFrames) / kWindowHop + 1;
}

std::size_t frontend_frames(std::size_t num_samples, const MelConfig& config) {
  return window_count(mel_frame_count(num_samples, config));
}

std::vector<double> mel_filterbank(const MelConfig& config) {
  const std::size_t bins = config.n_fft / 2 + 1;
  const double lo = hz_to_mel(config.low_hz);
  const double hi = hz_to_mel(config.high_hz);
  const double delta = (hi - lo) / static_cast<double>(config.n_mels + 1);
  std::vector<double> bank(config.n_mels * bins, 0.0);
  for (std::size_t m = 0; m < config.n_mels; ++m) {
    const double left = lo + delta * static_cast<double>(m);
    const double center = left + delta;
    const double right = center + delta;
    for (std::size_t k = 0; k < bins; ++k) {
      const double hz = static_cast<double>(k) * kSampleRate / static_cast<double>(config.n_fft);
      const double mel = hz_to_mel(hz);
      double w = 0.0;
      if (mel > left && mel <= center) {
        w = (mel - left) / (center - left);
      } else if (mel > center && mel < right) {
        w = (right - mel) / (right - center);
      }
      bank[m * bins + k] = w;
    }
  }
  return bank;
}

MelFrames log_mel(const AudioClip& clip, const MelConfig& config) {
  const std::size_t win = config.window_samples();
  const std::size_t hop = config.hop_samples();
  if (win == 0 || hop == 0 || win > config.n_fft) {
    throw ConfigError("mel window of " + std::to_string(win) + " samples does not fit n_fft " +
                      std::to_string(config.n_fft));
  }
  const std::size_t frames = mel_frame_count(clip.samples.size(), config);
  if (frames == 0) {
    throw InsufficientAudioError("clip of " + std::to_string(clip.samples.size()) +
                                 " samples is shorter than one " + std::to_string(win) +
                                 "-sample analysis window");
  }
  const std::size_t bins = config.n_fft / 2 + 1;
  const std::vector<double> bank = mel_filterbank(config);

  std::vector<double> hamming(win);
  for (std::size_t i = 0; i < win; ++i) {
    hamming[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                        static_cast<double>(win - 1));
  }

  std::unique_ptr<double, FftwFree> buf(
      static_cast<double*>(fftw_malloc(sizeof(double) * config.n_fft)));
  std::unique_ptr<fftw_complex, FftwFree> spec(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins)));
  FftwPlan plan;
  plan.plan = fftw_plan_dft_r2c_1d(static_cast<int>(config.n_fft), buf.get(), spec.get(),
                                   FFTW_ESTIMATE);

  MelFrames out;
  out.num_frames = frames;
  out.n_mels = config.n_mels;
  out.values.resize(frames * config.n_mels);
  std::vector<double> power(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill_n(buf.get(), config.n_fft, 0.0);
    for (std::size_t i = 0; i < win; ++i) buf.get()[i] = clip.samples[f * hop + i] * hamming[i];
    fftw_execute(plan.plan);
    for (std::size_t k = 0; k < bins; ++k) {
      power[k] = spec.get()[k][0] * spec.get()[k][0] + spec.get()[k][1] * spec.get()[k][1];
    }
    for (std::size_t m = 0; m < config.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += bank[m * bins + k] * power[k];
      out.values[f * config.n_mels + m] =
          static_cast<float>(std::log(std::max(e, config.energy_floor)));
    }
  }
  return out;
}

void normalize_mel(MelFrames& mel) {
  if (mel.num_frames == 0) return;
  std::vector<double> mean(mel.n_mels, 0.0);
  for (std::size_t f = 0; f < mel.num_frames; ++f)
    for (std::size_t m = 0; m < mel.n_mels; ++m) mean[m] += mel.at(f, m);
  for (auto& v : mean) v /= static_cast<double>(mel.num_frames);
  double ss = 0.0;
  for (std::size_t f = 0; f < mel.num_frames; ++f)
    for (std::size_t m = 0; m < mel.n_mels; ++m) {
      const double d = mel.at(f, m) - mean[m];
      ss += d * d;
    }
  const double sd = std::sqrt(ss / static_cast<double>(mel.values.size()));
  const double inv = sd > 1e-8 ? 1.0 / sd : 1.0;
  for (std::size_t f = 0; f < mel.num_frames; ++f)
    for (std::size_t m = 0; m < mel.n_mels; ++m) {
      auto& v = mel.values[f * mel.n_mels + m];
      v = static_cast<float>((v - mean[m]) * inv);
    }
}

WindowTensor window_stack(const MelFrames& mel) {
  const std::size_t count = window_count(mel.num_frames);
  if (count == 0) {
    throw InsufficientAudioError("need at least " + std::to_string(kWindowFrames) +
                                 " mel frames, got " + std::to_string(mel.num_frames));
  }
  WindowTensor w;
  w.num_windows = count;
  w.n_mels = mel.n_mels;
  w.values.resize(count * kWindowFrames * mel.n_mels);
  for (std::size_t t = 0; t < count; ++t) {
    const auto first = mel.values.begin() + static_cast<std::ptrdiff_t>(t * kWindowHop * mel.n_mels);
    std::copy_n(first, kWindowFrames * mel.n_mels,
                w.values.begin() + static_cast<std::ptrdiff_t>(t * kWindowFrames * mel.n_mels));
  }
  return w;
}

WindowTensor slice_windows(const WindowTensor& windows, std::size_t start, std::size_t count) {
  if (count == 0 || start + count > windows.num_windows) {
    throw DimensionError("window slice [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         std::to_string(windows.num_windows) + " windows");
  }
  WindowTensor out = windows;
  out.num_windows = count;
  const std::size_t per = windows.flat_size();
  out.values.assign(windows.values.begin() + static_cast<std::ptrdiff_t>(start * per),
                    windows.values.begin() + static_cast<std::ptrdiff_t>((start + count) * per));
  return out;
}

}  // namespace eend::frontend
