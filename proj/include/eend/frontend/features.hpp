#pragma once

#include <cstddef>
#include <vector>

#include "eend/frontend/audio.hpp"

namespace eend::frontend {

struct MelConfig {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = 23;
  std::size_t n_fft = 256;
  double low_hz = 0.0;
  double high_hz = 4000.0;
  double energy_floor = 1e-10;

  std::size_t window_samples() const;
  std::size_t hop_samples() const;
};

// Log-mel energies, row-major frames x n_mels.
struct MelFrames {
  std::size_t num_frames = 0;
  std::size_t n_mels = 0;
  std::vector<float> values;

  float at(std::size_t frame, std::size_t bin) const { return values[frame * n_mels + bin]; }
};

inline constexpr std::size_t kWindowFrames = 15;
inline constexpr std::size_t kWindowHop = 10;

// T windows of kWindowFrames consecutive mel frames, hop kWindowHop.
struct WindowTensor {
  std::size_t num_windows = 0;
  std::size_t window_frames = kWindowFrames;
  std::size_t n_mels = 0;
  std::vector<float> values;  // num_windows x window_frames x n_mels

  std::size_t flat_size() const { return window_frames * n_mels; }
  float at(std::size_t window, std::size_t frame, std::size_t bin) const {
    return values[(window * window_frames + frame) * n_mels + bin];
  }
};

std::size_t mel_frame_count(std::size_t num_samples, const MelConfig& config = {});
std::size_t window_count(std::size_t num_mel_frames);
// Windows produced by the whole front-end for a clip of `num_samples`.
std::size_t frontend_frames(std::size_t num_samples, const MelConfig& config = {});

// Triangular filters on the HTK mel scale, row-major n_mels x (n_fft/2 + 1).
std::vector<double> mel_filterbank(const MelConfig& config);

MelFrames log_mel(const AudioClip& clip, const MelConfig& config = {});

// Per-bin mean removal followed by a single global variance scale. Constant
// input stays at zero.
void normalize_mel(MelFrames& mel);

WindowTensor window_stack(const MelFrames& mel);

// Windows [start, start + count) of an existing window tensor.
WindowTensor slice_windows(const WindowTensor& windows, std::size_t start, std::size_t count);

}  // namespace eend::frontend
