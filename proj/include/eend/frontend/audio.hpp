#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace eend::frontend {

inline constexpr int kSampleRate = 8000;

// Mono audio at kSampleRate with amplitudes in [-1, 1].
struct AudioClip {
  std::vector<float> samples;

  double duration_s() const { return static_cast<double>(samples.size()) / kSampleRate; }
  static std::size_t samples_for(double duration_s);
};

// Reads RIFF/WAVE with PCM16 or IEEE float32 samples, averages channels and
// linearly resamples to kSampleRate.
AudioClip load_wav(const std::string& path);

// Writes a mono 32-bit float WAV at kSampleRate.
void write_wav(const std::string& path, const AudioClip& clip);

std::vector<float> resample_linear(const std::vector<float>& input, int source_rate,
                                   int target_rate);

}  // namespace eend::frontend
