#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "eend/frontend/audio.hpp"
#include "eend/losses/losses.hpp"
#include "json.hpp"

namespace eend::pipeline {

// Label frames are 100 ms long; frame t covers [0.1 t, 0.1 (t + 1)).
inline constexpr double kLabelFrameS = 0.1;

struct MixtureSpec {
  std::size_t n_speakers = 2;
  double duration_s = 60.0;
  double overlap_ratio = 0.2;
  double noise_snr_db = 15.0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const MixtureSpec& s);
void from_json(const nlohmann::json& j, MixtureSpec& s);

// One utterance on the label grid, frames [start, end).
struct Utterance {
  std::size_t speaker = 0;
  std::size_t start = 0;
  std::size_t end = 0;
};

struct LabeledRecording {
  std::string id;
  frontend::AudioClip clip;
  // One column per speaker; frame count equals frontend_frames(clip).
  losses::LabelMatrix labels;
  std::vector<Utterance> utterances;
};

// Fraction of speech frames where two or more speakers are active.
double overlap_fraction(const losses::LabelMatrix& labels);

// Two-or-more-speaker mixture of synthetic harmonic talkers with distinct
// spectral envelopes, placed on the 100 ms grid with the requested overlap and
// Gaussian noise at the requested SNR. Throws GenerationError when the overlap
// target cannot be met.
LabeledRecording synth_mixture(const MixtureSpec& spec);

// Contiguous crop of `crop_s` seconds worth of label frames. The audio span is
// the exact support of those frames' analysis windows, so the crop's label and
// window counts agree. A recording shorter than the crop is returned whole.
LabeledRecording crop_sample(const LabeledRecording& rec, double crop_s, std::mt19937_64& rng);

// Label frames in a crop of `crop_s` seconds.
std::size_t crop_frames(double crop_s);

// Audio sample range [first, last) feeding label frames [start, start + count).
std::pair<std::size_t, std::size_t> window_sample_span(std::size_t start, std::size_t count);

}  // namespace eend::pipeline
