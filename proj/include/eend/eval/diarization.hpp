#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "eend/frontend/audio.hpp"
#include "eend/losses/losses.hpp"
#include "eend/model/eend.hpp"

namespace eend::eval {

struct Segment {
  double start = 0.0;
  double end = 0.0;
  std::string speaker;

  bool operator==(const Segment&) const = default;
};

using Hypothesis = std::vector<Segment>;

// Per-slot threshold, binary median filter of odd width (truncated at the
// edges), then runs of active 100 ms frames become segments named by slot.
// probs is row-major frames x slots.
Hypothesis posterior_to_segments(const std::vector<float>& probs, std::size_t frames,
                                 std::size_t slots, double threshold = 0.5,
                                 std::size_t median_width = 11);

// Runs of +1 in each label column; speaker k is named names[k] or "k".
Hypothesis labels_to_segments(const losses::LabelMatrix& labels,
                              const std::vector<std::string>& names = {});

// Frame t is active for a speaker when one of its segments covers the frame
// centre. Speakers get columns in sorted name order.
losses::LabelMatrix segments_to_labels(const Hypothesis& segments, std::size_t frames,
                                       std::vector<std::string>* names = nullptr);

double total_duration(const Hypothesis& segments);

struct DerReport {
  double der = 0.0;  // percent of scored reference speaker time
  double ms = 0.0;
  double fa = 0.0;
  double cf = 0.0;
  double sad_ms = 0.0;  // percent of scored reference speech time
  double sad_fa = 0.0;
  double total_scored_s = 0.0;  // reference speaker time inside the scored region
  double speech_scored_s = 0.0;  // reference speech time inside the scored region
};

// Timeline scoring with overlap. Regions within collar_s of any reference
// boundary are not scored. Speakers are mapped by the assignment maximizing
// total co-active time. Throws ScoringError when nothing is left to score.
DerReport der_score(const Hypothesis& ref, const Hypothesis& hyp, double collar_s = 0.25);

// Pools files by scored time: every file-id in ref is scored against the
// same id in hyp, missing hypotheses count as silence.
DerReport der_score_files(const std::map<std::string, Hypothesis>& ref,
                          const std::map<std::string, Hypothesis>& hyp, double collar_s = 0.25);

// RTTM: SPEAKER <file> 1 <tbeg> <tdur> <NA> <NA> <speaker> <NA> <NA>, times at
// millisecond precision. Files map file-id to segments in input order.
using RttmFile = std::map<std::string, Hypothesis>;

void write_rttm(const std::string& path, const RttmFile& content);
RttmFile read_rttm(const std::string& path);

struct PostProcess {
  double threshold = 0.5;
  std::size_t median_width = 11;
};

// Front-end, forward pass and post-processing for a whole clip.
Hypothesis diarize(const model::EendModel<float>& model, const frontend::AudioClip& clip,
                   const PostProcess& post = {});

// Sigmoid activity, row-major frames x slots.
std::vector<float> speaker_posteriors(const model::EendModel<float>& model,
                                      const frontend::AudioClip& clip);

}  // namespace eend::eval
