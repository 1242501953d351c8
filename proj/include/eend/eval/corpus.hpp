#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "eend/pipeline/synth.hpp"
#include "json.hpp"

namespace eend::eval {

struct SplitSpec {
  std::size_t count = 0;
  pipeline::MixtureSpec mixture;
};

// Recording i of the k-th split (splits in name order) uses seed
// seed + 1000 k + i, so splits never share a seed.
struct CorpusSpec {
  std::uint64_t seed = 0;
  std::map<std::string, SplitSpec> splits;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);
CorpusSpec load_corpus_spec(const std::string& path);

std::vector<pipeline::LabeledRecording> synth_split(const CorpusSpec& spec,
                                                    const std::string& split);

// Writes <dir>/<split>/<id>.wav, <dir>/<split>.rttm and <dir>/manifest.json.
void write_corpus(const std::string& dir, const CorpusSpec& spec);

// Recordings of one split with labels rebuilt from its RTTM on the label grid.
// A missing split yields an empty list.
std::vector<pipeline::LabeledRecording> load_corpus(const std::string& dir,
                                                    const std::string& split);

}  // namespace eend::eval
