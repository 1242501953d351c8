#include "eend/eval/corpus.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "eend/error.hpp"
#include "eend/eval/diarization.hpp"
#include "eend/frontend/features.hpp"

namespace eend::eval {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = {{"count", s.count}, {"mixture", s.mixture}};
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
  s.count = j.at("count").get<std::size_t>();
  s.mixture = j.value("mixture", pipeline::MixtureSpec{});
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"seed", s.seed}, {"splits", nlohmann::json::object()}};
  for (const auto& [name, split] : s.splits) {
    nlohmann::json sj;
    to_json(sj, split);
    j["splits"][name] = sj;
  }
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  s.seed = j.value("seed", std::uint64_t{0});
  s.splits.clear();
  for (const auto& [name, value] : j.at("splits").items()) {
    SplitSpec split;
    from_json(value, split);
    s.splits[name] = split;
  }
}

CorpusSpec load_corpus_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in).get<CorpusSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::vector<pipeline::LabeledRecording> synth_split(const CorpusSpec& spec,
                                                    const std::string& split) {
  const auto it = spec.splits.find(split);
  if (it == spec.splits.end()) throw ConfigError("no split named " + split);
  const auto k = static_cast<std::uint64_t>(std::distance(spec.splits.begin(), it));
  std::vector<pipeline::LabeledRecording> out;
  for (std::size_t i = 0; i < it->second.count; ++i) {
    auto mixture = it->second.mixture;
    mixture.seed = spec.seed + 1000 * k + i;
    auto rec = pipeline::synth_mixture(mixture);
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%03zu", split.c_str(), i);
    rec.id = id;
    out.push_back(std::move(rec));
  }
  return out;
}

void write_corpus(const std::string& dir, const CorpusSpec& spec) {
  nlohmann::json manifest = {{"spec", spec}, {"recordings", nlohmann::json::array()}};
  for (const auto& [split, split_spec] : spec.splits) {
    fs::create_directories(fs::path(dir) / split);
    RttmFile rttm;
    for (const auto& rec : synth_split(spec, split)) {
      std::vector<std::string> names;
      for (std::size_t k = 0; k < rec.labels.columns(); ++k) names.push_back(std::to_string(k));
      rttm[rec.id] = labels_to_segments(rec.labels, names);
      const auto wav = fs::path(split) / (rec.id + ".wav");
      frontend::write_wav((fs::path(dir) / wav).string(), rec.clip);
      manifest["recordings"].push_back({{"id", rec.id},
                                        {"split", split},
                                        {"wav", wav.string()},
                                        {"duration_s", rec.clip.duration_s()},
                                        {"n_speakers", rec.labels.columns()},
                                        {"overlap", pipeline::overlap_fraction(rec.labels)}});
    }
    write_rttm((fs::path(dir) / (split + ".rttm")).string(), rttm);
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

std::vector<pipeline::LabeledRecording> load_corpus(const std::string& dir,
                                                    const std::string& split) {
  const auto manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  std::vector<pipeline::LabeledRecording> out;
  RttmFile rttm;
  bool rttm_loaded = false;
  for (const auto& entry : manifest.at("recordings")) {
    if (entry.at("split").get<std::string>() != split) continue;
    if (!rttm_loaded) {
      rttm = read_rttm((fs::path(dir) / (split + ".rttm")).string());
      rttm_loaded = true;
    }
    pipeline::LabeledRecording rec;
    rec.id = entry.at("id").get<std::string>();
    rec.clip = frontend::load_wav((fs::path(dir) / entry.at("wav").get<std::string>()).string());
    const std::size_t frames = frontend::frontend_frames(rec.clip.samples.size());
    const auto found = rttm.find(rec.id);
    rec.labels = found == rttm.end() ? losses::LabelMatrix(frames, 0)
                                     : segments_to_labels(found->second, frames);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace eend::eval
