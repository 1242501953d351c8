#include "eend/frontend/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "eend/error.hpp"

namespace eend::frontend {

namespace {

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xffu));
  out.push_back(static_cast<char>(v >> 8));
}

constexpr std::uint16_t kPcm = 1;
constexpr std::uint16_t kFloat = 3;
constexpr std::uint16_t kExtensible = 0xfffe;

}  // namespace

std::size_t AudioClip::samples_for(double duration_s) {
  return static_cast<std::size_t>(std::llround(duration_s * kSampleRate));
}

std::vector<float> resample_linear(const std::vector<float>& input, int source_rate,
                                   int target_rate) {
  if (source_rate <= 0 || target_rate <= 0) throw FormatError("invalid sample rate");
  if (source_rate == target_rate || input.empty()) return input;
  const auto out_len = static_cast<std::size_t>(
      std::llround(static_cast<double>(input.size()) * target_rate / source_rate));
  std::vector<float> out(out_len);
  const double step = static_cast<double>(source_rate) / target_rate;
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= input.size()) {
      out[i] = input.back();
      continue;
    }
    const double frac = pos - static_cast<double>(lo);
    out[i] = static_cast<float>((1.0 - frac) * input[lo] + frac * input[lo + 1]);
  }
  return out;
}

AudioClip load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw ParseError(path + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16 || body + len > bytes.size()) throw ParseError(path + ": truncated fmt chunk");
      format = le16(bytes.data() + body);
      channels = le16(bytes.data() + body + 2);
      rate = le32(bytes.data() + body + 4);
      bits = le16(bytes.data() + body + 14);
      if (format == kExtensible) {
        if (len < 26) throw ParseError(path + ": truncated extensible fmt chunk");
        format = le16(bytes.data() + body + 24);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = std::min<std::size_t>(len, bytes.size() - body);
    }
    pos = body + len + (len & 1u);
  }
  if (channels == 0 || rate == 0 || data == nullptr) {
    throw ParseError(path + ": missing fmt or data chunk");
  }
  const bool pcm16 = format == kPcm && bits == 16;
  const bool f32 = format == kFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw FormatError(path + ": unsupported codec (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits)");
  }
  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  std::vector<float> mono(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * width;
      if (pcm16) {
        acc += static_cast<std::int16_t>(le16(p)) / 32768.0;
      } else {
        acc += std::bit_cast<float>(le32(p));
      }
    }
    mono[i] = std::clamp(static_cast<float>(acc / channels), -1.0f, 1.0f);
  }
  AudioClip clip;
  clip.samples = resample_linear(mono, static_cast<int>(rate), kSampleRate);
  return clip;
}

void write_wav(const std::string& path, const AudioClip& clip) {
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 4);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put32(out, 16);
  put16(out, kFloat);
  put16(out, 1);
  put32(out, kSampleRate);
  put32(out, kSampleRate * 4);
  put16(out, 4);
  put16(out, 32);
  out += "data";
  put32(out, data_bytes);
  for (float s : clip.samples) put32(out, std::bit_cast<std::uint32_t>(s));
  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size()))) {
    throw IoError("cannot write " + path);
  }
}

}  // namespace eend::frontend
