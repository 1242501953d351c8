#include "eend/numerics/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "eend/error.hpp"

namespace eend::num {

void write_u32(std::ostream& out, std::uint32_t value) {
  std::array<char, 4> bytes{};
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

std::uint32_t read_u32(std::istream& in) {
  std::array<unsigned char, 4> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError("tensor stream truncated");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  const Shape& shape = tensor.shape();
  write_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw DimensionError("tensor dimension too large to serialize: " + shape_str(shape));
    }
    write_u32(out, static_cast<std::uint32_t>(d));
  }
  for (T v : tensor.data()) {
    const auto f = static_cast<float>(v);
    write_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw IoError("failed writing tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = read_u32(in);
  const std::size_t count = shape_numel(shape);
  std::vector<T> values(count);
  for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(read_u32(in)));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_tensor(out, tensor);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_tensor<T>(in);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&);
template Tensor<double> load_tensor(const std::string&);

}  // namespace eend::num
