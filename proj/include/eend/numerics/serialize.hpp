#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "eend/numerics/tensor.hpp"

// Binary tensor layout: u32 rank, u32 per dimension, then float32 values.
// Every field is little-endian regardless of host byte order.
namespace eend::num {

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor);

template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& tensor);

template <typename T>
Tensor<T> load_tensor(const std::string& path);

void write_u32(std::ostream& out, std::uint32_t value);
std::uint32_t read_u32(std::istream& in);

}  // namespace eend::num
