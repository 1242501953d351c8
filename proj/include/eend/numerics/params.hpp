#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eend/numerics/tensor.hpp"

namespace eend::num {

// Ordered, named collection of trainable leaves. Names are unique and the
// insertion order is the serialization order.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T> add(std::string name, Tensor<T> init);
  const std::vector<Entry>& entries() const { return entries_; }
  Tensor<T> get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, std::mt19937_64& rng);

}  // namespace eend::num
