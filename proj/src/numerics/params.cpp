#include "eend/numerics/params.hpp"

#include <algorithm>

#include "eend/error.hpp"

namespace eend::num {

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, Tensor<T> init) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  init.set_requires_grad(true);
  entries_.emplace_back(std::move(name), init);
  return init;
}

template <typename T>
Tensor<T> ParamStore<T>::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter " + name);
}

template <typename T>
bool ParamStore<T>::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.first == name; });
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.second.numel();
  return total;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

template class ParamStore<float>;
template class ParamStore<double>;
template Tensor<float> normal_init<float>(Shape, double, std::mt19937_64&);
template Tensor<double> normal_init<double>(Shape, double, std::mt19937_64&);

}  // namespace eend::num
