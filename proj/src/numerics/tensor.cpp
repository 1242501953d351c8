#include "eend/numerics/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "eend/error.hpp"
#include "eend/numerics/audit.hpp"

namespace eend::num {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local OpAudit* g_audit = nullptr;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

OpAudit::OpAudit() : previous_(g_audit) { g_audit = this; }
OpAudit::~OpAudit() { g_audit = previous_; }

std::size_t OpAudit::max_numel() const {
  std::size_t best = 0;
  for (const auto& r : records_) best = std::max(best, shape_numel(r.shape));
  return best;
}

bool OpAudit::has_square_axes(std::size_t n) const {
  for (const auto& r : records_) {
    if (std::count(r.shape.begin(), r.shape.end(), n) >= 2) return true;
  }
  return false;
}

void OpAudit::record(const std::string& op, const Shape& shape, std::uint64_t macs) {
  macs_ += macs;
  records_.push_back({op, shape, macs});
}

void audit_record(const std::string& op, const Shape& shape, std::uint64_t macs) {
  if (g_audit) g_audit->record(op, shape, macs);
}

template <typename T>
Tensor<T>::Tensor(Shape shape) {
  node_ = std::make_shared<Node<T>>();
  node_->data.assign(shape_numel(shape), T(0));
  node_->shape = std::move(shape);
  node_->op = "leaf";
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  Tensor t(std::move(shape));
  t.node_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
  node_->op = "leaf";
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> v(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw DimensionError("use of undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return node_ ? node_->data.size() : 0;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw DimensionError("use of undefined tensor");
  return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw DimensionError("use of undefined tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() needs a single-element tensor, got " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_str(shape()));
  return node_->data[row * node_->shape[1] + col];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!node_) throw DimensionError("use of undefined tensor");
  node_->requires_grad = value;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_ && node_->grad.size() == node_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw NumericError("tensor has no gradient");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!node_) throw DimensionError("use of undefined tensor");
  node_->grad_buffer();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a scalar output; reduce " + shape_str(shape()) +
                         " first");
  }
  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data, false);
}

template <typename T>
const std::string& Tensor<T>::op() const {
  if (!node_) throw DimensionError("use of undefined tensor");
  return node_->op;
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward,
                      std::uint64_t macs) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError(op + ": produced " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  audit_record(op, shape, macs);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = std::move(op);
  const bool needs_grad =
      grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) {
        return t.requires_grad();
      });
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result<float>(std::string, Shape, std::vector<float>,
                                          std::vector<Tensor<float>>,
                                          std::function<void(Node<float>&)>, std::uint64_t);
template Tensor<double> make_result<double>(std::string, Shape, std::vector<double>,
                                            std::vector<Tensor<double>>,
                                            std::function<void(Node<double>&)>,
                                            std::uint64_t);

}  // namespace eend::num
