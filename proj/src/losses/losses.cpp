#include "eend/losses/losses.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "eend/error.hpp"
#include "eend/numerics/assignment.hpp"
#include "eend/numerics/ops.hpp"

namespace eend::losses {

using namespace eend::num;

LabelMatrix::LabelMatrix(std::size_t frames, std::size_t columns)
    : frames_(frames), columns_(columns), pm_(frames * columns, -1) {}

LabelMatrix LabelMatrix::from_activity(std::size_t frames, std::size_t columns,
                                       const std::vector<std::uint8_t>& active) {
  if (active.size() != frames * columns) {
    throw DimensionError("activity has " + std::to_string(active.size()) + " entries, expected " +
                         std::to_string(frames * columns));
  }
  LabelMatrix m(frames, columns);
  for (std::size_t i = 0; i < active.size(); ++i) m.pm_[i] = active[i] ? 1 : -1;
  return m;
}

void LabelMatrix::set_active(std::size_t t, std::size_t k, bool active) {
  pm_.at(t * columns_ + k) = active ? 1 : -1;
}

std::vector<std::size_t> LabelMatrix::speaker_columns() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < columns_; ++k) {
    for (std::size_t t = 0; t < frames_; ++t) {
      if (pm(t, k) > 0) {
        out.push_back(k);
        break;
      }
    }
  }
  return out;
}

LabelMatrix LabelMatrix::slice(std::size_t start, std::size_t count) const {
  if (start + count > frames_) {
    throw DimensionError("label slice [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds " + std::to_string(frames_) +
                         " frames");
  }
  LabelMatrix m(count, columns_);
  std::copy_n(pm_.begin() + static_cast<std::ptrdiff_t>(start * columns_), count * columns_,
              m.pm_.begin());
  return m;
}

LabelMatrix LabelMatrix::with_columns(std::size_t count) const {
  const auto used = speaker_columns();
  if (!used.empty() && used.back() >= count) {
    throw CapacityError("speaker column " + std::to_string(used.back()) + " does not fit in " +
                        std::to_string(count) + " columns");
  }
  LabelMatrix m(frames_, count);
  for (std::size_t t = 0; t < frames_; ++t)
    for (std::size_t k = 0; k < std::min(count, columns_); ++k) m.pm_[t * count + k] = pm(t, k);
  return m;
}

template <typename T>
Tensor<T> LabelMatrix::pm_tensor() const {
  return Tensor<T>({frames_, columns_}, std::vector<T>(pm_.begin(), pm_.end()));
}

template <typename T>
Tensor<T> LabelMatrix::y01_tensor() const {
  std::vector<T> v(pm_.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pm_[i] > 0 ? T(1) : T(0);
  return Tensor<T>({frames_, columns_}, std::move(v));
}

bool Alignment::slot_active(std::size_t s) const {
  return std::find(slots.begin(), slots.end(), s) != slots.end();
}

namespace {

double bce_term(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
void check_logits(const Tensor<T>& logits, const LabelMatrix& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.frames()) {
    throw DimensionError("logits " + shape_str(logits.shape()) + " do not match " +
                         std::to_string(labels.frames()) + " label frames");
  }
}

}  // namespace

template <typename T>
std::vector<double> pit_cost_matrix(const Tensor<T>& logits, const LabelMatrix& labels) {
  check_logits(logits, labels);
  const auto speakers = labels.speaker_columns();
  const std::size_t frames = logits.dim(0), slots = logits.dim(1);
  const auto z = logits.data();
  std::vector<double> cost(speakers.size() * slots, 0.0);
  for (std::size_t k = 0; k < speakers.size(); ++k) {
    for (std::size_t s = 0; s < slots; ++s) {
      double total = 0.0;
      for (std::size_t t = 0; t < frames; ++t)
        total += bce_term(static_cast<double>(z[t * slots + s]), labels.y01(t, speakers[k]));
      cost[k * slots + s] = total / static_cast<double>(frames);
    }
  }
  return cost;
}

template <typename T>
Alignment pit_align(const Tensor<T>& logits, const LabelMatrix& labels) {
  check_logits(logits, labels);
  Alignment align;
  align.columns = labels.speaker_columns();
  const std::size_t slots = logits.dim(1);
  if (align.columns.size() > slots) {
    throw CapacityError(std::to_string(align.columns.size()) + " speakers exceed " +
                        std::to_string(slots) + " attractor slots");
  }
  if (align.columns.empty()) return align;
  const auto cost = pit_cost_matrix(logits, labels);
  align.slots = solve_assignment(cost, align.columns.size(), slots);
  align.cost = assignment_cost(cost, slots, align.slots);
  return align;
}

LabelMatrix slot_labels(const LabelMatrix& labels, const Alignment& align, std::size_t slots) {
  LabelMatrix out(labels.frames(), slots);
  for (std::size_t k = 0; k < align.columns.size(); ++k)
    for (std::size_t t = 0; t < labels.frames(); ++t)
      out.set_active(t, align.slots[k], labels.pm(t, align.columns[k]) > 0);
  return out;
}

template <typename T>
BceTerms<T> suppressive_bce(const model::ForwardOutput<T>& out, const LabelMatrix& labels,
                            const Alignment& align) {
  check_logits(out.logits, labels);
  const std::size_t slots = out.directions.dim(0);
  std::vector<T> mask(slots, T(0));
  std::vector<std::size_t> inactive;
  for (std::size_t s = 0; s < slots; ++s) {
    if (align.slot_active(s)) {
      mask[s] = T(1);
    } else {
      inactive.push_back(s);
    }
  }
  const Tensor<T> masked = mul(out.directions, Tensor<T>({slots, 1}, mask));
  const Tensor<T> logits =
      model::attractor_logits(out.frames, masked, out.slot_bias, out.global_bias);
  BceTerms<T> terms;
  terms.bce = bce_with_logits(logits, slot_labels(labels, align, slots).y01_tensor<T>());
  if (inactive.empty()) {
    terms.suppress = Tensor<T>::scalar(T(0));
  } else {
    const Tensor<T> rows = index_rows(out.directions, inactive);
    terms.suppress = scale(sum(mul(rows, rows)), T(1) / static_cast<T>(inactive.size()));
  }
  return terms;
}

template <typename T>
Tensor<T> mo_dpcl_labels(const LabelMatrix& slot_ordered) {
  return l2_normalize(slot_ordered.pm_tensor<T>());
}

template <typename T>
Tensor<T> a_dpcl_labels(const LabelMatrix& slot_ordered, const Tensor<T>& directions) {
  return l2_normalize(matmul(slot_ordered.pm_tensor<T>(), directions));
}

namespace {

template <typename T>
Tensor<T> frobenius_sq(const Tensor<T>& m) {
  return sum(mul(m, m));
}

}  // namespace

template <typename T>
Tensor<T> dpcl_loss(const Tensor<T>& label_vectors, const Tensor<T>& frames) {
  if (label_vectors.rank() != 2 || frames.rank() != 2 || label_vectors.dim(0) != frames.dim(0)) {
    throw DimensionError("dpcl_loss: label vectors " + shape_str(label_vectors.shape()) +
                         " and frames " + shape_str(frames.shape()) + " disagree on T");
  }
  // sum_ij (<l_i,l_j> - <x_i,x_j>)^2 = |L'L|^2 - 2|L'X|^2 + |X'X|^2
  const Tensor<T> x = l2_normalize(frames);
  const Tensor<T> ll = matmul(transpose(label_vectors), label_vectors);
  const Tensor<T> lx = matmul(transpose(label_vectors), x);
  const Tensor<T> xx = matmul(transpose(x), x);
  const Tensor<T> total =
      add(sub(frobenius_sq(ll), scale(frobenius_sq(lx), T(2))), frobenius_sq(xx));
  const T pairs = static_cast<T>(frames.dim(0)) * static_cast<T>(frames.dim(0));
  return scale(total, T(1) / pairs);
}

template <typename T>
Tensor<T> ortho_loss(const Tensor<T>& directions, const Alignment& align) {
  const std::size_t k = align.slots.size();
  if (k < 2) return Tensor<T>::scalar(T(0));
  const Tensor<T> n = l2_normalize(index_rows(directions, align.slots));
  const Tensor<T> gram = matmul(n, transpose(n));
  // Diagonal entries are the squared row norms.
  const Tensor<T> diag = matmul(mul(n, n), Tensor<T>::full({n.dim(1), 1}, T(1)));
  const Tensor<T> off = sub(frobenius_sq(gram), frobenius_sq(diag));
  return scale(off, T(1) / static_cast<T>(k * (k - 1)));
}

DpclMode parse_dpcl_mode(const std::string& text) {
  if (text == "mo-dpcl") return DpclMode::kMoDpcl;
  if (text == "a-dpcl") return DpclMode::kADpcl;
  if (text == "none") return DpclMode::kNone;
  throw ConfigError("unknown dpcl mode '" + text + "' (expected mo-dpcl, a-dpcl or none)");
}

std::string to_string(DpclMode mode) {
  switch (mode) {
    case DpclMode::kMoDpcl:
      return "mo-dpcl";
    case DpclMode::kADpcl:
      return "a-dpcl";
    case DpclMode::kNone:
      return "none";
  }
  return "none";
}

template <typename T>
LossBundle<T> total_loss(const model::ForwardOutput<T>& out, const LabelMatrix& labels,
                         const LossWeights& weights, DpclMode mode) {
  LossBundle<T> b;
  b.weights = weights;
  b.alignment = pit_align(out.logits, labels);
  const std::size_t slots = out.directions.dim(0);

  const BceTerms<T> bce = suppressive_bce(out, labels, b.alignment);
  const Tensor<T> ortho = ortho_loss(out.directions, b.alignment);
  Tensor<T> dpcl = Tensor<T>::scalar(T(0));
  if (mode != DpclMode::kNone) {
    const LabelMatrix ordered = slot_labels(labels, b.alignment, slots);
    const Tensor<T> targets = mode == DpclMode::kMoDpcl
                                  ? mo_dpcl_labels<T>(ordered)
                                  : a_dpcl_labels(ordered, out.directions);
    dpcl = dpcl_loss(targets, out.frames);
  }

  b.total = add(add(scale(bce.bce, T(weights.bce)), scale(dpcl, T(weights.dpcl))),
                add(scale(ortho, T(weights.ortho)), scale(bce.suppress, T(weights.suppress))));
  b.bce = bce.bce.item();
  b.dpcl = dpcl.item();
  b.ortho = ortho.item();
  b.suppress = bce.suppress.item();
  b.total_value = b.total.item();
  return b;
}

LossLog::LossLog(std::string path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) {
    std::ofstream out(path_);
    if (!out) throw IoError("cannot write " + path_);
    out << "step,bce,dpcl,ortho,suppress,total,lr\n";
  }
}

template <typename T>
void LossLog::append(std::size_t step, const LossBundle<T>& b, double lr) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to " + path_);
  out << step << ',' << b.bce << ',' << b.dpcl << ',' << b.ortho << ',' << b.suppress << ','
      << b.total_value << ',' << lr << '\n';
}

#define EEND_INSTANTIATE_LOSSES(T)                                                         \
  template Tensor<T> LabelMatrix::pm_tensor<T>() const;                                    \
  template Tensor<T> LabelMatrix::y01_tensor<T>() const;                                   \
  template std::vector<double> pit_cost_matrix(const Tensor<T>&, const LabelMatrix&);      \
  template Alignment pit_align(const Tensor<T>&, const LabelMatrix&);                      \
  template BceTerms<T> suppressive_bce(const model::ForwardOutput<T>&, const LabelMatrix&, \
                                       const Alignment&);                                  \
  template Tensor<T> mo_dpcl_labels<T>(const LabelMatrix&);                                \
  template Tensor<T> a_dpcl_labels(const LabelMatrix&, const Tensor<T>&);                  \
  template Tensor<T> dpcl_loss(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> ortho_loss(const Tensor<T>&, const Alignment&);                       \
  template LossBundle<T> total_loss(const model::ForwardOutput<T>&, const LabelMatrix&,    \
                                    const LossWeights&, DpclMode);                         \
  template void LossLog::append(std::size_t, const LossBundle<T>&, double);

EEND_INSTANTIATE_LOSSES(float)
EEND_INSTANTIATE_LOSSES(double)

}  // namespace eend::losses
