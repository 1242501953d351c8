#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "eend/model/eend.hpp"
#include "eend/numerics/tensor.hpp"

namespace eend::losses {

template <typename T>
using Tensor = num::Tensor<T>;

// Speaker activity on the label grid, stored as +1 / -1. Column k is speaker
// k; columns with no +1 are padding.
class LabelMatrix {
 public:
  LabelMatrix() = default;
  LabelMatrix(std::size_t frames, std::size_t columns);
  // active[t * columns + k] != 0 marks speaker k as active at frame t.
  static LabelMatrix from_activity(std::size_t frames, std::size_t columns,
                                   const std::vector<std::uint8_t>& active);

  std::size_t frames() const { return frames_; }
  std::size_t columns() const { return columns_; }
  int pm(std::size_t t, std::size_t k) const { return pm_[t * columns_ + k]; }
  int y01(std::size_t t, std::size_t k) const { return pm(t, k) > 0 ? 1 : 0; }
  void set_active(std::size_t t, std::size_t k, bool active);

  // Columns holding at least one +1, ascending.
  std::vector<std::size_t> speaker_columns() const;
  std::size_t n_speakers() const { return speaker_columns().size(); }

  // Rows [start, start + count).
  LabelMatrix slice(std::size_t start, std::size_t count) const;
  // Keeps `count` columns, padding with -1 or dropping empty trailing ones.
  LabelMatrix with_columns(std::size_t count) const;

  template <typename T> Tensor<T> pm_tensor() const;
  template <typename T> Tensor<T> y01_tensor() const;

  bool operator==(const LabelMatrix& other) const = default;

 private:
  std::size_t frames_ = 0;
  std::size_t columns_ = 0;
  std::vector<std::int8_t> pm_;
};

// speaker_columns()[k] is assigned to slots[k].
struct Alignment {
  std::vector<std::size_t> columns;
  std::vector<std::size_t> slots;
  double cost = 0.0;

  bool slot_active(std::size_t s) const;
};

// K x S matrix of per-column mean BCE between sigmoid(logits[:, s]) and speaker
// column k, row-major.
template <typename T>
std::vector<double> pit_cost_matrix(const Tensor<T>& logits, const LabelMatrix& labels);

// Minimum-cost injective assignment of speakers to slots. Throws CapacityError
// when there are more speakers than slots. No speakers gives an empty alignment.
template <typename T>
Alignment pit_align(const Tensor<T>& logits, const LabelMatrix& labels);

// T x S labels in slot order: slot s carries its aligned speaker, the rest -1.
LabelMatrix slot_labels(const LabelMatrix& labels, const Alignment& align, std::size_t slots);

template <typename T>
struct BceTerms {
  Tensor<T> bce;
  Tensor<T> suppress;
};

// BCE over every (t, s). Non-active slots see only slot_bias + global_bias and
// target 0. suppress is the mean squared norm of the non-active directions.
template <typename T>
BceTerms<T> suppressive_bce(const model::ForwardOutput<T>& out, const LabelMatrix& labels,
                            const Alignment& align);

// Rows y_t / max(||y_t||, eps) over slot-ordered labels.
template <typename T>
Tensor<T> mo_dpcl_labels(const LabelMatrix& slot_ordered);

// Rows (y_t A) / max(||y_t A||, eps); differentiable in the directions A.
template <typename T>
Tensor<T> a_dpcl_labels(const LabelMatrix& slot_ordered, const Tensor<T>& directions);

// Mean over all T^2 pairs of (<l_i, l_j> - <x_i, x_j>)^2 with x rows
// L2-normalized, via Gram identities so no T x T matrix is formed.
template <typename T>
Tensor<T> dpcl_loss(const Tensor<T>& label_vectors, const Tensor<T>& frames);

// Mean squared off-diagonal of the normalized Gram of the active directions.
template <typename T>
Tensor<T> ortho_loss(const Tensor<T>& directions, const Alignment& align);

enum class DpclMode { kMoDpcl, kADpcl, kNone };

DpclMode parse_dpcl_mode(const std::string& text);
std::string to_string(DpclMode mode);

struct LossWeights {
  double bce = 1.0;
  double dpcl = 0.5;
  double ortho = 0.1;
  double suppress = 0.1;
};

template <typename T>
struct LossBundle {
  Tensor<T> total;  // differentiable
  double bce = 0.0;
  double dpcl = 0.0;
  double ortho = 0.0;
  double suppress = 0.0;
  double total_value = 0.0;
  LossWeights weights;
  Alignment alignment;
};

template <typename T>
LossBundle<T> total_loss(const model::ForwardOutput<T>& out, const LabelMatrix& labels,
                         const LossWeights& weights, DpclMode mode);

// Appends "step,bce,dpcl,ortho,suppress,total,lr" rows, writing the header to
// a new file.
class LossLog {
 public:
  explicit LossLog(std::string path);
  template <typename T>
  void append(std::size_t step, const LossBundle<T>& bundle, double lr);

 private:
  std::string path_;
};

}  // namespace eend::losses
