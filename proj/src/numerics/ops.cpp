#include "eend/numerics/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "eend/error.hpp"

namespace eend::num {

void set_blas_threads(int threads) { openblas_set_num_threads(threads); }

namespace {

template <typename T>
void check_input(const char* op, const Tensor<T>& t) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined input");
  if (t.numel() == 0) {
    throw DimensionError(std::string(op) + ": zero-size input " + shape_str(t.shape()));
  }
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in input " +
                         shape_str(t.shape()));
    }
  }
}

template <typename T>
bool wants_grad(const Node<T>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

template <typename T>
T* parent_grad(Node<T>& n, std::size_t i) {
  return n.parents[i]->grad_buffer();
}

void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, const float* b,
          float beta, float* c) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
              n, k, alpha, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, const double* b,
          double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
              n, k, alpha, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

std::size_t last_dim(const Shape& s) { return s.back(); }

// Index map from a's flat index to b's flat index for the allowed broadcasts.
struct Broadcast {
  enum class Kind { Same, Suffix, Prefix } kind = Kind::Same;
  std::size_t nb = 1;
  std::size_t inner = 1;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::Same:
        return i;
      case Kind::Suffix:
        return i % nb;
      case Kind::Prefix:
        return i / inner;
    }
    return i;
  }
};

Broadcast broadcast_for(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  bc.nb = shape_numel(b);
  if (a == b) return bc;
  if (bc.nb == 1) {
    bc.kind = Broadcast::Kind::Suffix;
    return bc;
  }
  if (b.size() <= a.size() && std::equal(b.begin(), b.end(), a.end() - b.size())) {
    bc.kind = Broadcast::Kind::Suffix;
    return bc;
  }
  if (b.size() == a.size()) {
    std::size_t k = 0;
    while (k < a.size() && a[k] == b[k]) ++k;
    bool trailing_ones = k < a.size();
    for (std::size_t j = k; j < b.size(); ++j) trailing_ones = trailing_ones && b[j] == 1;
    if (trailing_ones) {
      bc.kind = Broadcast::Kind::Prefix;
      bc.inner = shape_numel(a) / bc.nb;
      return bc;
    }
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " +
                       shape_str(a));
}

template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F forward, D derivative) {
  check_input(op, a);
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  return make_result<T>(op, a.shape(), std::move(y), {a}, [derivative](Node<T>& n) {
    T* ga = parent_grad(n, 0);
    const auto& x = n.parents[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += n.grad[i] * derivative(x[i], n.data[i]);
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_input("matmul", a);
  check_input("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int m = static_cast<int>(a.dim(0));
  const int k = static_cast<int>(a.dim(1));
  const int n = static_cast<int>(b.dim(1));
  std::vector<T> c(static_cast<std::size_t>(m) * n);
  gemm(false, false, m, n, k, T(1), a.data().data(), b.data().data(), T(0), c.data());
  const auto macs = static_cast<std::uint64_t>(m) * k * n;
  return make_result<T>(
      "matmul", {a.dim(0), b.dim(1)}, std::move(c), {a, b},
      [m, n, k](Node<T>& node) {
        const T* gc = node.grad.data();
        const T* av = node.parents[0]->data.data();
        const T* bv = node.parents[1]->data.data();
        if (wants_grad(node, 0)) gemm(false, true, m, k, n, T(1), gc, bv, T(1), parent_grad(node, 0));
        if (wants_grad(node, 1)) gemm(true, false, k, n, m, T(1), av, gc, T(1), parent_grad(node, 1));
      },
      macs);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  check_input("transpose", a);
  if (a.rank() != 2) throw DimensionError("transpose: needs a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  return make_result<T>("transpose", {c, r}, std::move(y), {a}, [r, c](Node<T>& n) {
    T* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check_input("reshape", a);
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> y(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(y), {a}, [](Node<T>& n) {
    T* g = parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

namespace {

template <typename T>
Tensor<T> add_like(const char* op, const Tensor<T>& a, const Tensor<T>& b, T sign) {
  check_input(op, a);
  check_input(op, b);
  const Broadcast bc = broadcast_for(op, a.shape(), b.shape());
  const auto x = a.data();
  const auto z = b.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + sign * z[bc(i)];
  return make_result<T>(op, a.shape(), std::move(y), {a, b}, [bc, sign](Node<T>& n) {
    if (wants_grad(n, 0)) {
      T* g = parent_grad(n, 0);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n, 1)) {
      T* g = parent_grad(n, 1);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[bc(i)] += sign * n.grad[i];
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_like("add", a, b, T(1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_like("sub", a, b, T(-1));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_input("mul", a);
  check_input("mul", b);
  const Broadcast bc = broadcast_for("mul", a.shape(), b.shape());
  const auto x = a.data();
  const auto z = b.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[bc(i)];
  return make_result<T>("mul", a.shape(), std::move(y), {a, b}, [bc](Node<T>& n) {
    const auto& x = n.parents[0]->data;
    const auto& z = n.parents[1]->data;
    if (wants_grad(n, 0)) {
      T* g = parent_grad(n, 0);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * z[bc(i)];
    }
    if (wants_grad(n, 1)) {
      T* g = parent_grad(n, 1);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[bc(i)] += n.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary<T>(
      "add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      "sigmoid", a, [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary<T>(
      "silu", a, [](T x) { return x * stable_sigmoid(x); },
      [](T x, T) {
        const T s = stable_sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  check_input("softmax", a);
  const std::size_t width = last_dim(a.shape());
  const std::size_t rows = a.numel() / width;
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * width;
    T* yr = y.data() + r * width;
    const T peak = *std::max_element(xr, xr + width);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) total += (yr[j] = std::exp(xr[j] - peak));
    for (std::size_t j = 0; j < width; ++j) yr[j] /= total;
  }
  return make_result<T>("softmax", a.shape(), std::move(y), {a}, [rows, width](Node<T>& n) {
    T* g = parent_grad(n, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = n.data.data() + r * width;
      const T* gy = n.grad.data() + r * width;
      T dot = 0;
      for (std::size_t j = 0; j < width; ++j) dot += gy[j] * yr[j];
      for (std::size_t j = 0; j < width; ++j) g[r * width + j] += yr[j] * (gy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  check_input("rms_norm", x);
  check_input("rms_norm", gain);
  const std::size_t width = last_dim(x.shape());
  if (gain.numel() != width) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  const auto xv = x.data();
  const auto gv = gain.data();
  std::vector<T> denom(rows);
  std::vector<T> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < width; ++j) ss += xv[r * width + j] * xv[r * width + j];
    denom[r] = std::max(std::sqrt(ss / T(width)), eps);
    for (std::size_t j = 0; j < width; ++j)
      y[r * width + j] = xv[r * width + j] / denom[r] * gv[j];
  }
  return make_result<T>(
      "rms_norm", x.shape(), std::move(y), {x, gain},
      [rows, width, eps, denom = std::move(denom)](Node<T>& n) {
        const auto& xv = n.parents[0]->data;
        const auto& gv = n.parents[1]->data;
        if (wants_grad(n, 0)) {
          T* gx = parent_grad(n, 0);
          for (std::size_t r = 0; r < rows; ++r) {
            const T d = denom[r];
            const T* xr = xv.data() + r * width;
            const T* gy = n.grad.data() + r * width;
            T dot = 0;
            for (std::size_t j = 0; j < width; ++j) dot += gy[j] * gv[j] * xr[j];
            const bool clamped = !(d > eps);
            for (std::size_t j = 0; j < width; ++j) {
              T v = gy[j] * gv[j] / d;
              if (!clamped) v -= xr[j] * dot / (T(width) * d * d * d);
              gx[r * width + j] += v;
            }
          }
        }
        if (wants_grad(n, 1)) {
          T* gg = parent_grad(n, 1);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j)
              gg[j] += n.grad[r * width + j] * xv[r * width + j] / denom[r];
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  check_input("layer_norm", x);
  check_input("layer_norm", gain);
  check_input("layer_norm", bias);
  const std::size_t width = last_dim(x.shape());
  if (gain.numel() != width || bias.numel() != width) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<T> xhat(xv.size());
  std::vector<T> inv(rows);
  std::vector<T> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * width;
    T mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += xr[j];
    mu /= T(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(width);
    inv[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      xhat[r * width + j] = (xr[j] - mu) * inv[r];
      y[r * width + j] = xhat[r * width + j] * gv[j] + bv[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(y), {x, gain, bias},
      [rows, width, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& n) {
        const auto& gv = n.parents[1]->data;
        if (wants_grad(n, 0)) {
          T* gx = parent_grad(n, 0);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gy = n.grad.data() + r * width;
            const T* xh = xhat.data() + r * width;
            T sum_d = 0, sum_dx = 0;
            for (std::size_t j = 0; j < width; ++j) {
              const T d = gy[j] * gv[j];
              sum_d += d;
              sum_dx += d * xh[j];
            }
            for (std::size_t j = 0; j < width; ++j) {
              const T d = gy[j] * gv[j];
              gx[r * width + j] +=
                  inv[r] / T(width) * (T(width) * d - sum_d - xh[j] * sum_dx);
            }
          }
        }
        if (wants_grad(n, 1)) {
          T* gg = parent_grad(n, 1);
          for (std::size_t i = 0; i < n.grad.size(); ++i) gg[i % width] += n.grad[i] * xhat[i];
        }
        if (wants_grad(n, 2)) {
          T* gb = parent_grad(n, 2);
          for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i % width] += n.grad[i];
        }
      });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  check_input("l2_normalize", x);
  const std::size_t width = last_dim(x.shape());
  const std::size_t rows = x.numel() / width;
  const auto xv = x.data();
  std::vector<T> norm(rows);
  std::vector<T> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < width; ++j) ss += xv[r * width + j] * xv[r * width + j];
    norm[r] = std::sqrt(ss);
    const T d = std::max(norm[r], eps);
    for (std::size_t j = 0; j < width; ++j) y[r * width + j] = xv[r * width + j] / d;
  }
  return make_result<T>(
      "l2_normalize", x.shape(), std::move(y), {x},
      [rows, width, eps, norm = std::move(norm)](Node<T>& n) {
        T* gx = parent_grad(n, 0);
        const auto& xv = n.parents[0]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xv.data() + r * width;
          const T* gy = n.grad.data() + r * width;
          if (!(norm[r] > eps)) {
            for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += gy[j] / eps;
            continue;
          }
          const T d = norm[r];
          T dot = 0;
          for (std::size_t j = 0; j < width; ++j) dot += gy[j] * xr[j];
          for (std::size_t j = 0; j < width; ++j)
            gx[r * width + j] += gy[j] / d - xr[j] * dot / (d * d * d);
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  check_input("sum", a);
  T total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>("sum", {1}, {total}, {a}, [](Node<T>& n) {
    T* g = parent_grad(n, 0);
    const std::size_t count = n.parents[0]->data.size();
    for (std::size_t i = 0; i < count; ++i) g[i] += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  check_input("mse", a);
  check_input("mse", b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const auto x = a.data();
  const auto z = b.data();
  T total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) total += (x[i] - z[i]) * (x[i] - z[i]);
  const T count = T(x.size());
  return make_result<T>("mse", {1}, {total / count}, {a, b}, [count](Node<T>& n) {
    const auto& x = n.parents[0]->data;
    const auto& z = n.parents[1]->data;
    const T g0 = n.grad[0] * T(2) / count;
    if (wants_grad(n, 0)) {
      T* g = parent_grad(n, 0);
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += g0 * (x[i] - z[i]);
    }
    if (wants_grad(n, 1)) {
      T* g = parent_grad(n, 1);
      for (std::size_t i = 0; i < x.size(); ++i) g[i] -= g0 * (x[i] - z[i]);
    }
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  check_input("bce_with_logits", logits);
  check_input("bce_with_logits", targets);
  if (logits.shape() != targets.shape()) {
    throw DimensionError("bce_with_logits: shape mismatch " + shape_str(logits.shape()) +
                         " vs " + shape_str(targets.shape()));
  }
  const auto z = logits.data();
  const auto y = targets.data();
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    total += std::max(z[i], T(0)) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  const T count = T(z.size());
  return make_result<T>("bce_with_logits", {1}, {total / count}, {logits, targets},
                        [count](Node<T>& n) {
                          const auto& z = n.parents[0]->data;
                          const auto& y = n.parents[1]->data;
                          const T g0 = n.grad[0] / count;
                          if (wants_grad(n, 0)) {
                            T* g = parent_grad(n, 0);
                            for (std::size_t i = 0; i < z.size(); ++i)
                              g[i] += g0 * (stable_sigmoid(z[i]) - y[i]);
                          }
                          if (wants_grad(n, 1)) {
                            T* g = parent_grad(n, 1);
                            for (std::size_t i = 0; i < z.size(); ++i) g[i] -= g0 * z[i];
                          }
                        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dSpec& spec) {
  check_input("conv2d", x);
  check_input("conv2d", weight);
  const bool has_bias = bias.defined();
  if (has_bias) check_input("conv2d", bias);
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1) ||
      (has_bias && bias.numel() != weight.dim(0))) {
    throw DimensionError("conv2d: incompatible input " + shape_str(x.shape()) + " and weight " +
                         shape_str(weight.shape()));
  }
  if (spec.stride_h == 0 || spec.stride_w == 0) throw DimensionError("conv2d: zero stride");
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t out_ch = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (h + 2 * spec.pad_h < kh || w + 2 * spec.pad_w < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than input " +
                         shape_str(x.shape()));
  }
  const std::size_t ho = (h + 2 * spec.pad_h - kh) / spec.stride_h + 1;
  const std::size_t wo = (w + 2 * spec.pad_w - kw) / spec.stride_w + 1;
  const std::size_t patch = ch * kh * kw;
  const std::size_t cols = batch * ho * wo;

  // col[p, (b, oh, ow)] holds the input pixel under kernel tap p.
  std::vector<T> col(patch * cols, T(0));
  const auto xv = x.data();
  auto pixel = [&](std::size_t b, std::size_t c, std::size_t oh, std::size_t ow, std::size_t i,
                   std::size_t j, std::size_t& flat) {
    const long ih = static_cast<long>(oh * spec.stride_h + i) - static_cast<long>(spec.pad_h);
    const long iw = static_cast<long>(ow * spec.stride_w + j) - static_cast<long>(spec.pad_w);
    if (ih < 0 || iw < 0 || ih >= static_cast<long>(h) || iw >= static_cast<long>(w)) return false;
    flat = ((b * ch + c) * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw);
    return true;
  };
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t p = (c * kh + i) * kw + j;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t oh = 0; oh < ho; ++oh)
            for (std::size_t ow = 0; ow < wo; ++ow) {
              std::size_t flat = 0;
              if (pixel(b, c, oh, ow, i, j, flat))
                col[p * cols + (b * ho + oh) * wo + ow] = xv[flat];
            }
      }

  std::vector<T> out_mat(out_ch * cols);
  gemm(false, false, static_cast<int>(out_ch), static_cast<int>(cols), static_cast<int>(patch),
       T(1), weight.data().data(), col.data(), T(0), out_mat.data());
  const std::size_t plane = ho * wo;
  std::vector<T> y(batch * out_ch * plane);
  for (std::size_t o = 0; o < out_ch; ++o) {
    const T b0 = has_bias ? bias.data()[o] : T(0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t q = 0; q < plane; ++q)
        y[(b * out_ch + o) * plane + q] = out_mat[o * cols + b * plane + q] + b0;
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  const auto macs = static_cast<std::uint64_t>(out_ch) * cols * patch;
  return make_result<T>(
      "conv2d", {batch, out_ch, ho, wo}, std::move(y), std::move(inputs),
      [=, col = std::move(col)](Node<T>& n) {
        std::vector<T> gout(out_ch * cols);
        for (std::size_t o = 0; o < out_ch; ++o)
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t q = 0; q < plane; ++q)
              gout[o * cols + b * plane + q] = n.grad[(b * out_ch + o) * plane + q];
        if (wants_grad(n, 1)) {
          gemm(false, true, static_cast<int>(out_ch), static_cast<int>(patch),
               static_cast<int>(cols), T(1), gout.data(), col.data(), T(1), parent_grad(n, 1));
        }
        if (has_bias && wants_grad(n, 2)) {
          T* gb = parent_grad(n, 2);
          for (std::size_t o = 0; o < out_ch; ++o)
            for (std::size_t k = 0; k < cols; ++k) gb[o] += gout[o * cols + k];
        }
        if (wants_grad(n, 0)) {
          std::vector<T> gcol(patch * cols);
          gemm(true, false, static_cast<int>(patch), static_cast<int>(cols),
               static_cast<int>(out_ch), T(1), n.parents[1]->data.data(), gout.data(), T(0),
               gcol.data());
          T* gx = parent_grad(n, 0);
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const std::size_t p = (c * kh + i) * kw + j;
                for (std::size_t b = 0; b < batch; ++b)
                  for (std::size_t oh = 0; oh < ho; ++oh)
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                      const long ih =
                          static_cast<long>(oh * spec.stride_h + i) - static_cast<long>(spec.pad_h);
                      const long iw =
                          static_cast<long>(ow * spec.stride_w + j) - static_cast<long>(spec.pad_w);
                      if (ih < 0 || iw < 0 || ih >= static_cast<long>(h) ||
                          iw >= static_cast<long>(w))
                        continue;
                      gx[((b * ch + c) * h + static_cast<std::size_t>(ih)) * w +
                         static_cast<std::size_t>(iw)] +=
                          gcol[p * cols + (b * ho + oh) * wo + ow];
                    }
              }
        }
      },
      macs);
}

template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  check_input("depthwise_conv1d", x);
  check_input("depthwise_conv1d", weight);
  const bool has_bias = bias.defined();
  if (has_bias) check_input("depthwise_conv1d", bias);
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(0) != x.dim(1) ||
      weight.dim(1) % 2 == 0 || (has_bias && bias.numel() != x.dim(1))) {
    throw DimensionError("depthwise_conv1d: incompatible input " + shape_str(x.shape()) +
                         " and weight " + shape_str(weight.shape()));
  }
  const std::size_t steps = x.dim(0), ch = x.dim(1), k = weight.dim(1);
  const long half = static_cast<long>(k / 2);
  const auto xv = x.data();
  const auto wv = weight.data();
  std::vector<T> y(steps * ch);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      T acc = has_bias ? bias.data()[c] : T(0);
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(t) + static_cast<long>(j) - half;
        if (src < 0 || src >= static_cast<long>(steps)) continue;
        acc += wv[c * k + j] * xv[static_cast<std::size_t>(src) * ch + c];
      }
      y[t * ch + c] = acc;
    }
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  const auto macs = static_cast<std::uint64_t>(steps) * ch * k;
  return make_result<T>(
      "depthwise_conv1d", {steps, ch}, std::move(y), std::move(inputs),
      [=](Node<T>& n) {
        const auto& xv = n.parents[0]->data;
        const auto& wv = n.parents[1]->data;
        T* gx = wants_grad(n, 0) ? parent_grad(n, 0) : nullptr;
        T* gw = wants_grad(n, 1) ? parent_grad(n, 1) : nullptr;
        T* gb = has_bias && wants_grad(n, 2) ? parent_grad(n, 2) : nullptr;
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t c = 0; c < ch; ++c) {
            const T g = n.grad[t * ch + c];
            if (gb) gb[c] += g;
            for (std::size_t j = 0; j < k; ++j) {
              const long src = static_cast<long>(t) + static_cast<long>(j) - half;
              if (src < 0 || src >= static_cast<long>(steps)) continue;
              const std::size_t s = static_cast<std::size_t>(src) * ch + c;
              if (gx) gx[s] += g * wv[c * k + j];
              if (gw) gw[c * k + j] += g * xv[s];
            }
          }
        }
      },
      macs);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  check_input("slice_cols", x);
  if (x.rank() != 2 || count == 0 || start + count > x.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), width = x.dim(1);
  const auto xv = x.data();
  std::vector<T> y(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.begin() + r * width + start, count, y.begin() + r * count);
  return make_result<T>("slice_cols", {rows, count}, std::move(y), {x},
                        [rows, width, start, count](Node<T>& n) {
                          T* g = parent_grad(n, 0);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < count; ++j)
                              g[r * width + start + j] += n.grad[r * count + j];
                        });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  std::size_t width = 0;
  for (const auto& p : parts) {
    check_input("concat_cols", p);
    if (p.rank() != 2 || p.dim(0) != parts[0].dim(0)) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    width += p.dim(1);
  }
  const std::size_t rows = parts[0].dim(0);
  std::vector<T> y(rows * width);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pw = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().begin() + r * pw, pw, y.begin() + r * width + offset);
    widths.push_back(pw);
    offset += pw;
  }
  return make_result<T>("concat_cols", {rows, width}, std::move(y), parts,
                        [rows, width, widths](Node<T>& n) {
                          std::size_t offset = 0;
                          for (std::size_t i = 0; i < widths.size(); ++i) {
                            if (wants_grad(n, i)) {
                              T* g = parent_grad(n, i);
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < widths[i]; ++j)
                                  g[r * widths[i] + j] += n.grad[r * width + offset + j];
                            }
                            offset += widths[i];
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  check_input("slice_rows", x);
  if (x.rank() != 2 || count == 0 || start + count > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_str(x.shape()));
  }
  const std::size_t width = x.dim(1);
  std::vector<T> y(x.data().begin() + start * width, x.data().begin() + (start + count) * width);
  return make_result<T>("slice_rows", {count, width}, std::move(y), {x},
                        [start, width](Node<T>& n) {
                          T* g = parent_grad(n, 0) + start * width;
                          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                        });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    check_input("concat_rows", p);
    if (p.rank() != 2 || p.dim(1) != parts[0].dim(1)) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    rows += p.dim(0);
  }
  const std::size_t width = parts[0].dim(1);
  std::vector<T> y;
  y.reserve(rows * width);
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    y.insert(y.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
  }
  return make_result<T>("concat_rows", {rows, width}, std::move(y), parts, [sizes](Node<T>& n) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (wants_grad(n, i)) {
        T* g = parent_grad(n, i);
        for (std::size_t j = 0; j < sizes[i]; ++j) g[j] += n.grad[offset + j];
      }
      offset += sizes[i];
    }
  });
}

template <typename T>
Tensor<T> index_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  check_input("index_rows", x);
  if (x.rank() != 2 || rows.empty()) {
    throw DimensionError("index_rows: needs a matrix and at least one row, got " +
                         shape_str(x.shape()));
  }
  const std::size_t width = x.dim(1);
  std::vector<T> y(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) {
      throw DimensionError("index_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(x.data().begin() + rows[i] * width, width, y.begin() + i * width);
  }
  return make_result<T>("index_rows", {rows.size(), width}, std::move(y), {x},
                        [rows, width](Node<T>& n) {
                          T* g = parent_grad(n, 0);
                          for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t j = 0; j < width; ++j)
                              g[rows[i] * width + j] += n.grad[i * width + j];
                        });
}

#define EEND_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> tanh(const Tensor<T>&);                                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> silu(const Tensor<T>&);                                                 \
  template Tensor<T> softmax(const Tensor<T>&);                                              \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            const Conv2dSpec&);                                              \
  template Tensor<T> depthwise_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                             \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                             \
  template Tensor<T> index_rows(const Tensor<T>&, const std::vector<std::size_t>&);

EEND_INSTANTIATE_OPS(float)
EEND_INSTANTIATE_OPS(double)

}  // namespace eend::num
