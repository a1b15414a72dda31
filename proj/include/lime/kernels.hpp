#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "lime/mask.hpp"
#include "lime/tensor.hpp"

/// Forward and backward numeric kernels over plain tensors. These never
/// record anything; lime/autodiff.hpp wraps them for reverse mode.
namespace lime::kernels {

namespace detail {

template <class T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() > 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

/// c[p×r] = a[p×q] · b[q×r], overwriting c. Plain i-k-j loop; the inner loop
/// runs over contiguous rows of b and c so the compiler vectorizes it.
/// Σ x[i]·y[i]; the simd reduction may reorder the sum.
template <class T>
T dot(const T* __restrict x, const T* __restrict y, std::size_t n) {
  T s{0};
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

/// c[p×r] = a[p×q] · b[q×r] with row strides lda, ldb, ldc.
template <class T>
void gemm_strided(const T* __restrict a, std::size_t lda, const T* __restrict b, std::size_t ldb, T* __restrict c,
                  std::size_t ldc, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    T* __restrict crow = c + i * ldc;
    std::fill(crow, crow + r, T{0});
    const T* arow = a + i * lda;
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = arow[k];
      const T* __restrict brow = b + k * ldb;
#pragma omp simd
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

/// Narrow outputs (r below one vector) are computed as dot products against
/// a transposed copy of b.
template <class T>
void gemm(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t p, std::size_t q, std::size_t r) {
  if (r >= 16 || q < 16) {
    gemm_strided(a, q, b, r, c, r, p, q, r);
    return;
  }
  std::vector<T> bt(q * r);
  for (std::size_t k = 0; k < q; ++k)
    for (std::size_t j = 0; j < r; ++j) bt[j * q + k] = b[k * r + j];
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) c[i * r + j] = dot(a + i * q, bt.data() + j * q, q);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor<T> out = Tensor<T>::matrix(c, r);
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < r; i0 += B)
    for (std::size_t j0 = 0; j0 < c; j0 += B)
      for (std::size_t i = i0; i < std::min(r, i0 + B); ++i)
        for (std::size_t j = j0; j < std::min(c, j0 + B); ++j) out(j, i) = a(i, j);
  return out;
}

/// Matrix product. `count` adds 2·p·q·r to the thread's FLOP counter.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool count = true) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t p = a.rows(), q = a.cols(), r = b.cols();
  Tensor<T> c = Tensor<T>::matrix(p, r);
  gemm(a.data(), b.data(), c.data(), p, q, r);
  if (count) add_flops(2ull * p * q * r);
  return c;
}

/// a[p×q] · b[r×q]ᵀ.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, bool count = true) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     "^T");
  return matmul(a, transpose(b), count);
}

/// a[q×p]ᵀ · b[q×r].
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b, bool count = true) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: inner dimensions disagree, " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  return matmul(transpose(a), b, count);
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* op) {
  detail::require_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, [](T x, T y) { return x + y; }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, [](T x, T y) { return x - y; }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, [](T x, T y) { return x * y; }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return map(a, [s](T x) { return x * s; });
}

/// a[p×q] + r[1×q] broadcast over rows.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& r) {
  if (r.size() != a.cols())
    throw ShapeError("add_row: row vector " + shape_str(r.shape()) + " does not match " + shape_str(a.shape()));
  Tensor<T> out = a;
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* o = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) o[j] += r[j];
  }
  return out;
}

/// Sum over columns: p×q → p×1.
template <class T>
Tensor<T> row_sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::matrix(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s{0};
    for (T v : a.row(i)) s += v;
    out[i] = s;
  }
  return out;
}

/// Sum over rows: p×q → 1×q.
template <class T>
Tensor<T> col_sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::matrix(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  return out;
}

template <class T>
T sum_all(const Tensor<T>& a) {
  T s{0};
  for (T v : a.values()) s += v;
  return s;
}

/// Branch-free e^x that the compiler can vectorize: x = n·ln2 + r with
/// |r| ≤ ln2/2, a Taylor polynomial for e^r, and 2^n built in the exponent
/// bits. Within a few ulp of std::exp; underflows to 0 below the smallest
/// normal result.
template <class T>
inline T exp_simd(T x) {
  static_assert(std::is_floating_point_v<T>);
  constexpr bool wide = sizeof(T) == 8;
  using Bits = std::conditional_t<wide, std::int64_t, std::int32_t>;
  constexpr T lo = wide ? T(-708.0) : T(-87.0), hi = wide ? T(709.0) : T(88.0);
  constexpr T log2e = T(1.4426950408889634074);
  constexpr T ln2_hi = wide ? T(6.93147180369123816490e-01) : T(0.693145752f);
  constexpr T ln2_lo = wide ? T(1.90821492927058770002e-10) : T(1.42860677e-06f);
  constexpr int terms = wide ? 13 : 7;
  constexpr int mant = wide ? 52 : 23;
  constexpr Bits bias = wide ? 1023 : 127;

  const T xc = x >= lo ? (x <= hi ? x : hi) : lo;  // NaN maps to lo
  const T n = std::nearbyint(xc * log2e);
  const T r = (xc - n * ln2_hi) - n * ln2_lo;
  static constexpr auto coef = [] {
    std::array<T, terms + 1> c{};
    double f = 1;
    for (int k = 0; k <= terms; ++k) {
      if (k) f *= k;
      c[k] = T(1.0 / f);
    }
    return c;
  }();
  T p = coef[terms];
  for (int k = terms - 1; k >= 0; --k) p = p * r + coef[k];
  const T scale = std::bit_cast<T>(static_cast<Bits>((static_cast<Bits>(n) + bias) << mant));
  // x - x is 0 except for NaN, which then propagates.
  const T y = p * scale + (x - x);
  return x < lo ? T{0} : (x > hi ? std::numeric_limits<T>::infinity() : y);
}

template <class T>
T sigmoid_scalar(T x) {
  const T e = exp_simd(-std::abs(x));
  const T s = T{1} / (T{1} + e);
  return x >= T{0} ? s : e * s;
}

template <class T>
T silu_scalar(T x) {
  return x * sigmoid_scalar(x);
}

template <class T>
T silu_grad_scalar(T x) {
  const T s = sigmoid_scalar(x);
  return s + x * s * (T{1} - s);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return map(a, [](T x) { return sigmoid_scalar(x); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  return map(a, [](T x) { return silu_scalar(x); });
}

/// Row-wise softmax of scale·a with max subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a, T scale = T{1}) {
  Tensor<T> out(a.shape());
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* x = a.data() + i * c;
    T* y = out.data() + i * c;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, x[j] * scale);
    T s{0};
#pragma omp simd reduction(+ : s)
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = exp_simd(x[j] * scale - m);
      s += y[j];
    }
    const T inv = T{1} / s;
    for (std::size_t j = 0; j < c; ++j) y[j] *= inv;
  }
  return out;
}

/// Backward of y = softmax(scale·x) per row: dx = scale · y ⊙ (g − ⟨g, y⟩).
template <class T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& g, T scale) {
  Tensor<T> dx(y.shape());
  const std::size_t c = y.cols();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const T* yr = y.data() + i * c;
    const T* gr = g.data() + i * c;
    T dot{0};
    for (std::size_t j = 0; j < c; ++j) dot += yr[j] * gr[j];
    for (std::size_t j = 0; j < c; ++j) dx.data()[i * c + j] = scale * yr[j] * (gr[j] - dot);
  }
  return dx;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer normalization with affine gain/bias. When `mean` and `rstd`
/// are non-null they receive the per-row statistics used by the backward pass.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, std::vector<T>* mean = nullptr,
                     std::vector<T>* rstd = nullptr) {
  const std::size_t d = a.cols();
  if (d == 0) throw ShapeError("layer_norm: zero-width rows");
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match " + shape_str(a.shape()));
  Tensor<T> out(a.shape());
  if (mean) mean->assign(a.rows(), T{0});
  if (rstd) rstd->assign(a.rows(), T{0});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* x = a.data() + i * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    T* y = out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) y[j] = (x[j] - mu) * rs * gain[j] + bias[j];
    if (mean) (*mean)[i] = mu;
    if (rstd) (*rstd)[i] = rs;
  }
  return out;
}

/// Stacks row blocks; blocks with zero rows are ignored.
template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>* const> parts) {
  const Tensor<T>* first = nullptr;
  std::size_t rows = 0;
  for (const auto* p : parts) {
    if (p->rows() == 0) continue;
    if (!first) first = p;
    if (p->cols() != first->cols())
      throw ShapeError("concat_rows: trailing dimension mismatch " + shape_str(first->shape()) + " vs " +
                       shape_str(p->shape()));
    rows += p->rows();
  }
  Tensor<T> out = Tensor<T>::matrix(rows, first ? first->cols() : (parts.empty() ? 0 : parts[0]->cols()));
  T* dst = out.data();
  for (const auto* p : parts)
    if (p->rows() != 0) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != 0 && b.rows() != 0 && a.cols() != b.cols())
    throw ShapeError("concat_rows: trailing dimension mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const Tensor<T>* parts[] = {&a, &b};
  return concat_rows<T>(std::span<const Tensor<T>* const>(parts));
}

template <class T>
Tensor<T> concat_cols(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) return Tensor<T>();
  const std::size_t rows = parts[0]->rows();
  std::size_t cols = 0;
  for (const auto* p : parts) {
    if (p->rows() != rows)
      throw ShapeError("concat_cols: row count mismatch " + shape_str(parts[0]->shape()) + " vs " +
                       shape_str(p->shape()));
    cols += p->cols();
  }
  Tensor<T> out = Tensor<T>::matrix(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    T* dst = out.data() + i * cols;
    for (const auto* p : parts) {
      auto r = p->row(i);
      dst = std::copy(r.begin(), r.end(), dst);
    }
  }
  return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows())
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     shape_str(a.shape()));
  const std::size_t c = a.cols();
  return Tensor<T>({end - begin, c}, std::vector<T>(a.data() + begin * c, a.data() + end * c));
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols())
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     shape_str(a.shape()));
  Tensor<T> out = Tensor<T>::matrix(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    std::copy(r.begin() + static_cast<std::ptrdiff_t>(begin), r.begin() + static_cast<std::ptrdiff_t>(end),
              out.data() + i * (end - begin));
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  const std::size_t c = table.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows())
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of table " + shape_str(table.shape()));
    auto r = table.row(ids[i]);
    std::copy(r.begin(), r.end(), out.data() + i * c);
  }
  return out;
}

/// Repeats a 1×q row p times.
template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& r, std::size_t p) {
  Tensor<T> out = Tensor<T>::matrix(p, r.size());
  for (std::size_t i = 0; i < p; ++i) std::copy(r.data(), r.data() + r.size(), out.data() + i * r.size());
  return out;
}

// ---------------------------------------------------------------------------
// Attention activations with masking.

enum class Activation {
  ScaledSoftmax,  ///< softmax of scale·s over allowed keys; masked logits are −∞
  Silu,           ///< silu(scale·s) on allowed keys, divided by the allowed-key count
  Identity        ///< scale·s on allowed keys; closed-form test hook only
};

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::ScaledSoftmax: return "softmax";
    case Activation::Silu: return "silu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

/// Turns raw scores s[q×n] into attention weights. Query row i of `s`
/// corresponds to absolute row `row_offset + i` of the mask.
template <class T>
Tensor<T> attention_weights(const Tensor<T>& s, Activation act, T scale, const AttentionMask& mask,
                            std::size_t row_offset = 0) {
  const std::size_t q = s.rows(), n = s.cols();
  Tensor<T> w = Tensor<T>::matrix(q, n);
  for (std::size_t i = 0; i < q; ++i) {
    auto [lo, hi] = mask.key_range(row_offset + i, n);
    if (lo >= hi) continue;
    const T* x = s.data() + i * n;
    T* y = w.data() + i * n;
    switch (act) {
      case Activation::ScaledSoftmax: {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = lo; j < hi; ++j) m = std::max(m, x[j] * scale);
        T z{0};
#pragma omp simd reduction(+ : z)
        for (std::size_t j = lo; j < hi; ++j) {
          y[j] = exp_simd(x[j] * scale - m);
          z += y[j];
        }
        const T inv = T{1} / z;
        for (std::size_t j = lo; j < hi; ++j) y[j] *= inv;
        break;
      }
      case Activation::Silu: {
        const T inv = T{1} / static_cast<T>(hi - lo);
#pragma omp simd
        for (std::size_t j = lo; j < hi; ++j) y[j] = silu_scalar(x[j] * scale) * inv;
        break;
      }
      case Activation::Identity:
        for (std::size_t j = lo; j < hi; ++j) y[j] = x[j] * scale;
        break;
    }
  }
  return w;
}

/// Gradient w.r.t. the raw scores given upstream gradient g on the weights.
template <class T>
Tensor<T> attention_weights_backward(const Tensor<T>& s, const Tensor<T>& w, const Tensor<T>& g, Activation act,
                                     T scale, const AttentionMask& mask, std::size_t row_offset = 0) {
  const std::size_t q = s.rows(), n = s.cols();
  Tensor<T> ds = Tensor<T>::matrix(q, n);
  for (std::size_t i = 0; i < q; ++i) {
    auto [lo, hi] = mask.key_range(row_offset + i, n);
    if (lo >= hi) continue;
    const T* x = s.data() + i * n;
    const T* y = w.data() + i * n;
    const T* gr = g.data() + i * n;
    T* d = ds.data() + i * n;
    switch (act) {
      case Activation::ScaledSoftmax: {
        T dot{0};
        for (std::size_t j = lo; j < hi; ++j) dot += y[j] * gr[j];
        for (std::size_t j = lo; j < hi; ++j) d[j] = scale * y[j] * (gr[j] - dot);
        break;
      }
      case Activation::Silu: {
        const T inv = T{1} / static_cast<T>(hi - lo);
        for (std::size_t j = lo; j < hi; ++j) d[j] = gr[j] * silu_grad_scalar(x[j] * scale) * scale * inv;
        break;
      }
      case Activation::Identity:
        for (std::size_t j = lo; j < hi; ++j) d[j] = gr[j] * scale;
        break;
    }
  }
  return ds;
}

/// Numerically stable mean binary cross-entropy with logits over all entries.
template <class T>
T bce_with_logits_mean(const Tensor<T>& logits, std::span<const T> labels) {
  if (logits.size() != labels.size())
    throw ShapeError("bce_with_logits: " + std::to_string(logits.size()) + " logits vs " +
                     std::to_string(labels.size()) + " labels");
  T s{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T x = logits[i];
    s += std::max(x, T{0}) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return s / static_cast<T>(logits.size());
}

}  // namespace lime::kernels
