#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lime {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Rank 0, 1 and 2 are the only ranks the kernels use;
/// rank-1 and rank-0 tensors act as 1×n and 1×1 matrices respectively.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{0, 0} {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) { return Tensor({rows, cols}, fill); }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer for tensor");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor row_vector(std::span<const T> v) { return Tensor({1, v.size()}, std::vector<T>(v.begin(), v.end())); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept {
    return shape_.size() == 2 ? shape_[0] : 1;
  }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 1;
    return shape_.back();
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols() + j]; }

  std::span<const T> row(std::size_t i) const noexcept { return {data_.data() + i * cols(), cols()}; }
  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols(), cols()}; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, T stddev = T{1}) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> uniform(Shape shape, std::mt19937_64& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> t = Tensor<T>::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
  return t;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// FLOP accounting. Only matrix products are counted (2·p·q·r each); the
// counter is per thread and tagged by the role of the product.

enum class FlopTag : std::size_t { Other = 0, Projection, AttnScore, AttnValue, Mlp, Count };

struct FlopCounts {
  std::array<std::uint64_t, static_cast<std::size_t>(FlopTag::Count)> by_tag{};

  std::uint64_t total() const noexcept { return std::accumulate(by_tag.begin(), by_tag.end(), std::uint64_t{0}); }
  std::uint64_t operator[](FlopTag t) const noexcept { return by_tag[static_cast<std::size_t>(t)]; }
  std::uint64_t attention() const noexcept { return (*this)[FlopTag::AttnScore] + (*this)[FlopTag::AttnValue]; }

  FlopCounts operator-(const FlopCounts& o) const noexcept {
    FlopCounts r;
    for (std::size_t i = 0; i < by_tag.size(); ++i) r.by_tag[i] = by_tag[i] - o.by_tag[i];
    return r;
  }
  FlopCounts& operator+=(const FlopCounts& o) noexcept {
    for (std::size_t i = 0; i < by_tag.size(); ++i) by_tag[i] += o.by_tag[i];
    return *this;
  }
};

namespace detail {
struct FlopState {
  FlopCounts counts;
  FlopTag tag = FlopTag::Other;
};
inline FlopState& flop_state() {
  thread_local FlopState s;
  return s;
}
}  // namespace detail

inline const FlopCounts& flop_counts() { return detail::flop_state().counts; }

inline void add_flops(std::uint64_t n) {
  auto& s = detail::flop_state();
  s.counts.by_tag[static_cast<std::size_t>(s.tag)] += n;
}

/// Attributes every counted product inside its lifetime to `tag`.
class FlopTagScope {
 public:
  explicit FlopTagScope(FlopTag tag) : saved_(detail::flop_state().tag) { detail::flop_state().tag = tag; }
  ~FlopTagScope() { detail::flop_state().tag = saved_; }
  FlopTagScope(const FlopTagScope&) = delete;
  FlopTagScope& operator=(const FlopTagScope&) = delete;

 private:
  FlopTag saved_;
};

/// Measures the FLOPs counted on this thread since construction.
class FlopMeter {
 public:
  FlopMeter() : start_(flop_counts()) {}
  FlopCounts elapsed() const { return flop_counts() - start_; }
  void reset() { start_ = flop_counts(); }

 private:
  FlopCounts start_;
};

}  // namespace lime
