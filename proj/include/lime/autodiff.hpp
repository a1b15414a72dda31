#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lime/kernels.hpp"

namespace lime {

template <class T>
class Tape;

/// Handle to an immutable tensor value, optionally tracked on a tape.
/// Untracked vars are plain values: every op below works on them and simply
/// records nothing, so forward results never depend on whether a tape is on.
template <class T>
class Var {
 public:
  Var() : value_(std::make_shared<const Tensor<T>>()) {}
  Var(Tensor<T> v) : value_(std::make_shared<const Tensor<T>>(std::move(v))) {}  // NOLINT: implicit by design of the op API
  explicit Var(std::shared_ptr<const Tensor<T>> v) : value_(std::move(v)) {}

  const Tensor<T>& value() const noexcept { return *value_; }
  const std::shared_ptr<const Tensor<T>>& shared() const noexcept { return value_; }
  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  const Shape& shape() const noexcept { return value_->shape(); }
  std::size_t rows() const noexcept { return value_->rows(); }
  std::size_t cols() const noexcept { return value_->cols(); }
  std::size_t size() const noexcept { return value_->size(); }

  /// Same value, no tape.
  Var detached() const { return Var(value_); }

 private:
  friend class Tape<T>;
  std::shared_ptr<const Tensor<T>> value_;
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Define-by-run record of executed ops. Nodes are appended in execution
/// order, so the vector order is already topological; backward walks it once
/// in reverse. Single owner: never share a tape across threads.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a trainable leaf.
  Var<T> leaf(std::shared_ptr<const Tensor<T>> value) {
    Var<T> v(std::move(value));
    attach(v, {}, nullptr);
    return v;
  }

  Var<T> leaf(Tensor<T> value) { return leaf(std::make_shared<const Tensor<T>>(std::move(value))); }

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records `out` as the result of an op over `inputs` when any input lives
  /// on this tape and recording is on; otherwise returns an untracked value.
  static Var<T> record(Tensor<T> out, std::initializer_list<const Var<T>*> inputs, Backward fn) {
    return record(std::move(out), std::span<const Var<T>* const>(inputs.begin(), inputs.size()), std::move(fn));
  }

  static Var<T> record(Tensor<T> out, std::span<const Var<T>* const> inputs, Backward fn) {
    Tape* tape = nullptr;
    for (const auto* in : inputs) {
      if (!in->tracked()) continue;
      if (tape && tape != in->tape()) throw AutodiffError("op mixes vars from different tapes");
      tape = in->tape();
    }
    Var<T> v(std::move(out));
    if (tape && tape->recording_) {
      std::vector<std::size_t> ids;
      for (const auto* in : inputs)
        if (in->tracked()) ids.push_back(in->id());
      tape->attach(v, std::move(ids), std::move(fn));
    }
    return v;
  }

  void accumulate(const Var<T>& v, const Tensor<T>& g) {
    if (!v.tracked()) return;
    Node& n = nodes_.at(v.id());
    if (!n.has_grad) {
      if (g.size() != v.size())
        throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " + shape_str(v.shape()));
      n.grad = g.reshaped(v.shape());
      n.has_grad = true;
    } else {
      T* dst = n.grad.data();
      const T* src = g.data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
    }
  }

  /// Reverse sweep from a scalar loss. A tape supports exactly one sweep;
  /// call reset() before reusing it.
  void backward(const Var<T>& loss) {
    if (!loss.tracked() || loss.tape() != this) throw AutodiffError("backward: loss is not recorded on this tape");
    if (loss.size() != 1) throw AutodiffError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (backward_done_) throw AutodiffError("backward: already run on this tape; reset() first");
    backward_done_ = true;
    accumulate(loss, Tensor<T>(loss.shape(), T{1}));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradient of the last backward sweep, or null when the var received none.
  const Tensor<T>* grad(const Var<T>& v) const {
    if (!v.tracked() || v.tape() != this) return nullptr;
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? &n.grad : nullptr;
  }

  /// Input ids of a recorded node; exposed for invariant checks.
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Backward backward;
    std::vector<std::size_t> inputs;
    Tensor<T> grad;
    bool has_grad = false;
  };

  void attach(Var<T>& v, std::vector<std::size_t> inputs, Backward fn) {
    if (backward_done_) throw AutodiffError("tape already swept; reset() before recording");
    v.tape_ = this;
    v.id_ = nodes_.size();
    nodes_.push_back(Node{std::move(fn), std::move(inputs), {}, false});
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Each computes its value with the matching kernel.

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return Tape<T>::record(kernels::matmul(a.value(), b.value()), {&a, &b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (a.tracked()) t.accumulate(a, kernels::matmul_nt(g, b.value(), false));
    if (b.tracked()) t.accumulate(b, kernels::matmul_tn(a.value(), g, false));
  });
}

/// a · bᵀ
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  return Tape<T>::record(kernels::matmul_nt(a.value(), b.value()), {&a, &b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (a.tracked()) t.accumulate(a, kernels::matmul(g, b.value(), false));
    if (b.tracked()) t.accumulate(b, kernels::matmul_tn(g, a.value(), false));
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return Tape<T>::record(kernels::add(a.value(), b.value()), {&a, &b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return Tape<T>::record(kernels::sub(a.value(), b.value()), {&a, &b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    if (b.tracked()) t.accumulate(b, kernels::scale(g, T{-1}));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return Tape<T>::record(kernels::mul(a.value(), b.value()), {&a, &b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (a.tracked()) t.accumulate(a, kernels::mul(g, b.value()));
    if (b.tracked()) t.accumulate(b, kernels::mul(g, a.value()));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return Tape<T>::record(kernels::scale(a.value(), s), {&a},
                         [a, s](Tape<T>& t, const Tensor<T>& g) { t.accumulate(a, kernels::scale(g, s)); });
}

template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& r) {
  return Tape<T>::record(kernels::add_row(a.value(), r.value()), {&a, &r}, [a, r](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    if (r.tracked()) t.accumulate(r, kernels::col_sum(g));
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  return Tape<T>::record(kernels::transpose(a.value()), {&a},
                         [a](Tape<T>& t, const Tensor<T>& g) { t.accumulate(a, kernels::transpose(g)); });
}

template <class T>
Var<T> row_sum(const Var<T>& a) {
  return Tape<T>::record(kernels::row_sum(a.value()), {&a}, [a](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[i];
    t.accumulate(a, ga);
  });
}

/// Sum over rows: p×q → 1×q.
template <class T>
Var<T> col_sum(const Var<T>& a) {
  return Tape<T>::record(kernels::col_sum(a.value()), {&a}, [a](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, kernels::broadcast_rows(g, a.rows()));
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  return Tape<T>::record(Tensor<T>::scalar(kernels::sum_all(a.value())), {&a},
                         [a](Tape<T>& t, const Tensor<T>& g) { t.accumulate(a, Tensor<T>(a.shape(), g[0])); });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> y = kernels::sigmoid(a.value());
  auto ys = std::make_shared<const Tensor<T>>(y);
  return Tape<T>::record(std::move(y), {&a}, [a, ys](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * (*ys)[i] * (T{1} - (*ys)[i]);
    t.accumulate(a, ga);
  });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return Tape<T>::record(kernels::silu(a.value()), {&a}, [a](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * kernels::silu_grad_scalar(a.value()[i]);
    t.accumulate(a, ga);
  });
}

template <class T>
Var<T> softmax_rows(const Var<T>& a, T scale = T{1}) {
  Tensor<T> y = kernels::softmax_rows(a.value(), scale);
  auto ys = std::make_shared<const Tensor<T>>(y);
  return Tape<T>::record(std::move(y), {&a}, [a, ys, scale](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, kernels::softmax_rows_backward(*ys, g, scale));
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gain, const Var<T>& bias) {
  auto mean = std::make_shared<std::vector<T>>();
  auto rstd = std::make_shared<std::vector<T>>();
  Tensor<T> y = kernels::layer_norm(a.value(), gain.value(), bias.value(), mean.get(), rstd.get());
  return Tape<T>::record(std::move(y), {&a, &gain, &bias},
                         [a, gain, bias, mean, rstd](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t p = a.rows(), d = a.cols();
    const Tensor<T>& x = a.value();
    const Tensor<T>& gm = gain.value();
    Tensor<T> dgain = Tensor<T>::matrix(1, d), dbias = Tensor<T>::matrix(1, d);
    Tensor<T> dx(a.shape());
    std::vector<T> xhat(d), dxhat(d);
    for (std::size_t i = 0; i < p; ++i) {
      const T mu = (*mean)[i], rs = (*rstd)[i];
      T m1{0}, m2{0};
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (x[i * d + j] - mu) * rs;
        const T gij = g[i * d + j];
        dgain[j] += gij * xhat[j];
        dbias[j] += gij;
        dxhat[j] = gij * gm[j];
        m1 += dxhat[j];
        m2 += dxhat[j] * xhat[j];
      }
      m1 /= static_cast<T>(d);
      m2 /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) dx[i * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
    }
    t.accumulate(a, dx);
    t.accumulate(gain, dgain);
    t.accumulate(bias, dbias);
  });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  std::vector<const Tensor<T>*> vals;
  std::vector<const Var<T>*> ins;
  for (const auto& p : parts) {
    vals.push_back(&p.value());
    ins.push_back(&p);
  }
  std::vector<Var<T>> keep(parts.begin(), parts.end());
  return Tape<T>::record(kernels::concat_rows<T>(vals), ins, [keep](Tape<T>& t, const Tensor<T>& g) {
    std::size_t r0 = 0;
    for (const auto& p : keep) {
      if (p.rows() == 0) continue;
      if (p.tracked()) t.accumulate(p, kernels::slice_rows(g, r0, r0 + p.rows()));
      r0 += p.rows();
    }
  });
}

template <class T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  const Var<T> parts[] = {a, b};
  return concat_rows<T>(std::span<const Var<T>>(parts));
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  std::vector<const Tensor<T>*> vals;
  std::vector<const Var<T>*> ins;
  for (const auto& p : parts) {
    vals.push_back(&p.value());
    ins.push_back(&p);
  }
  std::vector<Var<T>> keep(parts.begin(), parts.end());
  return Tape<T>::record(kernels::concat_cols<T>(vals), ins, [keep](Tape<T>& t, const Tensor<T>& g) {
    std::size_t c0 = 0;
    for (const auto& p : keep) {
      if (p.tracked()) t.accumulate(p, kernels::slice_cols(g, c0, c0 + p.cols()));
      c0 += p.cols();
    }
  });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  const Var<T> parts[] = {a, b};
  return concat_cols<T>(std::span<const Var<T>>(parts));
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end) {
  return Tape<T>::record(kernels::slice_rows(a.value(), begin, end), {&a},
                         [a, begin](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga = Tensor<T>::matrix(a.rows(), a.cols());
    std::copy(g.data(), g.data() + g.size(), ga.data() + begin * a.cols());
    t.accumulate(a, ga);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t end) {
  return Tape<T>::record(kernels::slice_cols(a.value(), begin, end), {&a},
                         [a, begin, end](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga = Tensor<T>::matrix(a.rows(), a.cols());
    const std::size_t w = end - begin;
    for (std::size_t i = 0; i < a.rows(); ++i)
      std::copy(g.data() + i * w, g.data() + (i + 1) * w, ga.data() + i * a.cols() + begin);
    t.accumulate(a, ga);
  });
}

/// Embedding lookup; the backward pass scatter-adds into the table.
template <class T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> ids) {
  auto idx = std::make_shared<const std::vector<std::size_t>>(ids.begin(), ids.end());
  return Tape<T>::record(kernels::gather_rows(table.value(), ids), {&table},
                         [table, idx](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gt = Tensor<T>::matrix(table.rows(), table.cols());
    const std::size_t c = table.cols();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[(*idx)[i] * c + j] += g[i * c + j];
    t.accumulate(table, gt);
  });
}

template <class T>
Var<T> broadcast_rows(const Var<T>& r, std::size_t p) {
  return Tape<T>::record(kernels::broadcast_rows(r.value(), p), {&r},
                         [r](Tape<T>& t, const Tensor<T>& g) { t.accumulate(r, kernels::col_sum(g)); });
}

template <class T>
Var<T> attention_weights(const Var<T>& s, kernels::Activation act, T scale, const AttentionMask& mask,
                         std::size_t row_offset = 0) {
  Tensor<T> w = kernels::attention_weights(s.value(), act, scale, mask, row_offset);
  auto ws = std::make_shared<const Tensor<T>>(w);
  return Tape<T>::record(std::move(w), {&s}, [s, ws, act, scale, mask, row_offset](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(s, kernels::attention_weights_backward(s.value(), *ws, g, act, scale, mask, row_offset));
  });
}

/// Mean binary cross-entropy with logits; labels are constants.
template <class T>
Var<T> bce_with_logits_mean(const Var<T>& logits, std::span<const T> labels) {
  auto y = std::make_shared<const std::vector<T>>(labels.begin(), labels.end());
  return Tape<T>::record(Tensor<T>::scalar(kernels::bce_with_logits_mean(logits.value(), labels)), {&logits},
                         [logits, y](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gl(logits.shape());
    const T inv = g[0] / static_cast<T>(gl.size());
    for (std::size_t i = 0; i < gl.size(); ++i)
      gl[i] = (kernels::sigmoid_scalar(logits.value()[i]) - (*y)[i]) * inv;
    t.accumulate(logits, gl);
  });
}

}  // namespace lime
