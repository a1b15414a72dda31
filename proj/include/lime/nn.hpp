#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lime/autodiff.hpp"

namespace lime {

/// Trainable tensor. Shared so a binder can alias it without copying;
/// only the optimizer writes through it.
template <class T>
using Param = std::shared_ptr<Tensor<T>>;

/// Ordered name → parameter registry. Insertion order is the serialization
/// order of checkpoints and the iteration order of the optimizer.
template <class T>
class ParamSet {
 public:
  Param<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_shared<Tensor<T>>(std::move(init));
    index_[name] = items_.size();
    items_.emplace_back(name, p);
    return p;
  }

  const std::vector<std::pair<std::string, Param<T>>>& items() const noexcept { return items_; }

  Param<T> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : items_) n += p->size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Param<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Turns parameters into vars for one forward pass: tape leaves when a tape
/// is given, plain values otherwise. Each parameter is bound once per binder.
template <class T>
class Binder {
 public:
  Binder() = default;
  explicit Binder(Tape<T>* tape) : tape_(tape) {}

  Var<T> operator()(const Param<T>& p) {
    auto it = bound_.find(p.get());
    if (it != bound_.end()) return it->second;
    std::shared_ptr<const Tensor<T>> cp = p;
    Var<T> v = tape_ ? tape_->leaf(cp) : Var<T>(cp);
    bound_.emplace(p.get(), v);
    return v;
  }

  Tape<T>* tape() const noexcept { return tape_; }

  /// Var bound for `p`, if this binder has seen it.
  const Var<T>* find(const Param<T>& p) const {
    auto it = bound_.find(p.get());
    return it == bound_.end() ? nullptr : &it->second;
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::unordered_map<const Tensor<T>*, Var<T>> bound_;
};

template <class T>
Tensor<T> lecun_normal(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return randn<T>({fan_in, fan_out}, rng, static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in))));
}

template <class T>
struct LayerNorm {
  Param<T> gain, bias;

  static LayerNorm create(ParamSet<T>& ps, const std::string& name, std::size_t d) {
    return {ps.add(name + ".gain", Tensor<T>({1, d}, T{1})), ps.add(name + ".bias", Tensor<T>({1, d}, T{0}))};
  }

  Var<T> operator()(Binder<T>& b, const Var<T>& x) const { return layer_norm(x, b(gain), b(bias)); }
};

template <class T>
struct Linear {
  Param<T> weight;  // in × out
  Param<T> bias;    // 1 × out, may be null

  static Linear create(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, bool with_bias,
                       std::mt19937_64& rng) {
    Linear l;
    l.weight = ps.add(name + ".weight", lecun_normal<T>(in, out, rng));
    if (with_bias) l.bias = ps.add(name + ".bias", Tensor<T>({1, out}, T{0}));
    return l;
  }

  std::size_t in_features() const { return weight->rows(); }
  std::size_t out_features() const { return weight->cols(); }

  Var<T> operator()(Binder<T>& b, const Var<T>& x) const {
    Var<T> y = matmul(x, b(weight));
    return bias ? add_row(y, b(bias)) : y;
  }
};

/// Stack of linear layers with SiLU between them and nothing after the last.
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;

  static Mlp create(ParamSet<T>& ps, const std::string& name, std::size_t in, const std::vector<std::size_t>& widths,
                    std::mt19937_64& rng) {
    Mlp m;
    std::size_t prev = in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      m.layers.push_back(Linear<T>::create(ps, name + "." + std::to_string(i), prev, widths[i], true, rng));
      prev = widths[i];
    }
    return m;
  }

  std::size_t out_features() const { return layers.back().out_features(); }

  /// Matmul FLOPs for one input row.
  std::uint64_t flops_per_row() const {
    std::uint64_t f = 0;
    for (const auto& l : layers) f += 2ull * l.in_features() * l.out_features();
    return f;
  }

  Var<T> operator()(Binder<T>& b, Var<T> x) const {
    FlopTagScope tag(FlopTag::Mlp);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](b, x);
      if (i + 1 < layers.size()) x = silu(x);
    }
    return x;
  }
};

/// Gated elementwise-product block: LayerNorm, then silu(Ŷ·W_g + b_g) ⊙ (Ŷ·W_h),
/// projected back by W_o. All weights are d×d.
template <class T>
struct GatedMlp {
  LayerNorm<T> norm;
  Param<T> w_gate, b_gate, w_value, w_out;

  static GatedMlp create(ParamSet<T>& ps, const std::string& name, std::size_t d, std::mt19937_64& rng) {
    GatedMlp g;
    g.norm = LayerNorm<T>::create(ps, name + ".norm", d);
    g.w_gate = ps.add(name + ".w_gate", lecun_normal<T>(d, d, rng));
    g.b_gate = ps.add(name + ".b_gate", Tensor<T>({1, d}, T{0}));
    g.w_value = ps.add(name + ".w_value", lecun_normal<T>(d, d, rng));
    g.w_out = ps.add(name + ".w_out", lecun_normal<T>(d, d, rng));
    return g;
  }

  Var<T> operator()(Binder<T>& b, const Var<T>& y) const {
    FlopTagScope tag(FlopTag::Mlp);
    Var<T> n = norm(b, y);
    Var<T> u = silu(add_row(matmul(n, b(w_gate)), b(b_gate)));
    Var<T> v = matmul(n, b(w_value));
    return matmul(mul(u, v), b(w_out));
  }
};

}  // namespace lime
