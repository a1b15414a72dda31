#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "lime/autodiff.hpp"

namespace lime::test {

/// Floor on the denominator of the elementwise relative gradient error, so
/// entries whose true derivative is ~0 are judged by absolute error instead.
inline constexpr double kGradErrorFloor = 1e-3;
inline constexpr double kFiniteDiffStep = 1e-5;

inline double relative_error(double analytic, double numeric, double floor = kGradErrorFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Max elementwise relative error between tape gradients and central
/// differences of `f` with respect to every entry of every input.
inline double grad_check(std::vector<Tensor<double>> inputs, const ScalarFn& f, double step = kFiniteDiffStep) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (auto& t : inputs) leaves.push_back(tape.leaf(t));
  tape.backward(f(leaves));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double>* g = tape.grad(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto in = inputs;
        in[k][i] += delta;
        std::vector<Var<double>> vs(in.begin(), in.end());
        return f(vs).value().item();
      };
      const double numeric = (eval(step) - eval(-step)) / (2 * step);
      const double analytic = g ? (*g)[i] : 0.0;
      worst = std::max(worst, relative_error(analytic, numeric));
    }
  }
  return worst;
}

/// Fixed random linear functional so vector-valued ops reduce to a scalar
/// loss with non-trivial upstream gradients.
inline Var<double> probe(const Var<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor<double> w = randn<double>({y.rows(), y.cols()}, rng).reshaped(y.shape());
  return sum(mul(y, Var<double>(w)));
}

}  // namespace lime::test
