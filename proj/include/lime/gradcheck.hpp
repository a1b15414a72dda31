#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lime/nn.hpp"

namespace lime {

struct ParamGradError {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
};

/// Elementwise |a − n| / max(|a|, |n|, floor). The floor keeps entries whose
/// derivative is essentially zero from being judged on pure rounding noise.
inline double gradient_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients of a scalar loss against central differences for
/// every scalar of every parameter in `ps`. `loss` builds the forward pass
/// from a binder; it is called once on a tape and twice per scalar without.
inline std::vector<ParamGradError> check_param_gradients(ParamSet<double>& ps,
                                                         const std::function<Var<double>(Binder<double>&)>& loss,
                                                         double step = 1e-5, double floor = 1e-3) {
  Tape<double> tape;
  Binder<double> tb(&tape);
  Var<double> l = loss(tb);
  tape.backward(l);

  std::vector<ParamGradError> out;
  for (const auto& [name, p] : ps.items()) {
    const Var<double>* v = tb.find(p);
    const Tensor<double>* g = v ? tape.grad(*v) : nullptr;
    ParamGradError e{name, p->size(), 0, 0};
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double orig = (*p)[i];
      auto eval = [&](double x) {
        (*p)[i] = x;
        Binder<double> b;
        return loss(b).value().item();
      };
      const double numeric = (eval(orig + step) - eval(orig - step)) / (2 * step);
      (*p)[i] = orig;
      const double analytic = g ? (*g)[i] : 0.0;
      e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic - numeric));
      e.max_rel_error = std::max(e.max_rel_error, gradient_relative_error(analytic, numeric, floor));
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace lime
