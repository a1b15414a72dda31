#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lime/model.hpp"
#include "lime/plot.hpp"

namespace lime {

class SvdConvergenceError : public std::runtime_error {
 public:
  SvdConvergenceError(std::size_t sweeps, double off_diagonal)
      : std::runtime_error("svd: no convergence after " + std::to_string(sweeps) +
                           " sweeps (largest relative column coupling " + std::to_string(off_diagonal) + ")"),
        sweeps_(sweeps),
        off_diagonal_(off_diagonal) {}
  std::size_t sweeps() const noexcept { return sweeps_; }
  double off_diagonal() const noexcept { return off_diagonal_; }

 private:
  std::size_t sweeps_;
  double off_diagonal_;
};

/// A = U diag(S) Vᵀ with k = min(m, n): U is m×k, V is n×k, S descending.
/// U and V are empty when only values were requested.
struct SvdResult {
  Tensor<double> u, v;
  std::vector<double> s;
};

struct SvdOptions {
  bool vectors = true;
  std::size_t max_sweeps = 60;
};

namespace detail {

/// One-sided Jacobi on the columns of an m×n matrix with m ≥ n, stored
/// column-major in `cols` (n columns of length m). Rotates column pairs until
/// every pair is orthogonal to working precision; `v` (n×n, column-major)
/// accumulates the rotations when non-null.
inline void jacobi_columns(std::vector<double>& cols, std::size_t m, std::size_t n, std::vector<double>* v,
                           std::size_t max_sweeps) {
  const double tol = std::numeric_limits<double>::epsilon() * double(std::max<std::size_t>(m, 8));
  std::vector<double> norm2(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* c = cols.data() + j * m;
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += c[i] * c[i];
    norm2[j] = s;
  }
  // Columns at rounding-noise level of the whole matrix count as zero; their
  // mutual coupling is noise and would never settle.
  const double eps_m = std::numeric_limits<double>::epsilon() * double(4 * m);
  const double negligible = std::accumulate(norm2.begin(), norm2.end(), 0.0) * eps_m * eps_m;
  double worst = 0;
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    worst = 0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* a = cols.data() + p * m;
        double* b = cols.data() + q * m;
        const double alpha = norm2[p], beta = norm2[q];
        if (alpha <= negligible || beta <= negligible) continue;
        double gamma = 0;
#pragma omp simd reduction(+ : gamma)
        for (std::size_t i = 0; i < m; ++i) gamma += a[i] * b[i];
        const double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, coupling);
        if (coupling <= tol) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
        const double c = 1 / std::sqrt(1 + t * t), s = c * t;
        double na = 0, nb = 0;
#pragma omp simd reduction(+ : na, nb)
        for (std::size_t i = 0; i < m; ++i) {
          const double x = a[i], y = b[i];
          a[i] = c * x - s * y;
          b[i] = s * x + c * y;
          na += a[i] * a[i];
          nb += b[i] * b[i];
        }
        norm2[p] = na;
        norm2[q] = nb;
        if (v) {
          double* vp = v->data() + p * n;
          double* vq = v->data() + q * n;
#pragma omp simd
          for (std::size_t i = 0; i < n; ++i) {
            const double x = vp[i], y = vq[i];
            vp[i] = c * x - s * y;
            vq[i] = s * x + c * y;
          }
        }
      }
    }
    if (!rotated) return;
  }
  throw SvdConvergenceError(max_sweeps, worst);
}

}  // namespace detail

/// Singular value decomposition by one-sided Jacobi rotations.
inline SvdResult svd(const Tensor<double>& a, const SvdOptions& opt = {}) {
  if (a.rank() != 2) throw ShapeError("svd: expected a matrix, got " + shape_str(a.shape()));
  if (!a.all_finite()) throw std::invalid_argument("svd: matrix has non-finite entries");
  const bool wide = a.rows() < a.cols();
  // Work on the tall orientation so that k = n.
  const std::size_t m = wide ? a.cols() : a.rows(), n = wide ? a.rows() : a.cols();
  SvdResult r;
  if (n == 0) {
    if (opt.vectors) {
      r.u = Tensor<double>::matrix(a.rows(), 0);
      r.v = Tensor<double>::matrix(a.cols(), 0);
    }
    return r;
  }
  std::vector<double> cols(m * n);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      // Column j of the tall matrix: a's column j, or a's row j when wide.
      if (wide)
        cols[i * m + j] = a(i, j);
      else
        cols[j * m + i] = a(i, j);
    }
  std::vector<double> v;
  if (opt.vectors) {
    v.assign(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) v[j * n + j] = 1;
  }
  detail::jacobi_columns(cols, m, n, opt.vectors ? &v : nullptr, opt.max_sweeps);

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* c = cols.data() + j * m;
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += c[i] * c[i];
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });
  for (std::size_t j : order) r.s.push_back(sigma[j]);
  if (!opt.vectors) return r;

  // Tall factors: left vectors are the normalized columns, right vectors are v.
  Tensor<double> left = Tensor<double>::matrix(m, n), right = Tensor<double>::matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    const double inv = sigma[j] > 0 ? 1 / sigma[j] : 0;
    for (std::size_t i = 0; i < m; ++i) left(i, k) = cols[j * m + i] * inv;
    for (std::size_t i = 0; i < n; ++i) right(i, k) = v[j * n + i];
  }
  r.u = wide ? std::move(right) : std::move(left);
  r.v = wide ? std::move(left) : std::move(right);
  return r;
}

template <class T>
SvdResult svd(const Tensor<T>& a, const SvdOptions& opt = {}) requires(!std::is_same_v<T, double>) {
  return svd(a.template cast<double>(), opt);
}

inline std::vector<double> singular_values(const Tensor<double>& a) { return svd(a, {.vectors = false}).s; }

/// ‖U diag(S) Vᵀ − A‖_F / ‖A‖_F (0 for a zero matrix reconstructed exactly).
inline double reconstruction_residual(const Tensor<double>& a, const SvdResult& r) {
  if (r.u.empty() && !r.s.empty()) throw std::invalid_argument("reconstruction_residual needs singular vectors");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      double x = 0;
      for (std::size_t k = 0; k < r.s.size(); ++k) x += r.u(i, k) * r.s[k] * r.v(j, k);
      num += (x - a(i, j)) * (x - a(i, j));
      den += a(i, j) * a(i, j);
    }
  return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

struct SpectrumReport {
  std::string label;
  std::vector<double> sigma;       ///< descending
  std::vector<double> cumulative;  ///< running sum of sigma over its total
  std::size_t rank = 0;            ///< rank at which captured_mass is read
  double captured_mass = 0;        ///< cumulative[rank - 1]
  std::size_t matrices = 0;        ///< number of matrices averaged
  std::vector<std::string> warnings;
};

/// Report for one descending spectrum. `rank` is clamped to the spectrum
/// length.
inline SpectrumReport make_spectrum(std::string label, std::vector<double> sigma, std::size_t rank) {
  SpectrumReport r;
  r.label = std::move(label);
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (!(sigma[i] >= 0)) throw std::invalid_argument("spectrum '" + r.label + "': negative or NaN singular value");
    if (i && sigma[i] > sigma[i - 1]) throw std::invalid_argument("spectrum '" + r.label + "' is not descending");
  }
  const double total = std::accumulate(sigma.begin(), sigma.end(), 0.0);
  double run = 0;
  for (double s : sigma) {
    run += s;
    r.cumulative.push_back(total > 0 ? std::min(1.0, run / total) : 1.0);
  }
  if (!r.cumulative.empty()) r.cumulative.back() = 1.0;
  r.sigma = std::move(sigma);
  r.rank = std::min(rank, r.sigma.size());
  r.captured_mass = r.rank ? r.cumulative[r.rank - 1] : 0.0;
  r.matrices = 1;
  return r;
}

/// Averages spectra after scaling each to unit sum, so matrices with
/// different magnitude or effective rank weigh equally. Shorter spectra are
/// padded with zeros.
inline SpectrumReport average_spectra(std::string label, const std::vector<std::vector<double>>& spectra,
                                      std::size_t rank) {
  if (spectra.empty()) throw std::invalid_argument("average_spectra: no spectra for '" + label + "'");
  std::size_t len = 0;
  for (const auto& s : spectra) len = std::max(len, s.size());
  std::vector<double> mean(len, 0.0);
  std::size_t used = 0;
  for (const auto& s : spectra) {
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    if (!(total > 0)) continue;
    for (std::size_t i = 0; i < s.size(); ++i) mean[i] += s[i] / total;
    ++used;
  }
  if (used == 0) throw std::invalid_argument("average_spectra: every matrix for '" + label + "' is zero");
  for (double& x : mean) x /= double(used);
  // Averaging descending sequences keeps them descending up to rounding.
  for (std::size_t i = 1; i < len; ++i) mean[i] = std::min(mean[i], mean[i - 1]);
  SpectrumReport r = make_spectrum(std::move(label), std::move(mean), rank);
  r.matrices = used;
  if (used < spectra.size())
    r.warnings.push_back(std::to_string(spectra.size() - used) + " all-zero matrices skipped");
  return r;
}

namespace detail {

/// True when every parameter still equals its value at construction.
template <class T>
bool parameters_at_init(const Model<T>& model) {
  Model<T> fresh(model.config());
  for (const auto& [name, p] : model.params().items()) {
    auto q = fresh.params().find(name);
    if (!q || q->storage() != p->storage()) return false;
  }
  return true;
}

template <class T>
void collect(std::vector<std::vector<double>>& out, const std::vector<Tensor<T>>& mats) {
  for (const auto& w : mats) out.push_back(singular_values(w.template cast<double>()));
}

/// Attention weights averaged over heads.
template <class T>
Tensor<double> head_mean(const std::vector<Tensor<T>>& per_head) {
  Tensor<double> m = Tensor<double>::matrix(per_head.front().rows(), per_head.front().cols());
  for (const auto& w : per_head)
    for (std::size_t i = 0; i < w.size(); ++i) m.values()[i] += double(w[i]) / double(per_head.size());
  return m;
}

template <class T>
std::vector<Tensor<T>> weight_matrices(Binder<T>& b, const MhaParams<T>& p, const Var<T>& queries, const Var<T>& keys,
                                       const AttentionMask& mask) {
  return attention_weight_matrices(project_query(b, p, queries).value(), project_key(b, p, keys).value(), mask,
                                   p.heads, p.activation, p.scale());
}

}  // namespace detail

/// Spectra of the attention weight matrices of a skyline model, averaged over
/// layers, heads and requests. HSTU yields a self-attention report (causal
/// N×N per layer) and a cross-attention report (M×N per layer); the MHA
/// skyline only has the cross report.
template <class T>
std::vector<SpectrumReport> attention_spectra(const Model<T>& model, std::span<const RankingRequest<T>> requests,
                                              std::size_t rank = 32) {
  const ModelKind kind = model.kind();
  if (kind != ModelKind::HstuSkyline && kind != ModelKind::MhaSkyline)
    throw std::invalid_argument("attention_spectra needs a skyline model, got " + model_kind_name(kind));
  if (requests.empty()) throw std::invalid_argument("attention_spectra: no requests");
  std::vector<std::vector<double>> self, cross;
  for (const auto& req : requests) {
    model.validate(req);
    if (req.history.rows() == 0) throw std::invalid_argument("attention_spectra: request without history");
    Binder<T> b;
    if (kind == ModelKind::MhaSkyline) {
      detail::collect(cross, detail::weight_matrices(b, model.target(), Var<T>(req.candidates), Var<T>(req.history),
                                                     AttentionMask::all_ones()));
      continue;
    }
    // Mirrors the HSTU user stage and candidate stage layer by layer.
    Var<T> x(req.history), z(req.candidates);
    const auto& attn = model.stack_attention();
    const auto& mlp = model.stack_mlp();
    for (std::size_t j = 0; j < attn.size(); ++j) {
      const auto& p = attn[j];
      Var<T> k = project_key(b, p, x), v = project_value(b, p, x);
      Var<T> qx = project_query(b, p, x), qz = project_query(b, p, z);
      detail::collect(self, attention_weight_matrices(qx.value(), k.value(), AttentionMask::causal(), p.heads,
                                                      p.activation, p.scale()));
      detail::collect(cross, attention_weight_matrices(qz.value(), k.value(), AttentionMask::all_ones(), p.heads,
                                                       p.activation, p.scale()));
      z = add(z, mlp[j](b, attend(qz, k, v, AttentionMask::all_ones(), p.heads, p.activation, p.scale())));
      if (j + 1 < attn.size()) x = add(x, mlp[j](b, attend(qx, k, v, AttentionMask::causal(), p.heads, p.activation, p.scale())));
    }
  }
  std::vector<SpectrumReport> out;
  if (!self.empty()) out.push_back(average_spectra("self-attention", self, rank));
  out.push_back(average_spectra("cross-attention", cross, rank));
  if (detail::parameters_at_init(model))
    for (auto& r : out) r.warnings.push_back("parameters equal their initialization; the model looks untrained");
  return out;
}

/// Spectra of the raw link table L and of the personalized links L^P
/// (averaged over requests) of a LIME model.
template <class T>
std::vector<SpectrumReport> link_spectra(const Model<T>& model, std::span<const RankingRequest<T>> requests) {
  if (!is_lime(model.kind())) throw std::invalid_argument("link_spectra needs a LIME model, got " + model_kind_name(model.kind()));
  const std::size_t links = model.config().links;
  std::vector<SpectrumReport> out;
  out.push_back(make_spectrum("links", singular_values(model.links()->template cast<double>()), links));
  if (!requests.empty()) {
    std::vector<std::vector<double>> personalized;
    for (const auto& req : requests) {
      model.validate(req);
      Binder<T> b;
      auto st = model.user_state(b, Var<T>(req.history), Var<T>(req.context));
      personalized.push_back(singular_values(st.personalized_links.value().template cast<double>()));
    }
    out.push_back(average_spectra("personalized links", personalized, links));
  }
  if (detail::parameters_at_init(model))
    for (auto& r : out) r.warnings.push_back("parameters equal their initialization; the model looks untrained");
  return out;
}

/// Smallest over largest singular value; 0 for an empty or zero spectrum.
inline double condition_ratio(const SpectrumReport& r) {
  if (r.sigma.empty() || !(r.sigma.front() > 0)) return 0;
  return r.sigma.back() / r.sigma.front();
}

struct DecompositionReport {
  /// ‖A_sky − W_cand→link · P_link→hist‖_F / ‖A_sky‖_F per request, where
  /// A_sky is the skyline's head-averaged cross-attention and the factors are
  /// LIME's head-averaged weight matrices.
  std::vector<double> residuals;
  double mean_residual = 0;
  std::size_t links = 0;
  /// Best achievable residual at rank r (truncated SVD of A_sky), averaged
  /// over requests, for r = 1, 2, 4, ... up to the longest history.
  std::vector<std::pair<std::size_t, double>> rank_curve;
};

namespace detail {

inline double relative_residual(const Tensor<double>& a, const Tensor<double>& approx) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - approx[i]) * (a[i] - approx[i]);
    den += a[i] * a[i];
  }
  return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

/// Residual of the best rank-r approximation from the singular values alone.
inline double truncation_residual(const std::vector<double>& s, std::size_t r) {
  double tail = 0, total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    total += s[i] * s[i];
    if (i >= r) tail += s[i] * s[i];
  }
  return total > 0 ? std::sqrt(tail / total) : 0;
}

}  // namespace detail

/// Compares a MHA skyline's cross-attention with LIME-MHA's two-factor
/// product (candidates over links, links over history) on the same requests.
template <class T>
DecompositionReport decomposition_residual(const Model<T>& lime, const Model<T>& skyline,
                                           std::span<const RankingRequest<T>> requests) {
  if (lime.kind() != ModelKind::LimeMha) throw std::invalid_argument("decomposition_residual needs a lime-mha model");
  if (skyline.kind() != ModelKind::MhaSkyline) throw std::invalid_argument("decomposition_residual needs a mha-sky model");
  if (lime.config().d != skyline.config().d || lime.config().context_dim != skyline.config().context_dim)
    throw std::invalid_argument("decomposition_residual: models have different input widths");
  if (requests.empty()) throw std::invalid_argument("decomposition_residual: no requests");
  DecompositionReport rep;
  rep.links = lime.config().links;
  std::size_t longest = 0;
  for (const auto& req : requests) longest = std::max(longest, req.history.rows());
  std::vector<std::size_t> ranks;
  for (std::size_t r = 1; r < longest; r *= 2) ranks.push_back(r);
  ranks.push_back(longest);
  std::vector<double> curve_sum(ranks.size(), 0.0);
  for (const auto& req : requests) {
    lime.validate(req);
    skyline.validate(req);
    if (req.history.rows() == 0) throw std::invalid_argument("decomposition_residual: request without history");
    Binder<T> b;
    const Var<T> hist(req.history), cands(req.candidates);
    Tensor<double> sky = detail::head_mean(detail::weight_matrices(b, skyline.target(), cands, hist, AttentionMask::all_ones()));
    Tensor<double> cand_link = lime.decoupled_weights(b, cands).value().template cast<double>();
    Var<T> lc = lime.contextualize_links(b, Var<T>(req.context));
    Tensor<double> link_hist =
        detail::head_mean(detail::weight_matrices(b, lime.personalizer(), lc, hist, AttentionMask::all_ones()));
    rep.residuals.push_back(detail::relative_residual(sky, kernels::matmul(cand_link, link_hist, false)));
    const auto s = singular_values(sky);
    for (std::size_t i = 0; i < ranks.size(); ++i) curve_sum[i] += detail::truncation_residual(s, ranks[i]);
  }
  rep.mean_residual = std::accumulate(rep.residuals.begin(), rep.residuals.end(), 0.0) / double(rep.residuals.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) rep.rank_curve.emplace_back(ranks[i], curve_sum[i] / double(requests.size()));
  return rep;
}

inline std::string spectrum_csv_header() { return "label,rank,sigma,cumulative"; }

inline std::string spectrum_csv(const std::vector<SpectrumReport>& reports) {
  std::string out = spectrum_csv_header() + "\n";
  char buf[96];
  for (const auto& r : reports)
    for (std::size_t i = 0; i < r.sigma.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%zu,%.17g,%.17g\n", i + 1, r.sigma[i], r.cumulative[i]);
      out += r.label + buf;
    }
  return out;
}

/// Cumulative curves against rank, one series per report.
inline std::string spectrum_svg(const std::vector<SpectrumReport>& reports, const std::string& title = "cumulative singular values") {
  std::vector<PlotSeries> series;
  for (const auto& r : reports) {
    PlotSeries s{r.label, {}, {}, {}};
    for (std::size_t i = 0; i < r.cumulative.size(); ++i) {
      s.x.push_back(double(i + 1));
      s.y.push_back(r.cumulative[i]);
      s.point_names.push_back(r.label + " rank " + std::to_string(i + 1));
    }
    series.push_back(std::move(s));
  }
  PlotOptions opt;
  opt.title = title;
  opt.x_label = "rank";
  opt.y_label = "cumulative share of singular values";
  return svg_loglog(series, opt);
}

}  // namespace lime
