#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lime/spectral.hpp"

using namespace lime;

namespace {

Tensor<double> gaussian(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return randn<double>({r, c}, rng);
}

/// Orthonormalizes the columns of a random square matrix (modified Gram-Schmidt).
Tensor<double> random_orthogonal(std::size_t n, std::uint64_t seed) {
  Tensor<double> q = gaussian(n, n, seed);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, k);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, k);
    }
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
  }
  return q;
}

/// Eigenvalues of a symmetric matrix by classical two-sided Jacobi, descending.
std::vector<double> symmetric_eigenvalues(Tensor<double> a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0) continue;
        const double theta = 0.5 * std::atan2(2 * a(p, q), a(q, q) - a(p, p));
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::size_t k = 0; k < n; ++k) {  // A ← A J
          const double x = a(k, p), y = a(k, q);
          a(k, p) = c * x - s * y;
          a(k, q) = s * x + c * y;
        }
        for (std::size_t k = 0; k < n; ++k) {  // A ← Jᵀ A
          const double x = a(p, k), y = a(q, k);
          a(p, k) = c * x - s * y;
          a(q, k) = s * x + c * y;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

double max_orthonormality_error(const Tensor<double>& q) {
  double worst = 0;
  for (std::size_t a = 0; a < q.cols(); ++a)
    for (std::size_t b = 0; b < q.cols(); ++b) {
      double dot = 0;
      for (std::size_t i = 0; i < q.rows(); ++i) dot += q(i, a) * q(i, b);
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

ModelConfig skyline_config(ModelKind kind) {
  ModelConfig c;
  c.kind = kind;
  c.d = 16;
  c.heads = 2;
  c.layers = 2;
  c.links = 4;
  c.context_dim = 4;
  c.interaction_widths = {8};
  return c;
}

RankingRequest<double> random_request(std::size_t n, std::size_t m, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RankingRequest<double> r;
  r.history = randn<double>({n, c.d}, rng);
  r.context = randn<double>({1, c.context_dim}, rng);
  r.candidates = randn<double>({m, c.d}, rng);
  return r;
}

}  // namespace

TEST(Svd, DiagonalThreeOne) {
  auto r = svd(Tensor<double>::from_rows({{3, 0}, {0, 1}}));
  ASSERT_EQ(r.s.size(), 2u);
  EXPECT_DOUBLE_EQ(r.s[0], 3);
  EXPECT_DOUBLE_EQ(r.s[1], 1);
  // Ascending diagonal is reordered.
  auto q = svd(Tensor<double>::from_rows({{1, 0}, {0, 3}}));
  EXPECT_DOUBLE_EQ(q.s[0], 3);
  EXPECT_DOUBLE_EQ(q.s[1], 1);
  EXPECT_LT(reconstruction_residual(Tensor<double>::from_rows({{1, 0}, {0, 3}}), q), 1e-15);
}

TEST(Svd, OrthogonalMatrixHasUnitValues) {
  for (std::size_t n : {2u, 7u, 40u}) {
    auto s = singular_values(random_orthogonal(n, n));
    ASSERT_EQ(s.size(), n);
    for (double x : s) EXPECT_NEAR(x, 1.0, 1e-9);
  }
}

TEST(Svd, SquaredValuesMatchGramEigenvalues) {
  const auto a = gaussian(8, 5, 11);
  const auto gram = kernels::matmul_tn(a, a, false);
  const auto ev = symmetric_eigenvalues(gram);
  const auto s = svd(a).s;
  ASSERT_EQ(s.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(s[i] * s[i], ev[i], 1e-8) << i;
}

TEST(Svd, ReconstructionOnRandomMatrices) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> size(1, 256);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = t == 0 ? 256 : size(rng), n = t == 0 ? 256 : size(rng);
    const auto a = gaussian(m, n, 100 + t);
    const auto r = svd(a);
    ASSERT_EQ(r.s.size(), std::min(m, n));
    EXPECT_LT(reconstruction_residual(a, r), 1e-6) << m << "x" << n;
    for (std::size_t i = 1; i < r.s.size(); ++i) ASSERT_GE(r.s[i - 1], r.s[i]);
    if (t < 5) {
      EXPECT_LT(max_orthonormality_error(r.u), 1e-10);
      EXPECT_LT(max_orthonormality_error(r.v), 1e-10);
    }
  }
}

TEST(Svd, WideAndTallGiveSameValues) {
  const auto a = gaussian(6, 13, 3);
  Tensor<double> at = Tensor<double>::matrix(13, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 13; ++j) at(j, i) = a(i, j);
  const auto w = svd(a), t = svd(at);
  EXPECT_EQ(w.u.shape(), (Shape{6, 6}));
  EXPECT_EQ(w.v.shape(), (Shape{13, 6}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(w.s[i], t.s[i], 1e-12);
  EXPECT_LT(reconstruction_residual(a, w), 1e-12);
}

TEST(Svd, RankOneOuterProduct) {
  const auto u = gaussian(9, 1, 1), v = gaussian(1, 4, 2);
  const auto a = kernels::matmul(u, v, false);
  const auto r = svd(a);
  double nu = 0, nv = 0;
  for (double x : u.values()) nu += x * x;
  for (double x : v.values()) nv += x * x;
  EXPECT_NEAR(r.s[0], std::sqrt(nu * nv), 1e-12);
  for (std::size_t i = 1; i < r.s.size(); ++i) EXPECT_LT(r.s[i], 1e-12);
  EXPECT_LT(reconstruction_residual(a, r), 1e-12);
  EXPECT_TRUE(singular_values(Tensor<double>::matrix(3, 2)) == (std::vector<double>{0, 0}));
}

TEST(Svd, IterationCapRaisesConvergenceError) {
  try {
    svd(gaussian(40, 40, 9), {.vectors = true, .max_sweeps = 1});
    FAIL() << "expected a convergence error";
  } catch (const SvdConvergenceError& e) {
    EXPECT_EQ(e.sweeps(), 1u);
    EXPECT_GT(e.off_diagonal(), 0);
  }
  Tensor<double> bad = gaussian(3, 3, 1);
  bad(1, 1) = std::nan("");
  EXPECT_THROW(svd(bad), std::invalid_argument);
}

TEST(Spectrum, CumulativeIsMonotoneAndEndsAtOne) {
  auto r = make_spectrum("x", singular_values(gaussian(30, 20, 4)), 8);
  ASSERT_EQ(r.cumulative.size(), 20u);
  for (std::size_t i = 1; i < r.cumulative.size(); ++i) EXPECT_GE(r.cumulative[i], r.cumulative[i - 1]);
  EXPECT_NEAR(r.cumulative.back(), 1.0, 1e-9);
  EXPECT_EQ(r.rank, 8u);
  EXPECT_DOUBLE_EQ(r.captured_mass, r.cumulative[7]);
  EXPECT_THROW(make_spectrum("up", {1, 2}, 1), std::invalid_argument);
  EXPECT_THROW(make_spectrum("neg", {1, -1}, 1), std::invalid_argument);
}

TEST(Spectrum, AveragingWeighsMatricesEqually) {
  auto r = average_spectra("avg", {{10, 0}, {1, 1}}, 1);
  ASSERT_EQ(r.sigma.size(), 2u);
  EXPECT_DOUBLE_EQ(r.sigma[0], 0.75);
  EXPECT_DOUBLE_EQ(r.sigma[1], 0.25);
  EXPECT_DOUBLE_EQ(r.captured_mass, 0.75);
  EXPECT_EQ(r.matrices, 2u);
  // Shorter spectra are zero-padded.
  auto p = average_spectra("pad", {{2}, {1, 1, 1, 1}}, 2);
  EXPECT_DOUBLE_EQ(p.sigma[0], 0.625);
  EXPECT_DOUBLE_EQ(p.sigma[3], 0.125);
  auto z = average_spectra("zero", {{0, 0}, {1}}, 1);
  EXPECT_EQ(z.matrices, 1u);
  EXPECT_EQ(z.warnings.size(), 1u);
  EXPECT_THROW(average_spectra("none", {}, 1), std::invalid_argument);
}

TEST(AttentionSpectra, IdenticalHistoryRowsGiveRankOneCrossAttention) {
  for (ModelKind kind : {ModelKind::HstuSkyline, ModelKind::MhaSkyline}) {
    const auto cfg = skyline_config(kind);
    Model<double> model(cfg);
    auto req = random_request(24, 10, cfg, 3);
    for (std::size_t i = 1; i < req.history.rows(); ++i)
      for (std::size_t c = 0; c < cfg.d; ++c) req.history(i, c) = req.history(0, c);
    auto reports = attention_spectra<double>(model, std::span(&req, 1), 4);
    const auto& cross = reports.back();
    EXPECT_EQ(cross.label, "cross-attention");
    EXPECT_GT(cross.cumulative[0], 0.99) << model_kind_name(kind);
    EXPECT_EQ(reports.size(), kind == ModelKind::HstuSkyline ? 2u : 1u);
  }
}

TEST(AttentionSpectra, AveragesLayersHeadsAndRequests) {
  const auto cfg = skyline_config(ModelKind::HstuSkyline);
  Model<double> model(cfg);
  std::vector<RankingRequest<double>> reqs{random_request(20, 6, cfg, 1), random_request(20, 6, cfg, 2),
                                           random_request(20, 6, cfg, 3)};
  auto reports = attention_spectra<double>(model, reqs, 4);
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].label, "self-attention");
  EXPECT_EQ(reports[0].matrices, 3u * cfg.layers * cfg.heads);
  EXPECT_EQ(reports[0].sigma.size(), 20u);
  EXPECT_EQ(reports[1].sigma.size(), 6u);
  for (const auto& r : reports) {
    for (std::size_t i = 1; i < r.cumulative.size(); ++i) EXPECT_GE(r.cumulative[i], r.cumulative[i - 1]);
    EXPECT_NEAR(r.cumulative.back(), 1.0, 1e-9);
  }
}

TEST(AttentionSpectra, WarnsOnColdParameters) {
  const auto cfg = skyline_config(ModelKind::MhaSkyline);
  Model<double> model(cfg);
  auto req = random_request(12, 5, cfg, 1);
  auto cold = attention_spectra<double>(model, std::span(&req, 1));
  ASSERT_EQ(cold[0].warnings.size(), 1u);
  EXPECT_NE(cold[0].warnings[0].find("untrained"), std::string::npos);
  model.params().items()[0].second->values()[0] += 1e-3;
  EXPECT_TRUE(attention_spectra<double>(model, std::span(&req, 1))[0].warnings.empty());
  Model<double> lime(skyline_config(ModelKind::LimeMha));
  EXPECT_THROW(attention_spectra<double>(lime, std::span(&req, 1)), std::invalid_argument);
}

TEST(LinkSpectra, StandardNormalLinksAreWellConditioned) {
  auto cfg = skyline_config(ModelKind::LimeXor);
  cfg.links = 16;
  Model<double> model(cfg);
  std::vector<RankingRequest<double>> reqs{random_request(30, 3, cfg, 1), random_request(30, 3, cfg, 2)};
  auto reports = link_spectra<double>(model, reqs);
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].label, "links");
  EXPECT_EQ(reports[1].label, "personalized links");
  EXPECT_EQ(reports[0].sigma.size(), 16u);
  for (const auto& r : reports) EXPECT_GT(condition_ratio(r), 1e-4) << r.label;
}

TEST(Decomposition, FullRankPlantReconstructsSkyline) {
  const std::size_t n = 8;
  ModelConfig sc = skyline_config(ModelKind::MhaSkyline);
  sc.heads = 1;
  ModelConfig lc = sc;
  lc.kind = ModelKind::LimeMha;
  lc.links = n;
  lc.context_layers = 1;
  Model<double> sky(sc), lime(lc);
  const auto req = random_request(n, 5, sc, 21);

  // Links are the history rows; the contextualizer passes them through.
  *lime.params().find("links") = req.history;
  Tensor<double> pass = Tensor<double>::matrix(lc.d + lc.context_dim, lc.d);
  for (std::size_t i = 0; i < lc.d; ++i) pass(i, i) = 1;
  *lime.contextualizer_mut().layers[0].weight = pass;
  // Sharp link-over-history attention: each link attends to its own row.
  Tensor<double> sharp = Tensor<double>::matrix(lc.d, lc.d), eye = Tensor<double>::matrix(lc.d, lc.d);
  for (std::size_t i = 0; i < lc.d; ++i) {
    sharp(i, i) = 40;
    eye(i, i) = 1;
  }
  *lime.personalizer_mut().w_q = sharp;
  *lime.personalizer_mut().w_k = eye;
  // Candidate-over-link scores use the skyline's projections.
  *lime.decoupled_mut().w_q = *sky.target().w_q;
  *lime.decoupled_mut().w_k = *sky.target().w_k;

  auto rep = decomposition_residual<double>(lime, sky, std::span(&req, 1));
  ASSERT_EQ(rep.residuals.size(), 1u);
  EXPECT_LT(rep.mean_residual, 1e-6);
  EXPECT_EQ(rep.links, n);
}

TEST(Decomposition, ReportsPerRankCurve) {
  ModelConfig sc = skyline_config(ModelKind::MhaSkyline);
  ModelConfig lc = sc;
  lc.kind = ModelKind::LimeMha;
  Model<double> sky(sc), lime(lc);
  std::vector<RankingRequest<double>> reqs{random_request(20, 7, sc, 1), random_request(20, 7, sc, 2)};
  auto rep = decomposition_residual<double>(lime, sky, reqs);
  EXPECT_EQ(rep.residuals.size(), 2u);
  std::vector<std::size_t> ranks;
  for (const auto& [r, res] : rep.rank_curve) ranks.push_back(r);
  EXPECT_EQ(ranks, (std::vector<std::size_t>{1, 2, 4, 8, 16, 20}));
  for (std::size_t i = 1; i < rep.rank_curve.size(); ++i)
    EXPECT_LE(rep.rank_curve[i].second, rep.rank_curve[i - 1].second + 1e-15);
  EXPECT_LT(rep.rank_curve.back().second, 1e-12);
  for (double r : rep.residuals) EXPECT_TRUE(std::isfinite(r) && r >= 0);
  EXPECT_THROW(decomposition_residual<double>(sky, lime, reqs), std::invalid_argument);
  // Mixed lengths: the curve follows the longest history.
  reqs[1] = random_request(10, 7, sc, 3);
  reqs.push_back(random_request(33, 7, sc, 4));
  auto mixed = decomposition_residual<double>(lime, sky, reqs);
  EXPECT_EQ(mixed.rank_curve.back().first, 33u);
  EXPECT_EQ(mixed.rank_curve.size(), 7u);
  EXPECT_LT(mixed.rank_curve.back().second, 1e-12);
}

TEST(Spectrum, CsvAndSvg) {
  std::vector<SpectrumReport> reps{make_spectrum("a", {2, 1}, 1), make_spectrum("b", {3, 2, 1}, 2)};
  const auto csv = spectrum_csv(reps);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "label,rank,sigma,cumulative");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_NE(csv.find("b,3,1,1\n"), std::string::npos);
  const auto svg = spectrum_svg(reps);
  std::size_t lines = 0;
  for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  EXPECT_EQ(lines, 2u);
  EXPECT_EQ(svg, spectrum_svg(reps));
}
