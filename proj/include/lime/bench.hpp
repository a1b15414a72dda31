#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lime/pipeline.hpp"
#include "lime/plot.hpp"

namespace lime {

enum class SweepAxis { Candidates, HistoryLength, QkDim };

inline std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::Candidates: return "candidates";
    case SweepAxis::HistoryLength: return "history";
    case SweepAxis::QkDim: return "qk-dim";
  }
  return "?";
}

inline SweepAxis parse_axis(const std::string& s) {
  for (auto a : {SweepAxis::Candidates, SweepAxis::HistoryLength, SweepAxis::QkDim})
    if (axis_name(a) == s) return a;
  throw std::invalid_argument("unknown axis '" + s + "' (expected candidates, history, qk-dim)");
}

/// Expands "A..B" to the powers of two from A to B; a single number is a
/// one-point grid.
inline std::vector<std::size_t> parse_grid(const std::string& s) {
  auto num = [&](const std::string& t) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(t, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (t.empty() || pos != t.size() || v == 0) throw std::invalid_argument("bad grid value '" + t + "' in '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  if (s.find(',') != std::string::npos) {
    std::vector<std::size_t> g;
    std::stringstream in(s);
    for (std::string t; std::getline(in, t, ',');) {
      g.push_back(num(t));
      if (g.size() > 1 && g[g.size() - 2] >= g.back()) throw std::invalid_argument("grid must be strictly increasing: " + s);
    }
    return g;
  }
  const auto dots = s.find("..");
  if (dots == std::string::npos) return {num(s)};
  const std::size_t a = num(s.substr(0, dots)), b = num(s.substr(dots + 2));
  if ((a & (a - 1)) || (b & (b - 1))) throw std::invalid_argument("grid bounds must be powers of two: " + s);
  if (a > b) throw std::invalid_argument("grid lower bound exceeds upper bound: " + s);
  std::vector<std::size_t> g;
  for (std::size_t v = a; v <= b; v *= 2) g.push_back(v);
  return g;
}

struct SweepSpec {
  SweepAxis axis = SweepAxis::Candidates;
  std::vector<std::size_t> grid;
  ModelConfig base;  ///< dims shared by every model; kind is overridden per model
  std::vector<ModelKind> models{ModelKind::LimeMha, ModelKind::MhaSkyline};
  std::size_t fixed_candidates = 1024;
  std::size_t fixed_history = 1024;
  std::size_t warmup = 2;
  std::size_t iterations = 10;
  std::uint64_t seed = 1;
  double memory_budget_bytes = 2.0 * (1ull << 30);
  /// Stage 2 overlaps candidate retrieval; a request's stage-2 cost is
  /// max(stage 2, retrieval stub). 0 disables the overlap.
  double retrieval_stub_ms = 0;

  void validate() const {
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (grid[i] <= grid[i - 1]) throw std::invalid_argument("sweep grid must be strictly increasing");
    if (iterations < 10) throw std::invalid_argument("sweep needs at least 10 measured iterations");
    if (models.empty()) throw std::invalid_argument("sweep needs at least one model");
    if (retrieval_stub_ms < 0) throw std::invalid_argument("retrieval_stub_ms must be non-negative");
  }
};

struct BenchRow {
  std::string model;
  std::string axis;
  std::size_t axis_value = 0;
  double median_ms = 0, p90_ms = 0;
  double stage2_median_ms = 0, stage3_median_ms = 0;
  std::uint64_t flops_stage2 = 0, flops_stage3 = 0;
  std::string skipped_reason;

  bool skipped() const noexcept { return !skipped_reason.empty(); }
};

/// Median, averaging the middle pair for even sizes.
inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Nearest-rank percentile, q in (0, 1].
inline double percentile_of(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * double(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

/// Rough peak working set of one served request: activations, projected
/// keys/values per layer, and one block of attention scores per head.
inline double estimate_request_bytes(const ModelConfig& c, std::size_t n, std::size_t m, std::size_t scalar) {
  const double d = double(c.d), q = double(c.effective_qk_dim());
  const double layers = c.kind == ModelKind::HstuSkyline ? double(c.layers) : 1.0;
  double act = (double(n) + double(m)) * (d + 2 * q) * (layers + 2) + double(m) * 2 * d;
  double scores = 0;
  switch (c.kind) {
    case ModelKind::MhaSkyline: scores = double(std::min<std::size_t>(m, 512)) * double(n) * 3; break;
    case ModelKind::HstuSkyline:
      scores = double(std::min<std::size_t>(std::max(n, m), 512)) * double(n + m) * 3;
      break;
    default: scores = (double(n) + double(m)) * double(c.links) * 3;
  }
  return (act + scores) * double(scalar);
}

/// Runs every (grid value, model) pair. The timed region covers stages 2 and
/// 3 only; the QK cache for LIME models is built before timing.
template <class T>
std::vector<BenchRow> run_sweep(const SweepSpec& spec, const std::function<void(const BenchRow&)>& on_row = {}) {
  spec.validate();
  std::vector<BenchRow> rows;
  for (std::size_t value : spec.grid) {
    for (ModelKind kind : spec.models) {
      ModelConfig cfg = spec.base;
      cfg.kind = kind;
      std::size_t n = spec.fixed_history, m = spec.fixed_candidates;
      switch (spec.axis) {
        case SweepAxis::Candidates: m = value; break;
        case SweepAxis::HistoryLength: n = value; break;
        case SweepAxis::QkDim: cfg.qk_dim = value; break;
      }
      cfg.max_seq_len = std::max(cfg.max_seq_len, n);
      cfg.item_attributes.clear();
      cfg.seed = spec.seed;
      cfg.validate();

      BenchRow row;
      row.model = model_kind_name(kind);
      row.axis = axis_name(spec.axis);
      row.axis_value = value;
      const double need = estimate_request_bytes(cfg, n, m, sizeof(T));
      if (need > spec.memory_budget_bytes) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "memory budget: needs ~%.0f MiB of %.0f MiB", need / (1 << 20),
                      spec.memory_budget_bytes / (1 << 20));
        row.skipped_reason = buf;
        rows.push_back(row);
        if (on_row) on_row(row);
        continue;
      }

      Model<T> model(cfg);
      std::mt19937_64 rng(spec.seed * 1000003 + value);
      RankingRequest<T> req;
      req.history = randn<T>({n, cfg.d}, rng);
      req.context = randn<T>({1, cfg.context_dim}, rng);
      req.candidates = randn<T>({m, cfg.d}, rng);
      for (std::size_t i = 0; i < m; ++i) req.candidate_ids.push_back(i + 1);
      std::optional<QKCache<T>> cache;
      if (is_lime(kind)) cache = build_cache(model, std::span<const std::uint64_t>(req.candidate_ids), req.candidates);

      std::vector<double> total, s2, s3;
      for (std::size_t it = 0; it < spec.warmup + spec.iterations; ++it) {
        auto run = run_pipeline(model, cache ? &*cache : nullptr, req);
        if (it < spec.warmup) continue;
        if (total.empty()) {
          row.flops_stage2 = run.stage2.total();
          row.flops_stage3 = run.stage3.total();
        } else if (row.flops_stage2 != run.stage2.total() || row.flops_stage3 != run.stage3.total()) {
          throw std::logic_error("FLOP counts changed between repeats of one grid point");
        }
        const double stage2 = std::max(run.stage2_ms, spec.retrieval_stub_ms);
        s2.push_back(stage2);
        s3.push_back(run.stage3_ms);
        total.push_back(stage2 + run.stage3_ms);
      }
      row.median_ms = median_of(total);
      row.p90_ms = percentile_of(total, 0.9);
      row.stage2_median_ms = median_of(s2);
      row.stage3_median_ms = median_of(s3);
      rows.push_back(row);
      if (on_row) on_row(row);
    }
  }
  return rows;
}

inline std::string bench_csv_header() {
  return "model,axis,axis_value,median_ms,p90_ms,flops_stage2,flops_stage3,skipped_reason";
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = bench_csv_header() + "\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.model + "," + r.axis + "," + std::to_string(r.axis_value) + ",";
    if (r.skipped()) {
      out += ",,,," + r.skipped_reason + "\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,", r.median_ms, r.p90_ms);
    out += buf;
    out += std::to_string(r.flops_stage2) + "," + std::to_string(r.flops_stage3) + ",\n";
  }
  return out;
}

/// Median latency against the sweep axis, one series per model; skipped
/// rows are left out.
inline std::string bench_svg(const std::vector<BenchRow>& rows, const std::string& title = "serving latency") {
  if (rows.empty()) throw std::invalid_argument("bench_svg: no rows");
  std::vector<PlotSeries> series;
  std::vector<double> ticks;
  for (const auto& r : rows) {
    if (std::find(ticks.begin(), ticks.end(), double(r.axis_value)) == ticks.end()) ticks.push_back(double(r.axis_value));
    if (r.skipped()) continue;
    auto it = std::find_if(series.begin(), series.end(), [&](const PlotSeries& s) { return s.label == r.model; });
    if (it == series.end()) it = series.insert(series.end(), PlotSeries{r.model, {}, {}, {}});
    it->x.push_back(double(r.axis_value));
    it->y.push_back(r.median_ms);
    it->point_names.push_back("row " + r.model + "@" + std::to_string(r.axis_value));
  }
  std::sort(ticks.begin(), ticks.end());
  PlotOptions opt;
  opt.title = title;
  opt.x_label = rows.front().axis;
  opt.y_label = "median latency (ms)";
  opt.x_ticks = ticks;
  return svg_loglog(series, opt);
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope needs two or more points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw std::invalid_argument("loglog_slope: non-positive value");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace lime
