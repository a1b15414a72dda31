#include <gtest/gtest.h>

#include <regex>

#include "lime/bench.hpp"

using namespace lime;

namespace {

SweepSpec small_sweep(SweepAxis axis, std::vector<std::size_t> grid) {
  SweepSpec s;
  s.axis = axis;
  s.grid = std::move(grid);
  s.base.d = 16;
  s.base.links = 4;
  s.base.heads = 2;
  s.base.layers = 2;
  s.fixed_candidates = 16;
  s.fixed_history = 32;
  s.models = {ModelKind::LimeMha, ModelKind::MhaSkyline};
  return s;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Grid, PowersOfTwo) {
  EXPECT_EQ(parse_grid("256..2048"), (std::vector<std::size_t>{256, 512, 1024, 2048}));
  EXPECT_EQ(parse_grid("64"), (std::vector<std::size_t>{64}));
  EXPECT_THROW(parse_grid("3..16"), std::invalid_argument);
  EXPECT_THROW(parse_grid("16..4"), std::invalid_argument);
  EXPECT_THROW(parse_grid("a..4"), std::invalid_argument);
  EXPECT_EQ(parse_grid("16,48,100"), (std::vector<std::size_t>{16, 48, 100}));
  EXPECT_THROW(parse_grid("16,16"), std::invalid_argument);
  EXPECT_THROW(parse_grid("16,,32"), std::invalid_argument);
  EXPECT_EQ(parse_axis("history"), SweepAxis::HistoryLength);
  EXPECT_THROW(parse_axis("width"), std::invalid_argument);
}

TEST(Stats, MedianAndPercentile) {
  EXPECT_EQ(median_of({3, 1, 2}), 2);
  EXPECT_EQ(median_of({4, 1, 2, 3}), 2.5);
  std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(percentile_of(v, 0.9), 9);
  EXPECT_EQ(percentile_of(v, 1.0), 10);
  EXPECT_NEAR(loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}), 2.0, 1e-12);
}

TEST(Sweep, SpecValidation) {
  auto s = small_sweep(SweepAxis::Candidates, {8, 8});
  EXPECT_THROW(run_sweep<float>(s), std::invalid_argument);
  s.grid = {8, 16};
  s.iterations = 9;
  EXPECT_THROW(run_sweep<float>(s), std::invalid_argument);
}

TEST(Sweep, EmptyGridGivesHeaderOnlyCsv) {
  auto rows = run_sweep<float>(small_sweep(SweepAxis::Candidates, {}));
  EXPECT_TRUE(rows.empty());
  EXPECT_EQ(bench_csv(rows), bench_csv_header() + "\n");
}

TEST(Sweep, RowsPerModelAndPoint) {
  auto rows = run_sweep<float>(small_sweep(SweepAxis::Candidates, {8, 16, 32}));
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) {
    EXPECT_FALSE(r.skipped());
    EXPECT_LE(r.median_ms, r.p90_ms);
    EXPECT_GT(r.flops_stage3, 0u);
  }
  // LIME stage 2 does not depend on M.
  EXPECT_EQ(rows[0].flops_stage2, rows[2].flops_stage2);
  EXPECT_EQ(rows[0].flops_stage2, rows[4].flops_stage2);
  const auto csv = bench_csv(rows);
  EXPECT_EQ(count(csv, "\n"), 7u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,axis,axis_value,median_ms,p90_ms,flops_stage2,flops_stage3,skipped_reason");
}

TEST(Sweep, FlopsRepeatExactly) {
  auto s = small_sweep(SweepAxis::HistoryLength, {16, 64});
  s.models = {ModelKind::LimeXor, ModelKind::HstuSkyline};
  auto a = run_sweep<float>(s), b = run_sweep<float>(s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].flops_stage2, b[i].flops_stage2);
    EXPECT_EQ(a[i].flops_stage3, b[i].flops_stage3);
  }
}

TEST(Sweep, QkDimAxisChangesScoreCost) {
  auto s = small_sweep(SweepAxis::QkDim, {8, 32});
  s.models = {ModelKind::MhaSkyline};
  auto rows = run_sweep<float>(s);
  EXPECT_GT(rows[1].flops_stage3, rows[0].flops_stage3);
}

TEST(Sweep, MemoryBudgetSkipsWithReason) {
  auto s = small_sweep(SweepAxis::HistoryLength, {32, 4096});
  s.memory_budget_bytes = estimate_request_bytes(
      [&] {
        ModelConfig c = s.base;
        c.kind = ModelKind::MhaSkyline;
        return c;
      }(),
      1024, s.fixed_candidates, sizeof(float));
  auto rows = run_sweep<float>(s);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_FALSE(rows[1].skipped());
  EXPECT_TRUE(rows[3].skipped());
  EXPECT_NE(rows[3].skipped_reason.find("memory budget"), std::string::npos);
  EXPECT_NE(bench_csv(rows).find("mha-sky,history,4096,,,,,memory budget"), std::string::npos);
}

TEST(Sweep, RetrievalStubHidesStageTwo) {
  auto s = small_sweep(SweepAxis::Candidates, {8});
  s.models = {ModelKind::LimeMha};
  s.retrieval_stub_ms = 1000;
  auto rows = run_sweep<float>(s);
  EXPECT_EQ(rows[0].stage2_median_ms, 1000);
  EXPECT_GE(rows[0].median_ms, 1000);
}

TEST(Plot, StructureTicksAndDeterminism) {
  std::vector<BenchRow> rows;
  for (const char* m : {"lime-mha", "mha-sky"})
    for (std::size_t v : {256, 512, 1024}) {
      BenchRow r;
      r.model = m;
      r.axis = "candidates";
      r.axis_value = v;
      r.median_ms = double(v) / 100;
      rows.push_back(r);
    }
  const auto svg = bench_svg(rows);
  EXPECT_EQ(count(svg, "<polyline"), 2u);
  std::regex tick("<text class=\"xtick\"[^>]*>([^<]*)</text>");
  std::vector<std::string> labels;
  for (std::sregex_iterator it(svg.begin(), svg.end(), tick), end; it != end; ++it) labels.push_back((*it)[1]);
  EXPECT_EQ(labels, (std::vector<std::string>{"256", "512", "1024"}));
  EXPECT_EQ(bench_svg(rows), svg);
  EXPECT_NE(svg.find("lime-mha"), std::string::npos);

  rows[4].median_ms = 0;
  try {
    bench_svg(rows);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("mha-sky@512"), std::string::npos) << e.what();
  }
  EXPECT_THROW(bench_svg({}), std::invalid_argument);
}
