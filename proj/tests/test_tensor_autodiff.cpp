#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lime/autodiff.hpp"
#include "support.hpp"

using namespace lime;
using lime::test::grad_check;
using lime::test::probe;

namespace {

Tensor<double> rnd(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return randn<double>({r, c}, rng);
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Matmul, IdentityTimesColumn) {
  auto a = Tensor<double>::from_rows({{1, 0}, {0, 1}});
  auto b = Tensor<double>::from_rows({{3}, {5}});
  EXPECT_EQ(kernels::matmul(a, b), b);
}

TEST(Matmul, OneByOne) {
  auto c = kernels::matmul(Tensor<double>::from_rows({{2}}), Tensor<double>::from_rows({{3}}));
  EXPECT_EQ(c.item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  auto a = rnd(3, 4, 1), b = rnd(4, 2, 2);
  auto c = kernels::matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_EQ(c(i, j), s);
    }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    kernels::matmul(rnd(2, 3, 1), rnd(4, 2, 1));
    FAIL();
  } catch (const ShapeError& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("[2x3]"), std::string::npos) << m;
    EXPECT_NE(m.find("[4x2]"), std::string::npos) << m;
  }
}

TEST(Matmul, FlopCounterTwoProductGraph) {
  FlopMeter meter;
  Var<double> x = rnd(3, 4, 1), w1 = rnd(4, 5, 2), w2 = rnd(5, 2, 3);
  Var<double> y = matmul(matmul(x, w1), w2);
  EXPECT_EQ(meter.elapsed().total(), 2u * 3 * 4 * 5 + 2u * 3 * 5 * 2);
  // Backward products are not counted.
  Tape<double> tape;
  Var<double> a = tape.leaf(rnd(3, 4, 1));
  meter.reset();
  tape.backward(sum(matmul(a, Var<double>(rnd(4, 2, 5)))));
  EXPECT_EQ(meter.elapsed().total(), 2u * 3 * 4 * 2);
}

TEST(Softmax, SymmetricRow) {
  auto y = kernels::softmax_rows(Tensor<double>::from_rows({{0, 0}}), 1.0);
  EXPECT_EQ(y(0, 0), 0.5);
  EXPECT_EQ(y(0, 1), 0.5);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  auto y = kernels::softmax_rows(Tensor<double>::from_rows({{1000, 0}}), 1.0);
  EXPECT_TRUE(y.all_finite());
  EXPECT_NEAR(y(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 0.0, 1e-12);
}

TEST(Softmax, MatchesExpSumFormula) {
  auto a = rnd(2, 3, 4).cast<float>();
  const float s = 1.0f / std::sqrt(8.0f);
  auto y = kernels::softmax_rows(a, s);
  for (std::size_t i = 0; i < 2; ++i) {
    double z = 0, rowsum = 0;
    for (std::size_t j = 0; j < 3; ++j) z += std::exp(double(a(i, j)) * s);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(y(i, j), std::exp(double(a(i, j)) * s) / z, 1e-7);
      rowsum += y(i, j);
    }
    EXPECT_NEAR(rowsum, 1.0, 1e-6);
  }
}

TEST(Exp, CloseToLibmOverTheRange) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-80.0, 80.0);
  for (int i = 0; i < 200000; ++i) {
    const double x = u(rng);
    const double ref = std::exp(x);
    EXPECT_LE(std::abs(kernels::exp_simd(x) - ref), 4e-16 * ref) << x;
    const float xf = static_cast<float>(x);
    const float reff = std::exp(xf);
    EXPECT_LE(std::abs(kernels::exp_simd(xf) - reff), 2.5e-7f * reff) << xf;
  }
  EXPECT_EQ(kernels::exp_simd(0.0), 1.0);
  EXPECT_EQ(kernels::exp_simd(0.0f), 1.0f);
  EXPECT_EQ(kernels::exp_simd(-1000.0), 0.0);
  EXPECT_EQ(kernels::exp_simd(-1000.0f), 0.0f);
  EXPECT_TRUE(std::isinf(kernels::exp_simd(1000.0)));
  EXPECT_TRUE(std::isinf(kernels::exp_simd(100.0f)));
  EXPECT_TRUE(std::isnan(kernels::exp_simd(std::nan(""))));
  EXPECT_NEAR(kernels::exp_simd(709.0), std::exp(709.0), 1e-15 * std::exp(709.0));
}

TEST(Sigmoid, BothTailsAndMidpoint) {
  EXPECT_EQ(kernels::sigmoid_scalar(0.0), 0.5);
  for (double x : {-40.0, -5.0, -0.3, 0.3, 5.0, 40.0})
    EXPECT_NEAR(kernels::sigmoid_scalar(x), 1 / (1 + std::exp(-x)), 1e-15) << x;
  EXPECT_GT(kernels::sigmoid_scalar(-700.0), 0.0);
}

TEST(Silu, ScalarCases) {
  EXPECT_EQ(kernels::silu_scalar(0.0), 0.0);
  EXPECT_NEAR(kernels::silu_scalar(40.0), 40.0, 1e-12);
  EXPECT_NEAR(kernels::silu_scalar(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-9);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tensor<double> g({1, 4}, 1.0), b({1, 4}, 0.0);
  auto y = kernels::layer_norm(Tensor<double>({1, 4}, 3.5), g, b);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, PlusMinusOne) {
  Tensor<double> g({1, 2}, 1.0), b({1, 2}, 0.0);
  auto y = kernels::layer_norm(Tensor<double>::from_rows({{1, -1}}), g, b);
  // mean 0, variance 1: x / sqrt(1 + eps)
  const double expect = 1.0 / std::sqrt(1.0 + kernels::kLayerNormEps);
  EXPECT_NEAR(y(0, 0), expect, 1e-15);
  EXPECT_NEAR(y(0, 1), -expect, 1e-15);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Tensor<double> g({1, 3}, 0.0);
  auto b = Tensor<double>::from_rows({{1, 2, 3}});
  auto y = kernels::layer_norm(rnd(4, 3, 2), g, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y(i, j), b(0, j));
}

TEST(ConcatRows, Cases) {
  auto y = kernels::concat_rows(Tensor<double>::from_rows({{1}}), Tensor<double>::from_rows({{2}}));
  EXPECT_EQ(y, Tensor<double>::from_rows({{1}, {2}}));
  auto b = rnd(3, 2, 1);
  EXPECT_EQ(kernels::concat_rows(Tensor<double>::matrix(0, 2), b), b);
  EXPECT_EQ(kernels::concat_rows(rnd(3, 2, 1), rnd(5, 2, 2)).shape(), (Shape{8, 2}));
  EXPECT_THROW(kernels::concat_rows(rnd(3, 2, 1), rnd(3, 3, 1)), ShapeError);
}

TEST(Backward, RejectsNonScalarAndDetachedAndRepeat) {
  Tape<double> tape;
  Var<double> a = tape.leaf(rnd(2, 2, 1));
  EXPECT_THROW(tape.backward(a), AutodiffError);
  EXPECT_THROW(tape.backward(sum(Var<double>(rnd(2, 2, 1)))), AutodiffError);
  Var<double> loss = sum(a);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), AutodiffError);
  tape.reset();
  Var<double> b = tape.leaf(rnd(2, 2, 1));
  EXPECT_NO_THROW(tape.backward(sum(b)));
}

TEST(Backward, LinearCaseIsOuterProduct) {
  Tape<double> tape;
  auto x = rnd(3, 1, 7);
  Var<double> w = tape.leaf(rnd(2, 3, 8));
  tape.backward(sum(matmul(w, Var<double>(x))));
  const Tensor<double>& g = *tape.grad(w);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g(i, j), x(j, 0));
}

TEST(Backward, SoftmaxMatchesJacobian) {
  auto a = rnd(1, 4, 3);
  auto up = rnd(1, 4, 4);
  Tape<double> tape;
  Var<double> x = tape.leaf(a);
  tape.backward(sum(mul(softmax_rows(x, 1.0), Var<double>(up))));
  auto s = kernels::softmax_rows(a, 1.0);
  for (std::size_t j = 0; j < 4; ++j) {
    double expect = 0;
    for (std::size_t i = 0; i < 4; ++i) expect += up(0, i) * ((i == j ? s(0, i) : 0.0) - s(0, i) * s(0, j));
    EXPECT_NEAR((*tape.grad(x))(0, j), expect, 1e-14);
  }
}

TEST(Backward, TopologicalOrder) {
  Tape<double> tape;
  Var<double> a = tape.leaf(rnd(2, 2, 1));
  Var<double> b = silu(matmul(a, a));
  Var<double> c = add(b, a);
  for (std::size_t id = 0; id < tape.size(); ++id)
    for (std::size_t in : tape.inputs_of(id)) EXPECT_LT(in, id);
  EXPECT_EQ(c.id() + 1, tape.size());
}

TEST(Backward, ForwardUnaffectedByRecording) {
  auto a = rnd(3, 4, 1), w = rnd(4, 4, 2);
  Var<double> plain = layer_norm(silu(matmul(Var<double>(a), Var<double>(w))), Var<double>(Tensor<double>({1, 4}, 1.0)),
                                 Var<double>(Tensor<double>({1, 4}, 0.0)));
  Tape<double> tape;
  Var<double> ta = tape.leaf(a);
  Var<double> rec = layer_norm(silu(matmul(ta, Var<double>(w))), Var<double>(Tensor<double>({1, 4}, 1.0)),
                               Var<double>(Tensor<double>({1, 4}, 0.0)));
  EXPECT_EQ(plain.value(), rec.value());
}

// Finite-difference check of every differentiable op over 20 seeds.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const std::uint64_t s = static_cast<std::uint64_t>(GetParam()) * 31 + 1;
  using V = std::vector<Var<double>>;
  const double tol = 1e-4;
  auto check = [&](const char* name, std::vector<Tensor<double>> in, lime::test::ScalarFn f) {
    double err = grad_check(std::move(in), f);
    EXPECT_LT(err, tol) << name << " seed " << s;
  };
  check("matmul", {rnd(3, 4, s), rnd(4, 2, s + 1)}, [](const V& v) { return probe(matmul(v[0], v[1])); });
  check("matmul_nt", {rnd(3, 4, s), rnd(2, 4, s + 1)}, [](const V& v) { return probe(matmul_nt(v[0], v[1])); });
  check("add", {rnd(2, 3, s), rnd(2, 3, s + 1)}, [](const V& v) { return probe(add(v[0], v[1])); });
  check("sub", {rnd(2, 3, s), rnd(2, 3, s + 1)}, [](const V& v) { return probe(sub(v[0], v[1])); });
  check("mul", {rnd(2, 3, s), rnd(2, 3, s + 1)}, [](const V& v) { return probe(mul(v[0], v[1])); });
  check("scale", {rnd(2, 3, s)}, [](const V& v) { return probe(scale(v[0], 0.7)); });
  check("add_row", {rnd(3, 2, s), rnd(1, 2, s + 1)}, [](const V& v) { return probe(add_row(v[0], v[1])); });
  check("transpose", {rnd(3, 2, s)}, [](const V& v) { return probe(transpose(v[0])); });
  check("row_sum", {rnd(3, 4, s)}, [](const V& v) { return probe(row_sum(v[0])); });
  check("col_sum", {rnd(3, 4, s)}, [](const V& v) { return probe(col_sum(v[0])); });
  check("sigmoid", {rnd(2, 3, s)}, [](const V& v) { return probe(sigmoid(v[0])); });
  check("silu", {rnd(2, 3, s)}, [](const V& v) { return probe(silu(v[0])); });
  check("softmax", {rnd(2, 4, s)}, [](const V& v) { return probe(softmax_rows(v[0], 0.6)); });
  check("layer_norm", {rnd(3, 5, s), rnd(1, 5, s + 1), rnd(1, 5, s + 2)},
        [](const V& v) { return probe(layer_norm(v[0], v[1], v[2])); });
  check("concat_rows", {rnd(2, 3, s), rnd(1, 3, s + 1)}, [](const V& v) { return probe(concat_rows(v[0], v[1])); });
  check("concat_cols", {rnd(2, 3, s), rnd(2, 1, s + 1)}, [](const V& v) { return probe(concat_cols(v[0], v[1])); });
  check("slice_rows", {rnd(4, 3, s)}, [](const V& v) { return probe(slice_rows(v[0], 1, 3)); });
  check("slice_cols", {rnd(4, 3, s)}, [](const V& v) { return probe(slice_cols(v[0], 1, 3)); });
  check("gather_rows", {rnd(4, 3, s)}, [](const V& v) {
    const std::size_t ids[] = {2, 0, 2, 3};
    return probe(gather_rows(v[0], std::span<const std::size_t>(ids)));
  });
  check("broadcast_rows", {rnd(1, 3, s)}, [](const V& v) { return probe(broadcast_rows(v[0], 4)); });
  for (auto act : {kernels::Activation::ScaledSoftmax, kernels::Activation::Silu, kernels::Activation::Identity})
    for (auto mask : {AttentionMask::all_ones(), AttentionMask::causal(), AttentionMask::xor_mask(2)})
      check("attention_weights", {rnd(4, 4, s)},
            [&](const V& v) { return probe(attention_weights(v[0], act, 0.8, mask)); });
  const std::vector<double> labels = {1, 0, 0, 1, 1, 0};
  check("bce", {rnd(6, 1, s)}, [&](const V& v) { return bce_with_logits_mean(v[0], std::span<const double>(labels)); });
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 20));
