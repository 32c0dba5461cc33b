#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kromhc/error.hpp"
#include "kromhc/gradcheck.hpp"
#include "kromhc/manifold.hpp"
#include "kromhc/ops.hpp"
#include "test_util.hpp"

namespace kromhc {
namespace {

using testing::max_abs_diff;
using testing::naive_kron;
using testing::naive_matmul;
using testing::random_param;
using testing::random_tensor;

void expect_matrix(const Tensor& t, std::initializer_list<std::initializer_list<double>> rows,
                   double tol = 0.0) {
  const Tensor expected = Tensor::matrix(rows);
  ASSERT_EQ(t.shape(), expected.shape());
  EXPECT_LE(max_abs_diff(t, expected), tol);
}

TEST(TensorTest, ConstructionChecksExtents) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_THROW(Tensor({2, 0}, 0.0), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(TensorTest, ReshapeKeepsLength) {
  Tensor t({2, 6}, 0.0);
  EXPECT_EQ(reshape(t, {3, 4}).size(), 12u);
  EXPECT_THROW(reshape(t, {5, 2}), DimensionError);
}

TEST(MatmulTest, IdentityAndPermutation) {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  expect_matrix(matmul(Tensor::eye(2), m), {{1, 2}, {3, 4}});
  expect_matrix(matmul(Tensor::matrix({{0, 1}, {1, 0}}), m), {{3, 4}, {1, 2}});
}

TEST(MatmulTest, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  EXPECT_LE(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-14);
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}, 0.0), Tensor({2, 3}, 0.0));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(MatmulTest, BatchedMatchesPerSlice) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({3, 2, 4}, rng);
  const Tensor b = random_tensor({3, 4, 5}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor as({2, 4}, 0.0), bs({4, 5}, 0.0);
    std::copy_n(a.data().begin() + s * 8, 8, as.mutable_data().begin());
    std::copy_n(b.data().begin() + s * 20, 20, bs.mutable_data().begin());
    const Tensor ref = naive_matmul(as, bs);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(c[s * 10 + i], ref[i], 1e-14);
  }
}

TEST(KronTest, WorkedExample) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{0, 5}, {6, 7}});
  expect_matrix(kron(a, b), {{0, 5, 0, 10}, {6, 7, 12, 14}, {0, 15, 0, 20}, {18, 21, 24, 28}});
}

TEST(KronTest, IdentityAndSwap) {
  expect_matrix(kron(Tensor::eye(2), Tensor::eye(2)),
                {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  const Tensor p = Tensor::matrix({{0, 1}, {1, 0}});
  expect_matrix(kron(p, p), {{0, 0, 0, 1}, {0, 0, 1, 0}, {0, 1, 0, 0}, {1, 0, 0, 0}});
}

TEST(KronTest, RejectsNonMatrices) {
  EXPECT_THROW(kron(Tensor({4}, 1.0), Tensor::eye(2)), DimensionError);
}

TEST(KronTest, MixedProductIdentity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({2, 3}, rng), c = random_tensor({3, 2}, rng);
    const Tensor b = random_tensor({3, 2}, rng), d = random_tensor({2, 4}, rng);
    const Tensor lhs = matmul(kron(a, b), kron(c, d));
    const Tensor rhs = kron(matmul(a, c), matmul(b, d));
    EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12);
    EXPECT_LE(max_abs_diff(kron(a, b), naive_kron(a, b)), 0.0);
  }
}

TEST(ModeProductTest, IdentityFactorIsNoOp) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({2, 3, 4}, rng);
  for (std::size_t mode = 0; mode < 3; ++mode) {
    EXPECT_EQ(max_abs_diff(mode_n_product(x, Tensor::eye(x.extent(mode)), mode), x), 0.0);
  }
}

TEST(ModeProductTest, PermutationSwapsSlices) {
  const Tensor x({2, 2, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor y = mode_n_product(x, Tensor::matrix({{0, 1}, {1, 0}}), 0);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            (std::vector<double>{5, 6, 7, 8, 1, 2, 3, 4}));
}

TEST(ModeProductTest, ElementwiseDefinition) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({3, 4, 2}, rng);
  const Tensor u = random_tensor({5, 4}, rng);
  const Tensor y = mode_n_product(x, u, 1);
  ASSERT_EQ(y.shape(), (Shape{3, 5, 2}));
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 4; ++r) s += x[(a * 4 + r) * 2 + c] * u(j, r);
        EXPECT_NEAR(y[(a * 5 + j) * 2 + c], s, 1e-14);
      }
}

TEST(ModeProductTest, ErrorsOnBadModeOrExtent) {
  const Tensor x({2, 3}, 1.0);
  EXPECT_THROW(mode_n_product(x, Tensor::eye(2), 2), DimensionError);
  EXPECT_THROW(mode_n_product(x, Tensor::eye(2), 1), DimensionError);
}

TEST(ModeProductTest, ChainEqualsKroneckerRoute) {
  std::mt19937_64 rng(6);
  const FactorSpec spec(4, {2, 2});
  const Tensor x = random_tensor({4, 3}, rng);
  const Tensor u1 = random_tensor({2, 2}, rng), u2 = random_tensor({2, 2}, rng);
  Tensor t = tensorize(x, spec);
  t = mode_n_product(t, u1, spec.axis_of_factor(0));
  t = mode_n_product(t, u2, spec.axis_of_factor(1));
  t = mode_n_product(t, Tensor::eye(3), 2);
  const Tensor via_modes = matricize(t, 4);
  const Tensor via_kron = naive_matmul(naive_kron(u2, u1), x);
  EXPECT_LE(max_abs_diff(via_modes, via_kron), 1e-12);
}

TEST(SoftmaxTest, Examples) {
  const Tensor s = softmax_rows(Tensor::matrix({{0, 0}, {0, -8}}));
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
  const double a = std::exp(-8.0) / (1.0 + std::exp(-8.0));
  EXPECT_NEAR(s(1, 0), 0.999664649869534, 1e-15);
  EXPECT_NEAR(s(1, 1), a, 1e-15);
  EXPECT_NEAR(a, 3.3535013046647811e-4, 1e-18);
}

TEST(SoftmaxTest, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({3, 5}, rng, 3.0);
  Tensor shifted = add_scalar(x, 17.25);
  const Tensor a = softmax_rows(x), b = softmax_rows(shifted);
  EXPECT_LE(max_abs_diff(a, b), 1e-15);
  for (std::size_t i = 0; i < 3; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_GT(a(i, j), 0.0);
      EXPECT_LT(a(i, j), 1.0);
      total += a(i, j);
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
}

TEST(SoftmaxTest, NonFiniteInputThrows) {
  EXPECT_THROW(softmax_rows(Tensor::matrix({{0, std::nan("")}})), NumericError);
}

TEST(RmsNormTest, Examples) {
  const Tensor ones({1, 6}, 1.0);
  EXPECT_LE(max_abs_diff(rmsnorm(ones, ones), ones), 1e-6);
  const Tensor x = Tensor::matrix({{3, -3}});
  const Tensor y = rmsnorm(x, Tensor({1, 2}, 1.0));
  EXPECT_NEAR(y(0, 0), 1.0, 1e-6);
  EXPECT_NEAR(y(0, 1), -1.0, 1e-6);
}

TEST(RmsNormTest, ScaleInvariant) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({1, 12}, rng);
  const Tensor g = random_tensor({1, 12}, rng);
  EXPECT_LE(max_abs_diff(rmsnorm(x, g), rmsnorm(scale(x, 10.0), g)), 1e-5);
}

TEST(RmsNormTest, GainMustMatch) {
  EXPECT_THROW(rmsnorm(Tensor({1, 4}, 1.0), Tensor({1, 3}, 1.0)), DimensionError);
}

TEST(UnaryTest, Examples) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(tanh(Tensor::scalar(0.0)).item(), 0.0);
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({50}, rng, 4.0);
  const Tensor s = add(sigmoid(x), sigmoid(scale(x, -1.0)));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_THROW(log(Tensor::matrix({{1.0, 0.0}})), NumericError);
  EXPECT_THROW(log(Tensor::matrix({{-2.0}})), NumericError);
}

TEST(BackwardTest, SumGivesOnes) {
  Tape tape;
  Tensor x = Tensor::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  tape.backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, MatmulGradient) {
  Tape tape;
  Tensor a = Tensor::parameter({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::parameter({2, 2}, {5, 6, 7, 8});
  tape.backward(sum(matmul(a, b)));
  // d/dA sum(AB) = 1 B^T: every row is the row sums of B.
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{11, 15, 11, 15}));
  // d/dB sum(AB) = A^T 1: every column is the column sums of A.
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{4, 4, 6, 6}));
}

TEST(BackwardTest, GradientShapesMatchParameters) {
  Tape tape;
  std::mt19937_64 rng(10);
  Tensor a = random_param({3, 4}, rng), b = random_param({4, 2}, rng);
  tape.backward(sum(tanh(matmul(a, b))));
  EXPECT_EQ(a.grad().size(), a.size());
  EXPECT_EQ(b.grad().size(), b.size());
}

TEST(BackwardTest, Errors) {
  {
    Tape tape;
    Tensor x = Tensor::parameter({2}, {1, 2});
    EXPECT_THROW(tape.backward(square(x)), DimensionError);
  }
  Tensor loss;
  {
    Tape first;
    Tensor x = Tensor::parameter({2}, {1, 2});
    loss = sum(x);
  }
  Tape second;
  EXPECT_THROW(second.backward(loss), UsageError);
  EXPECT_THROW(second.backward(Tensor::scalar(1.0)), UsageError);
}

TEST(BackwardTest, SharedSubexpressionAccumulates) {
  Tape tape;
  Tensor x = Tensor::parameter({1}, {3.0});
  const Tensor y = mul(x, x);
  tape.backward(sum(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(BackwardTest, Deterministic) {
  std::mt19937_64 rng(11);
  Tensor a = random_param({3, 3}, rng);
  auto run = [&] {
    a.zero_grad();
    Tape tape;
    tape.backward(sum(softmax_rows(matmul(a, a))));
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheckTest, QuadraticIsNearlyExact) {
  std::mt19937_64 rng(12);
  Tensor x = random_param({10}, rng);
  const auto r = grad_check([&] { return sum(square(x)); }, {x});
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coordinates, 10u);
}

TEST(GradCheckTest, DetectsWrongGradient) {
  Tensor x = Tensor::parameter({3}, {0.5, -1.0, 2.0});
  // The detached square is invisible to the tape.
  const auto r = grad_check([&] { return sum(add(x, mul(x.detach(), x.detach()))); }, {x});
  EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(GradCheckTest, NonFiniteEvaluationThrows) {
  Tensor x = Tensor::parameter({1}, {1e-7});
  EXPECT_THROW(grad_check([&] { return sum(log(x)); }, {x}, 1e-5), NumericError);
}

// Every differentiable primitive against central differences.
class OpGradTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{13};
  void check(const std::function<Tensor()>& loss, std::vector<Tensor> params, double tol = 1e-5) {
    const auto r = grad_check(loss, std::move(params));
    EXPECT_LT(r.max_rel_error, tol) << "worst param " << r.worst_param << " index " << r.worst_index;
  }
};

TEST_F(OpGradTest, Matmul) {
  Tensor a = random_param({3, 4}, rng), b = random_param({4, 2}, rng);
  const Tensor w = random_tensor({3, 2}, rng);
  check([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
}

TEST_F(OpGradTest, BatchedMatmulAndTranspose) {
  Tensor a = random_param({2, 3, 4}, rng), b = random_param({2, 3, 4}, rng);
  const Tensor w = random_tensor({2, 3, 3}, rng);
  check([&] { return sum(mul(matmul(a, transpose(b)), w)); }, {a, b});
}

TEST_F(OpGradTest, Elementwise) {
  Tensor a = random_param({2, 3}, rng), b = random_param({2, 3}, rng), bias = random_param({3}, rng);
  Tensor s = random_param({1}, rng);
  const Tensor w = random_tensor({2, 3}, rng);
  check([&] { return sum(mul(add_bias(scale(sub(mul(a, b), add(a, b)), s), bias), w)); }, {a, b, bias, s});
}

TEST_F(OpGradTest, Unary) {
  Tensor x = random_param({12}, rng);
  Tensor pos = Tensor::parameter({12}, std::vector<double>(12, 0.0));
  for (std::size_t i = 0; i < 12; ++i) pos.mutable_data()[i] = 0.5 + 0.1 * static_cast<double>(i);
  const Tensor w = random_tensor({12}, rng);
  check([&] { return sum(mul(add(add(sigmoid(x), tanh(x)), add(exp(x), square(x))), w)); }, {x});
  check([&] { return sum(mul(log(pos), w)); }, {pos});
  Tensor away = Tensor::parameter({4}, {0.7, -0.4, 1.3, -2.0});
  check([&] { return sum(mul(relu(away), Tensor({4}, std::vector<double>{1, 2, 3, 4}))); }, {away});
}

TEST_F(OpGradTest, SoftmaxMeanReshape) {
  Tensor x = random_param({3, 4}, rng);
  const Tensor w = random_tensor({4, 3}, rng);
  check([&] { return mean(mul(reshape(softmax_rows(x), {4, 3}), w)); }, {x});
}

TEST_F(OpGradTest, RmsNorm) {
  Tensor x = random_param({2, 6}, rng), g = random_param({1, 6}, rng);
  const Tensor w = random_tensor({2, 6}, rng);
  check([&] { return sum(mul(rmsnorm(x, g), w)); }, {x, g});
  check([&] { return sum(mul(rmsnorm(x), w)); }, {x});
}

TEST_F(OpGradTest, KronAndModeProduct) {
  Tensor a = random_param({2, 2}, rng), b = random_param({3, 3}, rng);
  const Tensor w = random_tensor({6, 6}, rng);
  check([&] { return sum(mul(kron(a, b), w)); }, {a, b});
  Tensor x = random_param({2, 3, 2}, rng), u = random_param({4, 3}, rng);
  const Tensor w2 = random_tensor({2, 4, 2}, rng);
  check([&] { return sum(mul(mode_n_product(x, u, 1), w2)); }, {x, u});
}

TEST_F(OpGradTest, Normalizations) {
  Tensor x = Tensor::parameter({3, 3}, std::vector<double>(9, 0.0));
  std::uniform_real_distribution<double> unit(0.5, 2.0);
  for (auto& v : x.mutable_data()) v = unit(rng);
  const Tensor w = random_tensor({3, 3}, rng);
  check([&] { return sum(mul(normalize_cols(normalize_rows(x)), w)); }, {x});
}

TEST_F(OpGradTest, CrossEntropyAndEmbedding) {
  Tensor table = random_param({5, 3}, rng), head = random_param({3, 5}, rng);
  const std::vector<int> ids = {0, 3, 3, 1}, targets = {2, 4, 0, 3};
  check([&] { return cross_entropy(matmul(embedding(table, ids), head), targets); }, {table, head});
}

TEST_F(OpGradTest, CausalAttention) {
  Tensor q = random_param({6, 4}, rng), k = random_param({6, 4}, rng), v = random_param({6, 4}, rng);
  const Tensor w = random_tensor({6, 4}, rng);
  check([&] { return sum(mul(causal_attention(q, k, v, 2, 3, 2), w)); }, {q, k, v});
}

TEST_F(OpGradTest, StreamExpandAndMean) {
  Tensor x = random_param({2, 3}, rng);
  const Tensor w = random_tensor({2, 4, 3}, rng);
  const Tensor w2 = random_tensor({2, 3}, rng);
  check([&] { return add(sum(mul(expand_streams(x, 4), w)), sum(mul(mean_streams(expand_streams(x, 4)), w2))); },
        {x});
}

TEST(AttentionTest, FirstPositionCopiesValue) {
  std::mt19937_64 rng(14);
  const Tensor q = random_tensor({4, 2}, rng), k = random_tensor({4, 2}, rng), v = random_tensor({4, 2}, rng);
  const Tensor out = causal_attention(q, k, v, 2, 2, 1);
  // Row 0 of each sequence can only attend to itself.
  EXPECT_NEAR(out(0, 0), v(0, 0), 1e-15);
  EXPECT_NEAR(out(2, 1), v(2, 1), 1e-15);
}

TEST(CrossEntropyTest, UniformLogitsGiveLogV) {
  const Tensor logits({3, 7}, 0.25);
  const std::vector<int> targets = {0, 6, 3};
  EXPECT_NEAR(cross_entropy(logits, targets).item(), std::log(7.0), 1e-12);
  const std::vector<int> bad = {0, 7, 1};
  EXPECT_THROW(cross_entropy(logits, bad), DataError);
}

}  // namespace
}  // namespace kromhc
