#pragma once

#include <cstddef>
#include <span>

#include "kromhc/tensor.hpp"

// Differentiable primitives. "Matrix-like" arguments are rank 2 [m, n] or
// rank 3 [batch, m, n]; rank-3 forms act independently on every batch slice.
namespace kromhc {

inline constexpr double kRmsNormEps = 1e-6;

// Rank 2 x rank 2, or batched rank 3 x rank 3 with equal batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x + b where b's shape equals the trailing axes of x (broadcast over the rest).
Tensor add_bias(const Tensor& x, const Tensor& b);
Tensor scale(const Tensor& x, double s);
// x * s for a one-element tensor s; differentiable in both.
Tensor scale(const Tensor& x, const Tensor& s);
Tensor add_scalar(const Tensor& x, double c);

enum class UnaryOp { kSigmoid, kTanh, kExp, kLog, kRelu, kSquare };
Tensor unary(const Tensor& x, UnaryOp op);
inline Tensor sigmoid(const Tensor& x) { return unary(x, UnaryOp::kSigmoid); }
inline Tensor tanh(const Tensor& x) { return unary(x, UnaryOp::kTanh); }
inline Tensor exp(const Tensor& x) { return unary(x, UnaryOp::kExp); }
inline Tensor log(const Tensor& x) { return unary(x, UnaryOp::kLog); }
inline Tensor relu(const Tensor& x) { return unary(x, UnaryOp::kRelu); }
inline Tensor square(const Tensor& x) { return unary(x, UnaryOp::kSquare); }

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Softmax over the last axis with max subtraction.
Tensor softmax_rows(const Tensor& x);

// x / sqrt(mean(x^2) + eps) over the last axis, times a gain of the last
// axis' extent.
Tensor rmsnorm(const Tensor& x, const Tensor& gain);
Tensor rmsnorm(const Tensor& x);

// Block Kronecker product; both rank 2, or both rank 3 with equal batch.
Tensor kron(const Tensor& a, const Tensor& b);

// Contracts axis `mode` (0-based) of x, of extent r, with the columns of
// u [j x r]; the result has extent j on that axis.
Tensor mode_n_product(const Tensor& x, const Tensor& u, std::size_t mode);

// Divides each row (resp. column) of a matrix-like tensor by its sum.
Tensor normalize_rows(const Tensor& x);
Tensor normalize_cols(const Tensor& x);

// Mean next-token cross-entropy of logits [rows x vocab] against targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Row gather from table [vocab x C].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Causal multi-head scaled dot-product attention. q, k, v are
// [batch * seq, C] with the sequence axis contiguous inside each batch.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t heads);

// [rows x C] -> [rows x n x C] by replication, and its adjoint-like collapse
// [rows x n x C] -> [rows x C] by averaging.
Tensor expand_streams(const Tensor& x, std::size_t n);
Tensor mean_streams(const Tensor& x);

}  // namespace kromhc
