#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "kromhc/tensor.hpp"

namespace kromhc {

// Largest permutation basis we are willing to materialize (8! = 40320).
inline constexpr std::size_t kMaxPermutationSize = 8;

// All m! permutation matrices of size m, lexicographic in their permutation
// sequences, identity first. Row i of matrix k has its 1 in column perms[k][i].
struct PermutationBasis {
  std::size_t size = 0;
  std::vector<std::vector<std::size_t>> perms;
  std::vector<Tensor> matrices;
  // [m! x m*m]: row k is matrices[k] flattened. coeffs * stacked = vec(sum a_k P_k).
  Tensor stacked;

  std::size_t count() const { return perms.size(); }
};

PermutationBasis enumerate_permutations(std::size_t m);
// Process-wide cache of enumerate_permutations results.
std::shared_ptr<const PermutationBasis> shared_permutation_basis(std::size_t m);

// Validated factorization n = i_1 * ... * i_K with every i_k >= 2. n = 1 has
// the empty factorization (single-stream baseline only).
class FactorSpec {
 public:
  FactorSpec(std::size_t n, std::vector<std::size_t> factors);
  // Prime factorization in ascending order.
  static FactorSpec prime(std::size_t n);
  // n = 2^K as K factors of 2.
  static FactorSpec all_twos(std::size_t n);

  std::size_t n() const { return n_; }
  std::size_t order() const { return factors_.size(); }
  const std::vector<std::size_t>& factors() const { return factors_; }
  // Shared basis for factor k (bases are shared between equal factor sizes).
  const PermutationBasis& basis(std::size_t k) const;
  // sum_k i_k!
  std::uint64_t factorial_sum() const;

  // Row-major extents [i_K, ..., i_1, C]: a plain reshape of X [n x C] whose
  // stream index has i_K as its most significant digit, so that mode k of the
  // residual mixing is axis K-1-k (0-based k) and the mixing operator equals
  // U_K (x) ... (x) U_1.
  Shape tensor_shape(std::size_t width) const;
  std::size_t axis_of_factor(std::size_t k) const { return order() - 1 - k; }

 private:
  std::size_t n_;
  std::vector<std::size_t> factors_;
  std::vector<std::shared_ptr<const PermutationBasis>> bases_;
};

// Reshape X [n x C] into the order-(K+1) stream tensor, and back.
Tensor tensorize(const Tensor& x, const FactorSpec& spec);
Tensor matricize(const Tensor& t, std::size_t n);

// sum_k coeffs[k] P_k. coeffs is [1 x m!] (result [m x m]) or [B x m!]
// (result [B x m x m]); every row must lie on the simplex within 1e-12.
Tensor bvn_combine(const Tensor& coeffs, const PermutationBasis& basis);

// exp(logits) followed by `iters` alternating normalizations. Each iteration
// normalizes columns and then rows, so any residual imbalance shows up in the
// column sums. logits is [n x n] or [B x n x n].
Tensor sinkhorn_knopp(const Tensor& logits, std::size_t iters);

// factors = [U_1, ..., U_K]; returns U_K (x) ... (x) U_1. Factors are square,
// all rank 2 or all rank 3 with equal batch.
Tensor kron_chain(std::span<const Tensor> factors);

struct SpectralEstimate {
  double value = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

inline constexpr double kSpectralTol = 1e-10;
inline constexpr std::size_t kSpectralMaxIter = 10000;

// Largest singular value by power iteration on M^T M from a fixed pseudo-random
// start vector.
SpectralEstimate spectral_norm(const Tensor& m, double tol = kSpectralTol,
                               std::size_t max_iter = kSpectralMaxIter);

struct DSDiagnostics {
  double row_mae = 0.0;
  double col_mae = 0.0;
  double min_entry = 0.0;
  double spectral_norm = 0.0;
  // max |row or column sum - 1|
  double max_deviation = 0.0;
};

DSDiagnostics ds_diagnostics(const Tensor& m);

}  // namespace kromhc
