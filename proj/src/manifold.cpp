#include "kromhc/manifold.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <string>

#include <fmt/format.h>

#include "kromhc/error.hpp"
#include "kromhc/ops.hpp"

namespace kromhc {

PermutationBasis enumerate_permutations(std::size_t m) {
  if (m < 1) throw DimensionError("enumerate_permutations: size must be positive");
  if (m > kMaxPermutationSize) {
    double count = 1.0;
    for (std::size_t i = 2; i <= m; ++i) count *= static_cast<double>(i);
    throw CapacityError("enumerate_permutations: size " + std::to_string(m) + " would need " +
                        std::to_string(m) + "! = " + fmt::format("{:.0f}", count) +
                        " permutation matrices; the basis is capped at " +
                        std::to_string(kMaxPermutationSize) +
                        " because Birkhoff-von-Neumann parameter counts grow factorially with n. "
                        "Factor n into small factors instead.");
  }
  PermutationBasis basis;
  basis.size = m;
  std::vector<std::size_t> p(m);
  std::iota(p.begin(), p.end(), 0);
  do {
    basis.perms.push_back(p);
  } while (std::next_permutation(p.begin(), p.end()));

  const std::size_t count = basis.perms.size();
  std::vector<double> stacked(count * m * m, 0.0);
  basis.matrices.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Tensor pm({m, m}, 0.0);
    auto d = pm.mutable_data();
    for (std::size_t i = 0; i < m; ++i) {
      d[i * m + basis.perms[k][i]] = 1.0;
      stacked[k * m * m + i * m + basis.perms[k][i]] = 1.0;
    }
    basis.matrices.push_back(std::move(pm));
  }
  basis.stacked = Tensor({count, m * m}, std::move(stacked));
  return basis;
}

std::shared_ptr<const PermutationBasis> shared_permutation_basis(std::size_t m) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const PermutationBasis>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(m);
  if (it != cache.end()) return it->second;
  auto basis = std::make_shared<const PermutationBasis>(enumerate_permutations(m));
  cache.emplace(m, basis);
  return basis;
}

namespace {

std::uint64_t factorial(std::size_t m) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= m; ++i) f *= i;
  return f;
}

}  // namespace

FactorSpec::FactorSpec(std::size_t n, std::vector<std::size_t> factors)
    : n_(n), factors_(std::move(factors)) {
  if (n == 0) throw DimensionError("factorization: n must be positive");
  std::size_t product = 1;
  for (auto f : factors_) {
    if (f < 2) {
      throw DimensionError("factorization: every factor must be >= 2, got " + std::to_string(f));
    }
    product *= f;
  }
  if (product != n) {
    std::string list;
    for (std::size_t i = 0; i < factors_.size(); ++i) list += (i ? "," : "") + std::to_string(factors_[i]);
    throw DimensionError("factorization: product of [" + list + "] is " + std::to_string(product) +
                         ", expected n = " + std::to_string(n));
  }
  for (auto f : factors_) bases_.push_back(shared_permutation_basis(f));
}

FactorSpec FactorSpec::prime(std::size_t n) {
  std::vector<std::size_t> factors;
  std::size_t rest = n;
  for (std::size_t p = 2; p * p <= rest; ++p) {
    while (rest % p == 0) {
      factors.push_back(p);
      rest /= p;
    }
  }
  if (rest > 1) factors.push_back(rest);
  return FactorSpec(n, std::move(factors));
}

FactorSpec FactorSpec::all_twos(std::size_t n) {
  std::vector<std::size_t> factors;
  std::size_t rest = n;
  while (rest > 1 && rest % 2 == 0) {
    factors.push_back(2);
    rest /= 2;
  }
  if (rest != 1) throw DimensionError("factorization: n = " + std::to_string(n) + " is not a power of two");
  return FactorSpec(n, std::move(factors));
}

const PermutationBasis& FactorSpec::basis(std::size_t k) const { return *bases_.at(k); }

std::uint64_t FactorSpec::factorial_sum() const {
  std::uint64_t s = 0;
  for (auto f : factors_) s += factorial(f);
  return s;
}

Shape FactorSpec::tensor_shape(std::size_t width) const {
  Shape s(factors_.rbegin(), factors_.rend());
  s.push_back(width);
  return s;
}

Tensor tensorize(const Tensor& x, const FactorSpec& spec) {
  if (x.rank() != 2 || x.extent(0) != spec.n()) {
    throw DimensionError("tensorize: expected [" + std::to_string(spec.n()) + " x C], got " +
                         shape_string(x.shape()));
  }
  return reshape(x, spec.tensor_shape(x.extent(1)));
}

Tensor matricize(const Tensor& t, std::size_t n) {
  const std::size_t width = t.shape().back();
  if (t.size() != n * width) {
    throw DimensionError("matricize: " + shape_string(t.shape()) + " is not " + std::to_string(n) +
                         " streams");
  }
  return reshape(t, {n, width});
}

Tensor bvn_combine(const Tensor& coeffs, const PermutationBasis& basis) {
  if (coeffs.rank() != 2 || coeffs.extent(1) != basis.count()) {
    throw DimensionError("bvn_combine: coefficients " + shape_string(coeffs.shape()) +
                         " do not match a basis of " + std::to_string(basis.count()) + " permutations");
  }
  const std::size_t rows = coeffs.extent(0);
  const std::size_t count = basis.count();
  const auto c = coeffs.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const double a = c[r * count + k];
      if (!(a >= 0.0)) {
        throw ConstraintError("bvn_combine: coefficient " + std::to_string(k) + " is negative (" +
                              std::to_string(a) + ")");
      }
      total += a;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ConstraintError("bvn_combine: coefficients sum to " + std::to_string(total) +
                            ", not 1");
    }
  }
  const std::size_t m = basis.size;
  Tensor flat = matmul(coeffs, basis.stacked);
  if (rows == 1) return reshape(flat, {m, m});
  return reshape(flat, {rows, m, m});
}

Tensor sinkhorn_knopp(const Tensor& logits, std::size_t iters) {
  if (iters < 1) throw UsageError("sinkhorn_knopp: need at least one iteration");
  if (logits.rank() < 2 || logits.shape()[logits.rank() - 1] != logits.shape()[logits.rank() - 2]) {
    throw DimensionError("sinkhorn_knopp: expected square matrices, got " +
                         shape_string(logits.shape()));
  }
  for (double v : logits.data()) {
    if (!std::isfinite(v)) throw NumericError("sinkhorn_knopp: non-finite logit");
  }
  Tensor m = exp(logits);
  for (std::size_t it = 0; it < iters; ++it) {
    m = normalize_cols(m);
    m = normalize_rows(m);
    for (double v : m.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("sinkhorn_knopp: non-finite value at iteration " + std::to_string(it + 1));
      }
    }
  }
  return m;
}

Tensor kron_chain(std::span<const Tensor> factors) {
  if (factors.empty()) throw DimensionError("kron_chain: no factors");
  for (const auto& f : factors) {
    const auto& s = f.shape();
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
      throw DimensionError("kron_chain: factor " + shape_string(s) + " is not square");
    }
  }
  Tensor acc = factors.back();
  for (std::size_t k = factors.size() - 1; k-- > 0;) acc = kron(acc, factors[k]);
  return acc;
}

SpectralEstimate spectral_norm(const Tensor& m, double tol, std::size_t max_iter) {
  if (m.rank() != 2 || m.extent(0) != m.extent(1)) {
    throw DimensionError("spectral_norm: expected a square matrix, got " + shape_string(m.shape()));
  }
  const std::size_t n = m.extent(0);
  const auto a = m.data();
  std::mt19937_64 rng(0x5eed5eedULL);
  std::normal_distribution<double> normal;
  std::vector<double> v(n), w(n), z(n);
  for (auto& x : v) x = std::abs(normal(rng)) + 0.1;
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0) for (auto& e : x) e /= s;
    return s;
  };
  normalize(v);

  SpectralEstimate est;
  double prev = 0.0;
  for (std::size_t it = 1; it <= max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * v[j];
      w[i] = s;
    }
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += a[i * n + j] * w[i];
      z[j] = s;
    }
    // Rayleigh quotient v^T M^T M v with |v| = 1.
    double lambda = 0.0;
    for (std::size_t j = 0; j < n; ++j) lambda += v[j] * z[j];
    est.value = std::sqrt(std::max(lambda, 0.0));
    est.iterations = it;
    const double norm = normalize(z);
    if (norm == 0.0) {
      est.converged = true;
      break;
    }
    v.swap(z);
    if (it > 1 && std::abs(est.value - prev) <= tol * std::max(est.value, 1e-300)) {
      est.converged = true;
      break;
    }
    prev = est.value;
  }
  return est;
}

DSDiagnostics ds_diagnostics(const Tensor& m) {
  if (m.rank() != 2 || m.extent(0) != m.extent(1)) {
    throw DimensionError("ds_diagnostics: expected a square matrix, got " + shape_string(m.shape()));
  }
  const std::size_t n = m.extent(0);
  const auto a = m.data();
  DSDiagnostics d;
  d.min_entry = a[0];
  std::vector<double> cols(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += a[i * n + j];
      cols[j] += a[i * n + j];
      d.min_entry = std::min(d.min_entry, a[i * n + j]);
    }
    d.row_mae += std::abs(row - 1.0);
    d.max_deviation = std::max(d.max_deviation, std::abs(row - 1.0));
  }
  for (double c : cols) {
    d.col_mae += std::abs(c - 1.0);
    d.max_deviation = std::max(d.max_deviation, std::abs(c - 1.0));
  }
  d.row_mae /= static_cast<double>(n);
  d.col_mae /= static_cast<double>(n);
  d.spectral_norm = spectral_norm(m).value;
  return d;
}

}  // namespace kromhc
