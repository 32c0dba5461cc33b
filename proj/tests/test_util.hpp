#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "kromhc/tensor.hpp"

namespace kromhc::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t(std::move(shape), 0.0);
  for (auto& v : t.mutable_data()) v = normal(rng);
  return t;
}

inline Tensor random_param(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor t = random_tensor(std::move(shape), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

// Random doubly stochastic matrix as a convex combination of random
// permutation matrices (built without the library's basis enumeration).
inline Tensor random_ds(std::size_t m, std::mt19937_64& rng, std::size_t terms = 5) {
  std::uniform_real_distribution<double> unit(0.05, 1.0);
  std::vector<double> w(terms);
  double total = 0.0;
  for (auto& v : w) total += (v = unit(rng));
  Tensor out({m, m}, 0.0);
  auto d = out.mutable_data();
  for (std::size_t t = 0; t < terms; ++t) {
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < m; ++i) d[i * m + perm[i]] += w[t] / total;
  }
  return out;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.extent(0), k = a.extent(1), p = b.extent(1);
  Tensor out({m, p}, 0.0);
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < k; ++r) s += a(i, r) * b(r, j);
      d[i * p + j] = s;
    }
  return out;
}

// (A (x) B)[i*p + r, j*q + s] = A[i,j] B[r,s]
inline Tensor naive_kron(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.extent(0), n = a.extent(1), p = b.extent(0), q = b.extent(1);
  Tensor out({m * p, n * q}, 0.0);
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t s = 0; s < q; ++s) d[(i * p + r) * (n * q) + j * q + s] = a(i, j) * b(r, s);
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline double max_sum_deviation(const Tensor& m) {
  const std::size_t n = m.extent(0);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0, c = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r += m(i, j);
      c += m(j, i);
    }
    worst = std::max({worst, std::abs(r - 1.0), std::abs(c - 1.0)});
  }
  return worst;
}

inline double min_entry(const Tensor& m) {
  double lo = m[0];
  for (double v : m.data()) lo = std::min(lo, v);
  return lo;
}

}  // namespace kromhc::testing
