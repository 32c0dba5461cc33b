#include "kromhc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "kromhc/error.hpp"

namespace kromhc {

namespace {

using detail::grad_sink;
using detail::needs_recording;
using detail::record;

struct MatDims {
  std::size_t batch;
  std::size_t rows;
  std::size_t cols;
};

MatDims matrix_dims(const Tensor& t, const char* op) {
  const auto& s = t.shape();
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected a rank-2 or rank-3 tensor, got " +
                       shape_string(s));
}

Shape matrix_shape(const Tensor& like, std::size_t rows, std::size_t cols) {
  if (like.rank() == 2) return {rows, cols};
  return {like.extent(0), rows, cols};
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_finite(std::span<const double> xs, const char* op) {
  for (double v : xs) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// c[m x p] (+)= a[m x k] * b[k x p]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      if (ail == 0.0) continue;
      const double* bl = b + l * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += ail * bl[j];
    }
  }
}

// c[m x k] += g[m x p] * b[k x p]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * p;
    for (std::size_t l = 0; l < k; ++l) {
      const double* bl = b + l * p;
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += gi[j] * bl[j];
      c[i * k + l] += acc;
    }
  }
}

// c[k x p] += a[m x k]^T * g[m x p]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * p;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      if (ail == 0.0) continue;
      double* cl = c + l * p;
      for (std::size_t j = 0; j < p; ++j) cl[j] += ail * gi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto da = matrix_dims(a, "matmul");
  const auto db = matrix_dims(b, "matmul");
  if (a.rank() != b.rank() || da.batch != db.batch || da.cols != db.rows) {
    throw DimensionError("matmul: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t m = da.rows, k = da.cols, p = db.cols;
  std::vector<double> out(da.batch * m * p, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t s = 0; s < da.batch; ++s) {
    gemm_nn(pa + s * m * k, pb + s * k * p, out.data() + s * m * p, m, k, p);
  }
  Tensor result(matrix_shape(a, m, p), std::move(out));
  if (needs_recording({&a, &b})) {
    record(result, [a, b, da, m, k, p](std::span<const double> g) {
      if (auto ga = grad_sink(a); !ga.empty()) {
        for (std::size_t s = 0; s < da.batch; ++s) {
          gemm_nt(g.data() + s * m * p, b.data().data() + s * k * p, ga.data() + s * m * k, m, k,
                  p);
        }
      }
      if (auto gb = grad_sink(b); !gb.empty()) {
        for (std::size_t s = 0; s < da.batch; ++s) {
          gemm_tn(a.data().data() + s * m * k, g.data() + s * m * p, gb.data() + s * k * p, m, k,
                  p);
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  const auto d = matrix_dims(a, "transpose");
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t s = 0; s < d.batch; ++s) {
    const std::size_t off = s * d.rows * d.cols;
    for (std::size_t i = 0; i < d.rows; ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) out[off + j * d.rows + i] = x[off + i * d.cols + j];
    }
  }
  Tensor result(matrix_shape(a, d.cols, d.rows), std::move(out));
  if (needs_recording({&a})) {
    record(result, [a, d](std::span<const double> g) {
      auto ga = grad_sink(a);
      if (ga.empty()) return;
      for (std::size_t s = 0; s < d.batch; ++s) {
        const std::size_t off = s * d.rows * d.cols;
        for (std::size_t i = 0; i < d.rows; ++i) {
          for (std::size_t j = 0; j < d.cols; ++j) ga[off + i * d.cols + j] += g[off + j * d.rows + i];
        }
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
  }
  Tensor result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (needs_recording({&a})) {
    record(result, [a](std::span<const double> g) {
      auto ga = grad_sink(a);
      if (ga.empty()) return;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

namespace {

enum class Binary { kAdd, kSub, kMul };

Tensor elementwise(const Tensor& a, const Tensor& b, Binary op, const char* name) {
  require_same_shape(a, b, name);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (op) {
      case Binary::kAdd: out[i] = x[i] + y[i]; break;
      case Binary::kSub: out[i] = x[i] - y[i]; break;
      case Binary::kMul: out[i] = x[i] * y[i]; break;
    }
  }
  Tensor result(a.shape(), std::move(out));
  if (needs_recording({&a, &b})) {
    record(result, [a, b, op](std::span<const double> g) {
      if (auto ga = grad_sink(a); !ga.empty()) {
        const auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += op == Binary::kMul ? g[i] * y[i] : g[i];
      }
      if (auto gb = grad_sink(b); !gb.empty()) {
        const auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += op == Binary::kMul ? g[i] * x[i] : (op == Binary::kSub ? -g[i] : g[i]);
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::kMul, "mul"); }

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  // A [1 x k] bias also broadcasts over the rows of [r x k].
  Shape trailing = bs;
  while (trailing.size() > 1 && trailing.front() == 1) trailing.erase(trailing.begin());
  bool ok = trailing.size() <= xs.size() &&
            std::equal(trailing.rbegin(), trailing.rend(), xs.rbegin());
  if (!ok) {
    throw DimensionError("add_bias: bias " + shape_string(bs) + " does not match trailing axes of " +
                         shape_string(xs));
  }
  const std::size_t period = b.size();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % period];
  Tensor result(xs, std::move(out));
  if (needs_recording({&x, &b})) {
    record(result, [x, b, period](std::span<const double> g) {
      if (auto gx = grad_sink(x); !gx.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (auto gb = grad_sink(b); !gb.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += g[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= s;
  Tensor result(x.shape(), std::move(out));
  if (needs_recording({&x})) {
    record(result, [x, s](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
    });
  }
  return result;
}

Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) {
    throw DimensionError("scale: factor must have one element, got " + shape_string(s.shape()));
  }
  const double sv = s.item();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= sv;
  Tensor result(x.shape(), std::move(out));
  if (needs_recording({&x, &s})) {
    record(result, [x, s](std::span<const double> g) {
      const double sv = s.item();
      if (auto gx = grad_sink(x); !gx.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
      }
      if (auto gs = grad_sink(s); !gs.empty()) {
        const auto xv = x.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        gs[0] += acc;
      }
    });
  }
  return result;
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += c;
  Tensor result(x.shape(), std::move(out));
  if (needs_recording({&x})) {
    record(result, [x](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor unary(const Tensor& x, UnaryOp op) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    switch (op) {
      case UnaryOp::kSigmoid:
        out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        break;
      case UnaryOp::kTanh: out[i] = std::tanh(v); break;
      case UnaryOp::kExp: out[i] = std::exp(v); break;
      case UnaryOp::kLog:
        if (!(v > 0.0)) throw NumericError("log: input must be strictly positive, got " + std::to_string(v));
        out[i] = std::log(v);
        break;
      case UnaryOp::kRelu: out[i] = v > 0.0 ? v : 0.0; break;
      case UnaryOp::kSquare: out[i] = v * v; break;
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (needs_recording({&x})) {
    record(result, [x, result, op](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      const auto xv = x.data();
      const auto yv = result.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = 0.0;
        switch (op) {
          case UnaryOp::kSigmoid: d = yv[i] * (1.0 - yv[i]); break;
          case UnaryOp::kTanh: d = 1.0 - yv[i] * yv[i]; break;
          case UnaryOp::kExp: d = yv[i]; break;
          case UnaryOp::kLog: d = 1.0 / xv[i]; break;
          case UnaryOp::kRelu: d = xv[i] > 0.0 ? 1.0 : 0.0; break;
          case UnaryOp::kSquare: d = 2.0 * xv[i]; break;
        }
        gx[i] += g[i] * d;
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor result = Tensor::scalar(acc);
  if (needs_recording({&x})) {
    record(result, [x](std::span<const double> g) {
      auto gx = grad_sink(x);
      for (auto& v : gx) v += g[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor softmax_rows(const Tensor& x) {
  const auto xv = x.data();
  require_finite(xv, "softmax_rows");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  if (needs_recording({&x})) {
    record(result, [x, result, rows, cols](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      const auto y = result.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += g[off + j] * y[off + j];
        for (std::size_t j = 0; j < cols; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
      }
    });
  }
  return result;
}

namespace {

Tensor rmsnorm_impl(const Tensor& x, const Tensor* gain) {
  if (x.size() == 0) throw DimensionError("rmsnorm: zero-length input");
  const std::size_t cols = x.shape().back();
  if (gain && gain->size() != cols) {
    throw DimensionError("rmsnorm: gain " + shape_string(gain->shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / cols;
  const auto xv = x.data();
  std::vector<double> inv_rms(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += in[j] * in[j];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(cols) + kRmsNormEps);
    for (std::size_t j = 0; j < cols; ++j) {
      out[r * cols + j] = in[j] * inv_rms[r] * (gain ? gain->data()[j] : 1.0);
    }
  }
  Tensor result(x.shape(), std::move(out));
  Tensor gain_t = gain ? *gain : Tensor();
  if (needs_recording({&x, gain})) {
    record(result, [x, gain_t, inv_rms = std::move(inv_rms), rows, cols](std::span<const double> g) {
      const auto xv = x.data();
      auto gx = grad_sink(x);
      auto gg = gain_t.defined() ? grad_sink(gain_t) : std::span<double>();
      std::vector<double> dyh(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          const double xhat = xv[off + j] * inv_rms[r];
          const double gj = gain_t.defined() ? gain_t.data()[j] : 1.0;
          dyh[j] = g[off + j] * gj;
          dot += dyh[j] * xhat;
          if (!gg.empty()) gg[j] += g[off + j] * xhat;
        }
        if (gx.empty()) continue;
        dot /= static_cast<double>(cols);
        for (std::size_t j = 0; j < cols; ++j) {
          const double xhat = xv[off + j] * inv_rms[r];
          gx[off + j] += (dyh[j] - xhat * dot) * inv_rms[r];
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor rmsnorm(const Tensor& x, const Tensor& gain) { return rmsnorm_impl(x, &gain); }
Tensor rmsnorm(const Tensor& x) { return rmsnorm_impl(x, nullptr); }

Tensor kron(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
    throw DimensionError("kron: expected two matrices, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const auto da = matrix_dims(a, "kron");
  const auto db = matrix_dims(b, "kron");
  if (da.batch != db.batch) {
    throw DimensionError("kron: batch mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t m = da.rows, n = da.cols, p = db.rows, q = db.cols;
  const std::size_t out_rows = m * p, out_cols = n * q;
  std::vector<double> out(da.batch * out_rows * out_cols);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t s = 0; s < da.batch; ++s) {
    const double* A = av.data() + s * m * n;
    const double* B = bv.data() + s * p * q;
    double* C = out.data() + s * out_rows * out_cols;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < p; ++k)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t l = 0; l < q; ++l)
            C[(i * p + k) * out_cols + j * q + l] = A[i * n + j] * B[k * q + l];
  }
  Tensor result(matrix_shape(a, out_rows, out_cols), std::move(out));
  if (needs_recording({&a, &b})) {
    record(result, [a, b, da, m, n, p, q](std::span<const double> g) {
      auto ga = grad_sink(a);
      auto gb = grad_sink(b);
      const auto av = a.data();
      const auto bv = b.data();
      const std::size_t out_cols = n * q;
      for (std::size_t s = 0; s < da.batch; ++s) {
        const double* G = g.data() + s * m * p * out_cols;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < p; ++k)
            for (std::size_t j = 0; j < n; ++j)
              for (std::size_t l = 0; l < q; ++l) {
                const double gv = G[(i * p + k) * out_cols + j * q + l];
                if (!ga.empty()) ga[s * m * n + i * n + j] += gv * bv[s * p * q + k * q + l];
                if (!gb.empty()) gb[s * p * q + k * q + l] += gv * av[s * m * n + i * n + j];
              }
      }
    });
  }
  return result;
}

Tensor mode_n_product(const Tensor& x, const Tensor& u, std::size_t mode) {
  const auto& xs = x.shape();
  if (mode >= xs.size()) {
    throw DimensionError("mode_n_product: mode " + std::to_string(mode) + " out of range for " +
                         shape_string(xs));
  }
  if (u.rank() != 2 || u.extent(1) != xs[mode]) {
    throw DimensionError("mode_n_product: factor " + shape_string(u.shape()) +
                         " does not match extent " + std::to_string(xs[mode]) + " of " +
                         shape_string(xs) + " at mode " + std::to_string(mode));
  }
  const std::size_t r = xs[mode];
  const std::size_t j = u.extent(0);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < mode; ++i) outer *= xs[i];
  for (std::size_t i = mode + 1; i < xs.size(); ++i) inner *= xs[i];
  Shape ys = xs;
  ys[mode] = j;
  std::vector<double> out(outer * j * inner, 0.0);
  const auto xv = x.data();
  const auto uv = u.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t rr = 0; rr < r; ++rr) {
        const double w = uv[i * r + rr];
        const double* src = xv.data() + (o * r + rr) * inner;
        double* dst = out.data() + (o * j + i) * inner;
        for (std::size_t t = 0; t < inner; ++t) dst[t] += w * src[t];
      }
  Tensor result(std::move(ys), std::move(out));
  if (needs_recording({&x, &u})) {
    record(result, [x, u, outer, inner, r, j](std::span<const double> g) {
      auto gx = grad_sink(x);
      auto gu = grad_sink(u);
      const auto xv = x.data();
      const auto uv = u.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < j; ++i)
          for (std::size_t rr = 0; rr < r; ++rr) {
            const double* gy = g.data() + (o * j + i) * inner;
            const std::size_t xoff = (o * r + rr) * inner;
            if (!gx.empty()) {
              const double w = uv[i * r + rr];
              for (std::size_t t = 0; t < inner; ++t) gx[xoff + t] += w * gy[t];
            }
            if (!gu.empty()) {
              double acc = 0.0;
              for (std::size_t t = 0; t < inner; ++t) acc += gy[t] * xv[xoff + t];
              gu[i * r + rr] += acc;
            }
          }
    });
  }
  return result;
}

namespace {

// Normalizes lines of a matrix-like tensor: rows when `by_rows`, else columns.
Tensor normalize_lines(const Tensor& x, bool by_rows) {
  const auto d = matrix_dims(x, by_rows ? "normalize_rows" : "normalize_cols");
  const std::size_t lines = by_rows ? d.rows : d.cols;
  const std::size_t len = by_rows ? d.cols : d.rows;
  const std::size_t stride_line = by_rows ? d.cols : 1;
  const std::size_t stride_elem = by_rows ? 1 : d.cols;
  const std::size_t mat = d.rows * d.cols;
  const auto xv = x.data();
  std::vector<double> sums(d.batch * lines, 0.0);
  std::vector<double> out(xv.size());
  for (std::size_t s = 0; s < d.batch; ++s)
    for (std::size_t l = 0; l < lines; ++l) {
      double acc = 0.0;
      for (std::size_t e = 0; e < len; ++e) acc += xv[s * mat + l * stride_line + e * stride_elem];
      sums[s * lines + l] = acc;
      for (std::size_t e = 0; e < len; ++e) {
        const std::size_t idx = s * mat + l * stride_line + e * stride_elem;
        out[idx] = xv[idx] / acc;
      }
    }
  Tensor result(x.shape(), std::move(out));
  if (needs_recording({&x})) {
    record(result, [x, result, sums = std::move(sums), d, lines, len, stride_line, stride_elem,
                    mat](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      const auto y = result.data();
      for (std::size_t s = 0; s < d.batch; ++s)
        for (std::size_t l = 0; l < lines; ++l) {
          double dot = 0.0;
          for (std::size_t e = 0; e < len; ++e) {
            const std::size_t idx = s * mat + l * stride_line + e * stride_elem;
            dot += g[idx] * y[idx];
          }
          const double inv = 1.0 / sums[s * lines + l];
          for (std::size_t e = 0; e < len; ++e) {
            const std::size_t idx = s * mat + l * stride_line + e * stride_elem;
            gx[idx] += (g[idx] - dot) * inv;
          }
        }
    });
  }
  return result;
}

}  // namespace

Tensor normalize_rows(const Tensor& x) { return normalize_lines(x, true); }
Tensor normalize_cols(const Tensor& x) { return normalize_lines(x, false); }

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.extent(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.extent(0), vocab = logits.extent(1);
  const auto lv = logits.data();
  require_finite(lv, "cross_entropy");
  std::vector<double> probs(lv.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
    const double* in = lv.data() + r * vocab;
    const double mx = *std::max_element(in, in + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(in[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += std::log(z) + mx - in[t];
  }
  Tensor result = Tensor::scalar(total / static_cast<double>(rows));
  if (needs_recording({&logits})) {
    std::vector<int> tgt(targets.begin(), targets.end());
    record(result, [logits, probs = std::move(probs), tgt = std::move(tgt), rows,
                    vocab](std::span<const double> g) {
      auto gl = grad_sink(logits);
      if (gl.empty()) return;
      const double w = g[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += w * probs[r * vocab + j];
        gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= w;
      }
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be a matrix");
  const std::size_t vocab = table.extent(0), width = table.extent(1);
  std::vector<double> out(ids.size() * width);
  const auto tv = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(id) * width, width, out.data() + r * width);
  }
  Tensor result({ids.size(), width}, std::move(out));
  if (needs_recording({&table})) {
    std::vector<int> idv(ids.begin(), ids.end());
    record(result, [table, idv = std::move(idv), width](std::span<const double> g) {
      auto gt = grad_sink(table);
      if (gt.empty()) return;
      for (std::size_t r = 0; r < idv.size(); ++r) {
        double* dst = gt.data() + static_cast<std::size_t>(idv[r]) * width;
        for (std::size_t c = 0; c < width; ++c) dst[c] += g[r * width + c];
      }
    });
  }
  return result;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t heads) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  if (q.rank() != 2 || q.extent(0) != batch * seq || heads == 0 || q.extent(1) % heads != 0) {
    throw DimensionError("causal_attention: input " + shape_string(q.shape()) +
                         " incompatible with batch=" + std::to_string(batch) +
                         " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
  }
  const std::size_t width = q.extent(1);
  const std::size_t hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  // probs[b][h][i][j], zero above the diagonal.
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qv.data() + (b * seq + i) * width + h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.data() + (b * seq + j) * width + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          P[i * seq + j] = s * inv_sqrt;
          mx = std::max(mx, P[i * seq + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * seq + j] = std::exp(P[i * seq + j] - mx);
          z += P[i * seq + j];
        }
        double* oi = out.data() + (b * seq + i) * width + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * seq + j] /= z;
          const double* vj = vv.data() + (b * seq + j) * width + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += P[i * seq + j] * vj[c];
        }
      }
    }
  Tensor result(q.shape(), std::move(out));
  if (needs_recording({&q, &k, &v})) {
    record(result, [q, k, v, probs = std::move(probs), batch, seq, heads, width, hd,
                    inv_sqrt](std::span<const double> g) {
      auto gq = grad_sink(q);
      auto gk = grad_sink(k);
      auto gv = grad_sink(v);
      const auto qv = q.data(), kv = k.data(), vv = v.data();
      std::vector<double> dp(seq);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const double* P = probs.data() + (b * heads + h) * seq * seq;
          for (std::size_t i = 0; i < seq; ++i) {
            const double* go = g.data() + (b * seq + i) * width + h * hd;
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              const double* vj = vv.data() + (b * seq + j) * width + h * hd;
              double s = 0.0;
              for (std::size_t c = 0; c < hd; ++c) s += go[c] * vj[c];
              dp[j] = s;
              dot += s * P[i * seq + j];
              if (!gv.empty()) {
                double* gvj = gv.data() + (b * seq + j) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gvj[c] += P[i * seq + j] * go[c];
              }
            }
            const double* qi = qv.data() + (b * seq + i) * width + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
              const double ds = P[i * seq + j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              const double* kj = kv.data() + (b * seq + j) * width + h * hd;
              if (!gq.empty()) {
                double* gqi = gq.data() + (b * seq + i) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
              }
              if (!gk.empty()) {
                double* gkj = gk.data() + (b * seq + j) * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
    });
  }
  return result;
}

Tensor expand_streams(const Tensor& x, std::size_t n) {
  if (x.rank() != 2 || n == 0) {
    throw DimensionError("expand_streams: expected [rows x C], got " + shape_string(x.shape()));
  }
  const std::size_t rows = x.extent(0), width = x.extent(1);
  std::vector<double> out(rows * n * width);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t s = 0; s < n; ++s)
      std::copy_n(xv.data() + r * width, width, out.data() + (r * n + s) * width);
  Tensor result({rows, n, width}, std::move(out));
  if (needs_recording({&x})) {
    record(result, [x, rows, n, width](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t c = 0; c < width; ++c) gx[r * width + c] += g[(r * n + s) * width + c];
    });
  }
  return result;
}

Tensor mean_streams(const Tensor& x) {
  if (x.rank() != 3) {
    throw DimensionError("mean_streams: expected [rows x n x C], got " + shape_string(x.shape()));
  }
  const std::size_t rows = x.extent(0), n = x.extent(1), width = x.extent(2);
  const double w = 1.0 / static_cast<double>(n);
  std::vector<double> out(rows * width, 0.0);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t c = 0; c < width; ++c) out[r * width + c] += w * xv[(r * n + s) * width + c];
  Tensor result({rows, width}, std::move(out));
  if (needs_recording({&x})) {
    record(result, [x, rows, n, width, w](std::span<const double> g) {
      auto gx = grad_sink(x);
      if (gx.empty()) return;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t c = 0; c < width; ++c) gx[(r * n + s) * width + c] += w * g[r * width + c];
    });
  }
  return result;
}

}  // namespace kromhc
