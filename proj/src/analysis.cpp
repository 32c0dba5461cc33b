#include "kromhc/analysis.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <random>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "kromhc/error.hpp"
#include "kromhc/ops.hpp"

namespace kromhc {

namespace {

std::uint64_t factorial(std::size_t m) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= m; ++i) f *= i;
  return f;
}

}  // namespace

std::uint64_t param_count(Scheme scheme, std::size_t n, std::size_t width, const FactorSpec& spec,
                          bool shared_alpha) {
  if (spec.n() != n) {
    throw ConfigError("param_count: factorization is for n=" + std::to_string(spec.n()) +
                      ", not n=" + std::to_string(n));
  }
  const std::uint64_t N = n, C = width, nC = N * C;
  switch (scheme) {
    case Scheme::kResidual:
      return 0;
    case Scheme::kHC:
      return 2 * C + nC + 2 * N + N * N + 3;
    case Scheme::kMHC:
      return 2 * N * N * C + N * N * N * C + 2 * N + N * N + 3 + nC;
    case Scheme::kMHCLite: {
      if (n > kMaxPermutationSize) {
        throw CapacityError("param_count: mHC-lite is limited to n <= " +
                            std::to_string(kMaxPermutationSize));
      }
      const std::uint64_t f = factorial(n);
      return 2 * N * N * C + nC * f + 2 * N + f + 3 + nC;
    }
    case Scheme::kKromHC: {
      const std::uint64_t alphas = shared_alpha ? 3 : 2 + spec.order();
      return 2 * N * N * C + (nC + 1) * spec.factorial_sum() + 2 * N + alphas + nC;
    }
  }
  return 0;
}

ParamReport param_report(Scheme scheme, std::size_t n, std::size_t width, std::size_t depth,
                         const FactorSpec& spec, bool shared_alpha) {
  ParamReport r{scheme, n, width, depth, spec.factors(), 0, 0, 0};
  r.per_layer = param_count(scheme, n, width, spec, shared_alpha);
  r.total_delta = r.per_layer * 2 * depth;
  r.reported_k = (r.total_delta + 999) / 1000;
  return r;
}

std::vector<ScalingRow> scaling_report(std::span<const Scheme> schemes,
                                       std::span<const std::size_t> n_values, std::size_t width) {
  std::vector<ScalingRow> rows;
  for (auto scheme : schemes) {
    for (auto n : n_values) {
      if (scheme == Scheme::kMHCLite && n > kMaxPermutationSize) continue;
      const FactorSpec spec = FactorSpec::all_twos(n);
      rows.push_back({scheme, n, width, spec.factors(), param_count(scheme, n, width, spec)});
    }
  }
  return rows;
}

bool scaling_order_holds(std::span<const ScalingRow> rows) {
  std::map<std::size_t, std::map<Scheme, std::uint64_t>> by_n;
  for (const auto& r : rows) by_n[r.n][r.scheme] = r.per_layer;
  for (const auto& [n, counts] : by_n) {
    if (n < 8) continue;
    auto lite = counts.find(Scheme::kMHCLite);
    auto mhc = counts.find(Scheme::kMHC);
    auto krom = counts.find(Scheme::kKromHC);
    if (mhc != counts.end() && krom != counts.end() && !(mhc->second > krom->second)) return false;
    if (lite != counts.end() && mhc != counts.end() && !(lite->second > mhc->second)) return false;
  }
  return true;
}

std::vector<DsScanRow> stability_scan(Scheme scheme, const FactorSpec& spec, std::size_t width,
                                      std::size_t layers, std::span<const std::uint64_t> seeds,
                                      const StabilityOptions& options) {
  if (layers < 1) throw UsageError("stability_scan: need at least one layer");
  if (seeds.empty()) throw UsageError("stability_scan: need at least one seed");
  const std::size_t n = spec.n();
  std::vector<DsScanRow> rows(layers);
  for (std::size_t d = 0; d < layers; ++d) rows[d] = {scheme, d + 1, 0.0, 0.0, 0.0, 0.0};

  const MapOptions map_options{options.shared_alpha, options.sk_iters};
  for (const auto seed : seeds) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Tensor product = Tensor::eye(n);
    for (std::size_t l = 0; l < layers; ++l) {
      HyperParams params = make_hyper_params(scheme, spec, width, options.shared_alpha, {l});
      perturb(params, rng, options.sigma);
      Tensor x({n, width}, 0.0);
      for (auto& v : x.mutable_data()) v = normal(rng);
      const LayerMaps maps = compute_maps(x, params, spec, map_options);
      product = matmul(maps.h_res, product);
      const DSDiagnostics diag = ds_diagnostics(product);
      rows[l].row_mae += diag.row_mae;
      rows[l].col_mae += diag.col_mae;
      rows[l].min_entry += diag.min_entry;
      rows[l].spectral_norm += diag.spectral_norm;
    }
  }
  const double inv = 1.0 / static_cast<double>(seeds.size());
  for (auto& r : rows) {
    r.row_mae *= inv;
    r.col_mae *= inv;
    r.min_entry *= inv;
    r.spectral_norm *= inv;
  }
  return rows;
}

GradCheckResult layer_grad_check(Scheme scheme, const FactorSpec& spec,
                                 const LayerGradCheckOptions& options) {
  if (scheme == Scheme::kResidual) throw UsageError("layer_grad_check: residual has no hyper-connection layer");
  const std::size_t n = spec.n(), C = options.width;
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal;
  auto random = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape), 0.0);
    for (auto& v : t.mutable_data()) v = stddev * normal(rng);
    return t;
  };
  HyperParams params = make_hyper_params(scheme, spec, C, options.shared_alpha, {});
  perturb(params, rng, options.sigma);
  const Tensor x = random({n, C}, 1.0);
  const Tensor w = random({C, C}, 1.0 / std::sqrt(static_cast<double>(C)));
  const Tensor r = random({n, C}, 1.0);
  const MapOptions map_options{options.shared_alpha, options.sk_iters};
  auto loss = [&] {
    const LayerMaps maps = compute_maps(x, params, spec, map_options);
    const Tensor out = hc_forward(x, maps, [&](const Tensor& h) { return tanh(matmul(h, w)); });
    return sum(mul(out, r));
  };
  return grad_check(loss, params.parameters());
}

double grad_check_tolerance(Scheme scheme) { return scheme == Scheme::kMHC ? 1e-4 : 1e-5; }

std::string format_factors(std::span<const std::size_t> factors) {
  return fmt::format("{}", fmt::join(factors, "x"));
}

void write_params_csv(std::ostream& os, std::span<const ParamReport> rows) {
  os << "scheme,n,C,D,per_layer,total,reported_k\n";
  for (const auto& r : rows) {
    os << fmt::format("{},{},{},{},{},{},{}\n", scheme_name(r.scheme), r.n, r.width, r.depth,
                      r.per_layer, r.total_delta, r.reported_k);
  }
}

void write_scaling_csv(std::ostream& os, std::span<const ScalingRow> rows) {
  os << "scheme,n,C,factorization,per_layer\n";
  for (const auto& r : rows) {
    os << fmt::format("{},{},{},{},{}\n", scheme_name(r.scheme), r.n, r.width,
                      format_factors(r.factors), r.per_layer);
  }
}

void write_ds_scan_csv(std::ostream& os, std::span<const DsScanRow> rows) {
  os << "scheme,depth,row_mae,col_mae,min_entry,spectral_norm\n";
  for (const auto& r : rows) {
    os << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", scheme_name(r.scheme), r.depth,
                      r.row_mae, r.col_mae, r.min_entry, r.spectral_norm);
  }
}

}  // namespace kromhc
