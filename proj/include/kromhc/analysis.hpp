#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "kromhc/gradcheck.hpp"
#include "kromhc/hc_layers.hpp"
#include "kromhc/manifold.hpp"

namespace kromhc {

// Exact learnable parameters of one hyper-connection layer.
//   KromHC:   2n^2C + (nC+1) sum_k i_k! + 2n + 3 + nC   (shared alpha_res;
//             per-factor alphas add K-1)
//   mHC:      2n^2C + n^3C + 2n + n^2 + 3 + nC
//   mHC-lite: 2n^2C + nC*n! + 2n + n! + 3 + nC          (n <= 8)
//   HC:       2C + nC + 2n + n^2 + 3
// The trailing nC is the RMSNorm gain.
std::uint64_t param_count(Scheme scheme, std::size_t n, std::size_t width, const FactorSpec& spec,
                          bool shared_alpha = true);

struct ParamReport {
  Scheme scheme;
  std::size_t n;
  std::size_t width;
  std::size_t depth;  // transformer blocks D; 2D hyper-connection layers
  std::vector<std::size_t> factors;
  std::uint64_t per_layer;
  std::uint64_t total_delta;
  std::uint64_t reported_k;  // ceil(total / 1000)
};

ParamReport param_report(Scheme scheme, std::size_t n, std::size_t width, std::size_t depth,
                         const FactorSpec& spec, bool shared_alpha = true);

struct ScalingRow {
  Scheme scheme;
  std::size_t n;
  std::size_t width;
  std::vector<std::size_t> factors;
  std::uint64_t per_layer;
};

// Per-layer counts over n_values with n factored into twos. mHC-lite rows are
// produced only where its permutation basis exists (n <= 8).
std::vector<ScalingRow> scaling_report(std::span<const Scheme> schemes,
                                       std::span<const std::size_t> n_values, std::size_t width);
// True when mHC-lite > mHC > KromHC for every n >= 8 present in all three.
bool scaling_order_holds(std::span<const ScalingRow> rows);

struct DsScanRow {
  Scheme scheme;
  std::size_t depth;
  double row_mae;
  double col_mae;
  double min_entry;
  double spectral_norm;
};

struct StabilityOptions {
  std::size_t sk_iters = kDefaultSinkhornIters;
  bool shared_alpha = true;
  double sigma = 0.5;
};

// For each depth d in 1..layers: the product of the first d residual matrices
// of a stack of randomly perturbed layers, diagnosed and averaged over seeds.
std::vector<DsScanRow> stability_scan(Scheme scheme, const FactorSpec& spec, std::size_t width,
                                      std::size_t layers, std::span<const std::uint64_t> seeds,
                                      const StabilityOptions& options = {});

struct LayerGradCheckOptions {
  std::size_t width = 8;
  std::uint64_t seed = 0;
  std::size_t sk_iters = kDefaultSinkhornIters;
  bool shared_alpha = true;
  double sigma = 0.5;
};

// Gradient check of a full layer: loss = sum(R * hc_forward(X, maps(X), F))
// with F(h) = tanh(h W), random fixed X, R and W, and perturbed parameters.
GradCheckResult layer_grad_check(Scheme scheme, const FactorSpec& spec,
                                 const LayerGradCheckOptions& options = {});
// 1e-4 for mHC (gradients flow through the unrolled Sinkhorn iterations),
// 1e-5 otherwise.
double grad_check_tolerance(Scheme scheme);

// CSV writers: '\n' line endings, 17 significant digits.
void write_params_csv(std::ostream& os, std::span<const ParamReport> rows);
void write_scaling_csv(std::ostream& os, std::span<const ScalingRow> rows);
void write_ds_scan_csv(std::ostream& os, std::span<const DsScanRow> rows);

std::string format_factors(std::span<const std::size_t> factors);

}  // namespace kromhc
