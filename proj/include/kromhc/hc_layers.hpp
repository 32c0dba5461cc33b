#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kromhc/manifold.hpp"
#include "kromhc/tensor.hpp"

namespace kromhc {

enum class Scheme { kResidual, kHC, kMHC, kMHCLite, kKromHC };

std::string_view scheme_name(Scheme s);
// Accepts residual, hc, mhc, mhclite (or mhc-lite), kromhc; case-insensitive.
Scheme parse_scheme(std::string_view name);

inline constexpr std::size_t kDefaultSinkhornIters = 20;

// Which entry of b_pre / b_post starts at +1 (the others start at -1).
enum class ActiveStream { kRotate, kFirst };

struct HyperInit {
  std::size_t layer_index = 0;
  ActiveStream active = ActiveStream::kRotate;
};

// Learnable state of one hyper-connection layer.
//   HC:            w_pre, w_post [1 x C]; w_res [n x C]; b_res [n x n]
//   mHC:           w_pre, w_post [nC x n]; w_res [nC x n^2]; b_res [1 x n^2]
//   mHC-lite:      w_pre, w_post [nC x n]; w_res [nC x n!];  b_res [1 x n!]
//   KromHC:        w_pre, w_post [nC x n]; w_res_k [nC x i_k!]; b_res_k [1 x i_k!]
// b_pre, b_post are [1 x n]; the alphas are one-element tensors; the mHC family
// carries an RMSNorm gain [1 x nC]. KromHC uses alpha_res when the residual
// scale is shared across factors, and alpha_res_k otherwise.
struct HyperParams {
  Scheme scheme = Scheme::kKromHC;
  std::size_t n = 0;
  std::size_t width = 0;

  Tensor w_pre, w_post, b_pre, b_post;
  Tensor alpha_pre, alpha_post, alpha_res;
  Tensor rms_gain;
  Tensor w_res, b_res;
  std::vector<Tensor> w_res_k, b_res_k, alpha_res_k;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

// Builds the parameters of one layer with the near-identity initialization:
// zero weights; b_pre/b_post at -1 except one +1 entry; alphas 0.01; residual
// biases favouring the identity ([0, -8, ..., -8] over permutation
// coefficients, 0 / -8 diagonal / off-diagonal SK logits, b_res = I for HC).
HyperParams make_hyper_params(Scheme scheme, const FactorSpec& spec, std::size_t width,
                              bool shared_alpha, const HyperInit& init = {});

// Adds N(0, sigma^2) to every weight, bias and alpha (not the norm gain).
void perturb(HyperParams& params, std::mt19937_64& rng, double sigma);

// (H_res, H_pre, H_post). For a single input X [n x C]: H_res [n x n],
// H_pre and H_post [1 x n]. For a batch [T x n x C]: [T x n x n], [T x n], [T x n].
struct LayerMaps {
  Tensor h_res;
  Tensor h_pre;
  Tensor h_post;
};

LayerMaps kromhc_maps(const Tensor& x, const HyperParams& params, const FactorSpec& spec,
                      bool shared_alpha);
LayerMaps mhc_maps(const Tensor& x, const HyperParams& params,
                   std::size_t sk_iters = kDefaultSinkhornIters);
LayerMaps mhclite_maps(const Tensor& x, const HyperParams& params, const PermutationBasis& basis);
LayerMaps hc_maps(const Tensor& x, const HyperParams& params);

struct MapOptions {
  bool shared_alpha = true;
  std::size_t sk_iters = kDefaultSinkhornIters;
};

// Dispatches on params.scheme.
LayerMaps compute_maps(const Tensor& x, const HyperParams& params, const FactorSpec& spec,
                       const MapOptions& options = {});

// Residual function over aggregated rows: [T x C] -> [T x C] (or [1 x C]).
using ResidualFn = std::function<Tensor(const Tensor&)>;

// X_{l+1} = H_res X_l + H_post^T F(H_pre X_l), per token.
Tensor hc_forward(const Tensor& x, const LayerMaps& maps, const ResidualFn& f);

// H_{to-1} * H_{to-2} * ... * H_{from} over single-input maps.
Tensor unroll_residual_product(std::span<const LayerMaps> maps, std::size_t from, std::size_t to);

}  // namespace kromhc
