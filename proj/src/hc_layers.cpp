#include "kromhc/hc_layers.hpp"

#include <algorithm>
#include <cctype>
#include <string>

#include "kromhc/error.hpp"
#include "kromhc/ops.hpp"

namespace kromhc {

std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kResidual: return "residual";
    case Scheme::kHC: return "hc";
    case Scheme::kMHC: return "mhc";
    case Scheme::kMHCLite: return "mhclite";
    case Scheme::kKromHC: return "kromhc";
  }
  return "unknown";
}

Scheme parse_scheme(std::string_view name) {
  std::string s;
  for (char c : name) {
    if (c == '-' || c == '_') continue;
    s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (s == "residual") return Scheme::kResidual;
  if (s == "hc") return Scheme::kHC;
  if (s == "mhc") return Scheme::kMHC;
  if (s == "mhclite") return Scheme::kMHCLite;
  if (s == "kromhc") return Scheme::kKromHC;
  throw ConfigError("unknown scheme '" + std::string(name) +
                    "' (expected residual, hc, mhc, mhclite or kromhc)");
}

std::vector<std::pair<std::string, Tensor>> HyperParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add = [&out](std::string name, const Tensor& t) {
    if (t.defined()) out.emplace_back(std::move(name), t);
  };
  add("w_pre", w_pre);
  add("w_post", w_post);
  add("b_pre", b_pre);
  add("b_post", b_post);
  add("alpha_pre", alpha_pre);
  add("alpha_post", alpha_post);
  add("alpha_res", alpha_res);
  add("rms_gain", rms_gain);
  add("w_res", w_res);
  add("b_res", b_res);
  for (std::size_t k = 0; k < w_res_k.size(); ++k) add("w_res_" + std::to_string(k), w_res_k[k]);
  for (std::size_t k = 0; k < b_res_k.size(); ++k) add("b_res_" + std::to_string(k), b_res_k[k]);
  for (std::size_t k = 0; k < alpha_res_k.size(); ++k) {
    add("alpha_res_" + std::to_string(k), alpha_res_k[k]);
  }
  return out;
}

std::vector<Tensor> HyperParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t HyperParams::parameter_count() const {
  std::size_t total = 0;
  for (auto& [name, t] : named_parameters()) total += t.size();
  return total;
}

namespace {

Tensor param(Shape shape, double fill) {
  const std::size_t n = shape_size(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, fill));
}

// -1 everywhere except +1 at the active stream.
Tensor gate_bias(std::size_t n, const HyperInit& init) {
  std::vector<double> b(n, -1.0);
  const std::size_t idx = init.active == ActiveStream::kRotate ? init.layer_index % n : 0;
  b[idx] = 1.0;
  return Tensor::parameter({1, n}, std::move(b));
}

// Permutation-coefficient bias concentrating the softmax on the identity.
Tensor identity_coeff_bias(std::size_t count) {
  std::vector<double> b(count, -8.0);
  b[0] = 0.0;
  return Tensor::parameter({1, count}, std::move(b));
}

std::uint64_t factorial(std::size_t m) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= m; ++i) f *= i;
  return f;
}

}  // namespace

HyperParams make_hyper_params(Scheme scheme, const FactorSpec& spec, std::size_t width,
                              bool shared_alpha, const HyperInit& init) {
  const std::size_t n = spec.n();
  if (width == 0) throw DimensionError("hyper-connection width must be positive");
  HyperParams p;
  p.scheme = scheme;
  p.n = n;
  p.width = width;
  const std::size_t flat = n * width;
  p.alpha_pre = param({1}, 0.01);
  p.alpha_post = param({1}, 0.01);
  p.b_pre = gate_bias(n, init);
  p.b_post = gate_bias(n, init);

  switch (scheme) {
    case Scheme::kResidual:
      throw UsageError("the residual baseline has no hyper-connection parameters");
    case Scheme::kHC: {
      p.alpha_res = param({1}, 0.01);
      p.w_pre = param({1, width}, 0.0);
      p.w_post = param({1, width}, 0.0);
      p.w_res = param({n, width}, 0.0);
      p.b_res = Tensor::eye(n);
      p.b_res.set_requires_grad(true);
      break;
    }
    case Scheme::kMHC: {
      p.alpha_res = param({1}, 0.01);
      p.rms_gain = param({1, flat}, 1.0);
      p.w_pre = param({flat, n}, 0.0);
      p.w_post = param({flat, n}, 0.0);
      p.w_res = param({flat, n * n}, 0.0);
      std::vector<double> b(n * n, -8.0);
      for (std::size_t i = 0; i < n; ++i) b[i * n + i] = 0.0;
      p.b_res = Tensor::parameter({1, n * n}, std::move(b));
      break;
    }
    case Scheme::kMHCLite: {
      if (n > kMaxPermutationSize) {
        throw CapacityError("mHC-lite needs all " + std::to_string(n) +
                            "! permutation matrices; n is capped at " +
                            std::to_string(kMaxPermutationSize));
      }
      const std::size_t count = factorial(n);
      p.alpha_res = param({1}, 0.01);
      p.rms_gain = param({1, flat}, 1.0);
      p.w_pre = param({flat, n}, 0.0);
      p.w_post = param({flat, n}, 0.0);
      p.w_res = param({flat, count}, 0.0);
      p.b_res = identity_coeff_bias(count);
      break;
    }
    case Scheme::kKromHC: {
      p.rms_gain = param({1, flat}, 1.0);
      p.w_pre = param({flat, n}, 0.0);
      p.w_post = param({flat, n}, 0.0);
      if (shared_alpha) p.alpha_res = param({1}, 0.01);
      for (std::size_t k = 0; k < spec.order(); ++k) {
        const std::size_t count = spec.basis(k).count();
        p.w_res_k.push_back(param({flat, count}, 0.0));
        p.b_res_k.push_back(identity_coeff_bias(count));
        if (!shared_alpha) p.alpha_res_k.push_back(param({1}, 0.01));
      }
      break;
    }
  }
  return p;
}

void perturb(HyperParams& params, std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& [name, t] : params.named_parameters()) {
    if (name == "rms_gain") continue;
    for (auto& v : t.mutable_data()) v += noise(rng);
  }
}

namespace {

// Normalizes X into a batch view [T x n x C] and records whether the caller
// passed a single [n x C] input.
struct Batched {
  Tensor x;
  std::size_t tokens;
  bool single;
};

Batched as_batch(const Tensor& x, const HyperParams& params) {
  if (x.rank() == 2 && x.extent(0) == params.n && x.extent(1) == params.width) {
    return {reshape(x, {1, params.n, params.width}), 1, true};
  }
  if (x.rank() == 3 && x.extent(1) == params.n && x.extent(2) == params.width) {
    return {x, x.extent(0), false};
  }
  throw DimensionError("hyper-connection input " + shape_string(x.shape()) + " does not match n=" +
                       std::to_string(params.n) + ", C=" + std::to_string(params.width));
}

LayerMaps finish(const Batched& b, std::size_t n, Tensor h_res, Tensor h_pre, Tensor h_post) {
  if (b.single) {
    return {reshape(h_res, {n, n}), reshape(h_pre, {1, n}), reshape(h_post, {1, n})};
  }
  return {reshape(h_res, {b.tokens, n, n}), std::move(h_pre), std::move(h_post)};
}

void require_scheme(const HyperParams& params, Scheme scheme) {
  if (params.scheme != scheme) {
    throw UsageError(std::string(scheme_name(scheme)) + " maps called with " +
                     std::string(scheme_name(params.scheme)) + " parameters");
  }
}

// Shared H_pre / H_post parametrization of the mHC family over the normalized
// flattened input xn [T x nC].
std::pair<Tensor, Tensor> gated_pre_post(const Tensor& xn, const HyperParams& p) {
  Tensor h_pre = sigmoid(add_bias(scale(matmul(xn, p.w_pre), p.alpha_pre), p.b_pre));
  Tensor h_post =
      scale(sigmoid(add_bias(scale(matmul(xn, p.w_post), p.alpha_post), p.b_post)), 2.0);
  return {std::move(h_pre), std::move(h_post)};
}

Tensor normalized_flat(const Batched& b, const HyperParams& p) {
  return rmsnorm(reshape(b.x, {b.tokens, p.n * p.width}), p.rms_gain);
}

}  // namespace

LayerMaps kromhc_maps(const Tensor& x, const HyperParams& params, const FactorSpec& spec,
                      bool shared_alpha) {
  require_scheme(params, Scheme::kKromHC);
  if (spec.n() != params.n || spec.order() != params.w_res_k.size()) {
    throw DimensionError("kromhc_maps: factorization of n=" + std::to_string(spec.n()) + " into " +
                         std::to_string(spec.order()) + " factors does not match parameters for n=" +
                         std::to_string(params.n) + " with " +
                         std::to_string(params.w_res_k.size()) + " factors");
  }
  if (shared_alpha ? !params.alpha_res.defined() : params.alpha_res_k.size() != spec.order()) {
    throw UsageError(shared_alpha ? "kromhc_maps: shared alpha_res missing"
                                  : "kromhc_maps: per-factor alpha_res_k missing");
  }
  const Batched b = as_batch(x, params);
  const Tensor xn = normalized_flat(b, params);
  auto [h_pre, h_post] = gated_pre_post(xn, params);

  std::vector<Tensor> factors;
  factors.reserve(spec.order());
  for (std::size_t k = 0; k < spec.order(); ++k) {
    const auto& basis = spec.basis(k);
    if (params.w_res_k[k].extent(1) != basis.count()) {
      throw DimensionError("kromhc_maps: factor " + std::to_string(k) + " weights " +
                           shape_string(params.w_res_k[k].shape()) + " do not match " +
                           std::to_string(basis.count()) + " permutations");
    }
    const Tensor& alpha = shared_alpha ? params.alpha_res : params.alpha_res_k[k];
    Tensor logits = add_bias(scale(matmul(xn, params.w_res_k[k]), alpha), params.b_res_k[k]);
    Tensor u = bvn_combine(softmax_rows(logits), basis);
    factors.push_back(reshape(u, {b.tokens, basis.size, basis.size}));
  }
  return finish(b, params.n, kron_chain(factors), std::move(h_pre), std::move(h_post));
}

LayerMaps mhc_maps(const Tensor& x, const HyperParams& params, std::size_t sk_iters) {
  require_scheme(params, Scheme::kMHC);
  const Batched b = as_batch(x, params);
  const Tensor xn = normalized_flat(b, params);
  auto [h_pre, h_post] = gated_pre_post(xn, params);
  Tensor logits = add_bias(scale(matmul(xn, params.w_res), params.alpha_res), params.b_res);
  Tensor h_res = sinkhorn_knopp(reshape(logits, {b.tokens, params.n, params.n}), sk_iters);
  return finish(b, params.n, std::move(h_res), std::move(h_pre), std::move(h_post));
}

LayerMaps mhclite_maps(const Tensor& x, const HyperParams& params, const PermutationBasis& basis) {
  require_scheme(params, Scheme::kMHCLite);
  if (basis.size != params.n) {
    throw DimensionError("mhclite_maps: basis of size " + std::to_string(basis.size) +
                         " for n=" + std::to_string(params.n));
  }
  const Batched b = as_batch(x, params);
  const Tensor xn = normalized_flat(b, params);
  auto [h_pre, h_post] = gated_pre_post(xn, params);
  Tensor logits = add_bias(scale(matmul(xn, params.w_res), params.alpha_res), params.b_res);
  Tensor h_res = bvn_combine(softmax_rows(logits), basis);
  return finish(b, params.n, std::move(h_res), std::move(h_pre), std::move(h_post));
}

LayerMaps hc_maps(const Tensor& x, const HyperParams& params) {
  require_scheme(params, Scheme::kHC);
  const Batched b = as_batch(x, params);
  const std::size_t n = params.n;
  // Per-stream normalization over the feature axis.
  const Tensor xn = rmsnorm(reshape(b.x, {b.tokens * n, params.width}));
  auto dynamic = [&](const Tensor& w, const Tensor& alpha) {
    return scale(tanh(matmul(xn, transpose(w))), alpha);
  };
  Tensor h_pre = add_bias(reshape(dynamic(params.w_pre, params.alpha_pre), {b.tokens, n}), params.b_pre);
  Tensor h_post =
      add_bias(reshape(dynamic(params.w_post, params.alpha_post), {b.tokens, n}), params.b_post);
  // Row (t, j) of xn W_res^T holds <W_res[i], X'_j>; transposing gives H_res[t](i, j).
  Tensor res = transpose(reshape(matmul(xn, transpose(params.w_res)), {b.tokens, n, n}));
  Tensor h_res = add_bias(scale(tanh(res), params.alpha_res), params.b_res);
  return finish(b, n, std::move(h_res), std::move(h_pre), std::move(h_post));
}

LayerMaps compute_maps(const Tensor& x, const HyperParams& params, const FactorSpec& spec,
                       const MapOptions& options) {
  switch (params.scheme) {
    case Scheme::kHC: return hc_maps(x, params);
    case Scheme::kMHC: return mhc_maps(x, params, options.sk_iters);
    case Scheme::kMHCLite: return mhclite_maps(x, params, *shared_permutation_basis(params.n));
    case Scheme::kKromHC: return kromhc_maps(x, params, spec, options.shared_alpha);
    case Scheme::kResidual: break;
  }
  throw UsageError("compute_maps: the residual baseline has no hyper-connection maps");
}

Tensor hc_forward(const Tensor& x, const LayerMaps& maps, const ResidualFn& f) {
  const bool single = x.rank() == 2;
  if (!single && x.rank() != 3) {
    throw DimensionError("hc_forward: expected [n x C] or [T x n x C], got " + shape_string(x.shape()));
  }
  const std::size_t tokens = single ? 1 : x.extent(0);
  const std::size_t n = x.extent(single ? 0 : 1);
  const std::size_t width = x.extent(single ? 1 : 2);
  const Tensor xb = single ? reshape(x, {1, n, width}) : x;
  const Tensor h_res = reshape(maps.h_res, {tokens, n, n});
  const Tensor h_pre = reshape(maps.h_pre, {tokens, 1, n});
  const Tensor h_post = reshape(maps.h_post, {tokens, n, 1});

  const Tensor aggregated = reshape(matmul(h_pre, xb), {tokens, width});
  const Tensor fx = f(aggregated);
  if (fx.shape() != Shape{tokens, width}) {
    throw DimensionError("hc_forward: residual function returned " + shape_string(fx.shape()) +
                         ", expected " + shape_string({tokens, width}));
  }
  Tensor out = add(matmul(h_res, xb), matmul(h_post, reshape(fx, {tokens, 1, width})));
  return single ? reshape(out, {n, width}) : out;
}

Tensor unroll_residual_product(std::span<const LayerMaps> maps, std::size_t from, std::size_t to) {
  if (from >= to || to > maps.size()) {
    throw UsageError("unroll_residual_product: empty or invalid layer range [" + std::to_string(from) +
                     ", " + std::to_string(to) + ") over " + std::to_string(maps.size()) + " layers");
  }
  Tensor product = maps[to - 1].h_res;
  for (std::size_t l = to - 1; l-- > from;) product = matmul(product, maps[l].h_res);
  return product;
}

}  // namespace kromhc
