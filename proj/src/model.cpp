#include "kromhc/model.hpp"

#include <cmath>
#include <random>

#include "kromhc/error.hpp"
#include "kromhc/ops.hpp"

namespace kromhc {

std::size_t RunConfig::resolved_heads() const {
  if (heads != 0) return heads;
  return std::max<std::size_t>(1, width / 64);
}

FactorSpec RunConfig::factor_spec() const {
  if (n == 1 && factorization.empty()) return FactorSpec(1, {});
  if (factorization.empty()) return FactorSpec::prime(n);
  return FactorSpec(n, factorization);
}

std::vector<std::string> RunConfig::violations() const {
  std::vector<std::string> out;
  if (n == 0) out.push_back("n must be >= 1");
  if (scheme == Scheme::kResidual && n != 1) {
    out.push_back("scheme residual carries a single stream; n must be 1 (got " + std::to_string(n) + ")");
  }
  if (scheme != Scheme::kResidual && n < 2) {
    out.push_back("scheme " + std::string(scheme_name(scheme)) + " needs n >= 2");
  }
  if (n > 0) {
    try {
      const FactorSpec spec = factor_spec();
      if (scheme == Scheme::kKromHC) {
        for (auto f : spec.factors()) {
          if (f > kMaxPermutationSize) {
            out.push_back("factor " + std::to_string(f) + " exceeds the permutation basis cap of " +
                          std::to_string(kMaxPermutationSize) + "; choose a different n");
          }
        }
      }
    } catch (const Error& e) {
      out.push_back(e.what());
    }
  }
  if (scheme == Scheme::kMHCLite && n > kMaxPermutationSize) {
    out.push_back("mhclite enumerates n! permutations and is limited to n <= " +
                  std::to_string(kMaxPermutationSize));
  }
  if (width == 0) out.push_back("C must be >= 1");
  if (width > 0 && width % resolved_heads() != 0) {
    out.push_back("C = " + std::to_string(width) + " is not divisible by heads = " +
                  std::to_string(resolved_heads()));
  }
  if (depth == 0) out.push_back("D must be >= 1");
  if (steps == 0) out.push_back("steps must be >= 1");
  if (vocab_size < 2) out.push_back("vocab_size must be >= 2");
  if (seq_len == 0) out.push_back("seq_len must be >= 1");
  if (batch_size == 0) out.push_back("batch_size must be >= 1");
  if (sk_iters == 0) out.push_back("sk_iters must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) out.push_back("learning_rate must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) out.push_back("weight_decay must be >= 0");
  return out;
}

void RunConfig::validate() const {
  const auto problems = violations();
  if (problems.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

namespace {

RunConfig validated(RunConfig cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Model::Model(RunConfig cfg) : cfg_(validated(std::move(cfg))), spec_(cfg_.factor_spec()) {
  const std::size_t C = cfg_.width;
  embed = Tensor::parameter({cfg_.vocab_size, C}, std::vector<double>(cfg_.vocab_size * C));
  position = Tensor::parameter({cfg_.seq_len, C}, std::vector<double>(cfg_.seq_len * C));
  lm_head = Tensor::parameter({C, cfg_.vocab_size}, std::vector<double>(C * cfg_.vocab_size));
  blocks.resize(cfg_.depth);
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed", embed);
  out.emplace_back("position", position);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    out.emplace_back(prefix + "wq", blk.wq);
    out.emplace_back(prefix + "wk", blk.wk);
    out.emplace_back(prefix + "wv", blk.wv);
    out.emplace_back(prefix + "wo", blk.wo);
    out.emplace_back(prefix + "w1", blk.w1);
    out.emplace_back(prefix + "w2", blk.w2);
    if (cfg_.scheme == Scheme::kResidual) {
      out.emplace_back(prefix + "lambda_resid", blk.lambda_resid);
      out.emplace_back(prefix + "lambda_x0", blk.lambda_x0);
    } else {
      for (auto& [name, t] : blk.attn_hc.named_parameters()) out.emplace_back(prefix + "attn_hc." + name, t);
      for (auto& [name, t] : blk.ffn_hc.named_parameters()) out.emplace_back(prefix + "ffn_hc." + name, t);
    }
  }
  out.emplace_back("lm_head", lm_head);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Model::hyper_parameter_count() const {
  if (cfg_.scheme == Scheme::kResidual) return 0;
  std::size_t total = 0;
  for (const auto& blk : blocks) total += blk.attn_hc.parameter_count() + blk.ffn_hc.parameter_count();
  return total;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (auto& [name, t] : named_parameters()) total += t.size();
  return total;
}

void Model::load_state(std::span<const std::pair<std::string, Tensor>> state) {
  auto mine = named_parameters();
  if (mine.size() != state.size()) {
    throw DataError("checkpoint holds " + std::to_string(state.size()) + " tensors, model has " +
                    std::to_string(mine.size()));
  }
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto& [name, t] = mine[i];
    const auto& [sname, st] = state[i];
    if (name != sname || t.shape() != st.shape()) {
      throw DataError("checkpoint tensor '" + sname + "' " + shape_string(st.shape()) +
                      " does not match '" + name + "' " + shape_string(t.shape()));
    }
  }
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto dst = mine[i].second.mutable_data();
    const auto src = state[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Model build_model(const RunConfig& cfg) {
  Model model(cfg);
  init_params(model, cfg);
  return model;
}

void init_params(Model& model, const RunConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;
  auto gaussian = [&](Shape shape, double stddev) {
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = stddev * normal(rng);
    return Tensor::parameter(std::move(shape), std::move(data));
  };
  auto zeros = [](Shape shape) {
    const std::size_t n = shape_size(shape);
    return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0));
  };

  const std::size_t C = cfg.width;
  const std::size_t hidden = 4 * C;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(C));
  model.embed = gaussian({cfg.vocab_size, C}, 1.0);
  model.position = gaussian({cfg.seq_len, C}, 0.1);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    Block& blk = model.blocks[b];
    blk.wq = gaussian({C, C}, in_scale);
    blk.wk = gaussian({C, C}, in_scale);
    blk.wv = gaussian({C, C}, in_scale);
    blk.wo = zeros({C, C});
    blk.w1 = gaussian({C, hidden}, in_scale);
    blk.w2 = zeros({hidden, C});
    if (cfg.scheme == Scheme::kResidual) {
      blk.lambda_resid = Tensor::parameter({1}, {1.0});
      blk.lambda_x0 = Tensor::parameter({1}, {0.0});
    } else {
      const FactorSpec& spec = model.factor_spec();
      blk.attn_hc = make_hyper_params(cfg.scheme, spec, C, cfg.shared_alpha,
                                      {2 * b, cfg.active_stream});
      blk.ffn_hc = make_hyper_params(cfg.scheme, spec, C, cfg.shared_alpha,
                                     {2 * b + 1, cfg.active_stream});
    }
  }
  model.lm_head = zeros({C, cfg.vocab_size});
}

namespace {

Tensor attention_branch(const Block& blk, const Tensor& h, std::size_t batch, std::size_t seq,
                        std::size_t heads) {
  const Tensor hn = rmsnorm(h);
  const Tensor q = matmul(hn, blk.wq);
  const Tensor k = matmul(hn, blk.wk);
  const Tensor v = matmul(hn, blk.wv);
  return matmul(causal_attention(q, k, v, batch, seq, heads), blk.wo);
}

Tensor ffn_branch(const Block& blk, const Tensor& h) {
  return matmul(relu(matmul(rmsnorm(h), blk.w1)), blk.w2);
}

struct Inputs {
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<int> targets;
};

Inputs split_batch(const TokenBatch& batch, const RunConfig& cfg) {
  if (batch.seq == 0 || batch.batch == 0 || batch.tokens.size() != batch.batch * (batch.seq + 1)) {
    throw DataError("token batch of " + std::to_string(batch.tokens.size()) +
                    " tokens does not hold " + std::to_string(batch.batch) + " rows of " +
                    std::to_string(batch.seq + 1));
  }
  if (batch.seq > cfg.seq_len) {
    throw DataError("sequence length " + std::to_string(batch.seq) + " exceeds the model's " +
                    std::to_string(cfg.seq_len));
  }
  Inputs in;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const int* row = batch.tokens.data() + b * (batch.seq + 1);
    for (std::size_t t = 0; t < batch.seq; ++t) {
      in.ids.push_back(row[t]);
      in.targets.push_back(row[t + 1]);
      in.positions.push_back(static_cast<int>(t));
    }
  }
  for (int id : batch.tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(cfg.vocab_size));
    }
  }
  return in;
}

// Final hidden rows [batch*seq x C]; appends layer traces when requested.
Tensor forward_hidden(const Model& model, const TokenBatch& batch, const Inputs& in,
                      std::vector<LayerTrace>* trace) {
  const RunConfig& cfg = model.config();
  const std::size_t heads = cfg.resolved_heads();
  const Tensor x0 = add(embedding(model.embed, in.ids), embedding(model.position, in.positions));
  auto attn = [&](const Block& blk) {
    return [&, blk_ptr = &blk](const Tensor& h) {
      return attention_branch(*blk_ptr, h, batch.batch, batch.seq, heads);
    };
  };
  auto ffn = [](const Block& blk) {
    return [blk_ptr = &blk](const Tensor& h) { return ffn_branch(*blk_ptr, h); };
  };

  if (cfg.scheme == Scheme::kResidual) {
    Tensor x = x0;
    for (const auto& blk : model.blocks) {
      x = add(scale(x, blk.lambda_resid), scale(x0, blk.lambda_x0));
      x = add(x, attn(blk)(x));
      x = add(x, ffn(blk)(x));
    }
    return x;
  }

  const MapOptions options{cfg.shared_alpha, cfg.sk_iters};
  Tensor streams = expand_streams(x0, cfg.n);
  auto layer = [&](const HyperParams& params, const ResidualFn& f) {
    LayerMaps maps = compute_maps(streams, params, model.factor_spec(), options);
    if (trace) trace->push_back({streams, maps});
    streams = hc_forward(streams, maps, f);
  };
  for (const auto& blk : model.blocks) {
    layer(blk.attn_hc, attn(blk));
    layer(blk.ffn_hc, ffn(blk));
  }
  return mean_streams(streams);
}

}  // namespace

Tensor forward_loss(const Model& model, const TokenBatch& batch) {
  const Inputs in = split_batch(batch, model.config());
  const Tensor hidden = forward_hidden(model, batch, in, nullptr);
  const Tensor logits = matmul(rmsnorm(hidden), model.lm_head);
  return cross_entropy(logits, in.targets);
}

std::vector<LayerTrace> trace_layers(const Model& model, const TokenBatch& batch) {
  const Inputs in = split_batch(batch, model.config());
  std::vector<LayerTrace> trace;
  forward_hidden(model, batch, in, &trace);
  return trace;
}

}  // namespace kromhc
