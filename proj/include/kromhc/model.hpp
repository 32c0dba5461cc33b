#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kromhc/hc_layers.hpp"
#include "kromhc/manifold.hpp"
#include "kromhc/tensor.hpp"

namespace kromhc {

struct RunConfig {
  Scheme scheme = Scheme::kKromHC;
  std::size_t n = 4;
  // Empty means the prime factorization of n.
  std::vector<std::size_t> factorization;
  std::size_t depth = 2;   // transformer blocks D
  std::size_t width = 64;  // hidden width C
  std::size_t heads = 0;   // 0: max(1, C / 64)
  std::size_t vocab_size = 32;
  std::size_t seq_len = 32;
  std::size_t batch_size = 4;
  std::size_t steps = 300;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 42;
  bool shared_alpha = true;
  std::size_t sk_iters = kDefaultSinkhornIters;
  std::string output_dir = "out";
  ActiveStream active_stream = ActiveStream::kRotate;
  // Off by default so that metrics files are reproducible byte for byte.
  bool record_wall_ms = false;

  std::size_t resolved_heads() const;
  FactorSpec factor_spec() const;
  // Every constraint violation, empty when valid.
  std::vector<std::string> violations() const;
  // Throws ConfigError listing all violations.
  void validate() const;
};

// One transformer block: causal attention and a two-layer FFN, each wrapped by
// a hyper-connection layer (or by the lambda-scaled residual for the baseline).
struct Block {
  Tensor wq, wk, wv, wo;
  Tensor w1, w2;
  HyperParams attn_hc, ffn_hc;
  Tensor lambda_resid, lambda_x0;
};

class Model {
 public:
  explicit Model(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  const FactorSpec& factor_spec() const { return spec_; }

  Tensor embed;     // [vocab x C]
  Tensor position;  // [seq_len x C]
  Tensor lm_head;   // [C x vocab]
  std::vector<Block> blocks;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  // Parameters of all 2D hyper-connection layers.
  std::size_t hyper_parameter_count() const;
  std::size_t parameter_count() const;

  // Copies values from a checkpoint; names and shapes must match exactly.
  void load_state(std::span<const std::pair<std::string, Tensor>> state);

 private:
  RunConfig cfg_;
  FactorSpec spec_;
};

// Validates cfg, allocates every tensor and applies init_params.
Model build_model(const RunConfig& cfg);
// Hyper-connection layers get the near-identity initialization (layer index
// 2b for attention, 2b+1 for FFN); backbone weights are seeded scaled normals;
// the baseline's lambdas start at (1, 0).
void init_params(Model& model, const RunConfig& cfg);

// batch rows of seq+1 tokens; position t predicts token t+1.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
};

Tensor forward_loss(const Model& model, const TokenBatch& batch);

// Input stream and maps of one hyper-connection layer during a forward pass.
struct LayerTrace {
  Tensor input;  // [tokens x n x C]
  LayerMaps maps;
};

// Forward pass that records every hyper-connection layer (empty for the
// residual baseline).
std::vector<LayerTrace> trace_layers(const Model& model, const TokenBatch& batch);

// ce / ln 2 * tokens / bytes.
double bpb(double ce_loss, std::uint64_t total_tokens, std::uint64_t total_bytes);

// Repeated random patterns with token noise; one token encodes one byte.
class SyntheticCorpus {
 public:
  struct Options {
    std::size_t patterns = 8;
    std::size_t pattern_len = 8;
    double noise = 0.05;
    std::size_t length = 1 << 15;
  };

  SyntheticCorpus(std::size_t vocab_size, std::uint64_t seed);
  SyntheticCorpus(std::size_t vocab_size, std::uint64_t seed, Options options);

  std::span<const int> tokens() const { return tokens_; }
  std::size_t vocab_size() const { return vocab_; }
  // Deterministic, cycling windows for training step `step`.
  TokenBatch batch(std::size_t step, std::size_t batch_size, std::size_t seq) const;
  std::uint64_t bytes_for(std::uint64_t tokens) const { return tokens; }

 private:
  std::size_t vocab_;
  std::vector<int> tokens_;
};

struct TrainMetrics {
  std::size_t step = 0;
  double ce_loss = 0.0;
  double bpb = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double beta1 = 0.8, double beta2 = 0.95, double eps = 1e-10,
        double weight_decay = 0.0);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

// Constant rate, then linear decay to zero over the final 40% of steps.
double learning_rate_at(const RunConfig& cfg, std::size_t step);

struct TrainResult {
  std::vector<TrainMetrics> metrics;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
};

// Trains for cfg.steps. With a non-empty cfg.output_dir, writes metrics.csv
// (one row per step) and checkpoint.bin there. Throws NumericError on a
// non-finite loss or gradient.
TrainResult train_loop(Model& model, const SyntheticCorpus& corpus, const RunConfig& cfg);

void write_metrics_csv(std::ostream& os, std::span<const TrainMetrics> rows);

// Text manifest (name, byte offset, shape per tensor) followed by raw
// little-endian f64 data.
void save_checkpoint(const std::filesystem::path& path,
                     std::span<const std::pair<std::string, Tensor>> tensors);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::filesystem::path& path);

}  // namespace kromhc
