#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "kromhc/error.hpp"
#include "kromhc/model.hpp"

namespace kromhc {

double bpb(double ce_loss, std::uint64_t total_tokens, std::uint64_t total_bytes) {
  if (total_bytes == 0) throw UsageError("bpb: byte count must be positive");
  return ce_loss / std::log(2.0) * static_cast<double>(total_tokens) /
         static_cast<double>(total_bytes);
}

SyntheticCorpus::SyntheticCorpus(std::size_t vocab_size, std::uint64_t seed)
    : SyntheticCorpus(vocab_size, seed, Options{}) {}

SyntheticCorpus::SyntheticCorpus(std::size_t vocab_size, std::uint64_t seed, Options options)
    : vocab_(vocab_size) {
  if (vocab_size < 2) throw ConfigError("synthetic corpus needs vocab_size >= 2");
  if (options.patterns == 0 || options.pattern_len == 0 || options.length == 0) {
    throw ConfigError("synthetic corpus options must be positive");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> token(0, static_cast<int>(vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> pick(0, options.patterns - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<int>> patterns(options.patterns);
  for (auto& p : patterns) {
    p.resize(options.pattern_len);
    for (auto& t : p) t = token(rng);
  }
  tokens_.reserve(options.length);
  while (tokens_.size() < options.length) {
    for (int t : patterns[pick(rng)]) {
      if (tokens_.size() == options.length) break;
      tokens_.push_back(unit(rng) < options.noise ? token(rng) : t);
    }
  }
}

TokenBatch SyntheticCorpus::batch(std::size_t step, std::size_t batch_size, std::size_t seq) const {
  const std::size_t window = seq + 1;
  if (window > tokens_.size()) {
    throw DataError("corpus of " + std::to_string(tokens_.size()) + " tokens is shorter than a window of " +
                    std::to_string(window));
  }
  const std::size_t windows = tokens_.size() / window;
  TokenBatch out{batch_size, seq, {}};
  out.tokens.reserve(batch_size * window);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t start = ((step * batch_size + b) % windows) * window;
    out.tokens.insert(out.tokens.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(start),
                      tokens_.begin() + static_cast<std::ptrdiff_t>(start + window));
  }
  return out;
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto g = params_[i].grad();
    if (g.empty()) continue;
    auto w = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      w[j] -= lr * (update + weight_decay_ * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double learning_rate_at(const RunConfig& cfg, std::size_t step) {
  const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
  if (progress < 0.6) return cfg.learning_rate;
  return cfg.learning_rate * (1.0 - progress) / 0.4;
}

TrainResult train_loop(Model& model, const SyntheticCorpus& corpus, const RunConfig& cfg) {
  cfg.validate();
  if (corpus.vocab_size() != model.config().vocab_size) {
    throw ConfigError("corpus vocabulary " + std::to_string(corpus.vocab_size()) +
                      " differs from the model's " + std::to_string(model.config().vocab_size));
  }
  const auto params = model.parameters();
  AdamW opt(params, 0.8, 0.95, 1e-10, cfg.weight_decay);
  TrainResult result;
  const std::string scheme(scheme_name(cfg.scheme));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const TokenBatch batch = corpus.batch(step, cfg.batch_size, cfg.seq_len);
    opt.zero_grad();
    double loss = 0.0;
    {
      Tape tape;
      Tensor l;
      try {
        l = forward_loss(model, batch);
      } catch (const NumericError& e) {
        throw NumericError(fmt::format("step {} (scheme {}): {}", step + 1, scheme, e.what()));
      }
      loss = l.item();
      if (!std::isfinite(loss)) {
        throw NumericError(fmt::format("non-finite loss at step {} (scheme {})", step + 1, scheme));
      }
      tape.backward(l);
    }
    double sq = 0.0;
    for (const auto& p : params) {
      for (double g : p.grad()) sq += g * g;
    }
    const double grad_norm = std::sqrt(sq);
    if (!std::isfinite(grad_norm)) {
      throw NumericError(fmt::format("non-finite gradient at step {} (scheme {})", step + 1, scheme));
    }
    opt.step(learning_rate_at(cfg, step));
    const std::uint64_t tokens = batch.batch * batch.seq;
    double wall = 0.0;
    if (cfg.record_wall_ms) {
      wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    result.metrics.push_back({step + 1, loss, bpb(loss, tokens, corpus.bytes_for(tokens)), grad_norm, wall});
  }
  if (!cfg.output_dir.empty()) {
    const std::filesystem::path dir(cfg.output_dir);
    std::filesystem::create_directories(dir);
    result.metrics_path = dir / "metrics.csv";
    std::ofstream os(result.metrics_path, std::ios::binary);
    if (!os) throw DataError("cannot write " + result.metrics_path.string());
    write_metrics_csv(os, result.metrics);
    result.checkpoint_path = dir / "checkpoint.bin";
    save_checkpoint(result.checkpoint_path, model.named_parameters());
  }
  return result;
}

void write_metrics_csv(std::ostream& os, std::span<const TrainMetrics> rows) {
  os << "step,ce_loss,bpb,grad_norm,wall_ms\n";
  for (const auto& r : rows) {
    os << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.step, r.ce_loss, r.bpb, r.grad_norm,
                      r.wall_ms);
  }
}

namespace {

constexpr const char* kCheckpointMagic = "kromhc-checkpoint v1";

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     std::span<const std::pair<std::string, Tensor>> tensors) {
  std::string header = std::string(kCheckpointMagic) + "\n";
  std::string payload;
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \n") != std::string::npos) {
      throw UsageError("checkpoint tensor name '" + name + "' must be non-empty without spaces");
    }
    header += fmt::format("tensor {} {} {}", name, payload.size() / 8, t.rank());
    for (auto e : t.shape()) header += fmt::format(" {}", e);
    header += "\n";
    for (double v : t.data()) put_f64(payload, v);
  }
  header += "end\n";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os << header << payload;
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) {
    throw DataError(path.string() + " is not a checkpoint");
  }
  struct Entry {
    std::string name;
    std::size_t offset;
    Shape shape;
  };
  std::vector<Entry> entries;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string tag;
    Entry e;
    std::size_t rank = 0;
    if (!(ls >> tag >> e.name >> e.offset >> rank) || tag != "tensor") {
      throw DataError("malformed checkpoint manifest line: " + line);
    }
    e.shape.resize(rank);
    for (auto& d : e.shape) {
      if (!(ls >> d)) throw DataError("malformed checkpoint manifest line: " + line);
    }
    entries.push_back(std::move(e));
  }
  if (!ended) throw DataError("checkpoint manifest of " + path.string() + " is truncated");
  const std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& e : entries) {
    const std::size_t count = shape_size(e.shape);
    if ((e.offset + count) * 8 > payload.size()) {
      throw DataError("checkpoint tensor '" + e.name + "' extends past the end of the file");
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = get_f64(bytes + (e.offset + i) * 8);
    out.emplace_back(e.name, Tensor(e.shape, std::move(data)));
  }
  return out;
}

}  // namespace kromhc
