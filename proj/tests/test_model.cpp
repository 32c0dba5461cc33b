#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

#include "kromhc/analysis.hpp"
#include "kromhc/error.hpp"
#include "kromhc/model.hpp"

namespace kromhc {
namespace {

namespace fs = std::filesystem;

RunConfig small_config(Scheme scheme) {
  RunConfig cfg;
  cfg.scheme = scheme;
  cfg.n = scheme == Scheme::kResidual ? 1 : 4;
  cfg.depth = 2;
  cfg.width = 32;
  cfg.vocab_size = 16;
  cfg.seq_len = 8;
  cfg.batch_size = 2;
  cfg.steps = 5;
  cfg.output_dir = "";
  return cfg;
}

fs::path scratch_dir(const std::string& tag) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() /
               ("kromhc_" + std::string(info->name()) + "_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

const Scheme kAllSchemes[] = {Scheme::kResidual, Scheme::kHC, Scheme::kMHC, Scheme::kMHCLite,
                              Scheme::kKromHC};

TEST(RunConfigTest, Validation) {
  RunConfig cfg = small_config(Scheme::kResidual);
  cfg.n = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = small_config(Scheme::kKromHC);
  cfg.factorization = {2, 3};
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = small_config(Scheme::kMHCLite);
  cfg.n = 16;
  EXPECT_FALSE(cfg.violations().empty());

  cfg = small_config(Scheme::kKromHC);
  cfg.width = 30;
  cfg.heads = 4;
  cfg.steps = 0;
  cfg.learning_rate = -1.0;
  EXPECT_EQ(cfg.violations().size(), 3u);

  cfg = small_config(Scheme::kKromHC);
  cfg.n = 6;
  EXPECT_EQ(cfg.factor_spec().factors(), (std::vector<std::size_t>{2, 3}));
  cfg.n = 16;
  EXPECT_EQ(cfg.factor_spec().factors(), (std::vector<std::size_t>{2, 2, 2, 2}));
  cfg.width = 512;
  EXPECT_EQ(cfg.resolved_heads(), 8u);
}

TEST(ModelTest, HyperParameterCountMatchesClosedForm) {
  for (Scheme s : {Scheme::kHC, Scheme::kMHC, Scheme::kMHCLite, Scheme::kKromHC}) {
    const Model m = build_model(small_config(s));
    EXPECT_EQ(m.hyper_parameter_count(), param_count(s, 4, 32, FactorSpec(4, {2, 2})) * 2 * 2)
        << scheme_name(s);
  }
  EXPECT_EQ(build_model(small_config(Scheme::kResidual)).hyper_parameter_count(), 0u);

  RunConfig cfg = small_config(Scheme::kKromHC);
  cfg.depth = 6;
  cfg.width = 384;
  EXPECT_EQ(build_model(cfg).hyper_parameter_count(), 239796u);
}

TEST(ModelTest, NamedParametersAreUniqueAndComplete) {
  const Model m = build_model(small_config(Scheme::kKromHC));
  const auto named = m.named_parameters();
  std::vector<std::string> names;
  std::size_t total = 0;
  for (const auto& [name, t] : named) {
    names.push_back(name);
    total += t.size();
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
  EXPECT_EQ(total, m.parameter_count());
  EXPECT_EQ(named.front().first, "embed");
  EXPECT_EQ(named.back().first, "lm_head");
}

TEST(ModelTest, InitialLossIsLogVocab) {
  for (Scheme s : kAllSchemes) {
    const RunConfig cfg = small_config(s);
    const Model m = build_model(cfg);
    const SyntheticCorpus corpus(cfg.vocab_size, 3);
    const double loss = forward_loss(m, corpus.batch(0, 2, 8)).item();
    EXPECT_NEAR(loss, std::log(16.0), 1e-12) << scheme_name(s);
  }
}

TEST(ModelTest, InitMapsNearIdentity) {
  const RunConfig cfg = small_config(Scheme::kKromHC);
  const Model m = build_model(cfg);
  const SyntheticCorpus corpus(cfg.vocab_size, 3);
  const auto trace = trace_layers(m, corpus.batch(0, 2, 8));
  ASSERT_EQ(trace.size(), 4u);
  for (const auto& layer : trace) {
    const Tensor& h = layer.maps.h_res;
    ASSERT_EQ(h.shape(), (Shape{16, 4, 4}));
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(h(t, i, j), i == j ? 1.0 : 0.0, 1e-3);
  }
  // One factor at init: softmax over [0, -8].
  const double a = 1.0 / (1.0 + std::exp(-8.0));
  EXPECT_NEAR(a, 0.999665, 1e-6);
  EXPECT_NEAR(trace[0].maps.h_res(0, 0, 0), a * a, 1e-12);
}

TEST(ModelTest, ExactSchemesPreserveStreamMeanAfterTraining) {
  for (Scheme s : {Scheme::kKromHC, Scheme::kMHCLite}) {
    RunConfig cfg = small_config(s);
    cfg.steps = 10;
    cfg.learning_rate = 3e-2;
    Model m = build_model(cfg);
    const SyntheticCorpus corpus(cfg.vocab_size, 5);
    train_loop(m, corpus, cfg);
    const auto trace = trace_layers(m, corpus.batch(3, 2, 8));
    for (const auto& layer : trace) {
      const Tensor& h = layer.maps.h_res;
      const std::size_t tokens = h.extent(0);
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < 4; ++j) {
          double col = 0.0;
          for (std::size_t i = 0; i < 4; ++i) col += h(t, i, j);
          EXPECT_NEAR(col, 1.0, 1e-12) << scheme_name(s);
        }
      }
    }
  }
}

TEST(ModelTest, OverfitsConstantSequence) {
  RunConfig cfg = small_config(Scheme::kKromHC);
  Model m = build_model(cfg);
  const TokenBatch batch{2, 8, std::vector<int>(18, 5)};
  AdamW opt(m.parameters());
  double loss = 0.0;
  for (int step = 0; step < 50; ++step) {
    opt.zero_grad();
    Tape tape;
    const Tensor l = forward_loss(m, batch);
    loss = l.item();
    tape.backward(l);
    opt.step(1e-2);
  }
  EXPECT_LT(loss, 0.1 * std::log(16.0));
}

TEST(ModelTest, RejectsBadBatches) {
  const Model m = build_model(small_config(Scheme::kKromHC));
  EXPECT_THROW(forward_loss(m, TokenBatch{1, 4, std::vector<int>(4, 0)}), DataError);
  EXPECT_THROW(forward_loss(m, TokenBatch{1, 9, std::vector<int>(10, 0)}), DataError);
  EXPECT_THROW(forward_loss(m, TokenBatch{1, 2, {0, 16, 1}}), DataError);
  EXPECT_THROW(forward_loss(m, TokenBatch{1, 2, {0, -1, 1}}), DataError);
}

TEST(TrainTest, DeterministicMetricsAndCheckpoint) {
  RunConfig cfg = small_config(Scheme::kMHC);
  std::string csv[2], ckpt[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = scratch_dir(std::to_string(run));
    cfg.output_dir = dir.string();
    Model m = build_model(cfg);
    const auto result = train_loop(m, SyntheticCorpus(cfg.vocab_size, cfg.seed), cfg);
    EXPECT_EQ(result.metrics.size(), cfg.steps);
    csv[run] = slurp(result.metrics_path);
    ckpt[run] = slurp(result.checkpoint_path);
    fs::remove_all(dir);
  }
  EXPECT_FALSE(csv[0].empty());
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_EQ(ckpt[0], ckpt[1]);
  EXPECT_EQ(csv[0].substr(0, csv[0].find('\n')), "step,ce_loss,bpb,grad_norm,wall_ms");
}

TEST(TrainTest, CheckpointRoundTripIsBitExact) {
  const RunConfig cfg = small_config(Scheme::kKromHC);
  Model trained = build_model(cfg);
  const SyntheticCorpus corpus(cfg.vocab_size, 1);
  train_loop(trained, corpus, cfg);

  const fs::path dir = scratch_dir("ckpt");
  fs::create_directories(dir);
  save_checkpoint(dir / "c.bin", trained.named_parameters());
  const auto loaded = load_checkpoint(dir / "c.bin");
  const auto original = trained.named_parameters();
  ASSERT_EQ(loaded.size(), original.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].first, original[i].first);
    ASSERT_EQ(loaded[i].second.shape(), original[i].second.shape());
    for (std::size_t j = 0; j < loaded[i].second.size(); ++j) {
      EXPECT_EQ(loaded[i].second[j], original[i].second[j]);
    }
  }
  Model restored = build_model(cfg);
  restored.load_state(loaded);
  const TokenBatch batch = corpus.batch(7, 2, 8);
  EXPECT_EQ(forward_loss(restored, batch).item(), forward_loss(trained, batch).item());

  std::ofstream(dir / "bad.bin") << "not a checkpoint\n";
  EXPECT_THROW(load_checkpoint(dir / "bad.bin"), DataError);
  auto wrong = loaded;
  wrong.pop_back();
  EXPECT_THROW(restored.load_state(wrong), Error);
  fs::remove_all(dir);
}

TEST(TrainTest, NonFiniteLossRaisesNumericError) {
  const RunConfig cfg = small_config(Scheme::kHC);
  Model m = build_model(cfg);
  m.position.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_loop(m, SyntheticCorpus(cfg.vocab_size, 0), cfg);
    ADD_FAILURE() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("hc"), std::string::npos) << msg;
  }
}

TEST(TrainTest, LearningRateSchedule) {
  RunConfig cfg;
  cfg.steps = 100;
  cfg.learning_rate = 1.0;
  EXPECT_EQ(learning_rate_at(cfg, 0), 1.0);
  EXPECT_EQ(learning_rate_at(cfg, 59), 1.0);
  EXPECT_NEAR(learning_rate_at(cfg, 60), 1.0, 1e-12);
  EXPECT_NEAR(learning_rate_at(cfg, 80), 0.5, 1e-12);
  EXPECT_NEAR(learning_rate_at(cfg, 99), 0.025, 1e-12);
}

TEST(TrainTest, GradientNormsComparableToResidual) {
  auto median_norm = [](Scheme s) {
    RunConfig cfg = small_config(s);
    cfg.steps = 20;
    Model m = build_model(cfg);
    auto metrics = train_loop(m, SyntheticCorpus(cfg.vocab_size, 11), cfg).metrics;
    std::vector<double> norms;
    for (const auto& r : metrics) {
      EXPECT_TRUE(std::isfinite(r.grad_norm));
      norms.push_back(r.grad_norm);
    }
    std::nth_element(norms.begin(), norms.begin() + norms.size() / 2, norms.end());
    return norms[norms.size() / 2];
  };
  const double base = median_norm(Scheme::kResidual);
  for (Scheme s : {Scheme::kMHC, Scheme::kMHCLite, Scheme::kKromHC}) {
    const double r = median_norm(s) / base;
    EXPECT_LT(r, 5.0) << scheme_name(s);
    EXPECT_GT(r, 0.2) << scheme_name(s);
  }
}

TEST(BpbTest, Formula) {
  EXPECT_EQ(bpb(std::log(2.0), 1000, 1000), 1.0);
  EXPECT_EQ(bpb(0.0, 123, 456), 0.0);
  EXPECT_NEAR(bpb(2.971, 2016, 10000), 2.971 / std::log(2.0) * 0.2016, 1e-15);
  EXPECT_NEAR(bpb(2.971, 2016, 10000), 0.864, 1e-3);
  EXPECT_THROW(bpb(1.0, 10, 0), UsageError);
}

TEST(CorpusTest, DeterministicWindows) {
  const SyntheticCorpus a(16, 4), b(16, 4), c(16, 5);
  EXPECT_TRUE(std::equal(a.tokens().begin(), a.tokens().end(), b.tokens().begin(), b.tokens().end()));
  EXPECT_FALSE(std::equal(a.tokens().begin(), a.tokens().end(), c.tokens().begin(), c.tokens().end()));
  for (int t : a.tokens()) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 16);
  }
  const TokenBatch batch = a.batch(3, 4, 8);
  EXPECT_EQ(batch.tokens.size(), 4u * 9u);
  EXPECT_EQ(batch.tokens, b.batch(3, 4, 8).tokens);
  EXPECT_NE(batch.tokens, a.batch(4, 4, 8).tokens);
  EXPECT_THROW(SyntheticCorpus(1, 0), ConfigError);
}

}  // namespace
}  // namespace kromhc
