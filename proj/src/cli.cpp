#include "kromhc/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "kromhc/analysis.hpp"
#include "kromhc/config.hpp"
#include "kromhc/error.hpp"
#include "kromhc/model.hpp"

namespace kromhc {

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out, seed, scheme, n, factorization, depth, width, sk_iters, shared_alpha, steps;
};

void add_common(CLI::App* app, CommonArgs& a) {
  app->add_option("--config", a.config_path, "key = value configuration file");
  app->add_option("--set", a.sets, "override a configuration key (key=value), repeatable");
  app->add_option("--out", a.out, "output directory");
  app->add_option("--seed", a.seed, "random seed (falls back to KROMHC_SEED)");
  app->add_option("--scheme", a.scheme, "residual, hc, mhc, mhclite, kromhc or all");
  app->add_option("--n", a.n, "number of residual streams");
  app->add_option("--factorization", a.factorization, "comma-separated factors of n");
  app->add_option("--D", a.depth, "transformer blocks");
  app->add_option("--C", a.width, "hidden width");
  app->add_option("--sk-iters", a.sk_iters, "Sinkhorn-Knopp iterations for mhc");
  app->add_option("--shared-alpha", a.shared_alpha, "share alpha_res across KromHC factors");
  app->add_option("--steps", a.steps, "training steps");
}

struct Resolved {
  RunConfig cfg;
  std::vector<Scheme> schemes;  // the --scheme selection; several for "all"
};

Resolved resolve(const CommonArgs& a, std::span<const Scheme> all_schemes, std::ostream& err) {
  RunConfig base;
  if (const char* env = std::getenv("KROMHC_SEED"); env != nullptr && *env != '\0') {
    base = parse_config(std::string("seed = ") + env, {}, base).config;
  }
  std::vector<std::string> overrides = a.sets;
  auto flag = [&](std::string_view key, const std::string& value) {
    if (!value.empty()) overrides.push_back(std::string(key) + "=" + value);
  };
  const bool all = a.scheme == "all";
  if (!all) flag("scheme", a.scheme);
  flag("output_dir", a.out);
  flag("seed", a.seed);
  flag("n", a.n);
  flag("factorization", a.factorization);
  flag("D", a.depth);
  flag("C", a.width);
  flag("sk_iters", a.sk_iters);
  flag("shared_alpha", a.shared_alpha);
  flag("steps", a.steps);

  RunConfig probe = base;
  if (all) {
    // Validate against a hyper scheme; each selected scheme is checked on its own below.
    probe.scheme = Scheme::kKromHC;
  }
  LoadedConfig loaded = a.config_path.empty() ? parse_config("", overrides, probe)
                                              : load_config(a.config_path, overrides, probe);
  for (const auto& w : loaded.warnings) err << "warning: " << w << "\n";

  Resolved r{loaded.config, {}};
  if (all) {
    for (auto s : all_schemes) {
      if (s == Scheme::kMHCLite && r.cfg.n > kMaxPermutationSize) {
        err << "note: skipping mhclite, its permutation basis needs n <= " << kMaxPermutationSize << "\n";
        continue;
      }
      r.schemes.push_back(s);
    }
  } else {
    r.schemes.push_back(r.cfg.scheme);
  }
  return r;
}

std::filesystem::path prepare_output(const RunConfig& cfg, const std::string& file) {
  const std::filesystem::path dir(cfg.output_dir.empty() ? "." : cfg.output_dir);
  std::filesystem::create_directories(dir);
  return dir / file;
}

template <typename Writer>
void write_csv(const std::filesystem::path& path, Writer&& writer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  writer(os);
  if (!os) throw DataError("failed writing " + path.string());
}

int cmd_train(const CommonArgs& a, std::ostream& out, std::ostream& err) {
  const Resolved r = resolve(a, {}, err);
  const RunConfig& cfg = r.cfg;
  Model model = build_model(cfg);
  const SyntheticCorpus corpus(cfg.vocab_size, cfg.seed);
  const TrainResult result = train_loop(model, corpus, cfg);
  const auto& first = result.metrics.front();
  const auto& last = result.metrics.back();
  out << fmt::format("scheme={} steps={} initial_loss={:.17g} final_loss={:.17g} final_bpb={:.17g}\n",
                     scheme_name(cfg.scheme), last.step, first.ce_loss, last.ce_loss, last.bpb);
  out << "metrics: " << result.metrics_path.string() << "\n";
  out << "checkpoint: " << result.checkpoint_path.string() << "\n";
  return kExitOk;
}

int cmd_param_count(const CommonArgs& a, std::ostream& out, std::ostream& err) {
  static constexpr Scheme kAll[] = {Scheme::kResidual, Scheme::kHC, Scheme::kMHC, Scheme::kMHCLite,
                                    Scheme::kKromHC};
  const Resolved r = resolve(a, kAll, err);
  const FactorSpec spec = r.cfg.factor_spec();
  std::vector<ParamReport> rows;
  for (auto s : r.schemes) {
    rows.push_back(param_report(s, r.cfg.n, r.cfg.width, r.cfg.depth, spec, r.cfg.shared_alpha));
  }
  const auto path = prepare_output(r.cfg, "params.csv");
  write_csv(path, [&](std::ostream& os) { write_params_csv(os, rows); });
  out << fmt::format("{:<10} {:>4} {:>6} {:>4} {:>12} {:>12} {:>10}\n", "scheme", "n", "C", "D",
                     "per_layer", "total", "delta_K");
  for (const auto& row : rows) {
    out << fmt::format("{:<10} {:>4} {:>6} {:>4} {:>12} {:>12} {:>10}\n", scheme_name(row.scheme),
                       row.n, row.width, row.depth, row.per_layer, row.total_delta, row.reported_k);
  }
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

bool exact_ds(Scheme s) { return s == Scheme::kMHCLite || s == Scheme::kKromHC; }

int cmd_ds_scan(const CommonArgs& a, std::size_t layers, std::size_t seed_count, std::ostream& out,
                std::ostream& err) {
  static constexpr Scheme kAll[] = {Scheme::kMHC, Scheme::kMHCLite, Scheme::kKromHC};
  const Resolved r = resolve(a, kAll, err);
  if (layers == 0 || seed_count == 0) throw UsageError("ds-scan needs --layers >= 1 and --seeds >= 1");
  const FactorSpec spec = r.cfg.factor_spec();
  std::vector<std::uint64_t> seeds(seed_count);
  for (std::size_t i = 0; i < seed_count; ++i) seeds[i] = r.cfg.seed + i;
  StabilityOptions options;
  options.sk_iters = r.cfg.sk_iters;
  options.shared_alpha = r.cfg.shared_alpha;

  std::vector<DsScanRow> rows;
  int status = kExitOk;
  for (auto s : r.schemes) {
    if (s == Scheme::kResidual) throw UsageError("ds-scan: residual has no residual mixing matrix");
    const auto scan = stability_scan(s, spec, r.cfg.width, layers, seeds, options);
    double worst = 0.0;
    for (const auto& row : scan) worst = std::max({worst, row.col_mae, row.row_mae});
    out << fmt::format("scheme={} layers={} seeds={} final_col_mae={:.17g} max_mae={:.17g}\n",
                       scheme_name(s), layers, seed_count, scan.back().col_mae, worst);
    if (exact_ds(s) && !(worst < 1e-10)) {
      err << fmt::format("error: {} residual product lost double stochasticity (mae {:.3g})\n",
                         scheme_name(s), worst);
      status = kExitNumeric;
    }
    rows.insert(rows.end(), scan.begin(), scan.end());
  }
  const auto path = prepare_output(r.cfg, "ds_scan.csv");
  write_csv(path, [&](std::ostream& os) { write_ds_scan_csv(os, rows); });
  out << "wrote " << path.string() << "\n";
  return status;
}

int cmd_gradcheck(const CommonArgs& a, std::ostream& out, std::ostream& err) {
  static constexpr Scheme kAll[] = {Scheme::kHC, Scheme::kMHC, Scheme::kMHCLite, Scheme::kKromHC};
  const Resolved r = resolve(a, kAll, err);
  const FactorSpec spec = r.cfg.factor_spec();
  LayerGradCheckOptions options;
  options.width = r.cfg.width;
  options.seed = r.cfg.seed;
  options.sk_iters = r.cfg.sk_iters;
  options.shared_alpha = r.cfg.shared_alpha;
  int status = kExitOk;
  for (auto s : r.schemes) {
    if (s == Scheme::kResidual) throw UsageError("gradcheck: residual has no hyper-connection layer");
    const GradCheckResult g = layer_grad_check(s, spec, options);
    const double tol = grad_check_tolerance(s);
    const bool ok = g.max_rel_error < tol;
    out << fmt::format("scheme={} n={} C={} coordinates={} max_rel_error={:.17g} tolerance={:g} status={}\n",
                       scheme_name(s), spec.n(), options.width, g.coordinates, g.max_rel_error, tol,
                       ok ? "pass" : "fail");
    if (!ok) status = kExitNumeric;
  }
  return status;
}

int cmd_scaling(const CommonArgs& a, const std::string& n_values_arg, std::ostream& out,
                std::ostream& err) {
  CommonArgs b = a;
  if (b.width.empty()) b.width = "512";
  static constexpr Scheme kAll[] = {Scheme::kMHC, Scheme::kMHCLite, Scheme::kKromHC};
  const Resolved r = resolve(b, kAll, err);
  std::vector<std::size_t> n_values;
  std::stringstream ss(n_values_arg);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t pos = 0;
    std::size_t v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) throw ConfigError("scaling: bad --n-values entry '" + item + "'");
    n_values.push_back(v);
  }
  for (auto n : n_values) {
    if (n < 2 || (n & (n - 1)) != 0) throw ConfigError("scaling: n values must be powers of two >= 2");
  }
  const auto rows = scaling_report(r.schemes, n_values, r.cfg.width);
  const auto path = prepare_output(r.cfg, "scaling.csv");
  write_csv(path, [&](std::ostream& os) { write_scaling_csv(os, rows); });
  for (const auto& row : rows) {
    out << fmt::format("scheme={} n={} C={} factorization={} per_layer={}\n", scheme_name(row.scheme),
                       row.n, row.width, format_factors(row.factors), row.per_layer);
  }
  out << "wrote " << path.string() << "\n";
  if (!scaling_order_holds(rows)) {
    err << "error: expected mhclite > mhc > kromhc for every n >= 8\n";
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Residual-stream hyper-connection experiments", "kromhc"};
  app.require_subcommand(1);
  CommonArgs train_args, param_args, scan_args, grad_args, scaling_args;
  std::size_t layers = 24, seeds = 10;
  std::string n_values = "2,4,8,16,32";

  auto* train = app.add_subcommand("train", "train the toy language model, writing metrics.csv and checkpoint.bin");
  add_common(train, train_args);
  auto* param = app.add_subcommand("param-count", "per-layer and total hyper-connection parameters (params.csv)");
  add_common(param, param_args);
  auto* scan = app.add_subcommand("ds-scan", "double stochasticity of unrolled residual products (ds_scan.csv)");
  add_common(scan, scan_args);
  scan->add_option("--layers", layers, "number of stacked layers");
  scan->add_option("--seeds", seeds, "number of seeds averaged, starting at --seed");
  auto* grad = app.add_subcommand("gradcheck", "central-difference check of full layer gradients");
  add_common(grad, grad_args);
  auto* scaling = app.add_subcommand("scaling", "parameter growth with n at fixed C, default 512 (scaling.csv)");
  add_common(scaling, scaling_args);
  scaling->add_option("--n-values", n_values, "comma-separated powers of two");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_args, out, err);
    if (*param) return cmd_param_count(param_args, out, err);
    if (*scan) return cmd_ds_scan(scan_args, layers, seeds, out, err);
    if (*grad) return cmd_gradcheck(grad_args, out, err);
    if (*scaling) return cmd_scaling(scaling_args, n_values, out, err);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace kromhc
