#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <random>

#include "kromhc/analysis.hpp"
#include "kromhc/config.hpp"
#include "kromhc/error.hpp"
#include "kromhc/manifold.hpp"
#include "kromhc/model.hpp"
#include "kromhc/ops.hpp"

namespace py = pybind11;
using namespace kromhc;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

FactorSpec spec_for(std::size_t n, const std::vector<std::size_t>& factors) {
  return factors.empty() ? FactorSpec::prime(n) : FactorSpec(n, factors);
}

py::dict diagnostics_dict(const DSDiagnostics& d) {
  py::dict out;
  out["row_mae"] = d.row_mae;
  out["col_mae"] = d.col_mae;
  out["min_entry"] = d.min_entry;
  out["spectral_norm"] = d.spectral_norm;
  out["max_deviation"] = d.max_deviation;
  return out;
}

RunConfig config_from(const py::dict& kwargs) {
  std::vector<std::string> overrides;
  for (const auto& [key, value] : kwargs) {
    std::string text;
    if (py::isinstance<py::bool_>(value)) {
      text = value.cast<bool>() ? "true" : "false";
    } else if (py::isinstance<py::list>(value) || py::isinstance<py::tuple>(value)) {
      for (const auto& item : value) text += (text.empty() ? "" : ",") + py::str(item).cast<std::string>();
    } else {
      text = py::str(value).cast<std::string>();
    }
    overrides.push_back(key.cast<std::string>() + "=" + text);
  }
  RunConfig base;
  base.output_dir = "";
  return parse_config("", overrides, base).config;
}

}  // namespace

PYBIND11_MODULE(_kromhc, m) {
  m.doc() = "Kronecker-structured hyper-connection residual mixing";

  auto base = py::register_exception<Error>(m, "KromhcError");
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ConstraintError>(m, "ConstraintError", base.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());

  m.def("permutations", [](std::size_t size) {
    const auto basis = enumerate_permutations(size);
    Array out({basis.count(), size, size});
    double* dst = out.mutable_data();
    for (const auto& p : basis.matrices) dst = std::copy(p.data().begin(), p.data().end(), dst);
    return out;
  }, py::arg("m"));

  m.def("kron", [](const Array& a, const Array& b) { return to_array(kron(to_tensor(a), to_tensor(b))); });
  m.def("kron_chain", [](const std::vector<Array>& factors) {
    std::vector<Tensor> ts;
    for (const auto& f : factors) ts.push_back(to_tensor(f));
    return to_array(kron_chain(ts));
  }, "U_K (x) ... (x) U_1 for factors [U_1, ..., U_K]");
  m.def("sinkhorn_knopp", [](const Array& logits, std::size_t iters) {
    return to_array(sinkhorn_knopp(to_tensor(logits), iters));
  }, py::arg("logits"), py::arg("iters") = kDefaultSinkhornIters);
  m.def("bvn_combine", [](const Array& coeffs, std::size_t size) {
    return to_array(bvn_combine(to_tensor(coeffs), *shared_permutation_basis(size)));
  }, py::arg("coeffs"), py::arg("m"));
  m.def("ds_diagnostics", [](const Array& a) { return diagnostics_dict(ds_diagnostics(to_tensor(a))); });
  m.def("spectral_norm", [](const Array& a) { return spectral_norm(to_tensor(a)).value; });

  m.def("param_count", [](const std::string& scheme, std::size_t n, std::size_t width,
                          const std::vector<std::size_t>& factors, bool shared_alpha) {
    return param_count(parse_scheme(scheme), n, width, spec_for(n, factors), shared_alpha);
  }, py::arg("scheme"), py::arg("n"), py::arg("C"), py::arg("factors") = std::vector<std::size_t>{},
        py::arg("shared_alpha") = true);

  m.def("param_report", [](const std::string& scheme, std::size_t n, std::size_t width, std::size_t depth,
                           const std::vector<std::size_t>& factors) {
    const auto r = param_report(parse_scheme(scheme), n, width, depth, spec_for(n, factors));
    py::dict out;
    out["per_layer"] = r.per_layer;
    out["total"] = r.total_delta;
    out["reported_k"] = r.reported_k;
    return out;
  }, py::arg("scheme"), py::arg("n"), py::arg("C"), py::arg("D"), py::arg("factors") = std::vector<std::size_t>{});

  m.def("stability_scan", [](const std::string& scheme, std::size_t n, std::size_t width, std::size_t layers,
                             const std::vector<std::uint64_t>& seeds, const std::vector<std::size_t>& factors) {
    py::list rows;
    for (const auto& r : stability_scan(parse_scheme(scheme), spec_for(n, factors), width, layers, seeds)) {
      py::dict d;
      d["depth"] = r.depth;
      d["row_mae"] = r.row_mae;
      d["col_mae"] = r.col_mae;
      d["min_entry"] = r.min_entry;
      d["spectral_norm"] = r.spectral_norm;
      rows.append(d);
    }
    return rows;
  }, py::arg("scheme"), py::arg("n"), py::arg("C"), py::arg("layers"), py::arg("seeds"),
        py::arg("factors") = std::vector<std::size_t>{});

  m.def("layer_maps", [](const std::string& scheme, const Array& x, std::vector<std::size_t> factors,
                         std::uint64_t seed, double sigma) {
    const Tensor xt = to_tensor(x);
    if (xt.rank() != 2) throw DimensionError("layer_maps expects X of shape [n, C]");
    const FactorSpec spec = spec_for(xt.extent(0), factors);
    HyperParams p = make_hyper_params(parse_scheme(scheme), spec, xt.extent(1), true);
    std::mt19937_64 rng(seed);
    if (sigma > 0.0) perturb(p, rng, sigma);
    const LayerMaps maps = compute_maps(xt, p, spec);
    return py::make_tuple(to_array(maps.h_res), to_array(maps.h_pre), to_array(maps.h_post));
  }, py::arg("scheme"), py::arg("x"), py::arg("factors") = std::vector<std::size_t>{}, py::arg("seed") = 0,
        py::arg("sigma") = 0.0, "(H_res, H_pre, H_post) of one randomly perturbed layer");

  m.def("layer_grad_check", [](const std::string& scheme, std::size_t n, std::size_t width,
                               const std::vector<std::size_t>& factors) {
    LayerGradCheckOptions options;
    options.width = width;
    return layer_grad_check(parse_scheme(scheme), spec_for(n, factors), options).max_rel_error;
  }, py::arg("scheme"), py::arg("n") = 4, py::arg("C") = 8, py::arg("factors") = std::vector<std::size_t>{});

  m.def("bpb", &bpb, py::arg("ce_loss"), py::arg("tokens"), py::arg("bytes"));

  m.def("train", [](const py::kwargs& kwargs) {
    const RunConfig cfg = config_from(kwargs);
    Model model = build_model(cfg);
    const auto result = train_loop(model, SyntheticCorpus(cfg.vocab_size, cfg.seed), cfg);
    py::list rows;
    for (const auto& r : result.metrics) {
      py::dict d;
      d["step"] = r.step;
      d["ce_loss"] = r.ce_loss;
      d["bpb"] = r.bpb;
      d["grad_norm"] = r.grad_norm;
      rows.append(d);
    }
    return rows;
  }, "Train on the synthetic corpus; keyword arguments are configuration keys.");
}
