#include "kromhc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kromhc/error.hpp"

namespace kromhc {

namespace {

double evaluate(const std::function<Tensor()>& loss) {
  Tape tape;
  const Tensor value = loss();
  const double v = value.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                           double h) {
  std::vector<bool> saved(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    saved[p] = params[p].requires_grad();
    params[p].set_requires_grad(true);
    params[p].zero_grad();
  }

  std::vector<std::vector<double>> analytic(params.size());
  {
    Tape tape;
    const Tensor value = loss();
    if (!std::isfinite(value.item())) {
      throw NumericError("grad_check: loss evaluated to a non-finite value");
    }
    tape.backward(value);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto g = params[p].grad();
      analytic[p] = g.empty() ? std::vector<double>(params[p].size(), 0.0)
                              : std::vector<double>(g.begin(), g.end());
    }
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto x = params[p].mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double up = evaluate(loss);
      x[i] = orig - h;
      const double down = evaluate(loss);
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_index = i;
      }
    }
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    params[p].zero_grad();
    params[p].set_requires_grad(saved[p]);
  }
  return result;
}

}  // namespace kromhc
