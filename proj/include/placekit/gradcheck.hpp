#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "placekit/ops.hpp"
#include "placekit/rng.hpp"
#include "placekit/tensor.hpp"

namespace placekit {

// Central finite-difference verification of reverse-mode gradients.
//
// `f` maps the inputs to a tensor; non-scalar outputs are reduced to a
// scalar through a fixed random projection so a single backward pass
// covers them. Relative error per coordinate is
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

struct GradCheckReport {
  std::vector<double> max_rel_err;  // one entry per checked input
  double worst = 0.0;
};

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline GradCheckReport gradcheck(const GradFn& f, std::vector<Tensor> inputs,
                                 double step = 1e-5, int max_coords_per_input = 48,
                                 uint64_t projection_seed = 0x9c0ffee) {
  for (auto& t : inputs) t.set_requires_grad(true);

  std::vector<double> projection;
  auto eval_scalar = [&]() -> Tensor {
    Tensor out = f(inputs);
    if (out.numel() == 1) return out;
    if (projection.empty()) {
      Rng prng(projection_seed);
      projection.resize(out.numel());
      for (auto& w : projection) w = prng.normal();
    }
    Tensor weights = Tensor::from_data(out.shape(), projection);
    return ops::sum(ops::mul(out, weights));
  };

  // Analytic pass.
  for (auto& t : inputs) t.zero_grad();
  ad::backward(eval_scalar());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckReport report;
  report.max_rel_err.assign(inputs.size(), 0.0);
  Rng coord_rng(projection_seed ^ 0x5eedULL);
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& data = inputs[k].data();
    const size_t n = data.size();
    std::vector<size_t> coords;
    if (static_cast<int>(n) <= max_coords_per_input) {
      coords.resize(n);
      for (size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < max_coords_per_input; ++i)
        coords.push_back(coord_rng.below(n));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (size_t idx : coords) {
      const double orig = data[idx];
      double fp, fm;
      {
        NoGradScope ng;
        data[idx] = orig + step;
        fp = eval_scalar().item();
        data[idx] = orig - step;
        fm = eval_scalar().item();
        data[idx] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][idx];
      const double rel = std::abs(a - numeric) /
                         std::max(1e-8, std::abs(a) + std::abs(numeric));
      report.max_rel_err[k] = std::max(report.max_rel_err[k], rel);
    }
    report.worst = std::max(report.worst, report.max_rel_err[k]);
  }
  return report;
}

}  // namespace placekit
