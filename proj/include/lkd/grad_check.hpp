#pragma once

// Central-difference verification of tape gradients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lkd/rng.hpp"
#include "lkd/tensor.hpp"

namespace lkd {

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  // Denominator floor for the relative error, so exact zeros compare sanely.
  double scale_floor = 1e-7;
  // 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  // 2: (f(x+h) - f(x-h)) / 2h. 4: the five-point stencil, error O(h^4), which
  // allows a larger h and so less cancellation on losses of order 1-10.
  int order = 2;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

struct NamedParam {
  std::string name;
  Tensor<double>* tensor;
};

/// `f` builds a scalar on the given tape from the current parameter values.
using ScalarFn = std::function<Tensor<double>(Tape<double>&)>;

inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<NamedParam>& params,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  std::vector<bool> saved_flags;
  for (const auto& p : params) {
    saved_flags.push_back(p.tensor->requires_grad());
    p.tensor->set_requires_grad(true);
    p.tensor->clear_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> root = f(tape);
    tape.backward(root);
  }
  auto eval = [&]() {
    Tape<double> tape = Tape<double>::no_grad();
    return f(tape).item();
  };
  Rng rng = Rng::substream(opt.seed, "grad_check");
  for (const auto& p : params) {
    Tensor<double>& t = *p.tensor;
    std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_tensor == 0 || opt.max_coords_per_tensor >= t.numel()) {
      for (std::size_t i = 0; i < t.numel(); ++i) coords.push_back(i);
    } else {
      auto perm = permutation(t.numel(), rng);
      coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(opt.max_coords_per_tensor));
    }
    for (std::size_t i : coords) {
      const double original = t[i];
      auto at = [&](double offset) {
        t[i] = original + offset;
        return eval();
      };
      const double h = opt.step;
      double numeric = 0;
      if (opt.order == 4) {
        numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h);
      } else {
        numeric = (at(h) - at(-h)) / (2.0 * h);
      }
      t[i] = original;
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.scale_floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (report.coords_checked == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_tensor = p.name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].tensor->clear_grad();
    params[i].tensor->set_requires_grad(saved_flags[i]);
  }
  report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error <= opt.tolerance;
  return report;
}

/// Single-tensor form: f maps theta to a scalar.
inline GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
                                  Tensor<double>& theta, const GradCheckOptions& opt = {}) {
  return grad_check([&](Tape<double>& tape) { return f(tape, theta); }, {{"theta", &theta}}, opt);
}

}  // namespace lkd
