// SPDX-License-Identifier: Apache-2.0
#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace rexmoe {

GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  std::span<const GradProbe> probes, double h, double floor) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check: step h must be positive");
  for (const auto& p : probes) {
    if (!p.tensor.requires_grad())
      throw ConfigError("finite_diff_check: probed tensor does not require grad");
    if (p.index < 0 || p.index >= p.tensor.numel())
      throw OutOfRangeError("finite_diff_check: probe index out of range");
  }
  for (const auto& p : probes) {
    Tensor t = p.tensor;
    t.clear_grad();
  }

  GradCheckReport report;
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = f();
    }
    tape.backward(loss);
  }
  report.analytic.reserve(probes.size());
  for (const auto& p : probes)
    report.analytic.push_back(p.tensor.has_grad() ? p.tensor.grad()[p.index] : 0.0);

  // Perturbed evaluations run with no active tape.
  report.numeric.reserve(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    Tensor t = probes[i].tensor;
    double& slot = t.data()[probes[i].index];
    const double saved = slot;
    slot = saved + h;
    const double up = f().item();
    slot = saved - h;
    const double down = f().item();
    slot = saved;
    const double numeric = (up - down) / (2.0 * h);
    report.numeric.push_back(numeric);

    const double a = report.analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = denom == 0.0 ? 0.0 : std::abs(a - numeric) / denom;
    if (i == 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_probe = i;
    }
  }
  return report;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& f, const Tensor& x, double h,
                                  double floor) {
  std::vector<GradProbe> probes;
  probes.reserve(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) probes.push_back({x, i});
  return finite_diff_check(f, probes, h, floor);
}

}  // namespace rexmoe
