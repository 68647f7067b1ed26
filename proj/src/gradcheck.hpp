// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace rexmoe {

struct GradProbe {
  Tensor tensor;
  std::int64_t index = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_probe = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares tape gradients of the scalar `f()` against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h at each probe. Relative error is
/// |a - n| / max(|a|, |n|, floor); floor = 0 gives the plain relative error.
/// `f` must be deterministic and rebuild its graph from current values.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  std::span<const GradProbe> probes, double h,
                                  double floor = 0.0);

// Every coordinate of a single tensor.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f, const Tensor& x, double h,
                                  double floor = 0.0);

}  // namespace rexmoe
