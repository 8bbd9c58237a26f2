#pragma once

#include <functional>
#include <string>
#include <vector>

#include "magnet/rng.hpp"
#include "magnet/tensor.hpp"

namespace magnet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;

  bool ok(double tol) const { return max_rel_err < tol; }
  std::string describe() const;
};

// Compares the tape gradient of a scalar-valued function against central
// differences: max over coordinates of |analytic - numeric| / max(1, |numeric|).
// The function must be deterministic (dropout disabled, no stat updates).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double h = 1e-5, double tol = 1e-4);

// Same comparison for a closure over several parameter tensors, perturbing
// them in place. When max_coords > 0 only that many coordinates per tensor
// are probed (chosen with coord_rng), which keeps whole-model checks cheap.
GradCheckReport grad_check_params(const std::function<Tensor()>& f,
                                  std::vector<Tensor> params, double h = 1e-5,
                                  int64_t max_coords = -1, Rng* coord_rng = nullptr);

}  // namespace magnet
