#pragma once

#include <vector>

#include "magnet/tensor.hpp"

namespace magnet {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay and bias-corrected moments. Only the
// tensors handed in at construction are updated; frozen tensors and buffers
// are never touched.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);

  void step();
  void zero_grad();

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

// Scales every grad by max_norm/norm when the global L2 norm over all grads
// exceeds max_norm; returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

void zero_grads(std::vector<Tensor>& params);

}  // namespace magnet
