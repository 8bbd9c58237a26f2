#include "magnet/optim.hpp"

#include <cmath>

namespace magnet {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  slots_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const size_t n = static_cast<size_t>(params_[i].numel());
    slots_[i].m.assign(n, 0.0);
    slots_[i].v.assign(n, 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor& param = params_[p];
    const std::vector<double>& g = param.grad();
    if (g.size() != param.values().size()) {
      throw Error("adamw: grad shape mismatch for parameter of shape " +
                  shape_str(param.shape()));
    }
    auto& m = slots_[p].m;
    auto& v = slots_[p].v;
    auto& w = param.values();
    for (size_t i = 0; i < w.size(); ++i) {
      if (cfg_.weight_decay != 0.0) w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() { zero_grads(params_); }

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw Error("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad()) g *= scale;
    }
  }
  return norm;
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace magnet
