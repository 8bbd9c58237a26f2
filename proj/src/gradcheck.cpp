#include "magnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace magnet {

std::string GradCheckReport::describe() const {
  std::ostringstream os;
  os << "max rel err " << max_rel_err;
  if (worst_index >= 0) {
    os << " at coordinate " << worst_index << " (analytic " << analytic_at_worst
       << ", numeric " << numeric_at_worst << ")";
  }
  return os.str();
}

namespace {

void update(GradCheckReport& rep, int64_t idx, double analytic, double numeric) {
  const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
  if (err > rep.max_rel_err) {
    rep.max_rel_err = err;
    rep.worst_index = idx;
    rep.analytic_at_worst = analytic;
    rep.numeric_at_worst = numeric;
  }
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double h, double /*tol*/) {
  const bool was_rg = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();

  std::vector<double> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f(x);
    if (loss.numel() != 1) throw Error("grad_check: f must return a scalar");
    tape.backward(loss);
    analytic = x.grad();
  }
  x.set_requires_grad(was_rg);

  GradCheckReport rep;
  auto& vals = x.values();
  for (size_t i = 0; i < vals.size(); ++i) {
    const double saved = vals[i];
    vals[i] = saved + h;
    const double fp = f(x).item();
    vals[i] = saved - h;
    const double fm = f(x).item();
    vals[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    update(rep, static_cast<int64_t>(i), analytic[i], numeric);
  }
  return rep;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& f,
                                  std::vector<Tensor> params, double h,
                                  int64_t max_coords, Rng* coord_rng) {
  std::vector<std::vector<double>> analytic(params.size());
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f();
    if (loss.numel() != 1) throw Error("grad_check_params: f must return a scalar");
    tape.backward(loss);
  }
  for (size_t p = 0; p < params.size(); ++p) analytic[p] = params[p].grad();

  GradCheckReport rep;
  int64_t flat_base = 0;
  for (size_t p = 0; p < params.size(); ++p) {
    auto& vals = params[p].values();
    std::vector<int64_t> coords;
    const int64_t n = static_cast<int64_t>(vals.size());
    if (max_coords <= 0 || n <= max_coords) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      Rng local = coord_rng ? coord_rng->fork(static_cast<uint64_t>(p)) : Rng(p + 1);
      for (int64_t i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<int64_t>(local.below(static_cast<uint64_t>(n))));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (int64_t i : coords) {
      const size_t ui = static_cast<size_t>(i);
      const double saved = vals[ui];
      vals[ui] = saved + h;
      const double fp = f().item();
      vals[ui] = saved - h;
      const double fm = f().item();
      vals[ui] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      update(rep, flat_base + i, analytic[p][ui], numeric);
    }
    flat_base += n;
  }
  return rep;
}

}  // namespace magnet
