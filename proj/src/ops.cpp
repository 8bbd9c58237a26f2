#include "magnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace magnet::ops {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

void check_positive_axis(int& axis, int rank, const char* what) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw Error(std::string(what) + ": axis out of range for rank " +
                std::to_string(rank));
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  Shape out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int64_t da = i >= r - ra ? a[static_cast<size_t>(i - (r - ra))] : 1;
    int64_t db = i >= r - rb ? b[static_cast<size_t>(i - (r - rb))] : 1;
    if (da != db && da != 1 && db != 1) {
      throw Error(std::string(what) + ": shapes " + shape_str(a) + " and " +
                  shape_str(b) + " are not broadcastable");
    }
    out[static_cast<size_t>(i)] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `in` aligned to the trailing dims of `out`, with 0
// where `in` broadcasts.
std::vector<int64_t> aligned_strides(const Shape& in, const Shape& out) {
  int r = static_cast<int>(out.size());
  int ri = static_cast<int>(in.size());
  std::vector<int64_t> st(static_cast<size_t>(r), 0);
  int64_t acc = 1;
  for (int i = ri - 1; i >= 0; --i) {
    int o = i + (r - ri);
    st[static_cast<size_t>(o)] = (in[static_cast<size_t>(i)] == 1) ? 0 : acc;
    acc *= in[static_cast<size_t>(i)];
  }
  for (int o = 0; o < r - ri; ++o) st[static_cast<size_t>(o)] = 0;
  return st;
}

template <class F>
void for_each_bcast2(const Shape& out, const std::vector<int64_t>& sa,
                     const std::vector<int64_t>& sb, F&& f) {
  int r = static_cast<int>(out.size());
  int64_t total = shape_numel(out);
  if (r == 0) {
    f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t ai = 0, bi = 0;
  for (int64_t oi = 0; oi < total; ++oi) {
    f(oi, ai, bi);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      ai += sa[static_cast<size_t>(d)];
      bi += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      ai -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      bi -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
    }
  }
}

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* what) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), what);
  Tensor out = Tensor::zeros(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();

  const bool same = a.shape() == b.shape() && a.shape() == out_shape;
  if (same) {
    const size_t n = ov.size();
    switch (kind) {
      case BinKind::Add: for (size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
      case BinKind::Sub: for (size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
      case BinKind::Mul: for (size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
      case BinKind::Div: for (size_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i]; break;
    }
  } else {
    auto sa = aligned_strides(a.shape(), out_shape);
    auto sb = aligned_strides(b.shape(), out_shape);
    switch (kind) {
      case BinKind::Add:
        for_each_bcast2(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
          ov[static_cast<size_t>(o)] = av[static_cast<size_t>(i)] + bv[static_cast<size_t>(j)];
        });
        break;
      case BinKind::Sub:
        for_each_bcast2(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
          ov[static_cast<size_t>(o)] = av[static_cast<size_t>(i)] - bv[static_cast<size_t>(j)];
        });
        break;
      case BinKind::Mul:
        for_each_bcast2(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
          ov[static_cast<size_t>(o)] = av[static_cast<size_t>(i)] * bv[static_cast<size_t>(j)];
        });
        break;
      case BinKind::Div:
        for_each_bcast2(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
          ov[static_cast<size_t>(o)] = av[static_cast<size_t>(i)] / bv[static_cast<size_t>(j)];
        });
        break;
    }
  }

  Tape* tape = Tape::current();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    Shape osh = out_shape;
    tape->record({a, b}, out, [ad, bd, od, osh, kind] {
      if (od->grad.empty()) return;
      const auto& g = od->grad;
      auto sa = aligned_strides(ad->shape, osh);
      auto sb = aligned_strides(bd->shape, osh);
      const bool need_a = ad->requires_grad;
      const bool need_b = bd->requires_grad;
      std::vector<double>* ga = need_a ? &ensure_grad(*ad) : nullptr;
      std::vector<double>* gb = need_b ? &ensure_grad(*bd) : nullptr;
      const auto& av = ad->values;
      const auto& bv = bd->values;
      for_each_bcast2(osh, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
        const double gv = g[static_cast<size_t>(o)];
        switch (kind) {
          case BinKind::Add:
            if (ga) (*ga)[static_cast<size_t>(i)] += gv;
            if (gb) (*gb)[static_cast<size_t>(j)] += gv;
            break;
          case BinKind::Sub:
            if (ga) (*ga)[static_cast<size_t>(i)] += gv;
            if (gb) (*gb)[static_cast<size_t>(j)] -= gv;
            break;
          case BinKind::Mul:
            if (ga) (*ga)[static_cast<size_t>(i)] += gv * bv[static_cast<size_t>(j)];
            if (gb) (*gb)[static_cast<size_t>(j)] += gv * av[static_cast<size_t>(i)];
            break;
          case BinKind::Div: {
            const double bvj = bv[static_cast<size_t>(j)];
            if (ga) (*ga)[static_cast<size_t>(i)] += gv / bvj;
            if (gb)
              (*gb)[static_cast<size_t>(j)] -=
                  gv * av[static_cast<size_t>(i)] / (bvj * bvj);
            break;
          }
        }
      });
    });
  }
  return out;
}

// Elementwise map with pointwise derivative df(x, y).
template <class Fwd, class Dfn>
Tensor unary_op(const Tensor& x, Fwd fwd, Dfn dfn) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, dfn] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      const auto& xv = xd->values;
      const auto& yv = od->values;
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfn(xv[i], yv[i]);
    });
  }
  return out;
}

struct AxisSplit {
  int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
  Shape out;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    if (i == axis) {
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(s[static_cast<size_t>(i)]);
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Div, "div"); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  auto fwd = [](double v) {
    double u = kGeluC * (v + 0.044715 * v * v * v);
    return 0.5 * v * (1.0 + std::tanh(u));
  };
  auto dfn = [](double v, double) {
    double u = kGeluC * (v + 0.044715 * v * v * v);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
  };
  return unary_op(x, fwd, dfn);
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary_op(x,
                  [](double v) { return v / (1.0 + std::exp(-v)); },
                  [](double v, double) {
                    double s = 1.0 / (1.0 + std::exp(-v));
                    return s * (1.0 + v * (1.0 - s));
                  });
}

Tensor tanh_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary_op(x, [slope](double v) { return v > 0 ? v : slope * v; },
                  [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Tensor elu(const Tensor& x, double alpha) {
  return unary_op(x, [alpha](double v) { return v > 0 ? v : alpha * (std::exp(v) - 1.0); },
                  [alpha](double v, double y) { return v > 0 ? 1.0 : y + alpha; });
}

Tensor exp_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor sqrt_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw Error("matmul requires rank >= 2, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
  }
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  const int64_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != k2) {
    throw Error("matmul inner-dimension mismatch: " + shape_str(as) + " vs " +
                shape_str(bs));
  }
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  Shape batch = broadcast_shape(abatch, bbatch, "matmul batch dims");
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  Tensor out = Tensor::zeros(out_shape);
  const auto sa = aligned_strides(abatch, batch);
  const auto sb = aligned_strides(bbatch, batch);
  const int64_t a_mat = m * k, b_mat = k * n, o_mat = m * n;
  const int64_t nbatch = shape_numel(batch);

  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();

  // Enumerate batch offsets through the broadcast odometer once.
  std::vector<int64_t> a_off(static_cast<size_t>(nbatch)), b_off(static_cast<size_t>(nbatch));
  for_each_bcast2(batch, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
    a_off[static_cast<size_t>(o)] = i;
    b_off[static_cast<size_t>(o)] = j;
  });

  for (int64_t bi = 0; bi < nbatch; ++bi) {
    const double* A = av.data() + a_off[static_cast<size_t>(bi)] * a_mat;
    const double* B = bv.data() + b_off[static_cast<size_t>(bi)] * b_mat;
    double* O = ov.data() + bi * o_mat;
    for (int64_t i = 0; i < m; ++i) {
      double* orow = O + i * n;
      const double* arow = A + i * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double aval = arow[kk];
        if (aval == 0.0) continue;
        const double* brow = B + kk * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
      }
    }
  }

  Tape* tape = Tape::current();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    tape->record({a, b}, out, [ad, bd, od, a_off, b_off, m, k, n, a_mat, b_mat, o_mat,
                               nbatch] {
      if (od->grad.empty()) return;
      const auto& g = od->grad;
      const bool need_a = ad->requires_grad;
      const bool need_b = bd->requires_grad;
      std::vector<double>* ga = need_a ? &ensure_grad(*ad) : nullptr;
      std::vector<double>* gb = need_b ? &ensure_grad(*bd) : nullptr;
      for (int64_t bi = 0; bi < nbatch; ++bi) {
        const double* A = ad->values.data() + a_off[static_cast<size_t>(bi)] * a_mat;
        const double* B = bd->values.data() + b_off[static_cast<size_t>(bi)] * b_mat;
        const double* G = g.data() + bi * o_mat;
        if (ga) {
          double* dA = ga->data() + a_off[static_cast<size_t>(bi)] * a_mat;
          for (int64_t i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            double* darow = dA + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
              const double* brow = B + kk * n;
              double s = 0.0;
              for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              darow[kk] += s;
            }
          }
        }
        if (gb) {
          double* dB = gb->data() + b_off[static_cast<size_t>(bi)] * b_mat;
          for (int64_t kk = 0; kk < k; ++kk) {
            double* dbrow = dB + kk * n;
            for (int64_t i = 0; i < m; ++i) {
              const double aval = A[i * k + kk];
              if (aval == 0.0) continue;
              const double* grow = G + i * n;
              for (int64_t j = 0; j < n; ++j) dbrow[j] += aval * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  check_positive_axis(axis, x.rank(), "softmax");
  const AxisSplit sp = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t in = 0; in < sp.inner; ++in) {
      const int64_t base = o * sp.n * sp.inner + in;
      double mx = xv[static_cast<size_t>(base)];
      for (int64_t t = 1; t < sp.n; ++t)
        mx = std::max(mx, xv[static_cast<size_t>(base + t * sp.inner)]);
      double denom = 0.0;
      for (int64_t t = 0; t < sp.n; ++t) {
        double e = std::exp(xv[static_cast<size_t>(base + t * sp.inner)] - mx);
        ov[static_cast<size_t>(base + t * sp.inner)] = e;
        denom += e;
      }
      for (int64_t t = 0; t < sp.n; ++t)
        ov[static_cast<size_t>(base + t * sp.inner)] /= denom;
    }
  }

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, sp] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      const auto& y = od->values;
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
          const int64_t base = o * sp.n * sp.inner + in;
          double dot = 0.0;
          for (int64_t t = 0; t < sp.n; ++t) {
            const size_t i = static_cast<size_t>(base + t * sp.inner);
            dot += g[i] * y[i];
          }
          for (int64_t t = 0; t < sp.n; ++t) {
            const size_t i = static_cast<size_t>(base + t * sp.inner);
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  check_positive_axis(axis, x.rank(), "sum");
  const AxisSplit sp = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(reduced_shape(x.shape(), axis, keepdim));
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t t = 0; t < sp.n; ++t)
      for (int64_t in = 0; in < sp.inner; ++in)
        ov[static_cast<size_t>(o * sp.inner + in)] +=
            xv[static_cast<size_t>((o * sp.n + t) * sp.inner + in)];

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, sp] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t t = 0; t < sp.n; ++t)
          for (int64_t in = 0; in < sp.inner; ++in)
            gx[static_cast<size_t>((o * sp.n + t) * sp.inner + in)] +=
                g[static_cast<size_t>(o * sp.inner + in)];
    });
  }
  return out;
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  check_positive_axis(axis, x.rank(), "mean");
  const double inv = 1.0 / static_cast<double>(x.shape()[static_cast<size_t>(axis)]);
  return mul_scalar(sum(x, axis, keepdim), inv);
}

Tensor max_reduce(const Tensor& x, int axis, bool keepdim) {
  check_positive_axis(axis, x.rank(), "max_reduce");
  const AxisSplit sp = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(reduced_shape(x.shape(), axis, keepdim));
  auto arg = std::make_shared<std::vector<int64_t>>(out.values().size());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t in = 0; in < sp.inner; ++in) {
      int64_t best = 0;
      double bv = xv[static_cast<size_t>(o * sp.n * sp.inner + in)];
      for (int64_t t = 1; t < sp.n; ++t) {
        double v = xv[static_cast<size_t>((o * sp.n + t) * sp.inner + in)];
        if (v > bv) {
          bv = v;
          best = t;
        }
      }
      ov[static_cast<size_t>(o * sp.inner + in)] = bv;
      (*arg)[static_cast<size_t>(o * sp.inner + in)] = best;
    }
  }

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, sp, arg] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t in = 0; in < sp.inner; ++in) {
          const int64_t t = (*arg)[static_cast<size_t>(o * sp.inner + in)];
          gx[static_cast<size_t>((o * sp.n + t) * sp.inner + in)] +=
              g[static_cast<size_t>(o * sp.inner + in)];
        }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::scalar(0.0);
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.values()[0] = s;

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const double g = od->grad[0];
      for (double& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw Error("reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) +
                " changes element count");
  }
  Tensor out = Tensor::from_values(shape, x.values());
  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw Error("permute: axes rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int a = axes[static_cast<size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) throw Error("permute: invalid axes");
    seen[static_cast<size_t>(a)] = true;
    out_shape[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(a)];
  }

  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * x.shape()[static_cast<size_t>(i + 1)];
  // stride of output dim i in the input layout
  std::vector<int64_t> map_strides(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    map_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];

  auto src_index = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.numel()));
  {
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t src = 0;
    const int64_t total = x.numel();
    for (int64_t o = 0; o < total; ++o) {
      (*src_index)[static_cast<size_t>(o)] = src;
      for (int d = r - 1; d >= 0; --d) {
        ++idx[static_cast<size_t>(d)];
        src += map_strides[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
        idx[static_cast<size_t>(d)] = 0;
        src -= map_strides[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      }
    }
  }

  Tensor out = Tensor::zeros(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t o = 0; o < ov.size(); ++o) ov[o] = xv[static_cast<size_t>((*src_index)[o])];

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, src_index] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (size_t o = 0; o < g.size(); ++o) gx[static_cast<size_t>((*src_index)[o])] += g[o];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw Error("concat of zero tensors");
  int r = parts[0].rank();
  check_positive_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  int64_t total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw Error("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.shape()[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)]) {
        throw Error("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                    shape_str(out_shape));
      }
    }
    total_axis += p.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total_axis;

  const AxisSplit osp = split_axis(out_shape, axis);
  Tensor out = Tensor::zeros(out_shape);
  auto& ov = out.values();
  int64_t axis_start = 0;
  for (const Tensor& p : parts) {
    const int64_t pn = p.shape()[static_cast<size_t>(axis)];
    const auto& pv = p.values();
    for (int64_t o = 0; o < osp.outer; ++o)
      for (int64_t t = 0; t < pn; ++t)
        for (int64_t in = 0; in < osp.inner; ++in)
          ov[static_cast<size_t>((o * osp.n + axis_start + t) * osp.inner + in)] =
              pv[static_cast<size_t>((o * pn + t) * osp.inner + in)];
    axis_start += pn;
  }

  Tape* tape = Tape::current();
  bool any_rg = false;
  for (const Tensor& p : parts) any_rg = any_rg || p.requires_grad();
  if (tape && any_rg) {
    std::vector<std::shared_ptr<TensorData>> pds;
    pds.reserve(parts.size());
    for (const Tensor& p : parts) pds.push_back(p.impl());
    auto od = out.impl();
    tape->record(parts, out, [pds, od, osp, axis] {
      if (od->grad.empty()) return;
      const auto& g = od->grad;
      int64_t axis_start = 0;
      for (auto& pd : pds) {
        const int64_t pn = pd->shape[static_cast<size_t>(axis)];
        if (pd->requires_grad) {
          auto& gp = ensure_grad(*pd);
          for (int64_t o = 0; o < osp.outer; ++o)
            for (int64_t t = 0; t < pn; ++t)
              for (int64_t in = 0; in < osp.inner; ++in)
                gp[static_cast<size_t>((o * pn + t) * osp.inner + in)] +=
                    g[static_cast<size_t>((o * osp.n + axis_start + t) * osp.inner + in)];
        }
        axis_start += pn;
      }
    });
  }
  return out;
}

Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t len) {
  check_positive_axis(axis, x.rank(), "narrow");
  const int64_t dim = x.shape()[static_cast<size_t>(axis)];
  if (start < 0 || len <= 0 || start + len > dim) {
    throw Error("narrow: range [" + std::to_string(start) + "," +
                std::to_string(start + len) + ") out of bounds for dim " +
                std::to_string(dim));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  const AxisSplit sp = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t t = 0; t < len; ++t)
      for (int64_t in = 0; in < sp.inner; ++in)
        ov[static_cast<size_t>((o * len + t) * sp.inner + in)] =
            xv[static_cast<size_t>((o * sp.n + start + t) * sp.inner + in)];

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, sp, start, len] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t t = 0; t < len; ++t)
          for (int64_t in = 0; in < sp.inner; ++in)
            gx[static_cast<size_t>((o * sp.n + start + t) * sp.inner + in)] +=
                g[static_cast<size_t>((o * len + t) * sp.inner + in)];
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
  if (x.rank() != 4 || w.rank() != 4) throw Error("conv2d expects 4-d input and kernel");
  const int64_t N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = w.dim(0), KIC = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (IC != KIC) {
    throw Error("conv2d channel mismatch: input has " + std::to_string(IC) +
                " channels, kernel expects " + std::to_string(KIC));
  }
  if (b.numel() != OC) throw Error("conv2d bias size mismatch");
  const int64_t OH = H + 2 * pad - KH + 1;
  const int64_t OW = W + 2 * pad - KW + 1;
  if (OH <= 0 || OW <= 0) throw Error("conv2d output would be empty");

  Tensor out = Tensor::zeros({N, OC, OH, OW});
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  auto& ov = out.values();

  for (int64_t n = 0; n < N; ++n) {
    for (int64_t oc = 0; oc < OC; ++oc) {
      double* omap = ov.data() + ((n * OC + oc) * OH) * OW;
      const double bias = bv[static_cast<size_t>(oc)];
      for (int64_t i = 0; i < OH * OW; ++i) omap[i] = bias;
      for (int64_t ic = 0; ic < IC; ++ic) {
        const double* xmap = xv.data() + ((n * IC + ic) * H) * W;
        const double* ker = wv.data() + ((oc * IC + ic) * KH) * KW;
        for (int64_t ky = 0; ky < KH; ++ky) {
          for (int64_t kx = 0; kx < KW; ++kx) {
            const double kval = ker[ky * KW + kx];
            if (kval == 0.0) continue;
            const int64_t y0 = std::max<int64_t>(0, pad - ky);
            const int64_t y1 = std::min<int64_t>(OH, H + pad - ky);
            const int64_t x0 = std::max<int64_t>(0, pad - kx);
            const int64_t x1 = std::min<int64_t>(OW, W + pad - kx);
            for (int64_t oy = y0; oy < y1; ++oy) {
              const double* xr = xmap + (oy + ky - pad) * W + (kx - pad);
              double* orow = omap + oy * OW;
              for (int64_t ox = x0; ox < x1; ++ox) orow[ox] += kval * xr[ox];
            }
          }
        }
      }
    }
  }

  Tape* tape = Tape::current();
  if (tape && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
    auto xd = x.impl(), wd = w.impl(), bd = b.impl(), od = out.impl();
    tape->record({x, w, b}, out, [xd, wd, bd, od, N, IC, OC, H, W, KH, KW, OH, OW, pad] {
      if (od->grad.empty()) return;
      const auto& g = od->grad;
      std::vector<double>* gx = xd->requires_grad ? &ensure_grad(*xd) : nullptr;
      std::vector<double>* gw = wd->requires_grad ? &ensure_grad(*wd) : nullptr;
      std::vector<double>* gb = bd->requires_grad ? &ensure_grad(*bd) : nullptr;
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t oc = 0; oc < OC; ++oc) {
          const double* gmap = g.data() + ((n * OC + oc) * OH) * OW;
          if (gb) {
            double s = 0.0;
            for (int64_t i = 0; i < OH * OW; ++i) s += gmap[i];
            (*gb)[static_cast<size_t>(oc)] += s;
          }
          for (int64_t ic = 0; ic < IC; ++ic) {
            const double* xmap = xd->values.data() + ((n * IC + ic) * H) * W;
            const double* ker = wd->values.data() + ((oc * IC + ic) * KH) * KW;
            double* gxmap = gx ? gx->data() + ((n * IC + ic) * H) * W : nullptr;
            double* gker = gw ? gw->data() + ((oc * IC + ic) * KH) * KW : nullptr;
            for (int64_t ky = 0; ky < KH; ++ky) {
              for (int64_t kx = 0; kx < KW; ++kx) {
                const int64_t y0 = std::max<int64_t>(0, pad - ky);
                const int64_t y1 = std::min<int64_t>(OH, H + pad - ky);
                const int64_t x0 = std::max<int64_t>(0, pad - kx);
                const int64_t x1 = std::min<int64_t>(OW, W + pad - kx);
                const double kval = ker[ky * KW + kx];
                double acc = 0.0;
                for (int64_t oy = y0; oy < y1; ++oy) {
                  const double* grow = gmap + oy * OW;
                  const double* xr = xmap + (oy + ky - pad) * W + (kx - pad);
                  double* gxr = gxmap ? gxmap + (oy + ky - pad) * W + (kx - pad) : nullptr;
                  for (int64_t ox = x0; ox < x1; ++ox) {
                    const double gv = grow[ox];
                    acc += gv * xr[ox];
                    if (gxr) gxr[ox] += gv * kval;
                  }
                }
                if (gker) gker[ky * KW + kx] += acc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor maxpool2x2(const Tensor& x) {
  if (x.rank() != 4) throw Error("maxpool2x2 expects 4-d input");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw Error("maxpool2x2 requires even spatial dims, got " +
                std::to_string(H) + "x" + std::to_string(W));
  }
  const int64_t OH = H / 2, OW = W / 2;
  Tensor out = Tensor::zeros({N, C, OH, OW});
  auto arg = std::make_shared<std::vector<int64_t>>(out.values().size());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* xmap = xv.data() + nc * H * W;
    double* omap = ov.data() + nc * OH * OW;
    int64_t* amap = arg->data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      for (int64_t ox = 0; ox < OW; ++ox) {
        int64_t best = (2 * oy) * W + 2 * ox;
        double bv = xmap[best];
        const int64_t cands[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                  (2 * oy + 1) * W + 2 * ox + 1};
        for (int64_t c : cands) {
          if (xmap[c] > bv) {
            bv = xmap[c];
            best = c;
          }
        }
        omap[oy * OW + ox] = bv;
        amap[oy * OW + ox] = nc * H * W + best;
      }
    }
  }

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, arg] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>((*arg)[i])] += g[i];
    });
  }
  return out;
}

Tensor global_avgpool(const Tensor& x) {
  if (x.rank() != 4) throw Error("global_avgpool expects 4-d input");
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({N, C});
  const auto& xv = x.values();
  auto& ov = out.values();
  const double inv = 1.0 / static_cast<double>(HW);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    const double* m = xv.data() + nc * HW;
    for (int64_t i = 0; i < HW; ++i) s += m[i];
    ov[static_cast<size_t>(nc)] = s * inv;
  }

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, HW, inv] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (size_t nc = 0; nc < g.size(); ++nc) {
        const double gv = g[nc] * inv;
        double* m = gx.data() + static_cast<int64_t>(nc) * HW;
        for (int64_t i = 0; i < HW; ++i) m[i] += gv;
      }
    });
  }
  return out;
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool train,
                   bool update_stats, double momentum, double eps) {
  if (x.rank() != 4) throw Error("batchnorm2d expects 4-d input");
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C) throw Error("batchnorm2d parameter size mismatch");
  if (train && N < 2) throw Error("batchnorm2d train mode needs batch size >= 2, got 1");

  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.values().size());
  auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  const auto& xv = x.values();
  auto& ov = out.values();
  const int64_t m = N * HW;

  for (int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xv.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += p[i];
      }
      mu = s / static_cast<double>(m);
      double vs = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xv.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          vs += d * d;
        }
      }
      var = vs / static_cast<double>(m);  // population variance
      if (update_stats) {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
      }
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[static_cast<size_t>(c)] = is;
    const double gam = gamma[c], bet = beta[c];
    for (int64_t n = 0; n < N; ++n) {
      const double* p = xv.data() + (n * C + c) * HW;
      double* q = ov.data() + (n * C + c) * HW;
      double* h = xhat->data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        h[i] = (p[i] - mu) * is;
        q[i] = gam * h[i] + bet;
      }
    }
  }

  Tape* tape = Tape::current();
  if (tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    auto xd = x.impl(), gd = gamma.impl(), bd = beta.impl(), od = out.impl();
    tape->record({x, gamma, beta}, out, [xd, gd, bd, od, xhat, invstd, N, C, HW, m, train] {
      if (od->grad.empty()) return;
      const auto& g = od->grad;
      std::vector<double>* gx = xd->requires_grad ? &ensure_grad(*xd) : nullptr;
      std::vector<double>* gg = gd->requires_grad ? &ensure_grad(*gd) : nullptr;
      std::vector<double>* gb = bd->requires_grad ? &ensure_grad(*bd) : nullptr;
      for (int64_t c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gh = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const double* gr = g.data() + (n * C + c) * HW;
          const double* h = xhat->data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            sum_g += gr[i];
            sum_gh += gr[i] * h[i];
          }
        }
        if (gg) (*gg)[static_cast<size_t>(c)] += sum_gh;
        if (gb) (*gb)[static_cast<size_t>(c)] += sum_g;
        if (gx) {
          const double gam = gd->values[static_cast<size_t>(c)];
          const double is = (*invstd)[static_cast<size_t>(c)];
          if (train) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int64_t n = 0; n < N; ++n) {
              const double* gr = g.data() + (n * C + c) * HW;
              const double* h = xhat->data() + (n * C + c) * HW;
              double* gxr = gx->data() + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                gxr[i] += gam * is * (gr[i] - inv_m * sum_g - h[i] * inv_m * sum_gh);
              }
            }
          } else {
            for (int64_t n = 0; n < N; ++n) {
              const double* gr = g.data() + (n * C + c) * HW;
              double* gxr = gx->data() + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) gxr[i] += gam * is * gr[i];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout rate must be in [0,1)");
  if (rng == nullptr || rate == 0.0) return x;

  const double keep = 1.0 - rate;
  const double scale = 1.0 / keep;
  auto mask = std::make_shared<std::vector<uint8_t>>(x.values().size());
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    const bool alive = rng->uniform() >= rate;
    (*mask)[i] = alive ? 1 : 0;
    ov[i] = alive ? xv[i] * scale : 0.0;
  }

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    tape->record({x}, out, [xd, od, mask, scale] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (size_t i = 0; i < g.size(); ++i)
        if ((*mask)[i]) gx[i] += g[i] * scale;
    });
  }
  return out;
}

Tensor weighted_cross_entropy(const Tensor& logits,
                              const std::vector<int64_t>& labels,
                              const std::vector<double>& class_weights) {
  if (logits.rank() != 2) throw Error("weighted_cross_entropy expects [batch, classes] logits");
  const int64_t B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B) throw Error("label count mismatch");
  if (static_cast<int64_t>(class_weights.size()) != C) throw Error("class weight count mismatch");
  for (double w : class_weights)
    if (w <= 0.0) throw Error("class weights must be positive");
  for (int64_t b = 0; b < B; ++b) {
    if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= C) {
      throw Error("label " + std::to_string(labels[static_cast<size_t>(b)]) +
                  " out of range [0," + std::to_string(C) + ") at row " + std::to_string(b));
    }
  }

  auto probs = std::make_shared<std::vector<double>>(logits.values().size());
  const auto& lv = logits.values();
  double loss = 0.0, wsum = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const double* row = lv.data() + b * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
    const double lse = std::log(denom) + mx;
    for (int64_t c = 0; c < C; ++c)
      (*probs)[static_cast<size_t>(b * C + c)] = std::exp(row[c] - lse);
    const int64_t y = labels[static_cast<size_t>(b)];
    const double w = class_weights[static_cast<size_t>(y)];
    loss += w * (lse - row[y]);
    wsum += w;
  }
  Tensor out = Tensor::scalar(loss / wsum);

  Tape* tape = Tape::current();
  if (tape && logits.requires_grad()) {
    auto ld = logits.impl(), od = out.impl();
    auto lbl = std::make_shared<std::vector<int64_t>>(labels);
    auto cw = std::make_shared<std::vector<double>>(class_weights);
    tape->record({logits}, out, [ld, od, probs, lbl, cw, B, C, wsum] {
      if (od->grad.empty()) return;
      const double g = od->grad[0] / wsum;
      auto& gl = ensure_grad(*ld);
      for (int64_t b = 0; b < B; ++b) {
        const int64_t y = (*lbl)[static_cast<size_t>(b)];
        const double w = (*cw)[static_cast<size_t>(y)];
        for (int64_t c = 0; c < C; ++c) {
          double p = (*probs)[static_cast<size_t>(b * C + c)];
          gl[static_cast<size_t>(b * C + c)] += g * w * (p - (c == y ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  if (x.rank() != 2) throw Error("gather_rows expects a 2-d tensor");
  const int64_t N = x.dim(0), D = x.dim(1);
  for (int64_t r : rows)
    if (r < 0 || r >= N) throw Error("gather_rows: row index out of range");
  Tensor out = Tensor::zeros({static_cast<int64_t>(rows.size()), D});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < rows.size(); ++i)
    for (int64_t d = 0; d < D; ++d)
      ov[i * static_cast<size_t>(D) + static_cast<size_t>(d)] =
          xv[static_cast<size_t>(rows[i] * D + d)];

  Tape* tape = Tape::current();
  if (tape && x.requires_grad()) {
    auto xd = x.impl(), od = out.impl();
    auto idx = std::make_shared<std::vector<int64_t>>(rows);
    tape->record({x}, out, [xd, od, idx, D] {
      if (od->grad.empty()) return;
      auto& gx = ensure_grad(*xd);
      const auto& g = od->grad;
      for (size_t i = 0; i < idx->size(); ++i)
        for (int64_t d = 0; d < D; ++d)
          gx[static_cast<size_t>((*idx)[i] * D + d)] +=
              g[i * static_cast<size_t>(D) + static_cast<size_t>(d)];
    });
  }
  return out;
}

Tensor scatter_rows(const Tensor& rows_values, const std::vector<int64_t>& rows,
                    int64_t total_rows) {
  if (rows_values.rank() != 2) throw Error("scatter_rows expects a 2-d tensor");
  const int64_t n = rows_values.dim(0), D = rows_values.dim(1);
  if (static_cast<int64_t>(rows.size()) != n) throw Error("scatter_rows: index count mismatch");
  for (int64_t r : rows)
    if (r < 0 || r >= total_rows) throw Error("scatter_rows: row index out of range");
  Tensor out = Tensor::zeros({total_rows, D});
  const auto& vv = rows_values.values();
  auto& ov = out.values();
  for (size_t i = 0; i < rows.size(); ++i)
    for (int64_t d = 0; d < D; ++d)
      ov[static_cast<size_t>(rows[i] * D + d)] +=
          vv[i * static_cast<size_t>(D) + static_cast<size_t>(d)];

  Tape* tape = Tape::current();
  if (tape && rows_values.requires_grad()) {
    auto vd = rows_values.impl(), od = out.impl();
    auto idx = std::make_shared<std::vector<int64_t>>(rows);
    tape->record({rows_values}, out, [vd, od, idx, D] {
      if (od->grad.empty()) return;
      auto& gv = ensure_grad(*vd);
      const auto& g = od->grad;
      for (size_t i = 0; i < idx->size(); ++i)
        for (int64_t d = 0; d < D; ++d)
          gv[i * static_cast<size_t>(D) + static_cast<size_t>(d)] +=
              g[static_cast<size_t>((*idx)[i] * D + d)];
    });
  }
  return out;
}

Tensor rel_bias_lookup(const Tensor& table, const std::vector<int>& buckets,
                       int64_t seq_len) {
  if (table.rank() != 2) throw Error("rel_bias_lookup expects [buckets, heads] table");
  const int64_t NB = table.dim(0), Hh = table.dim(1);
  if (static_cast<int64_t>(buckets.size()) != seq_len * seq_len)
    throw Error("rel_bias_lookup: bucket matrix size mismatch");
  for (int bkt : buckets)
    if (bkt < 0 || bkt >= NB) throw Error("rel_bias_lookup: bucket out of range");

  Tensor out = Tensor::zeros({Hh, seq_len, seq_len});
  const auto& tv = table.values();
  auto& ov = out.values();
  for (int64_t h = 0; h < Hh; ++h)
    for (int64_t ij = 0; ij < seq_len * seq_len; ++ij)
      ov[static_cast<size_t>(h * seq_len * seq_len + ij)] =
          tv[static_cast<size_t>(buckets[static_cast<size_t>(ij)] * Hh + h)];

  Tape* tape = Tape::current();
  if (tape && table.requires_grad()) {
    auto td = table.impl(), od = out.impl();
    auto bkt = std::make_shared<std::vector<int>>(buckets);
    tape->record({table}, out, [td, od, bkt, Hh, seq_len] {
      if (od->grad.empty()) return;
      auto& gt = ensure_grad(*td);
      const auto& g = od->grad;
      for (int64_t h = 0; h < Hh; ++h)
        for (int64_t ij = 0; ij < seq_len * seq_len; ++ij)
          gt[static_cast<size_t>((*bkt)[static_cast<size_t>(ij)] * Hh + h)] +=
              g[static_cast<size_t>(h * seq_len * seq_len + ij)];
    });
  }
  return out;
}

Tensor cosine_adjacency(const Tensor& rows) {
  if (rows.rank() != 2) throw Error("cosine_adjacency expects [nodes, dim]");
  const int64_t M = rows.dim(0), D = rows.dim(1);
  const auto& rv = rows.values();
  std::vector<double> norms(static_cast<size_t>(M));
  for (int64_t i = 0; i < M; ++i) {
    double s = 0.0;
    for (int64_t d = 0; d < D; ++d) {
      const double v = rv[static_cast<size_t>(i * D + d)];
      s += v * v;
    }
    norms[static_cast<size_t>(i)] = std::sqrt(s);
  }
  auto cosines = std::make_shared<std::vector<double>>(static_cast<size_t>(M * M), 0.0);
  Tensor out = Tensor::zeros({M, M});
  auto& ov = out.values();
  for (int64_t i = 0; i < M; ++i) {
    ov[static_cast<size_t>(i * M + i)] = 1.0;
    (*cosines)[static_cast<size_t>(i * M + i)] = 1.0;
    for (int64_t j = i + 1; j < M; ++j) {
      double c = 0.0;
      if (norms[static_cast<size_t>(i)] > 0.0 && norms[static_cast<size_t>(j)] > 0.0) {
        double dot = 0.0;
        for (int64_t d = 0; d < D; ++d)
          dot += rv[static_cast<size_t>(i * D + d)] * rv[static_cast<size_t>(j * D + d)];
        c = dot / (norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)]);
        c = std::clamp(c, -1.0, 1.0);
      }
      (*cosines)[static_cast<size_t>(i * M + j)] = c;
      (*cosines)[static_cast<size_t>(j * M + i)] = c;
      const double a = (c + 1.0) * 0.5;
      ov[static_cast<size_t>(i * M + j)] = a;
      ov[static_cast<size_t>(j * M + i)] = a;
    }
  }

  Tape* tape = Tape::current();
  if (tape && rows.requires_grad()) {
    auto rd = rows.impl(), od = out.impl();
    auto nrm = std::make_shared<std::vector<double>>(norms);
    tape->record({rows}, out, [rd, od, cosines, nrm, M, D] {
      if (od->grad.empty()) return;
      auto& gr = ensure_grad(*rd);
      const auto& g = od->grad;
      const auto& rv = rd->values;
      // d a_ij / d e_i = 0.5 * (e_j/(|e_i||e_j|) - cos_ij * e_i/|e_i|^2), diag constant
      for (int64_t i = 0; i < M; ++i) {
        for (int64_t j = 0; j < M; ++j) {
          if (i == j) continue;
          const double gv = g[static_cast<size_t>(i * M + j)];
          if (gv == 0.0) continue;
          const double ni = (*nrm)[static_cast<size_t>(i)];
          const double nj = (*nrm)[static_cast<size_t>(j)];
          if (ni <= 0.0 || nj <= 0.0) continue;
          const double c = (*cosines)[static_cast<size_t>(i * M + j)];
          const double inv_ij = 1.0 / (ni * nj);
          const double inv_ii = 1.0 / (ni * ni);
          const double inv_jj = 1.0 / (nj * nj);
          for (int64_t d = 0; d < D; ++d) {
            const double ei = rv[static_cast<size_t>(i * D + d)];
            const double ej = rv[static_cast<size_t>(j * D + d)];
            gr[static_cast<size_t>(i * D + d)] += gv * 0.5 * (ej * inv_ij - c * ei * inv_ii);
            gr[static_cast<size_t>(j * D + d)] += gv * 0.5 * (ei * inv_ij - c * ej * inv_jj);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace magnet::ops
