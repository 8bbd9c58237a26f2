#include "magnet/nn.hpp"

#include <cmath>

namespace magnet {

std::vector<Tensor> ParamMap::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e.tensor);
  }
  return out;
}

TrainableReport count_params(const ParamMap& params) {
  TrainableReport rep;
  for (const auto& e : params.entries()) {
    if (e.buffer) continue;
    if (e.trainable) {
      rep.trainable += e.tensor.numel();
    } else {
      rep.frozen += e.tensor.numel();
    }
    rep.entries.push_back(e);
  }
  return rep;
}

Tensor kaiming_uniform(const Shape& shape, int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(shape, true);
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

LinearLayer::LinearLayer(int64_t in, int64_t out, Rng& rng, bool with_bias)
    : in_dim(in), out_dim(out) {
  weight = kaiming_uniform({in, out}, in, rng);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.dim(-1) != in_dim) {
    throw Error("linear: input feature dim " + std::to_string(x.dim(-1)) +
                " does not match layer in dim " + std::to_string(in_dim));
  }
  Tensor y = ops::matmul(x, weight);
  if (bias.defined()) y = ops::add(y, bias);
  return y;
}

void LinearLayer::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".weight", weight);
  if (bias.defined()) out.add(prefix + ".bias", bias);
}

LoraLinear::LoraLinear(int64_t in, int64_t out, int rank, double alpha, Rng& rng)
    : rank(rank), in_dim(in), out_dim(out) {
  base = kaiming_uniform({in, out}, in, rng);
  if (rank > 0) {
    base.set_requires_grad(false);  // frozen forever
    lora_a = kaiming_uniform({in, rank}, in, rng);
    lora_b = Tensor::zeros({rank, out}, true);  // adapter starts as a no-op
    scale = alpha / static_cast<double>(rank);
  }
}

Tensor LoraLinear::forward(const Tensor& x) const {
  if (x.dim(-1) != in_dim) {
    throw Error("lora: input feature dim " + std::to_string(x.dim(-1)) +
                " does not match layer in dim " + std::to_string(in_dim));
  }
  Tensor y = ops::matmul(x, base);
  if (rank > 0) {
    Tensor low = ops::matmul(ops::matmul(x, lora_a), lora_b);
    y = ops::add(y, ops::mul_scalar(low, scale));
  }
  return y;
}

void LoraLinear::collect(const std::string& prefix, ParamMap& out) const {
  if (rank > 0) {
    out.add_frozen(prefix + ".base", base);
    out.add(prefix + ".lora_a", lora_a);
    out.add(prefix + ".lora_b", lora_b);
  } else {
    out.add(prefix + ".base", base);
  }
}

Conv2dLayer::Conv2dLayer(int64_t in_ch, int64_t out_ch, int kernel, int pad, Rng& rng)
    : pad(pad) {
  weight = kaiming_uniform({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng);
  bias = Tensor::zeros({out_ch}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return ops::conv2d(x, weight, bias, pad);
}

void Conv2dLayer::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

BatchNorm2d::BatchNorm2d(int64_t channels, double momentum, double eps)
    : momentum(momentum), eps(eps) {
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::full({channels}, 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, const ForwardCtx& ctx) {
  return ops::batchnorm2d(x, gamma, beta, running_mean, running_var, ctx.train,
                          ctx.train && ctx.update_stats, momentum, eps);
}

void BatchNorm2d::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
  out.add_buffer(prefix + ".running_mean", running_mean);
  out.add_buffer(prefix + ".running_var", running_var);
}

RMSNorm::RMSNorm(int64_t dim, double eps) : eps(eps) {
  gain = Tensor::full({dim}, 1.0, true);
}

Tensor RMSNorm::forward(const Tensor& x) const {
  Tensor ms = ops::mean(ops::mul(x, x), -1, true);
  Tensor denom = ops::sqrt_(ops::add_scalar(ms, eps));
  return ops::mul(ops::div(x, denom), gain);
}

void RMSNorm::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".gain", gain);
}

int relative_position_bucket(int64_t rel, int num_buckets, int max_distance) {
  const int half = num_buckets / 2;
  int bucket = rel > 0 ? half : 0;
  const int64_t arel = rel < 0 ? -rel : rel;
  const int max_exact = half / 2;
  if (arel < max_exact) return bucket + static_cast<int>(arel);
  const double v = max_exact +
                   std::log(static_cast<double>(arel) / max_exact) /
                       std::log(static_cast<double>(max_distance) / max_exact) *
                       (half - max_exact);
  return bucket + std::min(static_cast<int>(v), half - 1);
}

AttentionLayer::AttentionLayer(const AttentionConfig& cfg, Rng& rng) : cfg(cfg) {
  if (cfg.model_dim != static_cast<int64_t>(cfg.heads) * cfg.head_dim) {
    throw Error("attention: model_dim " + std::to_string(cfg.model_dim) +
                " must equal heads*head_dim");
  }
  wq = LoraLinear(cfg.model_dim, cfg.model_dim, cfg.lora_rank, cfg.lora_alpha, rng);
  wk = LoraLinear(cfg.model_dim, cfg.model_dim, cfg.lora_rank, cfg.lora_alpha, rng);
  wv = LoraLinear(cfg.model_dim, cfg.model_dim, cfg.lora_rank, cfg.lora_alpha, rng);
  wo = LinearLayer(cfg.model_dim, cfg.model_dim, rng, /*with_bias=*/false);
  if (cfg.use_rel_bias) {
    bias_table = Tensor::zeros({cfg.num_buckets, cfg.heads}, true);
  }
}

Tensor AttentionLayer::forward(const Tensor& x, const ForwardCtx& ctx,
                               Tensor* attn_probs) const {
  const int64_t B = x.dim(0), C = x.dim(1), D = x.dim(2);
  if (D != cfg.model_dim) throw Error("attention: input dim mismatch");
  const int64_t h = cfg.heads, dk = cfg.head_dim;

  auto heads_view = [&](const Tensor& t) {
    return ops::permute(ops::reshape(t, {B, C, h, dk}), {0, 2, 1, 3});
  };
  Tensor q = heads_view(wq.forward(x));
  Tensor k = heads_view(wk.forward(x));
  Tensor v = heads_view(wv.forward(x));

  Tensor scores = ops::mul_scalar(ops::matmul(q, ops::permute(k, {0, 1, 3, 2})),
                                  1.0 / std::sqrt(static_cast<double>(dk)));
  if (cfg.use_rel_bias) {
    std::vector<int> buckets(static_cast<size_t>(C * C));
    for (int64_t i = 0; i < C; ++i)
      for (int64_t j = 0; j < C; ++j)
        buckets[static_cast<size_t>(i * C + j)] =
            relative_position_bucket(j - i, cfg.num_buckets, cfg.max_distance);
    Tensor bias = ops::rel_bias_lookup(bias_table, buckets, C);
    scores = ops::add(scores, bias);
  }
  Tensor attn = ops::softmax(scores, -1);
  if (attn_probs) *attn_probs = attn;
  attn = ops::dropout(attn, cfg.dropout, ctx.dropout_rng());
  Tensor ctx_heads = ops::matmul(attn, v);  // [B,h,C,dk]
  Tensor merged = ops::reshape(ops::permute(ctx_heads, {0, 2, 1, 3}), {B, C, D});
  return wo.forward(merged);
}

void AttentionLayer::collect(const std::string& prefix, ParamMap& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
  if (bias_table.defined()) out.add(prefix + ".rel_bias", bias_table);
}

namespace {

int gate_count(CellKind kind) {
  switch (kind) {
    case CellKind::Lstm: return 4;
    case CellKind::Gru: return 3;
    case CellKind::Rnn: return 1;
  }
  return 1;
}

// One step of the cell; h (and c for LSTM) are carried through the tape.
Tensor cell_step(const RecurrentCell& cell, const Tensor& x_t, Tensor& h, Tensor& c) {
  const int64_t H = cell.hidden;
  switch (cell.kind) {
    case CellKind::Lstm: {
      Tensor gates = ops::add(ops::add(ops::matmul(x_t, cell.w_ih), ops::matmul(h, cell.w_hh)),
                              cell.b);
      Tensor i = ops::sigmoid(ops::narrow(gates, 1, 0, H));
      Tensor f = ops::sigmoid(ops::narrow(gates, 1, H, H));
      Tensor g = ops::tanh_(ops::narrow(gates, 1, 2 * H, H));
      Tensor o = ops::sigmoid(ops::narrow(gates, 1, 3 * H, H));
      c = ops::add(ops::mul(f, c), ops::mul(i, g));
      h = ops::mul(o, ops::tanh_(c));
      return h;
    }
    case CellKind::Gru: {
      Tensor xi = ops::add(ops::matmul(x_t, cell.w_ih), cell.b);
      Tensor hh = ops::matmul(h, cell.w_hh);
      Tensor r = ops::sigmoid(ops::add(ops::narrow(xi, 1, 0, H), ops::narrow(hh, 1, 0, H)));
      Tensor z = ops::sigmoid(ops::add(ops::narrow(xi, 1, H, H), ops::narrow(hh, 1, H, H)));
      Tensor n = ops::tanh_(ops::add(ops::narrow(xi, 1, 2 * H, H),
                                     ops::mul(r, ops::narrow(hh, 1, 2 * H, H))));
      Tensor one_minus_z = ops::add_scalar(ops::mul_scalar(z, -1.0), 1.0);
      h = ops::add(ops::mul(one_minus_z, n), ops::mul(z, h));
      return h;
    }
    case CellKind::Rnn: {
      h = ops::tanh_(ops::add(ops::add(ops::matmul(x_t, cell.w_ih), ops::matmul(h, cell.w_hh)),
                              cell.b));
      return h;
    }
  }
  throw Error("unknown cell kind");
}

}  // namespace

RecurrentCell::RecurrentCell(CellKind kind, int64_t input, int64_t hidden, Rng& rng)
    : kind(kind), hidden(hidden) {
  const int64_t g = gate_count(kind);
  w_ih = kaiming_uniform({input, g * hidden}, input, rng);
  w_hh = kaiming_uniform({hidden, g * hidden}, hidden, rng);
  b = Tensor::zeros({g * hidden}, true);
}

void RecurrentCell::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".w_ih", w_ih);
  out.add(prefix + ".w_hh", w_hh);
  out.add(prefix + ".b", b);
}

BiRecurrentLayer::BiRecurrentLayer(CellKind kind, int64_t input, int64_t hidden, Rng& rng)
    : fwd(kind, input, hidden, rng), bwd(kind, input, hidden, rng) {}

Tensor BiRecurrentLayer::forward(const Tensor& x) const {
  const int64_t B = x.dim(0), T = x.dim(1), F = x.dim(2);
  const int64_t H = fwd.hidden;

  auto run = [&](const RecurrentCell& cell, bool reverse) {
    Tensor h = Tensor::zeros({B, H});
    Tensor c = Tensor::zeros({B, H});
    std::vector<Tensor> outs(static_cast<size_t>(T));
    for (int64_t s = 0; s < T; ++s) {
      const int64_t t = reverse ? T - 1 - s : s;
      Tensor x_t = ops::reshape(ops::narrow(x, 1, t, 1), {B, F});
      Tensor h_t = cell_step(cell, x_t, h, c);
      outs[static_cast<size_t>(t)] = ops::reshape(h_t, {B, 1, H});
    }
    return ops::concat(outs, 1);  // [B,T,H] in original time order
  };

  Tensor f = run(fwd, false);
  Tensor b = run(bwd, true);
  return ops::concat({f, b}, 2);
}

void BiRecurrentLayer::collect(const std::string& prefix, ParamMap& out) const {
  fwd.collect(prefix + ".fwd", out);
  bwd.collect(prefix + ".bwd", out);
}

RecurrentStack::RecurrentStack(int64_t input_dim, const RecurrentStackConfig& cfg, Rng& rng)
    : drop(cfg.dropout) {
  int64_t in = input_dim;
  for (int i = 0; i < cfg.lstm_layers; ++i) {
    lstm.emplace_back(CellKind::Lstm, in, cfg.hidden, rng);
    in = 2 * cfg.hidden;
  }
  for (int i = 0; i < cfg.rnn_layers; ++i) {
    rnn.emplace_back(CellKind::Rnn, in, cfg.hidden, rng);
    in = 2 * cfg.hidden;
  }
  for (int i = 0; i < cfg.gru_layers; ++i) {
    gru.emplace_back(CellKind::Gru, in, cfg.hidden, rng);
    in = 2 * cfg.hidden;
  }
}

Tensor RecurrentStack::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor h = x;
  for (const auto& layer : lstm) h = layer.forward(h);
  h = drop.forward(h, ctx);  // inter-stage dropout
  for (const auto& layer : rnn) h = layer.forward(h);
  h = drop.forward(h, ctx);
  for (const auto& layer : gru) h = layer.forward(h);
  return h;
}

void RecurrentStack::collect(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < lstm.size(); ++i) lstm[i].collect(prefix + ".lstm" + std::to_string(i), out);
  for (size_t i = 0; i < rnn.size(); ++i) rnn[i].collect(prefix + ".rnn" + std::to_string(i), out);
  for (size_t i = 0; i < gru.size(); ++i) gru[i].collect(prefix + ".gru" + std::to_string(i), out);
}

SwiGlu::SwiGlu(int64_t dim, int64_t hidden, Rng& rng) {
  gate = LinearLayer(dim, hidden, rng, /*with_bias=*/false);
  value = LinearLayer(dim, hidden, rng, /*with_bias=*/false);
  out = LinearLayer(hidden, dim, rng, /*with_bias=*/false);
}

Tensor SwiGlu::forward(const Tensor& x) const {
  return out.forward(ops::mul(ops::silu(gate.forward(x)), value.forward(x)));
}

void SwiGlu::collect(const std::string& prefix, ParamMap& out_map) const {
  gate.collect(prefix + ".gate", out_map);
  value.collect(prefix + ".value", out_map);
  out.collect(prefix + ".out", out_map);
}

}  // namespace magnet
