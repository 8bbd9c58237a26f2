#include "magnet/ts_encoder.hpp"

#include <cmath>

namespace magnet {

Tensor patchify(const Tensor& x, int64_t max_seq_len) {
  if (x.rank() != 3) throw Error("patchify expects [batch, time, channels]");
  if (x.dim(1) > max_seq_len) {
    throw Error("sequence length " + std::to_string(x.dim(1)) +
                " exceeds max sequence length " + std::to_string(max_seq_len));
  }
  return x;  // one token per time step, all channels kept together
}

Tensor sinusoidal_encoding(int64_t seq_len, int64_t model_dim) {
  if (model_dim % 2 != 0) {
    throw Error("sinusoidal encoding needs an even model dim, got " +
                std::to_string(model_dim));
  }
  Tensor table = Tensor::zeros({seq_len, model_dim});
  auto& v = table.values();
  for (int64_t pos = 0; pos < seq_len; ++pos) {
    for (int64_t i = 0; i < model_dim / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(model_dim));
      v[static_cast<size_t>(pos * model_dim + 2 * i)] = std::sin(pos * freq);
      v[static_cast<size_t>(pos * model_dim + 2 * i + 1)] = std::cos(pos * freq);
    }
  }
  return table;
}

EncoderLayer::EncoderLayer(const EncoderConfig& cfg, Rng& rng)
    : norm_attn(cfg.model_dim, cfg.norm_eps),
      norm_ff(cfg.model_dim, cfg.norm_eps),
      drop(cfg.dropout) {
  AttentionConfig ac;
  ac.model_dim = cfg.model_dim;
  ac.heads = cfg.heads;
  ac.head_dim = cfg.head_dim;
  ac.lora_rank = cfg.lora_rank;
  ac.lora_alpha = cfg.lora_alpha;
  ac.use_rel_bias = cfg.use_rel_bias;
  ac.num_buckets = cfg.num_buckets;
  ac.max_distance = cfg.max_distance;
  ac.dropout = cfg.dropout;
  attn = AttentionLayer(ac, rng);
  ff_gate = LinearLayer(cfg.model_dim, cfg.ff_dim, rng, /*with_bias=*/false);
  ff_value = LinearLayer(cfg.model_dim, cfg.ff_dim, rng, /*with_bias=*/false);
  ff_out = LinearLayer(cfg.ff_dim, cfg.model_dim, rng, /*with_bias=*/false);
}

Tensor EncoderLayer::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor h = ops::add(x, drop.forward(attn.forward(norm_attn.forward(x), ctx), ctx));
  Tensor n = norm_ff.forward(h);
  Tensor gated = ops::mul(ops::gelu(ff_gate.forward(n)), ff_value.forward(n));
  gated = drop.forward(gated, ctx);
  return ops::add(h, drop.forward(ff_out.forward(gated), ctx));
}

void EncoderLayer::collect(const std::string& prefix, ParamMap& out) const {
  norm_attn.collect(prefix + ".norm_attn", out);
  attn.collect(prefix + ".attn", out);
  norm_ff.collect(prefix + ".norm_ff", out);
  ff_gate.collect(prefix + ".ff_gate", out);
  ff_value.collect(prefix + ".ff_value", out);
  ff_out.collect(prefix + ".ff_out", out);
}

TsEncoder::TsEncoder(const EncoderConfig& cfg, Rng& rng)
    : cfg(cfg), final_norm(cfg.model_dim, cfg.norm_eps), drop(cfg.dropout) {
  if (cfg.model_dim != static_cast<int64_t>(cfg.heads) * cfg.head_dim) {
    throw Error("encoder: model_dim must equal heads*head_dim");
  }
  embed = LinearLayer(cfg.input_dim, cfg.model_dim, rng);
  for (int l = 0; l < cfg.layers; ++l) layers.emplace_back(cfg, rng);
  pool_proj = LinearLayer(2 * cfg.model_dim, cfg.model_dim, rng);
}

Tensor TsEncoder::encode(const Tensor& tokens, const ForwardCtx& ctx) const {
  Tensor z = embed.forward(tokens);  // [B,C,D]
  if (cfg.use_sinusoidal) {
    z = ops::add(z, sinusoidal_encoding(tokens.dim(1), cfg.model_dim));
  }
  z = drop.forward(z, ctx);
  for (const auto& layer : layers) z = layer.forward(z, ctx);
  return final_norm.forward(z);
}

Tensor TsEncoder::pool_head(const Tensor& hidden) const {
  Tensor avg = ops::mean(hidden, 1);
  Tensor mx = ops::max_reduce(hidden, 1);
  return pool_proj.forward(ops::concat({avg, mx}, 1));
}

Tensor TsEncoder::forward(const Tensor& window, const ForwardCtx& ctx) const {
  return pool_head(encode(patchify(window, cfg.max_seq_len), ctx));
}

void TsEncoder::collect(const std::string& prefix, ParamMap& out) const {
  embed.collect(prefix + ".embed", out);
  for (size_t l = 0; l < layers.size(); ++l)
    layers[l].collect(prefix + ".layer" + std::to_string(l), out);
  final_norm.collect(prefix + ".final_norm", out);
  pool_proj.collect(prefix + ".pool_proj", out);
}

TrainableReport TsEncoder::param_report() const {
  ParamMap pm;
  collect("encoder", pm);
  return count_params(pm);
}

}  // namespace magnet
