#pragma once

#include <vector>

#include "magnet/nn.hpp"

namespace magnet {

struct EncoderConfig {
  int64_t input_dim = 3;   // channels per time step
  int64_t model_dim = 32;  // D, must equal heads*head_dim
  int layers = 2;
  int heads = 2;
  int64_t head_dim = 16;
  int64_t ff_dim = 64;
  double dropout = 0.1;
  double norm_eps = 1e-6;
  int num_buckets = 32;
  int max_distance = 128;
  int64_t max_seq_len = 50;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  bool use_sinusoidal = true;
  bool use_rel_bias = true;
};

// One token per time step, carrying all channels: [B,T,d] -> [B,C=T,d].
// Rejects sequences longer than the configured maximum.
Tensor patchify(const Tensor& x, int64_t max_seq_len);

// Interleaved sin/cos table [seq_len, model_dim]; model_dim must be even.
Tensor sinusoidal_encoding(int64_t seq_len, int64_t model_dim);

struct EncoderLayer {
  RMSNorm norm_attn, norm_ff;
  AttentionLayer attn;
  LinearLayer ff_gate, ff_value, ff_out;  // gated-GELU feedforward
  Dropout drop;

  EncoderLayer() = default;
  EncoderLayer(const EncoderConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

// Encoder-only transformer over per-timestep tokens with LoRA-wrapped
// attention projections and an avg/max pooling head.
class TsEncoder {
 public:
  TsEncoder() = default;
  TsEncoder(const EncoderConfig& cfg, Rng& rng);

  // [B,C,d] tokens -> [B,C,D] hidden states
  Tensor encode(const Tensor& tokens, const ForwardCtx& ctx) const;
  // concat(mean, max) over time -> projection to [B,D]
  Tensor pool_head(const Tensor& hidden) const;
  // raw window [B,T,d] -> embedding [B,D]
  Tensor forward(const Tensor& window, const ForwardCtx& ctx) const;

  void collect(const std::string& prefix, ParamMap& out) const;
  TrainableReport param_report() const;

  EncoderConfig cfg;
  LinearLayer embed;  // d -> D
  std::vector<EncoderLayer> layers;
  RMSNorm final_norm;
  LinearLayer pool_proj;  // 2D -> D
  Dropout drop;
};

}  // namespace magnet
