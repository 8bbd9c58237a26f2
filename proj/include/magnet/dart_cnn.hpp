#pragma once

#include <vector>

#include "magnet/nn.hpp"

namespace magnet {

struct DartConfig {
  std::vector<int64_t> channels = {8, 16};
  int64_t reduction = 4;   // channel-attention bottleneck ratio
  int64_t embed_dim = 32;  // must equal 2 * rec.hidden for the residual sum
  RecurrentStackConfig rec{.hidden = 16, .lstm_layers = 1, .rnn_layers = 1, .gru_layers = 1,
                           .dropout = 0.1};
  int64_t in_h = 12;
  int64_t in_w = 16;
};

// Conv feature extractor + CBAM-style dual attention + projection +
// bidirectional recurrent stack with residual + temporal mean pooling.
class DartCnn {
 public:
  DartCnn() = default;
  DartCnn(const DartConfig& cfg, Rng& rng);

  // [(B*T),1,H,W] -> [(B*T),C_last,H',W']; max pool 2x2 after the 2nd block
  Tensor conv_encode(const Tensor& x, const ForwardCtx& ctx);
  // F -> F ⊙ A_spatial ⊙ A_channel
  Tensor dual_attention(const Tensor& f) const;
  // GAP -> flatten -> feedforward to embed_dim
  Tensor project(const Tensor& f_attn) const;
  // frames [B,T,H,W] -> embedding [B,embed_dim]
  Tensor forward(const Tensor& frames, const ForwardCtx& ctx);

  void collect(const std::string& prefix, ParamMap& out) const;

  DartConfig cfg;
  std::vector<Conv2dLayer> convs;
  std::vector<BatchNorm2d> bns;
  Conv2dLayer spatial_att;        // 1x1 conv, C_last -> 1
  LinearLayer ch_att1, ch_att2;   // C -> C/r -> C
  LinearLayer proj;               // C_last -> embed_dim
  RecurrentStack rec;
};

}  // namespace magnet
