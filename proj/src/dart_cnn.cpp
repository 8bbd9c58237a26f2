#include "magnet/dart_cnn.hpp"

namespace magnet {

DartCnn::DartCnn(const DartConfig& cfg, Rng& rng) : cfg(cfg) {
  if (cfg.channels.empty()) throw Error("dart: channel progression must be non-empty");
  if (cfg.embed_dim != 2 * cfg.rec.hidden) {
    throw Error("dart: embed_dim " + std::to_string(cfg.embed_dim) +
                " must equal 2*hidden " + std::to_string(2 * cfg.rec.hidden) +
                " for the recurrent residual");
  }
  const int64_t c_last = cfg.channels.back();
  if (c_last % cfg.reduction != 0) {
    throw Error("dart: channel count " + std::to_string(c_last) +
                " not divisible by reduction ratio " + std::to_string(cfg.reduction));
  }
  int64_t in_ch = 1;
  for (int64_t ch : cfg.channels) {
    convs.emplace_back(in_ch, ch, 3, 1, rng);
    bns.emplace_back(ch);
    in_ch = ch;
  }
  spatial_att = Conv2dLayer(c_last, 1, 1, 0, rng);
  ch_att1 = LinearLayer(c_last, c_last / cfg.reduction, rng);
  ch_att2 = LinearLayer(c_last / cfg.reduction, c_last, rng);
  proj = LinearLayer(c_last, cfg.embed_dim, rng);
  rec = RecurrentStack(cfg.embed_dim, cfg.rec, rng);
}

Tensor DartCnn::conv_encode(const Tensor& x, const ForwardCtx& ctx) {
  Tensor f = x;
  for (size_t i = 0; i < convs.size(); ++i) {
    f = ops::relu(bns[i].forward(convs[i].forward(f), ctx));
    if (i == 1) f = ops::maxpool2x2(f);  // single pool, after the 2nd block
  }
  return f;
}

Tensor DartCnn::dual_attention(const Tensor& f) const {
  Tensor a_spatial = ops::sigmoid(spatial_att.forward(f));  // [N,1,H,W]
  Tensor gap = ops::global_avgpool(f);                      // [N,C]
  Tensor a_channel = ops::sigmoid(ch_att2.forward(ops::relu(ch_att1.forward(gap))));
  a_channel = ops::reshape(a_channel, {f.dim(0), f.dim(1), 1, 1});
  return ops::mul(ops::mul(f, a_spatial), a_channel);
}

Tensor DartCnn::project(const Tensor& f_attn) const {
  return ops::relu(proj.forward(ops::global_avgpool(f_attn)));
}

Tensor DartCnn::forward(const Tensor& frames, const ForwardCtx& ctx) {
  if (frames.rank() != 4) throw Error("dart: frames must be [batch, time, H, W]");
  const int64_t B = frames.dim(0), T = frames.dim(1), H = frames.dim(2), W = frames.dim(3);
  Tensor x = ops::reshape(frames, {B * T, 1, H, W});
  Tensor f = conv_encode(x, ctx);
  Tensor f_attn = dual_attention(f);
  Tensor f_out = ops::reshape(project(f_attn), {B, T, cfg.embed_dim});
  Tensor h = ops::add(rec.forward(f_out, ctx), f_out);
  return ops::mean(h, 1);
}

void DartCnn::collect(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(prefix + ".conv" + std::to_string(i), out);
    bns[i].collect(prefix + ".bn" + std::to_string(i), out);
  }
  spatial_att.collect(prefix + ".spatial_att", out);
  ch_att1.collect(prefix + ".ch_att1", out);
  ch_att2.collect(prefix + ".ch_att2", out);
  proj.collect(prefix + ".proj", out);
  rec.collect(prefix + ".rec", out);
}

}  // namespace magnet
