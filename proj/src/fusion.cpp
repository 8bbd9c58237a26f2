#include "magnet/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace magnet {

FusionMode fusion_mode_from_name(const std::string& name) {
  if (name == "magnet") return FusionMode::Magnet;
  if (name == "concat") return FusionMode::Concat;
  if (name == "attention") return FusionMode::Attention;
  throw Error("unknown fusion mode '" + name + "' (expected magnet, concat or attention)");
}

const char* fusion_mode_name(FusionMode mode) {
  switch (mode) {
    case FusionMode::Magnet: return "magnet";
    case FusionMode::Concat: return "concat";
    case FusionMode::Attention: return "attention";
  }
  return "?";
}

Tensor dynamic_adjacency(const Tensor& stacked) {
  if (stacked.rank() != 3) throw Error("dynamic_adjacency expects [batch, modalities, dim]");
  Tensor means = ops::mean(stacked, 0);  // [M,D]
  const int64_t M = means.dim(0), D = means.dim(1);
  for (int64_t i = 0; i < M; ++i) {
    double sq = 0.0;
    for (int64_t d = 0; d < D; ++d) {
      const double v = means.at({i, d});
      sq += v * v;
    }
    if (std::sqrt(sq) < 1e-12) {
      std::cerr << "[magnet] warning: zero-norm representative for modality node " << i
                << "; treating its cosines as 0\n";
    }
  }
  return ops::cosine_adjacency(means);
}

AdjacencySet final_adjacency(const Tensor& a_dynamic, const Tensor& w_adj) {
  if (a_dynamic.shape() != w_adj.shape()) {
    throw Error("final_adjacency: shape mismatch " + shape_str(a_dynamic.shape()) + " vs " +
                shape_str(w_adj.shape()));
  }
  const int64_t M = a_dynamic.dim(0);
  Tensor half_eye = Tensor::zeros({M, M});
  for (int64_t i = 0; i < M; ++i) half_eye.values()[static_cast<size_t>(i * M + i)] = 0.5;

  AdjacencySet out;
  out.dynamic = a_dynamic;
  out.learned = ops::sigmoid(w_adj);
  out.final_ = ops::add(ops::mul(a_dynamic, out.learned), half_eye);
  return out;
}

RoutingResult moe_route(const Tensor& gate_logits, int k) {
  const int64_t E = gate_logits.dim(-1);
  if (k < 1 || k > E) throw Error("moe_route: k must be in [1, experts]");
  const int64_t N = gate_logits.numel() / E;
  const auto& lv = gate_logits.values();

  RoutingResult r;
  r.experts = static_cast<int>(E);
  r.top_k = k;
  r.expert_indices.resize(static_cast<size_t>(N));
  r.gate_weights.resize(static_cast<size_t>(N));
  r.full_probs.resize(static_cast<size_t>(N));

  std::vector<int> order(static_cast<size_t>(E));
  for (int64_t i = 0; i < N; ++i) {
    const double* row = lv.data() + i * E;

    double mx = row[0];
    for (int64_t e = 1; e < E; ++e) mx = std::max(mx, row[e]);
    double denom = 0.0;
    auto& probs = r.full_probs[static_cast<size_t>(i)];
    probs.resize(static_cast<size_t>(E));
    for (int64_t e = 0; e < E; ++e) {
      probs[static_cast<size_t>(e)] = std::exp(row[e] - mx);
      denom += probs[static_cast<size_t>(e)];
    }
    for (double& p : probs) p /= denom;

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;  // lowest index wins on ties
    });
    auto& idx = r.expert_indices[static_cast<size_t>(i)];
    idx.assign(order.begin(), order.begin() + k);

    double sel_mx = row[idx[0]];
    double sel_denom = 0.0;
    auto& gw = r.gate_weights[static_cast<size_t>(i)];
    gw.resize(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) {
      gw[static_cast<size_t>(j)] = std::exp(row[idx[static_cast<size_t>(j)]] - sel_mx);
      sel_denom += gw[static_cast<size_t>(j)];
    }
    for (double& g : gw) g /= sel_denom;
  }
  return r;
}

double load_balance_loss(const RoutingResult& routing) {
  if (routing.full_probs.empty()) throw Error("load_balance_loss: no routed items");
  const size_t E = routing.full_probs[0].size();
  std::vector<double> pbar(E, 0.0);
  for (const auto& p : routing.full_probs)
    for (size_t e = 0; e < E; ++e) pbar[e] += p[e];
  for (double& v : pbar) v /= static_cast<double>(routing.full_probs.size());
  double entropy = 0.0;
  for (double v : pbar)
    if (v > 0.0) entropy -= v * std::log(v);
  return std::log(static_cast<double>(E)) - entropy;
}

Expert::Expert(int64_t dim, Rng& rng) : norm(2 * dim) {
  h1 = LinearLayer(dim, 2 * dim, rng);
  h2 = LinearLayer(2 * dim, 2 * dim, rng);
  out = LinearLayer(2 * dim, dim, rng);
}

Tensor Expert::forward(const Tensor& x) const {
  Tensor a = ops::gelu(h1.forward(x));
  Tensor b = ops::gelu(h2.forward(a));
  return out.forward(norm.forward(ops::add(a, b)));  // skip from hidden-1 to hidden-2
}

void Expert::collect(const std::string& prefix, ParamMap& out_map) const {
  h1.collect(prefix + ".h1", out_map);
  h2.collect(prefix + ".h2", out_map);
  norm.collect(prefix + ".norm", out_map);
  out.collect(prefix + ".out", out_map);
}

MoELayer::MoELayer(int64_t dim, const MoEConfig& cfg, Rng& rng) : cfg(cfg) {
  if (cfg.top_k < 1 || cfg.top_k > cfg.experts) {
    throw Error("moe: top_k must be in [1, experts]");
  }
  gate = LinearLayer(dim, cfg.experts, rng);
  for (int e = 0; e < cfg.experts; ++e) experts.emplace_back(dim, rng);
}

std::tuple<Tensor, Tensor, RoutingResult> MoELayer::forward(const Tensor& x) const {
  const int64_t B = x.dim(0), M = x.dim(1), D = x.dim(2);
  const int64_t N = B * M;
  const int64_t E = cfg.experts;
  Tensor x2 = ops::reshape(x, {N, D});
  Tensor logits = gate.forward(x2);  // [N,E]

  RoutingResult routing = moe_route(logits, cfg.top_k);

  // balance loss: log(E) - H(mean of full distributions)
  Tensor probs = ops::softmax(logits, -1);
  Tensor pbar = ops::mean(probs, 0);
  Tensor neg_entropy = ops::sum_all(ops::mul(pbar, ops::log_(pbar)));
  Tensor balance = ops::add_scalar(neg_entropy, std::log(static_cast<double>(E)));

  // softmax over the k selected logits, realized as a masked softmax so the
  // gate weights stay on the tape; non-selected experts get exactly 0.
  Tensor mask = Tensor::full({N, E}, -1e30);
  for (int64_t i = 0; i < N; ++i)
    for (int e : routing.expert_indices[static_cast<size_t>(i)])
      mask.values()[static_cast<size_t>(i * E + e)] = 0.0;
  Tensor sel_weights = ops::softmax(ops::add(logits, mask), -1);  // [N,E]

  Tensor out2;
  for (int e = 0; e < E; ++e) {
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < N; ++i) {
      const auto& idx = routing.expert_indices[static_cast<size_t>(i)];
      if (std::find(idx.begin(), idx.end(), e) != idx.end()) rows.push_back(i);
    }
    if (rows.empty()) continue;
    Tensor xe = ops::gather_rows(x2, rows);
    Tensor ye = experts[static_cast<size_t>(e)].forward(xe);
    Tensor we = ops::narrow(ops::gather_rows(sel_weights, rows), 1, e, 1);  // [n_e,1]
    Tensor contrib = ops::scatter_rows(ops::mul(ye, we), rows, N);
    out2 = out2.defined() ? ops::add(out2, contrib) : contrib;
  }
  if (!out2.defined()) out2 = Tensor::zeros({N, D});
  return {ops::reshape(out2, {B, M, D}), balance, routing};
}

void MoELayer::collect(const std::string& prefix, ParamMap& out) const {
  gate.collect(prefix + ".gate", out);
  for (size_t e = 0; e < experts.size(); ++e)
    experts[e].collect(prefix + ".expert" + std::to_string(e), out);
}

GatLayer::GatLayer(int64_t dim, int heads, int64_t nodes, Rng& rng) : heads(heads) {
  if (dim % heads != 0) {
    throw Error("gat: heads " + std::to_string(heads) + " must divide dim " +
                std::to_string(dim));
  }
  head_dim = dim / heads;
  for (int h = 0; h < heads; ++h) {
    w.push_back(kaiming_uniform({dim, head_dim}, dim, rng));
    a_src.push_back(kaiming_uniform({head_dim, 1}, head_dim, rng));
    a_dst.push_back(kaiming_uniform({head_dim, 1}, head_dim, rng));
    node_bias.push_back(Tensor::zeros({nodes, head_dim}, true));
  }
  out_proj = LinearLayer(dim, dim, rng);
}

Tensor GatLayer::forward(const Tensor& h, const Tensor& a_final,
                         std::vector<Tensor>* alpha_out) const {
  const int64_t B = h.dim(0), M = h.dim(1);
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    Tensor xb = ops::matmul(h, w[static_cast<size_t>(hd)]);           // [B,M,dh]
    Tensor s_src = ops::matmul(xb, a_src[static_cast<size_t>(hd)]);   // [B,M,1]
    Tensor s_dst = ops::matmul(xb, a_dst[static_cast<size_t>(hd)]);   // [B,M,1]
    Tensor scores = ops::leaky_relu(ops::add(s_src, ops::reshape(s_dst, {B, 1, M})), 0.2);
    Tensor alpha = ops::softmax(scores, -1);
    Tensor masked = ops::mul(alpha, a_final);  // α'_ij = α_ij · A_final[i][j]
    Tensor row_sum = ops::sum(masked, -1, /*keepdim=*/true);
    Tensor renorm = ops::div(masked, ops::add_scalar(row_sum, kRenormEps));
    if (alpha_out) alpha_out->push_back(renorm);
    Tensor msg = ops::matmul(renorm, xb);  // [B,M,dh]
    head_outs.push_back(ops::elu(ops::add(msg, node_bias[static_cast<size_t>(hd)])));
  }
  Tensor merged = heads == 1 ? head_outs[0] : ops::concat(head_outs, 2);
  return out_proj.forward(merged);
}

void GatLayer::collect(const std::string& prefix, ParamMap& out) const {
  for (int hd = 0; hd < heads; ++hd) {
    const std::string p = prefix + ".head" + std::to_string(hd);
    out.add(p + ".w", w[static_cast<size_t>(hd)]);
    out.add(p + ".a_src", a_src[static_cast<size_t>(hd)]);
    out.add(p + ".a_dst", a_dst[static_cast<size_t>(hd)]);
    out.add(p + ".node_bias", node_bias[static_cast<size_t>(hd)]);
  }
  out_proj.collect(prefix + ".out_proj", out);
}

FusionBlock::FusionBlock(int64_t dim, int heads, int64_t nodes, const MoEConfig& moe_cfg,
                         Rng& rng)
    : norm_gat(dim), norm_moe(dim), norm_ff(dim) {
  gat = GatLayer(dim, heads, nodes, rng);
  moe = MoELayer(dim, moe_cfg, rng);
  ff = SwiGlu(dim, 2 * dim, rng);
  // Residual branches start closed: with zero output projections every block
  // is the identity at initialization, so the encoder signal reaches the
  // pool/classifier undiluted and the fusion pathways open during training.
  auto zero = [](Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); };
  zero(gat.out_proj.weight);
  for (auto& expert : moe.experts) zero(expert.out.weight);
  zero(ff.out.weight);
}

std::tuple<Tensor, Tensor, RoutingResult> FusionBlock::forward(const Tensor& x,
                                                               const Tensor& a_final,
                                                               const ForwardCtx& /*ctx*/) const {
  Tensor h = ops::add(x, gat.forward(norm_gat.forward(x), a_final));
  auto [moe_out, balance, routing] = moe.forward(norm_moe.forward(h));
  h = ops::add(h, moe_out);
  h = ops::add(h, ff.forward(norm_ff.forward(h)));
  return {h, balance, routing};
}

void FusionBlock::collect(const std::string& prefix, ParamMap& out) const {
  norm_gat.collect(prefix + ".norm_gat", out);
  gat.collect(prefix + ".gat", out);
  norm_moe.collect(prefix + ".norm_moe", out);
  moe.collect(prefix + ".moe", out);
  norm_ff.collect(prefix + ".norm_ff", out);
  ff.collect(prefix + ".ff", out);
}

FusionPool::FusionPool(int64_t dim, Rng& rng) : norm(dim) {
  proj = LinearLayer(dim, dim, rng);
}

Tensor FusionPool::attention_pool(const Tensor& h) {
  const int64_t B = h.dim(0), M = h.dim(1);
  Tensor scores = ops::mean(h, -1);                  // [B,M]
  Tensor weights = ops::softmax(scores, -1);         // [B,M]
  Tensor expanded = ops::reshape(weights, {B, M, 1});
  return ops::sum(ops::mul(h, expanded), 1);         // [B,D]
}

Tensor FusionPool::forward(const Tensor& h) const {
  return norm.forward(proj.forward(attention_pool(h)));
}

void FusionPool::collect(const std::string& prefix, ParamMap& out) const {
  proj.collect(prefix + ".proj", out);
  norm.collect(prefix + ".norm", out);
}

Classifier::Classifier(int64_t in_dim, int64_t classes, double dropout, Rng& rng)
    : drop(dropout) {
  if (in_dim < 4) throw Error("classifier: input dim must be at least 4");
  l1 = LinearLayer(in_dim, in_dim / 2, rng);
  l2 = LinearLayer(in_dim / 2, in_dim / 4, rng);
  l3 = LinearLayer(in_dim / 4, classes, rng);
}

Tensor Classifier::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor h = drop.forward(ops::relu(l1.forward(x)), ctx);
  h = drop.forward(ops::relu(l2.forward(h)), ctx);
  return l3.forward(h);
}

void Classifier::collect(const std::string& prefix, ParamMap& out) const {
  l1.collect(prefix + ".l1", out);
  l2.collect(prefix + ".l2", out);
  l3.collect(prefix + ".l3", out);
}

namespace {

// Stable per-component init streams keep sibling weights identical across
// different modality subsets.
enum ComponentStream : uint64_t {
  kInitAct = 11,
  kInitAcw = 12,
  kInitDc = 13,
  kInitPm = 14,
  kInitProj = 15,
  kInitFusion = 16,
  kInitClassifier = 17,
  kInitAttnFusion = 18,
};

}  // namespace

TimeMagnetModel::TimeMagnetModel(const ModelConfig& cfg_in, Rng& rng) : cfg(cfg_in) {
  if (cfg.modalities.empty()) throw Error("model: modality subset must be non-empty");
  std::sort(cfg.modalities.begin(), cfg.modalities.end());
  cfg.modalities.erase(std::unique(cfg.modalities.begin(), cfg.modalities.end()),
                       cfg.modalities.end());

  const auto selected = [&](Modality m) {
    return std::find(cfg.modalities.begin(), cfg.modalities.end(), m) != cfg.modalities.end();
  };

  if (selected(Modality::Act)) {
    Rng r = rng.fork(kInitAct);
    enc_act.emplace(cfg.ts, r);
  }
  if (selected(Modality::Acw) && !(cfg.ts_share_weights && enc_act.has_value())) {
    Rng r = rng.fork(kInitAcw);
    enc_acw.emplace(cfg.ts, r);
  }
  if (selected(Modality::Dc)) {
    Rng r = rng.fork(kInitDc);
    enc_dc.emplace(cfg.dart_dc, r);
  }
  if (selected(Modality::Pm)) {
    Rng r = rng.fork(kInitPm);
    enc_pm.emplace(cfg.dart_pm, r);
  }

  Rng proj_rng = rng.fork(kInitProj);
  for (Modality m : cfg.modalities) {
    modality_weight.push_back(Tensor::full({1}, 1.0, true));
    const int64_t enc_dim = (m == Modality::Act || m == Modality::Acw)
                                ? cfg.ts.model_dim
                                : (m == Modality::Dc ? cfg.dart_dc.embed_dim
                                                     : cfg.dart_pm.embed_dim);
    Rng r = proj_rng.fork(static_cast<uint64_t>(m));
    modality_proj.emplace_back(enc_dim, cfg.fusion.dim, r);
  }

  const int64_t M = static_cast<int64_t>(cfg.modalities.size());
  Rng fusion_rng = rng.fork(kInitFusion);
  Rng clf_rng = rng.fork(kInitClassifier);
  switch (cfg.mode) {
    case FusionMode::Magnet: {
      w_adj = Tensor::zeros({M, M}, true);
      for (int b = 0; b < cfg.fusion.blocks; ++b) {
        Rng r = fusion_rng.fork(static_cast<uint64_t>(b));
        blocks.emplace_back(cfg.fusion.dim, cfg.fusion.gat_heads, M, cfg.fusion.moe, r);
      }
      Rng rp = fusion_rng.fork(1000);
      pool = FusionPool(cfg.fusion.dim, rp);
      clf = Classifier(cfg.fusion.dim, cfg.fusion.num_classes, cfg.fusion.classifier_dropout,
                       clf_rng);
      break;
    }
    case FusionMode::Concat: {
      clf = Classifier(M * cfg.fusion.dim, cfg.fusion.num_classes,
                       cfg.fusion.classifier_dropout, clf_rng);
      break;
    }
    case FusionMode::Attention: {
      Rng r = rng.fork(kInitAttnFusion);
      attn_score_hidden = LinearLayer(cfg.fusion.dim, cfg.fusion.dim, r);
      attn_score_vec = kaiming_uniform({cfg.fusion.dim, 1}, cfg.fusion.dim, r);
      clf = Classifier(cfg.fusion.dim, cfg.fusion.num_classes, cfg.fusion.classifier_dropout,
                       clf_rng);
      break;
    }
  }
}

Tensor TimeMagnetModel::encode_modality(Modality m, const ModalityBatch& batch,
                                        const ForwardCtx& ctx) {
  const Tensor& x = batch.of(m);
  if (!x.defined()) {
    throw Error(std::string("model: batch is missing modality ") + modality_name(m));
  }
  switch (m) {
    case Modality::Act: return enc_act->forward(x, ctx);
    case Modality::Acw: return enc_acw ? enc_acw->forward(x, ctx) : enc_act->forward(x, ctx);
    case Modality::Dc: return enc_dc->forward(x, ctx);
    case Modality::Pm: return enc_pm->forward(x, ctx);
  }
  throw Error("bad modality");
}

TimeMagnetModel::Output TimeMagnetModel::forward(const ModalityBatch& batch,
                                                 const ForwardCtx& ctx) {
  std::vector<Tensor> projected;
  projected.reserve(cfg.modalities.size());
  for (size_t i = 0; i < cfg.modalities.size(); ++i) {
    Tensor emb = encode_modality(cfg.modalities[i], batch, ctx);
    Tensor weighted = ops::mul(emb, modality_weight[i]);
    projected.push_back(modality_proj[i].forward(weighted));  // [B, D_f]
  }
  const int64_t B = projected[0].dim(0);
  const int64_t M = static_cast<int64_t>(projected.size());
  const int64_t D = cfg.fusion.dim;

  Output out;
  switch (cfg.mode) {
    case FusionMode::Magnet: {
      std::vector<Tensor> stacked;
      stacked.reserve(projected.size());
      for (Tensor& p : projected) stacked.push_back(ops::reshape(p, {B, 1, D}));
      Tensor h = M == 1 ? stacked[0] : ops::concat(stacked, 1);  // [B,M,D]

      out.adjacency = final_adjacency(dynamic_adjacency(h), w_adj);
      Tensor moe_loss = Tensor::scalar(0.0);
      for (const auto& block : blocks) {
        auto [h_next, balance, routing] = block.forward(h, out.adjacency.final_, ctx);
        h = h_next;
        moe_loss = ops::add(moe_loss, balance);
        out.routing.push_back(std::move(routing));
      }
      out.fused = pool.forward(h);
      out.moe_loss = moe_loss;
      break;
    }
    case FusionMode::Concat: {
      out.fused = M == 1 ? projected[0] : ops::concat(projected, 1);  // [B, M*D]
      out.moe_loss = Tensor::scalar(0.0);
      break;
    }
    case FusionMode::Attention: {
      std::vector<Tensor> stacked;
      for (Tensor& p : projected) stacked.push_back(ops::reshape(p, {B, 1, D}));
      Tensor h = M == 1 ? stacked[0] : ops::concat(stacked, 1);
      Tensor s = ops::matmul(ops::tanh_(attn_score_hidden.forward(h)), attn_score_vec);
      Tensor weights = ops::softmax(ops::reshape(s, {B, M}), -1);
      out.fused = ops::sum(ops::mul(h, ops::reshape(weights, {B, M, 1})), 1);
      out.moe_loss = Tensor::scalar(0.0);
      break;
    }
  }
  out.logits = clf.forward(out.fused, ctx);
  return out;
}

void TimeMagnetModel::collect(ParamMap& out) const {
  const bool shared = cfg.ts_share_weights && enc_act.has_value() && !enc_acw.has_value();
  if (enc_act) enc_act->collect(shared ? "encoder.ts_shared" : "encoder.act", out);
  if (enc_acw) enc_acw->collect("encoder.acw", out);
  if (enc_dc) enc_dc->collect("encoder.dc", out);
  if (enc_pm) enc_pm->collect("encoder.pm", out);
  for (size_t i = 0; i < cfg.modalities.size(); ++i) {
    const std::string name = modality_name(cfg.modalities[i]);
    out.add(std::string("modality_weight.") + name, modality_weight[i]);
    modality_proj[i].collect(std::string("fusion_in.") + name, out);
  }
  if (cfg.mode == FusionMode::Magnet) {
    out.add("adjacency.w_adj", w_adj);
    for (size_t b = 0; b < blocks.size(); ++b)
      blocks[b].collect("fusion.block" + std::to_string(b), out);
    pool.collect("fusion.pool", out);
  }
  if (cfg.mode == FusionMode::Attention) {
    attn_score_hidden.collect("attn_fusion.hidden", out);
    out.add("attn_fusion.vec", attn_score_vec);
  }
  clf.collect("classifier", out);
}

TrainableReport TimeMagnetModel::param_report() const {
  ParamMap pm;
  collect(pm);
  return count_params(pm);
}

}  // namespace magnet
