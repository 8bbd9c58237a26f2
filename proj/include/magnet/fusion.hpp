#pragma once

#include <optional>
#include <tuple>
#include <vector>

#include "magnet/dart_cnn.hpp"
#include "magnet/modality.hpp"
#include "magnet/nn.hpp"
#include "magnet/ts_encoder.hpp"

namespace magnet {

struct MoEConfig {
  int experts = 4;
  int top_k = 2;
  double lambda_balance = 0.01;
};

struct FusionConfig {
  int64_t dim = 32;  // D_f
  int blocks = 3;
  int gat_heads = 2;
  MoEConfig moe;
  double classifier_dropout = 0.1;
  int64_t num_classes = 7;
};

enum class FusionMode { Magnet, Concat, Attention };

FusionMode fusion_mode_from_name(const std::string& name);
const char* fusion_mode_name(FusionMode mode);

struct AdjacencySet {
  Tensor dynamic;  // cosine-based, symmetric, diag 1
  Tensor learned;  // sigmoid(W_adj)
  Tensor final_;   // dynamic ⊙ learned + 0.5 I
};

// Batch-mean representative per modality, then pairwise cosine adjacency.
// Zero-norm representatives are treated as cosine 0 and reported on stderr.
Tensor dynamic_adjacency(const Tensor& stacked /*[B,M,D]*/);

AdjacencySet final_adjacency(const Tensor& a_dynamic, const Tensor& w_adj);

struct RoutingResult {
  int experts = 0;
  int top_k = 0;
  std::vector<std::vector<int>> expert_indices;   // per item, k distinct, logit order
  std::vector<std::vector<double>> gate_weights;  // per item, k, sums to 1
  std::vector<std::vector<double>> full_probs;    // per item, pre-top-k softmax over E
};

// Top-k by logit with lowest-index tie-break; gate weights are the softmax
// over the k selected logits. Accepts [..., E] and flattens leading dims.
RoutingResult moe_route(const Tensor& gate_logits, int k);

// log(E) - H(mean over items of the full pre-top-k distributions), natural log.
double load_balance_loss(const RoutingResult& routing);

class Expert {
 public:
  Expert() = default;
  Expert(int64_t dim, Rng& rng);
  Tensor forward(const Tensor& x) const;  // [N,dim] -> [N,dim]
  void collect(const std::string& prefix, ParamMap& out) const;

  LinearLayer h1, h2, out;  // dim -> 2dim -> 2dim -> dim, skip around h2
  RMSNorm norm;
};

class MoELayer {
 public:
  MoELayer() = default;
  MoELayer(int64_t dim, const MoEConfig& cfg, Rng& rng);

  // output, balance loss (tape scalar), routing snapshot
  std::tuple<Tensor, Tensor, RoutingResult> forward(const Tensor& x /*[B,M,D]*/) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  LinearLayer gate;
  std::vector<Expert> experts;
  MoEConfig cfg;
};

class GatLayer {
 public:
  GatLayer() = default;
  GatLayer(int64_t dim, int heads, int64_t nodes, Rng& rng);

  // alpha_out, when given, receives the renormalized per-head coefficients
  // alpha'' [B,M,M], one tensor per head.
  Tensor forward(const Tensor& h /*[B,M,D]*/, const Tensor& a_final /*[M,M]*/,
                 std::vector<Tensor>* alpha_out = nullptr) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  int heads = 1;
  int64_t head_dim = 0;
  std::vector<Tensor> w;          // per head [D, head_dim]
  std::vector<Tensor> a_src;      // per head [head_dim, 1]
  std::vector<Tensor> a_dst;      // per head [head_dim, 1]
  std::vector<Tensor> node_bias;  // per head [M, head_dim]
  LinearLayer out_proj;
  static constexpr double kRenormEps = 1e-9;
};

// Pre-norm residual GAT -> MoE -> SwiGLU sandwich.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(int64_t dim, int heads, int64_t nodes, const MoEConfig& moe_cfg, Rng& rng);

  std::tuple<Tensor, Tensor, RoutingResult> forward(const Tensor& x, const Tensor& a_final,
                                                    const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  RMSNorm norm_gat, norm_moe, norm_ff;
  GatLayer gat;
  MoELayer moe;
  SwiGlu ff;
};

class FusionPool {
 public:
  FusionPool() = default;
  FusionPool(int64_t dim, Rng& rng);

  // softmax over per-modality feature means, then the weighted sum
  static Tensor attention_pool(const Tensor& h /*[B,M,D]*/);
  Tensor forward(const Tensor& h) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  LinearLayer proj;
  RMSNorm norm;
};

// Progressive reduction head: D -> D/2 -> D/4 -> classes.
class Classifier {
 public:
  Classifier() = default;
  Classifier(int64_t in_dim, int64_t classes, double dropout, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  LinearLayer l1, l2, l3;
  Dropout drop;
};

struct ModelConfig {
  std::vector<Modality> modalities = {Modality::Act, Modality::Acw, Modality::Dc, Modality::Pm};
  EncoderConfig ts;
  bool ts_share_weights = false;
  DartConfig dart_dc;
  DartConfig dart_pm;
  FusionConfig fusion;
  FusionMode mode = FusionMode::Magnet;
};

// The full multimodal classifier: per-modality encoders, learnable modality
// weights, projections to the fusion dim, three fusion blocks over a shared
// adjacency, attention-weighted pooling and the classification head.
// Concat and Attention modes swap the fusion core for the simpler baselines.
class TimeMagnetModel {
 public:
  struct Output {
    Tensor logits;
    Tensor moe_loss;  // scalar on the tape (0 for baselines)
    Tensor fused;     // [B, D_f] (or [B, M*D_f] in concat mode)
    std::vector<RoutingResult> routing;  // one per fusion block
    AdjacencySet adjacency;              // defined in magnet mode
  };

  TimeMagnetModel() = default;
  TimeMagnetModel(const ModelConfig& cfg, Rng& rng);

  Output forward(const ModalityBatch& batch, const ForwardCtx& ctx);
  void collect(ParamMap& out) const;
  TrainableReport param_report() const;

  ModelConfig cfg;
  std::optional<TsEncoder> enc_act, enc_acw;
  std::optional<DartCnn> enc_dc, enc_pm;
  std::vector<Tensor> modality_weight;      // one scalar per selected modality
  std::vector<LinearLayer> modality_proj;   // encoder dim -> D_f
  Tensor w_adj;                             // [M,M] logits (magnet mode)
  std::vector<FusionBlock> blocks;
  FusionPool pool;
  Classifier clf;
  LinearLayer attn_score_hidden;  // attention-fusion baseline
  Tensor attn_score_vec;          // [D,1]

 private:
  Tensor encode_modality(Modality m, const ModalityBatch& batch, const ForwardCtx& ctx);
};

}  // namespace magnet
