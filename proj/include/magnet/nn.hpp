#pragma once

#include <string>
#include <vector>

#include "magnet/ops.hpp"
#include "magnet/rng.hpp"
#include "magnet/tensor.hpp"

namespace magnet {

// Per-call forward options. Dropout fires only when training with an rng;
// update_stats=false lets gradient checks run batch-norm in train mode
// without touching the running statistics.
struct ForwardCtx {
  bool train = false;
  bool update_stats = true;
  Rng* rng = nullptr;

  Rng* dropout_rng() const { return train ? rng : nullptr; }
};

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool buffer = false;
};

// Ordered, named view over a model's state. Iteration order is the
// registration order and is identical across replicas of the same config.
class ParamMap {
 public:
  void add(const std::string& name, const Tensor& t) { entries_.push_back({name, t, true, false}); }
  void add_frozen(const std::string& name, const Tensor& t) { entries_.push_back({name, t, false, false}); }
  void add_buffer(const std::string& name, const Tensor& t) { entries_.push_back({name, t, false, true}); }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;

 private:
  std::vector<ParamEntry> entries_;
};

struct TrainableReport {
  int64_t trainable = 0;
  int64_t frozen = 0;
  std::vector<ParamEntry> entries;
};

// Counts parameters by frozen flag; buffers are not parameters.
TrainableReport count_params(const ParamMap& params);

Tensor kaiming_uniform(const Shape& shape, int64_t fan_in, Rng& rng);

class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, Rng& rng, bool with_bias = true);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when bias-free
  int64_t in_dim = 0, out_dim = 0;
};

// Frozen random base weight plus a trainable low-rank update scaled by
// alpha/rank. rank == 0 degrades to a plain trainable projection.
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(int64_t in, int64_t out, int rank, double alpha, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  Tensor base;  // [in, out]
  Tensor lora_a;  // [in, rank]
  Tensor lora_b;  // [rank, out]
  int rank = 0;
  double scale = 0.0;
  int64_t in_dim = 0, out_dim = 0;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int64_t in_ch, int64_t out_ch, int kernel, int pad, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  Tensor weight;  // [out_ch, in_ch, k, k]
  Tensor bias;    // [out_ch]
  int pad = 1;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, const ForwardCtx& ctx);
  void collect(const std::string& prefix, ParamMap& out) const;

  Tensor gamma, beta;
  Tensor running_mean, running_var;  // buffers
  double momentum = 0.1, eps = 1e-5;
};

class RMSNorm {
 public:
  RMSNorm() = default;
  explicit RMSNorm(int64_t dim, double eps = 1e-6);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  Tensor gain;
  double eps = 1e-6;
};

class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate) : rate(rate) {}

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const {
    return ops::dropout(x, rate, ctx.dropout_rng());
  }

  double rate = 0.0;
};

// Bidirectional T5-style bucketing: 16 buckets per sign of (key - query),
// the first 8 exact, the rest log-spaced out to max_distance, then clamped.
int relative_position_bucket(int64_t rel, int num_buckets = 32, int max_distance = 128);

struct AttentionConfig {
  int64_t model_dim = 32;
  int heads = 2;
  int64_t head_dim = 16;
  int lora_rank = 0;
  double lora_alpha = 0.0;
  bool use_rel_bias = false;
  int num_buckets = 32;
  int max_distance = 128;
  double dropout = 0.0;
};

// Multi-head self-attention over [batch, seq, dim] with optional bucketed
// relative position bias added to the pre-softmax scores.
class AttentionLayer {
 public:
  AttentionLayer() = default;
  AttentionLayer(const AttentionConfig& cfg, Rng& rng);

  // attn_probs, when given, receives the post-softmax weights [B,h,C,C].
  Tensor forward(const Tensor& x, const ForwardCtx& ctx,
                 Tensor* attn_probs = nullptr) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  AttentionConfig cfg;
  LoraLinear wq, wk, wv;
  LinearLayer wo;
  Tensor bias_table;  // [num_buckets, heads]
};

enum class CellKind { Lstm, Rnn, Gru };

struct RecurrentCell {
  CellKind kind = CellKind::Rnn;
  Tensor w_ih, w_hh, b;
  int64_t hidden = 0;

  RecurrentCell() = default;
  RecurrentCell(CellKind kind, int64_t input, int64_t hidden, Rng& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct BiRecurrentLayer {
  RecurrentCell fwd, bwd;

  BiRecurrentLayer() = default;
  BiRecurrentLayer(CellKind kind, int64_t input, int64_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;  // [B,T,F] -> [B,T,2H]
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct RecurrentStackConfig {
  int64_t hidden = 16;
  int lstm_layers = 1;
  int rnn_layers = 1;
  int gru_layers = 1;
  double dropout = 0.1;
};

// Fixed LSTM -> RNN -> GRU cascade of bidirectional layers; every stage
// emits 2*hidden features. Dropout sits between stages in train mode.
class RecurrentStack {
 public:
  RecurrentStack() = default;
  RecurrentStack(int64_t input_dim, const RecurrentStackConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  std::vector<BiRecurrentLayer> lstm, rnn, gru;
  Dropout drop;
};

class SwiGlu {
 public:
  SwiGlu() = default;
  SwiGlu(int64_t dim, int64_t hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& out) const;

  LinearLayer gate, value, out;  // all bias-free
};

}  // namespace magnet
