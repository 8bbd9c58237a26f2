#pragma once

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "magnet/data.hpp"
#include "magnet/fusion.hpp"
#include "magnet/optim.hpp"

namespace magnet {

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double loss = 0.0;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]

  struct PrPoint {
    double threshold, precision, recall;
  };
  std::vector<std::vector<PrPoint>> pr_curves;  // per class, at logit thresholds

  std::vector<std::vector<double>> embeddings;  // fused vectors when requested
  std::vector<int64_t> embedding_labels;
};

double macro_f1_from_confusion(const std::vector<std::vector<int64_t>>& confusion);

struct RoundLog {
  int64_t round = 0;  // round index (federated) or epoch index (centralized)
  std::vector<std::string> clients;
  std::vector<double> client_losses;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_macro_f1 = 0.0;
  double lr = 0.0;
  int64_t patience = 0;
  double wall_seconds = 0.0;  // console only; never serialized
};

// Ordered named snapshot of a model's full state (trainable, frozen, buffers).
class GlobalModel {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };

  static GlobalModel snapshot(const TimeMagnetModel& model);
  void load_into(TimeMagnetModel& model) const;

  std::vector<Entry> entries;
};

// floor(K*ratio) distinct ids, uniform without replacement, sorted ascending.
std::vector<std::string> sample_clients(const std::vector<std::string>& ids, double ratio,
                                        Rng& rng);

// Unweighted mean per parameter over the given order; optional size weights.
GlobalModel fedavg_aggregate(const std::vector<GlobalModel>& clients,
                             const std::vector<double>& weights = {});

struct TrainHyper {
  AdamWConfig adamw;
  double clip_norm = 1.0;
  int grad_accum = 1;
  int batch = 8;
  double lambda_moe = 0.01;
  double augment_sigma = 0.01;
};

struct SchedulerConfig {
  bool enabled = true;
  double factor = 0.5;
  int patience = 3;
  double min_lr = 1e-6;
};

// Halves the rate after `patience` consecutive non-improving values and
// resets its counter after each reduction; never drops below min_lr.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(const SchedulerConfig& cfg) : cfg_(cfg) {}
  double update(double metric, double lr);

 private:
  SchedulerConfig cfg_;
  std::optional<double> best_;
  int bad_ = 0;
};

class EarlyStop {
 public:
  EarlyStop(int patience, bool minimize) : patience_(patience), minimize_(minimize) {}
  // returns true when training should stop
  bool update(double metric);
  bool improved_last() const { return improved_; }
  int count() const { return count_; }

 private:
  int patience_;
  bool minimize_;
  std::optional<double> best_;
  int count_ = 0;
  bool improved_ = false;
};

struct EpochStats {
  double mean_loss = 0.0;
  int64_t optimizer_steps = 0;
  std::vector<std::vector<double>> expert_usage;  // mean gate probs per block
};

// Shared minibatch loop: shuffle, optional augmentation, gradient
// accumulation, global-norm clipping, AdamW step. rng_for(e) supplies the
// deterministic stream for local epoch e.
EpochStats run_epochs(TimeMagnetModel& model, AdamW& opt,
                      const std::vector<const WindowSample*>& windows,
                      const std::vector<double>& cls_weights, const TrainHyper& hp,
                      const std::function<Rng(int)>& rng_for, int epochs);

MetricsReport evaluate(TimeMagnetModel& model, const std::vector<const WindowSample*>& windows,
                       const std::vector<double>& cls_weights, bool with_embeddings = false);

struct FedConfig {
  int rounds = 10;
  int local_epochs = 5;
  double sample_ratio = 0.43;
  int patience = 10;             // early-stop P_max on the monitored metric
  std::string monitor = "loss";  // "loss" or "accuracy"
  bool size_weighted = false;    // off: the plain mean
  std::map<std::string, double> client_lr;  // per-client multipliers, default 1
  bool capture_rounds = false;   // keep per-round parameter snapshots
};

struct CentralConfig {
  int epochs = 10;
  int patience = 6;
  std::string monitor = "accuracy";
  int optimizer_reset_period = 0;  // epochs; 0 keeps one optimizer throughout
  bool capture_epochs = false;
};

struct RunResult {
  GlobalModel best_model;
  GlobalModel final_model;
  std::vector<RoundLog> logs;
  std::vector<GlobalModel> captures;  // per round/epoch when requested
  std::vector<double> class_weights;
};

RunResult run_federated(const ModelConfig& mcfg, const SplitDatasets& data,
                        const TrainHyper& hp, const FedConfig& fed,
                        const SchedulerConfig& sched, uint64_t seed, int max_threads,
                        std::ostream* progress = nullptr);

RunResult run_centralized(const ModelConfig& mcfg, const SplitDatasets& data,
                          const TrainHyper& hp, const CentralConfig& central,
                          const SchedulerConfig& sched, uint64_t seed,
                          std::ostream* progress = nullptr);

}  // namespace magnet
