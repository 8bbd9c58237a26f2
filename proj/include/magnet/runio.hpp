#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "magnet/checkpoint.hpp"
#include "magnet/config.hpp"
#include "magnet/gradcheck.hpp"

namespace magnet {

struct PreparedData {
  SplitDatasets splits;
  NormStats stats;
  std::vector<std::string> participants;
  SplitSpec spec;
};

// 70/10/20 partition of the sorted participant list (21/3/6 for 30).
SplitSpec default_split(const std::vector<std::string>& participants);

// load -> split -> normalize with training-split statistics.
PreparedData prepare_dataset(const RunConfig& cfg);

void write_text_file(const std::string& path, const std::string& content);

// Round logs as line-delimited JSON. Wall-clock fields are deliberately
// excluded so identical runs produce byte-identical files.
void write_logs_jsonl(const std::vector<RoundLog>& logs, const std::string& path);

nlohmann::json metrics_to_json(const MetricsReport& report);

// metrics.json + pr_curves.csv (+ embeddings.csv when the report has them).
void export_metrics(const MetricsReport& report, const std::string& dir);

// Full training run: prepare data, train, checkpoint the best model, write
// logs and the test-split metrics into the run directory.
MetricsReport train_and_export(const RunConfig& cfg, bool federated, std::ostream& out);

// Load a checkpoint, evaluate one split, export metrics.
MetricsReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                                  const std::string& split, bool with_embeddings,
                                  std::ostream& out);

// Commands shared by the CLI and the acceptance suite; all return exit codes.
int cmd_synth(const RunConfig& cfg, std::ostream& out);
int cmd_train(const RunConfig& cfg, bool federated, std::ostream& out);
int cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_path,
                 const std::string& split, bool with_embeddings, std::ostream& out);
int cmd_ablate(const RunConfig& cfg, bool federated, std::ostream& out);
int cmd_gradcheck(uint64_t seed, std::ostream& out);

// The full finite-difference suite behind `gradcheck`, one entry per block.
std::vector<std::pair<std::string, GradCheckReport>> gradcheck_suite(uint64_t seed);

// MAGNET_THREADS, defaulting to 1.
int env_thread_cap();

}  // namespace magnet
