#pragma once

#include <ostream>
#include <string>
#include <utility>

#include "magnet/fed.hpp"

namespace magnet {

// Binary checkpoint: "TMGN1" magic, a little-endian u64 manifest length, a
// JSON manifest (config hash, per-parameter name/shape/dtype/offset), then
// the raw little-endian float64 blob. Round-trips are bit-exact.
void save_checkpoint(const GlobalModel& model, const std::string& cfg_hash,
                     const std::string& path);

struct CheckpointData {
  std::string config_hash;
  GlobalModel model;
};

// Strict read: any corrupt magic, truncation, or manifest/blob inconsistency
// throws an error naming the problem.
CheckpointData read_checkpoint(const std::string& path);

// Loads parameters into the model by exact name+size match. A config-hash
// mismatch downgrades to a warning, loading the name/shape intersection.
// Returns {loaded, skipped} entry counts.
std::pair<int, int> load_checkpoint_into(TimeMagnetModel& model, const std::string& path,
                                         const std::string& expected_hash,
                                         std::ostream* warnings = nullptr);

}  // namespace magnet
