#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "magnet/modality.hpp"
#include "magnet/rng.hpp"
#include "magnet/tensor.hpp"

namespace magnet {

struct DataConfig {
  double window_sec = 0.5;
  double stride_sec = 0.25;
  double accel_hz = 100.0;
  double frame_hz = 16.0;
  double augment_sigma = 0.01;

  double rate_of(Modality m) const {
    return (m == Modality::Act || m == Modality::Acw) ? accel_hz : frame_hz;
  }
};

// Timestamped multichannel samples; timestamps are microseconds since epoch
// and strictly increasing.
struct Stream {
  std::vector<int64_t> t_us;
  std::vector<double> values;  // row-major [n, arity]
  int64_t arity = 0;

  int64_t size() const { return static_cast<int64_t>(t_us.size()); }
};

// Uniformly sampled stream produced by resampling.
struct UniformStream {
  double t0_us = 0.0;
  double step_us = 0.0;
  int64_t arity = 0;
  std::vector<double> values;

  int64_t frames() const { return arity == 0 ? 0 : static_cast<int64_t>(values.size()) / arity; }
};

struct RawRecording {
  std::string participant;
  int label = 0;  // exercise in [0, 7)
  std::map<Modality, Stream> streams;
};

struct WindowSample {
  Tensor act;  // [Wa, 3]
  Tensor acw;  // [Wa, 3]
  Tensor dc;   // [Tf, 12, 16]
  Tensor pm;   // [Tf, 32, 16]
  int label = 0;
  std::string participant;

  const Tensor& of(Modality m) const;
};

struct ClientDataset {
  std::string participant;
  std::vector<WindowSample> windows;
};

struct SplitSpec {
  std::vector<std::string> train, val, test;
};

struct SplitDatasets {
  std::vector<ClientDataset> train_clients;
  std::vector<WindowSample> val;
  std::vector<WindowSample> test;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// One CSV row per sample: timestamp in seconds (microsecond precision), then
// the per-modality value columns. A single leading header row is tolerated.
Stream parse_mex_csv(const std::string& path, Modality modality);

// Linear interpolation onto the uniform grid anchor + i/rate, ending at the
// last input timestamp (no extrapolation). anchor_us < 0 uses the stream
// start; an explicit anchor lets multimodal streams share one grid.
UniformStream resample_linear(const Stream& stream, double rate_hz, double anchor_us = -1.0);

// floor((frames - window) / stride) + 1, or 0 for streams shorter than one
// window.
int64_t window_count(int64_t frames, int64_t window_frames, int64_t stride_frames);

// Resamples all four streams of one recording onto a shared grid, windows
// each modality, and keeps the window indices present in every modality.
// dropped, when given, receives the number of unpaired windows discarded.
std::vector<WindowSample> windows_from_recording(const RawRecording& rec,
                                                 const DataConfig& cfg,
                                                 int64_t* dropped = nullptr);

struct NormStats {
  // per modality: one entry per channel (3 for accelerometers, 1 for grids)
  std::array<std::vector<double>, 4> mean;
  std::array<std::vector<double>, 4> stdev;
};

// Population statistics over the training split only; near-constant channels
// pass through with sigma := 1 and a warning.
NormStats compute_norm_stats(const std::vector<const WindowSample*>& train);
void apply_norm_stats(WindowSample& w, const NormStats& stats);

Tensor augment_gaussian(const Tensor& x, double sigma, Rng& rng);

SplitDatasets split_by_participant(std::vector<ClientDataset> clients, const SplitSpec& spec);

// Inverse-frequency weights w_c = N / (C * n_c); absent classes get 1.
std::vector<double> class_weights(const std::vector<int64_t>& labels, int64_t num_classes);

struct SynthConfig {
  int clients = 30;
  int windows_per_class = 6;
  double noise_sigma = 0.05;
  double amp_lo = 0.7;
  double amp_hi = 1.3;
};

struct ClientRecordings {
  std::string participant;
  std::vector<RawRecording> recordings;  // one per exercise class
};

// Deterministic non-IID generator: per class c, accelerometers carry
// sinusoids at (c+1)*0.4 Hz scaled by a per-client amplitude factor, depth
// frames carry a moving bright blob whose speed encodes c, and pressure
// frames carry a static patch whose area encodes c.
std::vector<ClientRecordings> synth_generate(const SynthConfig& synth, const DataConfig& cfg,
                                             uint64_t seed);

// Writes <root>/<participant>/<modality>/<label>.csv for every recording.
void export_mex_csv(const std::vector<ClientRecordings>& clients, const std::string& root);

// Parses a directory tree in the layout written by export_mex_csv and turns
// each recording into aligned windows. Participants are ordered by name.
std::vector<ClientDataset> load_mex_dataset(const std::string& root, const DataConfig& cfg);

// Stacks windows into batch tensors ([B,T,...] per modality).
ModalityBatch make_batch(const std::vector<const WindowSample*>& windows);

}  // namespace magnet
