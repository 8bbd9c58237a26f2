#include "magnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace fs = std::filesystem;

namespace magnet {

namespace {

constexpr double kTwoPi = 6.283185307179586;

bool parse_double(std::string_view field, double& out) {
  const char* begin = field.data();
  const char* end = begin + field.size();
  while (begin != end && (*begin == ' ' || *begin == '\t')) ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc()) return false;
  while (ptr != end && (*ptr == ' ' || *ptr == '\t' || *ptr == '\r')) ++ptr;
  return ptr == end;
}

int64_t frames_per_window(double window_sec, double rate_hz, const char* what) {
  const double exact = window_sec * rate_hz;
  const int64_t rounded = llround(exact);
  if (rounded < 1 || std::abs(exact - static_cast<double>(rounded)) > 1e-9) {
    throw Error(std::string(what) + ": " + std::to_string(window_sec) + " s at " +
                std::to_string(rate_hz) + " Hz is not a whole frame count");
  }
  return rounded;
}

}  // namespace

const Tensor& WindowSample::of(Modality m) const {
  switch (m) {
    case Modality::Act: return act;
    case Modality::Acw: return acw;
    case Modality::Dc: return dc;
    case Modality::Pm: return pm;
  }
  throw Error("bad modality");
}

Stream parse_mex_csv(const std::string& path, Modality modality) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  const int64_t arity = modality_arity(modality);

  Stream stream;
  stream.arity = arity;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;

    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const size_t comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }

    double sec = 0.0;
    if (!parse_double(fields[0], sec)) {
      if (line_no == 1 && stream.t_us.empty()) continue;  // tolerated header row
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": unparsable timestamp '" + std::string(fields[0]) + "'");
    }
    if (static_cast<int64_t>(fields.size()) - 1 != arity) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(arity) + " values for " + modality_name(modality) +
                       ", got " + std::to_string(fields.size() - 1));
    }
    const int64_t t_us = llround(sec * 1e6);
    if (!stream.t_us.empty() && t_us <= stream.t_us.back()) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": non-monotone timestamp " + std::string(fields[0]));
    }
    stream.t_us.push_back(t_us);
    for (int64_t v = 0; v < arity; ++v) {
      double value = 0.0;
      if (!parse_double(fields[static_cast<size_t>(v + 1)], value)) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": unparsable number '" +
                         std::string(fields[static_cast<size_t>(v + 1)]) + "'");
      }
      stream.values.push_back(value);
    }
  }
  return stream;
}

UniformStream resample_linear(const Stream& stream, double rate_hz, double anchor_us) {
  if (rate_hz <= 0.0) throw Error("resample: rate must be positive");
  if (stream.size() < 2) {
    throw Error("resample: need at least 2 samples, got " + std::to_string(stream.size()));
  }
  const double first = static_cast<double>(stream.t_us.front());
  const double last = static_cast<double>(stream.t_us.back());
  double anchor = anchor_us < 0.0 ? first : anchor_us;
  if (anchor < first || anchor > last) {
    throw Error("resample: anchor outside the stream span");
  }

  UniformStream out;
  out.t0_us = anchor;
  out.step_us = 1e6 / rate_hz;
  out.arity = stream.arity;

  int64_t j = 0;
  const int64_t n = stream.size();
  for (int64_t i = 0;; ++i) {
    const double t_q = anchor + static_cast<double>(i) * out.step_us;
    // timestamps are quantized to whole microseconds, so a query up to half a
    // quantum past the last stamp still lies inside the recording
    if (t_q > last + 0.5) break;
    while (j + 1 < n && static_cast<double>(stream.t_us[static_cast<size_t>(j + 1)]) <= t_q) ++j;
    if (j == n - 1) {
      for (int64_t c = 0; c < stream.arity; ++c)
        out.values.push_back(stream.values[static_cast<size_t>((n - 1) * stream.arity + c)]);
      continue;
    }
    const double t_lo = static_cast<double>(stream.t_us[static_cast<size_t>(j)]);
    const double t_hi = static_cast<double>(stream.t_us[static_cast<size_t>(j + 1)]);
    const double frac = (t_q - t_lo) / (t_hi - t_lo);
    for (int64_t c = 0; c < stream.arity; ++c) {
      const double lo = stream.values[static_cast<size_t>(j * stream.arity + c)];
      if (frac == 0.0) {
        out.values.push_back(lo);
      } else {
        const double hi = stream.values[static_cast<size_t>((j + 1) * stream.arity + c)];
        out.values.push_back(lo + frac * (hi - lo));
      }
    }
  }
  return out;
}

int64_t window_count(int64_t frames, int64_t window_frames, int64_t stride_frames) {
  if (window_frames < 1 || stride_frames < 1) throw Error("window/stride must be positive");
  if (frames < window_frames) return 0;
  return (frames - window_frames) / stride_frames + 1;
}

std::vector<WindowSample> windows_from_recording(const RawRecording& rec,
                                                 const DataConfig& cfg, int64_t* dropped) {
  for (Modality m : kAllModalities) {
    if (rec.streams.find(m) == rec.streams.end()) {
      throw Error(std::string("recording is missing modality ") + modality_name(m));
    }
  }

  double t0 = 0.0, t_end = 0.0;
  bool first = true;
  for (const auto& [m, s] : rec.streams) {
    if (s.size() < 2) throw Error("resample: need at least 2 samples, got " +
                                  std::to_string(s.size()));
    const double lo = static_cast<double>(s.t_us.front());
    const double hi = static_cast<double>(s.t_us.back());
    t0 = first ? lo : std::max(t0, lo);
    t_end = first ? hi : std::min(t_end, hi);
    first = false;
  }
  if (dropped) *dropped = 0;
  if (t0 >= t_end) {
    std::cerr << "[magnet] warning: streams of participant " << rec.participant
              << " label " << rec.label << " share no time span; 0 windows\n";
    return {};
  }

  std::array<UniformStream, 4> uni;
  std::array<int64_t, 4> win{}, stride{}, count{};
  int64_t aligned = -1;
  for (Modality m : kAllModalities) {
    const size_t i = static_cast<size_t>(m);
    const double rate = cfg.rate_of(m);
    uni[i] = resample_linear(rec.streams.at(m), rate, t0);
    win[i] = frames_per_window(cfg.window_sec, rate, "window");
    stride[i] = frames_per_window(cfg.stride_sec, rate, "stride");
    count[i] = window_count(uni[i].frames(), win[i], stride[i]);
    aligned = aligned < 0 ? count[i] : std::min(aligned, count[i]);
  }
  if (dropped) {
    for (int64_t c : count) *dropped += c - aligned;
  }

  std::vector<WindowSample> out;
  out.reserve(static_cast<size_t>(aligned));
  for (int64_t k = 0; k < aligned; ++k) {
    WindowSample w;
    w.label = rec.label;
    w.participant = rec.participant;
    for (Modality m : kAllModalities) {
      const size_t i = static_cast<size_t>(m);
      const int64_t start = k * stride[i];
      const int64_t arity = uni[i].arity;
      std::vector<double> vals(static_cast<size_t>(win[i] * arity));
      std::copy(uni[i].values.begin() + start * arity,
                uni[i].values.begin() + (start + win[i]) * arity, vals.begin());
      Shape shape;
      if (m == Modality::Act || m == Modality::Acw) {
        shape = {win[i], 3};
      } else {
        auto [h, wd] = modality_grid(m);
        shape = {win[i], h, wd};
      }
      Tensor t = Tensor::from_values(shape, std::move(vals));
      switch (m) {
        case Modality::Act: w.act = t; break;
        case Modality::Acw: w.acw = t; break;
        case Modality::Dc: w.dc = t; break;
        case Modality::Pm: w.pm = t; break;
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

namespace {

int64_t channels_of(Modality m) {
  return (m == Modality::Act || m == Modality::Acw) ? 3 : 1;
}

}  // namespace

NormStats compute_norm_stats(const std::vector<const WindowSample*>& train) {
  if (train.empty()) throw Error("norm stats need a non-empty training split");
  NormStats stats;
  for (Modality m : kAllModalities) {
    const size_t mi = static_cast<size_t>(m);
    const int64_t C = channels_of(m);
    stats.mean[mi].assign(static_cast<size_t>(C), 0.0);
    stats.stdev[mi].assign(static_cast<size_t>(C), 1.0);
    for (int64_t c = 0; c < C; ++c) {
      double sum = 0.0;
      int64_t n = 0;
      for (const WindowSample* w : train) {
        const auto& v = w->of(m).values();
        for (size_t i = static_cast<size_t>(c); i < v.size(); i += static_cast<size_t>(C)) {
          sum += v[i];
          ++n;
        }
      }
      const double mu = sum / static_cast<double>(n);
      double sq = 0.0;
      for (const WindowSample* w : train) {
        const auto& v = w->of(m).values();
        for (size_t i = static_cast<size_t>(c); i < v.size(); i += static_cast<size_t>(C)) {
          const double d = v[i] - mu;
          sq += d * d;
        }
      }
      double sigma = std::sqrt(sq / static_cast<double>(n));  // population
      if (sigma < 1e-8) {
        std::cerr << "[magnet] warning: near-constant channel " << c << " of "
                  << modality_name(m) << "; leaving scale at 1\n";
        sigma = 1.0;
      }
      stats.mean[mi][static_cast<size_t>(c)] = mu;
      stats.stdev[mi][static_cast<size_t>(c)] = sigma;
    }
  }
  return stats;
}

void apply_norm_stats(WindowSample& w, const NormStats& stats) {
  for (Modality m : kAllModalities) {
    const size_t mi = static_cast<size_t>(m);
    const int64_t C = channels_of(m);
    Tensor t = w.of(m);
    auto& v = const_cast<std::vector<double>&>(t.values());
    for (int64_t c = 0; c < C; ++c) {
      const double mu = stats.mean[mi][static_cast<size_t>(c)];
      const double inv = 1.0 / stats.stdev[mi][static_cast<size_t>(c)];
      for (size_t i = static_cast<size_t>(c); i < v.size(); i += static_cast<size_t>(C))
        v[i] = (v[i] - mu) * inv;
    }
  }
}

Tensor augment_gaussian(const Tensor& x, double sigma, Rng& rng) {
  if (sigma == 0.0) return x;
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] + sigma * rng.normal();
  return out;
}

SplitDatasets split_by_participant(std::vector<ClientDataset> clients, const SplitSpec& spec) {
  std::sort(clients.begin(), clients.end(),
            [](const ClientDataset& a, const ClientDataset& b) {
              return a.participant < b.participant;
            });

  std::map<std::string, int> assignment;  // 0 train, 1 val, 2 test
  auto assign = [&](const std::vector<std::string>& ids, int which) {
    for (const auto& id : ids) {
      if (assignment.count(id)) {
        throw Error("split: participant '" + id + "' appears in two splits");
      }
      assignment[id] = which;
    }
  };
  assign(spec.train, 0);
  assign(spec.val, 1);
  assign(spec.test, 2);

  std::set<std::string> present;
  for (const auto& c : clients) present.insert(c.participant);
  for (const auto& [id, which] : assignment) {
    if (!present.count(id)) throw Error("split: unknown participant '" + id + "'");
  }

  SplitDatasets out;
  for (auto& c : clients) {
    auto it = assignment.find(c.participant);
    if (it == assignment.end()) {
      throw Error("split: participant '" + c.participant + "' not covered by the split spec");
    }
    switch (it->second) {
      case 0: out.train_clients.push_back(std::move(c)); break;
      case 1:
        for (auto& w : c.windows) out.val.push_back(std::move(w));
        break;
      case 2:
        for (auto& w : c.windows) out.test.push_back(std::move(w));
        break;
    }
  }
  return out;
}

std::vector<double> class_weights(const std::vector<int64_t>& labels, int64_t num_classes) {
  std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
  for (int64_t y : labels) {
    if (y < 0 || y >= num_classes) throw Error("class_weights: label out of range");
    ++counts[static_cast<size_t>(y)];
  }
  const double n = static_cast<double>(labels.size());
  std::vector<double> w(static_cast<size_t>(num_classes), 1.0);
  for (int64_t c = 0; c < num_classes; ++c) {
    if (counts[static_cast<size_t>(c)] == 0) {
      std::cerr << "[magnet] warning: class " << c << " absent from the training split; "
                << "weight left at 1\n";
    } else {
      w[static_cast<size_t>(c)] =
          n / (static_cast<double>(num_classes) * static_cast<double>(counts[static_cast<size_t>(c)]));
    }
  }
  return w;
}

namespace {

Stream synth_accel_stream(int64_t frames, double rate_hz, double class_freq, double amp,
                          double noise_sigma, Rng rng) {
  Stream s;
  s.arity = 3;
  // fixed per-axis phases; axis 0 starts at sin(0) = 0
  const std::array<double, 3> phase = {0.0, kTwoPi / 3.0, 2.0 * kTwoPi / 3.0};
  for (int64_t k = 0; k < frames; ++k) {
    const int64_t t_us = llround(static_cast<double>(k) * 1e6 / rate_hz);
    s.t_us.push_back(t_us);
    const double t_sec = static_cast<double>(t_us) * 1e-6;
    for (int c = 0; c < 3; ++c) {
      s.values.push_back(amp * std::sin(kTwoPi * class_freq * t_sec + phase[static_cast<size_t>(c)]) +
                         noise_sigma * rng.normal());
    }
  }
  return s;
}

Stream synth_dc_stream(int64_t frames, double rate_hz, int cls, double noise_sigma, Rng rng) {
  const int64_t H = 12, W = 16;
  const int kSubSamples = 4;  // integrate the blob over the frame interval
  Stream s;
  s.arity = H * W;
  const double y0 = rng.uniform(3.0, 9.0);
  const double x0 = rng.uniform(0.0, static_cast<double>(W));
  const double speed = 0.5 * static_cast<double>(cls + 1);  // px per frame
  const double sigma_blob = 1.5;
  for (int64_t k = 0; k < frames; ++k) {
    s.t_us.push_back(llround(static_cast<double>(k) * 1e6 / rate_hz));
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        // motion blur: a fast blob smears across the frame interval, so the
        // per-frame appearance itself carries the class speed
        double v = 0.0;
        for (int sub = 0; sub < kSubSamples; ++sub) {
          const double t = static_cast<double>(k) + static_cast<double>(sub) / kSubSamples;
          const double cx = std::fmod(x0 + speed * t, static_cast<double>(W));
          double dx = std::abs(static_cast<double>(x) - cx);
          dx = std::min(dx, static_cast<double>(W) - dx);  // horizontal wrap
          const double dy = static_cast<double>(y) - y0;
          v += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_blob * sigma_blob));
        }
        s.values.push_back(v / kSubSamples + noise_sigma * rng.normal());
      }
    }
  }
  return s;
}

Stream synth_pm_stream(int64_t frames, double rate_hz, int cls, double noise_sigma, Rng rng) {
  const int64_t H = 32, W = 16;
  Stream s;
  s.arity = H * W;
  const double radius = 1.0 + 0.45 * static_cast<double>(cls);  // area encodes the class
  const double cy = rng.uniform(radius + 1.0, static_cast<double>(H) - radius - 1.0);
  const double cx = rng.uniform(radius + 1.0, static_cast<double>(W) - radius - 1.0);
  for (int64_t k = 0; k < frames; ++k) {
    s.t_us.push_back(llround(static_cast<double>(k) * 1e6 / rate_hz));
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double v = (dy * dy + dx * dx <= radius * radius) ? 1.0 : 0.0;
        s.values.push_back(v + noise_sigma * rng.normal());
      }
    }
  }
  return s;
}

}  // namespace

std::vector<ClientRecordings> synth_generate(const SynthConfig& synth, const DataConfig& cfg,
                                             uint64_t seed) {
  if (synth.clients < 1) throw Error("synth: need at least one client");
  Rng root = Rng(seed).fork(kStreamSynth);

  const int64_t wa = frames_per_window(cfg.window_sec, cfg.accel_hz, "window");
  const int64_t sa = frames_per_window(cfg.stride_sec, cfg.accel_hz, "stride");
  const int64_t wf = frames_per_window(cfg.window_sec, cfg.frame_hz, "window");
  const int64_t sf = frames_per_window(cfg.stride_sec, cfg.frame_hz, "stride");
  const int64_t n = synth.windows_per_class;
  const int64_t accel_frames = wa + sa * (n - 1);
  const int64_t frame_frames = wf + sf * (n - 1);

  std::vector<ClientRecordings> out;
  for (int ci = 0; ci < synth.clients; ++ci) {
    Rng client_rng = root.fork(static_cast<uint64_t>(ci));
    const double amp = client_rng.uniform(synth.amp_lo, synth.amp_hi);  // non-IID shift

    ClientRecordings cr;
    char name[16];
    std::snprintf(name, sizeof(name), "c%02d", ci);
    cr.participant = name;
    for (int cls = 0; cls < 7; ++cls) {
      Rng rec_rng = client_rng.fork(static_cast<uint64_t>(cls));
      RawRecording rec;
      rec.participant = cr.participant;
      rec.label = cls;
      const double freq = 0.4 * static_cast<double>(cls + 1);
      rec.streams[Modality::Act] = synth_accel_stream(accel_frames, cfg.accel_hz, freq, amp,
                                                      synth.noise_sigma, rec_rng.fork(0));
      rec.streams[Modality::Acw] = synth_accel_stream(accel_frames, cfg.accel_hz, freq, amp,
                                                      synth.noise_sigma, rec_rng.fork(1));
      rec.streams[Modality::Dc] =
          synth_dc_stream(frame_frames, cfg.frame_hz, cls, synth.noise_sigma, rec_rng.fork(2));
      rec.streams[Modality::Pm] =
          synth_pm_stream(frame_frames, cfg.frame_hz, cls, synth.noise_sigma, rec_rng.fork(3));
      cr.recordings.push_back(std::move(rec));
    }
    out.push_back(std::move(cr));
  }
  return out;
}

void export_mex_csv(const std::vector<ClientRecordings>& clients, const std::string& root) {
  for (const auto& client : clients) {
    for (const auto& rec : client.recordings) {
      for (Modality m : kAllModalities) {
        const fs::path dir = fs::path(root) / client.participant / modality_name(m);
        fs::create_directories(dir);
        const fs::path file = dir / (std::to_string(rec.label) + ".csv");
        std::ofstream out(file);
        if (!out) throw Error("cannot write " + file.string());
        const Stream& s = rec.streams.at(m);
        char buf[64];
        for (int64_t i = 0; i < s.size(); ++i) {
          const int64_t us = s.t_us[static_cast<size_t>(i)];
          std::snprintf(buf, sizeof(buf), "%lld.%06lld", static_cast<long long>(us / 1000000),
                        static_cast<long long>(us % 1000000));
          out << buf;
          for (int64_t c = 0; c < s.arity; ++c) {
            std::snprintf(buf, sizeof(buf), "%.12g",
                          s.values[static_cast<size_t>(i * s.arity + c)]);
            out << ',' << buf;
          }
          out << '\n';
        }
      }
    }
  }
}

std::vector<ClientDataset> load_mex_dataset(const std::string& root, const DataConfig& cfg) {
  if (!fs::is_directory(root)) throw Error("data root '" + root + "' is not a directory");
  std::vector<std::string> participants;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) participants.push_back(entry.path().filename().string());
  }
  std::sort(participants.begin(), participants.end());
  if (participants.empty()) throw Error("data root '" + root + "' has no participant dirs");

  std::vector<ClientDataset> out;
  for (const auto& p : participants) {
    ClientDataset client;
    client.participant = p;
    std::vector<int> labels;
    const fs::path act_dir = fs::path(root) / p / "act";
    if (!fs::is_directory(act_dir)) {
      throw Error("participant '" + p + "' has no act/ directory");
    }
    for (const auto& entry : fs::directory_iterator(act_dir)) {
      const std::string stem = entry.path().stem().string();
      int label = 0;
      auto [ptr, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), label);
      if (ec != std::errc() || ptr != stem.data() + stem.size() || label < 0 || label >= 7) {
        throw Error("exercise file '" + entry.path().string() +
                    "' must be named <label>.csv with label in [0,7)");
      }
      labels.push_back(label);
    }
    std::sort(labels.begin(), labels.end());

    for (int label : labels) {
      RawRecording rec;
      rec.participant = p;
      rec.label = label;
      for (Modality m : kAllModalities) {
        const fs::path file =
            fs::path(root) / p / modality_name(m) / (std::to_string(label) + ".csv");
        if (!fs::exists(file)) {
          throw Error("missing modality file " + file.string());
        }
        rec.streams[m] = parse_mex_csv(file.string(), m);
      }
      int64_t dropped = 0;
      auto windows = windows_from_recording(rec, cfg, &dropped);
      if (dropped > 0) {
        std::cerr << "[magnet] note: dropped " << dropped << " unpaired windows for "
                  << p << " label " << label << "\n";
      }
      for (auto& w : windows) client.windows.push_back(std::move(w));
    }
    out.push_back(std::move(client));
  }
  return out;
}

ModalityBatch make_batch(const std::vector<const WindowSample*>& windows) {
  if (windows.empty()) throw Error("make_batch: empty window list");
  const int64_t B = static_cast<int64_t>(windows.size());
  ModalityBatch batch;
  for (Modality m : kAllModalities) {
    const Tensor& first = windows[0]->of(m);
    Shape shape = first.shape();
    shape.insert(shape.begin(), B);
    Tensor t = Tensor::zeros(shape);
    const int64_t per = first.numel();
    for (int64_t b = 0; b < B; ++b) {
      const auto& src = windows[static_cast<size_t>(b)]->of(m).values();
      std::copy(src.begin(), src.end(), t.values().begin() + b * per);
    }
    batch.of(m) = t;
  }
  for (const WindowSample* w : windows) batch.labels.push_back(w->label);
  return batch;
}

}  // namespace magnet
