#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "magnet/data.hpp"

using namespace magnet;
namespace fs = std::filesystem;

namespace {

std::string write_temp_csv(const std::string& name, const std::string& content) {
  const fs::path dir = fs::temp_directory_path() / "magnet_data_tests";
  fs::create_directories(dir);
  const fs::path file = dir / name;
  std::ofstream out(file);
  out << content;
  return file.string();
}

DataConfig desk_cfg() { return DataConfig{}; }

}  // namespace

TEST_CASE("csv parsing: act row, arity errors, header tolerance") {
  const auto act = write_temp_csv("a.csv", "0.000001,0.1,-0.2,0.98\n");
  Stream s = parse_mex_csv(act, Modality::Act);
  CHECK(s.size() == 1);
  CHECK(s.t_us[0] == 1);
  CHECK(s.values == std::vector<double>{0.1, -0.2, 0.98});

  // dc rows must carry 192 values
  std::string dc_row = "0.0";
  for (int i = 0; i < 193; ++i) dc_row += ",1.0";
  const auto dc = write_temp_csv("dc.csv", dc_row + "\n");
  CHECK_THROWS_WITH_AS(parse_mex_csv(dc, Modality::Dc), doctest::Contains(":1:"), ParseError);

  // pm arity is 512 (32x16)
  std::string pm_row = "0.0";
  for (int i = 0; i < 512; ++i) pm_row += ",0.5";
  const auto pm = write_temp_csv("pm.csv", pm_row + "\n");
  Stream ps = parse_mex_csv(pm, Modality::Pm);
  CHECK(ps.arity == 512);

  const auto with_header = write_temp_csv("h.csv", "timestamp,x,y,z\n1.0,1,2,3\n2.0,4,5,6\n");
  Stream hs = parse_mex_csv(with_header, Modality::Act);
  CHECK(hs.size() == 2);

  const auto bad_ts = write_temp_csv("bt.csv", "1.0,1,2,3\n0.5,1,2,3\n");
  CHECK_THROWS_WITH_AS(parse_mex_csv(bad_ts, Modality::Act),
                       doctest::Contains("non-monotone"), ParseError);

  const auto bad_num = write_temp_csv("bn.csv", "1.0,1,zebra,3\n");
  CHECK_THROWS_WITH_AS(parse_mex_csv(bad_num, Modality::Act),
                       doctest::Contains("unparsable number"), ParseError);
}

TEST_CASE("linear resampling: midpoint, identity on grid, exact on ramps") {
  Stream s;
  s.arity = 1;
  s.t_us = {0, 10};
  s.values = {0.0, 10.0};
  UniformStream u = resample_linear(s, 1e5);  // 10 us step
  CHECK(u.frames() == 2);

  UniformStream mid = resample_linear(s, 2e5);  // 5 us step
  CHECK(mid.frames() == 3);
  CHECK(mid.values[1] == doctest::Approx(5.0));

  // input already on the target grid passes through unchanged
  Stream grid;
  grid.arity = 2;
  for (int64_t k = 0; k < 50; ++k) {
    grid.t_us.push_back(k * 10000);
    grid.values.push_back(static_cast<double>(k));
    grid.values.push_back(-static_cast<double>(k));
  }
  UniformStream same = resample_linear(grid, 100.0);
  CHECK(same.frames() == 50);
  for (size_t i = 0; i < grid.values.size(); ++i) CHECK(same.values[i] == grid.values[i]);

  // an affine signal stays affine at any rate
  Stream ramp;
  ramp.arity = 1;
  Rng rng(3);
  int64_t t = 0;
  for (int k = 0; k < 200; ++k) {
    t += 1000 + static_cast<int64_t>(rng.below(9000));  // irregular spacing
    ramp.t_us.push_back(t);
    ramp.values.push_back(2.5 * static_cast<double>(t) * 1e-6 + 0.75);
  }
  for (double rate : {37.0, 100.0, 16.0}) {
    UniformStream r = resample_linear(ramp, rate);
    for (int64_t i = 0; i < r.frames(); ++i) {
      const double tq = (r.t0_us + static_cast<double>(i) * r.step_us) * 1e-6;
      CHECK(std::abs(r.values[static_cast<size_t>(i)] - (2.5 * tq + 0.75)) < 1e-9);
    }
  }

  Stream single;
  single.arity = 1;
  single.t_us = {5};
  single.values = {1.0};
  CHECK_THROWS_WITH_AS(resample_linear(single, 10.0), doctest::Contains("at least 2"), Error);
}

TEST_CASE("window counts: pinned case, single window, brute-force slider") {
  CHECK(window_count(6000, 500, 100) == 56);
  CHECK(window_count(500, 500, 100) == 1);
  CHECK(window_count(499, 500, 100) == 0);

  Rng rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const int64_t frames = static_cast<int64_t>(rng.below(3000));
    const int64_t win = 1 + static_cast<int64_t>(rng.below(400));
    const int64_t stride = 1 + static_cast<int64_t>(rng.below(150));
    int64_t brute = 0;
    for (int64_t start = 0; start + win <= frames; start += stride) ++brute;
    CHECK(window_count(frames, win, stride) == brute);
  }
}

TEST_CASE("consecutive paper windows overlap by 400 of 500 samples") {
  DataConfig paper;
  paper.window_sec = 5.0;
  paper.stride_sec = 1.0;
  paper.accel_hz = 100.0;
  paper.frame_hz = 15.0;
  SynthConfig synth;
  synth.clients = 1;
  synth.windows_per_class = 2;
  auto clients = synth_generate(synth, paper, 1);
  auto windows = windows_from_recording(clients[0].recordings[0], paper);
  REQUIRE(windows.size() == 2);
  CHECK(windows[0].act.shape() == Shape{500, 3});
  CHECK(windows[0].dc.shape() == Shape{75, 12, 16});
  // second window starts 100 samples later: 400 shared samples
  for (int64_t i = 0; i < 400 * 3; ++i)
    CHECK(windows[0].act.values()[static_cast<size_t>(100 * 3 + i)] ==
          windows[1].act.values()[static_cast<size_t>(i)]);
}

TEST_CASE("alignment drops trailing windows when one modality ends early") {
  DataConfig cfg = desk_cfg();
  SynthConfig synth;
  synth.clients = 1;
  synth.windows_per_class = 8;
  auto clients = synth_generate(synth, cfg, 7);
  RawRecording rec = clients[0].recordings[0];

  int64_t dropped = 0;
  auto full = windows_from_recording(rec, cfg, &dropped);
  CHECK(full.size() == 8);
  CHECK(dropped == 0);

  // shorten act by one second: 100 frames = 4 strides worth
  Stream& act = rec.streams[Modality::Act];
  act.t_us.resize(act.t_us.size() - 100);
  act.values.resize(act.values.size() - 300);
  auto trimmed = windows_from_recording(rec, cfg, &dropped);
  const int64_t act_frames = static_cast<int64_t>(act.t_us.size());
  const int64_t expect = window_count(act_frames, 50, 25);
  CHECK(static_cast<int64_t>(trimmed.size()) == expect);
  CHECK(dropped > 0);
}

TEST_CASE("z-score uses population sigma and normalizes the train split") {
  // [1,2,3] -> mean 2, population sigma sqrt(2/3)
  WindowSample w;
  w.act = Tensor::from_values({3, 3}, {1, 1, 1, 2, 2, 2, 3, 3, 3});
  w.acw = w.act.detached_copy();
  w.dc = Tensor::from_values({1, 12, 16}, std::vector<double>(192, 5.0));
  w.pm = Tensor::from_values({1, 32, 16}, std::vector<double>(512, 1.0));
  std::vector<const WindowSample*> train = {&w};
  NormStats stats = compute_norm_stats(train);
  for (int c = 0; c < 3; ++c) {
    CHECK(stats.mean[0][static_cast<size_t>(c)] == doctest::Approx(2.0));
    CHECK(stats.stdev[0][static_cast<size_t>(c)] == doctest::Approx(std::sqrt(2.0 / 3.0)));
  }
  WindowSample wc = w;
  apply_norm_stats(wc, stats);
  CHECK(wc.act.values()[0] == doctest::Approx(-1.224745).epsilon(1e-5));
  CHECK(wc.act.values()[3] == doctest::Approx(0.0));
  CHECK(wc.act.values()[6] == doctest::Approx(1.224745).epsilon(1e-5));
  // constant channels are guarded: sigma := 1, so values just shift to zero
  CHECK(wc.dc.values()[0] == doctest::Approx(0.0));

  // post-normalization stats on a synthetic train split
  DataConfig cfg = desk_cfg();
  SynthConfig synth;
  synth.clients = 2;
  synth.windows_per_class = 3;
  auto clients = synth_generate(synth, cfg, 11);
  std::vector<WindowSample> all;
  for (auto& c : clients)
    for (auto& rec : c.recordings)
      for (auto& win : windows_from_recording(rec, cfg)) all.push_back(win);
  std::vector<const WindowSample*> ptrs;
  for (auto& win : all) ptrs.push_back(&win);
  NormStats ns = compute_norm_stats(ptrs);
  for (auto& win : all) apply_norm_stats(win, ns);
  NormStats post = compute_norm_stats(ptrs);
  for (size_t m = 0; m < 4; ++m) {
    for (size_t c = 0; c < post.mean[m].size(); ++c) {
      CHECK(std::abs(post.mean[m][c]) < 1e-9);
      CHECK(std::abs(post.stdev[m][c] - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("gaussian augmentation: sigma zero identity, sample statistics") {
  Rng rng(5);
  Tensor x = Tensor::full({100000}, 3.0);
  Tensor same = augment_gaussian(x, 0.0, rng);
  CHECK(same.values()[123] == 3.0);

  Tensor noisy = augment_gaussian(x, 0.01, rng);
  double mean = 0.0;
  for (size_t i = 0; i < noisy.values().size(); ++i) mean += noisy.values()[i] - 3.0;
  mean /= 1e5;
  double var = 0.0;
  for (size_t i = 0; i < noisy.values().size(); ++i) {
    const double d = noisy.values()[i] - 3.0 - mean;
    var += d * d;
  }
  const double sd = std::sqrt(var / 1e5);
  CHECK(std::abs(sd - 0.01) < 0.0005);
  CHECK(std::abs(mean) < 0.001);
}

TEST_CASE("participant split: 21/3/6 partition without leakage") {
  std::vector<ClientDataset> clients;
  for (int i = 0; i < 30; ++i) {
    char name[8];
    std::snprintf(name, sizeof(name), "c%02d", i);
    ClientDataset c;
    c.participant = name;
    WindowSample w;
    w.participant = name;
    c.windows.push_back(w);
    clients.push_back(c);
  }
  SplitSpec spec;
  for (int i = 0; i < 21; ++i) spec.train.push_back(clients[static_cast<size_t>(i)].participant);
  for (int i = 21; i < 24; ++i) spec.val.push_back(clients[static_cast<size_t>(i)].participant);
  for (int i = 24; i < 30; ++i) spec.test.push_back(clients[static_cast<size_t>(i)].participant);

  SplitDatasets split = split_by_participant(clients, spec);
  CHECK(split.train_clients.size() == 21);
  CHECK(split.val.size() == 3);
  CHECK(split.test.size() == 6);

  std::set<std::string> train_ids, val_ids, test_ids;
  for (auto& c : split.train_clients) train_ids.insert(c.participant);
  for (auto& w : split.val) val_ids.insert(w.participant);
  for (auto& w : split.test) test_ids.insert(w.participant);
  for (const auto& id : val_ids) {
    CHECK(train_ids.count(id) == 0);
    CHECK(test_ids.count(id) == 0);
  }
  for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);

  SplitSpec overlap = spec;
  overlap.val.push_back(spec.train[0]);
  CHECK_THROWS_WITH_AS(split_by_participant(clients, overlap),
                       doctest::Contains("two splits"), Error);
  SplitSpec unknown = spec;
  unknown.test.push_back("ghost");
  CHECK_THROWS_WITH_AS(split_by_participant(clients, unknown),
                       doctest::Contains("unknown participant"), Error);

  // a single participant keeps all of its windows in one split
  std::vector<ClientDataset> solo = {clients[0]};
  SplitSpec solo_spec;
  solo_spec.train.push_back(clients[0].participant);
  SplitDatasets ssplit = split_by_participant(solo, solo_spec);
  CHECK(ssplit.train_clients.size() == 1);
  CHECK(ssplit.val.empty());
}

TEST_CASE("inverse-frequency class weights") {
  std::vector<int64_t> balanced = {0, 1, 2, 0, 1, 2};
  auto wb = class_weights(balanced, 3);
  for (double w : wb) CHECK(w == doctest::Approx(1.0));

  std::vector<int64_t> skewed;
  for (int i = 0; i < 10; ++i) skewed.push_back(0);
  for (int i = 0; i < 20; ++i) skewed.push_back(1);
  auto ws = class_weights(skewed, 2);
  CHECK(ws[0] == doctest::Approx(1.5));
  CHECK(ws[1] == doctest::Approx(0.75));

  // sum over classes of w_c * n_c equals N
  Rng rng(6);
  std::vector<int64_t> random_labels;
  for (int i = 0; i < 200; ++i) random_labels.push_back(static_cast<int64_t>(rng.below(7)));
  auto wr = class_weights(random_labels, 7);
  std::vector<int64_t> counts(7, 0);
  for (int64_t y : random_labels) ++counts[static_cast<size_t>(y)];
  double total = 0;
  for (int c = 0; c < 7; ++c) total += wr[static_cast<size_t>(c)] * static_cast<double>(counts[static_cast<size_t>(c)]);
  CHECK(total == doctest::Approx(200.0).epsilon(1e-9));
}

TEST_CASE("synthetic generator: determinism and zero-phase first channel") {
  DataConfig cfg = desk_cfg();
  SynthConfig synth;
  synth.clients = 3;
  synth.windows_per_class = 2;
  auto a = synth_generate(synth, cfg, 42);
  auto b = synth_generate(synth, cfg, 42);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].participant == b[i].participant);
    for (size_t r = 0; r < a[i].recordings.size(); ++r) {
      for (Modality m : kAllModalities) {
        const auto& sa = a[i].recordings[r].streams.at(m);
        const auto& sb = b[i].recordings[r].streams.at(m);
        CHECK(sa.t_us == sb.t_us);
        CHECK(sa.values == sb.values);
      }
    }
  }
  auto c = synth_generate(synth, cfg, 43);
  CHECK(c[0].recordings[0].streams.at(Modality::Act).values !=
        a[0].recordings[0].streams.at(Modality::Act).values);

  // class 0, act channel 0 at t=0: amplitude*sin(0) + noise, so |v| stays
  // within a few noise sigmas
  const double v0 = a[0].recordings[0].streams.at(Modality::Act).values[0];
  CHECK(std::abs(v0) < 5 * synth.noise_sigma);
}

TEST_CASE("bandpass energy oracle separates the synthetic classes") {
  DataConfig paper;
  paper.window_sec = 5.0;
  paper.stride_sec = 1.0;
  paper.accel_hz = 100.0;
  paper.frame_hz = 15.0;
  SynthConfig synth;
  synth.clients = 4;
  synth.windows_per_class = 3;
  auto clients = synth_generate(synth, paper, 123);

  int correct = 0, total = 0;
  for (const auto& client : clients) {
    for (const auto& rec : client.recordings) {
      auto windows = windows_from_recording(rec, paper);
      for (const auto& w : windows) {
        // Goertzel-style energy at each candidate class frequency
        double best_energy = -1;
        int best_cls = -1;
        for (int cls = 0; cls < 7; ++cls) {
          const double f = 0.4 * (cls + 1);
          double re = 0, im = 0;
          for (int64_t t = 0; t < 500; ++t) {
            const double x = w.act.values()[static_cast<size_t>(t * 3)];
            const double ang = 2.0 * 3.141592653589793 * f * (static_cast<double>(t) / 100.0);
            re += x * std::cos(ang);
            im += x * std::sin(ang);
          }
          const double energy = re * re + im * im;
          if (energy > best_energy) {
            best_energy = energy;
            best_cls = cls;
          }
        }
        correct += (best_cls == rec.label) ? 1 : 0;
        ++total;
      }
    }
  }
  CHECK(total == 4 * 7 * 3);
  CHECK(static_cast<double>(correct) / total > 0.9);
}

TEST_CASE("csv export round-trips through the parser") {
  DataConfig cfg = desk_cfg();
  SynthConfig synth;
  synth.clients = 2;
  synth.windows_per_class = 2;
  auto clients = synth_generate(synth, cfg, 9);

  const fs::path root = fs::temp_directory_path() / "magnet_synth_export";
  fs::remove_all(root);
  export_mex_csv(clients, root.string());

  auto loaded = load_mex_dataset(root.string(), cfg);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].participant == "c00");
  CHECK(loaded[0].windows.size() == 7 * 2);

  // windows from the files match in-memory windows to export precision
  auto direct = windows_from_recording(clients[0].recordings[0], cfg);
  const auto& from_file = loaded[0].windows;
  REQUIRE(direct.size() == 2);
  for (size_t i = 0; i < direct[0].act.values().size(); ++i)
    CHECK(from_file[0].act.values()[i] ==
          doctest::Approx(direct[0].act.values()[i]).epsilon(1e-9));
  for (size_t i = 0; i < direct[0].pm.values().size(); ++i)
    CHECK(from_file[0].pm.values()[i] ==
          doctest::Approx(direct[0].pm.values()[i]).epsilon(1e-9));
  fs::remove_all(root);
}

TEST_CASE("make_batch stacks windows into modality tensors") {
  DataConfig cfg = desk_cfg();
  SynthConfig synth;
  synth.clients = 1;
  synth.windows_per_class = 2;
  auto clients = synth_generate(synth, cfg, 17);
  auto w0 = windows_from_recording(clients[0].recordings[0], cfg);
  auto w1 = windows_from_recording(clients[0].recordings[1], cfg);
  std::vector<const WindowSample*> sel = {&w0[0], &w1[0]};
  ModalityBatch batch = make_batch(sel);
  CHECK(batch.act.shape() == Shape{2, 50, 3});
  CHECK(batch.dc.shape() == Shape{2, 8, 12, 16});
  CHECK(batch.pm.shape() == Shape{2, 8, 32, 16});
  CHECK(batch.labels == std::vector<int64_t>{0, 1});
  CHECK(batch.act.at({1, 0, 0}) == w1[0].act.at({0, 0}));
}
