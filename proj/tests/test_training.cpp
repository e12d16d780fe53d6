// Training loop behavior: metrics aggregation, hit bookkeeping, determinism
// (bit-identical reruns, exact resume), checkpoint round-trips, the frozen
// learning-rate control, split handling, and failure modes.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "pstp/train.hpp"

using namespace pstp;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  TmpDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("pstp_train_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.K = 3;
  cfg.T = 2;
  cfg.M = 5;
  cfg.D = 8;
  cfg.D_a = 6;
  cfg.top_k = 2;
  cfg.top_m = 3;
  cfg.heads = 2;
  cfg.C = 4;
  return cfg;
}

Dataset tiny_data(int n, std::uint64_t seed, double signal = 5.0) {
  SynthSpec spec;
  spec.n_videos = n;
  spec.signal_strength = signal;
  spec.noise_std = 1.0;
  spec.seed = seed;
  return generate_synthetic(tiny_cfg(), spec);
}

std::string slurp_text(const std::string& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("metric aggregation computes the right ratios") {
  std::vector<SampleOutcome> outs;
  auto add = [&](std::int64_t pred, std::int64_t label, const std::string& qt, double loss) {
    SampleOutcome o;
    o.pred = pred;
    o.label = label;
    o.qtype = qt;
    o.loss = loss;
    outs.push_back(o);
  };
  add(0, 0, "counting", 1.0);
  add(1, 0, "counting", 3.0);
  add(2, 2, "temporal", 2.0);
  add(3, 3, "temporal", 2.0);
  outs[0].temporal_hit = true;
  outs[1].temporal_hit = false;
  outs[0].spatial_hit = false;
  auto j = aggregate_metrics(outs);
  CHECK(j["samples"] == 4);
  CHECK(j["accuracy"].get<double>() == doctest::Approx(0.75));
  CHECK(j["loss"].get<double>() == doctest::Approx(2.0));
  CHECK(j["temporal_hit_rate"].get<double>() == doctest::Approx(0.5));
  CHECK(j["spatial_hit_rate"].get<double>() == doctest::Approx(0.0));
  CHECK(j["per_qtype_accuracy"]["counting"].get<double>() == doctest::Approx(0.5));
  CHECK(j["per_qtype_accuracy"]["temporal"].get<double>() == doctest::Approx(1.0));

  auto empty = aggregate_metrics({});
  CHECK(empty["samples"] == 0);
  CHECK_FALSE(empty.contains("accuracy"));
}

TEST_CASE("hit bookkeeping follows the selection trace") {
  SelectionTrace<double> trace;
  trace.segments = {0, 2};
  trace.frames = {0, 1, 4, 5};  // T = 2
  trace.patch_rows = {{0, 3}, {1, 3}, {2, 4}, {0, 2}};
  PlantInfo plant{2, 2};  // segment 2, patch 2
  SampleOutcome o;
  fill_hits(trace, plant, 2, o);
  CHECK(*o.temporal_hit);
  // Frames of segment 2 are 4 and 5; their kept rows {2,4} and {0,2} both
  // contain patch 2, so the spatial hit holds.
  CHECK(*o.spatial_hit);

  PlantInfo missed{1, 0};  // segment 1 was not selected
  SampleOutcome o3;
  fill_hits(trace, missed, 2, o3);
  CHECK_FALSE(*o3.temporal_hit);
  CHECK_FALSE(*o3.spatial_hit);

  PlantInfo partial{0, 3};  // segment 0 selected; patch 3 kept in frames 0 and 1
  SampleOutcome o4;
  fill_hits(trace, partial, 2, o4);
  CHECK(*o4.temporal_hit);
  CHECK(*o4.spatial_hit);

  PlantInfo dropped{0, 0};  // patch 0 kept in frame 0 but not frame 1
  SampleOutcome o5;
  fill_hits(trace, dropped, 2, o5);
  CHECK(*o5.temporal_hit);
  CHECK_FALSE(*o5.spatial_hit);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  Dataset ds = tiny_data(6, 1);
  PstpNet<float> net(tiny_cfg(), 7);
  std::vector<std::vector<float>> before;
  for (auto* p : net.params().params()) before.push_back(p->value());
  TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 2;
  tc.batch_size = 3;
  auto res = train(net, tc, ds);
  CHECK(res.epochs_run == 2);
  auto after = net.params().params();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i]->value() == before[i]);
}

TEST_CASE("identical runs produce byte-identical metrics and parameters") {
  TmpDir tmp;
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 5;
  auto run = [&](const std::string& dir) {
    Dataset ds = tiny_data(10, 2);
    PstpNet<float> net(tiny_cfg(), 7);
    TrainOptions opts;
    opts.out_dir = dir;
    train(net, tc, ds, opts);
    std::vector<float> flat;
    for (auto* p : net.params().params())
      flat.insert(flat.end(), p->value().begin(), p->value().end());
    return flat;
  };
  auto p1 = run(tmp / "a"), p2 = run(tmp / "b");
  CHECK(p1 == p2);
  const std::string m1 = slurp_text(tmp / "a/metrics.jsonl");
  CHECK(!m1.empty());
  CHECK(m1 == slurp_text(tmp / "b/metrics.jsonl"));
}

TEST_CASE("resume from a checkpoint replays the straight-through run exactly") {
  TmpDir tmp;
  Dataset ds = tiny_data(10, 3);
  ModelConfig cfg = tiny_cfg();

  TrainConfig full;
  full.lr = 1e-3;
  full.epochs = 6;
  full.batch_size = 4;
  full.seed = 11;
  PstpNet<float> straight(cfg, 9);
  TrainOptions o1;
  o1.out_dir = tmp / "straight";
  train(straight, full, ds, o1);

  TrainConfig half = full;
  half.epochs = 3;
  PstpNet<float> first_leg(cfg, 9);
  TrainOptions o2;
  o2.out_dir = tmp / "resumed";
  train(first_leg, half, ds, o2);

  PstpNet<float> second_leg(cfg, 999);  // init overwritten by the checkpoint
  TrainOptions o3;
  o3.out_dir = tmp / "resumed";
  o3.resume_from = (tmp / "resumed") + "/last.ckpt";
  auto res = train(second_leg, full, ds, o3);
  CHECK(res.epochs_run == 3);

  auto pa = straight.params().params(), pb = second_leg.params().params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value() == pb[i]->value());
  CHECK(slurp_text(tmp / "straight/metrics.jsonl") == slurp_text(tmp / "resumed/metrics.jsonl"));
}

TEST_CASE("checkpoints round-trip parameters and optimizer state") {
  TmpDir tmp;
  Dataset ds = tiny_data(6, 4);
  ModelConfig cfg = tiny_cfg();
  PstpNet<float> net(cfg, 13);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.epochs = 2;
  tc.batch_size = 2;
  TrainOptions opts;
  opts.out_dir = tmp / "run";
  train(net, tc, ds, opts);

  ModelConfig peeked_m;
  TrainConfig peeked_t;
  peek_checkpoint(tmp / "run/last.ckpt", peeked_m, peeked_t);
  CHECK(peeked_m == cfg);
  CHECK(peeked_t == tc);

  PstpNet<float> fresh(cfg, 999);
  Adam<float> opt(fresh.params());
  TrainState st = load_checkpoint(tmp / "run/last.ckpt", fresh, &opt);
  CHECK(st.epochs_done == 2);
  CHECK(opt.t() > 0);
  auto pa = net.params().params(), pb = fresh.params().params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value() == pb[i]->value());

  // A net with different dimensions refuses the checkpoint.
  ModelConfig other = cfg;
  other.D = 16;
  other.D_a = 8;
  PstpNet<float> wrong(other, 1);
  CHECK_THROWS_AS(load_checkpoint(tmp / "run/last.ckpt", wrong, static_cast<Adam<float>*>(nullptr)),
                  ConfigError);

  // A checkpoint without optimizer state loads params-only but not Adam.
  save_checkpoint(tmp / "bare.ckpt", net, tc, static_cast<Adam<float>*>(nullptr), TrainState{});
  PstpNet<float> bare(cfg, 5);
  CHECK_NOTHROW(load_checkpoint<float>(tmp / "bare.ckpt", bare, nullptr));
  Adam<float> opt2(bare.params());
  CHECK_THROWS_AS(load_checkpoint<float>(tmp / "bare.ckpt", bare, &opt2), DataError);
}

TEST_CASE("training refuses a dataset with no trainable samples") {
  Dataset ds = tiny_data(4, 5);
  for (auto& s : ds.samples) s.split = "test";
  PstpNet<float> net(tiny_cfg(), 1);
  TrainConfig tc;
  tc.epochs = 1;
  CHECK_THROWS_AS(train(net, tc, ds), ConfigError);
}

TEST_CASE("training ignores test samples and validates on the val split") {
  Dataset ds = tiny_data(12, 6);
  split_dataset(ds, {0.5, 0.25, 0.25}, 1);
  PstpNet<float> net(tiny_cfg(), 1);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.epochs = 2;
  tc.batch_size = 3;
  auto res = train(net, tc, ds);
  REQUIRE(res.metrics.size() == 2);
  CHECK(res.metrics[0]["train"]["samples"] == 6);
  CHECK(res.metrics[0]["val"]["samples"] == 3);
  CHECK(res.best_epoch >= 0);

  auto test_outs = evaluate(net, ds, "test");
  CHECK(test_outs.size() == 3);
  auto all_outs = evaluate(net, ds, "all");
  CHECK(all_outs.size() == 12);
}

TEST_CASE("zero epochs still writes a loadable state") {
  TmpDir tmp;
  Dataset ds = tiny_data(4, 7);
  ModelConfig cfg = tiny_cfg();
  PstpNet<float> net(cfg, 21);
  std::vector<std::vector<float>> init;
  for (auto* p : net.params().params()) init.push_back(p->value());
  TrainConfig tc;
  tc.epochs = 0;
  TrainOptions opts;
  opts.out_dir = tmp / "zero";
  auto res = train(net, tc, ds, opts);
  CHECK(res.epochs_run == 0);
  CHECK(res.metrics.empty());
  PstpNet<float> back(cfg, 99);
  load_checkpoint(res.last_checkpoint, back, static_cast<Adam<float>*>(nullptr));
  auto pb = back.params().params();
  for (std::size_t i = 0; i < pb.size(); ++i) CHECK(pb[i]->value() == init[i]);
}

TEST_CASE("a poisoned parameter aborts with position information") {
  Dataset ds = tiny_data(4, 8);
  PstpNet<float> net(tiny_cfg(), 1);
  net.params().by_name("fusion.classifier.weight").value()[0] =
      std::numeric_limits<float>::infinity();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 2;
  CHECK_THROWS_WITH_AS(train(net, tc, ds), doctest::Contains("epoch 0"), NumericalError);
}

TEST_CASE("training on a strongly separable set drives the loss down") {
  Dataset ds = tiny_data(8, 9, /*signal=*/5.0);
  PstpNet<float> net(tiny_cfg(), 3);
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.epochs = 6;
  tc.batch_size = 4;
  auto res = train(net, tc, ds);
  const double first = res.metrics.front()["train"]["loss"].get<double>();
  const double last = res.metrics.back()["train"]["loss"].get<double>();
  CHECK(last < first);
  CHECK(last < 1.0);  // well under ln(4) = 1.386 chance level
}
