// Data layer: config parsing and validation, the binary tensor container
// (round-trips and the four corruption failure modes), and the synthetic
// bundle generator (determinism, balance, plant separability, persistence).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "pstp/config.hpp"
#include "pstp/container.hpp"
#include "pstp/feature_store.hpp"

using namespace pstp;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test case, removed on destruction.
struct TmpDir {
  fs::path path;
  TmpDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("pstp_store_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

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

}  // namespace

TEST_CASE("default configs validate") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK_NOTHROW(TrainConfig{}.validate());
  CHECK_NOTHROW(SynthSpec{}.validate());
}

TEST_CASE("model config validation names the offending field") {
  ModelConfig cfg = tiny_cfg();
  cfg.top_k = 5;  // > K
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("top_k"), ConfigError);
  cfg = tiny_cfg();
  cfg.top_m = 9;  // > M
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("top_m"), ConfigError);
  cfg = tiny_cfg();
  cfg.heads = 3;  // does not divide D=8
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("heads"), ConfigError);
  cfg = tiny_cfg();
  cfg.C = 1;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("C"), ConfigError);
  cfg = tiny_cfg();
  cfg.K = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("learning-rate schedule steps down by the decay factor") {
  TrainConfig tc;
  tc.lr = 1e-4;
  tc.lr_decay_factor = 0.1;
  tc.lr_decay_epochs = 10;
  CHECK(tc.lr_at(0) == doctest::Approx(1e-4));
  CHECK(tc.lr_at(9) == doctest::Approx(1e-4));
  CHECK(tc.lr_at(10) == doctest::Approx(1e-5));
  CHECK(tc.lr_at(19) == doctest::Approx(1e-5));
  CHECK(tc.lr_at(20) == doctest::Approx(1e-6));
  tc.lr = 0.0;  // zero is allowed: it freezes training, a useful control
  CHECK_NOTHROW(tc.validate());
  tc.lr = -1.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.precision = "f16";
  CHECK_THROWS_WITH_AS(tc.validate(), doctest::Contains("precision"), ConfigError);
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  ModelConfig cfg = tiny_cfg();
  nlohmann::json j = cfg;
  ModelConfig back = j.get<ModelConfig>();
  CHECK(back == cfg);

  nlohmann::json partial = {{"K", 5}, {"top_k", 2}};
  ModelConfig merged = partial.get<ModelConfig>();
  CHECK(merged.K == 5);
  CHECK(merged.top_k == 2);
  CHECK(merged.D == ModelConfig{}.D);  // untouched fields keep defaults

  nlohmann::json bad = {{"K", 5}, {"nu_heads", 2}};
  CHECK_THROWS_WITH_AS(bad.get<ModelConfig>(), doctest::Contains("nu_heads"), ConfigError);

  TrainConfig tc;
  tc.lr = 3e-3;
  tc.seed = 99;
  nlohmann::json tj = tc;
  CHECK(tj.get<TrainConfig>() == tc);
}

TEST_CASE("json file loading reports position on parse failure") {
  TmpDir tmp;
  {
    std::ofstream out(tmp / "bad.json");
    out << "{\n  \"K\": 5,\n  oops\n}\n";
  }
  CHECK_THROWS_WITH_AS(load_json_file(tmp / "bad.json"), doctest::Contains("bad.json"),
                       ConfigError);
  CHECK_THROWS_AS(load_json_file(tmp / "does_not_exist.json"), ConfigError);
}

TEST_CASE("container round-trips tensors bit-exactly") {
  TmpDir tmp;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  std::normal_distribution<double> gd;
  for (int trial = 0; trial < 10; ++trial) {
    Container c;
    c.meta = {{"kind", "test"}, {"trial", trial}};
    std::vector<float> f(24);
    for (auto& x : f) x = g(rng);
    std::vector<double> d(6);
    for (auto& x : d) x = gd(rng);
    c.tensors.push_back(TensorRecord::from_floats("a", {2, 3, 4}, f));
    c.tensors.push_back(TensorRecord::from_doubles("b", {6}, d));

    const std::string path = tmp / ("t" + std::to_string(trial) + ".pstp");
    write_container(path, c);
    Container back = read_container(path);
    CHECK(back.meta == c.meta);
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensor("a").shape == Shape{2, 3, 4});
    CHECK(back.tensor("a").as_floats() == f);
    CHECK(back.tensor("b").as_doubles() == d);

    // Writing the read-back container again produces identical bytes.
    const std::string path2 = tmp / "rewrite.pstp";
    write_container(path2, back);
    CHECK(slurp(path) == slurp(path2));
  }
}

TEST_CASE("container read failures are distinct per corruption") {
  TmpDir tmp;
  Container c;
  c.meta = {{"kind", "test"}};
  c.tensors.push_back(TensorRecord::from_floats("x", {2, 2}, {1, 2, 3, 4}));
  const std::string path = tmp / "good.pstp";
  write_container(path, c);
  const std::vector<std::uint8_t> good = slurp(path);

  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[0] = 'Q';
    spit(tmp / "bad.pstp", bytes);
    CHECK_THROWS_AS(read_container(tmp / "bad.pstp"), BadMagicError);
  }
  SUBCASE("unknown version") {
    auto bytes = good;
    bytes[4] = 0x7F;
    spit(tmp / "bad.pstp", bytes);
    CHECK_THROWS_WITH_AS(read_container(tmp / "bad.pstp"), doctest::Contains("version"),
                         VersionMismatchError);
  }
  SUBCASE("truncated payload") {
    auto bytes = good;
    bytes.resize(bytes.size() - 5);
    spit(tmp / "bad.pstp", bytes);
    CHECK_THROWS_AS(read_container(tmp / "bad.pstp"), TruncatedPayloadError);
  }
  SUBCASE("trailing garbage") {
    auto bytes = good;
    bytes.push_back(0);
    spit(tmp / "bad.pstp", bytes);
    CHECK_THROWS_AS(read_container(tmp / "bad.pstp"), TruncatedPayloadError);
  }
  SUBCASE("manifest numel disagrees with shape") {
    // Rebuild the file with a lying manifest: shape [2,2] but numel 3.
    auto bytes = good;
    std::string text(bytes.begin() + 16, bytes.end());
    auto pos = text.find("\"numel\":4");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 9, "\"numel\":3");
    // Manifest length changed? No: same byte count. Reassemble.
    std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 16);
    out.insert(out.end(), text.begin(), text.end());
    spit(tmp / "bad.pstp", out);
    CHECK_THROWS_AS(read_container(tmp / "bad.pstp"), DimMismatchError);
  }
  SUBCASE("record construction rejects wrong element counts") {
    CHECK_THROWS_AS(TensorRecord::from_floats("y", {2, 3}, {1, 2, 3}), DimMismatchError);
  }
}

TEST_CASE("synthetic generation is deterministic and balanced") {
  ModelConfig cfg = tiny_cfg();
  SynthSpec spec;
  spec.n_videos = 24;
  spec.seed = 7;
  Dataset a = generate_synthetic(cfg, spec);
  Dataset b = generate_synthetic(cfg, spec);
  REQUIRE(a.samples.size() == 24);

  std::vector<int> counts(static_cast<std::size_t>(cfg.C), 0);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& s = a.samples[i];
    CHECK(s.bundle.visual_patch.shape == Shape{cfg.K, cfg.T, cfg.M, cfg.D});
    CHECK(s.bundle.audio_raw.shape == Shape{cfg.K, cfg.T, cfg.D_a});
    CHECK(s.bundle.visual_frame.shape == Shape{cfg.K, cfg.T, cfg.D});
    CHECK(s.bundle.question.shape == Shape{1, cfg.D});
    CHECK_NOTHROW(s.bundle.validate());
    REQUIRE(s.plant.has_value());
    CHECK(s.plant->s_star < cfg.K);
    CHECK(s.plant->p_star < cfg.M);
    counts[static_cast<std::size_t>(s.bundle.answer)]++;
    // Bit-exact reproducibility.
    CHECK(s.bundle.visual_patch.data == b.samples[i].bundle.visual_patch.data);
    CHECK(s.bundle.audio_raw.data == b.samples[i].bundle.audio_raw.data);
    CHECK(s.bundle.question.data == b.samples[i].bundle.question.data);
  }
  for (int c : counts) CHECK(c == 6);  // 24 videos over 4 classes

  SynthSpec other = spec;
  other.seed = 8;
  Dataset d = generate_synthetic(cfg, other);
  CHECK(d.samples[0].bundle.visual_patch.data != a.samples[0].bundle.visual_patch.data);

  // Question types cycle through the four tags.
  CHECK(a.samples[0].bundle.qtype != a.samples[1].bundle.qtype);
  CHECK(a.samples[0].bundle.qtype == a.samples[4].bundle.qtype);
}

TEST_CASE("planted signal is recoverable by the prototype oracle") {
  ModelConfig cfg = tiny_cfg();
  SynthSpec spec;
  spec.n_videos = 40;
  spec.signal_strength = 5.0;
  spec.noise_std = 1.0;
  spec.seed = 3;
  Dataset ds = generate_synthetic(cfg, spec);
  SynthBasis basis = make_synth_basis(cfg, spec);
  int hits = 0;
  for (const auto& s : ds.samples)
    if (nearest_prototype_predict(s.bundle, *s.plant, basis) == s.bundle.answer) ++hits;
  // Signal 5x noise on a D=8 column: essentially always recoverable.
  CHECK(hits >= 38);
}

TEST_CASE("bundles round-trip through files bit-exactly") {
  TmpDir tmp;
  ModelConfig cfg = tiny_cfg();
  SynthSpec spec;
  spec.n_videos = 3;
  Dataset ds = generate_synthetic(cfg, spec);
  for (const auto& s : ds.samples) {
    const std::string path = tmp / (s.bundle.video_id + ".pstp");
    write_bundle(path, s.bundle);
    FeatureBundle back = read_bundle(path);
    CHECK(back.video_id == s.bundle.video_id);
    CHECK(back.answer == s.bundle.answer);
    CHECK(back.qtype == s.bundle.qtype);
    CHECK(back.audio_raw.data == s.bundle.audio_raw.data);
    CHECK(back.visual_frame.data == s.bundle.visual_frame.data);
    CHECK(back.visual_patch.data == s.bundle.visual_patch.data);
    CHECK(back.question.data == s.bundle.question.data);
    CHECK(back.K == cfg.K);
  }
}

TEST_CASE("bundle validation rejects inconsistent shapes and labels") {
  ModelConfig cfg = tiny_cfg();
  SynthSpec spec;
  spec.n_videos = 1;
  Dataset ds = generate_synthetic(cfg, spec);
  FeatureBundle b = ds.samples[0].bundle;
  b.answer = cfg.C;
  CHECK_THROWS_AS(b.validate(), DataError);
  b = ds.samples[0].bundle;
  b.visual_patch.shape = {cfg.K, cfg.T, cfg.M + 1, cfg.D};
  CHECK_THROWS_AS(b.validate(), DataError);
  b = ds.samples[0].bundle;
  b.question.data[0] = std::nanf("");
  CHECK_THROWS_AS(b.validate(), DataError);
}

TEST_CASE("dataset split respects ratios and covers every sample once") {
  ModelConfig cfg = tiny_cfg();
  SynthSpec spec;
  spec.n_videos = 40;
  Dataset ds = generate_synthetic(cfg, spec);
  split_dataset(ds, {0.5, 0.25, 0.25}, 11);
  int tr = 0, va = 0, te = 0;
  for (const auto& s : ds.samples) {
    if (s.split == "train") ++tr;
    else if (s.split == "val") ++va;
    else if (s.split == "test") ++te;
    else FAIL("unassigned sample");
  }
  CHECK(tr == 20);
  CHECK(va == 10);
  CHECK(te == 10);

  Dataset ds2 = generate_synthetic(cfg, spec);
  CHECK_THROWS_AS(split_dataset(ds2, {0.5, 0.2, 0.2}, 1), ConfigError);
}

TEST_CASE("re-segmenting regroups frames without touching their data") {
  ModelConfig cfg = tiny_cfg();  // K=3, T=2 -> 6 frames
  SynthSpec spec;
  spec.n_videos = 6;
  spec.seed = 9;
  Dataset ds = generate_synthetic(cfg, spec);

  // Coarser: 2 segments of 3 frames. Old segment s spans frames [2s, 2s+2);
  // segment 0 -> new segment 0, segment 2 -> new segment 1, but segment 1's
  // frames {2,3} straddle the new boundary, so its plant is dropped.
  Dataset coarse = resegment_dataset(ds, 2);
  CHECK(coarse.cfg.K == 2);
  CHECK(coarse.cfg.T == 3);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(coarse.samples[i].bundle.visual_patch.data == ds.samples[i].bundle.visual_patch.data);
    CHECK(coarse.samples[i].bundle.visual_patch.shape == Shape{2, 3, cfg.M, cfg.D});
    const auto& old_plant = ds.samples[i].plant;
    const auto& new_plant = coarse.samples[i].plant;
    if (old_plant->s_star == 1) {
      CHECK_FALSE(new_plant.has_value());
    } else {
      REQUIRE(new_plant.has_value());
      CHECK(new_plant->s_star == (old_plant->s_star == 0 ? 0 : 1));
      CHECK(new_plant->p_star == old_plant->p_star);
    }
  }

  // Finer: 6 segments of 1 frame each; every plant remaps to its first frame.
  ModelConfig fine_ok = cfg;
  Dataset fine = resegment_dataset(ds, 6);
  CHECK(fine.cfg.T == 1);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    // An old segment of 2 frames straddles two 1-frame segments: dropped.
    CHECK_FALSE(fine.samples[i].plant.has_value());
  }
  (void)fine_ok;

  CHECK_THROWS_AS(resegment_dataset(ds, 4), ConfigError);   // 6 % 4 != 0
  ModelConfig picky = cfg;
  picky.top_k = 3;
  Dataset ds3 = generate_synthetic(picky, spec);
  CHECK_THROWS_AS(resegment_dataset(ds3, 2), ConfigError);  // top_k 3 > 2 segments
}

TEST_CASE("dataset directories round-trip through save and load") {
  TmpDir tmp;
  ModelConfig cfg = tiny_cfg();
  SynthSpec spec;
  spec.n_videos = 8;
  spec.seed = 5;
  Dataset ds = generate_synthetic(cfg, spec);
  split_dataset(ds, {0.5, 0.25, 0.25}, 2);
  save_dataset(ds, tmp / "data", spec);

  Dataset back = load_dataset(tmp / "data");
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.cfg.same_dims(cfg));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].bundle.video_id == ds.samples[i].bundle.video_id);
    CHECK(back.samples[i].split == ds.samples[i].split);
    CHECK(back.samples[i].bundle.visual_patch.data == ds.samples[i].bundle.visual_patch.data);
    REQUIRE(back.samples[i].plant.has_value());
    CHECK(back.samples[i].plant->s_star == ds.samples[i].plant->s_star);
    CHECK(back.samples[i].plant->p_star == ds.samples[i].plant->p_star);
  }

  CHECK_THROWS_AS(load_dataset(tmp / "nowhere"), DataError);
}
