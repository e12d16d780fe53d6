#include "pstp/feature_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iterator>
#include <random>

namespace fs = std::filesystem;

namespace pstp {

namespace {

constexpr double kQuestionNoiseFrac = 0.1;  // question noise = frac * noise_std

const char* kQtypeTags[] = {"counting", "comparative", "localization", "temporal"};

void check_shape(const char* name, const HostTensor& t, const Shape& want) {
  if (t.shape != want)
    throw DimMismatchError(std::string("bundle tensor '") + name + "' has shape " +
                           shape_str(t.shape) + ", expected " + shape_str(want));
  if (numel(t.shape) != static_cast<std::int64_t>(t.data.size()))
    throw DimMismatchError(std::string("bundle tensor '") + name + "': shape " +
                           shape_str(t.shape) + " does not hold " +
                           std::to_string(t.data.size()) + " elements");
}

void check_finite(const char* name, const HostTensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v))
      throw DataError(std::string("bundle tensor '") + name + "' contains non-finite values");
}

std::vector<float> unit_normalized(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += static_cast<double>(x) * x;
  n = std::sqrt(n);
  if (n == 0) return v;
  for (float& x : v) x = static_cast<float>(x / n);
  return v;
}

}  // namespace

void FeatureBundle::validate() const {
  if (K < 1 || T < 1 || M < 1 || D < 1 || D_a < 1 || C < 2)
    throw DimMismatchError("bundle '" + video_id + "' declares non-positive dims");
  check_shape("audio_raw", audio_raw, Shape{K, T, D_a});
  check_shape("visual_frame", visual_frame, Shape{K, T, D});
  check_shape("visual_patch", visual_patch, Shape{K, T, M, D});
  check_shape("question", question, Shape{1, D});
  if (answer < 0 || answer >= C)
    throw DataError("bundle '" + video_id + "': answer " + std::to_string(answer) +
                    " outside [0, " + std::to_string(C) + ")");
  check_finite("audio_raw", audio_raw);
  check_finite("visual_frame", visual_frame);
  check_finite("visual_patch", visual_patch);
  check_finite("question", question);
}

void write_bundle(const std::string& path, const FeatureBundle& b) {
  b.validate();
  Container c;
  c.meta = {{"kind", "feature_bundle"},
            {"video_id", b.video_id},
            {"qtype", b.qtype},
            {"answer", b.answer},
            {"dims",
             {{"K", b.K}, {"T", b.T}, {"M", b.M}, {"D", b.D}, {"D_a", b.D_a}, {"C", b.C}}}};
  c.tensors.push_back(TensorRecord::from_floats("audio_raw", b.audio_raw.shape, b.audio_raw.data));
  c.tensors.push_back(
      TensorRecord::from_floats("visual_frame", b.visual_frame.shape, b.visual_frame.data));
  c.tensors.push_back(
      TensorRecord::from_floats("visual_patch", b.visual_patch.shape, b.visual_patch.data));
  c.tensors.push_back(TensorRecord::from_floats("question", b.question.shape, b.question.data));
  write_container(path, c);
}

FeatureBundle read_bundle(const std::string& path) {
  Container c = read_container(path);
  if (!c.meta.contains("kind") || c.meta["kind"] != "feature_bundle")
    throw DataError(path + ": container is not a feature bundle");
  FeatureBundle b;
  try {
    const auto& dims = c.meta.at("dims");
    b.K = dims.at("K").get<std::int64_t>();
    b.T = dims.at("T").get<std::int64_t>();
    b.M = dims.at("M").get<std::int64_t>();
    b.D = dims.at("D").get<std::int64_t>();
    b.D_a = dims.at("D_a").get<std::int64_t>();
    b.C = dims.at("C").get<std::int64_t>();
    b.answer = c.meta.at("answer").get<std::int64_t>();
    b.qtype = c.meta.at("qtype").get<std::string>();
    b.video_id = c.meta.at("video_id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bundle metadata incomplete: " + e.what());
  }
  auto take = [&](const char* name) {
    const TensorRecord& t = c.tensor(name);
    return HostTensor{t.shape, t.as_floats()};
  };
  b.audio_raw = take("audio_raw");
  b.visual_frame = take("visual_frame");
  b.visual_patch = take("visual_patch");
  b.question = take("question");
  b.validate();
  return b;
}

SynthBasis make_synth_basis(const ModelConfig& cfg, const SynthSpec& spec) {
  // One dedicated stream so the basis is a pure function of the seed and
  // independent of how many videos get generated.
  std::mt19937_64 rng(spec.seed ^ 0x5badc0deULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  SynthBasis basis;
  basis.prototypes.resize(static_cast<std::size_t>(cfg.C));
  basis.audio_sigs.resize(static_cast<std::size_t>(cfg.C));
  for (std::int64_t c = 0; c < cfg.C; ++c) {
    std::vector<float> p(static_cast<std::size_t>(cfg.D));
    for (auto& x : p) x = static_cast<float>(gauss(rng));
    basis.prototypes[static_cast<std::size_t>(c)] = unit_normalized(std::move(p));
    std::vector<float> a(static_cast<std::size_t>(cfg.D_a));
    for (auto& x : a) x = static_cast<float>(gauss(rng));
    basis.audio_sigs[static_cast<std::size_t>(c)] = unit_normalized(std::move(a));
  }
  return basis;
}

Dataset generate_synthetic(const ModelConfig& cfg, const SynthSpec& spec) {
  cfg.validate();
  spec.validate();
  const SynthBasis basis = make_synth_basis(cfg, spec);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> seg_pick(0, cfg.K - 1);
  std::uniform_int_distribution<std::int64_t> patch_pick(0, cfg.M - 1);

  auto noise_tensor = [&](Shape shape) {
    HostTensor t;
    t.shape = std::move(shape);
    t.data.resize(static_cast<std::size_t>(numel(t.shape)));
    for (auto& x : t.data) x = static_cast<float>(spec.noise_std * gauss(rng));
    return t;
  };

  Dataset ds;
  ds.cfg = cfg;
  ds.samples.reserve(static_cast<std::size_t>(spec.n_videos));
  const std::size_t n_tags = std::size(kQtypeTags);
  for (std::int64_t v = 0; v < spec.n_videos; ++v) {
    FeatureBundle b;
    b.K = cfg.K;
    b.T = cfg.T;
    b.M = cfg.M;
    b.D = cfg.D;
    b.D_a = cfg.D_a;
    b.C = cfg.C;
    b.answer = v % cfg.C;  // balanced labels
    b.qtype = kQtypeTags[static_cast<std::size_t>(v) % n_tags];
    char id[32];
    std::snprintf(id, sizeof id, "synth-%06lld", static_cast<long long>(v));
    b.video_id = id;

    b.audio_raw = noise_tensor(Shape{cfg.K, cfg.T, cfg.D_a});
    b.visual_frame = noise_tensor(Shape{cfg.K, cfg.T, cfg.D});
    b.visual_patch = noise_tensor(Shape{cfg.K, cfg.T, cfg.M, cfg.D});
    b.question = noise_tensor(Shape{1, cfg.D});

    PlantInfo plant;
    plant.s_star = seg_pick(rng);
    plant.p_star = patch_pick(rng);

    const auto& proto = basis.prototypes[static_cast<std::size_t>(b.answer)];
    const auto& asig = basis.audio_sigs[static_cast<std::size_t>(b.answer)];
    const float s = static_cast<float>(spec.signal_strength);

    // Patch column p_star of every frame in segment s_star carries the class
    // prototype; the same segment's audio carries the audio signature.
    for (std::int64_t t = 0; t < cfg.T; ++t) {
      float* patch =
          b.visual_patch.data.data() +
          ((plant.s_star * cfg.T + t) * cfg.M + plant.p_star) * cfg.D;
      for (std::int64_t d = 0; d < cfg.D; ++d)
        patch[d] += s * proto[static_cast<std::size_t>(d)];
      float* audio = b.audio_raw.data.data() + (plant.s_star * cfg.T + t) * cfg.D_a;
      for (std::int64_t d = 0; d < cfg.D_a; ++d)
        audio[d] += s * asig[static_cast<std::size_t>(d)];
    }

    // The question embedding is the class prototype plus small noise: asking
    // "about" the class without copying any planted feature verbatim.
    const double qn = kQuestionNoiseFrac * spec.noise_std;
    for (std::int64_t d = 0; d < cfg.D; ++d)
      b.question.data[static_cast<std::size_t>(d)] =
          proto[static_cast<std::size_t>(d)] + static_cast<float>(qn * gauss(rng));

    ds.samples.push_back(Sample{std::move(b), plant, ""});
  }
  return ds;
}

void split_dataset(Dataset& ds, const std::array<double, 3>& ratios, std::uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1, got " + std::to_string(sum));
  for (double r : ratios)
    if (r < 0) throw ConfigError("split ratios must be non-negative");

  const std::size_t n = ds.samples.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  deterministic_shuffle(order, seed);

  const std::size_t n_train = static_cast<std::size_t>(std::floor(ratios[0] * n));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(ratios[1] * n));
  // Leftover from flooring goes to the test split; every sample lands somewhere.
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = ds.samples[order[i]];
    if (i < n_train)
      s.split = "train";
    else if (i < n_train + n_val)
      s.split = "val";
    else
      s.split = "test";
  }
}

Dataset resegment_dataset(const Dataset& ds, std::int64_t new_K) {
  const std::int64_t total = ds.cfg.K * ds.cfg.T;
  if (new_K < 1 || total % new_K != 0)
    throw ConfigError("cannot regroup " + std::to_string(total) + " frames into " +
                      std::to_string(new_K) + " segments");
  const std::int64_t new_T = total / new_K;
  ModelConfig cfg = ds.cfg;
  cfg.K = new_K;
  cfg.T = new_T;
  cfg.validate();
  Dataset out;
  out.cfg = cfg;
  out.samples.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) {
    Sample ns = s;  // flat frame data is unchanged; only the grouping moves
    ns.bundle.K = new_K;
    ns.bundle.T = new_T;
    ns.bundle.audio_raw.shape = {new_K, new_T, cfg.D_a};
    ns.bundle.visual_frame.shape = {new_K, new_T, cfg.D};
    ns.bundle.visual_patch.shape = {new_K, new_T, cfg.M, cfg.D};
    if (s.plant) {
      const std::int64_t first = s.plant->s_star * ds.cfg.T;
      const std::int64_t last = first + ds.cfg.T - 1;
      if (first / new_T == last / new_T)
        ns.plant = PlantInfo{first / new_T, s.plant->p_star};
      else
        ns.plant.reset();
    }
    ns.bundle.validate();
    out.samples.push_back(std::move(ns));
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& dir,
                  const std::optional<SynthSpec>& spec) {
  fs::create_directories(fs::path(dir) / "bundles");
  nlohmann::json index;
  index["version"] = 1;
  index["model"] = ds.cfg;
  if (spec) index["synth"] = *spec;
  index["entries"] = nlohmann::json::array();
  for (const auto& s : ds.samples) {
    const std::string rel = "bundles/" + s.bundle.video_id + ".pstp";
    write_bundle((fs::path(dir) / rel).string(), s.bundle);
    nlohmann::json e = {{"file", rel},
                        {"video_id", s.bundle.video_id},
                        {"qtype", s.bundle.qtype},
                        {"answer", s.bundle.answer},
                        {"split", s.split}};
    if (s.plant) {
      e["s_star"] = s.plant->s_star;
      e["p_star"] = s.plant->p_star;
    }
    index["entries"].push_back(std::move(e));
  }
  save_json_file((fs::path(dir) / "index.json").string(), index);
}

Dataset load_dataset(const std::string& dir) {
  const std::string index_path = (fs::path(dir) / "index.json").string();
  if (!fs::exists(index_path)) throw DataError("no dataset index at " + index_path);
  nlohmann::json index = load_json_file(index_path);
  Dataset ds;
  try {
    ds.cfg = index.at("model").get<ModelConfig>();
    for (const auto& e : index.at("entries")) {
      Sample s;
      s.bundle = read_bundle((fs::path(dir) / e.at("file").get<std::string>()).string());
      if (e.contains("s_star"))
        s.plant = PlantInfo{e.at("s_star").get<std::int64_t>(), e.at("p_star").get<std::int64_t>()};
      if (e.contains("split")) s.split = e.at("split").get<std::string>();
      if (!s.bundle.dims_match(ds.cfg))
        throw DimMismatchError(dir + ": bundle '" + s.bundle.video_id +
                               "' dims do not match the dataset's model config");
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(index_path + ": malformed index: " + e.what());
  }
  return ds;
}

std::int64_t nearest_prototype_predict(const FeatureBundle& b, const PlantInfo& plant,
                                       const SynthBasis& basis) {
  // Average the planted patch over the segment's frames, then pick the
  // prototype with the highest dot product.
  std::vector<double> mean(static_cast<std::size_t>(b.D), 0.0);
  for (std::int64_t t = 0; t < b.T; ++t) {
    const float* patch = b.visual_patch.data.data() +
                         ((plant.s_star * b.T + t) * b.M + plant.p_star) * b.D;
    for (std::int64_t d = 0; d < b.D; ++d) mean[static_cast<std::size_t>(d)] += patch[d];
  }
  for (auto& x : mean) x /= static_cast<double>(b.T);
  std::int64_t best = 0;
  double best_dot = -1e300;
  for (std::size_t c = 0; c < basis.prototypes.size(); ++c) {
    double dot = 0;
    for (std::int64_t d = 0; d < b.D; ++d)
      dot += mean[static_cast<std::size_t>(d)] * basis.prototypes[c][static_cast<std::size_t>(d)];
    if (dot > best_dot) {
      best_dot = dot;
      best = static_cast<std::int64_t>(c);
    }
  }
  return best;
}

}  // namespace pstp
