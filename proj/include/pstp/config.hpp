#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include <json.hpp>

namespace pstp {

// Model hyperparameters. Defaults are the full-scale reference setup; tests
// and desk runs override them with much smaller values.
struct ModelConfig {
  std::int64_t K = 20;            // temporal segments per video
  std::int64_t T = 3;             // snippets (frames) per segment
  std::int64_t M = 197;           // patches per frame, patch 0 is the global token
  std::int64_t D = 512;           // feature width
  std::int64_t D_a = 128;         // raw audio feature width (pre-projection)
  std::int64_t top_k = 7;         // segments kept by temporal selection
  std::int64_t top_m = 20;        // patches kept per frame by spatial selection
  std::int64_t heads = 4;         // attention heads
  std::int64_t fusion_layers = 1; // stacked audio-visual fusion layers
  std::int64_t C = 42;            // answer classes
  bool use_srsm = true;           // spatial region selection present
  bool use_avam = true;           // audio-guided patch attention present
  bool use_lgpm = true;           // global perception present

  std::int64_t frames() const { return K * T; }          // total frames
  std::int64_t selected_frames() const { return T * top_k; }
  // Patch rows each selected frame contributes downstream of spatial selection.
  std::int64_t kept_patches() const { return use_srsm ? top_m : M; }

  void validate() const;
  // Same data layout (a bundle generated under one fits the other).
  bool same_dims(const ModelConfig& o) const {
    return K == o.K && T == o.T && M == o.M && D == o.D && D_a == o.D_a && C == o.C;
  }
  bool operator==(const ModelConfig& o) const = default;
};

// Optimization settings. lr decays by lr_decay_factor every lr_decay_epochs.
struct TrainConfig {
  double lr = 1e-4;
  double lr_decay_factor = 0.1;
  std::int64_t lr_decay_epochs = 10;
  std::int64_t batch_size = 64;
  std::int64_t epochs = 30;
  std::uint64_t seed = 0;
  std::string precision = "f32";  // "f32" or "f64"

  double lr_at(std::int64_t epoch) const {
    return lr * std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_epochs));
  }
  void validate() const;
  bool operator==(const TrainConfig& o) const = default;
};

// Synthetic data generation settings. Each video is Gaussian noise with a
// class-dependent signal planted into one segment's audio and one patch
// column of that segment's frames.
struct SynthSpec {
  std::int64_t n_videos = 100;
  double signal_strength = 1.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SynthSpec& o) const = default;
};

// JSON bindings. Parsing rejects unknown keys (naming them); absent keys keep
// the in-code defaults.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const SynthSpec& c);
void from_json(const nlohmann::json& j, SynthSpec& c);

// Reads a JSON file; parse failures raise ConfigError with line/column info.
nlohmann::json load_json_file(const std::string& path);
void save_json_file(const std::string& path, const nlohmann::json& j);

}  // namespace pstp
