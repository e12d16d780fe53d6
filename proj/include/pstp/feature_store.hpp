#pragma once

// Feature bundles and datasets. A bundle holds the precomputed per-video
// features the model consumes: segment/snippet audio, frame features, patch
// grids, and the question embedding. Bundles are stored one file per video
// through the binary tensor container; a dataset directory adds an index
// listing paths, labels, question types, and (for synthetic data) where the
// signal was planted.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pstp/config.hpp"
#include "pstp/container.hpp"
#include "pstp/tensor.hpp"

namespace pstp {

// Portable Fisher-Yates; std::shuffle's draw sequence is not pinned by the
// standard, this is. Everything that orders data derives from it.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}

struct HostTensor {
  Shape shape;
  std::vector<float> data;
};

struct FeatureBundle {
  std::int64_t K = 0, T = 0, M = 0, D = 0, D_a = 0, C = 0;
  HostTensor audio_raw;     // [K, T, D_a]
  HostTensor visual_frame;  // [K, T, D]
  HostTensor visual_patch;  // [K, T, M, D]; patch 0 is the whole-frame token
  HostTensor question;      // [1, D]
  std::int64_t answer = 0;
  std::string qtype;
  std::string video_id;

  void validate() const;  // shapes, label range, finiteness
  bool dims_match(const ModelConfig& cfg) const {
    return K == cfg.K && T == cfg.T && M == cfg.M && D == cfg.D && D_a == cfg.D_a && C == cfg.C;
  }
};

void write_bundle(const std::string& path, const FeatureBundle& b);
FeatureBundle read_bundle(const std::string& path);

// Where the class signal sits in a synthetic video.
struct PlantInfo {
  std::int64_t s_star = 0;  // planted segment
  std::int64_t p_star = 0;  // planted patch column
};

struct Sample {
  FeatureBundle bundle;
  std::optional<PlantInfo> plant;
  std::string split;  // "", "train", "val" or "test"
};

struct Dataset {
  ModelConfig cfg;
  std::vector<Sample> samples;
};

// Class prototypes and their fixed audio-space signatures, derived
// deterministically from the synthesis seed. The generator plants these;
// tests and oracles re-derive them independently of any generated files.
struct SynthBasis {
  std::vector<std::vector<float>> prototypes;  // C x D, unit norm
  std::vector<std::vector<float>> audio_sigs;  // C x D_a, unit norm
};

SynthBasis make_synth_basis(const ModelConfig& cfg, const SynthSpec& spec);

// Builds n_videos bundles: all features are N(0, noise_std^2) noise; then for
// video class c the planted segment's audio gains signal_strength * audio
// signature and the planted patch column gains signal_strength * prototype.
// The question is the prototype plus small noise. Labels are balanced
// (round-robin over classes). Identical (cfg, spec) produce identical data.
Dataset generate_synthetic(const ModelConfig& cfg, const SynthSpec& spec);

// Tags each sample "train"/"val"/"test". Ratios must sum to 1 (±1e-9);
// assignment shuffles sample order with the given seed, then cuts.
void split_dataset(Dataset& ds, const std::array<double, 3>& ratios, std::uint64_t seed);

// Regroups the K*T frames into new_K segments of K*T/new_K frames each,
// keeping the flat frame order. new_K must divide the frame count and the
// resulting config must still validate (e.g. top_k <= new_K). Plant records
// move with their segment; a plant whose old segment now straddles two new
// segments is dropped, since selection hits are no longer well-defined.
Dataset resegment_dataset(const Dataset& ds, std::int64_t new_K);

// Directory layout: <dir>/bundles/<video_id>.pstp plus <dir>/index.json.
void save_dataset(const Dataset& ds, const std::string& dir,
                  const std::optional<SynthSpec>& spec = std::nullopt);
Dataset load_dataset(const std::string& dir);

// Classifies by cosine similarity between the planted patch (averaged over
// the segment's frames) and the class prototypes. This is the reference
// ceiling for how separable a synthetic dataset is.
std::int64_t nearest_prototype_predict(const FeatureBundle& b, const PlantInfo& plant,
                                       const SynthBasis& basis);

}  // namespace pstp
