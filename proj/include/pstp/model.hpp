#pragma once

// The progressive perception network. One forward pass walks:
//   1. audio projection          raw audio rows -> model width
//   2. snippet fusion            per-segment residual self+cross attention
//   3. segment embeddings        temporal pooling + FC + tanh, one row per segment
//   4. temporal selection        question-guided attention over segments,
//                                hard top-k pick of segments
//   5. spatial selection         question-guided attention over each selected
//                                frame's patches, hard top-m pick of rows
//   6. audio-guided attention    audio-queried attention over the kept rows
//   7. global perception         the snippet-fusion form over all frames at once
//   8. fusion head               pooled tokens -> relu -> pool -> question gate
//                                -> tanh -> FC -> classifier logits
//
// Hard selections (top-k, top-m) pass values through a gather and pass no
// gradient to the scores; the selection pressure comes from the soft attended
// rows that join the fusion tokens. Patches of frames that were never
// selected do not enter the graph at all, so their gradients are exactly zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pstp/config.hpp"
#include "pstp/errors.hpp"
#include "pstp/feature_store.hpp"
#include "pstp/nn.hpp"
#include "pstp/ops.hpp"
#include "pstp/tensor.hpp"

namespace pstp {

// Indices of the k largest scores. Ties resolve to the lowest index; the
// result is sorted ascending so downstream gathers keep temporal order.
// Shifting every score by the same constant cannot change the result.
template <typename Real>
std::vector<std::int64_t> top_k_select(const std::vector<Real>& scores, std::int64_t k) {
  const auto n = static_cast<std::int64_t>(scores.size());
  if (k < 1 || k > n)
    throw ConfigError("top_k_select: k=" + std::to_string(k) + " out of range for " +
                      std::to_string(n) + " scores");
  for (const Real s : scores)
    if (!std::isfinite(static_cast<double>(s)))
      throw NumericalError("top_k_select: non-finite selection score");
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

// What the hard selections chose, exposed for metrics and tests.
template <typename Real>
struct SelectionTrace {
  std::vector<Real> segment_scores;                  // [K] attention over segments
  std::vector<std::int64_t> segments;                // ascending selected segments
  std::vector<std::int64_t> frames;                  // their frames, ascending
  std::vector<std::vector<Real>> patch_scores;       // per selected frame, [M]
  std::vector<std::vector<std::int64_t>> patch_rows; // per selected frame, kept rows
};

template <typename Real>
struct ModelInputs {
  Tensor<Real> audio;                 // [K*T, D_a]
  Tensor<Real> frames;                // [K*T, D]
  std::vector<Tensor<Real>> patches;  // K*T tensors, each [M, D]
  Tensor<Real> question;              // [1, D]
};

template <typename Real>
ModelInputs<Real> inputs_from_bundle(const FeatureBundle& b) {
  auto lift = [](const std::vector<float>& src, std::size_t off, std::size_t n, Shape shape) {
    std::vector<Real> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Real>(src[off + i]);
    return Tensor<Real>::from_data(std::move(shape), std::move(v));
  };
  const auto KT = static_cast<std::size_t>(b.K * b.T);
  const auto M = static_cast<std::size_t>(b.M), D = static_cast<std::size_t>(b.D);
  ModelInputs<Real> in;
  in.audio = lift(b.audio_raw.data, 0, KT * static_cast<std::size_t>(b.D_a),
                  {b.K * b.T, b.D_a});
  in.frames = lift(b.visual_frame.data, 0, KT * D, {b.K * b.T, b.D});
  in.patches.reserve(KT);
  for (std::size_t f = 0; f < KT; ++f)
    in.patches.push_back(lift(b.visual_patch.data, f * M * D, M * D, {b.M, b.D}));
  in.question = lift(b.question.data, 0, D, {1, b.D});
  return in;
}

template <typename Real>
struct ModelOutput {
  Tensor<Real> logits;          // [1, C]
  SelectionTrace<Real> trace;
  // Intermediates kept for tests and diagnostics.
  Tensor<Real> fused_audio;     // [K*T, D]
  Tensor<Real> fused_visual;    // [K*T, D]
  Tensor<Real> segment_embeds;  // [K, D]
  Tensor<Real> temporal_summary;// [1, D] attended row over segments
  Tensor<Real> fusion_tokens;   // [n_tokens, D] pre-relu
};

template <typename Real>
class PstpNet {
 public:
  PstpNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    audio_proj_.emplace(reg_, "audio_proj", cfg_.D_a, cfg_.D, rng);
    segment_fc_.emplace(reg_, "segment_embed.fc", 2 * cfg_.D, cfg_.D, rng);
    tssm_.emplace(reg_, "tssm", cfg_.D, cfg_.heads, rng);
    if (cfg_.use_srsm) srsm_.emplace(reg_, "srsm", cfg_.D, cfg_.heads, rng);
    if (cfg_.use_avam) avam_.emplace(reg_, "avam", cfg_.D, cfg_.heads, rng);
    fusion_fc_.emplace(reg_, "fusion.fc", cfg_.D, cfg_.D, rng);
    classifier_.emplace(reg_, "fusion.classifier", cfg_.D, cfg_.C, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<Real>& params() { return reg_; }

  ModelOutput<Real> forward(const ModelInputs<Real>& in) {
    check_inputs(in);
    const std::int64_t K = cfg_.K, T = cfg_.T, M = cfg_.M;
    ModelOutput<Real> out;

    // 1. Audio rows into model width.
    Tensor<Real> audio = audio_proj_->forward(in.audio);  // [K*T, D]

    // 2. Residual self+cross attention inside each segment.
    std::vector<Tensor<Real>> seg_audio, seg_visual;
    seg_audio.reserve(static_cast<std::size_t>(K));
    seg_visual.reserve(static_cast<std::size_t>(K));
    for (std::int64_t s = 0; s < K; ++s) {
      std::vector<std::int64_t> rows(static_cast<std::size_t>(T));
      std::iota(rows.begin(), rows.end(), s * T);
      Tensor<Real> a = gather_axis0(audio, rows);
      Tensor<Real> v = gather_axis0(in.frames, rows);
      fuse_layers(a, v);
      seg_audio.push_back(a);
      seg_visual.push_back(v);
    }
    out.fused_audio = concat_axis0(seg_audio);    // [K*T, D]
    out.fused_visual = concat_axis0(seg_visual);  // [K*T, D]

    // 3. One embedding row per segment.
    std::vector<Tensor<Real>> embed_rows;
    embed_rows.reserve(static_cast<std::size_t>(K));
    for (std::int64_t s = 0; s < K; ++s) {
      Tensor<Real> pooled = concat_lastdim(
          {mean_axis(seg_audio[static_cast<std::size_t>(s)], 0),
           mean_axis(seg_visual[static_cast<std::size_t>(s)], 0)});  // [1, 2D]
      embed_rows.push_back(tanh(segment_fc_->forward(pooled)));
    }
    out.segment_embeds = concat_axis0(embed_rows);  // [K, D]

    // 4. Question-guided temporal attention and hard segment selection.
    Attention<Real> tatt = tssm_->forward(in.question, out.segment_embeds, out.segment_embeds);
    out.temporal_summary = tatt.out;
    out.trace.segment_scores = tatt.weights.value();
    out.trace.segments = top_k_select(out.trace.segment_scores, cfg_.top_k);
    for (std::int64_t s : out.trace.segments)
      for (std::int64_t t = 0; t < T; ++t) out.trace.frames.push_back(s * T + t);

    Tensor<Real> sel_visual = gather_axis0(out.fused_visual, out.trace.frames);  // [G, D]
    Tensor<Real> sel_audio = gather_axis0(out.fused_audio, out.trace.frames);    // [G, D]

    // 5./6. Per selected frame: spatial selection, then audio-guided attention.
    const std::int64_t G = cfg_.selected_frames();
    const std::int64_t P = cfg_.kept_patches();
    std::vector<Tensor<Real>> kept_per_frame, audio_attended_per_frame;
    for (std::int64_t g = 0; g < G; ++g) {
      const std::int64_t frame = out.trace.frames[static_cast<std::size_t>(g)];
      Tensor<Real> kept;
      if (cfg_.use_srsm) {
        const Tensor<Real>& p = in.patches[static_cast<std::size_t>(frame)];
        Attention<Real> satt = srsm_->forward(in.question, p, p);
        Tensor<Real> updated = add(p, repeat_rows(satt.out, M));
        out.trace.patch_scores.push_back(satt.weights.value());
        out.trace.patch_rows.push_back(top_k_select(satt.weights.value(), cfg_.top_m));
        kept = gather_axis0(updated, out.trace.patch_rows.back());
      } else {
        kept = in.patches[static_cast<std::size_t>(frame)];
        std::vector<std::int64_t> all(static_cast<std::size_t>(M));
        std::iota(all.begin(), all.end(), 0);
        out.trace.patch_scores.emplace_back();
        out.trace.patch_rows.push_back(std::move(all));
      }
      kept_per_frame.push_back(kept);
      if (cfg_.use_avam) {
        Tensor<Real> audio_row = gather_axis0(sel_audio, {g});  // [1, D]
        Attention<Real> aatt = avam_->forward(audio_row, kept, kept);
        audio_attended_per_frame.push_back(add(kept, repeat_rows(aatt.out, P)));
      }
    }
    Tensor<Real> spatial_all = concat_axis0(kept_per_frame);  // [G*P, D]

    // 7. The fusion form again, globally over all frames.
    Tensor<Real> global_audio, global_visual;
    if (cfg_.use_lgpm) {
      global_audio = out.fused_audio;
      global_visual = out.fused_visual;
      fuse_layers(global_audio, global_visual);
    }

    // 8. Pooled tokens -> head. Token order: temporal, spatial, audio-guided,
    // global visual, selected audio, global audio.
    std::vector<Tensor<Real>> tokens;
    tokens.push_back(mean_axis(concat_axis0({sel_visual, out.temporal_summary}), 0));
    tokens.push_back(mean_axis(spatial_all, 0));
    if (cfg_.use_avam) tokens.push_back(mean_axis(concat_axis0(audio_attended_per_frame), 0));
    if (cfg_.use_lgpm) tokens.push_back(mean_axis(global_visual, 0));
    tokens.push_back(mean_axis(sel_audio, 0));
    if (cfg_.use_lgpm) tokens.push_back(mean_axis(global_audio, 0));
    out.fusion_tokens = concat_axis0(tokens);  // [n_tokens, D]

    Tensor<Real> head = mean_axis(relu(out.fusion_tokens), 0);  // [1, D]
    head = mul(head, in.question);
    head = tanh(head);
    head = fusion_fc_->forward(head);
    out.logits = classifier_->forward(head);
    return out;
  }

 private:
  // One or more residual self+cross attention layers over paired row blocks;
  // both tensors must share the same shape. Used per segment and globally.
  void fuse_layers(Tensor<Real>& a, Tensor<Real>& v) {
    for (std::int64_t l = 0; l < cfg_.fusion_layers; ++l) {
      Tensor<Real> a2 = add(a, add(scaled_dot_attention(a, a, a).out,
                                   scaled_dot_attention(a, v, v).out));
      Tensor<Real> v2 = add(v, add(scaled_dot_attention(v, v, v).out,
                                   scaled_dot_attention(v, a, a).out));
      a = a2;
      v = v2;
    }
  }

  void check_inputs(const ModelInputs<Real>& in) const {
    const Shape want_audio{cfg_.frames(), cfg_.D_a};
    const Shape want_frames{cfg_.frames(), cfg_.D};
    const Shape want_patch{cfg_.M, cfg_.D};
    const Shape want_q{1, cfg_.D};
    if (in.audio.shape() != want_audio)
      throw ShapeError("model audio input is " + shape_str(in.audio.shape()) + ", expected " +
                       shape_str(want_audio));
    if (in.frames.shape() != want_frames)
      throw ShapeError("model frame input is " + shape_str(in.frames.shape()) + ", expected " +
                       shape_str(want_frames));
    if (static_cast<std::int64_t>(in.patches.size()) != cfg_.frames())
      throw ShapeError("model got " + std::to_string(in.patches.size()) +
                       " patch tensors, expected " + std::to_string(cfg_.frames()));
    for (const auto& p : in.patches)
      if (p.shape() != want_patch)
        throw ShapeError("model patch input is " + shape_str(p.shape()) + ", expected " +
                         shape_str(want_patch));
    if (in.question.shape() != want_q)
      throw ShapeError("model question input is " + shape_str(in.question.shape()) +
                       ", expected " + shape_str(want_q));
  }

  ModelConfig cfg_;
  ParamRegistry<Real> reg_;
  std::optional<LinearLayer<Real>> audio_proj_, segment_fc_;
  std::optional<MultiHeadAttention<Real>> tssm_, srsm_, avam_;
  std::optional<LinearLayer<Real>> fusion_fc_, classifier_;
};

}  // namespace pstp
