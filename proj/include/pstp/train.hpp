#pragma once

// Training and evaluation around the model: mini-batch Adam with a stepped
// learning-rate schedule, per-epoch JSONL metrics, deterministic shuffling,
// checkpointing (best-on-validation and last), and exact resume.
//
// Determinism contract: a run is a pure function of (configs, dataset,
// seed). The per-epoch shuffle draws from a generator seeded by
// (seed, epoch) only, so resuming from epoch e replays exactly the batches a
// straight-through run would have seen. Metrics files contain no timestamps
// and print numbers through the same serializer everywhere, so identical
// runs produce byte-identical metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pstp/config.hpp"
#include "pstp/container.hpp"
#include "pstp/errors.hpp"
#include "pstp/feature_store.hpp"
#include "pstp/model.hpp"
#include "pstp/nn.hpp"

namespace pstp {

// Seed for the epoch's batch shuffle; depends only on (seed, epoch), which is
// what makes a resumed run replay the same batch order as a straight one.
inline std::uint64_t shuffle_seed(std::uint64_t seed, std::int64_t epoch) {
  return seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1);
}

// Lowest index wins ties, so predictions are reproducible.
template <typename Real>
std::int64_t argmax_row(const Tensor<Real>& logits) {
  const auto& v = logits.value();
  return static_cast<std::int64_t>(
      std::max_element(v.begin(), v.end()) - v.begin());
}

// One evaluated sample. Hit flags are present only when the sample records
// where its signal was planted.
struct SampleOutcome {
  std::int64_t pred = 0;
  std::int64_t label = 0;
  std::string qtype;
  double loss = 0.0;
  std::optional<bool> temporal_hit;  // planted segment among the selected
  std::optional<bool> spatial_hit;   // planted patch kept in every frame of it
};

// Summarizes outcomes into the metrics object written per epoch/split.
inline nlohmann::json aggregate_metrics(const std::vector<SampleOutcome>& outs) {
  nlohmann::json j;
  j["samples"] = outs.size();
  if (outs.empty()) return j;
  double loss = 0.0;
  std::int64_t correct = 0, t_hits = 0, t_n = 0, s_hits = 0, s_n = 0;
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> per_qtype;  // correct, total
  for (const auto& o : outs) {
    loss += o.loss;
    correct += (o.pred == o.label);
    auto& q = per_qtype[o.qtype];
    q.first += (o.pred == o.label);
    q.second += 1;
    if (o.temporal_hit) {
      ++t_n;
      t_hits += *o.temporal_hit;
    }
    if (o.spatial_hit) {
      ++s_n;
      s_hits += *o.spatial_hit;
    }
  }
  const double n = static_cast<double>(outs.size());
  j["loss"] = loss / n;
  j["accuracy"] = static_cast<double>(correct) / n;
  if (t_n > 0) j["temporal_hit_rate"] = static_cast<double>(t_hits) / static_cast<double>(t_n);
  if (s_n > 0) j["spatial_hit_rate"] = static_cast<double>(s_hits) / static_cast<double>(s_n);
  nlohmann::json per;
  for (const auto& [tag, cs] : per_qtype)
    per[tag] = static_cast<double>(cs.first) / static_cast<double>(cs.second);
  j["per_qtype_accuracy"] = per;
  return j;
}

// Selection quality for one sample against its plant record.
template <typename Real>
void fill_hits(const SelectionTrace<Real>& trace, const PlantInfo& plant, std::int64_t T,
               SampleOutcome& o) {
  const bool seg_hit = std::find(trace.segments.begin(), trace.segments.end(), plant.s_star) !=
                       trace.segments.end();
  o.temporal_hit = seg_hit;
  bool patch_hit = seg_hit;
  if (seg_hit)
    for (std::size_t g = 0; g < trace.frames.size(); ++g) {
      if (trace.frames[g] / T != plant.s_star) continue;
      const auto& rows = trace.patch_rows[g];
      patch_hit = patch_hit &&
                  std::find(rows.begin(), rows.end(), plant.p_star) != rows.end();
    }
  o.spatial_hit = patch_hit;
}

template <typename Real>
SampleOutcome eval_sample(PstpNet<Real>& net, const Sample& s) {
  auto in = inputs_from_bundle<Real>(s.bundle);
  auto out = net.forward(in);
  SampleOutcome o;
  o.pred = argmax_row(out.logits);
  o.label = s.bundle.answer;
  o.qtype = s.bundle.qtype;
  o.loss = static_cast<double>(cross_entropy(out.logits, s.bundle.answer).value()[0]);
  if (s.plant) fill_hits(out.trace, *s.plant, net.config().T, o);
  return o;
}

// Forward-only pass over the samples of one split ("all" takes everything).
template <typename Real>
std::vector<SampleOutcome> evaluate(PstpNet<Real>& net, const Dataset& ds,
                                    const std::string& split) {
  if (!net.config().same_dims(ds.cfg))
    throw ConfigError("evaluate: dataset dimensions do not match the model");
  std::vector<SampleOutcome> outs;
  for (const auto& s : ds.samples) {
    if (split != "all" && s.split != split) continue;
    outs.push_back(eval_sample(net, s));
  }
  return outs;
}

// ---------------------------------------------------------------------------
// Checkpoints: parameters plus Adam state plus both configs, in the binary
// tensor container. Loading verifies the configs and every tensor shape.

struct TrainState {
  std::int64_t epochs_done = 0;
  double best_val_acc = -1.0;
  std::int64_t best_epoch = -1;
};

template <typename Real>
void save_checkpoint(const std::string& path, PstpNet<Real>& net, const TrainConfig& tcfg,
                     Adam<Real>* opt, const TrainState& st) {
  Container c;
  c.meta["kind"] = "checkpoint";
  c.meta["model"] = net.config();
  c.meta["train"] = tcfg;
  c.meta["epochs_done"] = st.epochs_done;
  c.meta["best_val_acc"] = st.best_val_acc;
  c.meta["best_epoch"] = st.best_epoch;
  c.meta["adam_t"] = opt ? opt->t() : 0;
  auto& reg = net.params();
  auto put = [&](const std::string& name, const Shape& shape, const std::vector<Real>& v) {
    if constexpr (std::is_same_v<Real, float>)
      c.tensors.push_back(TensorRecord::from_floats(name, shape, v));
    else
      c.tensors.push_back(TensorRecord::from_doubles(name, shape, v));
  };
  for (std::size_t i = 0; i < reg.count(); ++i) {
    const auto& name = reg.names()[i];
    put(name, reg.param(i).shape(), reg.param(i).value());
    if (opt) {
      put("adam.m." + name, reg.param(i).shape(), opt->m(i));
      put("adam.v." + name, reg.param(i).shape(), opt->v(i));
    }
  }
  write_container(path, c);
}

// Peek at the configs stored in a checkpoint without restoring anything.
inline void peek_checkpoint(const std::string& path, ModelConfig& mcfg, TrainConfig& tcfg) {
  Container c = read_container(path);
  if (c.meta.value("kind", "") != "checkpoint")
    throw DataError("not a checkpoint file: " + path);
  mcfg = c.meta.at("model").get<ModelConfig>();
  tcfg = c.meta.at("train").get<TrainConfig>();
}

template <typename Real>
TrainState load_checkpoint(const std::string& path, PstpNet<Real>& net, Adam<Real>* opt) {
  Container c = read_container(path);
  if (c.meta.value("kind", "") != "checkpoint")
    throw DataError("not a checkpoint file: " + path);
  const auto saved_model = c.meta.at("model").get<ModelConfig>();
  if (!(saved_model == net.config()))
    throw ConfigError("checkpoint model configuration does not match the constructed model");
  auto& reg = net.params();
  auto fetch = [&](const std::string& name, const Shape& shape) {
    const TensorRecord& rec = c.tensor(name);
    if (rec.shape != shape)
      throw DimMismatchError("checkpoint tensor " + name + " has shape " + shape_str(rec.shape) +
                             ", expected " + shape_str(shape));
    if constexpr (std::is_same_v<Real, float>) {
      return rec.as_floats();
    } else {
      return rec.as_doubles();
    }
  };
  for (std::size_t i = 0; i < reg.count(); ++i) {
    const auto& name = reg.names()[i];
    reg.param(i).value() = fetch(name, reg.param(i).shape());
    if (opt) {
      opt->m(i) = fetch("adam.m." + name, reg.param(i).shape());
      opt->v(i) = fetch("adam.v." + name, reg.param(i).shape());
    }
  }
  if (opt) opt->set_t(c.meta.value("adam_t", std::int64_t{0}));
  TrainState st;
  st.epochs_done = c.meta.value("epochs_done", std::int64_t{0});
  st.best_val_acc = c.meta.value("best_val_acc", -1.0);
  st.best_epoch = c.meta.value("best_epoch", std::int64_t{-1});
  return st;
}

// ---------------------------------------------------------------------------
// The training loop.

struct TrainResult {
  std::int64_t epochs_run = 0;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_acc = std::numeric_limits<double>::quiet_NaN();
  double best_val_acc = -1.0;
  std::int64_t best_epoch = -1;
  std::string last_checkpoint;  // empty when no out_dir was given
  std::string best_checkpoint;  // empty until a validation improvement
  std::vector<nlohmann::json> metrics;  // one object per epoch
};

struct TrainOptions {
  std::string out_dir;      // metrics + checkpoints land here; empty = no files
  std::string resume_from;  // checkpoint path; empty = fresh start
};

// Trains on the samples tagged "train" (untagged samples count as training
// data so small hand-built sets work); validates on "val"; never touches
// "test". The best checkpoint tracks validation accuracy, with ties keeping
// the earlier epoch; without a validation split it tracks training accuracy.
template <typename Real>
TrainResult train(PstpNet<Real>& net, const TrainConfig& tcfg, const Dataset& ds,
                  const TrainOptions& opts = {}) {
  tcfg.validate();
  if (!net.config().same_dims(ds.cfg))
    throw ConfigError("train: dataset dimensions do not match the model");
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const std::string& sp = ds.samples[i].split;
    if (sp == "train" || sp.empty()) train_idx.push_back(i);
    else if (sp == "val") val_idx.push_back(i);
  }
  if (train_idx.empty()) throw ConfigError("train: dataset has no training samples");

  Adam<Real> opt(net.params());
  TrainState st;
  std::int64_t start_epoch = 0;
  if (!opts.resume_from.empty()) {
    st = load_checkpoint(opts.resume_from, net, &opt);
    start_epoch = st.epochs_done;
  }

  std::ofstream metrics_out;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics_out.open(opts.out_dir + "/metrics.jsonl",
                     start_epoch > 0 ? std::ios::app : std::ios::trunc);
  }

  TrainResult res;
  res.best_val_acc = st.best_val_acc;
  res.best_epoch = st.best_epoch;

  const std::int64_t batch = std::max<std::int64_t>(1, tcfg.batch_size);
  for (std::int64_t epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
    const double lr = tcfg.lr_at(epoch);
    std::vector<std::size_t> order = train_idx;
    deterministic_shuffle(order, shuffle_seed(tcfg.seed, epoch));

    std::vector<SampleOutcome> train_outs;
    train_outs.reserve(order.size());
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(batch));
      const Real inv = Real(1) / static_cast<Real>(b1 - b0);
      net.params().zero_grad();
      for (std::size_t i = b0; i < b1; ++i) {
        const Sample& s = ds.samples[order[i]];
        Tape<Real> tape;
        SampleOutcome o;
        {
          TapeScope<Real> scope(tape);
          auto in = inputs_from_bundle<Real>(s.bundle);
          auto out = net.forward(in);
          Tensor<Real> loss = cross_entropy(out.logits, s.bundle.answer);
          o.pred = argmax_row(out.logits);
          o.label = s.bundle.answer;
          o.qtype = s.bundle.qtype;
          o.loss = static_cast<double>(loss.value()[0]);
          if (s.plant) fill_hits(out.trace, *s.plant, net.config().T, o);
          if (!std::isfinite(o.loss))
            throw NumericalError("loss became non-finite at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(b0 / static_cast<std::size_t>(batch)));
          Tensor<Real> scaled = scale(loss, inv);
          tape.backward(scaled);
        }
        train_outs.push_back(o);
      }
      opt.step(lr);
    }

    nlohmann::json line;
    line["epoch"] = epoch;
    line["lr"] = lr;
    line["train"] = aggregate_metrics(train_outs);
    double gate_acc = line["train"]["accuracy"].get<double>();
    if (!val_idx.empty()) {
      std::vector<SampleOutcome> val_outs;
      for (std::size_t i : val_idx) val_outs.push_back(eval_sample(net, ds.samples[i]));
      line["val"] = aggregate_metrics(val_outs);
      gate_acc = line["val"]["accuracy"].get<double>();
    }
    res.metrics.push_back(line);
    if (metrics_out.is_open()) metrics_out << line.dump() << '\n';

    st.epochs_done = epoch + 1;
    if (gate_acc > st.best_val_acc) {  // strict: ties keep the earlier epoch
      st.best_val_acc = gate_acc;
      st.best_epoch = epoch;
      if (!opts.out_dir.empty()) {
        res.best_checkpoint = opts.out_dir + "/best.ckpt";
        save_checkpoint(res.best_checkpoint, net, tcfg, &opt, st);
      }
    }
    if (!opts.out_dir.empty()) {
      res.last_checkpoint = opts.out_dir + "/last.ckpt";
      save_checkpoint(res.last_checkpoint, net, tcfg, &opt, st);
    }
    res.epochs_run = epoch + 1 - start_epoch;
    res.final_train_loss = line["train"]["loss"].get<double>();
    res.final_train_acc = line["train"]["accuracy"].get<double>();
    res.best_val_acc = st.best_val_acc;
    res.best_epoch = st.best_epoch;
  }

  // Zero-epoch runs (or fully resumed ones) still leave a loadable state.
  if (!opts.out_dir.empty() && res.last_checkpoint.empty()) {
    res.last_checkpoint = opts.out_dir + "/last.ckpt";
    save_checkpoint(res.last_checkpoint, net, tcfg, &opt, st);
  }
  return res;
}

}  // namespace pstp
