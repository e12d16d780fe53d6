// Command-line driver: dataset generation, training, evaluation, cost
// profiling, hyperparameter sweeps and artifact inspection.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 data error,
// 4 numerical error, 1 anything else.  Errors print a single line to
// stderr: "error: <category>: <message>".

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pstp/config.hpp"
#include "pstp/container.hpp"
#include "pstp/errors.hpp"
#include "pstp/feature_store.hpp"
#include "pstp/model.hpp"
#include "pstp/profiler.hpp"
#include "pstp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace pstp;

// The manifest's only nondeterministic field; everything else in a run's
// output is a pure function of the inputs, so reruns are byte-comparable
// once this key is ignored.
std::string iso_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::optional<std::array<double, 3>> parse_split_ratios(const std::string& s) {
  if (s == "none") return std::nullopt;
  std::array<double, 3> r{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) throw ConfigError("--split expects three comma-separated ratios or 'none', got '" + s + "'");
    try {
      std::size_t used = 0;
      r[i] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("--split: cannot parse ratio '" + part + "'");
    }
    ++i;
  }
  if (i != 3) throw ConfigError("--split expects three comma-separated ratios or 'none', got '" + s + "'");
  return r;
}

json cost_report_json(const CostReport& r) {
  json mods = json::array();
  for (const auto& m : r.modules)
    mods.push_back({{"name", m.name}, {"params", m.params}, {"macs", m.macs}});
  return json{{"config", r.cfg},
              {"modules", mods},
              {"params_total", r.params_total()},
              {"macs_total", r.macs_total()},
              {"flops_total", r.flops_total()}};
}

json split_counts(const Dataset& ds) {
  std::int64_t tr = 0, va = 0, te = 0, untagged = 0;
  for (const auto& s : ds.samples) {
    if (s.split == "train") ++tr;
    else if (s.split == "val") ++va;
    else if (s.split == "test") ++te;
    else ++untagged;
  }
  json j{{"train", tr}, {"val", va}, {"test", te}};
  if (untagged > 0) j["untagged"] = untagged;
  return j;
}

bool has_split(const Dataset& ds, const std::string& split) {
  for (const auto& s : ds.samples)
    if (s.split == split) return true;
  return false;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string out, config;
  std::int64_t n = 100;
  double signal = 1.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
  std::string split = "0.7,0.15,0.15";
  std::int64_t split_seed = -1;  // -1: reuse --seed
};

int run_gen(const GenArgs& a) {
  ModelConfig cfg;
  from_json(load_json_file(a.config), cfg);
  cfg.validate();
  SynthSpec spec;
  spec.n_videos = a.n;
  spec.signal_strength = a.signal;
  spec.noise_std = a.noise;
  spec.seed = a.seed;
  spec.validate();

  Dataset ds = generate_synthetic(cfg, spec);
  const auto ratios = parse_split_ratios(a.split);
  const std::uint64_t split_seed =
      a.split_seed >= 0 ? static_cast<std::uint64_t>(a.split_seed) : a.seed;
  if (ratios) split_dataset(ds, *ratios, split_seed);

  fs::create_directories(a.out);
  save_dataset(ds, a.out, spec);

  json manifest{{"command", "gen"},
                {"timestamp", iso_now()},
                {"out", a.out},
                {"model", cfg},
                {"synth", spec},
                {"split", ratios ? json(*ratios) : json("none")},
                {"split_seed", split_seed}};
  save_json_file(a.out + "/run_manifest.json", manifest);

  json summary{{"out", a.out},
               {"videos", static_cast<std::int64_t>(ds.samples.size())},
               {"classes", cfg.C},
               {"splits", split_counts(ds)}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out, config, train_config, resume, from_manifest, ablate;
  double lr = 0;
  std::int64_t epochs = 0, batch = 0;
  std::uint64_t seed = 0;
  std::string precision;
};

struct TrainOverrides {
  bool lr = false, epochs = false, batch = false, seed = false, precision = false;
};

template <typename Real>
json train_typed(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& ds,
                 const TrainOptions& opts) {
  PstpNet<Real> net(mcfg, tcfg.seed);
  const TrainResult r = train(net, tcfg, ds, opts);
  json s{{"epochs_run", r.epochs_run},
         {"final_train_loss", r.final_train_loss},
         {"final_train_acc", r.final_train_acc},
         {"best_epoch", r.best_epoch},
         {"best_val_acc", r.best_val_acc},
         {"last_checkpoint", r.last_checkpoint},
         {"best_checkpoint", r.best_checkpoint}};
  if (!opts.out_dir.empty()) s["metrics_file"] = opts.out_dir + "/metrics.jsonl";
  if (has_split(ds, "test")) s["test"] = aggregate_metrics(evaluate(net, ds, "test"));
  return s;
}

json dispatch_train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& ds,
                    const TrainOptions& opts) {
  if (tcfg.precision == "f64") return train_typed<double>(mcfg, tcfg, ds, opts);
  return train_typed<float>(mcfg, tcfg, ds, opts);
}

int run_train(const TrainArgs& a, const TrainOverrides& ov) {
  ModelConfig mcfg;
  TrainConfig tcfg;
  std::string data_dir = a.data;
  std::string ablate = a.ablate;
  const bool from_manifest = !a.from_manifest.empty();

  if (from_manifest) {
    const json m = load_json_file(a.from_manifest);
    if (!m.contains("model") || !m.contains("train"))
      throw ConfigError(a.from_manifest + ": not a training manifest (missing model/train)");
    mcfg = m.at("model").get<ModelConfig>();
    tcfg = m.at("train").get<TrainConfig>();
    if (data_dir.empty()) data_dir = m.value("data", "");
    ablate = m.value("ablate", "");  // recorded for provenance; already applied to "model"
  }
  if (data_dir.empty())
    throw ConfigError("train: --data is required (or a manifest that records a data path)");

  const Dataset ds = load_dataset(data_dir);
  if (!from_manifest) {
    mcfg = ds.cfg;  // dimensions come from the data; files/flags override the rest
    if (!a.config.empty()) from_json(load_json_file(a.config), mcfg);
    if (!ablate.empty()) mcfg = apply_ablation(mcfg, ablate);
    if (!a.train_config.empty()) from_json(load_json_file(a.train_config), tcfg);
  }
  if (ov.lr) tcfg.lr = a.lr;
  if (ov.epochs) tcfg.epochs = a.epochs;
  if (ov.batch) tcfg.batch_size = a.batch;
  if (ov.seed) tcfg.seed = a.seed;
  if (ov.precision) tcfg.precision = a.precision;

  if (!mcfg.same_dims(ds.cfg))
    throw ConfigError("train: model dimensions differ from the dataset at " + data_dir);
  mcfg.validate();
  tcfg.validate();

  fs::create_directories(a.out);
  json manifest{{"command", "train"}, {"timestamp", iso_now()}, {"data", data_dir},
                {"out", a.out},       {"model", mcfg},          {"train", tcfg},
                {"ablate", ablate},   {"resume", a.resume}};
  save_json_file(a.out + "/run_manifest.json", manifest);

  TrainOptions opts;
  opts.out_dir = a.out;
  opts.resume_from = a.resume;
  json summary = dispatch_train(mcfg, tcfg, ds, opts);
  summary["out"] = a.out;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string ckpt, data, split = "test";
};

template <typename Real>
json eval_typed(const EvalArgs& a, const ModelConfig& mcfg, const TrainConfig& tcfg,
                const Dataset& ds) {
  PstpNet<Real> net(mcfg, tcfg.seed);
  load_checkpoint(a.ckpt, net, static_cast<Adam<Real>*>(nullptr));
  const auto outs = evaluate(net, ds, a.split);
  if (outs.empty())
    throw DataError("eval: split '" + a.split + "' of " + a.data + " contains no samples");
  json j = aggregate_metrics(outs);
  j["split"] = a.split;
  j["checkpoint"] = a.ckpt;
  return j;
}

int run_eval(const EvalArgs& a) {
  ModelConfig mcfg;
  TrainConfig tcfg;
  peek_checkpoint(a.ckpt, mcfg, tcfg);
  const Dataset ds = load_dataset(a.data);
  if (!mcfg.same_dims(ds.cfg))
    throw ConfigError("eval: checkpoint model dimensions differ from the dataset at " + a.data);
  const json out = tcfg.precision == "f64" ? eval_typed<double>(a, mcfg, tcfg, ds)
                                           : eval_typed<float>(a, mcfg, tcfg, ds);
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// profile

struct ProfileArgs {
  std::string config, ablate, compare;
  bool as_json = false;
};

int run_profile(const ProfileArgs& a) {
  ModelConfig cfg;
  if (!a.config.empty()) from_json(load_json_file(a.config), cfg);
  if (!a.ablate.empty()) cfg = apply_ablation(cfg, a.ablate);
  cfg.validate();
  const CostReport base = cost_report(cfg);

  if (!a.compare.empty()) {
    const CostReport other = cost_report(apply_ablation(cfg, a.compare));
    if (a.as_json) {
      const double ratio = other.macs_total() > 0
                               ? static_cast<double>(base.macs_total()) /
                                     static_cast<double>(other.macs_total())
                               : 0.0;
      json j{{"full", cost_report_json(base)},
             {"without", a.compare},
             {"ablated", cost_report_json(other)},
             {"macs_ratio_full_over_ablated", ratio}};
      std::cout << j.dump(2) << "\n";
    } else {
      std::cout << render_compare_table(base, other, "full", "w/o " + a.compare);
    }
    return 0;
  }
  if (a.as_json)
    std::cout << cost_report_json(base).dump(2) << "\n";
  else
    std::cout << render_cost_table(base);
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string data, out, param, config, train_config;
  std::vector<std::int64_t> values;
  double lr = 0;
  std::int64_t epochs = 0, batch = 0;
  std::uint64_t seed = 0;
  std::string precision;
};

int run_sweep(const SweepArgs& a, const TrainOverrides& ov) {
  const Dataset base = load_dataset(a.data);
  ModelConfig base_cfg = base.cfg;
  if (!a.config.empty()) from_json(load_json_file(a.config), base_cfg);
  TrainConfig tcfg;
  if (!a.train_config.empty()) from_json(load_json_file(a.train_config), tcfg);
  if (ov.lr) tcfg.lr = a.lr;
  if (ov.epochs) tcfg.epochs = a.epochs;
  if (ov.batch) tcfg.batch_size = a.batch;
  if (ov.seed) tcfg.seed = a.seed;
  if (ov.precision) tcfg.precision = a.precision;
  if (!base_cfg.same_dims(base.cfg))
    throw ConfigError("sweep: model dimensions differ from the dataset at " + a.data);
  base_cfg.validate();
  tcfg.validate();

  fs::create_directories(a.out);
  json rows = json::array();
  for (const std::int64_t v : a.values) {
    ModelConfig cfg = base_cfg;
    Dataset reseg;
    const Dataset* ds = &base;
    try {
      if (a.param == "K") {
        reseg = resegment_dataset(base, v);
        cfg.K = reseg.cfg.K;
        cfg.T = reseg.cfg.T;
        cfg.validate();
        ds = &reseg;
      } else if (a.param == "topk") {
        cfg.top_k = v;
        cfg.validate();
      } else if (a.param == "topm") {
        cfg.top_m = v;
        cfg.validate();
      } else {  // "layers"; the option whitelist rejects anything else earlier
        cfg.fusion_layers = v;
        cfg.validate();
      }
    } catch (const ConfigError& e) {
      std::cerr << "warning: skipping " << a.param << "=" << v << ": " << e.what() << "\n";
      rows.push_back({{"value", v}, {"skipped", e.what()}});
      continue;
    }
    const std::string dir = a.out + "/" + a.param + "_" + std::to_string(v);
    fs::create_directories(dir);
    TrainOptions opts;
    opts.out_dir = dir;
    const CostReport rep = cost_report(cfg);
    json summary = dispatch_train(cfg, tcfg, *ds, opts);
    rows.push_back({{"value", v},
                    {"params", rep.params_total()},
                    {"macs", rep.macs_total()},
                    {"out", dir},
                    {"summary", summary}});
  }

  json sweep{{"param", a.param}, {"values", a.values}, {"data", a.data},
             {"train", tcfg},    {"rows", rows}};
  save_json_file(a.out + "/sweep.json", sweep);

  std::ostringstream tab;
  tab << std::left << std::setw(10) << a.param << std::right << std::setw(12) << "params"
      << std::setw(14) << "macs" << std::setw(12) << "train_acc" << std::setw(12) << "val_acc"
      << std::setw(12) << "test_acc" << "\n";
  auto cell = [](const json& row, const char* outer, const char* inner) -> std::string {
    if (!row.contains("summary")) return "-";
    const json& s = row.at("summary");
    const json* src = &s;
    if (outer) {
      if (!s.contains(outer)) return "-";
      src = &s.at(outer);
    }
    if (!src->contains(inner) || !src->at(inner).is_number()) return "-";
    std::ostringstream o;
    o << std::fixed << std::setprecision(4) << src->at(inner).get<double>();
    return o.str();
  };
  for (const auto& row : rows) {
    tab << std::left << std::setw(10) << row.at("value").get<std::int64_t>() << std::right;
    if (row.contains("skipped")) {
      tab << "  skipped: " << row.at("skipped").get<std::string>() << "\n";
      continue;
    }
    tab << std::setw(12) << row.at("params").get<std::int64_t>() << std::setw(14)
        << row.at("macs").get<std::int64_t>() << std::setw(12)
        << cell(row, nullptr, "final_train_acc") << std::setw(12)
        << cell(row, nullptr, "best_val_acc") << std::setw(12) << cell(row, "test", "accuracy")
        << "\n";
  }
  std::cout << tab.str();
  return 0;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectArgs {
  std::string file;
};

int run_inspect(const InspectArgs& a) {
  const Container c = read_container(a.file);
  json tensors = json::array();
  for (const auto& t : c.tensors) {
    std::int64_t numel = 1;
    for (const auto d : t.shape) numel *= d;
    tensors.push_back({{"name", t.name},
                       {"dtype", dtype_name(t.dtype)},
                       {"shape", t.shape},
                       {"numel", numel}});
  }
  json out{{"file", a.file},
           {"kind", c.meta.value("kind", std::string{})},
           {"meta", c.meta},
           {"tensors", tensors}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int fail(int code, const char* category, const std::string& msg) {
  std::cerr << "error: " << category << ": " << msg << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"progressive audio-visual question answering: data, training and analysis"};
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "generate a synthetic feature dataset");
  gen->add_option("--out", ga.out, "output directory")->required();
  gen->add_option("--config", ga.config, "model config JSON (sets feature dimensions)")->required();
  gen->add_option("--n", ga.n, "number of videos")->capture_default_str();
  gen->add_option("--signal", ga.signal, "planted signal strength")->capture_default_str();
  gen->add_option("--noise", ga.noise, "background noise stddev")->capture_default_str();
  gen->add_option("--seed", ga.seed, "generator seed")->capture_default_str();
  gen->add_option("--split", ga.split, "train,val,test ratios or 'none'")->capture_default_str();
  gen->add_option("--split-seed", ga.split_seed, "split shuffle seed (default: --seed)");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  tr->add_option("--data", ta.data, "dataset directory");
  tr->add_option("--out", ta.out, "run output directory")->required();
  tr->add_option("--config", ta.config, "model config overrides (JSON)");
  tr->add_option("--train-config", ta.train_config, "training config (JSON)");
  tr->add_option("--resume", ta.resume, "checkpoint to resume from");
  tr->add_option("--from-manifest", ta.from_manifest, "rerun a previous run_manifest.json");
  tr->add_option("--ablate", ta.ablate, "drop a module: tssm, srsm, avam or lgpm");
  auto* tr_lr = tr->add_option("--lr", ta.lr, "learning rate override");
  auto* tr_ep = tr->add_option("--epochs", ta.epochs, "epoch count override");
  auto* tr_ba = tr->add_option("--batch", ta.batch, "batch size override");
  auto* tr_se = tr->add_option("--seed", ta.seed, "training/init seed override");
  auto* tr_pr = tr->add_option("--precision", ta.precision, "f32 or f64");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  ev->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--split", ea.split, "train, val, test or all")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "val", "test", "all"}));

  ProfileArgs pa;
  auto* pr = app.add_subcommand("profile", "parameter and MAC breakdown for a config");
  pr->add_option("--config", pa.config, "model config JSON (default: full-scale reference)");
  pr->add_option("--ablate", pa.ablate, "profile with a module dropped");
  pr->add_option("--compare", pa.compare, "second table with this module dropped");
  pr->add_flag("--json", pa.as_json, "machine-readable output");

  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "train once per value of one hyperparameter");
  sw->add_option("--data", sa.data, "dataset directory")->required();
  sw->add_option("--out", sa.out, "sweep output directory")->required();
  sw->add_option("--param", sa.param, "K, topk, topm or layers")
      ->required()
      ->check(CLI::IsMember({"K", "topk", "topm", "layers"}));
  sw->add_option("--values", sa.values, "comma-separated values")->required()->delimiter(',');
  sw->add_option("--config", sa.config, "model config overrides (JSON)");
  sw->add_option("--train-config", sa.train_config, "training config (JSON)");
  auto* sw_lr = sw->add_option("--lr", sa.lr, "learning rate override");
  auto* sw_ep = sw->add_option("--epochs", sa.epochs, "epoch count override");
  auto* sw_ba = sw->add_option("--batch", sa.batch, "batch size override");
  auto* sw_se = sw->add_option("--seed", sa.seed, "training/init seed override");
  auto* sw_pr = sw->add_option("--precision", sa.precision, "f32 or f64");

  InspectArgs ia;
  auto* in = app.add_subcommand("inspect", "describe a stored bundle or checkpoint");
  in->add_option("--file", ia.file, "container file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_gen(ga);
    if (tr->parsed()) {
      TrainOverrides ov{tr_lr->count() > 0, tr_ep->count() > 0, tr_ba->count() > 0,
                        tr_se->count() > 0, tr_pr->count() > 0};
      return run_train(ta, ov);
    }
    if (ev->parsed()) return run_eval(ea);
    if (pr->parsed()) return run_profile(pa);
    if (sw->parsed()) {
      TrainOverrides ov{sw_lr->count() > 0, sw_ep->count() > 0, sw_ba->count() > 0,
                        sw_se->count() > 0, sw_pr->count() > 0};
      return run_sweep(sa, ov);
    }
    if (in->parsed()) return run_inspect(ia);
  } catch (const ConfigError& e) {
    return fail(2, "config", e.what());
  } catch (const DataError& e) {
    return fail(3, "data", e.what());
  } catch (const NumericalError& e) {
    return fail(4, "numerical", e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(2, "config", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
  return 0;
}
