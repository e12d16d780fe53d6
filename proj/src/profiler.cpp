#include "pstp/profiler.hpp"

#include <iomanip>
#include <sstream>

#include "pstp/errors.hpp"

namespace pstp {

namespace {

// Fully connected layer on n rows: weights plus bias adds.
std::int64_t linear_macs(std::int64_t n, std::int64_t d_in, std::int64_t d_out) {
  return n * d_in * d_out + n * d_out;
}

std::int64_t softmax_macs(std::int64_t rows, std::int64_t n) { return 4 * rows * n; }

// Projection-free attention with n_q queries over n_k keys of width d.
std::int64_t sdpa_macs(std::int64_t n_q, std::int64_t n_k, std::int64_t d) {
  return n_q * d * n_k          // logits
         + n_q * n_k            // scale
         + softmax_macs(n_q, n_k)
         + n_q * n_k * d;       // weighted sum
}

// Multi-head attention with learned D x D projections for q, k, v, out.
std::int64_t mha_macs(std::int64_t n_q, std::int64_t n_k, std::int64_t d, std::int64_t h) {
  return linear_macs(n_q, d, d)            // query projection
         + 2 * linear_macs(n_k, d, d)      // key and value projections
         + n_q * n_k * d                   // per-head logits, summed over heads
         + n_q * n_k * h                   // scaling
         + softmax_macs(n_q * h, n_k)
         + n_q * n_k * d                   // per-head weighted sums
         + linear_macs(n_q, d, d);         // output projection
}

std::int64_t mha_params(std::int64_t d) { return 4 * (d * d + d); }

std::int64_t linear_params(std::int64_t d_in, std::int64_t d_out) {
  return d_in * d_out + d_out;
}

}  // namespace

std::int64_t CostReport::params_total() const {
  std::int64_t n = 0;
  for (const auto& m : modules) n += m.params;
  return n;
}

std::int64_t CostReport::macs_total() const {
  std::int64_t n = 0;
  for (const auto& m : modules) n += m.macs;
  return n;
}

const ModuleCost& CostReport::module(const std::string& name) const {
  for (const auto& m : modules)
    if (m.name == name) return m;
  throw ConfigError("cost report has no module named '" + name + "'");
}

CostReport cost_report(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t KT = cfg.frames();
  const std::int64_t G = cfg.selected_frames();   // frames surviving temporal selection
  const std::int64_t P = cfg.kept_patches();      // patch rows per frame after spatial selection
  const std::int64_t L = cfg.fusion_layers;
  const std::int64_t D = cfg.D;

  CostReport r;
  r.cfg = cfg;

  r.modules.push_back({"audio_proj", linear_params(cfg.D_a, D), linear_macs(KT, cfg.D_a, D)});

  // Per segment and layer: self and cross attention for both modalities, then
  // the two-term residual add on each modality's T x D block.
  r.modules.push_back(
      {"avf", 0, L * cfg.K * (4 * sdpa_macs(cfg.T, cfg.T, D) + 4 * cfg.T * D)});

  // Two temporal mean-pools, concat (free), FC, activation.
  r.modules.push_back({"segment_embed", linear_params(2 * D, D),
                       cfg.K * (2 * (cfg.T * D + D) + linear_macs(1, 2 * D, D) + D)});

  r.modules.push_back({"tssm", mha_params(D), mha_macs(1, cfg.K, D, cfg.heads)});

  // Question-guided attention per selected frame plus the broadcast residual
  // onto all M patch rows.
  r.modules.push_back(
      {"srsm", cfg.use_srsm ? mha_params(D) : 0,
       cfg.use_srsm ? G * (mha_macs(1, cfg.M, D, cfg.heads) + cfg.M * D) : 0});

  // Audio-guided attention per selected frame over the kept patches plus the
  // broadcast residual.
  r.modules.push_back({"avam", cfg.use_avam ? mha_params(D) : 0,
                       cfg.use_avam ? G * (mha_macs(1, P, D, cfg.heads) + P * D) : 0});

  r.modules.push_back(
      {"lgpm", 0,
       cfg.use_lgpm ? L * (4 * sdpa_macs(KT, KT, D) + 4 * KT * D) : 0});

  // Token pools, rectification, question gating, FC, classifier, softmax.
  {
    std::int64_t macs = 0;
    std::int64_t n_tok = 0;
    macs += (G + 1) * D + D;  // temporal token (selected snippets + attended summary)
    ++n_tok;
    macs += G * P * D + D;  // spatial token
    ++n_tok;
    if (cfg.use_avam) {
      macs += G * P * D + D;
      ++n_tok;
    }
    if (cfg.use_lgpm) {
      macs += KT * D + D;  // global visual token
      ++n_tok;
    }
    macs += G * D + D;  // selected-audio token
    ++n_tok;
    if (cfg.use_lgpm) {
      macs += KT * D + D;  // global audio token
      ++n_tok;
    }
    macs += n_tok * D;       // relu
    macs += n_tok * D + D;   // pool over tokens
    macs += D;               // question gating
    macs += D;               // tanh
    macs += linear_macs(1, D, D);
    macs += linear_macs(1, D, cfg.C);
    macs += softmax_macs(1, cfg.C);
    r.modules.push_back(
        {"fusion", linear_params(D, D) + linear_params(D, cfg.C), macs});
  }
  return r;
}

ModelConfig apply_ablation(ModelConfig cfg, const std::string& name) {
  if (name == "tssm") {
    cfg.top_k = cfg.K;
  } else if (name == "srsm") {
    cfg.use_srsm = false;
    cfg.top_m = cfg.M;
  } else if (name == "avam") {
    cfg.use_avam = false;
  } else if (name == "lgpm") {
    cfg.use_lgpm = false;
  } else {
    throw ConfigError("unknown ablation '" + name + "' (expected tssm, srsm, avam or lgpm)");
  }
  return cfg;
}

namespace {

std::string fmt_count(std::int64_t n) {
  std::ostringstream os;
  os << n;
  return os.str();
}

}  // namespace

std::string render_cost_table(const CostReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "module" << std::right << std::setw(14) << "params"
     << std::setw(18) << "macs" << std::setw(10) << "macs%" << '\n';
  const double total = static_cast<double>(r.macs_total());
  for (const auto& m : r.modules) {
    os << std::left << std::setw(14) << m.name << std::right << std::setw(14)
       << fmt_count(m.params) << std::setw(18) << fmt_count(m.macs) << std::setw(9)
       << std::fixed << std::setprecision(2) << (total > 0 ? 100.0 * m.macs / total : 0.0)
       << "%" << '\n';
  }
  os << std::left << std::setw(14) << "total" << std::right << std::setw(14)
     << fmt_count(r.params_total()) << std::setw(18) << fmt_count(r.macs_total())
     << std::setw(10) << " " << '\n';
  os << "flops_total " << fmt_count(r.flops_total()) << " (2 x macs)\n";
  return os.str();
}

std::string render_compare_table(const CostReport& a, const CostReport& b,
                                 const std::string& label_a, const std::string& label_b) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "module" << std::right << std::setw(18) << label_a
     << std::setw(18) << label_b << std::setw(12) << "ratio" << '\n';
  for (std::size_t i = 0; i < a.modules.size(); ++i) {
    const auto& ma = a.modules[i];
    const auto& mb = b.modules[i];
    os << std::left << std::setw(14) << ma.name << std::right << std::setw(18)
       << fmt_count(ma.macs) << std::setw(18) << fmt_count(mb.macs) << std::setw(12);
    if (ma.macs > 0)
      os << std::fixed << std::setprecision(4)
         << static_cast<double>(mb.macs) / static_cast<double>(ma.macs);
    else
      os << "-";
    os << '\n';
  }
  os << std::left << std::setw(14) << "total" << std::right << std::setw(18)
     << fmt_count(a.macs_total()) << std::setw(18) << fmt_count(b.macs_total()) << std::setw(12)
     << std::fixed << std::setprecision(4)
     << static_cast<double>(b.macs_total()) / static_cast<double>(a.macs_total()) << '\n';
  return os.str();
}

}  // namespace pstp
