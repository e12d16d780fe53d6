#pragma once

// Analytic cost model: parameter and MAC counts as closed-form functions of
// the model config, broken down by module. Nothing here runs the model; the
// tests cross-check these counts against the parameter registry of a real
// instance.
//
// Counting conventions (per single-sample forward):
//   - matmul [m x k][k x n]    -> m*k*n MACs
//   - elementwise op           -> 1 MAC-equivalent per element
//   - softmax over rows of n   -> 4n (shift, exp, sum, divide)
//   - mean over n inputs       -> n + n_out
//   - FLOPs = 2 * MACs
// Index bookkeeping (top-k scans, gathers) is not counted.

#include <cstdint>
#include <string>
#include <vector>

#include "pstp/config.hpp"

namespace pstp {

struct ModuleCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct CostReport {
  ModelConfig cfg;
  std::vector<ModuleCost> modules;  // forward order

  std::int64_t params_total() const;
  std::int64_t macs_total() const;
  std::int64_t flops_total() const { return 2 * macs_total(); }
  const ModuleCost& module(const std::string& name) const;
};

CostReport cost_report(const ModelConfig& cfg);

// Config transform for "without <module>" variants:
//   tssm -> temporal selection widened to all segments (top_k = K)
//   srsm -> spatial attention removed, all patches kept (top_m = M)
//   avam -> module absent
//   lgpm -> module absent
ModelConfig apply_ablation(ModelConfig cfg, const std::string& name);

// Plain-text tables.
std::string render_cost_table(const CostReport& r);
std::string render_compare_table(const CostReport& a, const CostReport& b,
                                 const std::string& label_a, const std::string& label_b);

}  // namespace pstp
