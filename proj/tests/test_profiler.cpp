// Analytic cost model: frozen hand-computed module counts for a small
// configuration, parameter-count agreement with the real model's registry,
// affine structure of the selection-sized modules, ablation handling, and
// the rendered tables.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pstp/model.hpp"
#include "pstp/profiler.hpp"

using namespace pstp;

namespace {

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

ModelConfig full_cfg() { return ModelConfig{}; }  // reference full-scale setup

}  // namespace

TEST_CASE("module counts match hand-derived values for the small config") {
  // Derived by hand from the counting conventions (multiplies for matmuls,
  // one per element for adds/activations, 4n per softmax row, n+n_out per
  // mean): K=3 T=2 M=5 D=8 D_a=6 top_k=2 top_m=3 heads=2 C=4, one fusion
  // layer. Selected frames G = 4; kept rows per frame P = 3.
  CostReport r = cost_report(tiny_cfg());
  CHECK(r.module("audio_proj").macs == 336);
  CHECK(r.module("avf").macs == 1200);
  CHECK(r.module("segment_embed").macs == 576);
  CHECK(r.module("tssm").macs == 654);
  CHECK(r.module("srsm").macs == 4136);
  CHECK(r.module("avam").macs == 2712);
  CHECK(r.module("lgpm").macs == 3216);
  CHECK(r.module("fusion").macs == 652);
  CHECK(r.macs_total() == 336 + 1200 + 576 + 654 + 4136 + 2712 + 3216 + 652);
  CHECK(r.flops_total() == 2 * r.macs_total());

  CHECK(r.module("audio_proj").params == 56);
  CHECK(r.module("segment_embed").params == 136);
  CHECK(r.module("tssm").params == 288);
  CHECK(r.module("srsm").params == 288);
  CHECK(r.module("avam").params == 288);
  CHECK(r.module("avf").params == 0);
  CHECK(r.module("lgpm").params == 0);
  CHECK(r.module("fusion").params == 108);
  CHECK(r.params_total() == 1164);

  CHECK_THROWS_AS(r.module("nonexistent"), ConfigError);
}

TEST_CASE("profile parameter counts equal the instantiated model's registry") {
  for (ModelConfig cfg :
       {tiny_cfg(), apply_ablation(tiny_cfg(), "srsm"), apply_ablation(tiny_cfg(), "avam"),
        apply_ablation(tiny_cfg(), "lgpm"), apply_ablation(tiny_cfg(), "tssm"), full_cfg()}) {
    CostReport r = cost_report(cfg);
    PstpNet<float> net(cfg, 1);
    CHECK(net.params().total_scalars() == r.params_total());
    auto by_module = net.params().scalars_by_module();
    for (const auto& m : r.modules) {
      const std::int64_t registered =
          by_module.count(m.name) ? by_module.at(m.name) : 0;
      CHECK(registered == m.params);
    }
  }
}

TEST_CASE("full-scale parameter count is the frozen reference value") {
  CostReport r = cost_report(full_cfg());
  CHECK(r.module("audio_proj").params == 66048);
  CHECK(r.module("segment_embed").params == 524800);
  CHECK(r.module("tssm").params == 1050624);
  CHECK(r.module("fusion").params == 262656 + 21546);
  CHECK(r.params_total() == 4026922);
}

TEST_CASE("selection-sized module costs are affine in their selection sizes") {
  // Audio-guided attention cost per kept row is constant, so counts at three
  // equally spaced top_m values have a vanishing second difference, and the
  // intercept equals the per-frame query+output projection cost.
  ModelConfig cfg = full_cfg();
  auto avam_at = [&](std::int64_t top_m) {
    ModelConfig c = cfg;
    c.top_m = top_m;
    return cost_report(c).module("avam").macs;
  };
  const std::int64_t a20 = avam_at(20), a40 = avam_at(40), a60 = avam_at(60);
  CHECK(a60 - 2 * a40 + a20 == 0);
  const std::int64_t G = cfg.selected_frames();
  CHECK(2 * a20 - a40 == G * 2 * (cfg.D * cfg.D + cfg.D));
  // Doubling top_m therefore does not halve-exactly: the ratio sits above 1/2
  // by the projection overhead.
  CHECK(static_cast<double>(a20) / static_cast<double>(a40) > 0.5);

  // Same structure for the temporal-selection-sized modules vs top_k.
  auto srsm_at = [&](std::int64_t top_k) {
    ModelConfig c = cfg;
    c.top_k = top_k;
    return cost_report(c).module("srsm").macs;
  };
  CHECK(srsm_at(14) == 2 * srsm_at(7));  // srsm is exactly linear in G
}

TEST_CASE("ablations rewrite the config and zero the removed module") {
  ModelConfig cfg = tiny_cfg();

  ModelConfig t = apply_ablation(cfg, "tssm");
  CHECK(t.top_k == cfg.K);  // no temporal narrowing: every segment kept
  CostReport rt = cost_report(t);
  CHECK(rt.module("srsm").macs > cost_report(cfg).module("srsm").macs);

  ModelConfig s = apply_ablation(cfg, "srsm");
  CHECK_FALSE(s.use_srsm);
  CHECK(s.top_m == s.M);
  CostReport rs = cost_report(s);
  CHECK(rs.module("srsm").macs == 0);
  CHECK(rs.module("srsm").params == 0);
  // All patches flow on to the audio-guided module.
  CHECK(rs.module("avam").macs > cost_report(cfg).module("avam").macs);

  ModelConfig a = apply_ablation(cfg, "avam");
  CostReport ra = cost_report(a);
  CHECK(ra.module("avam").macs == 0);
  CHECK(ra.module("avam").params == 0);

  ModelConfig l = apply_ablation(cfg, "lgpm");
  CostReport rl = cost_report(l);
  CHECK(rl.module("lgpm").macs == 0);

  CHECK_THROWS_WITH_AS(apply_ablation(cfg, "everything"), doctest::Contains("everything"),
                       ConfigError);
}

TEST_CASE("removing temporal selection multiplies the per-frame module costs") {
  // With every segment kept, G grows by K / top_k; the per-frame modules are
  // linear in G, so their counts scale by exactly that factor.
  ModelConfig cfg = full_cfg();  // K = 20, top_k = 7
  ModelConfig no_sel = apply_ablation(cfg, "tssm");
  CostReport base = cost_report(cfg), wide = cost_report(no_sel);
  CHECK(wide.module("srsm").macs * 7 == base.module("srsm").macs * 20);
  CHECK(wide.module("avam").macs * 7 == base.module("avam").macs * 20);
  CHECK(wide.macs_total() > base.macs_total());
}

TEST_CASE("rendered tables carry the totals and ratios") {
  CostReport r = cost_report(tiny_cfg());
  std::string table = render_cost_table(r);
  CHECK(table.find("audio_proj") != std::string::npos);
  CHECK(table.find("fusion") != std::string::npos);
  CHECK(table.find("total") != std::string::npos);
  CHECK(table.find("flops_total") != std::string::npos);
  CHECK(table.find(std::to_string(r.macs_total())) != std::string::npos);

  CostReport ablated = cost_report(apply_ablation(tiny_cfg(), "avam"));
  std::string cmp = render_compare_table(r, ablated, "full", "no-avam");
  CHECK(cmp.find("full") != std::string::npos);
  CHECK(cmp.find("no-avam") != std::string::npos);
  CHECK(cmp.find("ratio") != std::string::npos);
}
