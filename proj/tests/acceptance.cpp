// Acceptance runner: prints one PASS/FAIL line per criterion and copies the
// table to argv[2] when given. The exit code is nonzero only when the runner
// itself breaks; criterion failures are reported in the output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gradcases.hpp"
#include "oracles.hpp"
#include "prunelab/errors.hpp"
#include "prunelab/evalkit.hpp"
#include "prunelab/layerprune.hpp"
#include "prunelab/parallel.hpp"
#include "prunelab/pipeline.hpp"
#include "prunelab/recovery.hpp"
#include "prunelab/widthprune.hpp"

namespace fs = std::filesystem;
namespace md = prunelab::model;
namespace nd = prunelab::ndgrad;
namespace rc = prunelab::recovery;
namespace ek = prunelab::evalkit;
namespace pl = prunelab::pipeline;
namespace lp = prunelab::layerprune;
namespace wp = prunelab::widthprune;
using prunelab::PruneMethod;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& s) {
  std::fprintf(stderr, "%s\n", s.c_str());
  std::fflush(stderr);
}

// ---- 1 ---------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  prunelab::Rng pick(17);
  double worst = 0;
  int coords = 0;
  std::string worst_name;
  for (auto& c : testing::primitive_cases(23)) {
    auto r = testing::gradcheck(c.f, c.inputs, pick, 8);
    coords += r.coords;
    if (r.max_rel > worst) worst = r.max_rel, worst_name = c.name;
  }
  auto s = testing::random_model(testing::tiny_config(4));
  auto t = testing::random_model(testing::tiny_config(5));
  auto batch = testing::sample_data(2, 3);
  auto cfg = rc::preset("sft_l2_kl");
  cfg.alpha = 0.6;
  cfg.beta = 0.8;
  cfg.gamma = 1.3;
  std::vector<nd::Array> params;
  for (auto& np : md::named_parameters(s)) {
    if (np.name.rfind("vision", 0) == 0) continue;
    np.param.set_requires_grad(true);
    params.push_back(np.param);
  }
  auto r = testing::gradcheck(
      [&](const std::vector<nd::Array>&) { return rc::combined_loss(s, &t, batch, cfg).total; }, params, pick, 3);
  coords += r.coords;
  if (r.max_rel > worst) worst = r.max_rel, worst_name = "combined_loss";
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && coords >= 100 && secs < 60,
          "max rel err " + fmt("%.2e", worst) + " (" + worst_name + ") over " + std::to_string(coords) +
              " coords, " + fmt("%.1fs", secs)};
}

// ---- 2 ---------------------------------------------------------------------

Outcome mask_compact() {
  const auto t0 = std::chrono::steady_clock::now();
  md::ModelConfig cfg;
  cfg.seed = 31;
  auto m = testing::random_model(cfg);
  prunelab::data::DatasetSpec spec;
  spec.seed = 32;
  spec.size = 16;
  const auto samples = prunelab::data::generate(spec);
  prunelab::Rng rng(33);
  double worst = 0;
  int plans = 0;
  for (double ratio : {0.15, 0.30, 0.45, 0.60}) {
    for (int k = 0; k < 5; ++k, ++plans) {
      auto plan = testing::random_width_plan(m, ratio, rng, k % 2 == 1);
      auto compact = wp::apply_width_plan(m, plan);
      auto masked = wp::masked_model(m, plan);
      for (const auto& s : samples)
        worst = std::max(worst, testing::max_abs_diff(md::forward(compact, s).logits, md::forward(masked, s).logits));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && plans == 20 && secs < 60,
          std::to_string(plans) + " plans x 16 samples, max |logit diff| " + fmt("%.2e", worst) + ", " +
              fmt("%.1fs", secs)};
}

// ---- 3 ---------------------------------------------------------------------

Outcome bi_oracle() {
  md::ModelConfig cfg;
  cfg.seed = 41;
  auto m = testing::random_model(cfg);
  auto calib = testing::sample_data(16, 42);
  auto rep = lp::block_influence(m, calib);
  auto want = testing::bi_oracle(m, calib);
  double worst = 0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::fabs(rep.scores[i] - want[i]));
  auto special = m.clone();
  special.layers[1].override_mode = md::LayerOverride::kIdentity;
  special.layers[3].override_mode = md::LayerOverride::kNegate;
  auto rs = lp::block_influence(special, calib);
  const bool pass = worst <= 1e-12 && rs.scores[1] == 0.0 && rs.scores[3] == 2.0;
  return {pass, "max |BI - oracle| " + fmt("%.2e", worst) + ", identity " + fmt("%.17g", rs.scores[1]) +
                    ", negation " + fmt("%.17g", rs.scores[3])};
}

// ---- 4 ---------------------------------------------------------------------

Outcome taylor_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  double sum = 0, lo = 1;
  std::string per;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = md::init_model(testing::tiny_config(seed));
    prunelab::data::DatasetSpec spec;
    spec.seed = prunelab::mix_seed(seed, 1);
    spec.size = 256;
    auto calib = prunelab::data::calibration_subset(prunelab::data::generate(spec), 4, seed);
    auto groups = wp::build_groups(m);
    auto rep = wp::taylor_importance(m, groups, calib);
    const double r = testing::spearman(rep.importance, testing::exact_group_deltas(m, groups, calib));
    sum += r;
    lo = std::min(lo, r);
    per += (seed ? " " : "") + fmt("%.3f", r);
  }
  const double mean = sum / 5, secs = seconds_since(t0);
  return {mean >= 0.8 && secs < 120,
          "mean Spearman " + fmt("%.3f", mean) + " (per seed " + per + ", min " + fmt("%.3f", lo) + "), " +
              fmt("%.1fs", secs)};
}

// ---- 5 ---------------------------------------------------------------------

Outcome loss_algebra() {
  auto s = testing::random_model(testing::small_config(51));
  auto t = testing::random_model(testing::small_config(52));
  auto batch = testing::sample_data(6, 53);
  std::vector<std::string> bad;

  const double sft = rc::sft_loss(s, batch).item();
  if (rc::combined_loss(s, &t, batch, rc::preset("sft")).total.item() != sft) bad.push_back("sft reduction");

  const std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
  if (rc::kl_divergence(p, p) != 0.0) bad.push_back("KL(p||p)");
  if (rc::logits_kd_loss(s, s, batch, rc::Divergence::kForwardKl, 2.0).item() != 0.0 ||
      rc::logits_kd_loss(s, s, batch, rc::Divergence::kReverseKl, 2.0).item() != 0.0)
    bad.push_back("KD self");

  auto ps = testing::constant_logits_model({std::log(0.5), std::log(0.5)});
  auto pq = testing::constant_logits_model({std::log(0.9), std::log(0.1)});
  const double kl_pq = rc::logits_kd_loss(ps, pq, batch, rc::Divergence::kReverseKl, 1.0).item();
  const double kl_qp = rc::logits_kd_loss(ps, pq, batch, rc::Divergence::kForwardKl, 1.0).item();
  if (std::fabs(kl_pq - 0.5108) > 1e-4 || std::fabs(kl_qp - 0.3681) > 1e-4) bad.push_back("asymmetry");

  double mean_kl = 0;
  int rows = 0;
  for (const auto& x : batch) {
    auto a = md::response_probs(md::forward(t, x), 1.0);
    auto b = md::response_probs(md::forward(s, x), 1.0);
    for (std::size_t k = 0; k < a.size(); ++k, ++rows) mean_kl += rc::kl_divergence(a[k], b[k]);
  }
  mean_kl /= rows;
  const double tau1 = rc::logits_kd_loss(s, t, batch, rc::Divergence::kForwardKl, 1.0).item();
  if (std::fabs(tau1 - mean_kl) > 1e-12) bad.push_back("tau=1 identity");

  std::string detail = "KL(p||q) " + fmt("%.4f", kl_pq) + ", KL(q||p) " + fmt("%.4f", kl_qp) +
                       ", tau=1 gap " + fmt("%.1e", std::fabs(tau1 - mean_kl));
  for (const auto& b : bad) detail += "; broken: " + b;
  return {bad.empty(), detail};
}

// ---- 6 ---------------------------------------------------------------------

Outcome ratio_accounting() {
  md::ModelConfig cfg;
  cfg.seed = 61;
  auto m = testing::random_model(cfg);
  auto calib = testing::sample_data(8, 62);
  const auto total = md::param_count(m, md::ParamScope::kLlmOnly);
  auto bi = lp::block_influence(m, calib);
  auto groups = wp::build_groups(m);
  auto imp = wp::taylor_importance(m, groups, calib);
  int mismatches = 0, plans = 0;
  double flops_err = 0;
  auto check_flops = [&](const md::ToyLVLM& x) {
    for (int t : {32, 128}) {
      const double traced = 2.0 * double(ek::traced_macs(x, t)) / t;
      flops_err = std::max(flops_err, std::fabs(ek::flops_per_token(x, t) - traced) / traced);
    }
  };
  check_flops(m);
  for (double r : {0.10, 0.15, 0.30, 0.45, 0.60}) {
    std::vector<std::pair<prunelab::PruningPlan, md::ToyLVLM>> out;
    if (r <= 0.60) {
      auto p = wp::plan_width_removal(imp, groups, m, r);
      out.emplace_back(p, wp::apply_width_plan(m, p));
    }
    try {
      auto p = lp::plan_layer_removal(bi, m, r);
      out.emplace_back(p, lp::apply_layer_plan(m, p));
    } catch (const prunelab::InfeasiblePlanError&) {
    }
    for (auto& [p, x] : out) {
      ++plans;
      const double derived = 1.0 - double(md::param_count(x, md::ParamScope::kLlmOnly)) / double(total);
      if (p.achieved_ratio != derived) ++mismatches;
      check_flops(x);
    }
  }
  return {mismatches == 0 && flops_err <= 0.01,
          std::to_string(plans) + " plans, " + std::to_string(mismatches) + " ratio mismatches, max FLOPs error " +
              fmt("%.2e", flops_err)};
}

// ---- 7 ---------------------------------------------------------------------

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

Outcome determinism(const fs::path& scratch) {
  const auto t0 = std::chrono::steady_clock::now();
  pl::Manifest m = pl::parse_manifest(R"(
pretrain.steps = 300
pretrain.eval_every = 100
pretrain.min_accuracy = 0
data.train_size = 1024
data.recovery_size = 256
data.bench_size = 48
data.dev_size = 48
prune.method = width
prune.ratio = 0.15
recover.preset = sft_l2_kl
recover.scope = projector_plus_llm
recover.steps = 30
)");
  std::vector<std::map<std::string, std::string>> trees;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path out = scratch / ("determinism" + std::to_string(rep));
    fs::remove_all(out);
    m.out = out.string();
    pl::run_all(m, 7, rep == 0 ? 1 : 2);
    trees.push_back(tree_contents(out));
  }
  int checkpoints = 0, reports = 0;
  for (const auto& [name, body] : trees[0]) {
    checkpoints += name.ends_with(".ckpt");
    reports += name.ends_with(".json");
  }
  const bool same = trees[0] == trees[1];
  return {same && checkpoints == 3 && reports >= 3,
          std::to_string(trees[0].size()) + " files (" + std::to_string(checkpoints) + " checkpoints, " +
              std::to_string(reports) + " reports) " + (same ? "bitwise identical" : "DIFFER") + ", " +
              fmt("%.1fs", seconds_since(t0))};
}

// ---- 8-13 --------------------------------------------------------------------

struct SeedMetrics {
  std::uint64_t seed = 0;
  double dev = 0;
  int steps = 0;
  std::map<std::string, double> v;
  std::string error;
};

constexpr double kTeacherTarget = 0.98;

SeedMetrics trends_for_seed(std::uint64_t seed) {
  SeedMetrics out;
  out.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    pl::Manifest mf;
    mf.pretrain.target_accuracy = kTeacherTarget;
    const pl::Datasets ds = pl::make_datasets(mf, seed);
    const pl::Reference ref = pl::pretrain(mf, seed, ds);
    out.dev = ref.dev_accuracy;
    out.steps = ref.steps_run;
    log("seed " + std::to_string(seed) + ": teacher dev mcq " + fmt("%.3f", ref.dev_accuracy) + " after " +
        std::to_string(ref.steps_run) + " steps, " + fmt("%.0fs", seconds_since(t0)));
    const md::ToyLVLM& teacher = ref.model;

    auto pruned = [&](PruneMethod method, double ratio, int calib_n = 16) {
      pl::PruneStage ps;
      ps.method = method;
      ps.ratio = ratio;
      ps.calibration_n = calib_n;
      return pl::prune(teacher, ps, ds.recovery, seed);
    };
    auto report = [&](const md::ToyLVLM& x) { return ek::relative_report(x, ref.scores, ds.suites); };
    auto recovered = [&](const md::ToyLVLM& student, const std::string& preset, rc::Scope scope,
                         double fraction = 1.0) {
      pl::RecoverStage rs;
      rs.preset = preset;
      rs.scope = scope;
      rs.fraction = fraction;
      return report(pl::recover(student, teacher, rs, ds.recovery, seed).student).avg_rel;
    };

    for (double r : {0.15, 0.30}) {
      const std::string tag = fmt("%.2f", r);
      out.v["width" + tag] = report(pruned(PruneMethod::kWidth, r).student).avg_rel;
      out.v["layer" + tag] = report(pruned(PruneMethod::kLayer, r).student).avg_rel;
    }

    auto w15 = pruned(PruneMethod::kWidth, 0.15);
    auto split = report(w15.student).modality;
    out.v["deg_mm"] = split.deg_mm;
    out.v["deg_txt"] = split.deg_txt;

    auto l15 = pruned(PruneMethod::kLayer, 0.15);
    out.v["proj"] = recovered(l15.student, "sft", rc::Scope::kProjectorOnly);
    out.v["joint"] = recovered(l15.student, "sft", rc::Scope::kProjectorPlusLlm);

    for (double r : {0.30, 0.45}) {
      auto w = pruned(PruneMethod::kWidth, r);
      for (const auto& p : rc::preset_names())
        out.v[p + fmt("@%.2f", r)] = recovered(w.student, p, rc::Scope::kProjectorPlusLlm);
      if (r == 0.30) out.v["frac0.05"] = recovered(w.student, "sft_l2", rc::Scope::kProjectorPlusLlm, 0.05);
    }
    out.v["frac1.00"] = out.v["sft_l2@0.30"];

    out.v["calib1"] = report(pruned(PruneMethod::kWidth, 0.15, 1).student).avg_rel;
    out.v["calib16"] = out.v["width0.15"];
    out.v["calib32"] = report(pruned(PruneMethod::kWidth, 0.15, 32).student).avg_rel;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  std::string line = "seed " + std::to_string(seed) + " done in " + fmt("%.0fs", seconds_since(t0));
  for (const auto& [k, x] : out.v) line += "\n  " + k + " " + fmt("%.4f", x);
  if (!out.error.empty()) line += "\n  error: " + out.error;
  log(line);
  return out;
}

// Passes when at least 4 of the seeds satisfy `ok`.
Outcome majority(const std::vector<SeedMetrics>& seeds, const std::function<bool(const SeedMetrics&)>& ok,
                 const std::function<std::string(const SeedMetrics&)>& show) {
  int hits = 0;
  std::string detail;
  for (const auto& s : seeds) {
    const bool good = s.error.empty() && ok(s);
    hits += good;
    detail += (detail.empty() ? "" : "; ") + std::string(good ? "+" : "-") + show(s);
  }
  return {hits >= 4, std::to_string(hits) + "/" + std::to_string(seeds.size()) + " seeds [" + detail + "]"};
}

Outcome both(const Outcome& a, const Outcome& b, const std::string& la, const std::string& lb) {
  return {a.pass && b.pass, la + ": " + a.detail + " | " + lb + ": " + b.detail};
}

double at(const SeedMetrics& s, const std::string& k) {
  auto it = s.v.find(k);
  return it == s.v.end() ? NAN : it->second;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path scratch = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "prunelab_acceptance";
  fs::create_directories(scratch);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::pair<std::string, Outcome>> results;
  auto run = [&](const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    results.emplace_back(name, o);
    log("[" + std::to_string(results.size()) + "] " + (o.pass ? "PASS " : "FAIL ") + o.detail);
  };

  run("gradient correctness", gradients);
  run("mask-compact equivalence", mask_compact);
  run("block influence oracle", bi_oracle);
  run("taylor fidelity", taylor_fidelity);
  run("loss algebra", loss_algebra);
  run("ratio accounting", ratio_accounting);
  run("determinism", [&] { return determinism(scratch); });

  std::vector<SeedMetrics> seeds(5);
  const int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  prunelab::parallel_for(seeds.size(), jobs, [&](std::size_t, std::size_t i) { seeds[i] = trends_for_seed(i); });

  run("zero-shot ordering", [&] {
    auto ratio = [&](const std::string& tag) {
      return majority(seeds, [&](const SeedMetrics& s) { return at(s, "width" + tag) >= at(s, "layer" + tag); },
                      [&](const SeedMetrics& s) {
                        return fmt("%.3f", at(s, "width" + tag)) + " vs " + fmt("%.3f", at(s, "layer" + tag));
                      });
    };
    return both(ratio("0.15"), ratio("0.30"), "0.15", "0.30");
  });
  run("projector-only sufficiency", [&] {
    return majority(seeds, [](const SeedMetrics& s) { return at(s, "proj") >= 0.95 * at(s, "joint"); },
                    [](const SeedMetrics& s) { return fmt("%.3f", at(s, "proj")) + " vs " + fmt("%.3f", at(s, "joint")); });
  });
  run("modality disentangling", [&] {
    return majority(seeds, [](const SeedMetrics& s) { return at(s, "deg_mm") > at(s, "deg_txt"); },
                    [](const SeedMetrics& s) {
                      return fmt("%.3f", at(s, "deg_mm")) + " vs " + fmt("%.3f", at(s, "deg_txt"));
                    });
  });
  run("sft_l2 superiority", [&] {
    auto ratio = [&](const std::string& tag) {
      auto best_other = [&](const SeedMetrics& s) {
        double b = -1;
        for (const auto& p : rc::preset_names())
          if (p != "sft_l2") b = std::max(b, at(s, p + "@" + tag));
        return b;
      };
      return majority(seeds, [&](const SeedMetrics& s) { return at(s, "sft_l2@" + tag) >= best_other(s) - 0.01; },
                      [&](const SeedMetrics& s) {
                        return fmt("%.3f", at(s, "sft_l2@" + tag)) + " vs " + fmt("%.3f", best_other(s));
                      });
    };
    return both(ratio("0.30"), ratio("0.45"), "0.30", "0.45");
  });
  run("data efficiency", [&] {
    return majority(seeds, [](const SeedMetrics& s) { return at(s, "frac0.05") >= 0.90 * at(s, "frac1.00"); },
                    [](const SeedMetrics& s) {
                      return fmt("%.3f", at(s, "frac0.05")) + " vs " + fmt("%.3f", at(s, "frac1.00"));
                    });
  });
  run("calibration plateau", [&] {
    return majority(seeds,
                    [](const SeedMetrics& s) {
                      return at(s, "calib16") >= at(s, "calib1") &&
                             std::fabs(at(s, "calib32") - at(s, "calib16")) <= 0.02;
                    },
                    [](const SeedMetrics& s) {
                      return fmt("%.3f", at(s, "calib1")) + "/" + fmt("%.3f", at(s, "calib16")) + "/" +
                             fmt("%.3f", at(s, "calib32"));
                    });
  });

  std::ostringstream table;
  table << "acceptance (" << fmt("%.0f", seconds_since(t0)) << "s)\n";
  int passed = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& [name, o] = results[i];
    passed += o.pass;
    table << (o.pass ? "PASS " : "FAIL ") << (i + 1 < 10 ? " " : "") << i + 1 << " " << name << ": " << o.detail
          << "\n";
  }
  table << passed << "/" << results.size() << " criteria passed\n";
  std::fputs(table.str().c_str(), stdout);
  if (argc > 2) std::ofstream(argv[2]) << table.str();
  return 0;
}
