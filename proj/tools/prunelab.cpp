// prunelab: pretrain, prune, recover, evaluate and sweep toy LVLM runs.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "prunelab/errors.hpp"
#include "prunelab/pipeline.hpp"

namespace pl = prunelab::pipeline;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kBadManifest = 2, kMissingArtifact = 3, kDivergence = 4 };

struct Common {
  std::string manifest;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> overrides;
  int jobs = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--manifest,-m", c.manifest, "Manifest file (key = value lines)");
  cmd->add_option("--out,-o", c.out, "Output directory (overrides manifest 'out')");
  cmd->add_option("--seed,--seeds", c.seeds, "Seed(s) to run (overrides manifest 'seeds')")->delimiter(',');
  cmd->add_option("--set", c.overrides, "Override a manifest key: --set prune.ratio=0.3");
  cmd->add_option("--jobs,-j", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

pl::Manifest resolve(const Common& c) {
  pl::Manifest m = c.manifest.empty() ? pl::Manifest{} : pl::load_manifest(c.manifest);
  for (const std::string& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw prunelab::ConfigError("--set expects key=value, got '" + kv + "'");
    pl::set_key(m, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!c.out.empty()) m.out = c.out;
  if (!c.seeds.empty()) m.seeds = c.seeds;
  m.validate();
  return m;
}

using StageFn = std::filesystem::path (*)(const pl::Manifest&, std::uint64_t, int);

void run_stage(const Common& c, StageFn fn) {
  const pl::Manifest m = resolve(c);
  for (std::uint64_t seed : m.seeds) std::cout << fn(m, seed, c.jobs).string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured pruning and recovery experiments on a toy vision-language model"};
  app.require_subcommand(1);

  Common common;
  auto* pretrain = app.add_subcommand("pretrain", "Train the reference model");
  auto* prune = app.add_subcommand("prune", "Prune the reference model");
  auto* recover = app.add_subcommand("recover", "Recovery-train a pruned model");
  auto* eval = app.add_subcommand("eval", "Evaluate the last stage of the manifest");
  auto* run = app.add_subcommand("run", "Run every stage named by the manifest");
  auto* report = app.add_subcommand("report", "Print the eval reports of a manifest");
  for (auto* cmd : {pretrain, prune, recover, eval, run, report}) add_common(cmd, common);

  auto* sweep = app.add_subcommand("sweep", "Run the pipeline over one axis and all seeds");
  add_common(sweep, common);
  std::string axis;
  std::vector<std::string> values;
  std::string table;
  sweep->add_option("--axis", axis, "ratio, fraction, calibration_n or preset")->required();
  sweep->add_option("--values", values, "Comma-separated axis values")->required()->delimiter(',');
  sweep->add_option("--table", table, "Write the long-format table here instead of stdout");

  auto* advise = app.add_subcommand("advise", "Recommend a pruning strategy");
  double ratio = 0.0;
  std::string budget;
  advise->add_option("--ratio", ratio, "Target compression ratio")->required();
  advise->add_option("--budget", budget, "none, projector_only or full")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) run_stage(common, pl::cmd_pretrain);
    if (prune->parsed()) run_stage(common, pl::cmd_prune);
    if (recover->parsed()) run_stage(common, pl::cmd_recover);
    if (eval->parsed()) run_stage(common, pl::cmd_eval);
    if (run->parsed()) run_stage(common, pl::run_all);
    if (report->parsed()) std::cout << pl::cmd_report(resolve(common));
    if (sweep->parsed()) {
      const pl::Manifest m = resolve(common);
      const pl::SweepAxis a = pl::parse_axis(axis);
      const auto rows = pl::cmd_sweep(m, a, values, common.jobs);
      if (table.empty()) {
        pl::write_sweep(rows, a, std::cout);
      } else {
        std::ofstream os(table);
        pl::write_sweep(rows, a, os);
        std::cout << table << "\n";
      }
    }
    if (advise->parsed()) {
      const pl::Recommendation r = pl::cmd_advise(ratio, pl::parse_budget(budget));
      std::cout << pl::strategy_name(r.strategy) << "\t" << r.rationale << "\n";
    }
  } catch (const prunelab::ConfigError& e) {
    std::cerr << "invalid manifest: " << e.what() << "\n";
    return kBadManifest;
  } catch (const prunelab::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const prunelab::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
