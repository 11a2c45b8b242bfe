// gatoms: command-line driver for the gradient-atom pipeline.
//
//   gatoms run-all --workspace ws
//   gatoms fit-dict --workspace ws --override dict.penalty=0.05
//   gatoms sweep-penalty --workspace ws --penalties 0.01,0.1,1
//   gatoms import exported.gat --workspace ws

#include "gatoms/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string workspace;
  std::vector<std::string> overrides;
  bool reference_scale = false;
};

void AddCommon(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON configuration file");
  cmd->add_option("--seed", f.seed, "Override the top-level seed");
  cmd->add_option("--workspace", f.workspace, "Workspace directory (must exist)");
  cmd->add_option("--override", f.overrides, "Dot-path override, e.g. dict.penalty=0.05")->take_all();
  cmd->add_flag("--reference-scale", f.reference_scale, "Start from the reference-scale preset (1250 docs per task, k=50, K=500) instead of desk defaults");
}

gatoms::PipelineConfig Resolve(const CommonFlags& f) {
  std::vector<std::string> overrides;
  if (f.reference_scale) {
    const auto preset = gatoms::PipelineConfig::ReferenceScale().ToJson();
    overrides.push_back("corpus.per_task_count=" + preset["corpus"]["per_task_count"].dump());
    overrides.push_back("projection.k=" + preset["projection"]["k"].dump());
    overrides.push_back("dict.K=" + preset["dict"]["K"].dump());
    overrides.push_back("dict.penalty=" + preset["dict"]["penalty"].dump());
    overrides.push_back("coherence.n=" + preset["coherence"]["n"].dump());
  }
  overrides.insert(overrides.end(), f.overrides.begin(), f.overrides.end());
  if (f.seed) overrides.push_back("seed=" + std::to_string(*f.seed));
  if (!f.workspace.empty()) overrides.push_back("paths.workspace=" + nlohmann::json(f.workspace).dump());
  std::optional<std::filesystem::path> path;
  if (!f.config.empty()) path = f.config;
  return gatoms::LoadConfig(path, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient atoms: sparse dictionaries over preconditioned per-document gradients"};
  app.require_subcommand(1);
  CommonFlags flags;

  std::vector<std::int64_t> atoms;
  std::vector<double> penalties;
  std::string import_path;

  auto add = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    AddCommon(cmd, flags);
    return cmd;
  };
  auto* run_all = add("run-all", "Run every stage from corpus generation to the report bundle");
  auto* gen_corpus = add("gen-corpus", "Generate the synthetic multi-task corpus");
  auto* train = add("train", "Train the toy model");
  auto* grads = add("grads", "Per-document gradients and KFAC statistics");
  auto* ekfac = add("ekfac", "Eigendecompose the factors and refit eigenvalues");
  auto* project = add("project", "Project, precondition and normalize gradients");
  auto* fit_dict = add("fit-dict", "Learn the atom dictionary and sparse codes");
  auto* coherence = add("coherence", "Rank atoms by coherence");
  auto* unproject = add("unproject", "Map atoms back to parameter space");
  unproject->add_option("--atom", atoms, "Atom index (repeatable)")->required()->take_all();
  auto* steer = add("steer", "Steering sweeps for the atom of each task");
  auto* sweep = add("sweep-penalty", "Refit at several sparsity penalties");
  sweep->add_option("--penalties", penalties, "Comma-separated penalties (default: dict.sweep_penalties)")
      ->delimiter(',');
  auto* import = add("import", "Validate an external gradient-store file and add it to the workspace");
  import->add_option("path", import_path, "gradients or kfac_stats file")->required();
  auto* report = add("report", "Collect reports and artifact digests into summary.json");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = Resolve(flags);
    if (run_all->parsed()) {
      gatoms::RunAll(cfg);
      const auto table = gatoms::Workspace(cfg.workspace).report("steering.txt");
      std::ifstream in(table);
      std::cout << in.rdbuf();
    } else if (gen_corpus->parsed()) {
      gatoms::StageGenCorpus(cfg);
    } else if (train->parsed()) {
      gatoms::StageTrain(cfg);
    } else if (grads->parsed()) {
      gatoms::StageGrads(cfg);
    } else if (ekfac->parsed()) {
      gatoms::StageEkfac(cfg);
    } else if (project->parsed()) {
      gatoms::StageProject(cfg);
    } else if (fit_dict->parsed()) {
      gatoms::StageFitDict(cfg);
    } else if (coherence->parsed()) {
      const auto ranking = gatoms::StageCoherence(cfg);
      gatoms::WriteAtomCsv(std::cout, ranking);
    } else if (unproject->parsed()) {
      for (const auto& p : gatoms::StageUnproject(cfg, atoms)) std::cout << p.string() << "\n";
    } else if (steer->parsed()) {
      std::cout << gatoms::FormatSteerTable(gatoms::StageSteer(cfg));
    } else if (sweep->parsed()) {
      const auto rows = gatoms::SweepPenalty(cfg, penalties.empty() ? cfg.sweep_penalties : penalties);
      gatoms::WriteSweepCsv(std::cout, rows);
    } else if (import->parsed()) {
      std::cout << gatoms::ImportArtifact(cfg, import_path).dump(2) << "\n";
    } else if (report->parsed()) {
      gatoms::StageReport(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "gatoms " << app.get_subcommands().front()->get_name() << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
