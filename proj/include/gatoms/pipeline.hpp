#pragma once

// Workspace-backed pipeline stages. Every stage reads its inputs from the
// workspace directory and writes its outputs there, so stages can be run one
// at a time from the command line or all together with RunAll.
//
// Workspace layout:
//   corpus.tsv          synthetic documents
//   model.gat           trained toy model (payload kind "model")
//   gradients.gat       per-document gradients
//   kfac_stats.gat      token-averaged A/S factors
//   basis.gat           eigenbasis, lambda and top-k selection
//   projected.gat       preconditioned, unit-normalized gradients
//   dictionary.gat      atoms
//   codes.gat           sparse codes
//   steering/atom_<j>.gat
//   reports/            CSV/JSON reports and plot data

#include "gatoms/coherence.hpp"
#include "gatoms/dictionary.hpp"
#include "gatoms/ekfac.hpp"
#include "gatoms/steering.hpp"
#include "gatoms/toy_model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <optional>
#include <string>
#include <vector>

namespace gatoms {

struct PipelineConfig {
  std::uint64_t seed = 7;
  int per_task_count = 250;
  toy::ModelShape model;
  toy::TrainConfig train;
  ProjectionConfig projection{.k = 16};
  EigenvalueSource eigenvalues = EigenvalueSource::kEkfac;
  DictConfig dict;
  CoherenceConfig coherence;
  SteerConfig steer;
  int suite_size = 100;
  // Rescale unprojected atoms to unit parameter-space norm before steering.
  bool unit_norm_steering = true;
  std::vector<double> sweep_penalties{0.01, 0.1, 1.0};
  std::filesystem::path workspace = "workspace";

  // Settings used for exporter-fed data at the original experiment's scale.
  static PipelineConfig ReferenceScale();

  nlohmann::json ToJson() const;
  static PipelineConfig FromJson(const nlohmann::json& j);
  void Validate() const;

  std::uint64_t train_seed() const { return seed + 1; }
  std::uint64_t dict_seed() const { return seed + 2; }
  std::uint64_t suite_seed() const { return seed + 3; }
};

// Defaults, then the JSON file (if any) as a merge patch, then each
// "dot.path=value" override. Values parse as JSON when possible, otherwise
// as strings.
PipelineConfig LoadConfig(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides);
void ApplyOverride(nlohmann::json& config, const std::string& assignment);

class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path corpus() const { return root_ / "corpus.tsv"; }
  std::filesystem::path model() const { return root_ / "model.gat"; }
  std::filesystem::path gradients() const { return root_ / "gradients.gat"; }
  std::filesystem::path kfac_stats() const { return root_ / "kfac_stats.gat"; }
  std::filesystem::path basis() const { return root_ / "basis.gat"; }
  std::filesystem::path projected() const { return root_ / "projected.gat"; }
  std::filesystem::path dictionary() const { return root_ / "dictionary.gat"; }
  std::filesystem::path codes() const { return root_ / "codes.gat"; }
  std::filesystem::path steering(std::int64_t atom) const;
  std::filesystem::path reports() const { return root_ / "reports"; }
  std::filesystem::path report(const std::string& name) const { return reports() / name; }

  // Throws Error(kIo) naming the path if the root directory is missing;
  // creates the reports/ and steering/ subdirectories.
  void Prepare() const;

 private:
  std::filesystem::path root_;
};

// A stage failure: the stage name plus the underlying cause.
class StageFailure : public std::runtime_error {
 public:
  StageFailure(const std::string& stage, const std::exception& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause.what()), stage_(stage) {}

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Task of a synthetic document from its doc_id prefix ("refuse-0012").
std::optional<toy::Task> DocTask(const std::string& doc_id);

// Fraction of the top docs that share the most common task, and that task.
std::pair<double, std::optional<toy::Task>> TaskPurity(const AtomReport& report);

void StageGenCorpus(const PipelineConfig& cfg);
void StageTrain(const PipelineConfig& cfg);
void StageGrads(const PipelineConfig& cfg);
void StageEkfac(const PipelineConfig& cfg);
void StageProject(const PipelineConfig& cfg);
void StageFitDict(const PipelineConfig& cfg);
// Ranks atoms and labels each with its dominant task and purity.
CoherenceRanking RankWorkspaceAtoms(const PipelineConfig& cfg);
CoherenceRanking StageCoherence(const PipelineConfig& cfg);
std::vector<std::filesystem::path> StageUnproject(const PipelineConfig& cfg, const std::vector<std::int64_t>& atoms);
std::vector<SteerRow> StageSteer(const PipelineConfig& cfg);
nlohmann::json StageReport(const PipelineConfig& cfg);

struct SweepRow {
  double penalty = 0.0;
  double median_docs_per_atom = 0.0;
  int above_half = 0;
  int above_tenth = 0;
};

// Refits the dictionary at each penalty on the persisted projections and
// writes codes_penalty_<i>.gat plus reports/sweep_penalty.csv.
std::vector<SweepRow> SweepPenalty(const PipelineConfig& cfg, const std::vector<double>& penalties);
double MedianActiveDocs(const CodeMatrix& codes);
void WriteSweepCsv(std::ostream& out, const std::vector<SweepRow>& rows);

// Validates an external gradient-store file (gradients or kfac_stats) and
// copies it into the workspace. Returns the registry.
nlohmann::json ImportArtifact(const PipelineConfig& cfg, const std::filesystem::path& path,
                              std::vector<std::string>* warnings = nullptr);

// corpus -> train -> grads -> ekfac -> project -> fit -> coherence -> steer
// -> report. A failing stage rethrows with the stage name prefixed.
nlohmann::json RunAll(const PipelineConfig& cfg);

}  // namespace gatoms
