#pragma once

// Steering protocol: perturb the model along an unprojected atom at a grid
// of scales in both signs, regenerate on a prompt suite, and measure how
// often a behavior detector fires.

#include "gatoms/common.hpp"
#include "gatoms/steering_vector.hpp"
#include "gatoms/toy_model.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <ostream>
#include <regex>
#include <string>
#include <vector>

namespace gatoms {

struct SteerConfig {
  std::vector<double> scales{0.5, 1.0, 2.0, 5.0, 10.0};
  int max_len = 8;

  void Validate() const;
};

enum class DetectorKind { kFirstTokenInSet, kContainsMinCount, kExactPrefix, kLinePattern };

// Response rule used by kExactPrefix detectors.
enum class PrefixRule { kEchoPayload, kReversePayload };

class BehaviorDetector {
 public:
  // Token-mode detectors for the toy model.
  static BehaviorDetector Refusal();  // first token is R
  static BehaviorDetector List();     // at least 2 L tokens
  static BehaviorDetector Echo();     // output == payload + E
  static BehaviorDetector Reverse();  // output == reversed payload + E

  // Text-mode detectors applied line by line.
  static BehaviorDetector YesNo();        // first line starts with Yes/No/True/False
  static BehaviorDetector Code();         // a fenced code block marker
  static BehaviorDetector RefusalText();  // clarification-seeking phrasing
  static BehaviorDetector Bullets();      // >= 2 lines starting with -, * or a bullet
  static BehaviorDetector Numbered();     // >= 2 lines starting with \d+[.)]

  // Detector for the behavior a toy task trains.
  static BehaviorDetector ForTask(toy::Task task);

  const std::string& name() const { return name_; }
  DetectorKind kind() const { return kind_; }
  bool is_text() const { return kind_ == DetectorKind::kLinePattern; }

  bool Detect(const toy::Tokens& prompt, const toy::Tokens& output) const;
  bool DetectText(const std::string& text) const;

 private:
  BehaviorDetector(std::string name, DetectorKind kind) : name_(std::move(name)), kind_(kind) {}

  std::string name_;
  DetectorKind kind_;
  std::vector<toy::TokenId> tokens_;
  int min_count_ = 1;
  PrefixRule prefix_rule_ = PrefixRule::kEchoPayload;
  std::string pattern_;
  std::regex regex_;
  bool first_line_only_ = false;
};

struct EvalPrompt {
  toy::Tokens prompt;
  toy::Task task = toy::Task::kEcho;
  bool is_target = false;
};

struct EvalSuite {
  toy::Task target = toy::Task::kEcho;
  std::vector<EvalPrompt> prompts;
};

// round(0.6 * count) prompts of the target task, the rest drawn uniformly
// from the other tasks. Requires count >= 10.
EvalSuite BuildEvalSuite(toy::Task target, std::uint64_t seed, int count);

struct SteerCell {
  double scale = 0.0;
  int sign = 1;
  std::optional<double> rate;  // undefined when perturbed params are non-finite
  std::optional<double> target_rate;
  std::optional<double> neutral_rate;
};

struct SteerExtreme {
  double rate = 0.0;
  double delta = 0.0;  // rate - baseline
  double scale = 0.0;
  int sign = 1;
};

struct SteerResult {
  double baseline = 0.0;
  double baseline_target = 0.0;
  double baseline_neutral = 0.0;
  std::vector<SteerCell> cells;  // scales ascending, sign +1 then -1
  SteerExtreme best_up;
  SteerExtreme best_down;

  // Baseline plus every cell: 2 * |scales| + 1 entries.
  std::size_t table_size() const { return cells.size() + 1; }
};

SteerResult RunSweep(const toy::ToyModelParams& params, const SteeringVector& v, const SteerConfig& cfg,
                     const EvalSuite& suite, const BehaviorDetector& detector, Exec exec = Exec::kParallel);

struct SteerRow {
  std::int64_t atom_id = 0;
  std::string behavior;
  std::optional<double> coherence;
  SteerResult result;
};

void WriteSteerCsv(std::ostream& out, const std::vector<SteerRow>& rows);
std::string FormatSteerTable(const std::vector<SteerRow>& rows);
// Rate against scale per sign, one line per (behavior, sign, scale).
void WriteSteerPlotData(std::ostream& out, const std::vector<SteerRow>& rows);
nlohmann::json SteerResultJson(const SteerRow& row);

// Signed change in whole percentage points, e.g. "+61pp".
std::string FormatPp(double delta);
std::string FormatPercent(double rate);

}  // namespace gatoms
