#include "gatoms/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace gatoms {

using toy::Task;
using toy::Tokens;
using toy::Vocab;

void SteerConfig::Validate() const {
  if (scales.empty()) throw Error(ErrorKind::kConfig, "steer.scales is empty");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] >= 0) || !std::isfinite(scales[i]))
      throw Error(ErrorKind::kConfig, "steer.scales must be finite and non-negative");
    if (i > 0 && !(scales[i] > scales[i - 1]))
      throw Error(ErrorKind::kConfig, "steer.scales must be strictly increasing");
  }
  if (max_len < 0) throw Error(ErrorKind::kConfig, "steer.max_len must be >= 0");
}

// ---------------------------------------------------------------------------
// Detectors

BehaviorDetector BehaviorDetector::Refusal() {
  BehaviorDetector d("refusal", DetectorKind::kFirstTokenInSet);
  d.tokens_ = {Vocab::kRefusal};
  return d;
}

BehaviorDetector BehaviorDetector::List() {
  BehaviorDetector d("list", DetectorKind::kContainsMinCount);
  d.tokens_ = {Vocab::kListItem};
  d.min_count_ = 2;
  return d;
}

BehaviorDetector BehaviorDetector::Echo() {
  BehaviorDetector d("echo", DetectorKind::kExactPrefix);
  d.prefix_rule_ = PrefixRule::kEchoPayload;
  return d;
}

BehaviorDetector BehaviorDetector::Reverse() {
  BehaviorDetector d("reverse", DetectorKind::kExactPrefix);
  d.prefix_rule_ = PrefixRule::kReversePayload;
  return d;
}

BehaviorDetector BehaviorDetector::YesNo() {
  BehaviorDetector d("yes_no", DetectorKind::kLinePattern);
  d.pattern_ = R"(^\s*(yes|no|true|false)\b)";
  d.first_line_only_ = true;
  d.regex_ = std::regex(d.pattern_, std::regex::icase | std::regex::ECMAScript);
  return d;
}

BehaviorDetector BehaviorDetector::Code() {
  BehaviorDetector d("code", DetectorKind::kLinePattern);
  d.pattern_ = "```";
  d.regex_ = std::regex(d.pattern_);
  return d;
}

BehaviorDetector BehaviorDetector::RefusalText() {
  BehaviorDetector d("refusal_text", DetectorKind::kLinePattern);
  d.pattern_ =
      R"((please (provide|clarify|specify|share)|could you (please )?(provide|clarify|specify|share))"
      R"(|can you (please )?(provide|clarify|specify|share)|need more (information|context|details))"
      R"(|what would you like|i need (the|some|more) (input|text|information|context)))";
  d.regex_ = std::regex(d.pattern_, std::regex::icase | std::regex::ECMAScript);
  return d;
}

BehaviorDetector BehaviorDetector::Bullets() {
  BehaviorDetector d("bullets", DetectorKind::kLinePattern);
  d.pattern_ = "^\\s*(-|\\*|\xE2\x80\xA2)";
  d.min_count_ = 2;
  d.regex_ = std::regex(d.pattern_);
  return d;
}

BehaviorDetector BehaviorDetector::Numbered() {
  BehaviorDetector d("numbered", DetectorKind::kLinePattern);
  d.pattern_ = R"(^\s*\d+[.)])";
  d.min_count_ = 2;
  d.regex_ = std::regex(d.pattern_);
  return d;
}

BehaviorDetector BehaviorDetector::ForTask(Task task) {
  switch (task) {
    case Task::kEcho: return Echo();
    case Task::kReverse: return Reverse();
    case Task::kRefuse: return Refusal();
    case Task::kList: return List();
  }
  throw Error(ErrorKind::kConfig, "no detector for task");
}

bool BehaviorDetector::Detect(const Tokens& prompt, const Tokens& output) const {
  switch (kind_) {
    case DetectorKind::kFirstTokenInSet:
      return !output.empty() && std::find(tokens_.begin(), tokens_.end(), output.front()) != tokens_.end();
    case DetectorKind::kContainsMinCount: {
      const auto count = std::count_if(output.begin(), output.end(), [&](toy::TokenId t) {
        return std::find(tokens_.begin(), tokens_.end(), t) != tokens_.end();
      });
      return count >= min_count_;
    }
    case DetectorKind::kExactPrefix: {
      Tokens expected = toy::PromptPayload(prompt);
      if (prefix_rule_ == PrefixRule::kReversePayload) std::reverse(expected.begin(), expected.end());
      expected.push_back(Vocab::kEnd);
      return output.size() >= expected.size() && std::equal(expected.begin(), expected.end(), output.begin());
    }
    case DetectorKind::kLinePattern: {
      std::string text;
      for (std::size_t i = 0; i < output.size(); ++i) {
        if (i) text += ' ';
        text += Vocab::Symbol(output[i]);
      }
      return DetectText(text);
    }
  }
  return false;
}

bool BehaviorDetector::DetectText(const std::string& text) const {
  if (kind_ != DetectorKind::kLinePattern) {
    // Token detectors applied to rendered toy output.
    try {
      return Detect({}, Vocab::Parse(text));
    } catch (const Error&) {
      return false;
    }
  }
  std::istringstream in(text);
  std::string line;
  int matches = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::regex_search(line, regex_)) ++matches;
    if (first_line_only_) break;
  }
  return matches >= min_count_;
}

// ---------------------------------------------------------------------------
// Suites and sweeps

EvalSuite BuildEvalSuite(Task target, std::uint64_t seed, int count) {
  if (count < 10) throw Error(ErrorKind::kConfig, "evaluation suites need at least 10 prompts");
  std::mt19937_64 rng(seed);
  const int targets = static_cast<int>(std::lround(0.6 * count));
  std::vector<Task> others;
  for (Task t : toy::kAllTasks)
    if (t != target) others.push_back(t);
  std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
  EvalSuite suite;
  suite.target = target;
  for (int i = 0; i < count; ++i) {
    const bool is_target = i < targets;
    const Task task = is_target ? target : others[pick(rng)];
    const auto doc = toy::MakeDoc("", task, toy::SamplePayload(task, rng));
    suite.prompts.push_back({doc.prompt, task, is_target});
  }
  return suite;
}

namespace {

struct Rates {
  double all = 0.0, target = 0.0, neutral = 0.0;
};

Rates Evaluate(const toy::ToyModelParams& params, const SteerConfig& cfg, const EvalSuite& suite,
               const BehaviorDetector& detector) {
  int hits = 0, target_hits = 0, targets = 0, neutral_hits = 0, neutrals = 0;
  for (const auto& p : suite.prompts) {
    const bool hit = detector.Detect(p.prompt, toy::ForwardGenerate(params, p.prompt, cfg.max_len));
    hits += hit;
    if (p.is_target) {
      ++targets;
      target_hits += hit;
    } else {
      ++neutrals;
      neutral_hits += hit;
    }
  }
  Rates r;
  r.all = suite.prompts.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(suite.prompts.size());
  r.target = targets ? static_cast<double>(target_hits) / targets : 0.0;
  r.neutral = neutrals ? static_cast<double>(neutral_hits) / neutrals : 0.0;
  return r;
}

}  // namespace

SteerResult RunSweep(const toy::ToyModelParams& params, const SteeringVector& v, const SteerConfig& cfg,
                     const EvalSuite& suite, const BehaviorDetector& detector, Exec exec) {
  cfg.Validate();
  if (v.values.size() != params.d()) throw Error(ErrorKind::kRegistry, "steering vector length != model d");
  SteerResult result;
  const Rates base = Evaluate(params, cfg, suite, detector);
  result.baseline = base.all;
  result.baseline_target = base.target;
  result.baseline_neutral = base.neutral;

  for (double scale : cfg.scales)
    for (int sign : {1, -1}) result.cells.push_back({scale, sign, {}, {}, {}});

  const auto n = static_cast<std::int64_t>(result.cells.size());
#pragma omp parallel for schedule(dynamic) if (exec == Exec::kParallel)
  for (std::int64_t c = 0; c < n; ++c) {
    auto& cell = result.cells[c];
    const auto steered = toy::ApplySteering(params, v, cell.scale, cell.sign);
    if (!steered.theta().allFinite()) continue;
    const Rates r = Evaluate(steered, cfg, suite, detector);
    cell.rate = r.all;
    cell.target_rate = r.target;
    cell.neutral_rate = r.neutral;
  }

  result.best_up = {result.baseline, 0.0, 0.0, 1};
  result.best_down = {result.baseline, 0.0, 0.0, 1};
  bool first = true;
  for (const auto& cell : result.cells) {
    if (!cell.rate) continue;
    const SteerExtreme e{*cell.rate, *cell.rate - result.baseline, cell.scale, cell.sign};
    if (first || e.rate > result.best_up.rate) result.best_up = e;
    if (first || e.rate < result.best_down.rate) result.best_down = e;
    first = false;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reporting

std::string FormatPp(double delta) {
  const long pp = std::lround(delta * 100.0);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+ldpp", pp);
  return buf;
}

std::string FormatPercent(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%ld%%", std::lround(rate * 100.0));
  return buf;
}

namespace {

std::string Fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
  return buf;
}

}  // namespace

void WriteSteerCsv(std::ostream& out, const std::vector<SteerRow>& rows) {
  out << "atom,behavior,coherence,base,best_up,delta_up,best_down,delta_down\n";
  for (const auto& r : rows) {
    out << r.atom_id << ',' << r.behavior << ',' << (r.coherence ? Fixed(*r.coherence, 6) : "") << ','
        << Fixed(r.result.baseline, 6) << ',' << Fixed(r.result.best_up.rate, 6) << ','
        << Fixed(r.result.best_up.delta, 6) << ',' << Fixed(r.result.best_down.rate, 6) << ','
        << Fixed(r.result.best_down.delta, 6) << '\n';
  }
}

std::string FormatSteerTable(const std::vector<SteerRow>& rows) {
  const std::vector<std::string> header = {"Atom", "Behavior", "Coherence", "Base", "Best↑", "Δ↑", "Best↓", "Δ↓"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    cells.push_back({"#" + std::to_string(r.atom_id), r.behavior, r.coherence ? Fixed(*r.coherence, 3) : "-",
                     FormatPercent(r.result.baseline), FormatPercent(r.result.best_up.rate),
                     FormatPp(r.result.best_up.delta), FormatPercent(r.result.best_down.rate),
                     FormatPp(r.result.best_down.delta)});
  }
  // Display width, counting UTF-8 continuation bytes as zero.
  auto width = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += "  ";
      out += row[c];
      if (c + 1 < row.size()) out.append(widths[c] - width(row[c]), ' ');
    }
    out += '\n';
  }
  return out;
}

void WriteSteerPlotData(std::ostream& out, const std::vector<SteerRow>& rows) {
  out << "behavior,atom,sign,scale,rate\n";
  for (const auto& r : rows) {
    out << r.behavior << ',' << r.atom_id << ",0,0," << Fixed(r.result.baseline, 6) << '\n';
    for (const auto& c : r.result.cells)
      out << r.behavior << ',' << r.atom_id << ',' << (c.sign > 0 ? "+1" : "-1") << ',' << c.scale << ','
          << (c.rate ? Fixed(*c.rate, 6) : "nan") << '\n';
  }
}

nlohmann::json SteerResultJson(const SteerRow& row) {
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : row.result.cells)
    cells.push_back({{"scale", c.scale},
                     {"sign", c.sign},
                     {"rate", opt(c.rate)},
                     {"target_rate", opt(c.target_rate)},
                     {"neutral_rate", opt(c.neutral_rate)}});
  auto extreme = [](const SteerExtreme& e) {
    return nlohmann::json{{"rate", e.rate}, {"delta", e.delta}, {"scale", e.scale}, {"sign", e.sign}};
  };
  return {{"atom", row.atom_id},
          {"behavior", row.behavior},
          {"coherence", opt(row.coherence)},
          {"baseline", row.result.baseline},
          {"baseline_target", row.result.baseline_target},
          {"baseline_neutral", row.result.baseline_neutral},
          {"cells", cells},
          {"best_up", extreme(row.result.best_up)},
          {"best_down", extreme(row.result.best_down)}};
}

}  // namespace gatoms
