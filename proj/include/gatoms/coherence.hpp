#pragma once

#include "gatoms/common.hpp"
#include "gatoms/dictionary.hpp"
#include "gatoms/tensor_file.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace gatoms {

enum class ActivationRanking {
  kMagnitude,  // nonzero coefficients by descending |a_ij|
  kPositive,   // positive coefficients by descending a_ij
};

struct CoherenceConfig {
  int top_n = 20;
  ActivationRanking ranking = ActivationRanking::kMagnitude;
};

struct ActivatingDoc {
  std::int64_t doc_index = 0;
  double coefficient = 0.0;
};

struct AtomReport {
  std::int64_t atom_id = 0;
  std::optional<double> coherence;  // undefined with fewer than 2 top docs
  std::int64_t active_docs = 0;
  std::vector<ActivatingDoc> top_docs;
  std::vector<std::string> top_doc_ids;
  std::string label;
};

struct CoherenceRanking {
  std::vector<AtomReport> reports;  // descending coherence, undefined last
  int above_half = 0;               // coherence > 0.5
  int above_tenth = 0;              // coherence > 0.1
};

// Ties on the ranking key resolve to the lower document index.
std::vector<ActivatingDoc> ActivatingDocuments(const CodeMatrix& codes, std::int64_t atom_id, int n,
                                               ActivationRanking ranking = ActivationRanking::kMagnitude);

// Mean cosine similarity over ordered pairs a != b of the given rows of the
// raw gradient matrix. A zero-norm row contributes cosine 0.
double CoherenceScore(const GradientSet& raw, const std::vector<std::int64_t>& docs);

CoherenceRanking RankAtoms(const CodeMatrix& codes, const GradientSet& raw, const CoherenceConfig& cfg,
                           Exec exec = Exec::kParallel);

void WriteAtomCsv(std::ostream& out, const CoherenceRanking& ranking);
nlohmann::json AtomReportsJson(const CoherenceRanking& ranking);

}  // namespace gatoms
