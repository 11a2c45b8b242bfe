#include "gatoms/coherence.hpp"

#include <algorithm>
#include <cmath>

namespace gatoms {

std::vector<ActivatingDoc> ActivatingDocuments(const CodeMatrix& codes, std::int64_t atom_id, int n,
                                               ActivationRanking ranking) {
  if (atom_id < 0 || atom_id >= codes.cols())
    throw Error(ErrorKind::kRange, "atom " + std::to_string(atom_id) + " outside [0, " +
                                       std::to_string(codes.cols()) + ")");
  std::vector<ActivatingDoc> docs;
  const auto& offsets = codes.row_offsets();
  for (std::int64_t i = 0; i < codes.rows(); ++i) {
    for (auto p = offsets[i]; p < offsets[i + 1]; ++p) {
      if (codes.indices()[p] != atom_id) continue;
      const double v = codes.values()[p];
      if (ranking == ActivationRanking::kPositive && !(v > 0)) continue;
      docs.push_back({i, v});
    }
  }
  auto key = [&](const ActivatingDoc& d) {
    return ranking == ActivationRanking::kMagnitude ? std::abs(d.coefficient) : d.coefficient;
  };
  std::stable_sort(docs.begin(), docs.end(),
                   [&](const ActivatingDoc& a, const ActivatingDoc& b) { return key(a) > key(b); });
  if (n >= 0 && docs.size() > static_cast<std::size_t>(n)) docs.resize(n);
  return docs;
}

double CoherenceScore(const GradientSet& raw, const std::vector<std::int64_t>& docs) {
  if (docs.size() < 2) throw Error(ErrorKind::kRange, "coherence needs at least 2 documents");
  for (auto i : docs)
    if (i < 0 || i >= raw.values.rows()) throw Error(ErrorKind::kRange, "document index " + std::to_string(i));
  std::vector<double> norms;
  norms.reserve(docs.size());
  for (auto i : docs) norms.push_back(raw.values.row(i).norm());
  double sum = 0.0;
  for (std::size_t a = 0; a < docs.size(); ++a) {
    for (std::size_t b = a + 1; b < docs.size(); ++b) {
      if (norms[a] == 0 || norms[b] == 0) continue;
      sum += raw.values.row(docs[a]).dot(raw.values.row(docs[b])) / (norms[a] * norms[b]);
    }
  }
  const double m = static_cast<double>(docs.size());
  return 2.0 * sum / (m * (m - 1.0));
}

CoherenceRanking RankAtoms(const CodeMatrix& codes, const GradientSet& raw, const CoherenceConfig& cfg, Exec exec) {
  if (cfg.top_n < 2) throw Error(ErrorKind::kConfig, "coherence.n must be >= 2");
  if (codes.rows() != raw.values.rows())
    throw Error(ErrorKind::kShape, "codes have " + std::to_string(codes.rows()) + " rows but there are " +
                                       std::to_string(raw.values.rows()) + " raw gradients");
  const auto counts = codes.ColumnCounts();
  CoherenceRanking ranking;
  ranking.reports.resize(codes.cols());
  const auto k = codes.cols();
#pragma omp parallel for schedule(dynamic) if (exec == Exec::kParallel)
  for (std::int64_t j = 0; j < k; ++j) {
    AtomReport& r = ranking.reports[j];
    r.atom_id = j;
    r.active_docs = counts[j];
    r.top_docs = ActivatingDocuments(codes, j, cfg.top_n, cfg.ranking);
    std::vector<std::int64_t> idx;
    for (const auto& d : r.top_docs) {
      idx.push_back(d.doc_index);
      r.top_doc_ids.push_back(d.doc_index < static_cast<std::int64_t>(raw.doc_ids.size())
                                  ? raw.doc_ids[d.doc_index]
                                  : std::to_string(d.doc_index));
    }
    if (idx.size() >= 2) r.coherence = CoherenceScore(raw, idx);
  }
  std::stable_sort(ranking.reports.begin(), ranking.reports.end(), [](const AtomReport& a, const AtomReport& b) {
    if (a.coherence.has_value() != b.coherence.has_value()) return a.coherence.has_value();
    if (!a.coherence) return false;
    return *a.coherence > *b.coherence;
  });
  for (const auto& r : ranking.reports) {
    if (r.coherence && *r.coherence > 0.5) ++ranking.above_half;
    if (r.coherence && *r.coherence > 0.1) ++ranking.above_tenth;
  }
  return ranking;
}

void WriteAtomCsv(std::ostream& out, const CoherenceRanking& ranking) {
  out << "atom_id,coherence,active_docs\n";
  for (const auto& r : ranking.reports) {
    out << r.atom_id << ',';
    if (r.coherence) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", *r.coherence);
      out << buf;
    }
    out << ',' << r.active_docs << '\n';
  }
}

nlohmann::json AtomReportsJson(const CoherenceRanking& ranking) {
  nlohmann::json atoms = nlohmann::json::array();
  for (const auto& r : ranking.reports) {
    nlohmann::json top = nlohmann::json::array();
    for (std::size_t i = 0; i < r.top_docs.size(); ++i)
      top.push_back({{"doc_id", r.top_doc_ids[i]}, {"coefficient", r.top_docs[i].coefficient}});
    atoms.push_back({
        {"atom_id", r.atom_id},
        {"coherence", r.coherence ? nlohmann::json(*r.coherence) : nlohmann::json(nullptr)},
        {"active_docs", r.active_docs},
        {"top_docs", top},
        {"label", r.label},
    });
  }
  return {{"atoms", atoms},
          {"summary", {{"coherence_gt_0.5", ranking.above_half}, {"coherence_gt_0.1", ranking.above_tenth}}}};
}

}  // namespace gatoms
