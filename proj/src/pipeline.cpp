#include "gatoms/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace gatoms {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void Log(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << "\n"; }

std::string Fmt(double v, const char* format = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

void WriteJson(const fs::path& path, const json& j) { WriteText(path, j.dump(2) + "\n"); }

json ReadJson(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

std::vector<unsigned char> ReadBytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reports every key of `actual` that the defaults do not know about.
void CheckKeys(const json& actual, const json& defaults, const std::string& prefix) {
  for (auto it = actual.begin(); it != actual.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) throw Error(ErrorKind::kConfig, "unknown config key '" + path + "'");
    if (it->is_object() && defaults.at(it.key()).is_object()) CheckKeys(*it, defaults.at(it.key()), path);
  }
}

std::string RankingName(ActivationRanking r) { return r == ActivationRanking::kMagnitude ? "magnitude" : "positive"; }

ActivationRanking ParseRanking(const std::string& s) {
  if (s == "magnitude") return ActivationRanking::kMagnitude;
  if (s == "positive") return ActivationRanking::kPositive;
  throw Error(ErrorKind::kConfig, "coherence.ranking must be 'magnitude' or 'positive', got '" + s + "'");
}

// The basis file must agree with the configured k and epsilon.
ProjectionConfig LoadBasis(const PipelineConfig& cfg, const Workspace& ws, EkfacBasis* basis) {
  ProjectionConfig stored;
  *basis = BasisFromFile(ReadTensorFile(ws.basis()), &stored);
  if (stored.k != cfg.projection.k || stored.epsilon != cfg.projection.epsilon)
    throw Error(ErrorKind::kConfig, "basis.gat was built with k=" + std::to_string(stored.k) + ", epsilon=" +
                                        Fmt(stored.epsilon, "%g") + "; rerun the ekfac stage");
  return cfg.projection;
}

}  // namespace

PipelineConfig PipelineConfig::ReferenceScale() {
  PipelineConfig c;
  c.per_task_count = 1250;
  c.projection.k = 50;
  c.dict.num_atoms = 500;
  c.dict.penalty = 0.1;
  c.coherence.top_n = 20;
  return c;
}

json PipelineConfig::ToJson() const {
  return {
      {"seed", seed},
      {"corpus", {{"per_task_count", per_task_count}}},
      {"model", {{"window", model.window}, {"hidden", model.hidden}}},
      {"train", {{"steps", train.steps}, {"learning_rate", train.learning_rate}, {"batch_size", train.batch_size}}},
      {"projection",
       {{"k", projection.k},
        {"epsilon", projection.epsilon},
        {"unproject_preconditioning", PreconditioningModeName(projection.unproject_mode)},
        {"eigenvalues", EigenvalueSourceName(eigenvalues)}}},
      {"dict",
       {{"K", dict.num_atoms},
        {"penalty", dict.penalty},
        {"batch_size", dict.batch_size},
        {"epochs", dict.epochs},
        {"coding_iters", dict.coding_iters},
        {"coding_tol", dict.coding_tol},
        {"decay", dict.decay},
        {"sweep_penalties", sweep_penalties}}},
      {"coherence", {{"n", coherence.top_n}, {"ranking", RankingName(coherence.ranking)}}},
      {"steer", {{"scales", steer.scales}, {"max_len", steer.max_len}, {"suite_size", suite_size},
                 {"unit_norm", unit_norm_steering}}},
      {"paths", {{"workspace", workspace.string()}}},
  };
}

PipelineConfig PipelineConfig::FromJson(const json& j) {
  const json defaults = PipelineConfig().ToJson();
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "configuration must be a JSON object");
  CheckKeys(j, defaults, "");
  json m = defaults;
  m.merge_patch(j);
  PipelineConfig c;
  try {
    c.seed = m.at("seed").get<std::uint64_t>();
    c.per_task_count = m.at("corpus").at("per_task_count").get<int>();
    c.model.window = m.at("model").at("window").get<int>();
    c.model.hidden = m.at("model").at("hidden").get<int>();
    const auto& t = m.at("train");
    c.train.steps = t.at("steps").get<int>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.batch_size = t.at("batch_size").get<int>();
    const auto& p = m.at("projection");
    c.projection.k = p.at("k").get<int>();
    c.projection.epsilon = p.at("epsilon").get<double>();
    c.projection.unproject_mode = ParsePreconditioningMode(p.at("unproject_preconditioning").get<std::string>());
    c.eigenvalues = ParseEigenvalueSource(p.at("eigenvalues").get<std::string>());
    const auto& d = m.at("dict");
    c.dict.num_atoms = d.at("K").get<int>();
    c.dict.penalty = d.at("penalty").get<double>();
    c.dict.batch_size = d.at("batch_size").get<int>();
    c.dict.epochs = d.at("epochs").get<int>();
    c.dict.coding_iters = d.at("coding_iters").get<int>();
    c.dict.coding_tol = d.at("coding_tol").get<double>();
    c.dict.decay = d.at("decay").get<double>();
    c.sweep_penalties = d.at("sweep_penalties").get<std::vector<double>>();
    c.coherence.top_n = m.at("coherence").at("n").get<int>();
    c.coherence.ranking = ParseRanking(m.at("coherence").at("ranking").get<std::string>());
    const auto& s = m.at("steer");
    c.steer.scales = s.at("scales").get<std::vector<double>>();
    c.steer.max_len = s.at("max_len").get<int>();
    c.suite_size = s.at("suite_size").get<int>();
    c.unit_norm_steering = s.at("unit_norm").get<bool>();
    c.workspace = m.at("paths").at("workspace").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("configuration: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, e.what());
  }
  c.Validate();
  return c;
}

void PipelineConfig::Validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw Error(ErrorKind::kConfig, msg);
  };
  require(per_task_count >= 1, "corpus.per_task_count must be >= 1");
  require(model.window >= 1 && model.hidden >= 1, "model.window and model.hidden must be >= 1");
  require(train.steps >= 1, "train.steps must be >= 1");
  require(std::isfinite(train.learning_rate) && train.learning_rate > 0, "train.learning_rate must be > 0");
  require(train.batch_size >= 1, "train.batch_size must be >= 1");
  require(projection.k >= 1, "projection.k must be >= 1");
  require(std::isfinite(projection.epsilon) && projection.epsilon > 0, "projection.epsilon must be > 0");
  DictConfig d = dict;
  d.Validate();
  require(!sweep_penalties.empty(), "dict.sweep_penalties must not be empty");
  for (double p : sweep_penalties) require(std::isfinite(p) && p >= 0, "dict.sweep_penalties must be >= 0");
  require(coherence.top_n >= 2, "coherence.n must be >= 2");
  steer.Validate();
  require(suite_size >= 10, "steer.suite_size must be >= 10");
  require(!workspace.empty(), "paths.workspace must not be empty");
}

void ApplyOverride(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorKind::kConfig, "override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  std::string pointer;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw Error(ErrorKind::kConfig, "override key '" + key + "' has an empty component");
    pointer += "/" + part;
  }
  config[json::json_pointer(pointer)] = value;
}

PipelineConfig LoadConfig(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (path) {
    j = ReadJson(*path);
    if (!j.is_object()) throw Error(ErrorKind::kConfig, path->string() + ": configuration must be a JSON object");
  }
  for (const auto& o : overrides) ApplyOverride(j, o);
  return PipelineConfig::FromJson(j);
}

fs::path Workspace::steering(std::int64_t atom) const {
  return root_ / "steering" / ("atom_" + std::to_string(atom) + ".gat");
}

void Workspace::Prepare() const {
  std::error_code ec;
  if (!fs::is_directory(root_, ec))
    throw Error(ErrorKind::kIo, "workspace directory '" + root_.string() + "' does not exist");
  fs::create_directories(reports(), ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create '" + reports().string() + "': " + ec.message());
  fs::create_directories(root_ / "steering", ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create '" + (root_ / "steering").string() + "': " + ec.message());
}

std::optional<toy::Task> DocTask(const std::string& doc_id) {
  const auto dash = doc_id.rfind('-');
  if (dash == std::string::npos) return std::nullopt;
  try {
    return toy::ParseTask(doc_id.substr(0, dash));
  } catch (const Error&) {
    return std::nullopt;
  }
}

std::pair<double, std::optional<toy::Task>> TaskPurity(const AtomReport& report) {
  if (report.top_doc_ids.empty()) return {0.0, std::nullopt};
  int counts[4] = {0, 0, 0, 0};
  for (const auto& id : report.top_doc_ids)
    if (auto t = DocTask(id)) ++counts[static_cast<int>(*t)];
  int best = 0;
  for (int t = 1; t < 4; ++t)
    if (counts[t] > counts[best]) best = t;
  if (counts[best] == 0) return {0.0, std::nullopt};
  return {static_cast<double>(counts[best]) / static_cast<double>(report.top_doc_ids.size()),
          static_cast<toy::Task>(best)};
}

void StageGenCorpus(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto corpus = toy::GenerateCorpus(cfg.seed, cfg.per_task_count);
  toy::WriteCorpus(ws.corpus(), corpus);
  Log("gen-corpus", std::to_string(corpus.size()) + " documents -> " + ws.corpus().string());
}

void StageTrain(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto corpus = toy::ReadCorpus(ws.corpus());
  toy::TrainConfig t = cfg.train;
  t.seed = cfg.train_seed();
  const auto result = toy::Train(corpus, cfg.model, t);
  WriteTensorFile(ws.model(), toy::ParamsToFile(result.params));
  std::string curve = "step,loss\n";
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i)
    curve += std::to_string(i) + "," + Fmt(result.loss_curve[i], "%.10g") + "\n";
  WriteText(ws.report("loss_curve.csv"), curve);
  WriteJson(ws.report("train.json"), {{"initial_loss", result.initial_loss},
                                      {"final_loss", result.final_loss},
                                      {"steps", t.steps},
                                      {"d", result.params.d()}});
  Log("train", "loss " + Fmt(result.initial_loss, "%.4f") + " -> " + Fmt(result.final_loss, "%.4f"));
}

void StageGrads(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto corpus = toy::ReadCorpus(ws.corpus());
  const auto params = toy::ParamsFromFile(ReadTensorFile(ws.model()));
  const auto gs = toy::PerDocumentGradients(params, corpus);
  WriteGradientSet(ws.gradients(), gs);
  const auto stats = toy::CollectKfacStats(params, corpus);
  WriteKfacStats(ws.kfac_stats(), stats);
  Log("grads", std::to_string(gs.num_docs()) + " x " + std::to_string(gs.registry.d()) + " gradients, " +
                   std::to_string(stats.token_count) + " tokens");
}

void StageEkfac(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto stats = ReadKfacStats(ws.kfac_stats());
  auto basis = Eigendecompose(EstimateFactors(stats));
  std::vector<std::string> warnings;
  if (cfg.eigenvalues == EigenvalueSource::kEkfac) {
    const bool have_tokens = fs::exists(ws.model()) && fs::exists(ws.corpus());
    std::optional<toy::ToyModelParams> params;
    if (have_tokens) params = toy::ParamsFromFile(ReadTensorFile(ws.model()));
    if (params && params->registry() == basis.registry) {
      const auto corpus = toy::ReadCorpus(ws.corpus());
      constexpr std::size_t kChunk = 16;
      const std::size_t chunks = (corpus.size() + kChunk - 1) / kChunk;
      std::vector<EigenvalueAccumulator> accs(chunks, EigenvalueAccumulator(basis));
      const std::span<const toy::SyntheticDoc> docs(corpus);
#pragma omp parallel for schedule(dynamic)
      for (std::size_t c = 0; c < chunks; ++c) {
        const auto begin = c * kChunk;
        const auto len = std::min(kChunk, corpus.size() - begin);
        toy::VisitTokens(*params, docs.subspan(begin, len), [&](const toy::TokenTrace& tr) {
          for (std::size_t m = 0; m < basis.modules.size(); ++m)
            accs[c].AddOuter(m, toy::ModuleDelta(tr, m), toy::ModuleInput(tr, m));
        });
      }
      EigenvalueAccumulator total(basis);
      for (const auto& a : accs) total.Merge(a);
      CorrectEigenvalues(basis, total);
    } else {
      warnings.push_back("no token data matching the statistics registry; using KFAC eigenvalues");
    }
  }
  SelectBasisTopK(basis, cfg.projection.k);
  WriteTensorFile(ws.basis(), BasisToFile(basis, cfg.projection));
  json modules = json::array();
  for (std::size_t m = 0; m < basis.modules.size(); ++m) {
    const auto& mb = basis.modules[m];
    std::vector<double> top;
    for (auto i : mb.topk) top.push_back(mb.lambda[i]);
    modules.push_back({{"name", basis.registry.module(m).name}, {"top_lambda", top}});
  }
  WriteJson(ws.report("ekfac.json"), {{"eigenvalues", EigenvalueSourceName(basis.source)},
                                      {"k", basis.k},
                                      {"modules", modules},
                                      {"warnings", warnings}});
  for (const auto& w : warnings) Log("ekfac", "warning: " + w);
  Log("ekfac", EigenvalueSourceName(basis.source) + " basis, k=" + std::to_string(basis.k) + " per module");
}

void StageProject(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  EkfacBasis basis;
  const auto p = LoadBasis(cfg, ws, &basis);
  const auto gs = ReadGradientSet(ws.gradients());
  const auto projected = Project(gs, basis, p, /*normalize=*/true);
  WriteTensorFile(ws.projected(), ProjectedToFile(projected));
  Log("project", std::to_string(projected.values.rows()) + " x " + std::to_string(projected.values.cols()));
}

void StageFitDict(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto projected = ProjectedFromFile(ReadTensorFile(ws.projected()));
  DictConfig d = cfg.dict;
  d.seed = cfg.dict_seed();
  const auto fit = FitDictionary(projected.values, d);
  WriteTensorFile(ws.dictionary(), DictionaryToFile(fit.dict, d));
  WriteTensorFile(ws.codes(), CodesToFile(fit.codes, projected.doc_ids));
  WriteJson(ws.report("dict_fit.json"), {{"epoch_errors", fit.epoch_errors},
                                         {"dead_atoms", fit.dead_atoms},
                                         {"warnings", fit.warnings},
                                         {"nnz", fit.codes.nnz()},
                                         {"density", fit.codes.density()}});
  for (const auto& w : fit.warnings) Log("fit-dict", "warning: " + w);
  Log("fit-dict", std::to_string(d.num_atoms) + " atoms, density " + Fmt(fit.codes.density(), "%.4f") + ", " +
                      std::to_string(fit.dead_atoms.size()) + " dead");
}

CoherenceRanking RankWorkspaceAtoms(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  std::vector<std::string> code_ids;
  const auto codes = CodesFromFile(ReadTensorFile(ws.codes()), &code_ids);
  const auto raw = ReadGradientSet(ws.gradients());
  if (code_ids != raw.doc_ids)
    throw Error(ErrorKind::kShape, "codes.gat and gradients.gat list different documents");
  auto ranking = RankAtoms(codes, raw, cfg.coherence);
  for (auto& r : ranking.reports) {
    const auto [purity, task] = TaskPurity(r);
    r.label = task ? toy::TaskName(*task) : "";
  }
  return ranking;
}

CoherenceRanking StageCoherence(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto ranking = RankWorkspaceAtoms(cfg);
  std::ostringstream csv;
  WriteAtomCsv(csv, ranking);
  WriteText(ws.report("atoms.csv"), csv.str());
  json j = AtomReportsJson(ranking);
  for (std::size_t i = 0; i < ranking.reports.size(); ++i)
    j["atoms"][i]["task_purity"] = TaskPurity(ranking.reports[i]).first;
  WriteJson(ws.report("atoms.json"), j);
  Log("coherence", std::to_string(ranking.above_half) + " atoms with coherence > 0.5, " +
                       std::to_string(ranking.above_tenth) + " > 0.1");
  return ranking;
}

std::vector<fs::path> StageUnproject(const PipelineConfig& cfg, const std::vector<std::int64_t>& atoms) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  EkfacBasis basis;
  const auto p = LoadBasis(cfg, ws, &basis);
  const auto dict = DictionaryFromFile(ReadTensorFile(ws.dictionary()));
  std::vector<fs::path> written;
  for (auto a : atoms) {
    if (a < 0 || a >= dict.num_atoms())
      throw Error(ErrorKind::kRange,
                  "atom " + std::to_string(a) + " outside [0, " + std::to_string(dict.num_atoms()) + ")");
    Vector z = dict.atoms.row(a).transpose();
    auto v = Unproject(z, basis, p);
    v.source_atom = a;
    if (cfg.unit_norm_steering) RescaleToUnitNorm(v);
    WriteTensorFile(ws.steering(a), SteeringVectorToFile(v));
    written.push_back(ws.steering(a));
  }
  Log("unproject", std::to_string(written.size()) + " steering vectors");
  return written;
}

std::vector<SteerRow> StageSteer(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto ranking = RankWorkspaceAtoms(cfg);
  const auto params = toy::ParamsFromFile(ReadTensorFile(ws.model()));

  // For each task, the atom whose top documents are most concentrated on it;
  // ties go to the more coherent atom (reports are already in that order).
  std::vector<std::pair<toy::Task, const AtomReport*>> picks;
  for (auto task : toy::kAllTasks) {
    const AtomReport* best = nullptr;
    double best_share = 0.0;
    for (const auto& r : ranking.reports) {
      if (!r.coherence) continue;
      int hits = 0;
      for (const auto& id : r.top_doc_ids) hits += DocTask(id) == task;
      const double share = static_cast<double>(hits) / static_cast<double>(r.top_doc_ids.size());
      if (share > best_share) {
        best_share = share;
        best = &r;
      }
    }
    if (best && best_share >= 0.5)
      picks.emplace_back(task, best);
    else
      Log("steer", "no atom is dominated by task " + toy::TaskName(task) + "; skipped");
  }

  std::vector<std::int64_t> atom_ids;
  for (const auto& [task, r] : picks) atom_ids.push_back(r->atom_id);
  StageUnproject(cfg, atom_ids);

  std::vector<SteerRow> rows;
  for (const auto& [task, r] : picks) {
    const auto v = SteeringVectorFromFile(ReadTensorFile(ws.steering(r->atom_id)));
    const auto suite = BuildEvalSuite(task, cfg.suite_seed() + static_cast<std::uint64_t>(task), cfg.suite_size);
    const auto detector = BehaviorDetector::ForTask(task);
    SteerRow row{r->atom_id, detector.name(), r->coherence, RunSweep(params, v, cfg.steer, suite, detector)};
    Log("steer", "atom " + std::to_string(row.atom_id) + " (" + row.behavior + "): base " +
                     FormatPercent(row.result.baseline) + ", up " + FormatPercent(row.result.best_up.rate) +
                     ", down " + FormatPercent(row.result.best_down.rate));
    rows.push_back(std::move(row));
  }

  std::ostringstream csv, plot;
  WriteSteerCsv(csv, rows);
  WriteSteerPlotData(plot, rows);
  WriteText(ws.report("steering.csv"), csv.str());
  WriteText(ws.report("steering.txt"), FormatSteerTable(rows));
  WriteText(ws.report("steering_plot.csv"), plot.str());
  json j = json::array();
  for (const auto& row : rows) j.push_back(SteerResultJson(row));
  WriteJson(ws.report("steering.json"), j);
  return rows;
}

json StageReport(const PipelineConfig& cfg) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  json summary;
  summary["config"] = cfg.ToJson();
  for (const char* name : {"train", "ekfac", "dict_fit", "atoms", "steering"}) {
    const auto path = ws.report(std::string(name) + ".json");
    if (fs::exists(path)) summary[name] = ReadJson(path);
  }
  if (summary.contains("atoms")) {
    // Keep the summary readable: the full per-atom lists stay in atoms.json.
    json top = json::array();
    for (const auto& a : summary["atoms"]["atoms"]) {
      if (top.size() == 10) break;
      top.push_back({{"atom_id", a["atom_id"]},
                     {"coherence", a["coherence"]},
                     {"active_docs", a["active_docs"]},
                     {"label", a["label"]},
                     {"task_purity", a["task_purity"]}});
    }
    summary["atoms"] = {{"summary", summary["atoms"]["summary"]}, {"top", top}};
  }
  json artifacts = json::object();
  std::vector<fs::path> files = {ws.model(),     ws.gradients(),  ws.kfac_stats(), ws.basis(),
                                 ws.projected(), ws.dictionary(), ws.codes()};
  if (fs::is_directory(ws.root() / "steering"))
    for (const auto& e : fs::directory_iterator(ws.root() / "steering")) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    if (!fs::exists(f)) continue;
    const auto bytes = ReadBytes(f);
    artifacts[fs::relative(f, ws.root()).generic_string()] = HexDigest(Fnv1a64(bytes.data(), bytes.size()));
  }
  summary["artifacts"] = artifacts;
  WriteJson(ws.report("summary.json"), summary);
  Log("report", ws.report("summary.json").string());
  return summary;
}

double MedianActiveDocs(const CodeMatrix& codes) {
  auto counts = codes.ColumnCounts();
  if (counts.empty()) return 0.0;
  std::sort(counts.begin(), counts.end());
  const auto n = counts.size();
  return n % 2 ? static_cast<double>(counts[n / 2])
               : 0.5 * static_cast<double>(counts[n / 2 - 1] + counts[n / 2]);
}

void WriteSweepCsv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "penalty,median_docs_per_atom,atoms_coherence_gt_0.5,atoms_coherence_gt_0.1\n";
  for (const auto& r : rows)
    out << Fmt(r.penalty, "%g") << ',' << Fmt(r.median_docs_per_atom, "%g") << ',' << r.above_half << ','
        << r.above_tenth << '\n';
}

std::vector<SweepRow> SweepPenalty(const PipelineConfig& cfg, const std::vector<double>& penalties) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  if (penalties.empty()) throw Error(ErrorKind::kConfig, "at least one penalty is required");
  const auto projected = ProjectedFromFile(ReadTensorFile(ws.projected()));
  const auto raw = ReadGradientSet(ws.gradients());
  fs::create_directories(ws.root() / "sweep");
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < penalties.size(); ++i) {
    DictConfig d = cfg.dict;
    d.penalty = penalties[i];
    d.seed = cfg.dict_seed();
    const auto fit = FitDictionary(projected.values, d);
    auto file = CodesToFile(fit.codes, projected.doc_ids);
    file.attrs()["penalty"] = d.penalty;
    WriteTensorFile(ws.root() / "sweep" / ("codes_penalty_" + std::to_string(i) + ".gat"), file);
    const auto ranking = RankAtoms(fit.codes, raw, cfg.coherence);
    rows.push_back({d.penalty, MedianActiveDocs(fit.codes), ranking.above_half, ranking.above_tenth});
    Log("sweep-penalty", "penalty " + Fmt(d.penalty, "%g") + ": median docs/atom " +
                             Fmt(rows.back().median_docs_per_atom, "%g"));
  }
  std::ostringstream csv;
  WriteSweepCsv(csv, rows);
  WriteText(ws.report("sweep_penalty.csv"), csv.str());
  return rows;
}

json ImportArtifact(const PipelineConfig& cfg, const fs::path& path, std::vector<std::string>* warnings) {
  const Workspace ws(cfg.workspace);
  ws.Prepare();
  const auto file = ReadTensorFile(path);
  std::vector<std::string> notes;
  ModuleRegistry registry;
  fs::path target;
  if (file.kind() == PayloadKind::kGradients) {
    const auto gs = GradientSetFromFile(file);
    ValidateGradientSet(gs);
    if (!file.attrs().contains("reduction"))
      notes.push_back("no reduction declared; assuming 'sum'");
    else if (file.attrs()["reduction"] != "sum")
      throw Error(ErrorKind::kFormat, "gradient reduction '" + file.attrs()["reduction"].dump() +
                                          "' is not supported; expected \"sum\"");
    registry = gs.registry;
    target = ws.gradients();
  } else if (file.kind() == PayloadKind::kKfacStats) {
    registry = KfacStatsFromFile(file).registry;
    target = ws.kfac_stats();
  } else {
    throw Error(ErrorKind::kKind, "cannot import payload kind '" + PayloadKindName(file.kind()) +
                                      "'; expected 'gradients' or 'kfac_stats'");
  }
  if (fs::exists(ws.model())) {
    const auto params = toy::ParamsFromFile(ReadTensorFile(ws.model()));
    if (!(params.registry() == registry))
      notes.push_back("registry differs from the workspace model; steering stages will not apply");
  }
  std::error_code ec;
  if (!fs::equivalent(path, target, ec)) {
    fs::copy_file(path, target, fs::copy_options::overwrite_existing, ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot copy '" + path.string() + "' to '" + target.string() + "': " +
                                            ec.message());
  }
  for (const auto& n : notes) Log("import", "warning: " + n);
  Log("import", PayloadKindName(file.kind()) + " -> " + target.string());
  if (warnings) *warnings = notes;
  return registry.ToJson();
}

json RunAll(const PipelineConfig& cfg) {
  Workspace(cfg.workspace).Prepare();
  auto stage = [](const std::string& name, const auto& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      throw StageFailure(name, e);
    }
  };
  stage("corpus", [&] { StageGenCorpus(cfg); });
  stage("train", [&] { StageTrain(cfg); });
  stage("gradients", [&] { StageGrads(cfg); });
  stage("ekfac", [&] { StageEkfac(cfg); });
  stage("project", [&] { StageProject(cfg); });
  stage("fit", [&] { StageFitDict(cfg); });
  stage("coherence", [&] { StageCoherence(cfg); });
  stage("steer", [&] { StageSteer(cfg); });
  json summary;
  stage("report", [&] { summary = StageReport(cfg); });
  return summary;
}

}  // namespace gatoms
