#include "gatoms/pipeline.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace gatoms;
namespace fs = std::filesystem;

namespace {

// One end-to-end run shared by the tests that only read its outputs.
struct Run {
  testutil::TempDir dir{"pipeline"};
  PipelineConfig cfg;
  nlohmann::json summary;

  Run() {
    cfg.workspace = dir.path();
    summary = RunAll(cfg);
  }
};

const Run& SharedRun() {
  static const Run run;
  return run;
}

ErrorKind KindOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("config defaults, files and overrides") {
  const auto d = LoadConfig(std::nullopt, {});
  CHECK(d.seed == 7);
  CHECK(d.projection.k == 16);
  CHECK(d.dict.num_atoms == 32);
  CHECK(d.coherence.top_n == 20);
  CHECK(PipelineConfig::FromJson(d.ToJson()).ToJson() == d.ToJson());

  const auto o = LoadConfig(std::nullopt, {"dict.K=8", "seed=3", "coherence.ranking=positive", "paths.workspace=ws"});
  CHECK(o.dict.num_atoms == 8);
  CHECK(o.seed == 3);
  CHECK(o.dict_seed() == 5);
  CHECK(o.coherence.ranking == ActivationRanking::kPositive);
  CHECK(o.workspace == fs::path("ws"));

  testutil::TempDir dir("cfg");
  std::ofstream(dir / "c.json") << R"({"dict": {"penalty": 0.2}, "steer": {"scales": [1, 2]}})";
  const auto f = LoadConfig(dir / "c.json", {"dict.penalty=0.3"});
  CHECK(f.dict.penalty == 0.3);
  CHECK(f.steer.scales == std::vector<double>{1, 2});

  CHECK(KindOf([] { LoadConfig(std::nullopt, {"dict.nonsense=1"}); }) == ErrorKind::kConfig);
  CHECK(KindOf([] { LoadConfig(std::nullopt, {"coherence.n=1"}); }) == ErrorKind::kConfig);
  CHECK(KindOf([] { LoadConfig(std::nullopt, {"no_equals_sign"}); }) == ErrorKind::kConfig);
  CHECK(KindOf([] { LoadConfig("/nonexistent/c.json", {}); }) == ErrorKind::kIo);

  const auto big = PipelineConfig::ReferenceScale();
  CHECK(big.projection.k == 50);
  CHECK(big.dict.num_atoms == 500);
  CHECK(big.dict.penalty == 0.1);
}

TEST_CASE("doc task and purity") {
  CHECK(DocTask("refuse-0012") == toy::Task::kRefuse);
  CHECK(DocTask("list-0001") == toy::Task::kList);
  CHECK(!DocTask("external-doc"));
  AtomReport r;
  r.top_doc_ids = {"list-0001", "list-0002", "echo-0003", "list-0004"};
  const auto [purity, task] = TaskPurity(r);
  CHECK(purity == 0.75);
  CHECK(task == toy::Task::kList);
}

TEST_CASE("missing workspace is an io error naming the path") {
  PipelineConfig cfg;
  cfg.workspace = "/nonexistent/gatoms/ws";
  try {
    RunAll(cfg);
    FAIL("expected an io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIo);
    CHECK(std::string(e.what()).find("/nonexistent/gatoms/ws") != std::string::npos);
  }
}

TEST_CASE("a stage run out of order reports the stage") {
  testutil::TempDir dir("order");
  PipelineConfig cfg;
  cfg.workspace = dir.path();
  CHECK(KindOf([&] { StageProject(cfg); }) == ErrorKind::kIo);
}

TEST_CASE("end-to-end run produces the expected artifacts") {
  const auto& run = SharedRun();
  const Workspace ws(run.cfg.workspace);
  for (const auto& p : {ws.corpus(), ws.model(), ws.gradients(), ws.kfac_stats(), ws.basis(), ws.projected(),
                        ws.dictionary(), ws.codes(), ws.report("atoms.csv"), ws.report("steering.csv"),
                        ws.report("steering.txt"), ws.report("summary.json"), ws.report("loss_curve.csv")})
    CHECK_MESSAGE(fs::exists(p), p.string());

  const auto& s = run.summary;
  CHECK(s["train"]["final_loss"].get<double>() < s["train"]["initial_loss"].get<double>());
  CHECK(s["atoms"]["top"].size() == 10);
  CHECK(s["steering"].size() >= 2);
  CHECK(s["artifacts"].contains("codes.gat"));

  const auto codes = CodesFromFile(ReadTensorFile(ws.codes()));
  CHECK(codes.rows() == 4 * run.cfg.per_task_count);
  CHECK(codes.cols() == run.cfg.dict.num_atoms);
  const auto ranking = RankWorkspaceAtoms(run.cfg);
  CHECK(ranking.reports.size() == static_cast<std::size_t>(run.cfg.dict.num_atoms));
  int pure = 0;
  for (std::size_t i = 0; i < 4; ++i) pure += TaskPurity(ranking.reports[i]).first >= 0.8;
  CHECK(pure == 4);
}

TEST_CASE("penalty sweep is re-derivable from the persisted codes") {
  const auto& run = SharedRun();
  const auto rows = SweepPenalty(run.cfg, {0.01, 0.1, 1.0});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].median_docs_per_atom >= rows[1].median_docs_per_atom);
  CHECK(rows[1].median_docs_per_atom >= rows[2].median_docs_per_atom);
  const fs::path sweep = fs::path(run.cfg.workspace) / "sweep";
  for (std::size_t i = 0; i < 3; ++i) {
    const auto file = ReadTensorFile(sweep / ("codes_penalty_" + std::to_string(i) + ".gat"));
    CHECK(file.attrs()["penalty"].get<double>() == rows[i].penalty);
    CHECK(MedianActiveDocs(CodesFromFile(file)) == rows[i].median_docs_per_atom);
  }
  CHECK(CodesFromFile(ReadTensorFile(sweep / "codes_penalty_2.gat")).nnz() == 0);

  std::ifstream csv(Workspace(run.cfg.workspace).report("sweep_penalty.csv"));
  std::string header;
  std::getline(csv, header);
  CHECK(header == "penalty,median_docs_per_atom,atoms_coherence_gt_0.5,atoms_coherence_gt_0.1");
}

TEST_CASE("median active docs") {
  RowMatrix dense = RowMatrix::Zero(4, 3);
  dense(0, 0) = dense(1, 0) = dense(2, 0) = 1;
  dense(0, 1) = 1;
  CHECK(MedianActiveDocs(CodeMatrix::FromDense(dense)) == 1.0);
  CHECK(MedianActiveDocs(CodeMatrix::FromDense(dense.leftCols(2))) == 2.0);
}

TEST_CASE("importing exporter files") {
  const auto& run = SharedRun();
  testutil::TempDir dir("import");
  PipelineConfig cfg = run.cfg;
  cfg.workspace = dir / "ws";
  fs::create_directories(cfg.workspace);
  fs::copy_file(Workspace(run.cfg.workspace).model(), Workspace(cfg.workspace).model());

  SUBCASE("gradients from the same model") {
    std::vector<std::string> warnings;
    const auto reg = ImportArtifact(cfg, Workspace(run.cfg.workspace).gradients(), &warnings);
    CHECK(warnings.empty());
    CHECK(ModuleRegistry::FromJson(reg).d() == 1792);
    CHECK(testutil::ReadBytes(Workspace(cfg.workspace).gradients()) ==
          testutil::ReadBytes(Workspace(run.cfg.workspace).gradients()));
  }
  SUBCASE("kfac statistics") {
    CHECK_NOTHROW(ImportArtifact(cfg, Workspace(run.cfg.workspace).kfac_stats()));
    CHECK(fs::exists(Workspace(cfg.workspace).kfac_stats()));
  }
  SUBCASE("foreign registry and missing reduction warn") {
    GradientSet gs;
    gs.registry = ModuleRegistry::Contiguous({{"attn", 2, 3}});
    gs.values = RowMatrix::Ones(2, 6);
    gs.doc_ids = {"a", "b"};
    auto file = GradientSetToFile(gs);
    file.attrs().erase("reduction");
    WriteTensorFile(dir / "g.gat", file);
    std::vector<std::string> warnings;
    ImportArtifact(cfg, dir / "g.gat", &warnings);
    CHECK(warnings.size() == 2);
  }
  SUBCASE("mean-reduced gradients are rejected") {
    auto file = GradientSetToFile(ReadGradientSet(Workspace(run.cfg.workspace).gradients()));
    file.attrs()["reduction"] = "mean";
    WriteTensorFile(dir / "g.gat", file);
    CHECK(KindOf([&] { ImportArtifact(cfg, dir / "g.gat"); }) == ErrorKind::kFormat);
  }
  SUBCASE("wrong payload kind") {
    CHECK(KindOf([&] { ImportArtifact(cfg, Workspace(run.cfg.workspace).codes()); }) == ErrorKind::kKind);
  }
  SUBCASE("width disagreeing with the registry") {
    auto file = GradientSetToFile(ReadGradientSet(Workspace(run.cfg.workspace).gradients()));
    auto reg = file.attrs()["registry"];
    reg["d"] = 1793;
    reg["modules"][1]["in_dim"] = 17;
    file.attrs()["registry"] = reg;
    WriteTensorFile(dir / "g.gat", file);
    CHECK(KindOf([&] { ImportArtifact(cfg, dir / "g.gat"); }) == ErrorKind::kLayout);
  }
  SUBCASE("non-finite gradients") {
    auto gs = ReadGradientSet(Workspace(run.cfg.workspace).gradients());
    gs.values(3, 5) = std::numeric_limits<double>::infinity();
    WriteTensorFile(dir / "g.gat", GradientSetToFile(gs));
    CHECK(KindOf([&] { ImportArtifact(cfg, dir / "g.gat"); }) == ErrorKind::kFiniteness);
  }
}
