#include "gatoms/toy_model.hpp"
#include "test_util.hpp"

#include <doctest.h>
#include <omp.h>

#include <cmath>

using namespace gatoms;
using namespace gatoms::toy;

namespace {

ToyModelParams SmallTrained() {
  static const ToyModelParams params = [] {
    const auto corpus = GenerateCorpus(11, 40);
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.steps = 300;
    return Train(corpus, ModelShape{}, cfg).params;
  }();
  return params;
}

double FiniteDifference(const ToyModelParams& p, const SyntheticDoc& doc, Eigen::Index i, double h) {
  Vector plus = p.theta(), minus = p.theta();
  plus[i] += h;
  minus[i] -= h;
  return (DocumentLoss(ToyModelParams(p.shape(), plus), doc) - DocumentLoss(ToyModelParams(p.shape(), minus), doc)) /
         (2 * h);
}

}  // namespace

TEST_CASE("vocabulary parse and render") {
  const auto t = Vocab::Parse("C x0 x3 -> R E");
  CHECK(t == Tokens{Vocab::kTaskC, Vocab::Data(0), Vocab::Data(3), Vocab::kArrow, Vocab::kRefusal, Vocab::kEnd});
  CHECK(Vocab::Render(t) == "C x0 x3 -> R E");
  CHECK(Vocab::Id("→") == Vocab::kArrow);
  CHECK_THROWS_AS(Vocab::Parse("A x9"), Error);
  CHECK(Vocab::kSize == 16);
}

TEST_CASE("task rules") {
  const Tokens p{Vocab::Data(1), Vocab::Data(2), Vocab::Data(3)};
  CHECK(ExpectedResponse(Task::kEcho, p) == Tokens{Vocab::Data(1), Vocab::Data(2), Vocab::Data(3), Vocab::kEnd});
  CHECK(ExpectedResponse(Task::kReverse, p) == Tokens{Vocab::Data(3), Vocab::Data(2), Vocab::Data(1), Vocab::kEnd});
  CHECK(ExpectedResponse(Task::kRefuse, p) == Tokens{Vocab::kRefusal, Vocab::kEnd});
  CHECK(ExpectedResponse(Task::kList, p) ==
        Tokens{Vocab::kListItem, Vocab::kListItem, Vocab::kListItem, Vocab::kEnd});
  const auto doc = MakeDoc("x", Task::kList, p);
  CHECK(doc.prompt.front() == Vocab::kTaskD);
  CHECK(doc.prompt.back() == Vocab::kArrow);
  CHECK(PromptPayload(doc.prompt) == p);
}

TEST_CASE("corpus generation") {
  const auto a = GenerateCorpus(3, 25);
  const auto b = GenerateCorpus(3, 25);
  REQUIRE(a.size() == 100);
  int counts[4] = {};
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].doc_id == b[i].doc_id);
    ++counts[static_cast<int>(a[i].task)];
    CHECK(a[i].response == ExpectedResponse(a[i].task, PromptPayload(a[i].prompt)));
    const auto len = PromptPayload(a[i].prompt).size();
    if (a[i].task == Task::kList) CHECK((len >= 2 && len <= 5));
    if (a[i].task == Task::kRefuse) CHECK((len >= 1 && len <= 3));
    if (a[i].task == Task::kEcho || a[i].task == Task::kReverse) CHECK(len == 2);
  }
  for (int c : counts) CHECK(c == 25);
  CHECK(a[0].doc_id == "echo-0000");
  CHECK(a[7].doc_id == "list-0001");

  testutil::TempDir dir("corpus");
  WriteCorpus(dir / "c.tsv", a);
  const auto back = ReadCorpus(dir / "c.tsv");
  REQUIRE(back.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(back[i].doc_id == a[i].doc_id);
    CHECK(back[i].task == a[i].task);
    CHECK(back[i].prompt == a[i].prompt);
    CHECK(back[i].response == a[i].response);
  }
}

TEST_CASE("registry shape") {
  const auto reg = ModelShape{}.Registry();
  CHECK(reg.d() == 16 * 96 + 16 * 16);
  CHECK(reg.module(0).name == "mlp1");
  CHECK(reg.module(1).name == "mlp2");
  CHECK_NOTHROW(reg.Validate());
}

TEST_CASE("untrained loss is near uniform") {
  const auto params = ToyModelParams::Random(ModelShape{}, 1);
  const double loss = CorpusLoss(params, GenerateCorpus(2, 50));
  CHECK(std::abs(loss - std::log(16.0)) < 0.5);
}

TEST_CASE("training reduces loss and is deterministic") {
  const auto corpus = GenerateCorpus(4, 50);
  TrainConfig cfg;
  cfg.seed = 9;
  cfg.steps = 400;
  const auto a = Train(corpus, ModelShape{}, cfg);
  const auto b = Train(corpus, ModelShape{}, cfg);
  CHECK(a.params.theta() == b.params.theta());
  CHECK(a.loss_curve.size() == 400);
  CHECK(a.final_loss < 0.5 * a.initial_loss);

  cfg.learning_rate = 1e308;
  try {
    Train(corpus, ModelShape{}, cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDivergence);
  }
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(Train(corpus, ModelShape{}, cfg), Error);
}

TEST_CASE("per-document gradient matches central differences") {
  const auto params = SmallTrained();
  const auto corpus = GenerateCorpus(21, 3);
  std::mt19937_64 rng(1);
  for (const auto& doc : corpus) {
    const Vector g = PerDocumentGradient(params, doc);
    std::vector<Eigen::Index> coords;
    for (Eigen::Index i = 0; i < g.size(); ++i)
      if (g[i] != 0.0) coords.push_back(i);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min<std::size_t>(coords.size(), 10));
    for (auto i : coords) {
      const double fd = FiniteDifference(params, doc, i, 1e-5);
      CHECK(std::abs(fd - g[i]) <= 1e-6 * std::max(1.0, std::abs(g[i])));
    }
  }
}

TEST_CASE("gradient of an empty response is zero") {
  const auto params = SmallTrained();
  SyntheticDoc doc{"e", Task::kEcho, Vocab::Parse("A x0 x1 ->"), {}};
  CHECK(PerDocumentGradient(params, doc).isZero(0));
  CHECK(DocumentLoss(params, doc) == 0.0);
}

TEST_CASE("gradient is the sum of token outer products") {
  const auto params = SmallTrained();
  const auto corpus = GenerateCorpus(5, 2);
  const auto& reg = params.registry();
  for (const auto& doc : corpus) {
    Vector sum = Vector::Zero(params.d());
    VisitTokens(params, std::span(&doc, 1), [&](const TokenTrace& t) {
      for (std::size_t m = 0; m < 2; ++m) {
        const auto& mod = reg.module(m);
        Eigen::Map<RowMatrix> block(sum.data() + mod.offset, mod.out_dim, mod.in_dim);
        block += ModuleDelta(t, m) * ModuleInput(t, m).transpose();
      }
    });
    CHECK((sum - PerDocumentGradient(params, doc)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("parallel gradients and statistics equal the serial reference") {
  const auto params = SmallTrained();
  const auto corpus = GenerateCorpus(6, 30);
  omp_set_num_threads(4);
  const auto serial = PerDocumentGradients(params, corpus, Exec::kSerial);
  const auto parallel = PerDocumentGradients(params, corpus, Exec::kParallel);
  CHECK(serial.values == parallel.values);
  CHECK(serial.doc_ids == parallel.doc_ids);
  const auto s1 = CollectKfacStats(params, corpus, Exec::kSerial);
  const auto s2 = CollectKfacStats(params, corpus, Exec::kParallel);
  for (std::size_t m = 0; m < 2; ++m) {
    CHECK(s1.modules[m].input_moment == s2.modules[m].input_moment);
    CHECK(s1.modules[m].output_moment == s2.modules[m].output_moment);
  }
}

TEST_CASE("kfac statistics against direct counting") {
  const auto params = SmallTrained();
  const auto corpus = GenerateCorpus(8, 10);
  const auto stats = CollectKfacStats(params, corpus);
  std::int64_t tokens = 0;
  double active_slots = 0.0;
  for (const auto& doc : corpus) {
    for (std::size_t r = 0; r < doc.response.size(); ++r) {
      const auto context = static_cast<std::int64_t>(doc.prompt.size() + r);
      active_slots += static_cast<double>(std::min<std::int64_t>(context, 6));
      ++tokens;
    }
  }
  CHECK(stats.token_count == tokens);
  // A for mlp1 is a mean of one-hot outer products: its trace counts
  // occupied window slots.
  CHECK(stats.modules[0].input_moment.trace() == doctest::Approx(active_slots / tokens).epsilon(1e-12));
  for (const auto& m : stats.modules) {
    CHECK((m.input_moment - m.input_moment.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((m.output_moment - m.output_moment.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    Eigen::SelfAdjointEigenSolver<Matrix> es(Matrix(m.output_moment));
    CHECK(es.eigenvalues().minCoeff() > -1e-12);
  }
  // Rows of delta2 sum to zero (softmax minus one-hot), so S has a null
  // vector of all ones.
  const Vector ones = Vector::Ones(16);
  CHECK((stats.modules[1].output_moment * ones).norm() < 1e-12);
}

TEST_CASE("greedy generation") {
  const auto corpus = GenerateCorpus(12, 250);
  TrainConfig cfg;
  cfg.seed = 13;
  const auto params = Train(corpus, ModelShape{}, cfg).params;
  int correct = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto out = ForwardGenerate(params, corpus[i].prompt, 8);
    correct += out == corpus[i].response;
    CHECK(out.size() <= 8);
  }
  CHECK(correct >= 150);
  CHECK(ForwardGenerate(params, corpus[0].prompt, 0).empty());
}

TEST_CASE("steering application") {
  const auto params = SmallTrained();
  SteeringVector v;
  v.values = Vector::Ones(params.d());
  v.registry_fingerprint = params.registry().Fingerprint();
  CHECK(ApplySteering(params, v, 2.0, -1).theta() == params.theta() - 2.0 * v.values);
  CHECK(ApplySteering(params, v, 0.0, 1).theta() == params.theta());
  v.registry_fingerprint = "ffff";
  CHECK_THROWS_AS(ApplySteering(params, v, 1.0, 1), Error);
  v.registry_fingerprint.clear();
  v.values.resize(3);
  CHECK_THROWS_AS(ApplySteering(params, v, 1.0, 1), Error);
}

TEST_CASE("model file round trip") {
  const auto params = SmallTrained();
  const auto back = ParamsFromFile(ParamsToFile(params));
  CHECK(back.theta() == params.theta());
  CHECK(back.registry() == params.registry());
}
