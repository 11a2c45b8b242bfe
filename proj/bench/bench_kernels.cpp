// Serial reference against the OpenMP path for each parallel kernel. The
// second benchmark argument selects the path (0 serial, 1 parallel).

#include "gatoms/coherence.hpp"
#include "gatoms/dictionary.hpp"
#include "gatoms/ekfac.hpp"
#include "gatoms/steering.hpp"
#include "gatoms/toy_model.hpp"

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>

using namespace gatoms;

namespace {

Exec PathOf(const benchmark::State& state) { return state.range(0) ? Exec::kParallel : Exec::kSerial; }

const std::vector<toy::SyntheticDoc>& Corpus() {
  static const auto corpus = toy::GenerateCorpus(1, 250);
  return corpus;
}

const toy::ToyModelParams& Model() {
  static const auto params = [] {
    toy::TrainConfig cfg;
    cfg.seed = 2;
    return toy::Train(Corpus(), toy::ModelShape{}, cfg).params;
  }();
  return params;
}

const GradientSet& Gradients() {
  static const auto gs = toy::PerDocumentGradients(Model(), Corpus());
  return gs;
}

const EkfacBasis& Basis() {
  static const auto basis = [] {
    auto b = Eigendecompose(EstimateFactors(toy::CollectKfacStats(Model(), Corpus())));
    SelectBasisTopK(b, 16);
    return b;
  }();
  return basis;
}

const ProjectedGradients& Projected() {
  static const auto p = Project(Gradients(), Basis(), ProjectionConfig{.k = 16}, true);
  return p;
}

const Dictionary& Dict() {
  static const auto d = [] {
    DictConfig cfg;
    cfg.epochs = 2;
    return FitDictionary(Projected().values, cfg).dict;
  }();
  return d;
}

void BM_PerDocumentGradients(benchmark::State& state) {
  const auto exec = PathOf(state);
  const auto& params = Model();
  for (auto _ : state) benchmark::DoNotOptimize(toy::PerDocumentGradients(params, Corpus(), exec));
}

void BM_Project(benchmark::State& state) {
  const auto exec = PathOf(state);
  const ProjectionConfig cfg{.k = 16};
  const auto& gs = Gradients();
  const auto& basis = Basis();
  for (auto _ : state) benchmark::DoNotOptimize(Project(gs, basis, cfg, true, exec));
}

void BM_SparseEncode(benchmark::State& state) {
  const auto exec = PathOf(state);
  const auto& dict = Dict();
  for (auto _ : state) benchmark::DoNotOptimize(SparseEncode(Projected().values, dict, 0.1, 50, 1e-6, exec));
}

void BM_RankAtoms(benchmark::State& state) {
  const auto exec = PathOf(state);
  const auto codes = SparseEncode(Projected().values, Dict(), 0.1, 50, 1e-6);
  for (auto _ : state) benchmark::DoNotOptimize(RankAtoms(codes, Gradients(), CoherenceConfig{}, exec));
}

void BM_RunSweep(benchmark::State& state) {
  const auto exec = PathOf(state);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  SteeringVector v;
  v.values.resize(Model().d());
  for (auto& x : v.values) x = n(rng);
  v.values.normalize();
  const auto suite = BuildEvalSuite(toy::Task::kList, 4, 100);
  const SteerConfig cfg;
  for (auto _ : state)
    benchmark::DoNotOptimize(RunSweep(Model(), v, cfg, suite, BehaviorDetector::List(), exec));
}

}  // namespace

BENCHMARK(BM_PerDocumentGradients)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Project)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SparseEncode)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RankAtoms)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RunSweep)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
