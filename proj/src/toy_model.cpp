#include "gatoms/toy_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

namespace gatoms::toy {

namespace {

const std::array<std::string, Vocab::kSize> kSymbols = {
    "A", "B", "C", "D", "x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "->", "R", "L", "E",
};

constexpr int kKfacChunk = 16;

// Forward pass for predicting the token after `context`.
struct Step {
  std::vector<std::int64_t> columns;  // active one-hot columns of W1
  Vector hidden;
  Vector logits;
  Vector probs;
  double log_partition = 0.0;
};

Step Forward(const ToyModelParams& params, std::span<const TokenId> context) {
  const auto& shape = params.shape();
  const auto w1 = params.w1();
  const auto w2 = params.w2();
  Step step;
  Vector pre = Vector::Zero(shape.hidden);
  const auto n = static_cast<std::int64_t>(context.size());
  for (int s = 0; s < shape.window; ++s) {
    const std::int64_t pos = n - shape.window + s;
    if (pos < 0) continue;
    const std::int64_t col = static_cast<std::int64_t>(s) * shape.vocab + context[pos];
    step.columns.push_back(col);
    pre += w1.col(col);
  }
  step.hidden = pre.array().tanh();
  step.logits = w2 * step.hidden;
  const double top = step.logits.maxCoeff();
  step.probs = (step.logits.array() - top).exp();
  const double z = step.probs.sum();
  step.probs /= z;
  step.log_partition = top + std::log(z);
  return step;
}

void CheckTokens(const SyntheticDoc& doc) {
  for (const auto* seq : {&doc.prompt, &doc.response})
    for (TokenId t : *seq)
      if (t < 0 || t >= Vocab::kSize)
        throw Error(ErrorKind::kVocabulary, "doc '" + doc.doc_id + "' has out-of-vocabulary token " +
                                                std::to_string(t));
}

// Runs every response position of doc, calling fn(step, target, loss).
template <typename Fn>
void ForEachPosition(const ToyModelParams& params, const SyntheticDoc& doc, Fn&& fn) {
  CheckTokens(doc);
  Tokens context = doc.prompt;
  for (TokenId target : doc.response) {
    Step step = Forward(params, context);
    const double loss = step.log_partition - step.logits[target];
    fn(step, target, loss);
    context.push_back(target);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary and corpus

const std::string& Vocab::Symbol(TokenId id) {
  if (id < 0 || id >= kSize) throw Error(ErrorKind::kVocabulary, "token id " + std::to_string(id));
  return kSymbols[id];
}

TokenId Vocab::Id(std::string_view symbol) {
  if (symbol == "→") return kArrow;
  for (int i = 0; i < kSize; ++i)
    if (kSymbols[i] == symbol) return i;
  throw Error(ErrorKind::kVocabulary, "unknown symbol '" + std::string(symbol) + "'");
}

std::string Vocab::Render(std::span<const TokenId> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += Symbol(tokens[i]);
  }
  return out;
}

Tokens Vocab::Parse(std::string_view text) {
  Tokens out;
  std::istringstream in{std::string(text)};
  std::string sym;
  while (in >> sym) out.push_back(Id(sym));
  return out;
}

std::string TaskName(Task task) {
  switch (task) {
    case Task::kEcho: return "echo";
    case Task::kReverse: return "reverse";
    case Task::kRefuse: return "refuse";
    case Task::kList: return "list";
  }
  return "unknown";
}

Task ParseTask(std::string_view name) {
  for (Task t : kAllTasks)
    if (TaskName(t) == name) return t;
  throw Error(ErrorKind::kParse, "unknown task '" + std::string(name) + "'");
}

TokenId TaskMarker(Task task) { return Vocab::kTaskA + static_cast<int>(task); }

Tokens ExpectedResponse(Task task, const Tokens& payload) {
  Tokens out;
  switch (task) {
    case Task::kEcho: out = payload; break;
    case Task::kReverse: out.assign(payload.rbegin(), payload.rend()); break;
    case Task::kRefuse: out = {Vocab::kRefusal}; break;
    case Task::kList: out.assign(payload.size(), Vocab::kListItem); break;
  }
  out.push_back(Vocab::kEnd);
  return out;
}

SyntheticDoc MakeDoc(std::string doc_id, Task task, const Tokens& payload) {
  SyntheticDoc doc{std::move(doc_id), task, {TaskMarker(task)}, ExpectedResponse(task, payload)};
  doc.prompt.insert(doc.prompt.end(), payload.begin(), payload.end());
  doc.prompt.push_back(Vocab::kArrow);
  return doc;
}

Tokens PromptPayload(const Tokens& prompt) {
  Tokens out;
  for (TokenId t : prompt)
    if (Vocab::IsData(t)) out.push_back(t);
  return out;
}

Tokens SamplePayload(Task task, std::mt19937_64& rng) {
  int lo = 2, hi = 2;
  if (task == Task::kRefuse) lo = 1, hi = 3;
  if (task == Task::kList) lo = 2, hi = 5;
  const int len = std::uniform_int_distribution<int>(lo, hi)(rng);
  std::uniform_int_distribution<int> sym(0, Vocab::kDataSymbols - 1);
  Tokens payload;
  for (int i = 0; i < len; ++i) payload.push_back(Vocab::Data(sym(rng)));
  return payload;
}

std::vector<SyntheticDoc> GenerateCorpus(std::uint64_t seed, int per_task_count) {
  if (per_task_count < 1) throw Error(ErrorKind::kConfig, "per_task_count must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<SyntheticDoc> corpus;
  corpus.reserve(4 * static_cast<std::size_t>(per_task_count));
  for (int i = 0; i < per_task_count; ++i) {
    for (Task task : kAllTasks) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%04d", TaskName(task).c_str(), i);
      corpus.push_back(MakeDoc(id, task, SamplePayload(task, rng)));
    }
  }
  return corpus;
}

void WriteCorpus(const std::filesystem::path& path, const std::vector<SyntheticDoc>& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  for (const auto& doc : corpus)
    out << doc.doc_id << '\t' << TaskName(doc.task) << '\t' << Vocab::Render(doc.prompt) << '\t'
        << Vocab::Render(doc.response) << '\n';
}

std::vector<SyntheticDoc> ReadCorpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::vector<SyntheticDoc> corpus;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, '\t')) fields.push_back(field);
    if (fields.size() == 3) fields.emplace_back();  // empty response
    if (fields.size() != 4)
      throw Error(ErrorKind::kParse, path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
    corpus.push_back({fields[0], ParseTask(fields[1]), Vocab::Parse(fields[2]), Vocab::Parse(fields[3])});
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Parameters

ModuleRegistry ModelShape::Registry() const {
  return ModuleRegistry::Contiguous({{"mlp1", hidden, input_dim()}, {"mlp2", vocab, hidden}});
}

ToyModelParams::ToyModelParams(ModelShape shape, Vector theta)
    : shape_(shape), registry_(shape.Registry()), theta_(std::move(theta)) {
  if (theta_.size() != registry_.d())
    throw Error(ErrorKind::kRegistry, "parameter vector has length " + std::to_string(theta_.size()) +
                                          " but the model needs " + std::to_string(registry_.d()));
}

ToyModelParams ToyModelParams::Random(const ModelShape& shape, std::uint64_t seed) {
  const auto registry = shape.Registry();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> first(0.0, 1.0 / std::sqrt(static_cast<double>(shape.window)));
  std::normal_distribution<double> second(0.0, 0.1);
  Vector theta(registry.d());
  const auto split = registry.module(1).offset;
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = i < split ? first(rng) : second(rng);
  return ToyModelParams(shape, std::move(theta));
}

Eigen::Map<const RowMatrix> ToyModelParams::w1() const {
  const auto& m = registry_.module(0);
  return Eigen::Map<const RowMatrix>(theta_.data() + m.offset, m.out_dim, m.in_dim);
}

Eigen::Map<const RowMatrix> ToyModelParams::w2() const {
  const auto& m = registry_.module(1);
  return Eigen::Map<const RowMatrix>(theta_.data() + m.offset, m.out_dim, m.in_dim);
}

TensorFile ParamsToFile(const ToyModelParams& params) {
  TensorFile file(PayloadKind::kModel);
  file.AddVector("theta", params.theta());
  file.attrs()["registry"] = params.registry().ToJson();
  file.attrs()["window"] = params.shape().window;
  file.attrs()["hidden"] = params.shape().hidden;
  file.attrs()["vocab"] = params.shape().vocab;
  return file;
}

ToyModelParams ParamsFromFile(const TensorFile& file) {
  file.ExpectKind(PayloadKind::kModel);
  ModelShape shape;
  try {
    shape.window = file.attrs().at("window").get<int>();
    shape.hidden = file.attrs().at("hidden").get<int>();
    shape.vocab = file.attrs().at("vocab").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("model metadata: ") + e.what());
  }
  return ToyModelParams(shape, file.VectorArray("theta"));
}

// ---------------------------------------------------------------------------
// Loss, gradients, statistics

double DocumentLoss(const ToyModelParams& params, const SyntheticDoc& doc, Vector* grad) {
  const auto& reg = params.registry();
  const auto h = params.shape().hidden;
  const auto in_dim = params.shape().input_dim();
  if (grad) grad->setZero(params.d());
  double total = 0.0;
  const auto w2 = params.w2();
  ForEachPosition(params, doc, [&](const Step& step, TokenId target, double loss) {
    total += loss;
    if (!grad) return;
    Vector delta2 = step.probs;
    delta2[target] -= 1.0;
    Eigen::Map<RowMatrix> g2(grad->data() + reg.module(1).offset, params.shape().vocab, h);
    g2.noalias() += delta2 * step.hidden.transpose();
    const Vector delta1 = (w2.transpose() * delta2).array() * (1.0 - step.hidden.array().square());
    Eigen::Map<RowMatrix> g1(grad->data() + reg.module(0).offset, h, in_dim);
    for (auto col : step.columns) g1.col(col) += delta1;
  });
  return total;
}

Vector PerDocumentGradient(const ToyModelParams& params, const SyntheticDoc& doc) {
  Vector g;
  DocumentLoss(params, doc, &g);
  return g;
}

GradientSet PerDocumentGradients(const ToyModelParams& params, const std::vector<SyntheticDoc>& corpus,
                                 Exec exec) {
  GradientSet gs;
  gs.registry = params.registry();
  gs.values.resize(static_cast<Eigen::Index>(corpus.size()), params.d());
  gs.doc_ids.reserve(corpus.size());
  for (const auto& doc : corpus) gs.doc_ids.push_back(doc.doc_id);
  const auto n = static_cast<std::int64_t>(corpus.size());
#pragma omp parallel for schedule(static) if (exec == Exec::kParallel)
  for (std::int64_t i = 0; i < n; ++i) gs.values.row(i) = PerDocumentGradient(params, corpus[i]).transpose();
  return gs;
}

double CorpusLoss(const ToyModelParams& params, const std::vector<SyntheticDoc>& corpus) {
  double total = 0.0;
  std::int64_t tokens = 0;
  for (const auto& doc : corpus) {
    total += DocumentLoss(params, doc);
    tokens += static_cast<std::int64_t>(doc.response.size());
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

const Vector& ModuleInput(const TokenTrace& trace, std::size_t m) { return m == 0 ? trace.input : trace.hidden; }
const Vector& ModuleDelta(const TokenTrace& trace, std::size_t m) { return m == 0 ? trace.delta1 : trace.delta2; }

void VisitTokens(const ToyModelParams& params, std::span<const SyntheticDoc> docs, const TokenFn& fn) {
  const auto w2 = params.w2();
  TokenTrace trace;
  for (const auto& doc : docs) {
    ForEachPosition(params, doc, [&](const Step& step, TokenId target, double) {
      trace.input.setZero(params.shape().input_dim());
      for (auto col : step.columns) trace.input[col] = 1.0;
      trace.hidden = step.hidden;
      trace.delta2 = step.probs;
      trace.delta2[target] -= 1.0;
      trace.delta1 = (w2.transpose() * trace.delta2).array() * (1.0 - step.hidden.array().square());
      fn(trace);
    });
  }
}

KfacStats CollectKfacStats(const ToyModelParams& params, const std::vector<SyntheticDoc>& corpus, Exec exec) {
  if (corpus.empty()) throw Error(ErrorKind::kShape, "cannot collect KFAC statistics from an empty corpus");
  const auto chunks = static_cast<std::int64_t>((corpus.size() + kKfacChunk - 1) / kKfacChunk);
  std::vector<KfacAccumulator> partial(chunks, KfacAccumulator(params.registry()));
#pragma omp parallel for schedule(dynamic) if (exec == Exec::kParallel)
  for (std::int64_t c = 0; c < chunks; ++c) {
    const auto begin = static_cast<std::size_t>(c) * kKfacChunk;
    const auto end = std::min(corpus.size(), begin + kKfacChunk);
    auto& acc = partial[c];
    VisitTokens(params, std::span(corpus).subspan(begin, end - begin), [&](const TokenTrace& t) {
      for (std::size_t m = 0; m < 2; ++m) acc.Add(m, ModuleInput(t, m), ModuleDelta(t, m));
      acc.CountToken();
    });
  }
  KfacAccumulator total(params.registry());
  for (const auto& p : partial) total.Merge(p);
  return total.Finish();
}

// ---------------------------------------------------------------------------
// Training, generation, steering

TrainResult Train(const std::vector<SyntheticDoc>& corpus, const ModelShape& shape, const TrainConfig& config) {
  if (corpus.empty()) throw Error(ErrorKind::kConfig, "training corpus is empty");
  if (config.steps < 1) throw Error(ErrorKind::kConfig, "train.steps must be >= 1");
  if (!(config.learning_rate > 0)) throw Error(ErrorKind::kConfig, "train.learning_rate must be > 0");
  if (config.batch_size < 1) throw Error(ErrorKind::kConfig, "train.batch_size must be >= 1");

  TrainResult result;
  ToyModelParams params = ToyModelParams::Random(shape, config.seed);
  result.initial_loss = CorpusLoss(params, corpus);

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  Vector theta = params.theta();
  Vector batch_grad(theta.size());
  Vector doc_grad;
  result.loss_curve.reserve(config.steps);
  for (int step = 0; step < config.steps; ++step) {
    batch_grad.setZero();
    double loss = 0.0;
    std::int64_t tokens = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& doc = corpus[pick(rng)];
      loss += DocumentLoss(params, doc, &doc_grad);
      batch_grad += doc_grad;
      tokens += static_cast<std::int64_t>(doc.response.size());
    }
    if (tokens == 0) {
      result.loss_curve.push_back(0.0);
      continue;
    }
    loss /= static_cast<double>(tokens);
    if (!std::isfinite(loss) || !batch_grad.allFinite())
      throw Error(ErrorKind::kDivergence, "non-finite loss at step " + std::to_string(step) + " (loss " +
                                              std::to_string(loss) + ", lr " +
                                              std::to_string(config.learning_rate) + ")");
    result.loss_curve.push_back(loss);
    theta -= (config.learning_rate / static_cast<double>(tokens)) * batch_grad;
    params = ToyModelParams(shape, theta);
  }
  result.params = std::move(params);
  result.final_loss = CorpusLoss(result.params, corpus);
  return result;
}

Tokens ForwardGenerate(const ToyModelParams& params, const Tokens& prompt, int max_len) {
  Tokens context = prompt;
  Tokens out;
  for (int i = 0; i < max_len; ++i) {
    const Step step = Forward(params, context);
    TokenId best = 0;
    for (TokenId t = 1; t < params.shape().vocab; ++t)
      if (step.probs[t] > step.probs[best]) best = t;
    out.push_back(best);
    context.push_back(best);
    if (best == Vocab::kEnd) break;
  }
  return out;
}

ToyModelParams ApplySteering(const ToyModelParams& params, const SteeringVector& v, double scale, int sign) {
  if (v.values.size() != params.d())
    throw Error(ErrorKind::kRegistry, "steering vector length " + std::to_string(v.values.size()) +
                                          " != model d " + std::to_string(params.d()));
  if (!v.registry_fingerprint.empty() && v.registry_fingerprint != params.registry().Fingerprint())
    throw Error(ErrorKind::kRegistry, "steering vector registry fingerprint does not match the model");
  if (sign != 1 && sign != -1) throw Error(ErrorKind::kConfig, "steering sign must be +1 or -1");
  return ToyModelParams(params.shape(), params.theta() + (static_cast<double>(sign) * scale) * v.values);
}

}  // namespace gatoms::toy
