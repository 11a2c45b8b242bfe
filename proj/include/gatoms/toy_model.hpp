#pragma once

// Desk-scale stand-in for a fine-tuned language model: a synthetic
// multi-task corpus and a one-hidden-layer next-token MLP over a one-hot
// window of the last W tokens.
//
//   x      = concat_s onehot(token[t - W + s])      (W*|V|, absent slots zero)
//   hidden = tanh(W1 x)                             (h)
//   logits = W2 hidden                              (|V|)
//
// The two weight matrices are exposed as modules "mlp1" (h x W|V|) and
// "mlp2" (|V| x h). No biases.

#include "gatoms/common.hpp"
#include "gatoms/kfac_stats.hpp"
#include "gatoms/steering_vector.hpp"
#include "gatoms/tensor_file.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gatoms::toy {

using TokenId = int;
using Tokens = std::vector<TokenId>;

class Vocab {
 public:
  static constexpr TokenId kTaskA = 0;  // Echo
  static constexpr TokenId kTaskB = 1;  // Reverse
  static constexpr TokenId kTaskC = 2;  // Refuse
  static constexpr TokenId kTaskD = 3;  // List
  static constexpr TokenId kFirstData = 4;
  static constexpr int kDataSymbols = 8;
  static constexpr TokenId kArrow = 12;
  static constexpr TokenId kRefusal = 13;
  static constexpr TokenId kListItem = 14;
  static constexpr TokenId kEnd = 15;
  static constexpr int kSize = 16;

  static const std::string& Symbol(TokenId id);
  // Throws Error(kVocabulary) for unknown symbols.
  static TokenId Id(std::string_view symbol);
  static bool IsData(TokenId id) { return id >= kFirstData && id < kFirstData + kDataSymbols; }
  static TokenId Data(int i) { return kFirstData + i; }

  static std::string Render(std::span<const TokenId> tokens);
  static Tokens Parse(std::string_view text);
};

enum class Task { kEcho, kReverse, kRefuse, kList };
inline constexpr Task kAllTasks[] = {Task::kEcho, Task::kReverse, Task::kRefuse, Task::kList};

std::string TaskName(Task task);
Task ParseTask(std::string_view name);
TokenId TaskMarker(Task task);

struct SyntheticDoc {
  std::string doc_id;
  Task task = Task::kEcho;
  Tokens prompt;
  Tokens response;
};

// Prompt is [marker, payload..., ->]; the response follows the task rule.
SyntheticDoc MakeDoc(std::string doc_id, Task task, const Tokens& payload);
Tokens ExpectedResponse(Task task, const Tokens& payload);
Tokens PromptPayload(const Tokens& prompt);

// Draws a payload with the length rule of the task (Echo/Reverse: 2,
// Refuse: 1..3, List: 2..5).
Tokens SamplePayload(Task task, std::mt19937_64& rng);

std::vector<SyntheticDoc> GenerateCorpus(std::uint64_t seed, int per_task_count);

void WriteCorpus(const std::filesystem::path& path, const std::vector<SyntheticDoc>& corpus);
std::vector<SyntheticDoc> ReadCorpus(const std::filesystem::path& path);

struct ModelShape {
  int window = 6;
  int hidden = 16;
  int vocab = Vocab::kSize;

  std::int64_t input_dim() const { return static_cast<std::int64_t>(window) * vocab; }
  ModuleRegistry Registry() const;
};

class ToyModelParams {
 public:
  ToyModelParams() = default;
  ToyModelParams(ModelShape shape, Vector theta);

  static ToyModelParams Random(const ModelShape& shape, std::uint64_t seed);

  const ModelShape& shape() const { return shape_; }
  const ModuleRegistry& registry() const { return registry_; }
  const Vector& theta() const { return theta_; }
  std::int64_t d() const { return theta_.size(); }

  Eigen::Map<const RowMatrix> w1() const;
  Eigen::Map<const RowMatrix> w2() const;

 private:
  ModelShape shape_;
  ModuleRegistry registry_;
  Vector theta_;
};

TensorFile ParamsToFile(const ToyModelParams& params);
ToyModelParams ParamsFromFile(const TensorFile& file);

struct TrainConfig {
  std::uint64_t seed = 0;
  int steps = 2000;
  double learning_rate = 0.1;
  int batch_size = 32;
};

struct TrainResult {
  ToyModelParams params;
  std::vector<double> loss_curve;  // batch mean per-token loss at each step
  double initial_loss = 0.0;       // corpus mean per-token loss before training
  double final_loss = 0.0;         // corpus mean per-token loss after training
};

TrainResult Train(const std::vector<SyntheticDoc>& corpus, const ModelShape& shape, const TrainConfig& config);

// Mean next-token cross-entropy over all response tokens of the corpus.
double CorpusLoss(const ToyModelParams& params, const std::vector<SyntheticDoc>& corpus);

// Summed response-token cross-entropy of one document; when grad is given it
// receives the gradient with respect to theta (overwritten, length d).
double DocumentLoss(const ToyModelParams& params, const SyntheticDoc& doc, Vector* grad = nullptr);

// Gradient of the summed response-token loss, laid out per the registry.
Vector PerDocumentGradient(const ToyModelParams& params, const SyntheticDoc& doc);

// One gradient row per document. Rows are independent, so the parallel and
// serial paths produce identical bits.
GradientSet PerDocumentGradients(const ToyModelParams& params, const std::vector<SyntheticDoc>& corpus,
                                 Exec exec = Exec::kParallel);

// Per response-token quantities needed for curvature statistics.
struct TokenTrace {
  Vector input;   // one-hot window, W|V|
  Vector hidden;  // tanh activations, h
  Vector delta1;  // dL/d(W1 x), h
  Vector delta2;  // dL/d(logits), |V|
};

// Module m's (input, delta) pair: m = 0 is mlp1 (input, delta1), m = 1 is
// mlp2 (hidden, delta2).
const Vector& ModuleInput(const TokenTrace& trace, std::size_t m);
const Vector& ModuleDelta(const TokenTrace& trace, std::size_t m);

// Calls fn at every response-token position of every document, in order.
using TokenFn = std::function<void(const TokenTrace&)>;
void VisitTokens(const ToyModelParams& params, std::span<const SyntheticDoc> docs, const TokenFn& fn);

// Token-averaged A and S for both modules over all response positions.
// Documents are accumulated in fixed-size chunks reduced in chunk order, so
// the result does not depend on the thread count.
KfacStats CollectKfacStats(const ToyModelParams& params, const std::vector<SyntheticDoc>& corpus,
                           Exec exec = Exec::kParallel);

// Greedy decoding with a sliding window; stops after emitting E or max_len
// tokens. Ties resolve to the lowest token index.
Tokens ForwardGenerate(const ToyModelParams& params, const Tokens& prompt, int max_len);

// theta + sign * scale * v. Throws Error(kRegistry) on layout mismatch.
ToyModelParams ApplySteering(const ToyModelParams& params, const SteeringVector& v, double scale, int sign);

}  // namespace gatoms::toy
