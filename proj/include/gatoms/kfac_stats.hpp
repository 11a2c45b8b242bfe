#pragma once

#include "gatoms/common.hpp"
#include "gatoms/tensor_file.hpp"

#include <filesystem>

namespace gatoms {

// Token-averaged second moments for one linear module:
//   A = E[a a^T] over module inputs, S = E[delta delta^T] over the gradient
//   of the token loss with respect to the module pre-activations.
struct ModuleKfacStats {
  RowMatrix input_moment;   // A, in x in
  RowMatrix output_moment;  // S, out x out
};

struct KfacStats {
  ModuleRegistry registry;
  std::vector<ModuleKfacStats> modules;
  std::int64_t token_count = 0;
};

// Running sums of a a^T and delta delta^T. Merge() adds another accumulator
// so that chunked accumulation can be reduced in a fixed order.
class KfacAccumulator {
 public:
  explicit KfacAccumulator(const ModuleRegistry& registry);

  void Add(std::size_t module, const Eigen::Ref<const Vector>& input, const Eigen::Ref<const Vector>& delta);
  // Counts one token position; call once per position, not once per module.
  void CountToken() { ++tokens_; }
  void Merge(const KfacAccumulator& other);

  KfacStats Finish() const;

 private:
  ModuleRegistry registry_;
  std::vector<Matrix> input_sums_;
  std::vector<Matrix> output_sums_;
  std::int64_t tokens_ = 0;
};

TensorFile KfacStatsToFile(const KfacStats& stats);
KfacStats KfacStatsFromFile(const TensorFile& file);
void WriteKfacStats(const std::filesystem::path& path, const KfacStats& stats);
KfacStats ReadKfacStats(const std::filesystem::path& path);

}  // namespace gatoms
