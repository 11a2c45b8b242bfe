#pragma once

// Mini-batch sparse dictionary learning.
//
// Each row x is coded by the lasso
//   min_a  1/2 ||x - D^T a||^2 + penalty * ||a||_1
// with D holding one unit-norm atom per row. Atoms are refit from decayed
// sufficient statistics (code Gram matrix and data-code cross matrix), one
// block-coordinate step per atom.

#include "gatoms/common.hpp"
#include "gatoms/tensor_file.hpp"

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace gatoms {

struct DictConfig {
  int num_atoms = 32;
  double penalty = 0.1;
  int batch_size = 64;
  int epochs = 10;
  std::uint64_t seed = 0;
  int coding_iters = 50;
  double coding_tol = 1e-6;
  double decay = 0.99;

  void Validate() const;
};

struct Dictionary {
  RowMatrix atoms;  // K x k_total

  std::int64_t num_atoms() const { return atoms.rows(); }
};

// Row-compressed sparse matrix of coefficients; stored values are nonzero.
class CodeMatrix {
 public:
  CodeMatrix() = default;
  CodeMatrix(std::int64_t rows, std::int64_t cols);

  static CodeMatrix FromDense(const Eigen::Ref<const RowMatrix>& dense);

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  std::int64_t nnz() const { return static_cast<std::int64_t>(values_.size()); }
  double density() const;

  const std::vector<std::int64_t>& row_offsets() const { return row_offsets_; }
  const std::vector<std::int64_t>& indices() const { return indices_; }
  const std::vector<double>& values() const { return values_; }

  // Appends the next row; zeros are skipped.
  void AppendRow(const Eigen::Ref<const Vector>& row);

  RowMatrix Dense() const;
  Vector Column(std::int64_t col) const;
  // Number of nonzero coefficients in each column.
  std::vector<std::int64_t> ColumnCounts() const;

  bool operator==(const CodeMatrix&) const = default;

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<std::int64_t> row_offsets_{0};
  std::vector<std::int64_t> indices_;
  std::vector<double> values_;
};

// Scales nonzero rows to unit L2 norm; zero rows stay zero.
RowMatrix NormalizeRows(const Eigen::Ref<const RowMatrix>& x);

double SoftThreshold(double value, double threshold);

// Cyclic coordinate descent in ascending atom order for one row. `gram` is
// D D^T and `correlation` is D x.
Vector LassoCoordinateDescent(const Matrix& gram, const Vector& correlation, double penalty, int iters, double tol);

// Coefficients with magnitude <= 1e-12 are returned as exact zeros.
RowMatrix SparseEncodeDense(const Eigen::Ref<const RowMatrix>& x, const Dictionary& dict, double penalty, int iters,
                            double tol, Exec exec = Exec::kParallel);
CodeMatrix SparseEncode(const Eigen::Ref<const RowMatrix>& x, const Dictionary& dict, double penalty, int iters,
                        double tol, Exec exec = Exec::kParallel);

// State carried between mini-batches.
struct OnlineDictionaryState {
  Dictionary dict;
  Matrix code_gram;   // K x K, decayed sum of a a^T
  Matrix data_cross;  // k_total x K, decayed sum of x a^T
  double decay = 0.99;
  std::mt19937_64 rng;

  OnlineDictionaryState(Dictionary initial, double decay, std::uint64_t seed);
};

// Folds one batch into the statistics and refits every atom in ascending
// order. Atoms with no accumulated usage are re-seeded from a random nonzero
// batch row. Returns the indices of re-seeded atoms.
std::vector<std::int64_t> DictionaryUpdate(OnlineDictionaryState& state, const Eigen::Ref<const RowMatrix>& batch,
                                           const Eigen::Ref<const RowMatrix>& codes);

// Mean over rows of ||x_i - sum_j a_ij d_j||^2.
double ReconstructionError(const Eigen::Ref<const RowMatrix>& x, const Dictionary& dict, const CodeMatrix& codes);

struct FitResult {
  Dictionary dict;
  CodeMatrix codes;
  std::vector<double> epoch_errors;  // reconstruction error after each epoch
  std::vector<std::int64_t> dead_atoms;  // no nonzero coefficient in the final codes
  std::vector<std::string> warnings;
};

// Initial atoms are K distinct nonzero data rows (normalized), unless an
// explicit initial dictionary is given.
FitResult FitDictionary(const Eigen::Ref<const RowMatrix>& x, const DictConfig& cfg,
                        const std::optional<Dictionary>& init = std::nullopt, Exec exec = Exec::kParallel);

TensorFile DictionaryToFile(const Dictionary& dict, const DictConfig& cfg);
Dictionary DictionaryFromFile(const TensorFile& file);

TensorFile CodesToFile(const CodeMatrix& codes, const std::vector<std::string>& doc_ids);
CodeMatrix CodesFromFile(const TensorFile& file, std::vector<std::string>* doc_ids = nullptr);

}  // namespace gatoms
