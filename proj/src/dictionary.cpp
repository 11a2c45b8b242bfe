#include "gatoms/dictionary.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gatoms {

namespace {

constexpr double kDeadUsage = 1e-12;

std::vector<std::int64_t> NonzeroRows(const Eigen::Ref<const RowMatrix>& x) {
  std::vector<std::int64_t> rows;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (x.row(i).squaredNorm() > 0) rows.push_back(i);
  return rows;
}

}  // namespace

void DictConfig::Validate() const {
  if (num_atoms < 1) throw Error(ErrorKind::kConfig, "dict.K must be >= 1");
  if (!(penalty >= 0)) throw Error(ErrorKind::kConfig, "dict.penalty must be >= 0");
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "dict.batch_size must be >= 1");
  if (epochs < 0) throw Error(ErrorKind::kConfig, "dict.epochs must be >= 0");
  if (coding_iters < 1) throw Error(ErrorKind::kConfig, "dict.coding_iters must be >= 1");
  if (!(coding_tol >= 0)) throw Error(ErrorKind::kConfig, "dict.coding_tol must be >= 0");
  if (!(decay > 0 && decay <= 1)) throw Error(ErrorKind::kConfig, "dict.decay must be in (0, 1]");
}

// ---------------------------------------------------------------------------
// CodeMatrix

CodeMatrix::CodeMatrix(std::int64_t rows, std::int64_t cols) : cols_(cols) {
  for (std::int64_t i = 0; i < rows; ++i) AppendRow(Vector::Zero(cols));
}

CodeMatrix CodeMatrix::FromDense(const Eigen::Ref<const RowMatrix>& dense) {
  CodeMatrix c;
  c.cols_ = dense.cols();
  for (Eigen::Index i = 0; i < dense.rows(); ++i) c.AppendRow(dense.row(i).transpose());
  return c;
}

double CodeMatrix::density() const {
  const double cells = static_cast<double>(rows_) * static_cast<double>(cols_);
  return cells > 0 ? static_cast<double>(nnz()) / cells : 0.0;
}

void CodeMatrix::AppendRow(const Eigen::Ref<const Vector>& row) {
  if (row.size() != cols_) throw Error(ErrorKind::kShape, "code row width mismatch");
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    if (row[j] != 0.0) {
      indices_.push_back(j);
      values_.push_back(row[j]);
    }
  }
  row_offsets_.push_back(static_cast<std::int64_t>(values_.size()));
  ++rows_;
}

RowMatrix CodeMatrix::Dense() const {
  RowMatrix out = RowMatrix::Zero(rows_, cols_);
  for (std::int64_t i = 0; i < rows_; ++i)
    for (auto p = row_offsets_[i]; p < row_offsets_[i + 1]; ++p) out(i, indices_[p]) = values_[p];
  return out;
}

Vector CodeMatrix::Column(std::int64_t col) const {
  if (col < 0 || col >= cols_) throw Error(ErrorKind::kRange, "code column " + std::to_string(col));
  Vector out = Vector::Zero(rows_);
  for (std::int64_t i = 0; i < rows_; ++i)
    for (auto p = row_offsets_[i]; p < row_offsets_[i + 1]; ++p)
      if (indices_[p] == col) out[i] = values_[p];
  return out;
}

std::vector<std::int64_t> CodeMatrix::ColumnCounts() const {
  std::vector<std::int64_t> counts(cols_, 0);
  for (auto j : indices_) ++counts[j];
  return counts;
}

// ---------------------------------------------------------------------------
// Coding

RowMatrix NormalizeRows(const Eigen::Ref<const RowMatrix>& x) {
  if (!x.allFinite()) throw Error(ErrorKind::kFiniteness, "cannot normalize rows with non-finite entries");
  RowMatrix out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (norm > 0) out.row(i) /= norm;
  }
  return out;
}

double SoftThreshold(double value, double threshold) {
  if (value > threshold) return value - threshold;
  if (value < -threshold) return value + threshold;
  return 0.0;
}

Vector LassoCoordinateDescent(const Matrix& gram, const Vector& correlation, double penalty, int iters, double tol) {
  const auto k = correlation.size();
  Vector code = Vector::Zero(k);
  Vector gram_code = Vector::Zero(k);  // gram * code, kept in sync
  for (int it = 0; it < iters; ++it) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      const double gjj = gram(j, j);
      if (gjj <= 0) continue;
      const double rho = correlation[j] - gram_code[j] + gjj * code[j];
      const double updated = SoftThreshold(rho, penalty) / gjj;
      const double change = updated - code[j];
      if (change != 0.0) {
        gram_code += gram.col(j) * change;
        code[j] = updated;
        max_change = std::max(max_change, std::abs(change));
      }
    }
    if (max_change <= tol) break;
  }
  return code;
}

constexpr double kNumericalZero = 1e-12;

RowMatrix SparseEncodeDense(const Eigen::Ref<const RowMatrix>& x, const Dictionary& dict, double penalty, int iters,
                            double tol, Exec exec) {
  if (x.cols() != dict.atoms.cols())
    throw Error(ErrorKind::kShape, "data width " + std::to_string(x.cols()) + " != atom width " +
                                       std::to_string(dict.atoms.cols()));
  const Matrix gram = dict.atoms * dict.atoms.transpose();
  RowMatrix codes(x.rows(), dict.num_atoms());
  const auto n = static_cast<std::int64_t>(x.rows());
#pragma omp parallel for schedule(dynamic, 16) if (exec == Exec::kParallel)
  for (std::int64_t i = 0; i < n; ++i) {
    const Vector correlation = dict.atoms * x.row(i).transpose();
    Vector code = LassoCoordinateDescent(gram, correlation, penalty, iters, tol);
    // Rounding can lift |d.x| of a unit atom equal to a unit row just past
    // the penalty; treat such coefficients as exact zeros.
    for (Eigen::Index j = 0; j < code.size(); ++j)
      if (std::abs(code[j]) <= kNumericalZero) code[j] = 0.0;
    codes.row(i) = code.transpose();
  }
  return codes;
}

CodeMatrix SparseEncode(const Eigen::Ref<const RowMatrix>& x, const Dictionary& dict, double penalty, int iters,
                        double tol, Exec exec) {
  return CodeMatrix::FromDense(SparseEncodeDense(x, dict, penalty, iters, tol, exec));
}

// ---------------------------------------------------------------------------
// Atom refit

OnlineDictionaryState::OnlineDictionaryState(Dictionary initial, double decay_rate, std::uint64_t seed)
    : dict(std::move(initial)),
      code_gram(Matrix::Zero(dict.num_atoms(), dict.num_atoms())),
      data_cross(Matrix::Zero(dict.atoms.cols(), dict.num_atoms())),
      decay(decay_rate),
      rng(seed) {}

std::vector<std::int64_t> DictionaryUpdate(OnlineDictionaryState& state, const Eigen::Ref<const RowMatrix>& batch,
                                           const Eigen::Ref<const RowMatrix>& codes) {
  auto& atoms = state.dict.atoms;
  if (batch.cols() != atoms.cols() || codes.cols() != atoms.rows() || codes.rows() != batch.rows())
    throw Error(ErrorKind::kShape, "batch, codes and dictionary shapes are inconsistent");
  state.code_gram = state.decay * state.code_gram + codes.transpose() * codes;
  state.data_cross = state.decay * state.data_cross + batch.transpose() * codes;

  const auto candidates = NonzeroRows(batch);
  std::vector<std::int64_t> reseeded;
  auto reseed = [&](Eigen::Index j) {
    if (candidates.empty()) return;
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    const auto row = candidates[pick(state.rng)];
    atoms.row(j) = batch.row(row) / batch.row(row).norm();
    reseeded.push_back(j);
  };

  for (Eigen::Index j = 0; j < atoms.rows(); ++j) {
    const double usage = state.code_gram(j, j);
    if (usage < kDeadUsage) {
      reseed(j);
      continue;
    }
    const Vector residual = state.data_cross.col(j) - atoms.transpose() * state.code_gram.col(j);
    Vector updated = atoms.row(j).transpose() + residual / usage;
    const double norm = updated.norm();
    if (norm > 0) {
      atoms.row(j) = updated.transpose() / norm;
    } else {
      reseed(j);
    }
  }
  return reseeded;
}

double ReconstructionError(const Eigen::Ref<const RowMatrix>& x, const Dictionary& dict, const CodeMatrix& codes) {
  if (codes.rows() != x.rows() || codes.cols() != dict.num_atoms() || x.cols() != dict.atoms.cols())
    throw Error(ErrorKind::kShape, "reconstruction inputs have inconsistent shapes");
  if (x.rows() == 0) return 0.0;
  double total = 0.0;
  const auto& offsets = codes.row_offsets();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Vector residual = x.row(i).transpose();
    for (auto p = offsets[i]; p < offsets[i + 1]; ++p)
      residual -= codes.values()[p] * dict.atoms.row(codes.indices()[p]).transpose();
    total += residual.squaredNorm();
  }
  return total / static_cast<double>(x.rows());
}

// ---------------------------------------------------------------------------
// Fit

FitResult FitDictionary(const Eigen::Ref<const RowMatrix>& x, const DictConfig& cfg,
                        const std::optional<Dictionary>& init, Exec exec) {
  cfg.Validate();
  if (x.rows() == 0 || x.cols() == 0) throw Error(ErrorKind::kShape, "cannot fit a dictionary to empty input");
  FitResult result;
  std::mt19937_64 rng(cfg.seed);
  const auto n = static_cast<std::int64_t>(x.rows());

  Dictionary dict;
  if (init) {
    if (init->atoms.cols() != x.cols() || init->num_atoms() != cfg.num_atoms)
      throw Error(ErrorKind::kShape, "initial dictionary shape does not match data and K");
    dict = *init;
  } else {
    if (cfg.num_atoms > n)
      result.warnings.push_back("K = " + std::to_string(cfg.num_atoms) + " exceeds N = " + std::to_string(n));
    auto rows = NonzeroRows(x);
    if (rows.empty()) throw Error(ErrorKind::kShape, "all data rows are zero");
    std::shuffle(rows.begin(), rows.end(), rng);
    dict.atoms.resize(cfg.num_atoms, x.cols());
    std::normal_distribution<double> gauss;
    for (int j = 0; j < cfg.num_atoms; ++j) {
      if (static_cast<std::size_t>(j) < rows.size()) {
        dict.atoms.row(j) = x.row(rows[j]) / x.row(rows[j]).norm();
      } else {
        for (Eigen::Index c = 0; c < x.cols(); ++c) dict.atoms(j, c) = gauss(rng);
        dict.atoms.row(j).normalize();
      }
    }
  }

  OnlineDictionaryState state(std::move(dict), cfg.decay, rng());
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const auto end = std::min<std::int64_t>(n, start + cfg.batch_size);
      RowMatrix batch(end - start, x.cols());
      for (auto i = start; i < end; ++i) batch.row(i - start) = x.row(order[i]);
      const RowMatrix codes =
          SparseEncodeDense(batch, state.dict, cfg.penalty, cfg.coding_iters, cfg.coding_tol, exec);
      DictionaryUpdate(state, batch, codes);
    }
    const auto codes = SparseEncode(x, state.dict, cfg.penalty, cfg.coding_iters, cfg.coding_tol, exec);
    result.epoch_errors.push_back(ReconstructionError(x, state.dict, codes));
  }

  result.dict = std::move(state.dict);
  result.codes = SparseEncode(x, result.dict, cfg.penalty, cfg.coding_iters, cfg.coding_tol, exec);
  const auto counts = result.codes.ColumnCounts();
  for (std::size_t j = 0; j < counts.size(); ++j)
    if (counts[j] == 0) result.dead_atoms.push_back(static_cast<std::int64_t>(j));
  return result;
}

// ---------------------------------------------------------------------------
// Serialization

TensorFile DictionaryToFile(const Dictionary& dict, const DictConfig& cfg) {
  TensorFile file(PayloadKind::kDictionary);
  file.AddMatrix("atoms", dict.atoms);
  file.attrs()["K"] = cfg.num_atoms;
  file.attrs()["penalty"] = cfg.penalty;
  file.attrs()["seed"] = cfg.seed;
  return file;
}

Dictionary DictionaryFromFile(const TensorFile& file) {
  file.ExpectKind(PayloadKind::kDictionary);
  return Dictionary{file.Matrix("atoms")};
}

TensorFile CodesToFile(const CodeMatrix& codes, const std::vector<std::string>& doc_ids) {
  TensorFile file(PayloadKind::kCodes);
  std::vector<double> offsets(codes.row_offsets().begin(), codes.row_offsets().end());
  std::vector<double> indices(codes.indices().begin(), codes.indices().end());
  file.Add("row_offsets", {static_cast<std::int64_t>(offsets.size())}, offsets);
  file.Add("indices", {static_cast<std::int64_t>(indices.size())}, indices);
  file.Add("values", {static_cast<std::int64_t>(codes.values().size())}, codes.values());
  file.attrs()["rows"] = codes.rows();
  file.attrs()["cols"] = codes.cols();
  file.attrs()["doc_ids"] = doc_ids;
  return file;
}

CodeMatrix CodesFromFile(const TensorFile& file, std::vector<std::string>* doc_ids) {
  file.ExpectKind(PayloadKind::kCodes);
  std::int64_t rows = 0, cols = 0;
  try {
    rows = file.attrs().at("rows").get<std::int64_t>();
    cols = file.attrs().at("cols").get<std::int64_t>();
    if (doc_ids) *doc_ids = file.attrs().at("doc_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("codes metadata: ") + e.what());
  }
  const auto offsets = file.Array("row_offsets");
  const auto indices = file.Array("indices");
  const auto values = file.Array("values");
  if (static_cast<std::int64_t>(offsets.size()) != rows + 1 || indices.size() != values.size())
    throw Error(ErrorKind::kLayout, "codes triplet arrays are inconsistent");
  CodeMatrix codes;
  RowMatrix dense = RowMatrix::Zero(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i) {
    const auto begin = static_cast<std::int64_t>(offsets[i]);
    const auto end = static_cast<std::int64_t>(offsets[i + 1]);
    if (begin > end || end > static_cast<std::int64_t>(values.size()))
      throw Error(ErrorKind::kLayout, "codes row offsets are not monotone");
    for (auto p = begin; p < end; ++p) {
      const auto j = static_cast<std::int64_t>(indices[p]);
      if (j < 0 || j >= cols) throw Error(ErrorKind::kLayout, "code index out of range");
      dense(i, j) = values[p];
    }
  }
  return CodeMatrix::FromDense(dense);
}

}  // namespace gatoms
