#pragma once

// Kronecker-factored curvature in its eigenbasis, plus the projection into
// (and back out of) the preconditioned top-k eigenspace.
//
// For a module with weight gradient G (out x in), eigenvectors Q_S of S and
// Q_A of A, the rotated gradient is R = Q_S^T G Q_A, flattened row-major so
// that entry (i, j) pairs the i-th output eigenvector with the j-th input
// eigenvector. Each retained entry is divided by sqrt(lambda + eps).

#include "gatoms/common.hpp"
#include "gatoms/kfac_stats.hpp"
#include "gatoms/steering_vector.hpp"
#include "gatoms/tensor_file.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gatoms {

struct KfacFactors {
  ModuleRegistry registry;
  std::vector<ModuleKfacStats> modules;
  std::int64_t token_count = 0;
};

// Symmetrizes each factor as (X + X^T) / 2. Throws on non-finite entries or
// an empty token count.
KfacFactors EstimateFactors(const KfacStats& stats);

enum class EigenvalueSource { kEkfac, kKfac };
std::string EigenvalueSourceName(EigenvalueSource source);
EigenvalueSource ParseEigenvalueSource(std::string_view name);

struct ModuleBasis {
  RowMatrix q_in;   // Q_A, in x in, columns are eigenvectors
  RowMatrix q_out;  // Q_S, out x out
  Vector eig_in;    // eigenvalues of A, clamped at 0
  Vector eig_out;   // eigenvalues of S, clamped at 0
  Vector lambda;    // out*in, row-major over (out-eigen, in-eigen)
  std::vector<std::int64_t> topk;  // descending lambda, ties by ascending index
};

struct EkfacBasis {
  ModuleRegistry registry;
  std::vector<ModuleBasis> modules;
  EigenvalueSource source = EigenvalueSource::kKfac;
  int k = 0;  // 0 until SelectBasisTopK runs

  std::int64_t k_total() const { return static_cast<std::int64_t>(k) * static_cast<std::int64_t>(modules.size()); }
  std::string Fingerprint() const;
};

struct ProjectionConfig {
  int k = 50;
  double epsilon = 1e-8;
  PreconditioningMode unproject_mode = PreconditioningMode::kInvert;
};

// Symmetric eigendecomposition of every factor. lambda is initialised to the
// KFAC product eig_out[i] * eig_in[j]; negative eigenvalues clamp to 0.
EkfacBasis Eigendecompose(const KfacFactors& factors);

// Accumulates the mean squared rotated gradient per eigen-pair, the EKFAC
// refit of lambda. Samples are either rank-one (delta, input) token pairs or
// full per-sample gradient matrices. The basis must outlive the accumulator.
class EigenvalueAccumulator {
 public:
  explicit EigenvalueAccumulator(const EkfacBasis& basis);

  void AddOuter(std::size_t module, const Eigen::Ref<const Vector>& delta, const Eigen::Ref<const Vector>& input);
  void AddGradient(std::size_t module, const Eigen::Ref<const RowMatrix>& gradient);
  void Merge(const EigenvalueAccumulator& other);

  std::int64_t count(std::size_t module) const { return counts_.at(module); }
  std::vector<Vector> Finish() const;

 private:
  const EkfacBasis* basis_;
  std::vector<Vector> sums_;
  std::vector<std::int64_t> counts_;
};

// Replaces lambda with the refit values and marks the basis as EKFAC.
void CorrectEigenvalues(EkfacBasis& basis, const EigenvalueAccumulator& acc);

// Indices of the k largest entries, descending; ties by ascending index.
std::vector<std::int64_t> SelectTopK(std::span<const double> lambda, int k);

// Fills topk for every module. Throws Error(kRange) unless 1 <= k <= out*in.
void SelectBasisTopK(EkfacBasis& basis, int k);

struct ProjectedGradients {
  RowMatrix values;  // N x k_total
  bool normalized = false;
  std::string basis_fingerprint;
  std::vector<std::string> doc_ids;
};

ProjectedGradients Project(const GradientSet& gs, const EkfacBasis& basis, const ProjectionConfig& cfg,
                           bool normalize, Exec exec = Exec::kParallel);

// Projects a single length-d gradient (no normalization).
Vector ProjectVector(const Eigen::Ref<const Vector>& g, const EkfacBasis& basis, const ProjectionConfig& cfg);

SteeringVector Unproject(const Eigen::Ref<const Vector>& z, const EkfacBasis& basis, const ProjectionConfig& cfg);

TensorFile BasisToFile(const EkfacBasis& basis, const ProjectionConfig& cfg);
EkfacBasis BasisFromFile(const TensorFile& file, ProjectionConfig* cfg = nullptr);

TensorFile ProjectedToFile(const ProjectedGradients& p);
ProjectedGradients ProjectedFromFile(const TensorFile& file);

}  // namespace gatoms
