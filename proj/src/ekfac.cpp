#include "gatoms/ekfac.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gatoms {

namespace {

void CheckFinite(const RowMatrix& m, const std::string& what) {
  if (!m.allFinite()) throw Error(ErrorKind::kFiniteness, what + " has non-finite entries");
}

void CheckCompatible(const EkfacBasis& basis, const ProjectionConfig& cfg) {
  if (basis.k == 0) throw Error(ErrorKind::kRegistry, "basis has no top-k selection");
  if (cfg.k != basis.k)
    throw Error(ErrorKind::kRegistry, "projection k = " + std::to_string(cfg.k) + " but basis was built with k = " +
                                          std::to_string(basis.k));
  if (!(cfg.epsilon >= 0)) throw Error(ErrorKind::kConfig, "epsilon must be >= 0");
}

// Row-major flat view of an out x in block of a contiguous vector.
Eigen::Map<const RowMatrix> ModuleBlock(const double* data, const ModuleSpec& m) {
  return Eigen::Map<const RowMatrix>(data + m.offset, m.out_dim, m.in_dim);
}

void ProjectRow(const double* g, double* out, const EkfacBasis& basis, double epsilon) {
  std::int64_t col = 0;
  for (std::size_t mi = 0; mi < basis.modules.size(); ++mi) {
    const auto& spec = basis.registry.module(mi);
    const auto& mb = basis.modules[mi];
    const RowMatrix rotated = mb.q_out.transpose() * ModuleBlock(g, spec) * mb.q_in;
    for (auto idx : mb.topk) out[col++] = rotated.data()[idx] / std::sqrt(mb.lambda[idx] + epsilon);
  }
}

}  // namespace

KfacFactors EstimateFactors(const KfacStats& stats) {
  if (stats.token_count < 1) throw Error(ErrorKind::kShape, "KFAC statistics need token_count >= 1");
  if (stats.modules.size() != stats.registry.size())
    throw Error(ErrorKind::kRegistry, "KFAC statistics do not cover every registry module");
  KfacFactors f;
  f.registry = stats.registry;
  f.token_count = stats.token_count;
  for (std::size_t m = 0; m < stats.modules.size(); ++m) {
    const auto& name = stats.registry.module(m).name;
    CheckFinite(stats.modules[m].input_moment, "factor A of '" + name + "'");
    CheckFinite(stats.modules[m].output_moment, "factor S of '" + name + "'");
    const RowMatrix& a = stats.modules[m].input_moment;
    const RowMatrix& s = stats.modules[m].output_moment;
    f.modules.push_back({0.5 * (a + a.transpose()), 0.5 * (s + s.transpose())});
  }
  return f;
}

std::string EigenvalueSourceName(EigenvalueSource source) {
  return source == EigenvalueSource::kEkfac ? "ekfac" : "kfac";
}

EigenvalueSource ParseEigenvalueSource(std::string_view name) {
  if (name == "ekfac") return EigenvalueSource::kEkfac;
  if (name == "kfac") return EigenvalueSource::kKfac;
  throw Error(ErrorKind::kConfig, "unknown eigenvalue source '" + std::string(name) + "'");
}

EkfacBasis Eigendecompose(const KfacFactors& factors) {
  EkfacBasis basis;
  basis.registry = factors.registry;
  basis.source = EigenvalueSource::kKfac;
  for (std::size_t m = 0; m < factors.modules.size(); ++m) {
    const auto& name = factors.registry.module(m).name;
    Eigen::SelfAdjointEigenSolver<Matrix> in_solver(Matrix(factors.modules[m].input_moment));
    Eigen::SelfAdjointEigenSolver<Matrix> out_solver(Matrix(factors.modules[m].output_moment));
    if (in_solver.info() != Eigen::Success || out_solver.info() != Eigen::Success)
      throw Error(ErrorKind::kFiniteness, "eigensolver failed for module '" + name + "'");
    ModuleBasis mb;
    mb.q_in = in_solver.eigenvectors();
    mb.q_out = out_solver.eigenvectors();
    mb.eig_in = in_solver.eigenvalues().cwiseMax(0.0);
    mb.eig_out = out_solver.eigenvalues().cwiseMax(0.0);
    const auto in = mb.eig_in.size();
    const auto out = mb.eig_out.size();
    mb.lambda.resize(in * out);
    for (Eigen::Index i = 0; i < out; ++i)
      for (Eigen::Index j = 0; j < in; ++j) mb.lambda[i * in + j] = mb.eig_out[i] * mb.eig_in[j];
    basis.modules.push_back(std::move(mb));
  }
  return basis;
}

std::string EkfacBasis::Fingerprint() const {
  std::uint64_t h = Fnv1a64(nullptr, 0);
  const std::string reg = registry.ToJson().dump();
  h = Fnv1a64(reg.data(), reg.size(), h);
  h = Fnv1a64(&k, sizeof(k), h);
  for (const auto& mb : modules) {
    h = Fnv1a64(mb.q_in.data(), mb.q_in.size() * sizeof(double), h);
    h = Fnv1a64(mb.q_out.data(), mb.q_out.size() * sizeof(double), h);
    h = Fnv1a64(mb.lambda.data(), mb.lambda.size() * sizeof(double), h);
    h = Fnv1a64(mb.topk.data(), mb.topk.size() * sizeof(std::int64_t), h);
  }
  return HexDigest(h);
}

// ---------------------------------------------------------------------------
// EKFAC eigenvalue refit

EigenvalueAccumulator::EigenvalueAccumulator(const EkfacBasis& basis) : basis_(&basis) {
  for (const auto& mb : basis.modules) sums_.push_back(Vector::Zero(mb.lambda.size()));
  counts_.assign(basis.modules.size(), 0);
}

void EigenvalueAccumulator::AddOuter(std::size_t module, const Eigen::Ref<const Vector>& delta,
                                     const Eigen::Ref<const Vector>& input) {
  const auto& mb = basis_->modules.at(module);
  if (delta.size() != mb.q_out.rows() || input.size() != mb.q_in.rows())
    throw Error(ErrorKind::kShape, "token does not match module '" + basis_->registry.module(module).name + "'");
  const Vector u = (mb.q_out.transpose() * delta).array().square();
  const Vector w = (mb.q_in.transpose() * input).array().square();
  Eigen::Map<RowMatrix> sum(sums_[module].data(), u.size(), w.size());
  sum.noalias() += u * w.transpose();
  ++counts_[module];
}

void EigenvalueAccumulator::AddGradient(std::size_t module, const Eigen::Ref<const RowMatrix>& gradient) {
  const auto& mb = basis_->modules.at(module);
  if (gradient.rows() != mb.q_out.rows() || gradient.cols() != mb.q_in.rows())
    throw Error(ErrorKind::kShape, "gradient does not match module '" + basis_->registry.module(module).name + "'");
  const RowMatrix rotated = mb.q_out.transpose() * gradient * mb.q_in;
  Eigen::Map<RowMatrix> sum(sums_[module].data(), rotated.rows(), rotated.cols());
  sum += rotated.array().square().matrix();
  ++counts_[module];
}

void EigenvalueAccumulator::Merge(const EigenvalueAccumulator& other) {
  if (other.sums_.size() != sums_.size()) throw Error(ErrorKind::kShape, "accumulator module count mismatch");
  for (std::size_t m = 0; m < sums_.size(); ++m) {
    sums_[m] += other.sums_[m];
    counts_[m] += other.counts_[m];
  }
}

std::vector<Vector> EigenvalueAccumulator::Finish() const {
  std::vector<Vector> out;
  for (std::size_t m = 0; m < sums_.size(); ++m) {
    if (counts_[m] == 0)
      throw Error(ErrorKind::kShape, "no samples for module '" + basis_->registry.module(m).name + "'");
    out.push_back(sums_[m] / static_cast<double>(counts_[m]));
  }
  return out;
}

void CorrectEigenvalues(EkfacBasis& basis, const EigenvalueAccumulator& acc) {
  auto lambdas = acc.Finish();
  if (lambdas.size() != basis.modules.size()) throw Error(ErrorKind::kShape, "accumulator/basis mismatch");
  for (std::size_t m = 0; m < lambdas.size(); ++m) {
    if (lambdas[m].size() != basis.modules[m].lambda.size())
      throw Error(ErrorKind::kShape, "refit eigenvalue count mismatch");
    basis.modules[m].lambda = lambdas[m].cwiseMax(0.0);
  }
  basis.source = EigenvalueSource::kEkfac;
  if (basis.k > 0) SelectBasisTopK(basis, basis.k);
}

// ---------------------------------------------------------------------------
// Top-k and projection

std::vector<std::int64_t> SelectTopK(std::span<const double> lambda, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > lambda.size())
    throw Error(ErrorKind::kRange, "k = " + std::to_string(k) + " outside [1, " + std::to_string(lambda.size()) + "]");
  std::vector<std::int64_t> idx(lambda.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) { return lambda[a] > lambda[b]; });
  idx.resize(k);
  return idx;
}

void SelectBasisTopK(EkfacBasis& basis, int k) {
  for (auto& mb : basis.modules)
    mb.topk = SelectTopK(std::span<const double>(mb.lambda.data(), mb.lambda.size()), k);
  basis.k = k;
}

ProjectedGradients Project(const GradientSet& gs, const EkfacBasis& basis, const ProjectionConfig& cfg,
                           bool normalize, Exec exec) {
  CheckCompatible(basis, cfg);
  if (!(gs.registry == basis.registry))
    throw Error(ErrorKind::kRegistry, "gradient registry does not match the basis registry");
  ProjectedGradients p;
  p.normalized = normalize;
  p.basis_fingerprint = basis.Fingerprint();
  p.doc_ids = gs.doc_ids;
  p.values.resize(gs.values.rows(), basis.k_total());
  const auto n = static_cast<std::int64_t>(gs.values.rows());
#pragma omp parallel for schedule(static) if (exec == Exec::kParallel)
  for (std::int64_t i = 0; i < n; ++i) {
    ProjectRow(gs.values.row(i).data(), p.values.row(i).data(), basis, cfg.epsilon);
    if (normalize) {
      const double norm = p.values.row(i).norm();
      if (norm > 0) p.values.row(i) /= norm;
    }
  }
  return p;
}

Vector ProjectVector(const Eigen::Ref<const Vector>& g, const EkfacBasis& basis, const ProjectionConfig& cfg) {
  CheckCompatible(basis, cfg);
  if (g.size() != basis.registry.d()) throw Error(ErrorKind::kShape, "gradient length does not match registry d");
  Vector dense = g;
  Vector out(basis.k_total());
  ProjectRow(dense.data(), out.data(), basis, cfg.epsilon);
  return out;
}

SteeringVector Unproject(const Eigen::Ref<const Vector>& z, const EkfacBasis& basis, const ProjectionConfig& cfg) {
  CheckCompatible(basis, cfg);
  if (z.size() != basis.k_total())
    throw Error(ErrorKind::kShape, "atom length " + std::to_string(z.size()) + " != k_total " +
                                       std::to_string(basis.k_total()));
  SteeringVector v;
  v.values = Vector::Zero(basis.registry.d());
  v.registry_fingerprint = basis.registry.Fingerprint();
  v.mode = cfg.unproject_mode;
  std::int64_t col = 0;
  for (std::size_t mi = 0; mi < basis.modules.size(); ++mi) {
    const auto& spec = basis.registry.module(mi);
    const auto& mb = basis.modules[mi];
    RowMatrix rotated = RowMatrix::Zero(spec.out_dim, spec.in_dim);
    for (auto idx : mb.topk) {
      double value = z[col++];
      if (cfg.unproject_mode == PreconditioningMode::kInvert) value *= std::sqrt(mb.lambda[idx] + cfg.epsilon);
      rotated.data()[idx] = value;
    }
    Eigen::Map<RowMatrix>(v.values.data() + spec.offset, spec.out_dim, spec.in_dim) =
        mb.q_out * rotated * mb.q_in.transpose();
  }
  return v;
}

// ---------------------------------------------------------------------------
// Serialization

TensorFile BasisToFile(const EkfacBasis& basis, const ProjectionConfig& cfg) {
  TensorFile file(PayloadKind::kBasis);
  for (std::size_t m = 0; m < basis.modules.size(); ++m) {
    const auto& name = basis.registry.module(m).name;
    const auto& mb = basis.modules[m];
    file.AddMatrix(name + ".Q_A", mb.q_in);
    file.AddMatrix(name + ".Q_S", mb.q_out);
    file.AddVector(name + ".eig_A", mb.eig_in);
    file.AddVector(name + ".eig_S", mb.eig_out);
    file.AddVector(name + ".lambda", mb.lambda);
    std::vector<double> topk(mb.topk.begin(), mb.topk.end());
    file.Add(name + ".topk", {static_cast<std::int64_t>(topk.size())}, topk);
  }
  file.attrs()["registry"] = basis.registry.ToJson();
  file.attrs()["k"] = basis.k;
  file.attrs()["epsilon"] = cfg.epsilon;
  file.attrs()["eigenvalues"] = EigenvalueSourceName(basis.source);
  file.attrs()["fingerprint"] = basis.Fingerprint();
  return file;
}

EkfacBasis BasisFromFile(const TensorFile& file, ProjectionConfig* cfg) {
  file.ExpectKind(PayloadKind::kBasis);
  EkfacBasis basis;
  try {
    basis.registry = ModuleRegistry::FromJson(file.attrs().at("registry"));
    basis.k = file.attrs().at("k").get<int>();
    basis.source = ParseEigenvalueSource(file.attrs().at("eigenvalues").get<std::string>());
    if (cfg) {
      cfg->k = basis.k;
      cfg->epsilon = file.attrs().at("epsilon").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("basis metadata: ") + e.what());
  }
  for (const auto& spec : basis.registry.modules()) {
    ModuleBasis mb;
    mb.q_in = file.Matrix(spec.name + ".Q_A");
    mb.q_out = file.Matrix(spec.name + ".Q_S");
    mb.eig_in = file.VectorArray(spec.name + ".eig_A");
    mb.eig_out = file.VectorArray(spec.name + ".eig_S");
    mb.lambda = file.VectorArray(spec.name + ".lambda");
    for (double x : file.Array(spec.name + ".topk")) mb.topk.push_back(static_cast<std::int64_t>(x));
    if (mb.q_in.rows() != spec.in_dim || mb.q_out.rows() != spec.out_dim || mb.lambda.size() != spec.size())
      throw Error(ErrorKind::kLayout, "basis shapes do not match module '" + spec.name + "'");
    basis.modules.push_back(std::move(mb));
  }
  return basis;
}

TensorFile ProjectedToFile(const ProjectedGradients& p) {
  TensorFile file(PayloadKind::kProjected);
  file.AddMatrix("values", p.values);
  file.attrs()["normalized"] = p.normalized;
  file.attrs()["basis_fingerprint"] = p.basis_fingerprint;
  file.attrs()["doc_ids"] = p.doc_ids;
  return file;
}

ProjectedGradients ProjectedFromFile(const TensorFile& file) {
  file.ExpectKind(PayloadKind::kProjected);
  ProjectedGradients p;
  p.values = file.Matrix("values");
  try {
    p.normalized = file.attrs().at("normalized").get<bool>();
    p.basis_fingerprint = file.attrs().at("basis_fingerprint").get<std::string>();
    p.doc_ids = file.attrs().at("doc_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("projected metadata: ") + e.what());
  }
  return p;
}

}  // namespace gatoms
