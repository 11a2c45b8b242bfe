#include "gatoms/kfac_stats.hpp"

namespace gatoms {

KfacAccumulator::KfacAccumulator(const ModuleRegistry& registry) : registry_(registry) {
  for (const auto& m : registry_.modules()) {
    input_sums_.push_back(Matrix::Zero(m.in_dim, m.in_dim));
    output_sums_.push_back(Matrix::Zero(m.out_dim, m.out_dim));
  }
}

void KfacAccumulator::Add(std::size_t module, const Eigen::Ref<const Vector>& input,
                          const Eigen::Ref<const Vector>& delta) {
  const auto& spec = registry_.module(module);
  if (input.size() != spec.in_dim || delta.size() != spec.out_dim)
    throw Error(ErrorKind::kShape, "token statistics do not match module '" + spec.name + "'");
  input_sums_[module].noalias() += input * input.transpose();
  output_sums_[module].noalias() += delta * delta.transpose();
}

void KfacAccumulator::Merge(const KfacAccumulator& other) {
  for (std::size_t m = 0; m < input_sums_.size(); ++m) {
    input_sums_[m] += other.input_sums_[m];
    output_sums_[m] += other.output_sums_[m];
  }
  tokens_ += other.tokens_;
}

KfacStats KfacAccumulator::Finish() const {
  if (tokens_ == 0) throw Error(ErrorKind::kShape, "no tokens accumulated for KFAC statistics");
  KfacStats stats;
  stats.registry = registry_;
  stats.token_count = tokens_;
  const double inv = 1.0 / static_cast<double>(tokens_);
  for (std::size_t m = 0; m < input_sums_.size(); ++m)
    stats.modules.push_back({input_sums_[m] * inv, output_sums_[m] * inv});
  return stats;
}

TensorFile KfacStatsToFile(const KfacStats& stats) {
  TensorFile file(PayloadKind::kKfacStats);
  for (std::size_t m = 0; m < stats.modules.size(); ++m) {
    const auto& name = stats.registry.module(m).name;
    file.AddMatrix(name + ".A", stats.modules[m].input_moment);
    file.AddMatrix(name + ".S", stats.modules[m].output_moment);
  }
  file.attrs()["registry"] = stats.registry.ToJson();
  file.attrs()["token_count"] = stats.token_count;
  return file;
}

KfacStats KfacStatsFromFile(const TensorFile& file) {
  file.ExpectKind(PayloadKind::kKfacStats);
  KfacStats stats;
  try {
    stats.registry = ModuleRegistry::FromJson(file.attrs().at("registry"));
    stats.token_count = file.attrs().at("token_count").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("kfac metadata: ") + e.what());
  }
  stats.registry.Validate();
  for (const auto& m : stats.registry.modules()) {
    ModuleKfacStats s{file.Matrix(m.name + ".A"), file.Matrix(m.name + ".S")};
    if (s.input_moment.rows() != m.in_dim || s.input_moment.cols() != m.in_dim ||
        s.output_moment.rows() != m.out_dim || s.output_moment.cols() != m.out_dim)
      throw Error(ErrorKind::kLayout, "KFAC factor shapes do not match module '" + m.name + "'");
    stats.modules.push_back(std::move(s));
  }
  return stats;
}

void WriteKfacStats(const std::filesystem::path& path, const KfacStats& stats) {
  WriteTensorFile(path, KfacStatsToFile(stats));
}

KfacStats ReadKfacStats(const std::filesystem::path& path) { return KfacStatsFromFile(ReadTensorFile(path)); }

}  // namespace gatoms
