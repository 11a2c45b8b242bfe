#include "gatoms/steering_vector.hpp"

namespace gatoms {

std::string PreconditioningModeName(PreconditioningMode mode) {
  return mode == PreconditioningMode::kInvert ? "invert" : "keep";
}

PreconditioningMode ParsePreconditioningMode(std::string_view name) {
  if (name == "invert") return PreconditioningMode::kInvert;
  if (name == "keep") return PreconditioningMode::kKeep;
  throw Error(ErrorKind::kConfig, "unknown preconditioning mode '" + std::string(name) + "'");
}

void RescaleToUnitNorm(SteeringVector& v) {
  const double n = v.values.norm();
  v.raw_norm = n;
  if (n > 0) v.values /= n;
}

TensorFile SteeringVectorToFile(const SteeringVector& v) {
  TensorFile file(PayloadKind::kSteering);
  file.AddVector("values", v.values);
  file.attrs()["registry_fingerprint"] = v.registry_fingerprint;
  file.attrs()["source_atom"] = v.source_atom;
  file.attrs()["preconditioning_mode"] = PreconditioningModeName(v.mode);
  file.attrs()["raw_norm"] = v.raw_norm;
  return file;
}

SteeringVector SteeringVectorFromFile(const TensorFile& file) {
  file.ExpectKind(PayloadKind::kSteering);
  SteeringVector v;
  v.values = file.VectorArray("values");
  try {
    v.registry_fingerprint = file.attrs().at("registry_fingerprint").get<std::string>();
    v.source_atom = file.attrs().at("source_atom").get<std::int64_t>();
    v.mode = ParsePreconditioningMode(file.attrs().at("preconditioning_mode").get<std::string>());
    v.raw_norm = file.attrs().value("raw_norm", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("steering metadata: ") + e.what());
  }
  return v;
}

}  // namespace gatoms
