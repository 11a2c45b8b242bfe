#pragma once

#include "gatoms/common.hpp"
#include "gatoms/tensor_file.hpp"

#include <filesystem>

namespace gatoms {

// How unprojection treats the sqrt(lambda + eps) preconditioning factor.
enum class PreconditioningMode {
  kInvert,  // multiply back: full inverse of the projection
  kKeep,    // stay in preconditioned units (natural-gradient style step)
};

std::string PreconditioningModeName(PreconditioningMode mode);
PreconditioningMode ParsePreconditioningMode(std::string_view name);

// A full parameter-space direction recovered from an atom.
struct SteeringVector {
  Vector values;  // length d
  std::string registry_fingerprint;
  std::int64_t source_atom = -1;
  PreconditioningMode mode = PreconditioningMode::kInvert;
  double raw_norm = 0.0;  // norm before RescaleToUnitNorm; 0 if never rescaled
};

// Scales values to unit L2 norm and records the original norm. A zero vector
// is left unchanged.
void RescaleToUnitNorm(SteeringVector& v);

TensorFile SteeringVectorToFile(const SteeringVector& v);
SteeringVector SteeringVectorFromFile(const TensorFile& file);

}  // namespace gatoms
