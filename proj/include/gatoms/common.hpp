#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gatoms {

// Per-document data is stored one row per document.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Selects the OpenMP kernel or its serial reference. Kernels whose work
// items are independent give bit-identical results under both.
enum class Exec { kSerial, kParallel };

// All library failures derive from Error; the kind names the violated
// contract so callers (and the CLI) can report it verbatim.
enum class ErrorKind {
  kIo,
  kFormat,
  kCorruption,
  kParse,
  kShape,
  kLayout,
  kFiniteness,
  kKind,
  kRegistry,
  kVocabulary,
  kRange,
  kDivergence,
  kConfig,
};

const char* ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(ErrorKindName(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// 64-bit FNV-1a; used for content fingerprints of artifacts.
std::uint64_t Fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ULL);
std::string HexDigest(std::uint64_t value);

}  // namespace gatoms
