#pragma once

// Binary container shared by every pipeline stage and by external exporters.
//
// Layout (all integers little-endian):
//   [8 bytes]  magic "GATOMS01"
//   [u32]      metadata length in bytes
//   [bytes]    metadata, UTF-8 JSON
//   [f64 * n]  payload, little-endian IEEE-754 doubles
//
// The metadata object always carries "payload_kind", "dtype" ("f64"),
// "arrays" (ordered list of {name, shape}), "byte_length" and "attrs".
// The payload is the concatenation of the declared arrays in order, each
// flattened row-major.

#include "gatoms/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gatoms {

inline constexpr std::string_view kMagic = "GATOMS01";

enum class PayloadKind {
  kGradients,
  kKfacStats,
  kBasis,
  kProjected,
  kDictionary,
  kCodes,
  kModel,
  kSteering,
};

std::string PayloadKindName(PayloadKind kind);
PayloadKind ParsePayloadKind(std::string_view name);

struct ModuleSpec {
  std::string name;
  std::int64_t out_dim = 0;
  std::int64_t in_dim = 0;
  std::int64_t offset = 0;

  std::int64_t size() const { return out_dim * in_dim; }
  bool operator==(const ModuleSpec&) const = default;
};

class ModuleRegistry {
 public:
  ModuleRegistry() = default;
  ModuleRegistry(std::vector<ModuleSpec> modules, std::int64_t d);

  // Lays modules out contiguously in the given order.
  static ModuleRegistry Contiguous(const std::vector<std::tuple<std::string, std::int64_t, std::int64_t>>& shapes);

  const std::vector<ModuleSpec>& modules() const { return modules_; }
  const ModuleSpec& module(std::size_t i) const { return modules_.at(i); }
  std::size_t size() const { return modules_.size(); }
  std::int64_t d() const { return d_; }

  // Throws Error(kLayout) naming the first violated invariant.
  void Validate() const;

  nlohmann::json ToJson() const;
  static ModuleRegistry FromJson(const nlohmann::json& j);
  std::string Fingerprint() const;

  bool operator==(const ModuleRegistry&) const = default;

 private:
  std::vector<ModuleSpec> modules_;
  std::int64_t d_ = 0;
};

struct GradientSet {
  ModuleRegistry registry;
  RowMatrix values;  // N x d
  std::vector<std::string> doc_ids;

  std::int64_t num_docs() const { return values.rows(); }
};

void ValidateGradientSet(const GradientSet& gs);

struct ArraySpec {
  std::string name;
  std::vector<std::int64_t> shape;

  std::int64_t count() const;
  bool operator==(const ArraySpec&) const = default;
};

struct TensorFileHeader {
  PayloadKind kind = PayloadKind::kGradients;
  std::vector<ArraySpec> arrays;
  nlohmann::json attrs = nlohmann::json::object();
  std::uint64_t byte_length = 0;  // filled on write
};

class TensorFile {
 public:
  TensorFile() = default;
  explicit TensorFile(PayloadKind kind) { header_.kind = kind; }
  TensorFile(TensorFileHeader header, std::vector<double> payload);

  const TensorFileHeader& header() const { return header_; }
  PayloadKind kind() const { return header_.kind; }
  nlohmann::json& attrs() { return header_.attrs; }
  const nlohmann::json& attrs() const { return header_.attrs; }
  const std::vector<double>& payload() const { return payload_; }

  void Add(std::string name, std::vector<std::int64_t> shape, std::span<const double> values);
  void AddMatrix(std::string name, const Eigen::Ref<const RowMatrix>& m);
  void AddVector(std::string name, const Eigen::Ref<const Vector>& v);

  bool Has(std::string_view name) const;
  const ArraySpec& Spec(std::string_view name) const;
  std::span<const double> Array(std::string_view name) const;
  RowMatrix Matrix(std::string_view name) const;
  gatoms::Vector VectorArray(std::string_view name) const;

  // Throws Error(kKind) if the file holds a different payload kind.
  void ExpectKind(PayloadKind kind) const;

 private:
  std::int64_t OffsetOf(std::string_view name) const;

  TensorFileHeader header_;
  std::vector<double> payload_;
};

std::vector<unsigned char> EncodeTensorFile(const TensorFileHeader& header, std::span<const double> payload);
TensorFile DecodeTensorFile(std::span<const unsigned char> bytes);

void WriteTensorFile(const std::filesystem::path& path, const TensorFileHeader& header,
                     std::span<const double> payload);
void WriteTensorFile(const std::filesystem::path& path, const TensorFile& file);
TensorFile ReadTensorFile(const std::filesystem::path& path);

TensorFile GradientSetToFile(const GradientSet& gs);
GradientSet GradientSetFromFile(const TensorFile& file);
void WriteGradientSet(const std::filesystem::path& path, const GradientSet& gs);
GradientSet ReadGradientSet(const std::filesystem::path& path);

}  // namespace gatoms
