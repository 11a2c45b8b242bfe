#include "gatoms/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace gatoms {

namespace {

constexpr std::pair<PayloadKind, std::string_view> kKindNames[] = {
    {PayloadKind::kGradients, "gradients"}, {PayloadKind::kKfacStats, "kfac_stats"},
    {PayloadKind::kBasis, "basis"},         {PayloadKind::kProjected, "projected"},
    {PayloadKind::kDictionary, "dictionary"}, {PayloadKind::kCodes, "codes"},
    {PayloadKind::kModel, "model"},         {PayloadKind::kSteering, "steering"},
};

void PutU32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void PutF64(std::vector<unsigned char>& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double GetF64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

nlohmann::json HeaderJson(const TensorFileHeader& header, std::uint64_t byte_length) {
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& a : header.arrays) arrays.push_back({{"name", a.name}, {"shape", a.shape}});
  return {
      {"payload_kind", PayloadKindName(header.kind)},
      {"dtype", "f64"},
      {"arrays", arrays},
      {"byte_length", byte_length},
      {"attrs", header.attrs.is_null() ? nlohmann::json::object() : header.attrs},
  };
}

std::int64_t TotalCount(const std::vector<ArraySpec>& arrays) {
  std::int64_t total = 0;
  for (const auto& a : arrays) total += a.count();
  return total;
}

}  // namespace

std::string PayloadKindName(PayloadKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return std::string(name);
  return "unknown";
}

PayloadKind ParsePayloadKind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw Error(ErrorKind::kKind, "unknown payload_kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Registry

ModuleRegistry::ModuleRegistry(std::vector<ModuleSpec> modules, std::int64_t d)
    : modules_(std::move(modules)), d_(d) {}

ModuleRegistry ModuleRegistry::Contiguous(
    const std::vector<std::tuple<std::string, std::int64_t, std::int64_t>>& shapes) {
  std::vector<ModuleSpec> modules;
  std::int64_t offset = 0;
  for (const auto& [name, out, in] : shapes) {
    modules.push_back({name, out, in, offset});
    offset += out * in;
  }
  return ModuleRegistry(std::move(modules), offset);
}

void ModuleRegistry::Validate() const {
  if (modules_.empty()) throw Error(ErrorKind::kLayout, "registry has no modules");
  std::set<std::string> names;
  std::int64_t expected_offset = 0;
  for (const auto& m : modules_) {
    if (m.out_dim <= 0 || m.in_dim <= 0)
      throw Error(ErrorKind::kLayout, "module '" + m.name + "' has non-positive dimensions");
    if (!names.insert(m.name).second)
      throw Error(ErrorKind::kLayout, "duplicate module name '" + m.name + "'");
    if (m.offset != expected_offset)
      throw Error(ErrorKind::kLayout, "module '" + m.name + "' offset " + std::to_string(m.offset) +
                                          " is not contiguous (expected " + std::to_string(expected_offset) +
                                          ")");
    expected_offset += m.size();
  }
  if (expected_offset != d_)
    throw Error(ErrorKind::kLayout, "module sizes sum to " + std::to_string(expected_offset) +
                                        " but d = " + std::to_string(d_));
}

nlohmann::json ModuleRegistry::ToJson() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : modules_)
    mods.push_back({{"name", m.name}, {"out_dim", m.out_dim}, {"in_dim", m.in_dim}, {"offset", m.offset}});
  return {{"modules", mods}, {"d", d_}};
}

ModuleRegistry ModuleRegistry::FromJson(const nlohmann::json& j) {
  try {
    std::vector<ModuleSpec> modules;
    for (const auto& m : j.at("modules"))
      modules.push_back({m.at("name").get<std::string>(), m.at("out_dim").get<std::int64_t>(),
                         m.at("in_dim").get<std::int64_t>(), m.at("offset").get<std::int64_t>()});
    return ModuleRegistry(std::move(modules), j.at("d").get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("malformed registry: ") + e.what());
  }
}

std::string ModuleRegistry::Fingerprint() const {
  const std::string text = ToJson().dump();
  return HexDigest(Fnv1a64(text.data(), text.size()));
}

void ValidateGradientSet(const GradientSet& gs) {
  gs.registry.Validate();
  if (gs.values.cols() != gs.registry.d())
    throw Error(ErrorKind::kLayout, "gradient width " + std::to_string(gs.values.cols()) +
                                        " does not match registry d = " + std::to_string(gs.registry.d()));
  if (static_cast<std::int64_t>(gs.doc_ids.size()) != gs.values.rows())
    throw Error(ErrorKind::kShape, "doc_ids count " + std::to_string(gs.doc_ids.size()) + " != rows " +
                                       std::to_string(gs.values.rows()));
  std::set<std::string> seen;
  for (const auto& id : gs.doc_ids)
    if (!seen.insert(id).second) throw Error(ErrorKind::kLayout, "duplicate doc_id '" + id + "'");
  for (Eigen::Index i = 0; i < gs.values.rows(); ++i)
    if (!gs.values.row(i).allFinite())
      throw Error(ErrorKind::kFiniteness, "row " + std::to_string(i) + " (doc '" + gs.doc_ids[i] +
                                              "') has a non-finite entry");
}

// ---------------------------------------------------------------------------
// Container

std::int64_t ArraySpec::count() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

TensorFile::TensorFile(TensorFileHeader header, std::vector<double> payload)
    : header_(std::move(header)), payload_(std::move(payload)) {
  if (TotalCount(header_.arrays) != static_cast<std::int64_t>(payload_.size()))
    throw Error(ErrorKind::kShape, "declared shapes total " + std::to_string(TotalCount(header_.arrays)) +
                                       " values but payload has " + std::to_string(payload_.size()));
  header_.byte_length = payload_.size() * sizeof(double);
}

void TensorFile::Add(std::string name, std::vector<std::int64_t> shape, std::span<const double> values) {
  ArraySpec spec{std::move(name), std::move(shape)};
  if (spec.count() != static_cast<std::int64_t>(values.size()))
    throw Error(ErrorKind::kShape, "array '" + spec.name + "' shape does not match " +
                                       std::to_string(values.size()) + " values");
  if (Has(spec.name)) throw Error(ErrorKind::kShape, "duplicate array '" + spec.name + "'");
  payload_.insert(payload_.end(), values.begin(), values.end());
  header_.arrays.push_back(std::move(spec));
  header_.byte_length = payload_.size() * sizeof(double);
}

void TensorFile::AddMatrix(std::string name, const Eigen::Ref<const RowMatrix>& m) {
  RowMatrix copy = m;
  Add(std::move(name), {copy.rows(), copy.cols()}, std::span<const double>(copy.data(), copy.size()));
}

void TensorFile::AddVector(std::string name, const Eigen::Ref<const gatoms::Vector>& v) {
  gatoms::Vector copy = v;
  Add(std::move(name), {copy.size()}, std::span<const double>(copy.data(), copy.size()));
}

bool TensorFile::Has(std::string_view name) const {
  return std::any_of(header_.arrays.begin(), header_.arrays.end(),
                     [&](const ArraySpec& a) { return a.name == name; });
}

const ArraySpec& TensorFile::Spec(std::string_view name) const {
  for (const auto& a : header_.arrays)
    if (a.name == name) return a;
  throw Error(ErrorKind::kShape, "missing array '" + std::string(name) + "'");
}

std::int64_t TensorFile::OffsetOf(std::string_view name) const {
  std::int64_t offset = 0;
  for (const auto& a : header_.arrays) {
    if (a.name == name) return offset;
    offset += a.count();
  }
  throw Error(ErrorKind::kShape, "missing array '" + std::string(name) + "'");
}

std::span<const double> TensorFile::Array(std::string_view name) const {
  const auto offset = OffsetOf(name);
  return std::span<const double>(payload_).subspan(offset, Spec(name).count());
}

RowMatrix TensorFile::Matrix(std::string_view name) const {
  const auto& spec = Spec(name);
  if (spec.shape.size() != 2)
    throw Error(ErrorKind::kShape, "array '" + std::string(name) + "' is not a matrix");
  const auto values = Array(name);
  return Eigen::Map<const RowMatrix>(values.data(), spec.shape[0], spec.shape[1]);
}

gatoms::Vector TensorFile::VectorArray(std::string_view name) const {
  const auto values = Array(name);
  return Eigen::Map<const gatoms::Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void TensorFile::ExpectKind(PayloadKind kind) const {
  if (header_.kind != kind)
    throw Error(ErrorKind::kKind, "expected payload_kind '" + PayloadKindName(kind) + "' but file holds '" +
                                      PayloadKindName(header_.kind) + "'");
}

std::vector<unsigned char> EncodeTensorFile(const TensorFileHeader& header, std::span<const double> payload) {
  if (TotalCount(header.arrays) != static_cast<std::int64_t>(payload.size()))
    throw Error(ErrorKind::kShape, "declared shapes total " + std::to_string(TotalCount(header.arrays)) +
                                       " values but payload has " + std::to_string(payload.size()));
  const std::string meta = HeaderJson(header, payload.size() * sizeof(double)).dump();
  std::vector<unsigned char> out;
  out.reserve(kMagic.size() + 4 + meta.size() + payload.size() * 8);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  PutU32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  for (double x : payload) PutF64(out, x);
  return out;
}

TensorFile DecodeTensorFile(std::span<const unsigned char> bytes) {
  if (bytes.size() < kMagic.size())
    throw Error(ErrorKind::kCorruption, "file shorter than the magic tag (" + std::to_string(bytes.size()) +
                                            " bytes)");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw Error(ErrorKind::kFormat, "bad magic; expected GATOMS01");
  if (bytes.size() < kMagic.size() + 4) throw Error(ErrorKind::kCorruption, "truncated metadata length");
  std::uint32_t meta_len = 0;
  for (int i = 0; i < 4; ++i) meta_len |= static_cast<std::uint32_t>(bytes[kMagic.size() + i]) << (8 * i);
  const std::size_t meta_begin = kMagic.size() + 4;
  if (bytes.size() < meta_begin + meta_len) throw Error(ErrorKind::kCorruption, "truncated metadata block");

  nlohmann::json meta;
  TensorFileHeader header;
  try {
    meta = nlohmann::json::parse(bytes.begin() + meta_begin, bytes.begin() + meta_begin + meta_len);
    if (meta.at("dtype").get<std::string>() != "f64")
      throw Error(ErrorKind::kParse, "unsupported dtype '" + meta.at("dtype").get<std::string>() + "'");
    header.kind = ParsePayloadKind(meta.at("payload_kind").get<std::string>());
    for (const auto& a : meta.at("arrays"))
      header.arrays.push_back({a.at("name").get<std::string>(), a.at("shape").get<std::vector<std::int64_t>>()});
    header.byte_length = meta.at("byte_length").get<std::uint64_t>();
    header.attrs = meta.value("attrs", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("malformed metadata: ") + e.what());
  }

  const std::uint64_t declared = static_cast<std::uint64_t>(TotalCount(header.arrays)) * 8;
  if (declared != header.byte_length)
    throw Error(ErrorKind::kShape, "declared shapes need " + std::to_string(declared) +
                                       " bytes but byte_length is " + std::to_string(header.byte_length));
  const std::size_t payload_begin = meta_begin + meta_len;
  const std::size_t available = bytes.size() - payload_begin;
  if (available < header.byte_length)
    throw Error(ErrorKind::kCorruption, "payload truncated: " + std::to_string(available) + " of " +
                                            std::to_string(header.byte_length) + " bytes");
  if (available > header.byte_length)
    throw Error(ErrorKind::kCorruption, "trailing bytes after payload");

  std::vector<double> payload(header.byte_length / 8);
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = GetF64(bytes.data() + payload_begin + 8 * i);
  return TensorFile(std::move(header), std::move(payload));
}

void WriteTensorFile(const std::filesystem::path& path, const TensorFileHeader& header,
                     std::span<const double> payload) {
  const auto bytes = EncodeTensorFile(header, payload);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

void WriteTensorFile(const std::filesystem::path& path, const TensorFile& file) {
  WriteTensorFile(path, file.header(), file.payload());
}

TensorFile ReadTensorFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DecodeTensorFile(bytes);
}

// ---------------------------------------------------------------------------
// GradientSet <-> file

TensorFile GradientSetToFile(const GradientSet& gs) {
  TensorFile file(PayloadKind::kGradients);
  file.AddMatrix("values", gs.values);
  file.attrs()["registry"] = gs.registry.ToJson();
  file.attrs()["doc_ids"] = gs.doc_ids;
  file.attrs()["reduction"] = "sum";
  return file;
}

GradientSet GradientSetFromFile(const TensorFile& file) {
  file.ExpectKind(PayloadKind::kGradients);
  GradientSet gs;
  try {
    gs.registry = ModuleRegistry::FromJson(file.attrs().at("registry"));
    gs.doc_ids = file.attrs().at("doc_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("gradient metadata: ") + e.what());
  }
  const auto& spec = file.Spec("values");
  if (spec.shape.size() != 2 || spec.shape[1] != gs.registry.d())
    throw Error(ErrorKind::kLayout, "gradient payload width does not match registry d = " +
                                        std::to_string(gs.registry.d()));
  gs.values = file.Matrix("values");
  return gs;
}

void WriteGradientSet(const std::filesystem::path& path, const GradientSet& gs) {
  ValidateGradientSet(gs);
  WriteTensorFile(path, GradientSetToFile(gs));
}

GradientSet ReadGradientSet(const std::filesystem::path& path) {
  auto gs = GradientSetFromFile(ReadTensorFile(path));
  ValidateGradientSet(gs);
  return gs;
}

}  // namespace gatoms
