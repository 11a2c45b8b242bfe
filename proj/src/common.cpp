#include "gatoms/common.hpp"

#include <cstdio>

namespace gatoms {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kCorruption: return "corruption";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kLayout: return "layout";
    case ErrorKind::kFiniteness: return "finiteness";
    case ErrorKind::kKind: return "kind";
    case ErrorKind::kRegistry: return "registry";
    case ErrorKind::kVocabulary: return "vocabulary";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kConfig: return "config";
  }
  return "unknown";
}

std::uint64_t Fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = seed;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 1099511628211ULL;
  }
  return hash;
}

std::string HexDigest(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace gatoms
