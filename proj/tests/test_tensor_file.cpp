#include "gatoms/tensor_file.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cstring>
#include <limits>

using namespace gatoms;

namespace {

GradientSet SmallSet() {
  GradientSet gs;
  gs.registry = ModuleRegistry::Contiguous({{"q", 2, 3}, {"v", 1, 2}});
  gs.values = RowMatrix(3, 8);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 8; ++j) gs.values(i, j) = 0.25 * i - 0.5 * j + 1e-3 * i * j;
  gs.doc_ids = {"a", "b", "c"};
  return gs;
}

ErrorKind DecodeError(const std::vector<unsigned char>& bytes) {
  try {
    DecodeTensorFile(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("decode unexpectedly succeeded");
  return ErrorKind::kIo;
}

// Re-encodes with a hand-edited metadata block.
std::vector<unsigned char> WithMetadata(const std::vector<unsigned char>& bytes, const std::string& meta) {
  std::uint32_t old_len = 0;
  std::memcpy(&old_len, bytes.data() + 8, 4);
  std::vector<unsigned char> out(bytes.begin(), bytes.begin() + 8);
  const auto len = static_cast<std::uint32_t>(meta.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(len >> (8 * i)));
  out.insert(out.end(), meta.begin(), meta.end());
  out.insert(out.end(), bytes.begin() + 12 + old_len, bytes.end());
  return out;
}

std::string MetadataOf(const std::vector<unsigned char>& bytes) {
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  return std::string(bytes.begin() + 12, bytes.begin() + 12 + len);
}

}  // namespace

TEST_CASE("registry layout") {
  const auto r = ModuleRegistry::Contiguous({{"q", 2, 3}, {"v", 1, 2}});
  CHECK(r.d() == 8);
  CHECK(r.module(1).offset == 6);
  CHECK_NOTHROW(r.Validate());
  CHECK(ModuleRegistry::FromJson(r.ToJson()) == r);
  CHECK(r.Fingerprint() == ModuleRegistry::FromJson(r.ToJson()).Fingerprint());

  SUBCASE("gap between modules") {
    ModuleRegistry bad({{"q", 2, 3, 0}, {"v", 1, 2, 7}}, 9);
    CHECK_THROWS_AS(bad.Validate(), Error);
    try {
      bad.Validate();
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kLayout);
      CHECK(std::string(e.what()).find("'v'") != std::string::npos);
    }
  }
  SUBCASE("d disagrees with module sizes") {
    ModuleRegistry bad({{"q", 2, 3, 0}}, 7);
    CHECK_THROWS_WITH_AS(bad.Validate(), doctest::Contains("d = 7"), Error);
  }
  SUBCASE("duplicate names") {
    ModuleRegistry bad({{"q", 1, 1, 0}, {"q", 1, 1, 1}}, 2);
    CHECK_THROWS_WITH_AS(bad.Validate(), doctest::Contains("duplicate"), Error);
  }
}

TEST_CASE("gradient set validation") {
  auto gs = SmallSet();
  CHECK_NOTHROW(ValidateGradientSet(gs));

  SUBCASE("non-finite entry") {
    gs.values(1, 4) = std::numeric_limits<double>::quiet_NaN();
    try {
      ValidateGradientSet(gs);
      FAIL("expected a finiteness error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kFiniteness);
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
  }
  SUBCASE("doc id count") {
    gs.doc_ids.pop_back();
    CHECK_THROWS_AS(ValidateGradientSet(gs), Error);
  }
  SUBCASE("duplicate doc ids") {
    gs.doc_ids[2] = "a";
    CHECK_THROWS_WITH_AS(ValidateGradientSet(gs), doctest::Contains("duplicate doc_id"), Error);
  }
  SUBCASE("width mismatch") {
    gs.values.conservativeResize(3, 7);
    try {
      ValidateGradientSet(gs);
      FAIL("expected a layout error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kLayout);
    }
  }
}

TEST_CASE("round trip is exact and rewrites are byte-identical") {
  testutil::TempDir dir("tf");
  auto gs = SmallSet();
  gs.values(0, 0) = -0.0;
  gs.values(2, 7) = std::numeric_limits<double>::denorm_min();
  gs.values(1, 1) = 1e308;
  WriteGradientSet(dir / "g.gat", gs);
  const auto back = ReadGradientSet(dir / "g.gat");
  CHECK(back.registry == gs.registry);
  CHECK(back.doc_ids == gs.doc_ids);
  CHECK(std::memcmp(back.values.data(), gs.values.data(), sizeof(double) * 24) == 0);
  CHECK(std::signbit(back.values(0, 0)));

  WriteGradientSet(dir / "g2.gat", back);
  CHECK(testutil::ReadBytes(dir / "g.gat") == testutil::ReadBytes(dir / "g2.gat"));

  const auto file = ReadTensorFile(dir / "g.gat");
  CHECK(file.attrs()["reduction"] == "sum");
  CHECK(file.header().byte_length == 24 * 8);
}

TEST_CASE("byte layout") {
  TensorFile f(PayloadKind::kCodes);
  const double v[2] = {1.0, -2.0};
  f.Add("x", {2}, v);
  const auto bytes = EncodeTensorFile(f.header(), f.payload());
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "GATOMS01");
  const auto meta = nlohmann::json::parse(MetadataOf(bytes));
  CHECK(meta["payload_kind"] == "codes");
  CHECK(meta["dtype"] == "f64");
  CHECK(meta["byte_length"] == 16);
  CHECK(meta["arrays"][0]["shape"] == nlohmann::json::array({2}));
  // 1.0 little-endian is 00 .. 00 f0 3f.
  const auto n = bytes.size();
  CHECK(bytes[n - 16 + 6] == 0xf0);
  CHECK(bytes[n - 16 + 7] == 0x3f);
  CHECK(bytes[n - 1] == 0xc0);
}

TEST_CASE("decode errors name the problem") {
  const auto good = EncodeTensorFile(GradientSetToFile(SmallSet()).header(), GradientSetToFile(SmallSet()).payload());

  CHECK(DecodeError({}) == ErrorKind::kCorruption);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(DecodeError(bad_magic) == ErrorKind::kFormat);
  auto truncated = good;
  truncated.pop_back();
  CHECK(DecodeError(truncated) == ErrorKind::kCorruption);
  auto trailing = good;
  trailing.push_back(0);
  CHECK(DecodeError(trailing) == ErrorKind::kCorruption);
  CHECK(DecodeError(WithMetadata(good, "{not json")) == ErrorKind::kParse);

  auto meta = nlohmann::json::parse(MetadataOf(good));
  meta["byte_length"] = 8;
  CHECK(DecodeError(WithMetadata(good, meta.dump())) == ErrorKind::kShape);
  meta = nlohmann::json::parse(MetadataOf(good));
  meta["payload_kind"] = "weights";
  CHECK(DecodeError(WithMetadata(good, meta.dump())) == ErrorKind::kKind);
  meta = nlohmann::json::parse(MetadataOf(good));
  meta["dtype"] = "f32";
  CHECK(DecodeError(WithMetadata(good, meta.dump())) == ErrorKind::kParse);
}

TEST_CASE("payload kind is checked on load") {
  const auto file = GradientSetToFile(SmallSet());
  try {
    file.ExpectKind(PayloadKind::kBasis);
    FAIL("expected a kind error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kKind);
    CHECK(std::string(e.what()).find("gradients") != std::string::npos);
  }
}

TEST_CASE("registry width disagreeing with payload is a layout error") {
  auto file = GradientSetToFile(SmallSet());
  auto reg = file.attrs()["registry"];
  reg["d"] = 9;
  reg["modules"][1]["in_dim"] = 3;
  file.attrs()["registry"] = reg;
  try {
    GradientSetFromFile(file);
    FAIL("expected a layout error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kLayout);
  }
}

TEST_CASE("missing file is an io error with the path") {
  try {
    ReadTensorFile("/nonexistent/dir/x.gat");
    FAIL("expected an io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIo);
    CHECK(std::string(e.what()).find("/nonexistent/dir/x.gat") != std::string::npos);
  }
}

TEST_CASE("kfac statistics round trip") {
  testutil::TempDir dir("kfac");
  std::mt19937_64 rng(3);
  const auto reg = ModuleRegistry::Contiguous({{"m", 2, 3}});
  const auto stats = testutil::StatsFromFactors(reg, {{testutil::RandomSpd(3, rng), testutil::RandomSpd(2, rng)}}, 17);
  WriteKfacStats(dir / "k.gat", stats);
  const auto back = ReadKfacStats(dir / "k.gat");
  CHECK(back.token_count == 17);
  CHECK(back.registry == reg);
  CHECK(back.modules[0].input_moment == stats.modules[0].input_moment);
  CHECK(back.modules[0].output_moment == stats.modules[0].output_moment);
}

TEST_CASE("fnv digest") {
  // Reference values for FNV-1a 64.
  CHECK(Fnv1a64("", 0) == 0xcbf29ce484222325ULL);
  CHECK(Fnv1a64("a", 1) == 0xaf63dc4c8601ec8cULL);
  CHECK(HexDigest(0xabcULL) == "0000000000000abc");
}
