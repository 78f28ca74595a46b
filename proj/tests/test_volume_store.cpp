// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <functional>

#include "json.hpp"

#include "doctest.h"
#include "fmch/manifest.hpp"
#include "fmch/nifti.hpp"
#include "fmch/phantom.hpp"
#include "support.hpp"

using namespace fmch;
using fmch::testing::TempDir;
using Json = nlohmann::json;

namespace {

// Header assembled field by field from the NIfTI-1 layout, independent of
// write_nifti.
struct RawHeader {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{3, 2, 2, 2, 1, 1, 1, 1};
  std::int16_t datatype = 16;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
  float vox_offset = 352;
  float scl_slope = 1;
  float scl_inter = 0;
  const char* magic = "n+1";

  std::vector<std::uint8_t> bytes(const void* payload, std::size_t payload_bytes) const {
    std::vector<std::uint8_t> b(static_cast<std::size_t>(vox_offset) + payload_bytes, 0);
    auto put = [&](std::size_t off, const void* src, std::size_t n) { std::memcpy(b.data() + off, src, n); };
    put(0, &sizeof_hdr, 4);
    put(40, dim.data(), 16);
    put(70, &datatype, 2);
    put(72, &bitpix, 2);
    put(76, pixdim.data(), 32);
    put(108, &vox_offset, 4);
    put(112, &scl_slope, 4);
    put(116, &scl_inter, 4);
    put(344, magic, 4);
    put(static_cast<std::size_t>(vox_offset), payload, payload_bytes);
    return b;
  }
};

ErrorCode code_of(const std::vector<std::uint8_t>& bytes, std::string* field = nullptr) {
  try {
    nifti::read_nifti(bytes);
  } catch (const Error& e) {
    if (field) *field = e.field();
    return e.code();
  }
  FAIL("read_nifti accepted the input");
  return ErrorCode::Io;
}

const std::array<float, 8> kEight{1.5f, -2.0f, 0.0f, 3.25f, 1e-20f, -7.0f, 1e20f, 0.125f};

}  // namespace

TEST_CASE("read_nifti: hand-built headers") {
  SUBCASE("identity transfer, bit exact") {
    const auto img = nifti::read_nifti(RawHeader{}.bytes(kEight.data(), 32));
    CHECK(img.volume.dims == Dims3{2, 2, 2});
    CHECK(std::memcmp(img.volume.voxels.data(), kEight.data(), 32) == 0);
  }
  SUBCASE("scl_slope 2, scl_inter 1") {
    RawHeader h;
    h.scl_slope = 2.0f;
    h.scl_inter = 1.0f;
    const auto img = nifti::read_nifti(h.bytes(kEight.data(), 32));
    for (std::size_t i = 0; i < 8; ++i) CHECK(img.volume.voxels[i] == 2.0f * kEight[i] + 1.0f);
  }
  SUBCASE("slope 0 is treated as 1") {
    RawHeader h;
    h.scl_slope = 0.0f;
    h.scl_inter = 0.5f;
    const auto img = nifti::read_nifti(h.bytes(kEight.data(), 32));
    CHECK(img.volume.voxels[0] == 2.0f);
  }
  SUBCASE("uint8 and int16 payloads") {
    RawHeader h;
    h.dim = {3, 3, 1, 1, 1, 1, 1, 1};
    h.datatype = 2;
    h.bitpix = 8;
    const std::uint8_t u[3] = {0, 7, 255};
    auto img = nifti::read_nifti(h.bytes(u, 3));
    CHECK(img.volume.voxels == std::vector<float>{0, 7, 255});
    h.datatype = 4;
    h.bitpix = 16;
    const std::int16_t s[3] = {-32768, 5, 32767};
    img = nifti::read_nifti(h.bytes(s, 6));
    CHECK(img.volume.voxels == std::vector<float>{-32768, 5, 32767});
  }
  SUBCASE("axis order: dim[1] is the fastest index (W)") {
    RawHeader h;
    h.dim = {3, 4, 3, 2, 1, 1, 1, 1};
    h.pixdim = {1, 0.5f, 0.75f, 2.0f, 1, 1, 1, 1};
    std::vector<float> payload(24);
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(i);
    const auto img = nifti::read_nifti(h.bytes(payload.data(), 96));
    CHECK(img.volume.dims == Dims3{2, 3, 4});
    CHECK(img.volume.at(1, 2, 3) == 23.0f);
    CHECK(img.volume.at(0, 1, 0) == 4.0f);
    CHECK(img.spacing_mm == std::array<float, 3>{0.5f, 0.75f, 2.0f});
  }
  SUBCASE("vox_offset beyond 352 is honored") {
    RawHeader h;
    h.vox_offset = 400;
    const auto img = nifti::read_nifti(h.bytes(kEight.data(), 32));
    CHECK(img.volume.voxels[3] == 3.25f);
  }
  SUBCASE("dim[0] = 5 with trailing ones is accepted, otherwise DimOutOfRange") {
    RawHeader h;
    h.dim = {5, 2, 2, 2, 1, 1, 1, 1};
    CHECK(nifti::read_nifti(h.bytes(kEight.data(), 32)).volume.dims == Dims3{2, 2, 2});
    h.dim[4] = 2;
    std::string field;
    CHECK(code_of(h.bytes(kEight.data(), 32), &field) == ErrorCode::DimOutOfRange);
    CHECK(field == "dim[4]");
  }
}

TEST_CASE("read_nifti: each declared error names its field") {
  struct Case {
    const char* name;
    RawHeader h;
    ErrorCode code;
    const char* field;
  };
  std::vector<Case> cases;
  auto add = [&](const char* name, auto edit, ErrorCode code, const char* field) {
    RawHeader h;
    edit(h);
    cases.push_back({name, h, code, field});
  };
  add("magic", [](RawHeader& h) { h.magic = "n+2"; }, ErrorCode::BadMagic, "magic");
  add("pair layout", [](RawHeader& h) { h.magic = "ni1"; }, ErrorCode::UnsupportedDatatype, "magic");
  add("sizeof_hdr", [](RawHeader& h) { h.sizeof_hdr = 540; }, ErrorCode::BadMagic, "sizeof_hdr");
  add("datatype 64", [](RawHeader& h) { h.datatype = 64, h.bitpix = 64; }, ErrorCode::UnsupportedDatatype, "datatype");
  add("bitpix", [](RawHeader& h) { h.bitpix = 16; }, ErrorCode::UnsupportedDatatype, "bitpix");
  add("dim 0", [](RawHeader& h) { h.dim[2] = 0; }, ErrorCode::DimOutOfRange, "dim[2]");
  add("dim 513", [](RawHeader& h) { h.dim[3] = 513; }, ErrorCode::DimOutOfRange, "dim[3]");
  add("rank 0", [](RawHeader& h) { h.dim[0] = 0; }, ErrorCode::DimOutOfRange, "dim[0]");
  add("vox_offset", [](RawHeader& h) { h.vox_offset = 348; }, ErrorCode::BadMagic, "vox_offset");
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::string field;
    CHECK(code_of(c.h.bytes(kEight.data(), 32), &field) == c.code);
    CHECK(field == c.field);
  }

  auto full = RawHeader{}.bytes(kEight.data(), 32);
  full.pop_back();
  std::string field;
  CHECK(code_of(full, &field) == ErrorCode::TruncatedPayload);
  CHECK(field == "payload");
  CHECK(code_of(std::vector<std::uint8_t>(351, 0)) == ErrorCode::TruncatedPayload);

  RawHeader nan;
  nan.scl_slope = std::numeric_limits<float>::infinity();
  CHECK(code_of(nan.bytes(kEight.data(), 32)) == ErrorCode::NonFiniteVoxel);
  const float overflow[8] = {3e38f, 0, 0, 0, 0, 0, 0, 0};
  RawHeader big;
  big.scl_slope = 10.0f;
  CHECK(code_of(big.bytes(overflow, 32)) == ErrorCode::NonFiniteVoxel);
}

TEST_CASE("write_nifti: layout constants") {
  const auto one = nifti::write_nifti(Volume(Dims3{1, 1, 1}, 0.0f), {1, 1, 1});
  CHECK(one.size() == 356);
  CHECK(std::vector<std::uint8_t>(one.begin(), one.begin() + 4) == std::vector<std::uint8_t>{0x5C, 0x01, 0x00, 0x00});
  const auto h = nifti::parse_header(one);
  CHECK(h.datatype == 16);
  CHECK(h.scl_slope == 1.0f);
  CHECK(h.scl_inter == 0.0f);

  Volume bad(Dims3{1, 1, 2});
  bad.voxels[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(nifti::write_nifti(bad, {1, 1, 1}), Error);
  CHECK_THROWS_AS(nifti::write_nifti(Volume(Dims3{1, 1, 513}), {1, 1, 1}), Error);
}

TEST_CASE("codec round trip is bit exact") {
  Rng rng(11);
  for (int i = 0; i < 40; ++i) {
    const auto v = fmch::testing::random_volume(rng, 12);
    const std::array<float, 3> spacing{0.5f + static_cast<float>(rng.uniform()), 1.0f, 3.0f};
    const auto img = nifti::read_nifti(nifti::write_nifti(v, spacing));
    CHECK(img.volume.dims == v.dims);
    CHECK(fmch::testing::bit_equal(img.volume.voxels, v.voxels));
    CHECK(img.spacing_mm == spacing);
  }

  SUBCASE("phantom of seed 0 through a file") {
    TempDir dir("codec");
    const auto spec = phantom::generate_subject(0, 0, 0.5);
    const auto tissue = phantom::rasterize_tissue(spec, Dims3::cube(24));
    const auto v = phantom::render_contrast(tissue, phantom::default_contrast("c1"), 0);
    nifti::write_nifti_file(dir.path() / "golden.nii", v, {1, 1, 1});
    CHECK(fmch::testing::bit_equal(nifti::read_nifti_file(dir.path() / "golden.nii").volume.voxels, v.voxels));
  }
}

TEST_CASE("fuzzed inputs yield a volume or a declared error") {
  int valid = 0, declared = 0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto outcome = fmch::testing::classify_read(fmch::testing::fuzz_bytes(seed));
    CAPTURE(seed);
    REQUIRE(outcome != fmch::testing::FuzzOutcome::UndeclaredError);
    (outcome == fmch::testing::FuzzOutcome::Valid ? valid : declared)++;
  }
  // Both branches are exercised.
  CHECK(valid > 50);
  CHECK(declared > 500);
}

// ---- manifest ---------------------------------------------------------------

namespace {

DatasetManifest small_manifest() {
  DatasetManifest m;
  m.shape = Dims3::cube(8);
  m.contrasts = {"c1", "c2"};
  for (const char* s : {"s1", "s2"})
    for (const char* c : {"c1", "c2"}) m.entries.push_back({s, c, 0, std::string(s) + "_" + c + ".nii", true, false});
  m.splits = {{"s1", Split::Train}, {"s2", Split::Test}};
  m.subjects["s1"].scale = 0.8;
  return m;
}

Json manifest_json(const DatasetManifest& m) { return Json::parse(dump_manifest(m)); }

ErrorCode parse_code(const Json& doc, std::string* field = nullptr) {
  try {
    parse_manifest(doc.dump(), ".", {.check_files = false});
  } catch (const Error& e) {
    if (field) *field = e.field();
    return e.code();
  }
  FAIL("manifest accepted");
  return ErrorCode::Io;
}

}  // namespace

TEST_CASE("manifest: save/load identity and errors") {
  TempDir dir("manifest");
  const auto m = small_manifest();
  for (const auto& e : m.entries) nifti::write_nifti_file(dir.path() / e.path, Volume(Dims3::cube(8)), {1, 1, 1});
  save_manifest(m, dir.path() / "manifest.json");
  const auto back = load_manifest(dir.path() / "manifest.json");
  CHECK(back == m);
  CHECK(back.subject_ids() == std::vector<std::string>{"s1", "s2"});
  CHECK(back.subjects_in(Split::Test) == std::vector<std::string>{"s2"});
  CHECK(back.find("s2", "c2", 0) != nullptr);
  CHECK(back.find("s2", "c3", 0) == nullptr);

  SUBCASE("key order does not matter") {
    const auto doc = manifest_json(m);
    std::string reversed = "{";
    std::vector<std::string> keys;
    for (const auto& [k, v] : doc.items()) keys.push_back(k);
    for (auto k = keys.rbegin(); k != keys.rend(); ++k)
      reversed += (k == keys.rbegin() ? "" : ",") + Json(*k).dump() + ":" + doc[*k].dump();
    reversed += "}";
    CHECK(parse_manifest(reversed, dir.path()) == m);
  }
  SUBCASE("missing image file") {
    std::filesystem::remove(dir.path() / "s2_c1.nii");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path() / "manifest.json"), doctest::Contains("MissingFile"), Error);
  }
  SUBCASE("missing manifest") {
    CHECK_THROWS_AS(load_manifest(dir.path() / "none.json"), Error);
  }
}

TEST_CASE("manifest: schema violations and split leaks") {
  const auto base = manifest_json(small_manifest());

  auto doc = base;
  doc["splits"]["test"].push_back("s1");
  std::string field;
  CHECK(parse_code(doc, &field) == ErrorCode::SplitLeak);
  CHECK(field == "s1");

  struct Edit {
    const char* name;
    std::function<void(Json&)> apply;
  };
  const std::vector<Edit> edits{
      {"no schema", [](Json& d) { d.erase("schema"); }},
      {"schema 2", [](Json& d) { d["schema"] = 2; }},
      {"shape type", [](Json& d) { d["shape"] = "8x8x8"; }},
      {"entry missing path", [](Json& d) { d["entries"][0].erase("path"); }},
      {"timepoint string", [](Json& d) { d["entries"][0]["timepoint"] = "0"; }},
      {"negative timepoint", [](Json& d) { d["entries"][0]["timepoint"] = -1; }},
      {"unknown contrast", [](Json& d) { d["entries"][0]["contrast_id"] = "c9"; }},
      {"duplicate entry", [](Json& d) { d["entries"].push_back(d["entries"][0]); }},
      {"subject without split", [](Json& d) { d["splits"]["test"] = Json::array(); }},
      {"unknown split", [](Json& d) { d["splits"]["holdout"] = Json::array(); }},
      {"train subject without entries", [](Json& d) { d["splits"]["train"].push_back("s9"); }},
      {"health not boolean", [](Json& d) { d["entries"][0]["health_status"] = 1; }},
      {"not json", [](Json& d) { d = "not an object"; }},
  };
  for (const auto& e : edits) {
    CAPTURE(e.name);
    auto d = base;
    e.apply(d);
    CHECK(parse_code(d) == ErrorCode::SchemaViolation);
  }
}

TEST_CASE("manifest: empty entry list is a valid manifest with zero subjects") {
  DatasetManifest m;
  m.shape = Dims3::cube(8);
  m.contrasts = {"c1"};
  const auto back = parse_manifest(dump_manifest(m), ".");
  CHECK(back.entries.empty());
  CHECK(back.subject_ids().empty());
}

TEST_CASE("manifest: phantom seed 0, 4 subjects x 2 contrasts") {
  TempDir dir("phantom_manifest");
  phantom::PhantomOptions o;
  o.shape = Dims3::cube(8);
  const auto m = phantom::build_phantom_dataset(o, dir.path());
  CHECK(m.entries.size() == 8);
  CHECK(m.subject_ids().size() == 4);
  CHECK(load_manifest(dir.path() / "manifest.json") == m);
  // Every listed file decodes at the manifest shape.
  for (const auto& e : m.entries) CHECK(nifti::read_nifti_file(m.resolve(e.path)).volume.dims == m.shape);
}
