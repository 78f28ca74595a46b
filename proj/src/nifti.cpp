// SPDX-License-Identifier: Apache-2.0
#include "fmch/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

namespace fmch::nifti {
namespace {

static_assert(std::endian::native == std::endian::little, "codec assumes a little-endian host");

// Field offsets within the 348-byte header.
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffMagic = 344;

template <class T>
T load(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

template <class T>
void store(std::vector<std::uint8_t>& bytes, std::size_t offset, T value) {
  std::memcpy(bytes.data() + offset, &value, sizeof(T));
}

[[noreturn]] void fail(ErrorCode code, const std::string& field, const std::string& what) {
  throw Error(code, field, field + ": " + what);
}

int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kFloat32: return 4;
    default: return 0;
  }
}

}  // namespace

NiftiHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < static_cast<std::size_t>(kMinVoxOffset))
    fail(ErrorCode::TruncatedPayload, "header", "need at least 352 bytes, got " + std::to_string(bytes.size()));

  NiftiHeader h;
  h.sizeof_hdr = load<std::int32_t>(bytes, kOffSizeofHdr);
  if (h.sizeof_hdr != kHeaderSize)
    fail(ErrorCode::BadMagic, "sizeof_hdr", "expected 348, got " + std::to_string(h.sizeof_hdr));

  std::memcpy(h.magic.data(), bytes.data() + kOffMagic, 4);
  const bool single_file = h.magic == std::array<char, 4>{'n', '+', '1', '\0'};
  const bool pair_file = h.magic == std::array<char, 4>{'n', 'i', '1', '\0'};
  if (pair_file) fail(ErrorCode::UnsupportedDatatype, "magic", "header/image pair layout (ni1) is not supported");
  if (!single_file) fail(ErrorCode::BadMagic, "magic", "expected \"n+1\\0\"");

  for (std::size_t i = 0; i < 8; ++i) h.dim[i] = load<std::int16_t>(bytes, kOffDim + 2 * i);
  for (std::size_t i = 0; i < 8; ++i) h.pixdim[i] = load<float>(bytes, kOffPixdim + 4 * i);
  h.datatype = load<std::int16_t>(bytes, kOffDatatype);
  h.bitpix = load<std::int16_t>(bytes, kOffBitpix);
  h.vox_offset = load<float>(bytes, kOffVoxOffset);
  h.scl_slope = load<float>(bytes, kOffSclSlope);
  h.scl_inter = load<float>(bytes, kOffSclInter);

  const int rank = h.dim[0];
  if (rank < 1 || rank > 7) fail(ErrorCode::DimOutOfRange, "dim[0]", "rank " + std::to_string(rank) + " outside [1,7]");
  // Dimensions beyond dim[0] are implicitly 1.
  for (int i = rank + 1; i <= 3; ++i) h.dim[i] = 1;
  for (int i = 1; i <= 3; ++i) {
    if (h.dim[i] < 1 || h.dim[i] > kMaxDim)
      fail(ErrorCode::DimOutOfRange, "dim[" + std::to_string(i) + "]",
           std::to_string(h.dim[i]) + " outside [1,512]");
  }
  for (int i = 4; i <= rank; ++i) {
    if (h.dim[i] != 1)
      fail(ErrorCode::DimOutOfRange, "dim[" + std::to_string(i) + "]",
           "trailing dimension must be 1, got " + std::to_string(h.dim[i]));
  }
  for (int i = 1; i <= 3; ++i) {
    if (i > rank) {
      h.pixdim[i] = 1.0f;
      continue;
    }
    if (!std::isfinite(h.pixdim[i]) || h.pixdim[i] <= 0.0f)
      fail(ErrorCode::DimOutOfRange, "pixdim[" + std::to_string(i) + "]", "spacing must be positive and finite");
  }

  const int bpv = bytes_per_voxel(h.datatype);
  if (bpv == 0) fail(ErrorCode::UnsupportedDatatype, "datatype", "code " + std::to_string(h.datatype) + " not in {2,4,16}");
  if (h.bitpix != 8 * bpv)
    fail(ErrorCode::UnsupportedDatatype, "bitpix",
         std::to_string(h.bitpix) + " inconsistent with datatype " + std::to_string(h.datatype));

  if (!std::isfinite(h.vox_offset) || h.vox_offset < static_cast<float>(kMinVoxOffset) ||
      h.vox_offset != std::floor(h.vox_offset))
    fail(ErrorCode::BadMagic, "vox_offset", "must be an integer >= 352");

  const double payload_end =
      static_cast<double>(h.vox_offset) + static_cast<double>(h.volume_dims().count()) * bpv;
  if (payload_end > static_cast<double>(bytes.size()))
    fail(ErrorCode::TruncatedPayload, "payload",
         "declared payload ends at byte " + std::to_string(static_cast<long long>(payload_end)) + ", file has " +
             std::to_string(bytes.size()));
  return h;
}

NiftiImage read_nifti(std::span<const std::uint8_t> bytes) {
  NiftiImage img;
  img.header = parse_header(bytes);
  const NiftiHeader& h = img.header;

  float slope = h.scl_slope == 0.0f ? 1.0f : h.scl_slope;
  float inter = h.scl_inter;
  if (!std::isfinite(slope)) fail(ErrorCode::NonFiniteVoxel, "scl_slope", "non-finite scale");
  if (!std::isfinite(inter)) fail(ErrorCode::NonFiniteVoxel, "scl_inter", "non-finite intercept");
  const bool identity = slope == 1.0f && inter == 0.0f;

  img.volume = Volume(h.volume_dims());
  img.spacing_mm = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  const std::size_t n = img.volume.voxels.size();
  const auto* payload = bytes.data() + static_cast<std::size_t>(h.vox_offset);

  for (std::size_t i = 0; i < n; ++i) {
    float raw;
    switch (h.datatype) {
      case kUint8: raw = static_cast<float>(payload[i]); break;
      case kInt16: {
        std::int16_t v;
        std::memcpy(&v, payload + 2 * i, 2);
        raw = static_cast<float>(v);
        break;
      }
      default: std::memcpy(&raw, payload + 4 * i, 4); break;
    }
    const float value = identity ? raw : slope * raw + inter;
    if (!std::isfinite(value))
      fail(ErrorCode::NonFiniteVoxel, "payload", "voxel " + std::to_string(i) + " is not finite");
    img.volume.voxels[i] = value;
  }
  return img;
}

std::vector<std::uint8_t> write_nifti(const Volume& volume, std::array<float, 3> spacing_mm) {
  const Dims3& d = volume.dims;
  const std::array<int, 3> extent{d.w, d.h, d.d};
  for (int i = 0; i < 3; ++i) {
    if (extent[i] < 1 || extent[i] > kMaxDim)
      fail(ErrorCode::DimOutOfRange, "dim[" + std::to_string(i + 1) + "]",
           std::to_string(extent[i]) + " outside [1,512]");
    if (!std::isfinite(spacing_mm[i]) || spacing_mm[i] <= 0.0f)
      fail(ErrorCode::DimOutOfRange, "pixdim[" + std::to_string(i + 1) + "]", "spacing must be positive and finite");
  }
  if (volume.voxels.size() != d.count())
    fail(ErrorCode::DimOutOfRange, "voxels", "buffer size does not match dims " + to_string(d));
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    if (!std::isfinite(volume.voxels[i]))
      fail(ErrorCode::NonFiniteVoxel, "voxels", "voxel " + std::to_string(i) + " is not finite");
  }

  std::vector<std::uint8_t> out(static_cast<std::size_t>(kMinVoxOffset) + 4 * d.count(), 0);
  store<std::int32_t>(out, kOffSizeofHdr, kHeaderSize);
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(d.w), static_cast<std::int16_t>(d.h),
                                        static_cast<std::int16_t>(d.d), 1, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) store<std::int16_t>(out, kOffDim + 2 * i, dim[i]);
  store<std::int16_t>(out, kOffDatatype, kFloat32);
  store<std::int16_t>(out, kOffBitpix, 32);
  const std::array<float, 8> pixdim{1.0f, spacing_mm[0], spacing_mm[1], spacing_mm[2], 1.0f, 1.0f, 1.0f, 1.0f};
  for (std::size_t i = 0; i < 8; ++i) store<float>(out, kOffPixdim + 4 * i, pixdim[i]);
  store<float>(out, kOffVoxOffset, static_cast<float>(kMinVoxOffset));
  store<float>(out, kOffSclSlope, 1.0f);
  store<float>(out, kOffSclInter, 0.0f);
  out[kOffXyztUnits] = 2;  // NIFTI_UNITS_MM
  store<std::int16_t>(out, kOffQformCode, 0);
  store<std::int16_t>(out, kOffSformCode, 0);
  std::memcpy(out.data() + kOffMagic, "n+1\0", 4);
  std::memcpy(out.data() + kMinVoxOffset, volume.voxels.data(), 4 * d.count());
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, path.string(), "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw Error(ErrorCode::Io, path.string(), "short read on " + path.string());
  return bytes;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, path.string(), "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, path.string(), "write failed on " + path.string());
}

NiftiImage read_nifti_file(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return read_nifti(bytes);
}

void write_nifti_file(const std::filesystem::path& path, const Volume& volume, std::array<float, 3> spacing_mm) {
  const auto bytes = write_nifti(volume, spacing_mm);
  write_bytes(path, bytes);
}

}  // namespace fmch::nifti
