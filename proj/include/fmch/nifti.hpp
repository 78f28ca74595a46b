// SPDX-License-Identifier: Apache-2.0
//
// Strict NIfTI-1 single-file subset.
//
// Reads uncompressed little-endian .nii files with datatype uint8, int16 or
// float32 and writes float32 only.  Axis mapping: dim[1] is the fastest
// index and maps to W, dim[2] to H, dim[3] to D, so the payload order of the
// file is exactly the (D,H,W) memory order of fmch::Volume.  Orientation
// (qform/sform) is ignored; spacing comes from pixdim[1..3].
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fmch/tensor.hpp"

namespace fmch::nifti {

inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr std::int32_t kMinVoxOffset = 352;
inline constexpr int kMaxDim = 512;

enum Datatype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kFloat32 = 16,
};

// The mandatory fields the subset honors.
struct NiftiHeader {
  std::int32_t sizeof_hdr = kHeaderSize;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = kFloat32;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{};
  float vox_offset = kMinVoxOffset;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::array<char, 4> magic{'n', '+', '1', '\0'};

  Dims3 volume_dims() const { return {dim[3], dim[2], dim[1]}; }
};

struct NiftiImage {
  NiftiHeader header;
  Volume volume;
  std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};
};

// Parses and validates the header only.  Throws fmch::Error with one of
// BadMagic, UnsupportedDatatype, TruncatedPayload, DimOutOfRange; the error
// field names the offending header field.
NiftiHeader parse_header(std::span<const std::uint8_t> bytes);

// Full decode with scl_slope/scl_inter applied (slope 0 is treated as 1).
// Additionally throws NonFiniteVoxel if scaling produces a non-finite value.
NiftiImage read_nifti(std::span<const std::uint8_t> bytes);

// 348-byte header, 4 zero extension bytes, little-endian float32 payload.
// Throws DimOutOfRange or NonFiniteVoxel.
std::vector<std::uint8_t> write_nifti(const Volume& volume, std::array<float, 3> spacing_mm);

NiftiImage read_nifti_file(const std::filesystem::path& path);
void write_nifti_file(const std::filesystem::path& path, const Volume& volume, std::array<float, 3> spacing_mm);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fmch::nifti
