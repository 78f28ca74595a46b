// SPDX-License-Identifier: Apache-2.0
//
// Patch-grid masking, per-volume normalization and light augmentation for
// masked-autoencoder pre-training.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fmch/tensor.hpp"

namespace fmch::masking {

struct PatchGrid {
  int patch = 4;
  Dims3 grid{};

  std::size_t count() const noexcept { return grid.count(); }
  Dims3 volume_dims() const noexcept { return {grid.d * patch, grid.h * patch, grid.w * patch}; }

  // Throws ShapeMismatch unless patch divides every extent.
  static PatchGrid for_volume(Dims3 dims, int patch);
};

struct PatchMask {
  std::vector<std::uint8_t> masked;  // one flag per patch, row-major over the grid
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::size_t masked_count() const;
};

// round(ratio * P) with halves rounded away from zero.
std::size_t masked_patch_count(std::size_t patches, double ratio);

// Exactly masked_patch_count(P, ratio) patches, uniform without replacement.
PatchMask sample_mask(const PatchGrid& grid, double ratio, std::uint64_t seed);

struct VoxelMask {
  Dims3 dims;
  std::vector<std::uint8_t> values;  // 1 = masked voxel

  std::size_t count() const;
};

VoxelMask voxel_mask(const PatchMask& mask, const PatchGrid& grid);

// Replaces voxels of masked patches by `fill`; other voxels are untouched.
Volume apply_mask(const Volume& volume, const PatchMask& mask, const PatchGrid& grid, float fill = 0.0f);

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

// z-score using statistics of the nonzero voxels; zero (background) voxels
// stay zero.  A constant or empty foreground leaves std = 1.
NormStats normalize_in_place(Volume& volume);
Volume denormalize(const Volume& volume, const NormStats& stats);

struct AugmentPolicy {
  std::array<bool, 3> flip{false, false, false};  // per axis (D,H,W), each applied with p = 0.5
  bool intensity_scale = false;                    // global factor in [scale_lo, scale_hi]
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double noise_sigma = 0.0;                        // additive Gaussian on nonzero voxels, <= 0.05
};

struct AugmentDraw {
  std::array<bool, 3> flip{false, false, false};
  double scale = 1.0;
  std::uint64_t noise_seed = 0;
};

// Throws InvalidConfig when the policy leaves its allowed ranges.
void validate_policy(const AugmentPolicy& policy);
AugmentDraw draw_augment(std::uint64_t seed, const AugmentPolicy& policy);

template <class T>
void flip_axis(std::vector<T>& values, Dims3 dims, int axis) {
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x) {
        int z2 = z, y2 = y, x2 = x;
        if (axis == 0) z2 = dims.d - 1 - z;
        if (axis == 1) y2 = dims.h - 1 - y;
        if (axis == 2) x2 = dims.w - 1 - x;
        const auto a = dims.index(z, y, x), b = dims.index(z2, y2, x2);
        if (a < b) std::swap(values[a], values[b]);
      }
}

template <class T>
void apply_flips(std::vector<T>& values, Dims3 dims, const std::array<bool, 3>& flips) {
  for (int axis = 0; axis < 3; ++axis)
    if (flips[axis]) flip_axis(values, dims, axis);
}

Volume apply_augment(const Volume& volume, const AugmentDraw& draw, const AugmentPolicy& policy);
Volume augment(const Volume& volume, std::uint64_t seed, const AugmentPolicy& policy);

}  // namespace fmch::masking
