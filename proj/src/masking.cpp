// SPDX-License-Identifier: Apache-2.0
#include "fmch/masking.hpp"

#include <cmath>
#include <numeric>

#include "fmch/rng.hpp"

namespace fmch::masking {

PatchGrid PatchGrid::for_volume(Dims3 dims, int patch) {
  if (patch < 1 || dims.d % patch || dims.h % patch || dims.w % patch)
    throw Error(ErrorCode::ShapeMismatch, "patch_size",
                "patch size " + std::to_string(patch) + " does not divide " + to_string(dims));
  return {patch, dims.scaled_down(patch)};
}

std::size_t PatchMask::masked_count() const {
  return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), std::uint8_t{1}));
}

std::size_t VoxelMask::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

std::size_t masked_patch_count(std::size_t patches, double ratio) {
  ratio = std::clamp(ratio, 0.0, 1.0);
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(patches)));
}

PatchMask sample_mask(const PatchGrid& grid, double ratio, std::uint64_t seed) {
  const std::size_t n = grid.count();
  const std::size_t k = masked_patch_count(n, ratio);
  PatchMask mask{std::vector<std::uint8_t>(n, 0), ratio, seed};

  // Partial Fisher-Yates: the first k slots form a uniform k-subset.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, Stream::Mask));
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
    mask.masked[idx[i]] = 1;
  }
  return mask;
}

VoxelMask voxel_mask(const PatchMask& mask, const PatchGrid& grid) {
  const Dims3 dims = grid.volume_dims();
  VoxelMask out{dims, std::vector<std::uint8_t>(dims.count(), 0)};
  const int p = grid.patch;
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x)
        out.values[dims.index(z, y, x)] = mask.masked[grid.grid.index(z / p, y / p, x / p)];
  return out;
}

Volume apply_mask(const Volume& volume, const PatchMask& mask, const PatchGrid& grid, float fill) {
  if (volume.dims != grid.volume_dims() || mask.masked.size() != grid.count())
    throw Error(ErrorCode::ShapeMismatch, "volume",
                "volume " + to_string(volume.dims) + " incompatible with patch grid " + to_string(grid.volume_dims()));
  Volume out = volume;
  const VoxelMask vm = voxel_mask(mask, grid);
  for (std::size_t i = 0; i < out.voxels.size(); ++i)
    if (vm.values[i]) out.voxels[i] = fill;
  return out;
}

NormStats normalize_in_place(Volume& volume) {
  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (float v : volume.voxels) {
    if (v != 0.0f) {
      sum += v;
      sum2 += static_cast<double>(v) * v;
      ++n;
    }
  }
  NormStats s;
  if (n > 0) {
    s.mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sum2 / static_cast<double>(n) - s.mean * s.mean);
    s.std = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  for (float& v : volume.voxels)
    if (v != 0.0f) v = static_cast<float>((v - s.mean) / s.std);
  return s;
}

Volume denormalize(const Volume& volume, const NormStats& stats) {
  Volume out = volume;
  for (float& v : out.voxels)
    if (v != 0.0f) v = static_cast<float>(v * stats.std + stats.mean);
  return out;
}

void validate_policy(const AugmentPolicy& p) {
  if (p.intensity_scale && !(p.scale_lo >= 0.9 && p.scale_hi <= 1.1 && p.scale_lo <= p.scale_hi))
    throw Error(ErrorCode::InvalidConfig, "augment.scale", "intensity scale range must lie within [0.9, 1.1]");
  if (!(p.noise_sigma >= 0.0 && p.noise_sigma <= 0.05))
    throw Error(ErrorCode::InvalidConfig, "augment.noise_sigma", "noise sigma must lie in [0, 0.05]");
}

AugmentDraw draw_augment(std::uint64_t seed, const AugmentPolicy& policy) {
  Rng rng(derive_seed(seed, Stream::Augment));
  AugmentDraw d;
  for (int a = 0; a < 3; ++a) {
    const bool coin = rng.bernoulli(0.5);
    d.flip[a] = policy.flip[a] && coin;
  }
  const double u = rng.uniform();
  d.scale = policy.intensity_scale ? policy.scale_lo + (policy.scale_hi - policy.scale_lo) * u : 1.0;
  d.noise_seed = rng.next();
  return d;
}

Volume apply_augment(const Volume& volume, const AugmentDraw& draw, const AugmentPolicy& policy) {
  Volume out = volume;
  apply_flips(out.voxels, out.dims, draw.flip);
  if (draw.scale != 1.0)
    for (float& v : out.voxels) v = static_cast<float>(v * draw.scale);
  if (policy.noise_sigma > 0.0) {
    Rng rng(draw.noise_seed);
    for (float& v : out.voxels) {
      const double n = rng.normal();
      if (v != 0.0f) v = static_cast<float>(v + policy.noise_sigma * n);
    }
  }
  return out;
}

Volume augment(const Volume& volume, std::uint64_t seed, const AugmentPolicy& policy) {
  return apply_augment(volume, draw_augment(seed, policy), policy);
}

}  // namespace fmch::masking
