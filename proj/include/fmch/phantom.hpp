// SPDX-License-Identifier: Apache-2.0
//
// Deterministic multi-contrast brain phantoms with exact ground truth.
//
// Anatomy is three nested ellipsoid shells (CSF > GM > WM) in normalized
// coordinates u in [-1,1]^3, warped by a low-order sinusoidal displacement
// field, with an optional spherical lesion carved out of white matter.
// Contrasts are per-tissue intensity transfer functions plus Gaussian noise.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fmch/manifest.hpp"
#include "fmch/tensor.hpp"

namespace fmch::phantom {

enum Tissue : std::uint8_t {
  kBackground = 0,
  kCsf = 1,
  kGrayMatter = 2,
  kWhiteMatter = 3,
  kLesion = 4,
};
inline constexpr int kNumTissues = 5;

// Synthetic "age" target: global scale of all semi-axes.
inline constexpr double kMinScale = 0.75;
inline constexpr double kMaxScale = 1.0;

using Vec3 = std::array<double, 3>;  // (z, y, x)

struct LesionSpec {
  bool present = false;
  Vec3 center{};              // normalized coordinates
  double radius_voxels = 0.0;

  friend bool operator==(const LesionSpec&, const LesionSpec&) = default;
};

struct SubjectSpec {
  std::string subject_id;
  std::uint64_t seed = 0;
  double scale = 1.0;
  Vec3 center_offset{};
  Vec3 csf_axes{};  // outer shell
  Vec3 gm_axes{};
  Vec3 wm_axes{};
  // displacement_j(u) = sum_k amplitude[j][k] * sin(pi * u_k + phase[j][k])
  std::array<Vec3, 3> deform_amplitude{};
  std::array<Vec3, 3> deform_phase{};
  LesionSpec lesion;

  // Point in ellipsoid space for a normalized coordinate (after warping).
  Vec3 warp(const Vec3& u) const;
  bool shells_nested() const;

  friend bool operator==(const SubjectSpec&, const SubjectSpec&) = default;
};

struct TissueMap {
  Dims3 dims;
  std::vector<std::uint8_t> labels;

  std::array<std::size_t, kNumTissues> histogram() const;
  Volume to_volume() const;
  friend bool operator==(const TissueMap&, const TissueMap&) = default;
};

// Rounds label-valued voxels back to a TissueMap; UnknownLabel on anything
// outside {0..4} or non-integral.
TissueMap tissue_from_volume(const Volume& volume);

struct ContrastFunction {
  std::string contrast_id;
  std::array<double, kNumTissues> mean{};
  std::array<double, kNumTissues> sigma{};
  bool lesion_visible = false;
};

// Throws InvalidConfig when visible tissue means are closer than 3 sigma.
void validate_contrast(const ContrastFunction& fn);
// Throws InvalidConfig unless at least one contrast shows the lesion and one hides it.
void validate_contrast_set(const std::vector<ContrastFunction>& fns);

// c1 (T1-like), c2 (FLAIR-like, lesion visible), c3 (T2-like).
ContrastFunction default_contrast(const std::string& contrast_id);
std::vector<ContrastFunction> default_contrasts(const std::vector<std::string>& ids);

std::string subject_name(std::uint64_t subject_index);

SubjectSpec generate_subject(std::uint64_t global_seed, std::uint64_t subject_index, double lesion_prevalence);

// Extra small deformation for timepoint t > 0 (t == 0 returns spec unchanged).
SubjectSpec at_timepoint(const SubjectSpec& spec, std::uint64_t global_seed, std::uint64_t subject_index, int timepoint);

inline constexpr int kMinShape = 8;

// Innermost containing shell wins; lesion overwrites WM within its radius.
// Throws ShapeTooSmall for any extent below kMinShape.
TissueMap rasterize_tissue(const SubjectSpec& spec, Dims3 shape);

// voxel = mean(label) + sigma(label) * N(0,1); lesion renders as WM when the
// contrast hides it.  Throws UnknownLabel.
Volume render_contrast(const TissueMap& tissue, const ContrastFunction& fn, std::uint64_t noise_seed);

struct PhantomOptions {
  int n_subjects = 4;
  std::vector<ContrastFunction> contrasts = default_contrasts({"c1", "c2"});
  int timepoints = 1;
  Dims3 shape = Dims3::cube(24);
  std::uint64_t global_seed = 0;
  double lesion_prevalence = 0.5;
  double val_fraction = 0.25;
  double test_fraction = 0.25;
  std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};
};

// Health-stratified subject split; deterministic in (seed, subject lesion flags).
std::map<std::string, Split> assign_splits(const std::vector<SubjectSpec>& subjects, std::uint64_t global_seed,
                                           double val_fraction, double test_fraction);

// Writes images/<subject>_<contrast>_t<k>.nii, labels/<subject>_tissue.nii and
// manifest.json under out_dir; returns the manifest.
DatasetManifest build_phantom_dataset(const PhantomOptions& options, const std::filesystem::path& out_dir);

}  // namespace fmch::phantom
