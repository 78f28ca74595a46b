// SPDX-License-Identifier: Apache-2.0
//
// Loss terms, their weighted combination over a pair batch, and numerical
// gradient verification.
//
// Every term returns its value and, when a gradient buffer is supplied,
// writes (not accumulates) d(term)/d(input) into it.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fmch/masking.hpp"
#include "fmch/model.hpp"
#include "fmch/phantom.hpp"

namespace fmch::objectives {

// Mean squared error over voxels flagged in `mask`; EmptyMask when none are.
template <class T>
T masked_recon_loss(const FeatureMap<T>& prediction, const FeatureMap<T>& target, const masking::VoxelMask& mask,
                    FeatureMap<T>* grad = nullptr);

// Mean squared error over every voxel.
template <class T>
T mse_loss(const FeatureMap<T>& prediction, const FeatureMap<T>& target, FeatureMap<T>* grad = nullptr);

// Per-block majority vote, ties to the lowest label.  ShapeMismatch unless
// `target` divides the map's extent exactly.
std::vector<int> downsample_labels(const phantom::TissueMap& map, Dims3 target);

// Mean voxelwise softmax cross-entropy.
template <class T>
T cross_entropy_loss(const FeatureMap<T>& logits, const std::vector<int>& labels, FeatureMap<T>* grad = nullptr);

template <class T>
T anat_anchor_loss(const FeatureMap<T>& logits, const phantom::TissueMap& tissue, FeatureMap<T>* grad = nullptr);

// Mean squared difference of per-channel standardized maps (eps 1e-5).
template <class T>
T anat_consistency_loss(const FeatureMap<T>& a, const FeatureMap<T>& b, FeatureMap<T>* grad_a = nullptr,
                        FeatureMap<T>* grad_b = nullptr);

// Binary cross-entropy with logits; label is 1 for lesion present.
template <class T>
T pathology_loss(T logit, int label, T* grad = nullptr);

struct ImageId {
  std::string subject_id;
  std::string contrast_id;
  int timepoint = 0;

  friend bool operator==(const ImageId&, const ImageId&) = default;
};

// SubjectMismatch unless all three images share subject and timepoint and
// the target is the contrast-code source.
void check_swap_pairing(const ImageId& anat_source, const ImageId& contrast_source, const ImageId& target);

template <class T>
struct SwapResult {
  T value{};
  FeatureMap<T> prediction;
  model::DecoderTrace<T> trace;
  FeatureMap<T> grad_prediction;  // filled when requested
};

// Decodes (z_anat of anat_source, z_contrast of contrast_source) in swap mode
// and scores it against the full target volume.
template <class T>
SwapResult<T> swap_recon_loss(const model::UNet<T>& net, const ParameterSet<T>& params, const ImageId& anat_source,
                              const FeatureMap<T>& z_anat, const ImageId& contrast_source,
                              const FeatureMap<T>& z_contrast, const ImageId& target_id, const FeatureMap<T>& target,
                              bool want_grad);

enum class Variant { Ssl3d, Fomo25, Combined };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct LossWeights {
  double mae = 1.0;
  double seg = 1.0;
  double cons = 0.1;
  double path = 0.1;
  double swap = 1.0;
  Variant variant = Variant::Combined;
  bool swap_on_masked = false;

  // Default weights with the variant's forced zeros applied.
  static LossWeights for_variant(Variant v);
  // InvalidWeights on negative or non-finite weights, a broken variant
  // invariant, or all weights zero.
  void validate() const;
};

inline const char* const kTermNames[] = {"mae", "seg", "cons", "path", "swap"};

struct LossReport {
  std::map<std::string, double> terms;  // only terms that were computed
  double total = 0.0;
};

// Weighted sum over the computed terms; zero-weight terms are dropped.
LossReport combine(const LossWeights& weights, const std::map<std::string, double>& terms);

// One image of a pair after augmentation, normalization and masking.
template <class T>
struct PreparedImage {
  ImageId id;
  FeatureMap<T> masked;        // network input
  FeatureMap<T> full;          // normalized, unmasked
  masking::VoxelMask mask;
  std::optional<phantom::TissueMap> tissue;
  std::optional<int> lesion;   // 1 = lesion present
};

template <class T>
struct PreparedPair {
  PreparedImage<T> a;
  std::optional<PreparedImage<T>> b;
};

// Forward (and, with grads, backward) pass of every active term over a pair
// batch.  Terms are averaged over their instances in the batch: mae, seg and
// path per image, cons per pair, swap per direction (A->B and B->A).
template <class T>
LossReport total_loss(const model::UNet<T>& net, const ParameterSet<T>& params,
                      const std::vector<PreparedPair<T>>& batch, const LossWeights& weights,
                      GradientSet<T>* grads = nullptr);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_index = 0;
  double worst_fd = 0.0;
  double worst_analytic = 0.0;
};

// Central differences on up to `max_coords` coordinates picked from `seed`
// (all when the point is smaller).  Relative error uses the denominator
// max(|fd|, |an|, 1e-8).  InvalidConfig for a step outside [1e-6, 1e-3];
// NonFiniteGradient when either gradient is not finite.
GradCheckResult grad_check(const std::function<double(const std::vector<double>&)>& loss,
                           const std::vector<double>& point, const std::vector<double>& analytic, double step,
                           std::uint64_t seed, std::size_t max_coords = 200);

}  // namespace fmch::objectives
