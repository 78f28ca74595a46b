// SPDX-License-Identifier: Apache-2.0
//
// 3D U-Net encoder-decoder with a channel-partitioned bottleneck.
//
//   encoder level 0      : conv3 blocks at full resolution          -> skip 0
//   encoder level l > 0  : down2 block + conv3 blocks               -> skip l
//   bottleneck (level L) : down2 block + conv3 blocks + latent conv3
//   latent               : channels [0, C_a) -> z_anat, [C_a, C) -> z_contrast
//   decoder level l      : up2 + concat(skip l) + conv3 blocks
//   output               : conv1 projection
//
// A block is conv -> instance norm (affine) -> SiLU.  z_anat is instance
// normalized without affine (a standardized anatomical code) unless the
// config selects the linear code; z_contrast is the raw latent projection.
//
// Forward passes optionally fill a trace; the matching *_backward call
// consumes it, accumulates parameter gradients and returns input gradients.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fmch/parameters.hpp"
#include "fmch/tensor.hpp"
#include "fmch/kernels.hpp"

namespace fmch::model {

enum class NormKind { Instance, None };
enum class AnatCode { Standardized, Linear };
enum class DecodeMode { MaskedRecon, Swap };

struct UNetConfig {
  int in_channels = 1;
  int out_channels = 1;
  int base_width = 8;
  std::vector<int> multipliers{1, 2, 4};  // depth + 1 entries
  int depth = 2;
  int convs_per_level = 2;
  int bottleneck_channels = 32;
  int anat_channels = 16;
  int head_classes = 5;
  NormKind norm = NormKind::Instance;
  AnatCode anat_code = AnatCode::Standardized;

  int contrast_channels() const { return bottleneck_channels - anat_channels; }
  int width(int level) const { return base_width * multipliers.at(static_cast<std::size_t>(level)); }
  int reduction() const { return 1 << depth; }
  Dims3 bottleneck_dims(Dims3 input) const { return input.scaled_down(reduction()); }

  // Throws InvalidConfig.
  void validate() const;
  // Throws ShapeMismatch unless every extent is divisible by 2^depth.
  void check_input(Dims3 dims) const;
};

std::vector<ParamSpec> parameter_specs(const UNetConfig& config);
std::size_t count_parameters(const UNetConfig& config);

// Fan-in scaled Gaussian init; norms start at identity, biases at zero.
template <class T>
ParameterSet<T> init_parameters(const UNetConfig& config, std::uint64_t seed);

// Fresh conv1 projection or affine head appended to an existing set.
template <class T>
void add_projection(ParameterSet<T>& params, const std::string& prefix, int in_channels, int out_channels,
                    std::uint64_t seed);

template <class T>
struct LatentPartition {
  FeatureMap<T> z_anat;
  FeatureMap<T> z_contrast;

  FeatureMap<T> bottleneck() const { return concat_channels(z_anat, z_contrast); }
};

template <class T>
struct EncoderOutput {
  LatentPartition<T> latent;
  std::vector<FeatureMap<T>> skips;  // skip l has input dims / 2^l
};

template <class T>
struct BlockTrace {
  FeatureMap<T> input;
  kernels::InstanceNormCache<T> norm;
  FeatureMap<T> pre_activation;
};

template <class T>
struct EncoderTrace {
  std::vector<BlockTrace<T>> blocks;
  FeatureMap<T> latent_input;
  kernels::InstanceNormCache<T> anat_norm;
};

template <class T>
struct DecoderTrace {
  DecodeMode mode = DecodeMode::MaskedRecon;
  std::vector<FeatureMap<T>> up_inputs;  // one per level, deepest first
  std::vector<BlockTrace<T>> blocks;
  FeatureMap<T> features;                // input of the output projection
};

template <class T>
struct LatentGradient {
  FeatureMap<T> z_anat;
  FeatureMap<T> z_contrast;
  std::vector<FeatureMap<T>> skips;  // empty entries are treated as zero
};

template <class T>
class UNet {
 public:
  explicit UNet(UNetConfig config);

  const UNetConfig& config() const noexcept { return config_; }

  EncoderOutput<T> encode(const ParameterSet<T>& p, const FeatureMap<T>& x, EncoderTrace<T>* trace = nullptr) const;
  void encode_backward(const ParameterSet<T>& p, const EncoderTrace<T>& trace, const LatentGradient<T>& grad,
                       GradientSet<T>& grads) const;

  // Last decoder feature map (before the output projection).  In swap mode
  // `skips` must be empty or all zero (SkipsForbiddenInSwapMode otherwise);
  // the decoder then sees nothing but the latent partition.
  FeatureMap<T> decode_features(const ParameterSet<T>& p, const FeatureMap<T>& z_anat, const FeatureMap<T>& z_contrast,
                                std::span<const FeatureMap<T>> skips, DecodeMode mode,
                                DecoderTrace<T>* trace = nullptr) const;
  LatentGradient<T> decode_features_backward(const ParameterSet<T>& p, const DecoderTrace<T>& trace,
                                             const FeatureMap<T>& grad_features, GradientSet<T>& grads) const;

  // decode_features followed by the "out" projection.
  FeatureMap<T> decode(const ParameterSet<T>& p, const FeatureMap<T>& z_anat, const FeatureMap<T>& z_contrast,
                       std::span<const FeatureMap<T>> skips, DecodeMode mode, DecoderTrace<T>* trace = nullptr) const;
  LatentGradient<T> decode_backward(const ParameterSet<T>& p, const DecoderTrace<T>& trace,
                                    const FeatureMap<T>& grad_output, GradientSet<T>& grads) const;

  // 1x1x1 projection z_anat -> K tissue logits at bottleneck resolution.
  FeatureMap<T> anat_head(const ParameterSet<T>& p, const FeatureMap<T>& z_anat) const;
  FeatureMap<T> anat_head_backward(const ParameterSet<T>& p, const FeatureMap<T>& z_anat,
                                   const FeatureMap<T>& grad_logits, GradientSet<T>& grads) const;

  // Global average pool then affine map to one lesion-presence logit.
  T pathology_head(const ParameterSet<T>& p, const FeatureMap<T>& z_contrast) const;
  FeatureMap<T> pathology_head_backward(const ParameterSet<T>& p, const FeatureMap<T>& z_contrast, T grad_logit,
                                        GradientSet<T>& grads) const;

 private:
  FeatureMap<T> block_forward(const ParameterSet<T>& p, const std::string& name, bool down, const FeatureMap<T>& x,
                              int out_channels, BlockTrace<T>* trace) const;
  FeatureMap<T> block_backward(const ParameterSet<T>& p, const std::string& name, bool down,
                               const BlockTrace<T>& trace, const FeatureMap<T>& grad_out,
                               GradientSet<T>& grads) const;

  UNetConfig config_;
};

// Conv1 projection helpers shared by heads (prefix.weight [out][in], prefix.bias [out]).
template <class T>
FeatureMap<T> project(const ParameterSet<T>& p, const std::string& prefix, const FeatureMap<T>& x);
template <class T>
FeatureMap<T> project_backward(const ParameterSet<T>& p, const std::string& prefix, const FeatureMap<T>& x,
                               const FeatureMap<T>& grad_out, GradientSet<T>& grads);

// Spatial mean per channel.
template <class T>
std::vector<T> global_average_pool(const FeatureMap<T>& x);

// Argmax over channels per voxel; ties go to the lowest class index.
template <class T>
std::vector<int> argmax_channels(const FeatureMap<T>& logits);

}  // namespace fmch::model
