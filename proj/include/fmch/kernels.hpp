// SPDX-License-Identifier: Apache-2.0
//
// 3D convolution, resampling, normalization and activation kernels with
// explicit backward passes.
//
// fmch::kernels holds the OpenMP-parallel implementations used for training;
// fmch::kernels::reference holds naive serial versions kept as test oracles.
// Parallel loops split over output (or input) channels only, so every sum is
// accumulated by one thread in a fixed order and results do not depend on
// the thread count.  Backward kernels accumulate (+=) into weight gradients.
//
// Weight layouts:
//   conv3d : [out][in][k][k][k], "same" zero padding, stride 1, odd k
//   down2  : [out][in][2][2][2], stride 2
//   up2    : [in][out][2][2][2], stride 2 transposed convolution
#pragma once

#include <span>
#include <vector>

#include "fmch/tensor.hpp"

namespace fmch::kernels {

template <class T>
FeatureMap<T> conv3d_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                             int out_channels, int kernel);
template <class T>
FeatureMap<T> conv3d_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels,
                                    int kernel);
template <class T>
void conv3d_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, int kernel,
                            std::span<T> grad_weight, std::span<T> grad_bias);

template <class T>
FeatureMap<T> down2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                            int out_channels);
template <class T>
FeatureMap<T> down2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels);
template <class T>
void down2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                           std::span<T> grad_bias);

template <class T>
FeatureMap<T> up2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                          int out_channels);
template <class T>
FeatureMap<T> up2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels);
template <class T>
void up2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                         std::span<T> grad_bias);

template <class T>
struct InstanceNormCache {
  FeatureMap<T> normalized;   // (x - mean) * inv_std
  std::vector<T> inv_std;     // per channel
};

// Per-channel standardization over spatial positions; gamma/beta may be
// empty for the non-affine form.
template <class T>
FeatureMap<T> instance_norm_forward(const FeatureMap<T>& in, std::span<const T> gamma, std::span<const T> beta, T eps,
                                    InstanceNormCache<T>* cache);
template <class T>
FeatureMap<T> instance_norm_backward(const FeatureMap<T>& grad_out, const InstanceNormCache<T>& cache,
                                     std::span<const T> gamma, std::span<T> grad_gamma, std::span<T> grad_beta);

// x * sigmoid(x)
template <class T>
FeatureMap<T> silu_forward(const FeatureMap<T>& x);
template <class T>
FeatureMap<T> silu_backward(const FeatureMap<T>& x, const FeatureMap<T>& grad_y);

// a += b, elementwise
template <class T>
void accumulate(FeatureMap<T>& a, const FeatureMap<T>& b);

namespace reference {

template <class T>
FeatureMap<T> conv3d_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                             int out_channels, int kernel);
template <class T>
FeatureMap<T> conv3d_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels,
                                    int kernel);
template <class T>
void conv3d_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, int kernel,
                            std::span<T> grad_weight, std::span<T> grad_bias);
template <class T>
FeatureMap<T> down2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                            int out_channels);
template <class T>
FeatureMap<T> down2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels);
template <class T>
void down2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                           std::span<T> grad_bias);
template <class T>
FeatureMap<T> up2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                          int out_channels);
template <class T>
FeatureMap<T> up2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels);
template <class T>
void up2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                         std::span<T> grad_bias);
template <class T>
FeatureMap<T> instance_norm_forward(const FeatureMap<T>& in, std::span<const T> gamma, std::span<const T> beta, T eps,
                                    InstanceNormCache<T>* cache);
template <class T>
FeatureMap<T> instance_norm_backward(const FeatureMap<T>& grad_out, const InstanceNormCache<T>& cache,
                                     std::span<const T> gamma, std::span<T> grad_gamma, std::span<T> grad_beta);

}  // namespace reference
}  // namespace fmch::kernels
