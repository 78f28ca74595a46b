// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fmch/error.hpp"

namespace fmch {

// Spatial extent in (D,H,W) order; W is the fastest-varying index.
struct Dims3 {
  int d = 0;
  int h = 0;
  int w = 0;

  constexpr std::size_t count() const noexcept {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  constexpr std::size_t index(int z, int y, int x) const noexcept {
    return (static_cast<std::size_t>(z) * h + y) * w + x;
  }
  constexpr Dims3 halved() const noexcept { return {d / 2, h / 2, w / 2}; }
  constexpr Dims3 doubled() const noexcept { return {d * 2, h * 2, w * 2}; }
  constexpr Dims3 scaled_down(int f) const noexcept { return {d / f, h / f, w / f}; }
  friend constexpr bool operator==(const Dims3&, const Dims3&) = default;

  static constexpr Dims3 cube(int n) noexcept { return {n, n, n}; }
};

std::string to_string(const Dims3& dims);

// Single-channel real volume; the payload of a VolumeRecord.
struct Volume {
  Dims3 dims;
  std::vector<float> voxels;

  Volume() = default;
  explicit Volume(Dims3 d, float fill = 0.0f) : dims(d), voxels(d.count(), fill) {}

  float& at(int z, int y, int x) { return voxels[dims.index(z, y, x)]; }
  float at(int z, int y, int x) const { return voxels[dims.index(z, y, x)]; }
};

// Multi-channel feature map in (C,D,H,W) order.
template <class T>
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int channels, Dims3 dims, T fill = T(0))
      : channels_(channels), dims_(dims), data_(static_cast<std::size_t>(channels) * dims.count(), fill) {}

  int channels() const noexcept { return channels_; }
  const Dims3& dims() const noexcept { return dims_; }
  std::size_t voxels() const noexcept { return dims_.count(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::span<T> channel(int c) noexcept { return {data_.data() + c * voxels(), voxels()}; }
  std::span<const T> channel(int c) const noexcept { return {data_.data() + c * voxels(), voxels()}; }

  T& operator()(int c, int z, int y, int x) noexcept { return data_[c * voxels() + dims_.index(z, y, x)]; }
  T operator()(int c, int z, int y, int x) const noexcept { return data_[c * voxels() + dims_.index(z, y, x)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const FeatureMap& o) const noexcept { return channels_ == o.channels_ && dims_ == o.dims_; }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  int channels_ = 0;
  Dims3 dims_{};
  std::vector<T> data_;
};

template <class T>
FeatureMap<T> to_feature_map(const Volume& v) {
  FeatureMap<T> f(1, v.dims);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) f.data()[i] = static_cast<T>(v.voxels[i]);
  return f;
}

template <class T>
Volume to_volume(const FeatureMap<T>& f, int channel = 0) {
  Volume v(f.dims());
  auto src = f.channel(channel);
  for (std::size_t i = 0; i < src.size(); ++i) v.voxels[i] = static_cast<float>(src[i]);
  return v;
}

// Stacks feature maps along the channel axis.
template <class T>
FeatureMap<T> concat_channels(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  if (a.dims() != b.dims()) throw Error(ErrorCode::ShapeMismatch, "dims", "concat of " + to_string(a.dims()) + " and " + to_string(b.dims()));
  FeatureMap<T> out(a.channels() + b.channels(), a.dims());
  std::copy(a.storage().begin(), a.storage().end(), out.data());
  std::copy(b.storage().begin(), b.storage().end(), out.data() + a.size());
  return out;
}

// Channel range [first, first + count) as a new map.
template <class T>
FeatureMap<T> slice_channels(const FeatureMap<T>& f, int first, int count) {
  FeatureMap<T> out(count, f.dims());
  std::copy_n(f.data() + first * f.voxels(), count * f.voxels(), out.data());
  return out;
}

}  // namespace fmch
