// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fmch/error.hpp"

namespace fmch {

struct ParamSpec {
  std::string name;
  std::vector<int> shape;

  std::size_t count() const {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
  }
};

// Ordered collection of named arrays (weights, gradients or optimizer moments).
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(const std::vector<ParamSpec>& specs) {
    for (const auto& s : specs) add(s.name, s.shape);
  }

  std::span<T> add(const std::string& name, std::vector<int> shape, T fill = T(0)) {
    if (index_.count(name)) throw Error(ErrorCode::InvalidConfig, name, "duplicate parameter '" + name + "'");
    ParamSpec spec{name, std::move(shape)};
    index_.emplace(name, specs_.size());
    values_.emplace_back(spec.count(), fill);
    specs_.push_back(std::move(spec));
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::InvalidConfig, name, "unknown parameter '" + name + "'");
    return it->second;
  }

  std::span<T> operator[](const std::string& name) { return values_[index_of(name)]; }
  std::span<const T> operator[](const std::string& name) const { return values_[index_of(name)]; }
  std::span<T> at(std::size_t i) { return values_[i]; }
  std::span<const T> at(std::size_t i) const { return values_[i]; }

  std::size_t size() const noexcept { return specs_.size(); }
  const std::vector<ParamSpec>& specs() const noexcept { return specs_; }
  const ParamSpec& spec(std::size_t i) const { return specs_[i]; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  void fill(T v) {
    for (auto& a : values_) std::fill(a.begin(), a.end(), v);
  }

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      auto dst = out.add(specs_[i].name, specs_[i].shape);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<U>(values_[i][j]);
    }
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.specs_.size() != b.specs_.size()) return false;
    for (std::size_t i = 0; i < a.specs_.size(); ++i)
      if (a.specs_[i].name != b.specs_[i].name || a.specs_[i].shape != b.specs_[i].shape) return false;
    return a.values_ == b.values_;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::vector<std::vector<T>> values_;
  std::map<std::string, std::size_t> index_;
};

// Gradient buffers mirroring a ParameterSet.  A tensor is "touched" once any
// backward pass has written to it; the optimizer only updates touched tensors.
template <class T>
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const std::vector<ParamSpec>& specs) : values_(specs), touched_(specs.size(), false) {}

  std::span<T> operator[](const std::string& name) {
    const auto i = values_.index_of(name);
    touched_[i] = true;
    return values_.at(i);
  }
  std::span<const T> at(std::size_t i) const { return values_.at(i); }
  bool touched(std::size_t i) const { return touched_[i]; }
  bool touched(const std::string& name) const { return touched_[values_.index_of(name)]; }
  std::size_t size() const { return values_.size(); }
  const ParameterSet<T>& values() const { return values_; }

  void zero() {
    values_.fill(T(0));
    std::fill(touched_.begin(), touched_.end(), false);
  }

 private:
  ParameterSet<T> values_;
  std::vector<bool> touched_;
};

}  // namespace fmch
