// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for unit and acceptance tests: tiny-config points and
// per-term gradient checks in double precision.
#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fmch/error.hpp"
#include "fmch/masking.hpp"
#include "fmch/nifti.hpp"
#include "fmch/model.hpp"
#include "fmch/objectives.hpp"
#include "fmch/phantom.hpp"
#include "fmch/rng.hpp"

namespace fmch::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("fmch_" + tag + "_" + std::to_string(Rng(std::random_device{}()).next()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline model::UNetConfig tiny_config() {
  model::UNetConfig c;
  c.base_width = 2;
  c.multipliers = {1, 2, 2};
  c.depth = 2;
  c.bottleneck_channels = 4;
  c.anat_channels = 2;
  c.head_classes = 5;
  return c;
}

inline FeatureMap<double> random_map(int channels, Dims3 dims, Rng& rng, double scale = 1.0) {
  FeatureMap<double> f(channels, dims);
  for (auto& v : f.storage()) v = scale * rng.normal();
  return f;
}

inline std::vector<double> flatten(const FeatureMap<double>& f) { return f.storage(); }

inline FeatureMap<double> unflatten(const std::vector<double>& v, int channels, Dims3 dims) {
  FeatureMap<double> f(channels, dims);
  f.storage() = v;
  return f;
}

inline phantom::TissueMap random_tissue(Dims3 dims, Rng& rng) {
  phantom::TissueMap t{dims, std::vector<std::uint8_t>(dims.count())};
  for (auto& l : t.labels) l = static_cast<std::uint8_t>(rng.below(phantom::kNumTissues));
  return t;
}

// Volume with random extents in [1, max_extent] and random finite values,
// including signed zeros, denormals and extremes.
inline Volume random_volume(Rng& rng, int max_extent) {
  Volume v(Dims3{1 + static_cast<int>(rng.below(max_extent)), 1 + static_cast<int>(rng.below(max_extent)),
                 1 + static_cast<int>(rng.below(max_extent))});
  for (auto& x : v.voxels) {
    switch (rng.below(6)) {
      case 0: x = -0.0f; break;
      case 1: x = std::numeric_limits<float>::denorm_min() * static_cast<float>(rng.below(100)); break;
      case 2: x = rng.bernoulli(0.5) ? std::numeric_limits<float>::max() : std::numeric_limits<float>::lowest(); break;
      default: x = static_cast<float>(rng.normal() * 1000.0); break;
    }
  }
  return v;
}

// One fuzz input: pure noise, a truncated valid file, or a valid file with
// random bytes overwritten (biased towards the header).
inline std::vector<std::uint8_t> fuzz_bytes(std::uint64_t seed) {
  Rng rng(seed);
  const auto kind = rng.below(3);
  if (kind == 0) {
    std::vector<std::uint8_t> b(rng.below(800));
    for (auto& x : b) x = static_cast<std::uint8_t>(rng.below(256));
    if (b.size() >= 4 && rng.bernoulli(0.5)) b[0] = 0x5C, b[1] = 0x01, b[2] = 0, b[3] = 0;
    return b;
  }
  Volume v(Dims3{1 + static_cast<int>(rng.below(4)), 1 + static_cast<int>(rng.below(4)), 1 + static_cast<int>(rng.below(4))});
  for (auto& x : v.voxels) x = static_cast<float>(rng.normal());
  auto b = nifti::write_nifti(v, {1.0f, 1.0f, 1.0f});
  if (kind == 1) {
    b.resize(rng.below(b.size()));
    return b;
  }
  const auto flips = 1 + rng.below(8);
  for (std::uint64_t i = 0; i < flips; ++i) {
    const auto limit = rng.bernoulli(0.8) ? std::min<std::size_t>(b.size(), 352) : b.size();
    b[rng.below(limit)] = static_cast<std::uint8_t>(rng.below(256));
  }
  return b;
}

enum class FuzzOutcome { Valid, DeclaredError, UndeclaredError };

// read_nifti may return a volume or throw one of the codec's declared errors.
inline FuzzOutcome classify_read(const std::vector<std::uint8_t>& bytes) {
  try {
    const auto img = nifti::read_nifti(bytes);
    for (float x : img.volume.voxels)
      if (!std::isfinite(x)) return FuzzOutcome::UndeclaredError;
    return img.volume.voxels.size() == img.volume.dims.count() ? FuzzOutcome::Valid : FuzzOutcome::UndeclaredError;
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::BadMagic:
      case ErrorCode::UnsupportedDatatype:
      case ErrorCode::TruncatedPayload:
      case ErrorCode::DimOutOfRange:
      case ErrorCode::NonFiniteVoxel: return FuzzOutcome::DeclaredError;
      default: return FuzzOutcome::UndeclaredError;
    }
  } catch (...) {
    return FuzzOutcome::UndeclaredError;
  }
}

inline bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

struct TermCheck {
  std::string term;
  double max_rel_error = 0.0;
};

constexpr double kStep = 1e-5;

inline TermCheck check_masked_recon(std::uint64_t seed) {
  Rng rng(seed);
  const Dims3 d = Dims3::cube(8);
  auto pred = random_map(1, d, rng);
  auto target = random_map(1, d, rng);
  const auto grid = masking::PatchGrid::for_volume(d, 4);
  const auto mask = masking::voxel_mask(masking::sample_mask(grid, 0.5, seed), grid);
  FeatureMap<double> g;
  objectives::masked_recon_loss(pred, target, mask, &g);
  auto f = [&](const std::vector<double>& x) {
    return objectives::masked_recon_loss(unflatten(x, 1, d), target, mask);
  };
  return {"mae", objectives::grad_check(f, flatten(pred), flatten(g), kStep, seed).max_rel_error};
}

inline TermCheck check_anat_anchor(std::uint64_t seed) {
  Rng rng(seed);
  const auto c = tiny_config();
  const Dims3 b = Dims3::cube(2);
  auto logits = random_map(c.head_classes, b, rng, 2.0);
  auto tissue = random_tissue(Dims3::cube(8), rng);
  FeatureMap<double> g;
  objectives::anat_anchor_loss(logits, tissue, &g);
  auto f = [&](const std::vector<double>& x) {
    return objectives::anat_anchor_loss(unflatten(x, c.head_classes, b), tissue);
  };
  return {"seg", objectives::grad_check(f, flatten(logits), flatten(g), kStep, seed).max_rel_error};
}

inline TermCheck check_consistency(std::uint64_t seed) {
  Rng rng(seed);
  const auto c = tiny_config();
  const Dims3 b = Dims3::cube(2);
  auto a = random_map(c.anat_channels, b, rng);
  auto z = random_map(c.anat_channels, b, rng);
  FeatureMap<double> ga, gb;
  objectives::anat_consistency_loss(a, z, &ga, &gb);
  std::vector<double> point = flatten(a), grad = flatten(ga);
  point.insert(point.end(), z.storage().begin(), z.storage().end());
  grad.insert(grad.end(), gb.storage().begin(), gb.storage().end());
  const std::size_t n = a.size();
  auto f = [&](const std::vector<double>& x) {
    std::vector<double> xa(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<double> xb(x.begin() + static_cast<std::ptrdiff_t>(n), x.end());
    return objectives::anat_consistency_loss(unflatten(xa, c.anat_channels, b), unflatten(xb, c.anat_channels, b));
  };
  return {"cons", objectives::grad_check(f, point, grad, kStep, seed).max_rel_error};
}

inline TermCheck check_pathology(std::uint64_t seed) {
  Rng rng(seed);
  const double logit = 3.0 * rng.normal();
  const int label = static_cast<int>(rng.below(2));
  double g = 0.0;
  objectives::pathology_loss(logit, label, &g);
  auto f = [&](const std::vector<double>& x) { return objectives::pathology_loss(x[0], label); };
  return {"path", objectives::grad_check(f, {logit}, {g}, kStep, seed).max_rel_error};
}

// Swap term with respect to both latent partitions (through the decoder).
inline TermCheck check_swap(std::uint64_t seed) {
  Rng rng(seed);
  const auto c = tiny_config();
  model::UNet<double> net(c);
  const auto params = model::init_parameters<double>(c, seed);
  const Dims3 b = Dims3::cube(2);
  auto za = random_map(c.anat_channels, b, rng);
  auto zc = random_map(c.contrast_channels(), b, rng);
  auto target = random_map(1, Dims3::cube(8), rng);
  const objectives::ImageId ia{"s0000", "c1", 0}, ib{"s0000", "c2", 0};
  auto r = objectives::swap_recon_loss(net, params, ia, za, ib, zc, ib, target, true);
  GradientSet<double> grads(params.specs());
  auto lg = net.decode_backward(params, r.trace, r.grad_prediction, grads);
  std::vector<double> point = flatten(za), grad = flatten(lg.z_anat);
  point.insert(point.end(), zc.storage().begin(), zc.storage().end());
  grad.insert(grad.end(), lg.z_contrast.storage().begin(), lg.z_contrast.storage().end());
  const std::size_t n = za.size();
  auto f = [&](const std::vector<double>& x) {
    std::vector<double> xa(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<double> xc(x.begin() + static_cast<std::ptrdiff_t>(n), x.end());
    return objectives::swap_recon_loss(net, params, ia, unflatten(xa, c.anat_channels, b), ib,
                                       unflatten(xc, c.contrast_channels(), b), ib, target, false)
        .value;
  };
  return {"swap", objectives::grad_check(f, point, grad, kStep, seed).max_rel_error};
}

// Pair batch on the tiny config with every input a term might need.
inline std::vector<objectives::PreparedPair<double>> tiny_batch(std::uint64_t seed, int pairs = 2) {
  Rng rng(seed);
  const Dims3 d = Dims3::cube(8);
  const auto grid = masking::PatchGrid::for_volume(d, 4);
  std::vector<objectives::PreparedPair<double>> batch;
  for (int p = 0; p < pairs; ++p) {
    auto image = [&](const std::string& contrast, const phantom::TissueMap& tissue, int lesion) {
      objectives::PreparedImage<double> im;
      im.id = {"s" + std::to_string(p), contrast, 0};
      im.full = random_map(1, d, rng);
      const auto pm = masking::sample_mask(grid, 0.5, rng.next());
      im.mask = masking::voxel_mask(pm, grid);
      im.masked = im.full;
      for (std::size_t i = 0; i < d.count(); ++i)
        if (im.mask.values[i]) im.masked.storage()[i] = 0.0;
      im.tissue = tissue;
      im.lesion = lesion;
      return im;
    };
    const auto tissue = random_tissue(d, rng);
    const int lesion = static_cast<int>(rng.below(2));
    objectives::PreparedPair<double> pair;
    pair.a = image("c1", tissue, lesion);
    pair.b = image("c2", tissue, lesion);
    batch.push_back(std::move(pair));
  }
  return batch;
}

// total_loss with respect to the network parameters.
inline TermCheck check_total(std::uint64_t seed, const objectives::LossWeights& w, const std::string& label) {
  const auto c = tiny_config();
  model::UNet<double> net(c);
  const auto params = model::init_parameters<double>(c, seed);
  const auto batch = tiny_batch(seed);
  GradientSet<double> grads(params.specs());
  objectives::total_loss(net, params, batch, w, &grads);

  std::vector<double> point, grad;
  for (std::size_t t = 0; t < params.size(); ++t) {
    point.insert(point.end(), params.at(t).begin(), params.at(t).end());
    grad.insert(grad.end(), grads.at(t).begin(), grads.at(t).end());
  }
  auto f = [&](const std::vector<double>& x) {
    ParameterSet<double> q = params;
    std::size_t k = 0;
    for (std::size_t t = 0; t < q.size(); ++t)
      for (auto& v : q.at(t)) v = x[k++];
    return objectives::total_loss(net, q, batch, w).total;
  };
  return {label, objectives::grad_check(f, point, grad, kStep, seed).max_rel_error};
}

inline objectives::LossWeights single_term(const std::string& term) {
  objectives::LossWeights w;
  w.mae = w.seg = w.cons = w.path = w.swap = 0.0;
  if (term == "mae") w.mae = 1.0;
  if (term == "seg") w.seg = 1.0;
  if (term == "cons") w.cons = 1.0;
  if (term == "path") w.path = 1.0;
  if (term == "swap") w.swap = 1.0;
  return w;
}

// Every term at one random point: direct inputs plus network parameters.
inline std::vector<TermCheck> check_all_terms(std::uint64_t seed) {
  std::vector<TermCheck> out{check_masked_recon(seed), check_anat_anchor(seed), check_consistency(seed),
                             check_pathology(seed), check_swap(seed)};
  for (const char* term : objectives::kTermNames)
    out.push_back(check_total(seed, single_term(term), std::string("params/") + term));
  out.push_back(check_total(seed, objectives::LossWeights{}, "params/total"));
  return out;
}

}  // namespace fmch::testing
