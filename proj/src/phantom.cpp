// SPDX-License-Identifier: Apache-2.0
#include "fmch/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numbers>

#include "fmch/nifti.hpp"
#include "fmch/rng.hpp"

namespace fmch::phantom {
namespace {

constexpr Vec3 kBaseCsfAxes{0.80, 0.72, 0.76};
constexpr double kDeformAmplitude = 0.03;
constexpr double kTimepointAmplitude = 0.01;

double normalized_coord(int i, int n) { return 2.0 * (i + 0.5) / n - 1.0; }

double ellipsoid_radius2(const Vec3& p, const Vec3& axes) {
  double r = 0.0;
  for (int k = 0; k < 3; ++k) r += (p[k] / axes[k]) * (p[k] / axes[k]);
  return r;
}

// Solve warp(u) == target for u by fixed-point iteration; the displacement
// field is a contraction for the amplitudes used here.
Vec3 unwarp(const SubjectSpec& spec, const Vec3& target) {
  Vec3 u = target;
  for (int it = 0; it < 50; ++it) {
    const Vec3 p = spec.warp(u);
    for (int k = 0; k < 3; ++k) u[k] += target[k] - p[k];
  }
  return u;
}

}  // namespace

Vec3 SubjectSpec::warp(const Vec3& u) const {
  Vec3 p{};
  for (int j = 0; j < 3; ++j) {
    double disp = 0.0;
    for (int k = 0; k < 3; ++k) disp += deform_amplitude[j][k] * std::sin(std::numbers::pi * u[k] + deform_phase[j][k]);
    p[j] = u[j] + disp - center_offset[j];
  }
  return p;
}

bool SubjectSpec::shells_nested() const {
  for (int k = 0; k < 3; ++k)
    if (!(csf_axes[k] > gm_axes[k] && gm_axes[k] > wm_axes[k] && wm_axes[k] > 0.0)) return false;
  return true;
}

std::array<std::size_t, kNumTissues> TissueMap::histogram() const {
  std::array<std::size_t, kNumTissues> h{};
  for (auto l : labels) ++h[l];
  return h;
}

Volume TissueMap::to_volume() const {
  Volume v(dims);
  for (std::size_t i = 0; i < labels.size(); ++i) v.voxels[i] = static_cast<float>(labels[i]);
  return v;
}

TissueMap tissue_from_volume(const Volume& volume) {
  TissueMap t{volume.dims, std::vector<std::uint8_t>(volume.voxels.size())};
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    const float v = volume.voxels[i];
    if (!(v >= 0.0f && v < kNumTissues) || v != std::floor(v))
      throw Error(ErrorCode::UnknownLabel, "labels", "voxel " + std::to_string(i) + " has label " + std::to_string(v));
    t.labels[i] = static_cast<std::uint8_t>(v);
  }
  return t;
}

void validate_contrast(const ContrastFunction& fn) {
  for (int a = 0; a < kNumTissues; ++a) {
    if (!(fn.sigma[a] >= 0.0)) throw Error(ErrorCode::InvalidConfig, fn.contrast_id, "negative noise sigma");
  }
  const int last = fn.lesion_visible ? kLesion : kWhiteMatter;
  for (int a = 0; a <= last; ++a) {
    for (int b = a + 1; b <= last; ++b) {
      const double gap = std::abs(fn.mean[a] - fn.mean[b]);
      if (gap < 3.0 * std::max(fn.sigma[a], fn.sigma[b]))
        throw Error(ErrorCode::InvalidConfig, fn.contrast_id,
                    "tissues " + std::to_string(a) + " and " + std::to_string(b) + " are closer than 3 sigma");
    }
  }
}

void validate_contrast_set(const std::vector<ContrastFunction>& fns) {
  bool visible = false, hidden = false;
  for (const auto& f : fns) {
    validate_contrast(f);
    (f.lesion_visible ? visible : hidden) = true;
  }
  if (!visible || !hidden)
    throw Error(ErrorCode::InvalidConfig, "contrasts", "need at least one lesion-visible and one lesion-hidden contrast");
}

ContrastFunction default_contrast(const std::string& id) {
  ContrastFunction fn;
  fn.contrast_id = id;
  fn.sigma = {0.0, 0.1, 0.1, 0.1, 0.1};
  if (id == "c1") {
    fn.mean = {0.0, 1.0, 2.0, 3.0, 3.0};
    fn.lesion_visible = false;
  } else if (id == "c2") {
    fn.mean = {0.0, 0.8, 2.4, 1.6, 3.6};
    fn.lesion_visible = true;
  } else if (id == "c3") {
    fn.mean = {0.0, 3.0, 2.0, 1.2, 1.2};
    fn.lesion_visible = false;
  } else {
    throw Error(ErrorCode::InvalidConfig, id, "no default contrast named '" + id + "' (known: c1, c2, c3)");
  }
  return fn;
}

std::vector<ContrastFunction> default_contrasts(const std::vector<std::string>& ids) {
  std::vector<ContrastFunction> out;
  for (const auto& id : ids) out.push_back(default_contrast(id));
  return out;
}

std::string subject_name(std::uint64_t subject_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04llu", static_cast<unsigned long long>(subject_index));
  return buf;
}

SubjectSpec generate_subject(std::uint64_t global_seed, std::uint64_t subject_index, double lesion_prevalence) {
  if (!(lesion_prevalence >= 0.0 && lesion_prevalence <= 1.0)) {
    const double clamped = std::isnan(lesion_prevalence) ? 0.0 : std::clamp(lesion_prevalence, 0.0, 1.0);
    std::clog << "[phantom] lesion_prevalence " << lesion_prevalence << " clamped to " << clamped << "\n";
    lesion_prevalence = clamped;
  }

  SubjectSpec s;
  s.subject_id = subject_name(subject_index);
  s.seed = derive_seed(global_seed, Stream::Subject, {subject_index});
  Rng rng(s.seed);

  s.lesion.present = rng.bernoulli(lesion_prevalence);
  s.scale = rng.uniform(kMinScale, kMaxScale);
  const double gm_ratio = rng.uniform(0.80, 0.86);
  const double wm_ratio = rng.uniform(0.66, 0.74);
  for (int k = 0; k < 3; ++k) {
    s.csf_axes[k] = kBaseCsfAxes[k] * rng.uniform(0.95, 1.05) * s.scale;
    s.gm_axes[k] = s.csf_axes[k] * gm_ratio;
    s.wm_axes[k] = s.gm_axes[k] * wm_ratio;
    s.center_offset[k] = rng.uniform(-0.04, 0.04);
  }
  for (int j = 0; j < 3; ++j) {
    for (int k = 0; k < 3; ++k) {
      s.deform_amplitude[j][k] = rng.uniform(-kDeformAmplitude, kDeformAmplitude);
      s.deform_phase[j][k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }

  // Lesion parameters are always drawn so the stream layout does not depend
  // on the presence flag.
  Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
  const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  const double frac = 0.45 * std::cbrt(rng.uniform());
  const double radius = rng.uniform(2.5, 3.5);
  if (s.lesion.present) {
    Vec3 target{};
    for (int k = 0; k < 3; ++k) target[k] = (norm > 0 ? dir[k] / norm : 0.0) * frac * s.wm_axes[k];
    s.lesion.center = unwarp(s, target);
    s.lesion.radius_voxels = radius;
  }
  return s;
}

SubjectSpec at_timepoint(const SubjectSpec& spec, std::uint64_t global_seed, std::uint64_t subject_index, int timepoint) {
  if (timepoint == 0) return spec;
  SubjectSpec t = spec;
  Rng rng(derive_seed(global_seed, Stream::Timepoint, {subject_index, static_cast<std::uint64_t>(timepoint)}));
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k) t.deform_amplitude[j][k] += rng.uniform(-kTimepointAmplitude, kTimepointAmplitude);
  return t;
}

TissueMap rasterize_tissue(const SubjectSpec& spec, Dims3 shape) {
  if (shape.d < kMinShape || shape.h < kMinShape || shape.w < kMinShape)
    throw Error(ErrorCode::ShapeTooSmall, "shape", "shape " + to_string(shape) + " below minimum extent 8");

  TissueMap map{shape, std::vector<std::uint8_t>(shape.count(), kBackground)};
  const std::array<int, 3> n{shape.d, shape.h, shape.w};
  Vec3 lesion_vox{};
  for (int k = 0; k < 3; ++k) lesion_vox[k] = (spec.lesion.center[k] + 1.0) * 0.5 * n[k] - 0.5;
  const double r2 = spec.lesion.radius_voxels * spec.lesion.radius_voxels;

  for (int z = 0; z < shape.d; ++z) {
    for (int y = 0; y < shape.h; ++y) {
      for (int x = 0; x < shape.w; ++x) {
        const Vec3 u{normalized_coord(z, shape.d), normalized_coord(y, shape.h), normalized_coord(x, shape.w)};
        const Vec3 p = spec.warp(u);
        std::uint8_t label = kBackground;
        if (ellipsoid_radius2(p, spec.wm_axes) <= 1.0)
          label = kWhiteMatter;
        else if (ellipsoid_radius2(p, spec.gm_axes) <= 1.0)
          label = kGrayMatter;
        else if (ellipsoid_radius2(p, spec.csf_axes) <= 1.0)
          label = kCsf;
        if (label == kWhiteMatter && spec.lesion.present && spec.lesion.radius_voxels > 0.0) {
          const double dz = z - lesion_vox[0], dy = y - lesion_vox[1], dx = x - lesion_vox[2];
          if (dz * dz + dy * dy + dx * dx <= r2) label = kLesion;
        }
        map.labels[shape.index(z, y, x)] = label;
      }
    }
  }
  return map;
}

Volume render_contrast(const TissueMap& tissue, const ContrastFunction& fn, std::uint64_t noise_seed) {
  Volume v(tissue.dims);
  Rng rng(noise_seed);
  for (std::size_t i = 0; i < tissue.labels.size(); ++i) {
    int label = tissue.labels[i];
    if (label >= kNumTissues)
      throw Error(ErrorCode::UnknownLabel, "labels", "voxel " + std::to_string(i) + " has label " + std::to_string(label));
    if (label == kLesion && !fn.lesion_visible) label = kWhiteMatter;
    const double noise = rng.normal();
    v.voxels[i] = static_cast<float>(fn.mean[label] + fn.sigma[label] * noise);
  }
  return v;
}

std::map<std::string, Split> assign_splits(const std::vector<SubjectSpec>& subjects, std::uint64_t global_seed,
                                           double val_fraction, double test_fraction) {
  const auto n = subjects.size();
  const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_test, static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n))));

  std::vector<std::size_t> positive, negative;
  for (std::size_t i = 0; i < n; ++i) (subjects[i].lesion.present ? positive : negative).push_back(i);
  Rng rng(derive_seed(global_seed, Stream::Sampler, {0xD15C}));
  rng.shuffle(positive.begin(), positive.end());
  rng.shuffle(negative.begin(), negative.end());

  // Interleave strata so every prefix keeps the cohort's lesion ratio.
  std::vector<std::size_t> order;
  std::size_t ip = 0, in = 0;
  while (ip < positive.size() || in < negative.size()) {
    const double fp = positive.empty() ? 2.0 : static_cast<double>(ip) / static_cast<double>(positive.size());
    const double fn = negative.empty() ? 2.0 : static_cast<double>(in) / static_cast<double>(negative.size());
    if (ip < positive.size() && (fp <= fn || in >= negative.size()))
      order.push_back(positive[ip++]);
    else
      order.push_back(negative[in++]);
  }

  std::map<std::string, Split> splits;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Split s = k < n_test ? Split::Test : (k < n_test + n_val ? Split::Val : Split::Train);
    splits.emplace(subjects[order[k]].subject_id, s);
  }
  return splits;
}

DatasetManifest build_phantom_dataset(const PhantomOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.n_subjects < 1) throw Error(ErrorCode::InvalidConfig, "n_subjects", "need at least one subject");
  if (opt.timepoints < 1) throw Error(ErrorCode::InvalidConfig, "timepoints", "need at least one timepoint");
  if (opt.contrasts.empty()) throw Error(ErrorCode::InvalidConfig, "contrasts", "need at least one contrast");
  for (const auto& fn : opt.contrasts) validate_contrast(fn);

  const int n = opt.n_subjects;
  const int n_contrasts = static_cast<int>(opt.contrasts.size());
  std::vector<SubjectSpec> specs(n);
  std::vector<TissueMap> base_maps(n);
  // images[subject][timepoint * n_contrasts + contrast]
  std::vector<std::vector<Volume>> images(n);

  // Each subject owns its RNG streams, so the parallel loop is bit-identical
  // to a serial one.
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    specs[i] = generate_subject(opt.global_seed, idx, opt.lesion_prevalence);
    base_maps[i] = rasterize_tissue(specs[i], opt.shape);
    for (int t = 0; t < opt.timepoints; ++t) {
      const TissueMap map = t == 0 ? base_maps[i] : rasterize_tissue(at_timepoint(specs[i], opt.global_seed, idx, t), opt.shape);
      for (int c = 0; c < n_contrasts; ++c) {
        const auto seed = derive_seed(opt.global_seed, Stream::Noise,
                                      {idx, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(c)});
        images[i].push_back(render_contrast(map, opt.contrasts[c], seed));
      }
    }
  }

  DatasetManifest m;
  m.root = ".";
  m.base_dir = out_dir;
  m.shape = opt.shape;
  m.spacing_mm = opt.spacing_mm;
  for (const auto& fn : opt.contrasts) m.contrasts.push_back(fn.contrast_id);
  m.splits = assign_splits(specs, opt.global_seed, opt.val_fraction, opt.test_fraction);

  for (int i = 0; i < n; ++i) {
    const std::string& id = specs[i].subject_id;
    const std::string label_rel = "labels/" + id + "_tissue.nii";
    nifti::write_nifti_file(out_dir / label_rel, base_maps[i].to_volume(), opt.spacing_mm);
    m.subjects[id] = SubjectInfo{label_rel, specs[i].scale};
    for (int t = 0; t < opt.timepoints; ++t) {
      for (int c = 0; c < n_contrasts; ++c) {
        const std::string rel = "images/" + id + "_" + opt.contrasts[c].contrast_id + "_t" + std::to_string(t) + ".nii";
        nifti::write_nifti_file(out_dir / rel, images[i][t * n_contrasts + c], opt.spacing_mm);
        m.entries.push_back({id, opt.contrasts[c].contrast_id, t, rel, !specs[i].lesion.present, true});
      }
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace fmch::phantom
