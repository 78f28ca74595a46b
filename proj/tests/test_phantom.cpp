// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <map>
#include <numbers>

#include "doctest.h"
#include "fmch/nifti.hpp"
#include "fmch/phantom.hpp"
#include "support.hpp"

using namespace fmch;
using namespace fmch::phantom;
using fmch::testing::TempDir;

namespace {

SubjectSpec undeformed(double scale = 1.0) {
  SubjectSpec s;
  s.subject_id = "s";
  s.csf_axes = {0.8 * scale, 0.7 * scale, 0.75 * scale};
  for (int k = 0; k < 3; ++k) {
    s.gm_axes[k] = 0.8 * s.csf_axes[k];
    s.wm_axes[k] = 0.6 * s.gm_axes[k];
  }
  return s;
}

// Per-voxel oracle: test each shell separately in physical voxel units and
// take the innermost one that contains the voxel.
std::array<std::size_t, kNumTissues> brute_force_counts(const SubjectSpec& s, Dims3 shape) {
  std::array<std::size_t, kNumTissues> counts{};
  const std::array<int, 3> n{shape.d, shape.h, shape.w};
  for (int z = 0; z < n[0]; ++z)
    for (int y = 0; y < n[1]; ++y)
      for (int x = 0; x < n[2]; ++x) {
        const std::array<int, 3> idx{z, y, x};
        Vec3 u{};
        for (int k = 0; k < 3; ++k) u[k] = (2.0 * idx[k] + 1.0 - n[k]) / n[k];
        Vec3 p{};
        for (int j = 0; j < 3; ++j) {
          p[j] = u[j] - s.center_offset[j];
          for (int k = 0; k < 3; ++k) p[j] += s.deform_amplitude[j][k] * std::sin(std::numbers::pi * u[k] + s.deform_phase[j][k]);
        }
        auto inside = [&](const Vec3& axes) {
          double r = 0.0;
          for (int k = 0; k < 3; ++k) r += p[k] * p[k] / (axes[k] * axes[k]);
          return r <= 1.0;
        };
        int label = inside(s.wm_axes) ? 3 : inside(s.gm_axes) ? 2 : inside(s.csf_axes) ? 1 : 0;
        if (label == 3 && s.lesion.present) {
          double d2 = 0.0;
          for (int k = 0; k < 3; ++k) {
            const double dv = (u[k] - s.lesion.center[k]) * n[k] / 2.0;
            d2 += dv * dv;
          }
          if (d2 <= s.lesion.radius_voxels * s.lesion.radius_voxels) label = 4;
        }
        ++counts[label];
      }
  return counts;
}

ContrastFunction noiseless(ContrastFunction fn) {
  fn.sigma.fill(0.0);
  return fn;
}

}  // namespace

TEST_CASE("generate_subject") {
  SUBCASE("deterministic") { CHECK(generate_subject(0, 0, 0.5) == generate_subject(0, 0, 0.5)); }
  SUBCASE("distinct indices differ") { CHECK_FALSE(generate_subject(0, 0, 0.5) == generate_subject(0, 1, 0.5)); }
  SUBCASE("prevalence 0 and 1") {
    for (std::uint64_t i = 0; i < 200; ++i) {
      CHECK_FALSE(generate_subject(3, i, 0.0).lesion.present);
      CHECK(generate_subject(3, i, 1.0).lesion.present);
    }
  }
  SUBCASE("prevalence 0.5 over 1000 subjects") {
    int lesions = 0;
    for (std::uint64_t i = 0; i < 1000; ++i) lesions += generate_subject(0, i, 0.5).lesion.present;
    CHECK(lesions >= 450);
    CHECK(lesions <= 550);
  }
  SUBCASE("out-of-range prevalence is clamped") {
    CHECK_FALSE(generate_subject(0, 0, -1.0).lesion.present);
    CHECK(generate_subject(0, 0, 7.0).lesion.present);
  }
  SUBCASE("shells nested, scale in range, lesion inside white matter") {
    for (std::uint64_t i = 0; i < 300; ++i) {
      const auto s = generate_subject(9, i, 0.5);
      CAPTURE(i);
      CHECK(s.shells_nested());
      CHECK(s.scale >= kMinScale);
      CHECK(s.scale <= kMaxScale);
      if (!s.lesion.present) continue;
      const Vec3 p = s.warp(s.lesion.center);
      double r = 0.0;
      for (int k = 0; k < 3; ++k) r += p[k] * p[k] / (s.wm_axes[k] * s.wm_axes[k]);
      CHECK(r < 1.0);
    }
  }
  SUBCASE("timepoint 0 is the base spec, later ones deform slightly") {
    const auto s = generate_subject(2, 5, 0.5);
    CHECK(at_timepoint(s, 2, 5, 0) == s);
    const auto t1 = at_timepoint(s, 2, 5, 1);
    CHECK_FALSE(t1 == s);
    CHECK(t1.csf_axes == s.csf_axes);
    CHECK(t1.lesion.center == s.lesion.center);
  }
}

TEST_CASE("rasterize_tissue") {
  SUBCASE("undeformed center is white matter") {
    const auto t = rasterize_tissue(undeformed(), Dims3::cube(32));
    CHECK(t.labels[Dims3::cube(32).index(16, 16, 16)] == kWhiteMatter);
    CHECK(t.labels[0] == kBackground);
  }
  SUBCASE("zero-radius lesion leaves no lesion voxels") {
    auto s = undeformed();
    s.lesion.present = true;
    s.lesion.radius_voxels = 0.0;
    CHECK(rasterize_tissue(s, Dims3::cube(24)).histogram()[kLesion] == 0);
  }
  SUBCASE("counts equal the per-voxel oracle") {
    for (std::uint64_t i = 0; i < 6; ++i) {
      const auto s = generate_subject(0, i, 0.5);
      CAPTURE(i);
      CHECK(rasterize_tissue(s, Dims3::cube(32)).histogram() == brute_force_counts(s, Dims3::cube(32)));
    }
    const auto s = generate_subject(0, 0, 0.5);
    const Dims3 odd{20, 27, 31};
    CHECK(rasterize_tissue(s, odd).histogram() == brute_force_counts(s, odd));
  }
  SUBCASE("label 4 occurs iff the lesion is present") {
    for (std::uint64_t i = 0; i < 60; ++i) {
      const auto s = generate_subject(4, i, 0.5);
      for (int n : {8, 24}) {
        CAPTURE(i);
        CAPTURE(n);
        CHECK((rasterize_tissue(s, Dims3::cube(n)).histogram()[kLesion] > 0) == s.lesion.present);
      }
    }
  }
  SUBCASE("all shells appear and labels stay in the code set") {
    const auto t = rasterize_tissue(generate_subject(1, 1, 0.5), Dims3::cube(24));
    for (int label = 0; label < 4; ++label) CHECK(t.histogram()[label] > 0);
    for (auto l : t.labels) CHECK(l < kNumTissues);
  }
  SUBCASE("ShapeTooSmall") {
    CHECK_THROWS_WITH_AS(rasterize_tissue(undeformed(), Dims3{8, 7, 8}), doctest::Contains("ShapeTooSmall"), Error);
  }
}

TEST_CASE("render_contrast") {
  const auto tissue = rasterize_tissue(generate_subject(0, 1, 1.0), Dims3::cube(24));
  REQUIRE(tissue.histogram()[kLesion] > 0);

  SUBCASE("noiseless render is a relabeling") {
    ContrastFunction fn;
    fn.mean = {0, 1, 2, 3, 4};
    fn.lesion_visible = true;
    const auto v = render_contrast(tissue, fn, 7);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) CHECK(v.voxels[i] == static_cast<float>(tissue.labels[i]));
  }
  SUBCASE("a hidden lesion renders exactly like healthy white matter") {
    auto healthy = tissue;
    for (auto& l : healthy.labels)
      if (l == kLesion) l = kWhiteMatter;
    const auto fn = noiseless(default_contrast("c1"));
    CHECK(render_contrast(tissue, fn, 1).voxels == render_contrast(healthy, fn, 1).voxels);
  }
  SUBCASE("sigma 0.1: mean absolute deviation near sigma * sqrt(2/pi)") {
    ContrastFunction fn;
    fn.mean = {0, 1, 2, 3, 4};
    fn.sigma.fill(0.1);
    const auto clean = render_contrast(tissue, noiseless(fn), 0);
    const auto noisy = render_contrast(tissue, fn, 123);
    double mad = 0.0;
    for (std::size_t i = 0; i < clean.voxels.size(); ++i) mad += std::abs(noisy.voxels[i] - clean.voxels[i]);
    mad /= static_cast<double>(clean.voxels.size());
    CHECK(mad >= 0.06);
    CHECK(mad <= 0.10);
  }
  SUBCASE("deterministic per noise seed") {
    const auto fn = default_contrast("c2");
    CHECK(render_contrast(tissue, fn, 5).voxels == render_contrast(tissue, fn, 5).voxels);
    CHECK(render_contrast(tissue, fn, 5).voxels != render_contrast(tissue, fn, 6).voxels);
  }
  SUBCASE("UnknownLabel") {
    auto bad = tissue;
    bad.labels[3] = 5;
    CHECK_THROWS_WITH_AS(render_contrast(bad, default_contrast("c1"), 0), doctest::Contains("UnknownLabel"), Error);
  }
  SUBCASE("noiseless contrasts partition voxels identically, up to lesion visibility") {
    // Same partition <=> value pairs form a bijection between level sets.
    auto same_partition = [&](const Volume& a, const Volume& b, bool skip_lesion) {
      std::map<float, float> fwd, bwd;
      for (std::size_t i = 0; i < a.voxels.size(); ++i) {
        if (skip_lesion && tissue.labels[i] == kLesion) continue;
        const float x = a.voxels[i], y = b.voxels[i];
        if (fwd.emplace(x, y).first->second != y || bwd.emplace(y, x).first->second != x) return false;
      }
      return fwd.size() >= 4;
    };
    const auto c1 = render_contrast(tissue, noiseless(default_contrast("c1")), 0);
    const auto c2 = render_contrast(tissue, noiseless(default_contrast("c2")), 0);
    const auto c3 = render_contrast(tissue, noiseless(default_contrast("c3")), 0);
    CHECK(same_partition(c1, c3, false));
    CHECK(same_partition(c1, c2, true));
    CHECK_FALSE(same_partition(c1, c2, false));
  }
}

TEST_CASE("contrast validation") {
  CHECK_NOTHROW(validate_contrast_set(default_contrasts({"c1", "c2", "c3"})));
  CHECK_THROWS_AS(validate_contrast_set(default_contrasts({"c1", "c3"})), Error);
  CHECK_THROWS_AS(validate_contrast_set(default_contrasts({"c2"})), Error);
  CHECK_THROWS_AS(default_contrast("c9"), Error);
  auto close = default_contrast("c1");
  close.mean[kGrayMatter] = close.mean[kCsf] + 0.25;
  CHECK_THROWS_AS(validate_contrast(close), Error);
  // Hidden lesion means are not checked against white matter.
  auto hidden = default_contrast("c1");
  hidden.mean[kLesion] = hidden.mean[kWhiteMatter];
  CHECK_NOTHROW(validate_contrast(hidden));
}

TEST_CASE("tissue maps round trip through float volumes") {
  const auto t = rasterize_tissue(generate_subject(0, 2, 1.0), Dims3::cube(16));
  CHECK(tissue_from_volume(t.to_volume()) == t);
  auto v = t.to_volume();
  v.voxels[0] = 1.5f;
  CHECK_THROWS_AS(tissue_from_volume(v), Error);
}

TEST_CASE("build_phantom_dataset") {
  PhantomOptions o;
  o.shape = Dims3::cube(16);

  SUBCASE("4 subjects x 2 contrasts x 1 timepoint") {
    TempDir dir("phantom_counts");
    const auto m = build_phantom_dataset(o, dir.path());
    CHECK(m.entries.size() == 8);
    std::size_t images = 0, labels = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path() / "images")) images += e.is_regular_file();
    for (const auto& e : std::filesystem::directory_iterator(dir.path() / "labels")) labels += e.is_regular_file();
    CHECK(images == 8);
    CHECK(labels == 4);
  }
  SUBCASE("two runs give byte-identical trees") {
    o.timepoints = 2;
    TempDir a("phantom_a"), b("phantom_b");
    build_phantom_dataset(o, a.path());
    build_phantom_dataset(o, b.path());
    std::size_t files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
      if (!e.is_regular_file()) continue;
      ++files;
      const auto rel = std::filesystem::relative(e.path(), a.path());
      CAPTURE(rel.string());
      CHECK(nifti::read_bytes(e.path()) == nifti::read_bytes(b.path() / rel));
    }
    CHECK(files == 4 * 2 * 2 + 4 + 1);
  }
  SUBCASE("later timepoints share anatomy family but differ") {
    o.timepoints = 2;
    TempDir dir("phantom_tp");
    const auto m = build_phantom_dataset(o, dir.path());
    const auto t0 = nifti::read_nifti_file(m.resolve(m.find("s0000", "c1", 0)->path)).volume;
    const auto t1 = nifti::read_nifti_file(m.resolve(m.find("s0000", "c1", 1)->path)).volume;
    double diff = 0.0;
    std::size_t differ = 0;
    for (std::size_t i = 0; i < t0.voxels.size(); ++i) {
      diff += std::abs(t0.voxels[i] - t1.voxels[i]);
      differ += t0.voxels[i] != t1.voxels[i];
    }
    CHECK(differ > 0);
    CHECK(diff / static_cast<double>(t0.voxels.size()) < 0.3);
  }
  SUBCASE("40 subjects at 24^3, seed 7: lesion count, health labels, splits") {
    o.n_subjects = 40;
    o.shape = Dims3::cube(24);
    o.global_seed = 7;
    TempDir dir("phantom_40");
    const auto m = build_phantom_dataset(o, dir.path());
    int expected = 0;
    for (std::uint64_t i = 0; i < 40; ++i) expected += generate_subject(7, i, o.lesion_prevalence).lesion.present;
    int lesion_subjects = 0;
    for (const auto& id : m.subject_ids()) {
      const auto tissue = tissue_from_volume(nifti::read_nifti_file(m.resolve(m.subjects.at(id).tissue_map)).volume);
      const bool has_lesion = tissue.histogram()[kLesion] > 0;
      lesion_subjects += has_lesion;
      for (const auto* e : m.entries_for(id)) CHECK(e->health_status == !has_lesion);
    }
    CHECK(lesion_subjects == expected);
    CHECK(m.subjects_in(Split::Test).size() == 10);
    CHECK(m.subjects_in(Split::Val).size() == 10);
    CHECK(m.subjects_in(Split::Train).size() == 20);
    // Health-stratified: each split's lesion count within one of its share.
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
      const auto ids = m.subjects_in(s);
      int lesions = 0;
      for (const auto& id : ids) lesions += !*m.entries_for(id).front()->health_status;
      const double share = static_cast<double>(expected) * static_cast<double>(ids.size()) / 40.0;
      CHECK(std::abs(lesions - share) <= 1.0);
    }
  }
  SUBCASE("invalid options") {
    TempDir dir("phantom_bad");
    o.n_subjects = 0;
    CHECK_THROWS_AS(build_phantom_dataset(o, dir.path()), Error);
  }
}
