// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "doctest.h"
#include "fmch/training.hpp"
#include "support.hpp"

using namespace fmch;
using namespace fmch::training;
using fmch::testing::TempDir;

namespace {

// Metadata-only manifest: n subjects, all in train, given contrasts, one timepoint.
DatasetManifest synthetic_manifest(int subjects, const std::vector<std::string>& contrasts, int timepoints = 1) {
  DatasetManifest m;
  m.shape = Dims3::cube(8);
  m.contrasts = contrasts;
  for (int s = 0; s < subjects; ++s) {
    const std::string id = "s" + std::to_string(s);
    m.splits[id] = Split::Train;
    for (int t = 0; t < timepoints; ++t)
      for (const auto& c : contrasts) m.entries.push_back({id, c, t, id + "_" + c + "_t" + std::to_string(t), false, false});
  }
  return m;
}

PretrainConfig tiny_run(std::uint64_t seed = 3) {
  PretrainConfig c = profile("tiny");
  c.seed = seed;
  c.epochs = 2;
  return c;
}

struct PhantomFixture {
  TempDir dir{"train"};
  DatasetManifest manifest;
  PhantomFixture() {
    phantom::PhantomOptions o;
    o.n_subjects = 8;
    o.shape = Dims3::cube(8);
    o.global_seed = 11;
    manifest = phantom::build_phantom_dataset(o, dir.path() / "data");
  }
};

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("schedule: warmup then cosine") {
  OptimConfig o;
  o.lr = 2.0;
  o.min_lr = 0.5;
  o.warmup_fraction = 0.1;
  const auto s = Schedule::from(o, 100);
  CHECK(s.warmup_steps == 10);
  for (std::int64_t k = 0; k < 100; ++k) {
    double want;
    if (k < 10) want = 2.0 * (k + 1) / 10.0;
    else want = 0.5 + 0.75 * (1.0 + std::cos(std::numbers::pi * (k - 9) / 90.0));
    CHECK(s.at(k) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(s.at(9) == doctest::Approx(2.0));
  CHECK(s.at(99) == doctest::Approx(0.5));
  CHECK(s.at(54) == doctest::Approx(1.25));
  // The peak is the maximum and the tail never increases.
  for (std::int64_t k = 10; k < 100; ++k) CHECK(s.at(k) <= s.at(k - 1) + 1e-15);

  SUBCASE("tiny runs") {
    const auto one = Schedule::from(o, 1);
    CHECK(one.at(0) == doctest::Approx(2.0));
    o.warmup_fraction = 0.0;
    const auto nw = Schedule::from(o, 5);
    CHECK(nw.warmup_steps == 1);
    CHECK(nw.at(0) == doctest::Approx(2.0));
    CHECK(nw.at(4) == doctest::Approx(0.5));
  }
}

TEST_CASE("adamw: first step, decay only on weights, untouched tensors frozen") {
  ParameterSet<float> p;
  p.add("a.weight", {2}, 1.0f);
  p.add("a.bias", {2}, 1.0f);
  p.add("b.weight", {1}, 1.0f);
  GradientSet<float> g(p.specs());
  g["a.weight"][0] = 0.5f;
  g["a.weight"][1] = 0.0f;
  g["a.bias"][0] = -2.0f;
  g["a.bias"][1] = 0.0f;
  auto st = AdamState::zeros_like(p);
  OptimConfig o;
  o.weight_decay = 0.1;
  const double lr = 0.01;
  adamw_step(p, g, st, lr, o);
  // First bias-corrected Adam step is lr * g / (|g| + eps).
  const double step = lr * 1.0 / (1.0 + o.eps / 0.5);
  CHECK(p["a.weight"][0] == doctest::Approx(1.0 - lr * 0.1 - step).epsilon(1e-6));
  CHECK(p["a.weight"][1] == doctest::Approx(1.0 - lr * 0.1).epsilon(1e-6));
  CHECK(p["a.bias"][0] == doctest::Approx(1.0 + lr).epsilon(1e-6));
  CHECK(p["a.bias"][1] == 1.0f);
  CHECK(p["b.weight"][0] == 1.0f);
  CHECK(st.t == 1);
}

TEST_CASE("pair sampler") {
  SUBCASE("4 subjects x 2 contrasts, batch 2 -> 2 batches covering every subject once") {
    const auto m = synthetic_manifest(4, {"c1", "c2"});
    PairSampler s(m, 7, 2);
    CHECK(s.slots() == 4);
    CHECK(s.batches_per_epoch() == 2);
    for (int e = 0; e < 3; ++e) {
      const auto batches = s.epoch(e);
      REQUIRE(batches.size() == 2);
      std::set<std::string> seen;
      for (const auto& b : batches)
        for (const auto& slot : b) {
          CHECK(slot.a->subject_id == slot.b->subject_id);
          CHECK(slot.a->timepoint == slot.b->timepoint);
          CHECK(slot.a->contrast_id != slot.b->contrast_id);
          seen.insert(slot.a->subject_id);
        }
      CHECK(seen.size() == 4);
    }
  }
  SUBCASE("partial last batch is kept") {
    const auto m = synthetic_manifest(5, {"c1", "c2"});
    PairSampler s(m, 7, 2);
    const auto batches = s.epoch(0);
    CHECK(batches.size() == 3);
    CHECK(batches.back().size() == 1);
  }
  SUBCASE("three contrasts give three unordered pairs per subject") {
    PairSampler s(synthetic_manifest(2, {"c1", "c2", "c3"}), 0, 4);
    CHECK(s.slots() == 6);
  }
  SUBCASE("pairs never cross timepoints") {
    PairSampler s(synthetic_manifest(2, {"c1", "c2"}, 2), 0, 1);
    CHECK(s.slots() == 4);
    for (const auto& b : s.epoch(0)) CHECK(b[0].a->timepoint == b[0].b->timepoint);
  }
  SUBCASE("deterministic per (seed, epoch)") {
    const auto m = synthetic_manifest(6, {"c1", "c2"});
    auto key = [](const std::vector<std::vector<PairSlot>>& bs) {
      std::string k;
      for (const auto& b : bs)
        for (const auto& s : b) k += s.a->subject_id + s.a->contrast_id + "|";
      return k;
    };
    PairSampler s1(m, 7, 2), s2(m, 7, 2), s3(m, 8, 2);
    CHECK(key(s1.epoch(0)) == key(s2.epoch(0)));
    CHECK(key(s1.epoch(1)) == key(s2.epoch(1)));
    const bool differs = key(s1.epoch(0)) != key(s1.epoch(1)) || key(s1.epoch(0)) != key(s3.epoch(0));
    CHECK(differs);
  }
  SUBCASE("single-contrast subject is rejected") {
    auto m = synthetic_manifest(3, {"c1", "c2"});
    m.entries.erase(m.entries.begin());  // s0 keeps only c2
    try {
      PairSampler s(m, 0, 2);
      FAIL("expected InsufficientImagesPerSubject");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InsufficientImagesPerSubject);
      CHECK(e.field() == "s0");
    }
  }
  SUBCASE("only the training split is sampled") {
    auto m = synthetic_manifest(4, {"c1", "c2"});
    m.splits["s0"] = Split::Val;
    m.splits["s1"] = Split::Test;
    PairSampler s(m, 0, 8);
    CHECK(s.slots() == 2);
    const auto batches = s.epoch(0);
    for (const auto& slot : batches[0]) CHECK((slot.a->subject_id == "s2" || slot.a->subject_id == "s3"));
  }
}

TEST_CASE("config json round trip, validation and hash") {
  for (const char* name : {"tiny", "desk", "challenge"}) {
    const auto c = profile(name);
    const auto back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
  }
  auto c = profile("desk");
  const auto h = config_hash(c);
  CHECK(h.size() == 64);
  c.io.run_dir = "/somewhere/else";
  CHECK(config_hash(c) == h);
  c.optim.lr *= 2;
  CHECK(config_hash(c) != h);

  auto doc = to_json(profile("desk"));
  doc["optim"]["learning_rate"] = 1.0;
  CHECK_THROWS_WITH_AS(config_from_json(doc), doctest::Contains("optim.learning_rate"), Error);
  doc = to_json(profile("desk"));
  doc["mask"]["ratio"] = 1.5;
  CHECK_THROWS_AS(config_from_json(doc), Error);
  doc = to_json(profile("desk"));
  doc["loss"]["variant"] = "ssl3d";
  doc["loss"]["swap"] = 1.0;
  CHECK_THROWS_AS(config_from_json(doc), Error);
  CHECK_THROWS_AS(profile("huge"), Error);

  // A partial document keeps defaults; variant-only loss picks variant defaults.
  const auto partial = config_from_json(Json{{"loss", {{"variant", "fomo25"}}}, {"seed", 9}});
  CHECK(partial.seed == 9);
  CHECK(partial.loss.seg == 0.0);
  CHECK(partial.loss.path == 0.0);
  CHECK(partial.loss.swap == 1.0);
}

TEST_CASE("sha256 known answers") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("profile parameter counts") {
  CHECK(model::count_parameters(profile("desk").model) == 31199);
  const auto challenge = model::count_parameters(profile("challenge").model);
  CHECK(challenge >= 15'000'000);
  CHECK(challenge <= 25'000'000);
  CHECK(model::count_parameters(profile("tiny").model) < 5000);
}

TEST_CASE("checkpoint round trip and corruption") {
  TempDir dir("ckpt");
  TrainState st;
  st.config = tiny_run();
  st.params = model::init_parameters<float>(st.config.model, 5);
  st.opt = AdamState::zeros_like(st.params);
  Rng rng(1);
  for (std::size_t k = 0; k < st.opt.m.size(); ++k)
    for (auto& v : st.opt.m.at(k)) v = static_cast<float>(rng.normal());
  st.opt.t = 17;
  st.step = 17;
  st.epoch = 4;
  st.metrics = Json{{"total", 0.25}};

  const auto p1 = dir.path() / "a.fmck", p2 = dir.path() / "b.fmck";
  save_checkpoint(st, p1);
  const auto back = load_checkpoint(p1, config_hash(st.config));
  CHECK(back.params == st.params);
  CHECK(back.opt.m == st.opt.m);
  CHECK(back.opt.v == st.opt.v);
  CHECK(back.step == 17);
  CHECK(back.epoch == 4);
  CHECK(back.opt.t == 17);
  CHECK(back.metrics == st.metrics);
  save_checkpoint(back, p2);
  CHECK(read_bytes(p1) == read_bytes(p2));

  SUBCASE("truncated") {
    const auto bytes = read_bytes(p1);
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
      std::ofstream(p2, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(cut));
      try {
        load_checkpoint(p2);
        FAIL("expected CorruptCheckpoint");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::CorruptCheckpoint);
      }
    }
  }
  SUBCASE("trailing bytes and bad magic") {
    auto bytes = read_bytes(p1);
    std::ofstream(p2, std::ios::binary | std::ios::trunc) << bytes << "x";
    CHECK_THROWS_AS(load_checkpoint(p2), Error);
    bytes[0] = 'X';
    std::ofstream(p2, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH(load_checkpoint(p2), doctest::Contains("CorruptCheckpoint"));
  }
  SUBCASE("config mismatch") {
    auto other = st.config;
    other.optim.lr = 0.5;
    try {
      load_checkpoint(p1, config_hash(other));
      FAIL("expected ConfigHashMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigHashMismatch);
    }
    CHECK_NOTHROW(load_checkpoint(p1, config_hash(other), true));
  }
  SUBCASE("edited stored config no longer matches its stored hash") {
    auto bytes = read_bytes(p1);
    const auto at = bytes.find("\"batch_pairs\":2");
    REQUIRE(at != std::string::npos);
    bytes[at + 14] = '3';
    std::ofstream(p2, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH(load_checkpoint(p2), doctest::Contains("CorruptCheckpoint"));
  }
}

TEST_CASE("prepare_batch") {
  PhantomFixture fx;
  const auto config = tiny_run();
  const VolumeCache cache(fx.manifest, fx.manifest.subjects_in(Split::Train));
  PairSampler sampler(fx.manifest, config.seed, config.batch_pairs);
  const auto slots = sampler.epoch(0)[0];
  const auto b1 = prepare_batch(config, cache, slots, 0);
  const auto b2 = prepare_batch(config, cache, slots, 0);
  const auto b3 = prepare_batch(config, cache, slots, 1);
  REQUIRE(b1.size() == slots.size());
  for (std::size_t p = 0; p < b1.size(); ++p) {
    const auto& a = b1[p].a;
    REQUIRE(b1[p].b);
    CHECK(a.id.subject_id == b1[p].b->id.subject_id);
    CHECK(a.full.storage() == b2[p].a.full.storage());
    CHECK(a.mask.values == b2[p].a.mask.values);
    CHECK(a.mask.values != b3[p].a.mask.values);
    REQUIRE(a.tissue);
    CHECK(a.tissue == b1[p].b->tissue);  // shared flips
    REQUIRE(a.lesion);
    const auto* entry = fx.manifest.find(a.id.subject_id, a.id.contrast_id, a.id.timepoint);
    CHECK(*a.lesion == (*entry->health_status ? 0 : 1));
    // Masked input is zero exactly where the mask is set, and equals the full volume elsewhere.
    std::size_t masked = 0;
    for (std::size_t i = 0; i < a.full.size(); ++i) {
      if (a.mask.values[i]) {
        CHECK(a.masked.storage()[i] == 0.0f);
        ++masked;
      } else {
        CHECK(a.masked.storage()[i] == a.full.storage()[i]);
      }
    }
    CHECK(masked == masking::masked_patch_count(8, config.mask.ratio) * 64);
  }
}

TEST_CASE("pretrain: determinism, resume, outputs") {
  PhantomFixture fx;
  const auto config = tiny_run();
  const auto r1 = pretrain(config, fx.manifest);
  const auto r2 = pretrain(config, fx.manifest);
  REQUIRE(r1.total_steps == 4);  // 4 train pairs, batch 2, 2 epochs
  CHECK(r1.state.params == r2.state.params);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].report.total == r2.log[i].report.total);

  SUBCASE("resume from a mid-run checkpoint replays the trajectory") {
    TempDir dir("resume");
    PretrainOptions first;
    first.stop_at = 3;
    auto half = pretrain(config, fx.manifest, first);
    CHECK(half.state.step == 3);
    save_checkpoint(half.state, dir.path() / "mid.fmck");
    PretrainOptions second;
    second.resume = load_checkpoint(dir.path() / "mid.fmck", config_hash(config));
    const auto rest = pretrain(config, fx.manifest, second);
    CHECK(rest.state.step == 4);
    CHECK(rest.state.params == r1.state.params);
    CHECK(rest.state.opt.m == r1.state.opt.m);
    REQUIRE(rest.log.size() == 1);
    CHECK(rest.log[0].report.total == r1.log[3].report.total);

    auto other = config;
    other.seed = 4;
    PretrainOptions bad;
    bad.resume = half.state;
    CHECK_THROWS_AS(pretrain(other, fx.manifest, bad), Error);
  }

  SUBCASE("run dir outputs") {
    TempDir dir("run");
    auto c = config;
    c.io.run_dir = (dir.path() / "run").string();
    c.io.checkpoint_every_epochs = 1;
    const auto r = pretrain(c, fx.manifest);
    CHECK(r.state.params == r1.state.params);
    std::ifstream log(dir.path() / "run" / "train_log.ndjson");
    std::string line;
    int n = 0;
    while (std::getline(log, line)) {
      const auto j = Json::parse(line);
      CHECK(j.at("step") == n);
      CHECK(j.contains("lr"));
      CHECK(j.contains("total"));
      CHECK(j.contains("mae"));
      ++n;
    }
    CHECK(n == 4);
    CHECK(std::filesystem::exists(dir.path() / "run" / "ckpt_2.fmck"));
    CHECK(std::filesystem::exists(dir.path() / "run" / "ckpt_4.fmck"));
    const auto final_state = load_checkpoint(dir.path() / "run" / "ckpt_4.fmck", config_hash(c));
    CHECK(final_state.params == r1.state.params);
  }
}

TEST_CASE("pretrain: zero-weight heads stay at their initial values") {
  PhantomFixture fx;
  auto c = tiny_run();
  c.loss = objectives::LossWeights::for_variant(objectives::Variant::Fomo25);
  const auto init = model::init_parameters<float>(c.model, c.seed);
  const auto r = pretrain(c, fx.manifest);
  for (const char* name : {"anat_head.weight", "anat_head.bias", "path_head.weight", "path_head.bias"}) {
    const auto a = init[name], b = r.state.params[name];
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  const auto a = init["out.weight"], b = r.state.params["out.weight"];
  CHECK_FALSE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST_CASE("pretrain: reconstruction loss falls on a tiny dataset") {
  PhantomFixture fx;
  auto c = tiny_run();
  c.loss = objectives::LossWeights::for_variant(objectives::Variant::Ssl3d);
  c.epochs = 40;
  c.optim.lr = 3e-3;
  const auto r = pretrain(c, fx.manifest);
  REQUIRE(r.log.size() == 80);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += r.log[static_cast<std::size_t>(i)].report.terms.at("mae");
    tail += r.log[r.log.size() - 1 - static_cast<std::size_t>(i)].report.terms.at("mae");
  }
  MESSAGE("mae head " << head / 10 << " tail " << tail / 10);
  CHECK(tail < 0.7 * head);
}

TEST_CASE("pretrain: divergence is reported as NonFiniteLoss") {
  PhantomFixture fx;
  auto c = tiny_run();
  c.optim.lr = 1e30;
  c.optim.min_lr = 1e30;
  c.optim.warmup_fraction = 0.0;
  try {
    pretrain(c, fx.manifest);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLoss);
  }
}
