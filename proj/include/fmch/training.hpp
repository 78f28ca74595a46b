// SPDX-License-Identifier: Apache-2.0
//
// Pre-training driver: configuration, subject-paired sampling, AdamW with
// warmup + cosine schedule, checkpoints and the training loop.
//
// All randomness is derived from (seed, step-level tags), so the state of a
// run at step k is fully described by its config, weights and optimizer
// moments; resuming from a checkpoint replays the exact trajectory.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmch/manifest.hpp"
#include "fmch/masking.hpp"
#include "fmch/model.hpp"
#include "fmch/objectives.hpp"
#include "fmch/phantom.hpp"

namespace fmch::training {

using Json = nlohmann::json;

struct MaskConfig {
  double ratio = 0.6;
  int patch_size = 4;
};

struct OptimConfig {
  std::string kind = "adamw";
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;
  double min_lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct IoConfig {
  std::string run_dir;
  int checkpoint_every_epochs = 0;  // 0: only the final checkpoint
};

struct PretrainConfig {
  model::UNetConfig model;
  objectives::LossWeights loss = objectives::LossWeights::for_variant(objectives::Variant::Combined);
  MaskConfig mask;
  masking::AugmentPolicy augment{{true, true, true}, true, 0.9, 1.1, 0.02};
  OptimConfig optim;
  int batch_pairs = 4;
  int epochs = 30;
  std::int64_t max_steps = 0;  // > 0 caps the run below epochs * batches
  std::uint64_t seed = 0;
  std::string manifest;
  IoConfig io;

  // InvalidConfig on any out-of-range field.
  void validate() const;
};

// Full document, every field present.
Json to_json(const PretrainConfig& config);
// Missing fields keep their defaults; unknown keys are InvalidConfig.
PretrainConfig config_from_json(const Json& doc);
PretrainConfig load_config(const std::filesystem::path& path);
// "tiny" (8^3 smoke tests), "desk" (24^3 acceptance runs) or "challenge".
PretrainConfig profile(const std::string& name);
// SHA-256 (hex) of the canonical JSON without the io section.
std::string config_hash(const PretrainConfig& config);

model::UNetConfig model_from_json(const Json& doc);
Json to_json(const model::UNetConfig& config);

std::string sha256_hex(std::string_view bytes);

struct Schedule {
  double lr = 1e-3;
  double min_lr = 1e-5;
  std::int64_t warmup_steps = 1;
  std::int64_t total_steps = 1;

  static Schedule from(const OptimConfig& optim, std::int64_t total_steps);
  // lr*(s+1)/W during warmup (reaching lr at s = W-1), then cosine down to
  // min_lr at s = total_steps-1.
  double at(std::int64_t step) const;
};

struct AdamState {
  ParameterSet<float> m;
  ParameterSet<float> v;
  std::int64_t t = 0;  // number of optimizer steps taken

  static AdamState zeros_like(const ParameterSet<float>& params);
};

// Decoupled weight decay on ".weight" tensors; only tensors touched by the
// backward pass move, so zero-weight heads stay bit-identical.  A non-empty
// `lr_scale` multiplies the learning rate per tensor.
void adamw_step(ParameterSet<float>& params, const GradientSet<float>& grads, AdamState& state, double lr,
                const OptimConfig& optim, std::span<const double> lr_scale = {});

struct PairSlot {
  const ManifestEntry* a = nullptr;
  const ManifestEntry* b = nullptr;
};

// Unordered same-(subject, timepoint) pairs of the training split; every
// slot is visited once per epoch in a seed- and epoch-dependent order.
class PairSampler {
 public:
  // InsufficientImagesPerSubject when a training subject has no timepoint
  // with two images.
  PairSampler(const DatasetManifest& manifest, std::uint64_t seed, int batch_pairs);

  std::size_t slots() const { return slots_.size(); }
  std::int64_t batches_per_epoch() const;
  std::vector<std::vector<PairSlot>> epoch(std::int64_t index) const;

 private:
  std::vector<PairSlot> slots_;
  std::uint64_t seed_;
  int batch_pairs_;
};

// In-memory copy of every volume and tissue map of a manifest subset.
class VolumeCache {
 public:
  VolumeCache(const DatasetManifest& manifest, const std::vector<std::string>& subjects);

  const Volume& image(const ManifestEntry& entry) const;
  const phantom::TissueMap* tissue(const std::string& subject_id) const;

 private:
  std::map<std::string, Volume> images_;
  std::map<std::string, phantom::TissueMap> tissues_;
};

// Augment (flips shared within the pair and with the tissue map), normalize,
// mask.  Seeds derive from (config seed, step, pair index).
std::vector<objectives::PreparedPair<float>> prepare_batch(const PretrainConfig& config, const VolumeCache& cache,
                                                           const std::vector<PairSlot>& slots, std::int64_t step);

struct TrainState {
  PretrainConfig config;
  ParameterSet<float> params;
  AdamState opt;
  std::int64_t step = 0;  // completed optimizer steps
  std::int64_t epoch = 0;
  Json metrics = Json::object();
};

// Container: "FMCK", u32 version, u64 manifest length, manifest JSON, u32
// array count, then per array: u32 name length, name, u32 rank, u32 extents,
// u64 value count, float32 little-endian values.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
// CorruptCheckpoint on any framing error; ConfigHashMismatch when
// `expected_hash` is given, differs and `allow_mismatch` is false.
TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_hash = {},
                           bool allow_mismatch = false);

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  objectives::LossReport report;

  Json to_json() const;
};

struct PretrainOptions {
  std::optional<TrainState> resume;
  std::int64_t stop_at = -1;  // stop after this many completed steps (-1: run to the end)
  std::function<void(const StepRecord&)> on_step;
};

struct PretrainResult {
  TrainState state;
  std::vector<StepRecord> log;
  std::int64_t total_steps = 0;
};

// Runs the loop and, when config.io.run_dir is set, writes
// train_log.ndjson and ckpt_<step>.fmck there.  NonFiniteLoss aborts with the
// step and term in the message.
PretrainResult pretrain(const PretrainConfig& config, const DatasetManifest& manifest, PretrainOptions options = {});

}  // namespace fmch::training
