// SPDX-License-Identifier: Apache-2.0
//
// Few-shot adaptation of a pretrained network to segmentation,
// classification and regression, the matching metrics, and linear probes
// on pooled latents.
//
// Labeled subjects come from the "val" split and are scored on the "test"
// split, so nothing seen during pre-training (the "train" split) or
// fine-tuning is ever evaluated.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmch/manifest.hpp"
#include "fmch/model.hpp"
#include "fmch/training.hpp"

namespace fmch::finetune {

using Json = nlohmann::json;

// ---- metrics -------------------------------------------------------------

// 2|A n B| / (|A| + |B|) over nonzero voxels; 1.0 when both are empty.
// ShapeMismatch on unequal sizes.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
// EmptyInput on zero length, ShapeMismatch on unequal lengths.
double accuracy(std::span<const int> preds, std::span<const int> labels);
double mae(std::span<const double> preds, std::span<const double> targets);

// 1 - soft Dice of the lesion channel (softmax channel 1) with smoothing
// `eps`; `grad` receives d/d(logits).  Logits are (2, D, H, W).
template <class T>
T soft_dice_loss(const FeatureMap<T>& logits, const std::vector<int>& labels, T eps = T(1),
                 FeatureMap<T>* grad = nullptr);

// ---- tasks ---------------------------------------------------------------

enum class TaskKind { Segmentation, Classification, Regression };
std::string to_string(TaskKind kind);       // "seg", "cls", "reg"
TaskKind task_from_string(const std::string& s);  // InvalidConfig on anything else
std::string metric_name(TaskKind kind);     // "dice", "accuracy", "mae"
bool higher_is_better(TaskKind kind);

enum class InitKind { Pretrained, Random };
std::string to_string(InitKind kind);

struct FinetuneBudget {
  int epochs = 40;
  double lr_factor = 0.1;          // relative to the pre-training lr
  double head_lr_multiplier = 10;  // fresh head parameters only
  double weight_decay = 1e-4;
  std::string contrast = "c2";     // input contrast (timepoint 0)
};

struct TaskSpec {
  TaskKind kind = TaskKind::Segmentation;
  int k_shot = 4;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  InitKind init = InitKind::Pretrained;
  FinetuneBudget budget;

  // InvalidConfig on k_shot < 1, no seeds, or a non-positive budget.
  void validate() const;
};

struct TaskModel {
  TaskKind kind = TaskKind::Segmentation;
  model::UNetConfig config;  // out_channels = 2 for segmentation
  ParameterSet<float> params;
  std::vector<std::string> head_params;  // freshly initialized tensors
};

// Segmentation keeps the whole encoder-decoder and swaps in a fresh
// two-class output projection; classification and regression pool the full
// bottleneck into a fresh affine "task" head.  IncompatibleShape when the
// dataset shape does not fit the network.
TaskModel attach_head(const model::UNetConfig& config, const ParameterSet<float>& params, TaskKind kind,
                      Dims3 dataset_shape, std::uint64_t head_seed);

// One labeled example, normalized and ready for the network.
struct TaskSample {
  std::string subject_id;
  FeatureMap<float> input;
  std::vector<int> lesion_mask;  // segmentation
  int lesion = 0;                // classification
  double scale = 0.0;            // regression
};

// Subjects of `split` usable for the task (input image present and label known).
std::vector<std::string> eligible_subjects(const DatasetManifest& manifest, Split split, const TaskSpec& spec);
// k subjects from the val split, alternating lesion / healthy after a seeded
// shuffle.  InsufficientLabeledSubjects when fewer than k are eligible.
std::vector<std::string> select_few_shot(const DatasetManifest& manifest, const TaskSpec& spec, std::uint64_t seed);
std::vector<TaskSample> load_samples(const DatasetManifest& manifest, const std::vector<std::string>& subjects,
                                     const TaskSpec& spec);

struct TaskTarget {
  std::vector<int> lesion_mask;
  int lesion = 0;
  double value = 0.0;  // standardized regression target
};

// Segmentation: cross-entropy + soft Dice.  Classification: logistic loss on
// the pooled-bottleneck logit.  Regression: squared error of the pooled
// prediction.  Accumulates parameter gradients when `grads` is given.
template <class T>
double task_loss(const model::UNet<T>& net, const ParameterSet<T>& params, TaskKind kind, const FeatureMap<T>& input,
                 const TaskTarget& target, GradientSet<T>* grads = nullptr);

struct Prediction {
  std::vector<std::uint8_t> mask;  // segmentation
  double value = 0.0;              // logit (classification) or scale (regression)
};

struct FinetuneResult {
  TaskModel model;
  std::vector<std::string> train_subjects;
  std::vector<std::string> batch_log;  // subject of every optimizer step, in order
  std::vector<double> losses;
  double target_mean = 0.0;  // regression target standardization
  double target_sd = 1.0;
};

// Fixed-budget full fine-tuning; deterministic per seed.
FinetuneResult few_shot_finetune(TaskModel task_model, const TaskSpec& spec, const DatasetManifest& manifest,
                                 double pretrain_lr, std::uint64_t seed);

Prediction predict(const FinetuneResult& result, const TaskSample& sample);

struct Evaluation {
  double metric = 0.0;
  std::vector<std::string> subjects;
  std::vector<double> per_subject;  // Dice, correctness or absolute error
};

Evaluation evaluate(const FinetuneResult& result, const std::vector<TaskSample>& test);

// ---- reports -------------------------------------------------------------

struct SeedRow {
  std::uint64_t seed = 0;
  double pretrained = 0.0;
  double random = 0.0;
};

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (0 for one value)
};
Summary summarize(std::span<const double> values);

struct MetricReport {
  TaskKind task = TaskKind::Segmentation;
  int k_shot = 0;
  std::vector<SeedRow> rows;

  Summary pretrained() const;
  Summary random() const;
  // Mean pretrained strictly better than mean random.
  bool pretrained_wins() const;

  Json to_json() const;
  static MetricReport from_json(const Json& doc);
  // Aligned plain text: header, one row per seed, then a mean +- sd row.
  std::string table() const;
};

// Runs every seed from the pretrained weights and from random init with
// identical budgets, head init and labeled subjects.
MetricReport compare_inits(const training::TrainState& checkpoint, const DatasetManifest& manifest, TaskSpec spec);

// ---- probes --------------------------------------------------------------

struct ProbeSpec {
  int iterations = 300;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  double holdout_fraction = 0.5;
  std::uint64_t seed = 0;
  int shuffles = 20;  // shuffled-label runs for the chance band
};

struct ProbeSample {
  std::vector<double> features;
  int label = 0;
  std::string group;  // samples sharing a group land on the same side of the split
};

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  int classes = 0;
};

// Multinomial logistic regression (standardized features, L2, full-batch
// gradient descent) trained on one side of a group-disjoint split and scored
// on the other.  SingleClassLabels when the training side has one label;
// EmptyInput when either side is empty.
ProbeResult linear_probe(const std::vector<ProbeSample>& samples, const ProbeSpec& spec);
ProbeResult linear_probe(const std::vector<ProbeSample>& train, const std::vector<ProbeSample>& test,
                         const ProbeSpec& spec);

enum class Factor { Subject, Contrast, Lesion };
std::string to_string(Factor f);
Factor factor_from_string(const std::string& s);

struct LatentSet {
  std::vector<ProbeSample> anat;
  std::vector<ProbeSample> contrast;
};

// Pooled z_anat / z_contrast of every image of `subjects`, labeled by factor.
// Groups are subjects, except for the subject factor where the group is the
// contrast (identify a subject in a contrast the probe never saw).
LatentSet pooled_latents(const model::UNetConfig& config, const ParameterSet<float>& params,
                         const DatasetManifest& manifest, const std::vector<std::string>& subjects, Factor factor);

struct ChanceBand {
  double lo = 0.0;
  double hi = 0.0;
  double mean = 0.0;
};

struct ProbeReport {
  Factor factor = Factor::Contrast;
  ProbeResult anat;
  ProbeResult contrast;
  ChanceBand chance;  // shuffled-label runs on z_contrast
  Json to_json() const;
};

// Probes both partitions on the subjects outside the training split.
ProbeReport probe_factor(const model::UNetConfig& config, const ParameterSet<float>& params,
                         const DatasetManifest& manifest, Factor factor, const ProbeSpec& spec);

ChanceBand shuffled_chance(const std::vector<ProbeSample>& samples, const ProbeSpec& spec);

// ---- swap audit ----------------------------------------------------------

struct SwapAuditRow {
  std::string subject_id;
  double mse_to_target = 0.0;  // swap decode vs the contrast-code source image
  double mse_to_source = 0.0;  // swap decode vs the anatomy-code source image
};

struct SwapAudit {
  std::vector<SwapAuditRow> rows;
  double fraction_closer_to_target() const;
  Json to_json() const;
};

// For every held-out (val + test) subject with both contrasts at timepoint 0:
// decode z_anat of `anat_contrast` with z_contrast of `target_contrast` in
// swap mode and compare to both normalized images.
SwapAudit audit_swap(const model::UNetConfig& config, const ParameterSet<float>& params,
                     const DatasetManifest& manifest, const std::string& anat_contrast,
                     const std::string& target_contrast);

}  // namespace fmch::finetune
