// SPDX-License-Identifier: Apache-2.0
#include "fmch/finetune_eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "fmch/masking.hpp"
#include "fmch/nifti.hpp"
#include "fmch/objectives.hpp"
#include "fmch/phantom.hpp"
#include "fmch/rng.hpp"

namespace fmch::finetune {

namespace {

void require_lengths(std::size_t a, std::size_t b, const char* field) {
  if (a == 0 || b == 0) throw Error(ErrorCode::EmptyInput, field, "metric over an empty input");
  if (a != b)
    throw Error(ErrorCode::ShapeMismatch, field, std::to_string(a) + " predictions for " + std::to_string(b) + " labels");
}

[[noreturn]] void bad_config(const std::string& field, const std::string& what) {
  throw Error(ErrorCode::InvalidConfig, field, field + ": " + what);
}

}  // namespace

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size())
    throw Error(ErrorCode::ShapeMismatch, "mask",
                "masks of " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()) + " voxels");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  require_lengths(preds.size(), labels.size(), "labels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double mae(std::span<const double> preds, std::span<const double> targets) {
  require_lengths(preds.size(), targets.size(), "targets");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - targets[i]);
  return s / static_cast<double>(preds.size());
}

template <class T>
T soft_dice_loss(const FeatureMap<T>& logits, const std::vector<int>& labels, T eps, FeatureMap<T>* grad) {
  if (logits.channels() != 2) throw Error(ErrorCode::ShapeMismatch, "logits", "soft Dice expects two channels");
  const std::size_t n = logits.voxels();
  if (labels.size() != n) throw Error(ErrorCode::ShapeMismatch, "labels", "label count differs from voxel count");
  std::vector<double> p(n);
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(logits.channel(1)[i]) - static_cast<double>(logits.channel(0)[i]);
    p[i] = 1.0 / (1.0 + std::exp(-d));
    inter += p[i] * labels[i];
    sum_p += p[i];
    sum_y += labels[i];
  }
  const double e = static_cast<double>(eps);
  const double s = sum_p + sum_y + e;
  const double score = (2.0 * inter + e) / s;
  if (grad) {
    *grad = FeatureMap<T>(2, logits.dims());
    for (std::size_t i = 0; i < n; ++i) {
      const double dscore_dp = (2.0 * labels[i] * s - (2.0 * inter + e)) / (s * s);
      const double g = -dscore_dp * p[i] * (1.0 - p[i]);
      grad->channel(1)[i] = static_cast<T>(g);
      grad->channel(0)[i] = static_cast<T>(-g);
    }
  }
  return static_cast<T>(1.0 - score);
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Segmentation: return "seg";
    case TaskKind::Classification: return "cls";
    case TaskKind::Regression: return "reg";
  }
  return "?";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "seg" || s == "segmentation") return TaskKind::Segmentation;
  if (s == "cls" || s == "classification") return TaskKind::Classification;
  if (s == "reg" || s == "regression") return TaskKind::Regression;
  bad_config("task", "unknown task '" + s + "' (seg, cls, reg)");
}

std::string metric_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Segmentation: return "dice";
    case TaskKind::Classification: return "accuracy";
    case TaskKind::Regression: return "mae";
  }
  return "?";
}

bool higher_is_better(TaskKind kind) { return kind != TaskKind::Regression; }

std::string to_string(InitKind kind) { return kind == InitKind::Pretrained ? "pretrained" : "random"; }

void TaskSpec::validate() const {
  if (k_shot < 1) bad_config("k_shot", "must be >= 1");
  if (seeds.empty()) bad_config("seeds", "at least one seed is required");
  if (budget.epochs < 1) bad_config("epochs", "must be >= 1");
  if (!(budget.lr_factor > 0.0)) bad_config("lr_factor", "must be > 0");
  if (!(budget.head_lr_multiplier > 0.0)) bad_config("head_lr_multiplier", "must be > 0");
  if (!(budget.weight_decay >= 0.0)) bad_config("weight_decay", "must be >= 0");
  if (budget.contrast.empty()) bad_config("contrast", "must name a contrast");
}

TaskModel attach_head(const model::UNetConfig& config, const ParameterSet<float>& params, TaskKind kind,
                      Dims3 dataset_shape, std::uint64_t head_seed) {
  try {
    config.check_input(dataset_shape);
  } catch (const Error& e) {
    throw Error(ErrorCode::IncompatibleShape, "shape", e.what());
  }
  if (config.in_channels != 1)
    throw Error(ErrorCode::IncompatibleShape, "in_channels", "fine-tuning feeds single-channel volumes");
  for (const auto& spec : model::parameter_specs(config))
    if (!params.contains(spec.name) || params[spec.name].size() != spec.count())
      throw Error(ErrorCode::IncompatibleShape, spec.name, "checkpoint lacks a matching '" + spec.name + "'");

  TaskModel m;
  m.kind = kind;
  m.config = config;
  const bool seg = kind == TaskKind::Segmentation;
  if (seg) m.config.out_channels = 2;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& spec = params.spec(k);
    if (seg && spec.name.rfind("out.", 0) == 0) continue;
    auto dst = m.params.add(spec.name, spec.shape);
    std::copy(params.at(k).begin(), params.at(k).end(), dst.begin());
  }
  const std::string head = seg ? "out" : "task";
  model::add_projection(m.params, head, seg ? config.width(0) : config.bottleneck_channels, seg ? 2 : 1, head_seed);
  m.head_params = {head + ".weight", head + ".bias"};
  return m;
}

std::vector<std::string> eligible_subjects(const DatasetManifest& manifest, Split split, const TaskSpec& spec) {
  std::vector<std::string> out;
  for (const auto& s : manifest.subjects_in(split)) {
    const auto* e = manifest.find(s, spec.budget.contrast, 0);
    if (!e) continue;
    const auto info = manifest.subjects.find(s);
    bool ok = false;
    switch (spec.kind) {
      case TaskKind::Segmentation: ok = info != manifest.subjects.end() && !info->second.tissue_map.empty(); break;
      case TaskKind::Classification: ok = e->health_status.has_value(); break;
      case TaskKind::Regression: ok = info != manifest.subjects.end() && info->second.scale.has_value(); break;
    }
    if (ok) out.push_back(s);
  }
  return out;
}

std::vector<std::string> select_few_shot(const DatasetManifest& manifest, const TaskSpec& spec, std::uint64_t seed) {
  const auto pool = eligible_subjects(manifest, Split::Val, spec);
  if (pool.size() < static_cast<std::size_t>(spec.k_shot))
    throw Error(ErrorCode::InsufficientLabeledSubjects, "k_shot",
                "k_shot " + std::to_string(spec.k_shot) + " exceeds the " + std::to_string(pool.size()) +
                    " labeled subjects of the val split");
  std::vector<std::string> lesion, healthy;
  for (const auto& s : pool) {
    const auto* e = manifest.find(s, spec.budget.contrast, 0);
    (e->health_status.value_or(true) ? healthy : lesion).push_back(s);
  }
  Rng rng(derive_seed(seed, Stream::Finetune, {0x5E1EC7}));
  rng.shuffle(lesion.begin(), lesion.end());
  rng.shuffle(healthy.begin(), healthy.end());
  std::vector<std::string> out;
  std::size_t i = 0, j = 0;
  while (out.size() < static_cast<std::size_t>(spec.k_shot)) {
    const bool take_lesion = (out.size() % 2 == 0 && i < lesion.size()) || j >= healthy.size();
    out.push_back(take_lesion ? lesion[i++] : healthy[j++]);
  }
  return out;
}

std::vector<TaskSample> load_samples(const DatasetManifest& manifest, const std::vector<std::string>& subjects,
                                     const TaskSpec& spec) {
  std::vector<TaskSample> out;
  for (const auto& s : subjects) {
    const auto* e = manifest.find(s, spec.budget.contrast, 0);
    if (!e)
      throw Error(ErrorCode::InsufficientLabeledSubjects, s,
                  "subject " + s + " has no " + spec.budget.contrast + " image at timepoint 0");
    TaskSample t;
    t.subject_id = s;
    Volume v = nifti::read_nifti_file(manifest.resolve(e->path)).volume;
    if (v.dims != manifest.shape) throw Error(ErrorCode::ShapeMismatch, e->path, "image dims differ from the manifest");
    masking::normalize_in_place(v);
    t.input = to_feature_map<float>(v);
    t.lesion = e->health_status ? (*e->health_status ? 0 : 1) : 0;
    const auto info = manifest.subjects.find(s);
    if (info != manifest.subjects.end()) {
      t.scale = info->second.scale.value_or(0.0);
      if (spec.kind == TaskKind::Segmentation) {
        const auto tissue =
            phantom::tissue_from_volume(nifti::read_nifti_file(manifest.resolve(info->second.tissue_map)).volume);
        t.lesion_mask.resize(tissue.labels.size());
        for (std::size_t i = 0; i < tissue.labels.size(); ++i) t.lesion_mask[i] = tissue.labels[i] == phantom::kLesion;
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

template <class T>
T pooled_head(const ParameterSet<T>& p, const model::LatentPartition<T>& z, std::vector<T>* pooled_out = nullptr) {
  auto pooled = model::global_average_pool(z.z_anat);
  const auto pc = model::global_average_pool(z.z_contrast);
  pooled.insert(pooled.end(), pc.begin(), pc.end());
  const auto w = p["task.weight"];
  double v = p["task.bias"][0];
  for (std::size_t c = 0; c < pooled.size(); ++c) v += static_cast<double>(w[c]) * pooled[c];
  if (pooled_out) *pooled_out = std::move(pooled);
  return static_cast<T>(v);
}

}  // namespace

template <class T>
double task_loss(const model::UNet<T>& net, const ParameterSet<T>& params, TaskKind kind, const FeatureMap<T>& input,
                 const TaskTarget& target, GradientSet<T>* grads) {
  model::EncoderTrace<T> etrace;
  const auto enc = net.encode(params, input, grads ? &etrace : nullptr);
  if (kind == TaskKind::Segmentation) {
    model::DecoderTrace<T> dtrace;
    const auto logits = net.decode(params, enc.latent.z_anat, enc.latent.z_contrast, enc.skips,
                                   model::DecodeMode::MaskedRecon, grads ? &dtrace : nullptr);
    FeatureMap<T> g_ce, g_dice;
    const double ce = objectives::cross_entropy_loss(logits, target.lesion_mask, grads ? &g_ce : nullptr);
    const double sd = soft_dice_loss(logits, target.lesion_mask, T(1), grads ? &g_dice : nullptr);
    if (grads) {
      for (std::size_t i = 0; i < g_ce.size(); ++i) g_ce.storage()[i] += g_dice.storage()[i];
      const auto lg = net.decode_backward(params, dtrace, g_ce, *grads);
      net.encode_backward(params, etrace, lg, *grads);
    }
    return ce + sd;
  }

  std::vector<T> pooled;
  const T out = pooled_head(params, enc.latent, &pooled);
  double loss;
  T g_out;
  if (kind == TaskKind::Classification) {
    loss = objectives::pathology_loss(out, target.lesion, grads ? &g_out : nullptr);
  } else {
    const double r = static_cast<double>(out) - target.value;
    loss = r * r;
    g_out = static_cast<T>(2.0 * r);
  }
  if (grads) {
    auto gw = (*grads)["task.weight"];
    (*grads)["task.bias"][0] += g_out;
    const auto w = params["task.weight"];
    model::LatentGradient<T> lg;
    lg.z_anat = FeatureMap<T>(enc.latent.z_anat.channels(), enc.latent.z_anat.dims());
    lg.z_contrast = FeatureMap<T>(enc.latent.z_contrast.channels(), enc.latent.z_contrast.dims());
    const T inv_n = T(1) / static_cast<T>(enc.latent.z_anat.voxels());
    const int ca = enc.latent.z_anat.channels();
    for (std::size_t c = 0; c < pooled.size(); ++c) {
      gw[c] += g_out * pooled[c];
      const int ch = static_cast<int>(c);
      auto dst = ch < ca ? lg.z_anat.channel(ch) : lg.z_contrast.channel(ch - ca);
      std::fill(dst.begin(), dst.end(), g_out * w[c] * inv_n);
    }
    net.encode_backward(params, etrace, lg, *grads);
  }
  return loss;
}

namespace {

TaskTarget target_for(const TaskSample& s, double mean, double sd) {
  return {s.lesion_mask, s.lesion, (s.scale - mean) / sd};
}

}  // namespace

FinetuneResult few_shot_finetune(TaskModel task_model, const TaskSpec& spec, const DatasetManifest& manifest,
                                 double pretrain_lr, std::uint64_t seed) {
  spec.validate();
  if (task_model.kind != spec.kind) bad_config("task", "task model and spec disagree on the task");
  FinetuneResult r;
  r.train_subjects = select_few_shot(manifest, spec, seed);
  const auto samples = load_samples(manifest, r.train_subjects, spec);
  if (spec.kind == TaskKind::Regression) {
    double m = 0.0;
    for (const auto& s : samples) m += s.scale;
    m /= static_cast<double>(samples.size());
    double v = 0.0;
    for (const auto& s : samples) v += (s.scale - m) * (s.scale - m);
    r.target_mean = m;
    r.target_sd = std::max(std::sqrt(v / static_cast<double>(samples.size())), 1e-3);
  }

  const model::UNet<float> net(task_model.config);
  training::OptimConfig optim;
  optim.lr = pretrain_lr * spec.budget.lr_factor;
  optim.min_lr = optim.lr * 0.1;
  optim.weight_decay = spec.budget.weight_decay;
  const std::int64_t total = static_cast<std::int64_t>(spec.budget.epochs) * spec.k_shot;
  const auto schedule = training::Schedule::from(optim, total);
  std::vector<double> scale(task_model.params.size(), 1.0);
  for (const auto& h : task_model.head_params) scale[task_model.params.index_of(h)] = spec.budget.head_lr_multiplier;

  auto state = training::AdamState::zeros_like(task_model.params);
  GradientSet<float> grads(task_model.params.specs());
  std::vector<std::size_t> order(samples.size());
  std::int64_t step = 0;
  for (int epoch = 0; epoch < spec.budget.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, Stream::Finetune, {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order.begin(), order.end());
    for (const auto idx : order) {
      const auto& s = samples[idx];
      grads.zero();
      const double loss =
          task_loss(net, task_model.params, spec.kind, s.input, target_for(s, r.target_mean, r.target_sd), &grads);
      if (!std::isfinite(loss))
        throw Error(ErrorCode::NonFiniteLoss, "finetune", "fine-tuning loss is not finite at step " + std::to_string(step));
      training::adamw_step(task_model.params, grads, state, schedule.at(step), optim, scale);
      r.losses.push_back(loss);
      r.batch_log.push_back(s.subject_id);
      ++step;
    }
  }
  r.model = std::move(task_model);
  return r;
}

Prediction predict(const FinetuneResult& result, const TaskSample& sample) {
  const model::UNet<float> net(result.model.config);
  const auto& p = result.model.params;
  const auto enc = net.encode(p, sample.input);
  Prediction out;
  if (result.model.kind == TaskKind::Segmentation) {
    const auto logits = net.decode(p, enc.latent.z_anat, enc.latent.z_contrast, enc.skips, model::DecodeMode::MaskedRecon);
    const auto cls = model::argmax_channels(logits);
    out.mask.assign(cls.begin(), cls.end());
    return out;
  }
  const double v = pooled_head(p, enc.latent);
  out.value = result.model.kind == TaskKind::Regression ? result.target_mean + result.target_sd * v : v;
  return out;
}

Evaluation evaluate(const FinetuneResult& result, const std::vector<TaskSample>& test) {
  if (test.empty()) throw Error(ErrorCode::EmptyInput, "test", "no evaluation subjects");
  Evaluation ev;
  std::vector<int> preds, labels;
  std::vector<double> values, targets;
  for (const auto& s : test) {
    ev.subjects.push_back(s.subject_id);
    const auto pr = predict(result, s);
    switch (result.model.kind) {
      case TaskKind::Segmentation: {
        std::vector<std::uint8_t> truth(s.lesion_mask.begin(), s.lesion_mask.end());
        ev.per_subject.push_back(dice(pr.mask, truth));
        break;
      }
      case TaskKind::Classification:
        preds.push_back(pr.value > 0.0 ? 1 : 0);
        labels.push_back(s.lesion);
        ev.per_subject.push_back(preds.back() == s.lesion ? 1.0 : 0.0);
        break;
      case TaskKind::Regression:
        values.push_back(pr.value);
        targets.push_back(s.scale);
        ev.per_subject.push_back(std::abs(pr.value - s.scale));
        break;
    }
  }
  switch (result.model.kind) {
    case TaskKind::Segmentation: ev.metric = summarize(ev.per_subject).mean; break;
    case TaskKind::Classification: ev.metric = accuracy(preds, labels); break;
    case TaskKind::Regression: ev.metric = mae(values, targets); break;
  }
  return ev;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "values", "summary of no values");
  Summary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

Summary MetricReport::pretrained() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.pretrained);
  return summarize(v);
}

Summary MetricReport::random() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.random);
  return summarize(v);
}

bool MetricReport::pretrained_wins() const {
  const double p = pretrained().mean, r = random().mean;
  return higher_is_better(task) ? p > r : p < r;
}

Json MetricReport::to_json() const {
  Json j{{"task", to_string(task)}, {"metric", metric_name(task)}, {"k_shot", k_shot}};
  j["rows"] = Json::array();
  for (const auto& r : rows) j["rows"].push_back({{"seed", r.seed}, {"pretrained", r.pretrained}, {"random", r.random}});
  if (!rows.empty()) {
    const auto p = pretrained(), q = random();
    j["pretrained"] = {{"mean", p.mean}, {"sd", p.sd}};
    j["random"] = {{"mean", q.mean}, {"sd", q.sd}};
    j["pretrained_wins"] = pretrained_wins();
  }
  if (task == TaskKind::Regression) j["note"] = "regression target is the synthetic anatomical scale factor";
  return j;
}

MetricReport MetricReport::from_json(const Json& doc) {
  MetricReport m;
  try {
    m.task = task_from_string(doc.at("task").get<std::string>());
    m.k_shot = doc.at("k_shot").get<int>();
    for (const auto& r : doc.at("rows"))
      m.rows.push_back({r.at("seed").get<std::uint64_t>(), r.at("pretrained").get<double>(), r.at("random").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, "report", e.what());
  }
  return m;
}

std::string MetricReport::table() const {
  std::ostringstream out;
  const std::string metric = metric_name(task);
  out << "task " << to_string(task) << "  metric " << metric << "  k_shot " << k_shot << "\n";
  out << std::left << std::setw(10) << "seed" << std::right << std::setw(20) << "pretrained" << std::setw(20)
      << "random" << "\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    out << std::left << std::setw(10) << r.seed << std::right << std::setw(20) << r.pretrained << std::setw(20)
        << r.random << "\n";
  if (!rows.empty()) {
    const auto p = pretrained(), q = random();
    std::ostringstream a, b;
    a << std::fixed << std::setprecision(4) << p.mean << " +- " << p.sd;
    b << std::fixed << std::setprecision(4) << q.mean << " +- " << q.sd;
    out << std::left << std::setw(10) << "mean+-sd" << std::right << std::setw(20) << a.str() << std::setw(20)
        << b.str() << "\n";
  }
  return out.str();
}

MetricReport compare_inits(const training::TrainState& checkpoint, const DatasetManifest& manifest, TaskSpec spec) {
  spec.validate();
  MetricReport report;
  report.task = spec.kind;
  report.k_shot = spec.k_shot;
  const auto test = load_samples(manifest, eligible_subjects(manifest, Split::Test, spec), spec);
  if (test.empty()) throw Error(ErrorCode::InsufficientLabeledSubjects, "test", "no labeled subjects in the test split");
  const auto& cfg = checkpoint.config.model;
  for (const auto seed : spec.seeds) {
    const auto head_seed = derive_seed(seed, Stream::Finetune, {0x4EAD});
    SeedRow row{seed, 0.0, 0.0};
    for (const InitKind init : {InitKind::Pretrained, InitKind::Random}) {
      const ParameterSet<float> base = init == InitKind::Pretrained
                                           ? checkpoint.params
                                           : model::init_parameters<float>(cfg, derive_seed(seed, Stream::Finetune, {0x12A9D}));
      spec.init = init;
      auto tm = attach_head(cfg, base, spec.kind, manifest.shape, head_seed);
      const auto result = few_shot_finetune(std::move(tm), spec, manifest, checkpoint.config.optim.lr, seed);
      const double metric = evaluate(result, test).metric;
      (init == InitKind::Pretrained ? row.pretrained : row.random) = metric;
    }
    report.rows.push_back(row);
  }
  return report;
}

// ---- probes -------------------------------------------------------------

namespace {

struct Standardizer {
  std::vector<double> mean, inv_sd;

  explicit Standardizer(const std::vector<ProbeSample>& xs) {
    const std::size_t d = xs.front().features.size();
    mean.assign(d, 0.0);
    inv_sd.assign(d, 0.0);
    for (const auto& x : xs)
      for (std::size_t j = 0; j < d; ++j) mean[j] += x.features[j];
    for (auto& m : mean) m /= static_cast<double>(xs.size());
    std::vector<double> var(d, 0.0);
    for (const auto& x : xs)
      for (std::size_t j = 0; j < d; ++j) var[j] += (x.features[j] - mean[j]) * (x.features[j] - mean[j]);
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(xs.size()));
      // Constant features carry nothing; they are zeroed rather than blown up.
      inv_sd[j] = sd > 1e-12 * (1.0 + std::abs(mean[j])) ? 1.0 / sd : 0.0;
    }
  }

  std::vector<double> apply(const std::vector<double>& f) const {
    std::vector<double> out(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) out[j] = (f[j] - mean[j]) * inv_sd[j];
    return out;
  }
};

}  // namespace

ProbeResult linear_probe(const std::vector<ProbeSample>& train, const std::vector<ProbeSample>& test,
                         const ProbeSpec& spec) {
  if (train.empty() || test.empty()) throw Error(ErrorCode::EmptyInput, "samples", "probe needs train and test samples");
  const std::size_t d = train.front().features.size();
  for (const auto* set : {&train, &test})
    for (const auto& s : *set)
      if (s.features.size() != d) throw Error(ErrorCode::ShapeMismatch, "features", "ragged probe features");
  std::map<int, int> classes;
  for (const auto& s : train) classes.emplace(s.label, 0);
  if (classes.size() < 2)
    throw Error(ErrorCode::SingleClassLabels, "labels", "probe training labels contain a single class");
  int k = 0;
  for (auto& [label, idx] : classes) idx = k++;

  const Standardizer z(train);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& s : train) {
    x.push_back(z.apply(s.features));
    y.push_back(classes.at(s.label));
  }
  const std::size_t n = x.size();
  // W is k x (d + 1), last column the bias.
  std::vector<double> w(static_cast<std::size_t>(k) * (d + 1), 0.0), g(w.size()), p(static_cast<std::size_t>(k));
  auto scores = [&](const std::vector<double>& f, std::vector<double>& out) {
    double m = -INFINITY;
    for (int c = 0; c < k; ++c) {
      const double* row = &w[static_cast<std::size_t>(c) * (d + 1)];
      double s = row[d];
      for (std::size_t j = 0; j < d; ++j) s += row[j] * f[j];
      out[static_cast<std::size_t>(c)] = s;
      m = std::max(m, s);
    }
    return m;
  };
  for (int it = 0; it < spec.iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = scores(x[i], p);
      double zsum = 0.0;
      for (auto& v : p) zsum += (v = std::exp(v - m));
      for (int c = 0; c < k; ++c) {
        const double r = (p[static_cast<std::size_t>(c)] / zsum - (c == y[i] ? 1.0 : 0.0)) / static_cast<double>(n);
        double* row = &g[static_cast<std::size_t>(c) * (d + 1)];
        for (std::size_t j = 0; j < d; ++j) row[j] += r * x[i][j];
        row[d] += r;
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) {
      const bool bias = q % (d + 1) == d;
      w[q] -= spec.learning_rate * (g[q] + (bias ? 0.0 : spec.l2 * w[q]));
    }
  }

  std::size_t hit = 0;
  std::vector<int> index_to_label(static_cast<std::size_t>(k));
  for (const auto& [label, idx] : classes) index_to_label[static_cast<std::size_t>(idx)] = label;
  for (const auto& s : test) {
    scores(z.apply(s.features), p);
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    hit += index_to_label[best] == s.label;
  }
  return {static_cast<double>(hit) / static_cast<double>(test.size()), train.size(), test.size(), k};
}

ProbeResult linear_probe(const std::vector<ProbeSample>& samples, const ProbeSpec& spec) {
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "samples", "probe over no samples");
  std::vector<std::string> groups;
  for (const auto& s : samples) groups.push_back(s.group);
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
  if (groups.size() < 2) throw Error(ErrorCode::EmptyInput, "group", "a group-disjoint split needs two groups");
  Rng rng(derive_seed(spec.seed, Stream::Probe, {0x5B117}));
  rng.shuffle(groups.begin(), groups.end());
  auto n_test = static_cast<std::size_t>(std::llround(spec.holdout_fraction * static_cast<double>(groups.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, groups.size() - 1);
  const std::set<std::string> held(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<ProbeSample> train, test;
  for (const auto& s : samples) (held.count(s.group) ? test : train).push_back(s);
  return linear_probe(train, test, spec);
}

std::string to_string(Factor f) {
  switch (f) {
    case Factor::Subject: return "subject";
    case Factor::Contrast: return "contrast";
    case Factor::Lesion: return "lesion";
  }
  return "?";
}

Factor factor_from_string(const std::string& s) {
  if (s == "subject") return Factor::Subject;
  if (s == "contrast") return Factor::Contrast;
  if (s == "lesion") return Factor::Lesion;
  bad_config("factor", "unknown factor '" + s + "' (subject, contrast, lesion)");
}

LatentSet pooled_latents(const model::UNetConfig& config, const ParameterSet<float>& params,
                         const DatasetManifest& manifest, const std::vector<std::string>& subjects, Factor factor) {
  config.check_input(manifest.shape);
  const model::UNet<float> net(config);
  std::map<std::string, int> contrast_index, subject_index;
  for (std::size_t i = 0; i < manifest.contrasts.size(); ++i) contrast_index[manifest.contrasts[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < subjects.size(); ++i) subject_index[subjects[i]] = static_cast<int>(i);

  std::vector<const ManifestEntry*> entries;
  for (const auto& s : subjects)
    for (const auto* e : manifest.entries_for(s)) entries.push_back(e);
  LatentSet out;
  out.anat.resize(entries.size());
  out.contrast.resize(entries.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto* e = entries[i];
    Volume v = nifti::read_nifti_file(manifest.resolve(e->path)).volume;
    masking::normalize_in_place(v);
    const auto enc = net.encode(params, to_feature_map<float>(v));
    int label = 0;
    std::string group = e->subject_id;
    switch (factor) {
      case Factor::Subject:
        label = subject_index.at(e->subject_id);
        group = e->contrast_id;
        break;
      case Factor::Contrast: label = contrast_index.count(e->contrast_id) ? contrast_index.at(e->contrast_id) : -1; break;
      case Factor::Lesion: label = e->health_status ? (*e->health_status ? 0 : 1) : -1; break;
    }
    auto pool = [](const FeatureMap<float>& f) {
      const auto p = model::global_average_pool(f);
      return std::vector<double>(p.begin(), p.end());
    };
    out.anat[i] = {pool(enc.latent.z_anat), label, group};
    out.contrast[i] = {pool(enc.latent.z_contrast), label, group};
  }
  auto drop_unlabeled = [](std::vector<ProbeSample>& v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](const ProbeSample& s) { return s.label < 0; }), v.end());
  };
  drop_unlabeled(out.anat);
  drop_unlabeled(out.contrast);
  return out;
}

ChanceBand shuffled_chance(const std::vector<ProbeSample>& samples, const ProbeSpec& spec) {
  std::vector<double> acc;
  for (int r = 0; r < spec.shuffles; ++r) {
    auto shuffled = samples;
    std::vector<int> labels;
    for (const auto& s : samples) labels.push_back(s.label);
    Rng rng(derive_seed(spec.seed, Stream::Probe, {0xC4A, static_cast<std::uint64_t>(r)}));
    rng.shuffle(labels.begin(), labels.end());
    for (std::size_t i = 0; i < labels.size(); ++i) shuffled[i].label = labels[i];
    try {
      acc.push_back(linear_probe(shuffled, spec).accuracy);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::SingleClassLabels) throw;
    }
  }
  if (acc.empty()) return {};
  ChanceBand b;
  b.lo = *std::min_element(acc.begin(), acc.end());
  b.hi = *std::max_element(acc.begin(), acc.end());
  b.mean = summarize(acc).mean;
  return b;
}

Json ProbeReport::to_json() const {
  auto res = [](const ProbeResult& r) {
    return Json{{"accuracy", r.accuracy}, {"train_size", r.train_size}, {"test_size", r.test_size}, {"classes", r.classes}};
  };
  return Json{{"factor", to_string(factor)},
              {"z_anat", res(anat)},
              {"z_contrast", res(contrast)},
              {"chance", {{"lo", chance.lo}, {"hi", chance.hi}, {"mean", chance.mean}}}};
}

ProbeReport probe_factor(const model::UNetConfig& config, const ParameterSet<float>& params,
                         const DatasetManifest& manifest, Factor factor, const ProbeSpec& spec) {
  std::vector<std::string> held_out = manifest.subjects_in(Split::Val);
  const auto test = manifest.subjects_in(Split::Test);
  held_out.insert(held_out.end(), test.begin(), test.end());
  std::sort(held_out.begin(), held_out.end());
  const auto latents = pooled_latents(config, params, manifest, held_out, factor);
  ProbeReport r;
  r.factor = factor;
  r.anat = linear_probe(latents.anat, spec);
  r.contrast = linear_probe(latents.contrast, spec);
  r.chance = shuffled_chance(latents.contrast, spec);
  return r;
}

double SwapAudit::fraction_closer_to_target() const {
  if (rows.empty()) throw Error(ErrorCode::EmptyInput, "subjects", "swap audit over no subjects");
  std::size_t n = 0;
  for (const auto& r : rows) n += r.mse_to_target < r.mse_to_source;
  return static_cast<double>(n) / static_cast<double>(rows.size());
}

Json SwapAudit::to_json() const {
  Json j{{"rows", Json::array()}};
  for (const auto& r : rows)
    j["rows"].push_back({{"subject", r.subject_id}, {"mse_to_target", r.mse_to_target}, {"mse_to_source", r.mse_to_source}});
  if (!rows.empty()) j["fraction_closer_to_target"] = fraction_closer_to_target();
  return j;
}

SwapAudit audit_swap(const model::UNetConfig& config, const ParameterSet<float>& params,
                     const DatasetManifest& manifest, const std::string& anat_contrast,
                     const std::string& target_contrast) {
  config.check_input(manifest.shape);
  const model::UNet<float> net(config);
  std::vector<std::string> subjects = manifest.subjects_in(Split::Val);
  const auto test = manifest.subjects_in(Split::Test);
  subjects.insert(subjects.end(), test.begin(), test.end());
  std::sort(subjects.begin(), subjects.end());
  std::vector<std::pair<const ManifestEntry*, const ManifestEntry*>> pairs;
  for (const auto& s : subjects) {
    const auto* a = manifest.find(s, anat_contrast, 0);
    const auto* b = manifest.find(s, target_contrast, 0);
    if (a && b) pairs.emplace_back(a, b);
  }
  SwapAudit audit;
  audit.rows.resize(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto load = [&](const ManifestEntry* e) {
      Volume v = nifti::read_nifti_file(manifest.resolve(e->path)).volume;
      masking::normalize_in_place(v);
      return to_feature_map<float>(v);
    };
    const auto xa = load(pairs[i].first), xb = load(pairs[i].second);
    const auto ea = net.encode(params, xa), eb = net.encode(params, xb);
    const auto y = net.decode(params, ea.latent.z_anat, eb.latent.z_contrast, {}, model::DecodeMode::Swap);
    audit.rows[i] = {pairs[i].first->subject_id, objectives::mse_loss(y, xb), objectives::mse_loss(y, xa)};
  }
  return audit;
}

#define FMCH_INSTANTIATE(T)                                                                                      \
  template T soft_dice_loss<T>(const FeatureMap<T>&, const std::vector<int>&, T, FeatureMap<T>*);               \
  template double task_loss<T>(const model::UNet<T>&, const ParameterSet<T>&, TaskKind, const FeatureMap<T>&, \
                               const TaskTarget&, GradientSet<T>*);
FMCH_INSTANTIATE(float)
FMCH_INSTANTIATE(double)
#undef FMCH_INSTANTIATE

}  // namespace fmch::finetune
