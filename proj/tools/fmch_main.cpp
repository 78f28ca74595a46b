// SPDX-License-Identifier: Apache-2.0
//
// fmch: command-line entry point.
//
//   fmch phantom   build a synthetic multi-contrast dataset
//   fmch pretrain  run pre-training into a run directory
//   fmch finetune  few-shot fine-tuning, pretrained vs random init
//   fmch evaluate  aggregate the metric reports of a run directory
//   fmch probe     linear probes on pooled latents
//   fmch inspect   print a NIfTI header and intensity statistics
//
// Human-readable output goes to stdout, one JSON diagnostic per failure to
// stderr.  Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 resume mismatch.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fmch/finetune_eval.hpp"
#include "fmch/manifest.hpp"
#include "fmch/nifti.hpp"
#include "fmch/phantom.hpp"
#include "fmch/training.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace fmch;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kResumeMismatch = 3 };

// Argument problems discovered after parsing (missing files, bad values).
struct UsageError : std::runtime_error {
  UsageError(std::string flag, const std::string& msg) : std::runtime_error(msg), flag(std::move(flag)) {}
  std::string flag;
};

int report(int code, const std::string& kind, const std::string& field, const std::string& message) {
  std::cerr << Json{{"error", kind}, {"field", field}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  return code;
}

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigHashMismatch: return kResumeMismatch;
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidWeights: return kUsage;
    default: return kRuntime;
  }
}

std::string timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void write_json(const fs::path& p, const Json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::Io, p.string(), "cannot write " + p.string());
  out << j.dump(2) << "\n";
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::Io, p.string(), "cannot write " + p.string());
  out << text;
}

void require_file(const std::string& path, const std::string& flag) {
  if (!fs::is_regular_file(path)) throw UsageError(flag, flag + ": no such file '" + path + "'");
}

fs::path run_root() {
  const char* env = std::getenv("FMCH_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

DatasetManifest manifest_for(const std::string& flag_value, const training::PretrainConfig& config) {
  const std::string path = flag_value.empty() ? config.manifest : flag_value;
  if (path.empty()) throw UsageError("--manifest", "--manifest: no manifest given and none recorded in the config");
  require_file(path, "--manifest");
  return load_manifest(path);
}

// ---- phantom ---------------------------------------------------------------

struct PhantomArgs {
  int subjects = 4;
  std::string contrasts = "c1,c2";
  int timepoints = 1;
  int shape = 24;
  std::uint64_t seed = 0;
  double lesion_prevalence = 0.5;
  std::string out;
  bool check = false;
};

int run_phantom(const PhantomArgs& a) {
  phantom::PhantomOptions o;
  o.n_subjects = a.subjects;
  o.contrasts = phantom::default_contrasts(split_list(a.contrasts));
  o.timepoints = a.timepoints;
  o.shape = Dims3::cube(a.shape);
  o.global_seed = a.seed;
  o.lesion_prevalence = a.lesion_prevalence;
  phantom::validate_contrast_set(o.contrasts);
  if (a.check) {
    std::cout << "ok: " << a.subjects << " subjects x " << o.contrasts.size() << " contrasts x " << a.timepoints
              << " timepoints at " << a.shape << "^3 -> " << a.out << "\n";
    return kOk;
  }
  const auto m = phantom::build_phantom_dataset(o, a.out);
  std::size_t lesions = 0;
  for (const auto& s : m.subject_ids()) {
    const auto entries = m.entries_for(s);
    if (!entries.empty() && entries.front()->health_status && !*entries.front()->health_status) ++lesions;
  }
  std::cout << "manifest: " << (fs::path(a.out) / "manifest.json").string() << "\n"
            << "images:   " << m.entries.size() << "\n"
            << "subjects: " << m.subject_ids().size() << " (" << lesions << " with lesion)\n"
            << "splits:   train " << m.subjects_in(Split::Train).size() << ", val " << m.subjects_in(Split::Val).size()
            << ", test " << m.subjects_in(Split::Test).size() << "\n"
            << "shape:    " << to_string(m.shape) << "\n";
  return kOk;
}

// ---- pretrain --------------------------------------------------------------

struct PretrainArgs {
  std::string config;
  std::string profile = "desk";
  std::string resume;
  std::string variant;
  std::string manifest;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::int64_t> max_steps;
  std::optional<int> batch_pairs;
  std::optional<double> lr;
  std::optional<int> checkpoint_every;
  bool check = false;
};

training::PretrainConfig effective_config(const PretrainArgs& a) {
  training::PretrainConfig c;
  if (!a.config.empty()) {
    require_file(a.config, "--config");
    c = training::load_config(a.config);
  } else {
    c = training::profile(a.profile);
  }
  if (!a.variant.empty()) {
    const auto keep_masked = c.loss.swap_on_masked;
    c.loss = objectives::LossWeights::for_variant(objectives::variant_from_string(a.variant));
    c.loss.swap_on_masked = keep_masked;
  }
  if (!a.manifest.empty()) c.manifest = fs::weakly_canonical(fs::absolute(a.manifest)).string();
  if (a.seed) c.seed = *a.seed;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.max_steps) c.max_steps = *a.max_steps;
  if (a.batch_pairs) c.batch_pairs = *a.batch_pairs;
  if (a.lr) c.optim.lr = *a.lr;
  if (a.checkpoint_every) c.io.checkpoint_every_epochs = *a.checkpoint_every;
  if (!a.run_dir.empty()) c.io.run_dir = a.run_dir;
  if (c.io.run_dir.empty()) c.io.run_dir = (run_root() / ("pretrain_" + training::config_hash(c).substr(0, 12))).string();
  c.validate();
  return c;
}

int run_pretrain(const PretrainArgs& a) {
  const auto config = effective_config(a);
  const auto manifest = manifest_for("", config);
  config.model.check_input(manifest.shape);
  const std::string hash = training::config_hash(config);
  training::PretrainOptions options;
  if (!a.resume.empty()) {
    require_file(a.resume, "--resume");
    options.resume = training::load_checkpoint(a.resume, hash);
  }
  if (a.check) {
    training::PairSampler sampler(manifest, config.seed, config.batch_pairs);
    std::cout << "ok: config " << hash.substr(0, 12) << ", " << sampler.slots() << " pair slots, "
              << sampler.batches_per_epoch() << " steps/epoch, run dir " << config.io.run_dir << "\n";
    return kOk;
  }
  const fs::path run = config.io.run_dir;
  fs::create_directories(run);
  write_json(run / "config.json", training::to_json(config));
  Json prov{{"artifact", "fmch"},
            {"version", kVersion},
            {"command", "pretrain"},
            {"config_hash", hash},
            {"seeds", {{"config", config.seed}}},
            {"resumed_from", a.resume.empty() ? Json(nullptr) : Json(a.resume)},
            {"started", timestamp()}};
  write_json(run / "provenance.json", prov);

  options.on_step = [](const training::StepRecord& r) {
    std::cout << "step " << std::setw(5) << r.step << "  epoch " << std::setw(3) << r.epoch << "  lr " << std::scientific
              << std::setprecision(3) << r.lr << std::defaultfloat << "  total " << std::fixed << std::setprecision(5)
              << r.report.total << std::defaultfloat << "\n";
  };
  const auto result = training::pretrain(config, manifest, options);
  prov["finished"] = timestamp();
  prov["steps"] = result.state.step;
  prov["final_checkpoint"] = (run / ("ckpt_" + std::to_string(result.state.step) + ".fmck")).string();
  write_json(run / "provenance.json", prov);
  std::cout << "run dir: " << run.string() << "\n";
  return kOk;
}

// ---- finetune / evaluate / probe --------------------------------------------

struct FinetuneArgs {
  std::string checkpoint;
  std::string task;
  int k_shot = 4;
  std::string seeds = "0,1,2,3,4";
  int epochs = 40;
  double lr_factor = 0.1;
  std::string contrast = "c2";
  std::string manifest;
  std::string out;
  bool check = false;
};

fs::path default_run_for(const std::string& checkpoint) {
  const auto parent = fs::path(checkpoint).parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

int run_finetune(const FinetuneArgs& a) {
  require_file(a.checkpoint, "--checkpoint");
  finetune::TaskSpec spec;
  spec.kind = finetune::task_from_string(a.task);
  spec.k_shot = a.k_shot;
  spec.seeds.clear();
  for (const auto& s : split_list(a.seeds)) {
    try {
      spec.seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw UsageError("--seeds", "--seeds: '" + s + "' is not a non-negative integer");
    }
  }
  spec.budget.epochs = a.epochs;
  spec.budget.lr_factor = a.lr_factor;
  spec.budget.contrast = a.contrast;
  spec.validate();
  const auto state = training::load_checkpoint(a.checkpoint);
  const auto manifest = manifest_for(a.manifest, state.config);
  finetune::select_few_shot(manifest, spec, spec.seeds.front());
  if (a.check) {
    std::cout << "ok: " << finetune::to_string(spec.kind) << " k=" << spec.k_shot << " over " << spec.seeds.size()
              << " seeds\n";
    return kOk;
  }
  const auto report = finetune::compare_inits(state, manifest, spec);
  const fs::path run = a.out.empty() ? default_run_for(a.checkpoint) : fs::path(a.out);
  const std::string stem = "finetune_" + finetune::to_string(spec.kind);
  Json j = report.to_json();
  j["checkpoint"] = a.checkpoint;
  j["seeds"] = spec.seeds;
  write_json(run / "reports" / (stem + ".json"), j);
  write_text(run / "reports" / (stem + ".txt"), report.table());
  std::cout << report.table();
  return kOk;
}

int run_evaluate(const std::string& run, bool check) {
  const fs::path dir = fs::path(run) / "reports";
  if (!fs::is_directory(dir)) throw UsageError("--run", "--run: no reports directory under '" + run + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json" && e.path().filename().string().rfind("finetune_", 0) == 0)
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::EmptyInput, "--run", "no finetune reports under " + dir.string());
  if (check) {
    std::cout << "ok: " << files.size() << " reports\n";
    return kOk;
  }
  Json summary = Json::array();
  for (const auto& f : files) {
    std::ifstream in(f);
    Json doc;
    try {
      doc = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::SchemaViolation, f.string(), e.what());
    }
    const auto r = finetune::MetricReport::from_json(doc);
    std::cout << r.table() << "pretrained better: " << (r.pretrained_wins() ? "yes" : "no") << "\n\n";
    summary.push_back(r.to_json());
  }
  write_json(dir / "summary.json", summary);
  return kOk;
}

struct ProbeArgs {
  std::string checkpoint;
  std::string factor;
  std::string manifest;
  std::uint64_t seed = 0;
  std::string out;
  bool check = false;
};

int run_probe(const ProbeArgs& a) {
  require_file(a.checkpoint, "--checkpoint");
  const auto factor = finetune::factor_from_string(a.factor);
  const auto state = training::load_checkpoint(a.checkpoint);
  const auto manifest = manifest_for(a.manifest, state.config);
  if (a.check) {
    std::cout << "ok: probe " << a.factor << "\n";
    return kOk;
  }
  finetune::ProbeSpec spec;
  spec.seed = a.seed;
  const auto r = finetune::probe_factor(state.config.model, state.params, manifest, factor, spec);
  std::cout << std::fixed << std::setprecision(3) << "factor " << a.factor << "\n"
            << "  z_anat      accuracy " << r.anat.accuracy << "  (train " << r.anat.train_size << ", test "
            << r.anat.test_size << ", classes " << r.anat.classes << ")\n"
            << "  z_contrast  accuracy " << r.contrast.accuracy << "\n"
            << "  shuffled-label chance band [" << r.chance.lo << ", " << r.chance.hi << "], mean " << r.chance.mean
            << "\n";
  const fs::path run = a.out.empty() ? default_run_for(a.checkpoint) : fs::path(a.out);
  write_json(run / "reports" / ("probe_" + a.factor + ".json"), r.to_json());
  return kOk;
}

// ---- inspect ---------------------------------------------------------------

int run_inspect(const std::string& file, bool check) {
  require_file(file, "--file");
  const auto img = nifti::read_nifti_file(file);
  if (check) {
    std::cout << "ok: " << file << "\n";
    return kOk;
  }
  const auto& h = img.header;
  const auto& v = img.volume.voxels;
  std::cout << "file      " << file << "\n"
            << "dims      " << h.dim[1] << " x " << h.dim[2] << " x " << h.dim[3] << "  (D,H,W = "
            << to_string(img.volume.dims) << ")\n"
            << "datatype  " << h.datatype << "  bitpix " << h.bitpix << "\n"
            << "pixdim    " << h.pixdim[1] << " " << h.pixdim[2] << " " << h.pixdim[3] << "\n"
            << "vox_off   " << h.vox_offset << "  scl " << h.scl_slope << " / " << h.scl_inter << "\n";
  double lo = INFINITY, hi = -INFINITY, sum = 0.0, sq = 0.0;
  std::size_t nonzero = 0;
  bool integral = true;
  for (float x : v) {
    lo = std::min(lo, static_cast<double>(x));
    hi = std::max(hi, static_cast<double>(x));
    sum += x;
    sq += static_cast<double>(x) * x;
    nonzero += x != 0.0f;
    integral = integral && std::floor(x) == x;
  }
  const double n = static_cast<double>(v.size());
  const double mean = sum / n;
  std::cout << std::setprecision(6) << "min " << lo << "  max " << hi << "  mean " << mean << "  sd "
            << std::sqrt(std::max(0.0, sq / n - mean * mean)) << "  nonzero " << nonzero << "/" << v.size() << "\n";
  // Label volumes: integer datatype, or float storage holding small integers.
  if (integral && hi - lo <= 255) {
    std::map<long, std::size_t> hist;
    for (float x : v) ++hist[static_cast<long>(x)];
    std::cout << "label histogram\n";
    for (const auto& [label, count] : hist) std::cout << "  " << std::setw(4) << label << "  " << count << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fmch: brain MRI foundation-model pipeline on synthetic phantoms"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  PhantomArgs ph;
  auto* phantom_cmd = app.add_subcommand("phantom", "build a synthetic multi-contrast dataset");
  phantom_cmd->add_option("--subjects", ph.subjects, "number of subjects")->check(CLI::PositiveNumber);
  phantom_cmd->add_option("--contrasts", ph.contrasts, "comma-separated contrasts (c1, c2, c3)");
  phantom_cmd->add_option("--timepoints", ph.timepoints, "timepoints per subject")->check(CLI::PositiveNumber);
  phantom_cmd->add_option("--shape", ph.shape, "cubic volume extent")->check(CLI::Range(phantom::kMinShape, nifti::kMaxDim));
  phantom_cmd->add_option("--seed", ph.seed, "global seed");
  phantom_cmd->add_option("--lesion-prevalence", ph.lesion_prevalence, "fraction of subjects with a lesion")
      ->check(CLI::Range(0.0, 1.0));
  phantom_cmd->add_option("--out", ph.out, "output directory")->required();
  phantom_cmd->add_flag("--check", ph.check, "validate only");

  PretrainArgs pt;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "pre-train into a run directory");
  pretrain_cmd->add_option("--config", pt.config, "JSON config (default: the --profile preset)");
  pretrain_cmd->add_option("--profile", pt.profile, "preset when no config is given")
      ->check(CLI::IsMember({"tiny", "desk", "challenge"}));
  pretrain_cmd->add_option("--resume", pt.resume, "checkpoint to resume from");
  pretrain_cmd->add_option("--variant", pt.variant, "loss variant")->check(CLI::IsMember({"ssl3d", "fomo25", "combined"}));
  pretrain_cmd->add_option("--manifest", pt.manifest, "dataset manifest (data.manifest)");
  pretrain_cmd->add_option("--run-dir", pt.run_dir, "run directory (io.run_dir)");
  pretrain_cmd->add_option("--seed", pt.seed, "seed");
  pretrain_cmd->add_option("--epochs", pt.epochs, "epochs")->check(CLI::PositiveNumber);
  pretrain_cmd->add_option("--max-steps", pt.max_steps, "cap on optimizer steps")->check(CLI::NonNegativeNumber);
  pretrain_cmd->add_option("--batch-pairs", pt.batch_pairs, "pairs per step")->check(CLI::PositiveNumber);
  pretrain_cmd->add_option("--lr", pt.lr, "peak learning rate (optim.lr)")->check(CLI::PositiveNumber);
  pretrain_cmd->add_option("--checkpoint-every", pt.checkpoint_every, "checkpoint every N epochs")
      ->check(CLI::NonNegativeNumber);
  pretrain_cmd->add_flag("--check", pt.check, "validate only");

  FinetuneArgs ft;
  auto* finetune_cmd = app.add_subcommand("finetune", "few-shot fine-tuning, pretrained vs random init");
  finetune_cmd->add_option("--checkpoint", ft.checkpoint, "pre-training checkpoint")->required();
  finetune_cmd->add_option("--task", ft.task, "seg, cls or reg")->required()->check(CLI::IsMember({"seg", "cls", "reg"}));
  finetune_cmd->add_option("--k-shot", ft.k_shot, "labeled subjects")->check(CLI::PositiveNumber);
  finetune_cmd->add_option("--seeds", ft.seeds, "comma-separated seeds");
  finetune_cmd->add_option("--epochs", ft.epochs, "fine-tuning epochs")->check(CLI::PositiveNumber);
  finetune_cmd->add_option("--lr-factor", ft.lr_factor, "fine-tuning lr relative to pre-training")
      ->check(CLI::PositiveNumber);
  finetune_cmd->add_option("--contrast", ft.contrast, "input contrast");
  finetune_cmd->add_option("--manifest", ft.manifest, "dataset manifest (default: the checkpoint's)");
  finetune_cmd->add_option("--out", ft.out, "run directory for reports (default: the checkpoint's directory)");
  finetune_cmd->add_flag("--check", ft.check, "validate only");

  std::string eval_run;
  bool eval_check = false;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "aggregate the metric reports of a run");
  evaluate_cmd->add_option("--run", eval_run, "run directory")->required();
  evaluate_cmd->add_flag("--check", eval_check, "validate only");

  ProbeArgs pr;
  auto* probe_cmd = app.add_subcommand("probe", "linear probes on pooled latents");
  probe_cmd->add_option("--checkpoint", pr.checkpoint, "checkpoint")->required();
  probe_cmd->add_option("--factor", pr.factor, "subject, contrast or lesion")
      ->required()
      ->check(CLI::IsMember({"subject", "contrast", "lesion"}));
  probe_cmd->add_option("--manifest", pr.manifest, "dataset manifest (default: the checkpoint's)");
  probe_cmd->add_option("--seed", pr.seed, "probe split seed");
  probe_cmd->add_option("--out", pr.out, "run directory for the report");
  probe_cmd->add_flag("--check", pr.check, "validate only");

  std::string inspect_file;
  bool inspect_check = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "print a NIfTI header and statistics");
  inspect_cmd->add_option("--file", inspect_file, ".nii file")->required();
  inspect_cmd->add_flag("--check", inspect_check, "validate only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(kUsage, "Usage", "", e.what());
  }

  try {
    if (*phantom_cmd) return run_phantom(ph);
    if (*pretrain_cmd) return run_pretrain(pt);
    if (*finetune_cmd) return run_finetune(ft);
    if (*evaluate_cmd) return run_evaluate(eval_run, eval_check);
    if (*probe_cmd) return run_probe(pr);
    if (*inspect_cmd) return run_inspect(inspect_file, inspect_check);
  } catch (const UsageError& e) {
    return report(kUsage, "Usage", e.flag, e.what());
  } catch (const Error& e) {
    return report(exit_code_for(e.code()), std::string(to_string(e.code())), e.field(), e.what());
  } catch (const std::exception& e) {
    return report(kRuntime, "Internal", "", e.what());
  }
  return kUsage;
}
