// SPDX-License-Identifier: Apache-2.0
#include "fmch/training.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "fmch/nifti.hpp"
#include "fmch/rng.hpp"

namespace fmch::training {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

[[noreturn]] void bad_config(const std::string& field, const std::string& what) {
  throw Error(ErrorCode::InvalidConfig, field, field + ": " + what);
}

// Copies known keys out of `obj` into `out`, rejecting unknown ones.
class Reader {
 public:
  Reader(const Json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) bad_config(prefix_.empty() ? "config" : prefix_, "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      bad_config(path(key), e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key())) bad_config(path(it.key().c_str()), "unknown key");
  }

 private:
  const Json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

std::string norm_name(model::NormKind k) { return k == model::NormKind::Instance ? "instance" : "none"; }
std::string anat_name(model::AnatCode a) { return a == model::AnatCode::Standardized ? "standardized" : "linear"; }

}  // namespace

Json to_json(const model::UNetConfig& c) {
  return Json{{"in_channels", c.in_channels},
              {"out_channels", c.out_channels},
              {"base_width", c.base_width},
              {"multipliers", c.multipliers},
              {"depth", c.depth},
              {"convs_per_level", c.convs_per_level},
              {"bottleneck_channels", c.bottleneck_channels},
              {"anat_channels", c.anat_channels},
              {"head_classes", c.head_classes},
              {"norm", norm_name(c.norm)},
              {"nonlinearity", "silu"},
              {"anat_code", anat_name(c.anat_code)}};
}

model::UNetConfig model_from_json(const Json& doc) {
  model::UNetConfig c;
  Reader r(doc, "model");
  r.get("in_channels", c.in_channels);
  r.get("out_channels", c.out_channels);
  r.get("base_width", c.base_width);
  r.get("multipliers", c.multipliers);
  r.get("depth", c.depth);
  r.get("convs_per_level", c.convs_per_level);
  r.get("bottleneck_channels", c.bottleneck_channels);
  r.get("anat_channels", c.anat_channels);
  r.get("head_classes", c.head_classes);
  std::string norm = norm_name(c.norm), nonlin = "silu", anat = anat_name(c.anat_code);
  r.get("norm", norm);
  r.get("nonlinearity", nonlin);
  r.get("anat_code", anat);
  r.finish();
  if (norm == "instance") c.norm = model::NormKind::Instance;
  else if (norm == "none") c.norm = model::NormKind::None;
  else bad_config("model.norm", "expected 'instance' or 'none'");
  if (nonlin != "silu") bad_config("model.nonlinearity", "only 'silu' is implemented");
  if (anat == "standardized") c.anat_code = model::AnatCode::Standardized;
  else if (anat == "linear") c.anat_code = model::AnatCode::Linear;
  else bad_config("model.anat_code", "expected 'standardized' or 'linear'");
  c.validate();
  return c;
}

void PretrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (!(mask.ratio >= 0.0 && mask.ratio <= 1.0)) bad_config("mask.ratio", "must lie in [0, 1]");
  if (mask.patch_size < 1) bad_config("mask.patch_size", "must be >= 1");
  masking::validate_policy(augment);
  if (optim.kind != "adamw") bad_config("optim.kind", "only 'adamw' is implemented");
  if (!(optim.lr > 0.0)) bad_config("optim.lr", "must be > 0");
  if (!(optim.min_lr >= 0.0 && optim.min_lr <= optim.lr)) bad_config("optim.min_lr", "must lie in [0, lr]");
  if (!(optim.weight_decay >= 0.0)) bad_config("optim.weight_decay", "must be >= 0");
  if (!(optim.warmup_fraction >= 0.0 && optim.warmup_fraction < 1.0))
    bad_config("optim.warmup_fraction", "must lie in [0, 1)");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) bad_config("optim.beta1", "must lie in [0, 1)");
  if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) bad_config("optim.beta2", "must lie in [0, 1)");
  if (!(optim.eps > 0.0)) bad_config("optim.eps", "must be > 0");
  if (batch_pairs < 1) bad_config("batch_pairs", "must be >= 1");
  if (epochs < 1) bad_config("epochs", "must be >= 1");
  if (max_steps < 0) bad_config("max_steps", "must be >= 0");
  if (io.checkpoint_every_epochs < 0) bad_config("io.checkpoint_every_epochs", "must be >= 0");
}

Json to_json(const PretrainConfig& c) {
  return Json{
      {"model", to_json(c.model)},
      {"loss",
       {{"variant", objectives::to_string(c.loss.variant)},
        {"mae", c.loss.mae},
        {"seg", c.loss.seg},
        {"cons", c.loss.cons},
        {"path", c.loss.path},
        {"swap", c.loss.swap},
        {"swap_on_masked", c.loss.swap_on_masked}}},
      {"mask", {{"ratio", c.mask.ratio}, {"patch_size", c.mask.patch_size}}},
      {"augment",
       {{"flip", c.augment.flip},
        {"intensity_scale", c.augment.intensity_scale},
        {"scale_lo", c.augment.scale_lo},
        {"scale_hi", c.augment.scale_hi},
        {"noise_sigma", c.augment.noise_sigma}}},
      {"optim",
       {{"kind", c.optim.kind},
        {"lr", c.optim.lr},
        {"weight_decay", c.optim.weight_decay},
        {"warmup_fraction", c.optim.warmup_fraction},
        {"min_lr", c.optim.min_lr},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps}}},
      {"batch_pairs", c.batch_pairs},
      {"epochs", c.epochs},
      {"max_steps", c.max_steps},
      {"seed", c.seed},
      {"data", {{"manifest", c.manifest}}},
      {"io", {{"run_dir", c.io.run_dir}, {"checkpoint_every_epochs", c.io.checkpoint_every_epochs}}},
  };
}

PretrainConfig config_from_json(const Json& doc) {
  PretrainConfig c;
  Reader r(doc, "");
  if (const Json* m = r.child("model")) c.model = model_from_json(*m);
  if (const Json* l = r.child("loss")) {
    Reader lr(*l, "loss");
    std::string variant = objectives::to_string(c.loss.variant);
    lr.get("variant", variant);
    const auto v = objectives::variant_from_string(variant);
    // Weights default to the variant's defaults; explicit keys override.
    c.loss = objectives::LossWeights::for_variant(v);
    lr.get("mae", c.loss.mae);
    lr.get("seg", c.loss.seg);
    lr.get("cons", c.loss.cons);
    lr.get("path", c.loss.path);
    lr.get("swap", c.loss.swap);
    lr.get("swap_on_masked", c.loss.swap_on_masked);
    lr.finish();
  }
  if (const Json* m = r.child("mask")) {
    Reader mr(*m, "mask");
    mr.get("ratio", c.mask.ratio);
    mr.get("patch_size", c.mask.patch_size);
    mr.finish();
  }
  if (const Json* a = r.child("augment")) {
    Reader ar(*a, "augment");
    ar.get("flip", c.augment.flip);
    ar.get("intensity_scale", c.augment.intensity_scale);
    ar.get("scale_lo", c.augment.scale_lo);
    ar.get("scale_hi", c.augment.scale_hi);
    ar.get("noise_sigma", c.augment.noise_sigma);
    ar.finish();
  }
  if (const Json* o = r.child("optim")) {
    Reader orr(*o, "optim");
    orr.get("kind", c.optim.kind);
    orr.get("lr", c.optim.lr);
    orr.get("weight_decay", c.optim.weight_decay);
    orr.get("warmup_fraction", c.optim.warmup_fraction);
    orr.get("min_lr", c.optim.min_lr);
    orr.get("beta1", c.optim.beta1);
    orr.get("beta2", c.optim.beta2);
    orr.get("eps", c.optim.eps);
    orr.finish();
  }
  r.get("batch_pairs", c.batch_pairs);
  r.get("epochs", c.epochs);
  r.get("max_steps", c.max_steps);
  r.get("seed", c.seed);
  if (const Json* d = r.child("data")) {
    Reader dr(*d, "data");
    dr.get("manifest", c.manifest);
    dr.finish();
  }
  if (const Json* io = r.child("io")) {
    Reader ir(*io, "io");
    ir.get("run_dir", c.io.run_dir);
    ir.get("checkpoint_every_epochs", c.io.checkpoint_every_epochs);
    ir.finish();
  }
  r.finish();
  c.validate();
  return c;
}

PretrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string(), "cannot open config " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    bad_config(path.string(), e.what());
  }
  return config_from_json(doc);
}

PretrainConfig profile(const std::string& name) {
  PretrainConfig c;
  if (name == "desk") {
    // One downsampling: swap decoding at 6^3 cannot resolve the contrast's
    // thin shells at 24^3, 12^3 can.
    c.model.depth = 1;
    c.model.multipliers = {1, 2};
    c.batch_pairs = 2;
    c.epochs = 100;
    c.optim.lr = 2e-3;
    return c;
  }
  if (name == "tiny") {
    c.model.base_width = 2;
    c.model.multipliers = {1, 2, 2};
    c.model.bottleneck_channels = 4;
    c.model.anat_channels = 2;
    c.batch_pairs = 2;
    c.epochs = 5;
    return c;
  }
  if (name == "challenge") {
    c.model.base_width = 32;
    c.model.multipliers = {1, 2, 4, 8, 8, 8};
    c.model.depth = 5;
    c.model.bottleneck_channels = 320;
    c.model.anat_channels = 160;
    return c;
  }
  bad_config("profile", "unknown profile '" + name + "' (tiny, desk, challenge)");
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::Io, "sha256", "digest computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string config_hash(const PretrainConfig& config) {
  Json doc = to_json(config);
  doc.erase("io");
  return sha256_hex(doc.dump());
}

Schedule Schedule::from(const OptimConfig& optim, std::int64_t total_steps) {
  Schedule s;
  s.lr = optim.lr;
  s.min_lr = optim.min_lr;
  s.total_steps = std::max<std::int64_t>(1, total_steps);
  s.warmup_steps = std::clamp<std::int64_t>(
      static_cast<std::int64_t>(std::llround(optim.warmup_fraction * static_cast<double>(s.total_steps))), 1,
      s.total_steps);
  return s;
}

double Schedule::at(std::int64_t step) const {
  if (step < warmup_steps) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const std::int64_t span = total_steps - warmup_steps;
  if (span <= 0) return lr;
  const double progress = std::min(1.0, static_cast<double>(step - (warmup_steps - 1)) / static_cast<double>(span));
  return min_lr + (lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState AdamState::zeros_like(const ParameterSet<float>& params) {
  AdamState s{ParameterSet<float>(params.specs()), ParameterSet<float>(params.specs()), 0};
  return s;
}

void adamw_step(ParameterSet<float>& params, const GradientSet<float>& grads, AdamState& state, double base_lr,
                const OptimConfig& o, std::span<const double> lr_scale) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!grads.touched(k)) continue;
    const double lr = lr_scale.empty() ? base_lr : base_lr * lr_scale[k];
    const bool decay = params.spec(k).name.ends_with(".weight");
    auto p = params.at(k);
    auto m = state.m.at(k);
    auto v = state.v.at(k);
    const auto g = grads.at(k);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double pi = p[i];
      if (decay) pi -= lr * o.weight_decay * pi;
      pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + o.eps);
      p[i] = static_cast<float>(pi);
    }
  }
}

PairSampler::PairSampler(const DatasetManifest& manifest, std::uint64_t seed, int batch_pairs)
    : seed_(seed), batch_pairs_(batch_pairs) {
  if (batch_pairs < 1) bad_config("batch_pairs", "must be >= 1");
  for (const auto& subject : manifest.subjects_in(Split::Train)) {
    std::map<int, std::vector<const ManifestEntry*>> by_time;
    for (const auto* e : manifest.entries_for(subject)) by_time[e->timepoint].push_back(e);
    std::size_t added = 0;
    for (auto& [t, group] : by_time) {
      std::sort(group.begin(), group.end(),
                [](const ManifestEntry* x, const ManifestEntry* y) { return x->contrast_id < y->contrast_id; });
      for (std::size_t i = 0; i < group.size(); ++i)
        for (std::size_t j = i + 1; j < group.size(); ++j) {
          slots_.push_back({group[i], group[j]});
          ++added;
        }
    }
    if (added == 0)
      throw Error(ErrorCode::InsufficientImagesPerSubject, subject,
                  "training subject " + subject + " has no timepoint with two images to pair");
  }
  if (slots_.empty())
    throw Error(ErrorCode::InsufficientImagesPerSubject, "train", "the training split has no pairable subjects");
}

std::int64_t PairSampler::batches_per_epoch() const {
  return static_cast<std::int64_t>((slots_.size() + batch_pairs_ - 1) / batch_pairs_);
}

std::vector<std::vector<PairSlot>> PairSampler::epoch(std::int64_t index) const {
  Rng rng(derive_seed(seed_, Stream::Sampler, {static_cast<std::uint64_t>(index)}));
  std::vector<PairSlot> order = slots_;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (auto& s : order)
    if (rng.bernoulli(0.5)) std::swap(s.a, s.b);
  std::vector<std::vector<PairSlot>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_pairs_)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_pairs_));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

VolumeCache::VolumeCache(const DatasetManifest& manifest, const std::vector<std::string>& subjects) {
  for (const auto& s : subjects) {
    for (const auto* e : manifest.entries_for(s)) {
      auto img = nifti::read_nifti_file(manifest.resolve(e->path));
      if (img.volume.dims != manifest.shape)
        throw Error(ErrorCode::ShapeMismatch, e->path, e->path + " has dims " + to_string(img.volume.dims));
      images_.emplace(e->path, std::move(img.volume));
    }
    auto it = manifest.subjects.find(s);
    if (it != manifest.subjects.end() && !it->second.tissue_map.empty())
      tissues_.emplace(s, phantom::tissue_from_volume(nifti::read_nifti_file(manifest.resolve(it->second.tissue_map)).volume));
  }
}

const Volume& VolumeCache::image(const ManifestEntry& entry) const {
  auto it = images_.find(entry.path);
  if (it == images_.end()) throw Error(ErrorCode::MissingFile, entry.path, "volume not loaded: " + entry.path);
  return it->second;
}

const phantom::TissueMap* VolumeCache::tissue(const std::string& subject_id) const {
  auto it = tissues_.find(subject_id);
  return it == tissues_.end() ? nullptr : &it->second;
}

std::vector<objectives::PreparedPair<float>> prepare_batch(const PretrainConfig& config, const VolumeCache& cache,
                                                           const std::vector<PairSlot>& slots, std::int64_t step) {
  std::vector<objectives::PreparedPair<float>> out(slots.size());
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < slots.size(); ++p) {
    const auto tags = [&](std::uint64_t member) {
      return derive_seed(config.seed, Stream::Augment, {static_cast<std::uint64_t>(step), p, member});
    };
    const auto flips = masking::draw_augment(tags(0), config.augment).flip;
    auto prepare = [&](const ManifestEntry& e, std::uint64_t member) {
      objectives::PreparedImage<float> im;
      im.id = {e.subject_id, e.contrast_id, e.timepoint};
      auto draw = masking::draw_augment(tags(member), config.augment);
      draw.flip = flips;
      Volume v = masking::apply_augment(cache.image(e), draw, config.augment);
      masking::normalize_in_place(v);
      const auto grid = masking::PatchGrid::for_volume(v.dims, config.mask.patch_size);
      const auto mask = masking::sample_mask(
          grid, config.mask.ratio,
          derive_seed(config.seed, Stream::Mask, {static_cast<std::uint64_t>(step), p, member}));
      im.mask = masking::voxel_mask(mask, grid);
      im.masked = to_feature_map<float>(masking::apply_mask(v, mask, grid, 0.0f));
      im.full = to_feature_map<float>(v);
      if (const auto* t = cache.tissue(e.subject_id)) {
        phantom::TissueMap tm = *t;
        masking::apply_flips(tm.labels, tm.dims, flips);
        im.tissue = std::move(tm);
      }
      if (e.health_status) im.lesion = *e.health_status ? 0 : 1;
      return im;
    };
    out[p].a = prepare(*slots[p].a, 1);
    out[p].b = prepare(*slots[p].b, 2);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'F', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Cursor {
 public:
  explicit Cursor(const std::string& data) : data_(data) {}

  template <class T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }
  const char* take(std::size_t n, const char* what) {
    if (n > data_.size() - pos_)
      throw Error(ErrorCode::CorruptCheckpoint, what, std::string("checkpoint truncated while reading ") + what);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

void put_arrays(std::string& buf, const ParameterSet<float>& set, const std::string& prefix) {
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& spec = set.spec(k);
    const std::string name = prefix + spec.name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(spec.shape.size()));
    for (int s : spec.shape) put<std::uint32_t>(buf, static_cast<std::uint32_t>(s));
    const auto values = set.at(k);
    put<std::uint64_t>(buf, values.size());
    buf.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
  }
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  Json manifest{{"format", "fmck"},
                {"config", to_json(state.config)},
                {"config_hash", config_hash(state.config)},
                {"step", state.step},
                {"epoch", state.epoch},
                {"optimizer_steps", state.opt.t},
                {"rng", {{"kind", "derived"}, {"seed", state.config.seed}, {"next_step", state.step}}},
                {"metrics", state.metrics}};
  const std::string text = manifest.dump();
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, kVersion);
  put<std::uint64_t>(buf, text.size());
  buf += text;
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(3 * state.params.size()));
  put_arrays(buf, state.params, "");
  put_arrays(buf, state.opt.m, "opt.m/");
  put_arrays(buf, state.opt.v, "opt.v/");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, path.string(), "cannot write " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error(ErrorCode::Io, path.string(), "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_hash,
                           bool allow_mismatch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, path.string(), "cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Cursor cur(data);
  if (std::memcmp(cur.take(4, "magic"), kMagic, 4) != 0)
    throw Error(ErrorCode::CorruptCheckpoint, "magic", "not an FMCK checkpoint");
  if (cur.get<std::uint32_t>("version") != kVersion)
    throw Error(ErrorCode::CorruptCheckpoint, "version", "unsupported checkpoint version");
  const auto text_len = cur.get<std::uint64_t>("manifest length");
  const char* text = cur.take(text_len, "manifest");
  Json manifest;
  try {
    manifest = Json::parse(text, text + text_len);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, "manifest", e.what());
  }

  TrainState st;
  try {
    st.config = config_from_json(manifest.at("config"));
    st.step = manifest.at("step").get<std::int64_t>();
    st.epoch = manifest.at("epoch").get<std::int64_t>();
    st.opt.t = manifest.at("optimizer_steps").get<std::int64_t>();
    st.metrics = manifest.value("metrics", Json::object());
    const auto stored = manifest.at("config_hash").get<std::string>();
    if (stored != config_hash(st.config))
      throw Error(ErrorCode::CorruptCheckpoint, "config_hash", "stored hash does not match the stored config");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, "manifest", e.what());
  }
  if (expected_hash && *expected_hash != config_hash(st.config) && !allow_mismatch)
    throw Error(ErrorCode::ConfigHashMismatch, "config_hash",
                "checkpoint config hash " + config_hash(st.config) + " differs from " + *expected_hash);

  const auto specs = model::parameter_specs(st.config.model);
  st.params = ParameterSet<float>(specs);
  st.opt.m = ParameterSet<float>(specs);
  st.opt.v = ParameterSet<float>(specs);
  const auto n_arrays = cur.get<std::uint32_t>("array count");
  if (n_arrays != 3 * specs.size())
    throw Error(ErrorCode::CorruptCheckpoint, "arrays",
                "expected " + std::to_string(3 * specs.size()) + " arrays, found " + std::to_string(n_arrays));
  for (std::uint32_t a = 0; a < n_arrays; ++a) {
    const auto name_len = cur.get<std::uint32_t>("name length");
    const std::string name(cur.take(name_len, "name"), name_len);
    const auto rank = cur.get<std::uint32_t>("rank");
    if (rank > 8) throw Error(ErrorCode::CorruptCheckpoint, name, "implausible rank");
    std::vector<int> shape(rank);
    for (auto& s : shape) s = static_cast<int>(cur.get<std::uint32_t>("extent"));
    const auto count = cur.get<std::uint64_t>("value count");
    ParameterSet<float>* target = &st.params;
    std::string key = name;
    if (name.rfind("opt.m/", 0) == 0) target = &st.opt.m, key = name.substr(6);
    else if (name.rfind("opt.v/", 0) == 0) target = &st.opt.v, key = name.substr(6);
    if (!target->contains(key)) throw Error(ErrorCode::CorruptCheckpoint, name, "unexpected array '" + name + "'");
    const auto k = target->index_of(key);
    auto dst = target->at(k);
    if (target->spec(k).shape != shape || count != dst.size())
      throw Error(ErrorCode::CorruptCheckpoint, name, "shape header of '" + name + "' does not match the config");
    if (count > (SIZE_MAX / sizeof(float))) throw Error(ErrorCode::CorruptCheckpoint, name, "implausible size");
    std::memcpy(dst.data(), cur.take(count * sizeof(float), name.c_str()), count * sizeof(float));
  }
  if (!cur.done()) throw Error(ErrorCode::CorruptCheckpoint, "trailer", "trailing bytes after the last array");
  return st;
}

Json StepRecord::to_json() const {
  Json j{{"step", step}, {"epoch", epoch}, {"lr", lr}};
  for (const auto& [name, value] : report.terms) j[name] = value;
  j["total"] = report.total;
  return j;
}

PretrainResult pretrain(const PretrainConfig& config, const DatasetManifest& manifest, PretrainOptions options) {
  config.validate();
  config.model.check_input(manifest.shape);
  if (config.model.in_channels != 1 || config.model.out_channels != 1)
    bad_config("model.in_channels", "pre-training reconstructs single-channel volumes");
  const PairSampler sampler(manifest, config.seed, config.batch_pairs);
  const VolumeCache cache(manifest, manifest.subjects_in(Split::Train));
  const model::UNet<float> net(config.model);

  const std::int64_t per_epoch = sampler.batches_per_epoch();
  std::int64_t total = per_epoch * config.epochs;
  if (config.max_steps > 0) total = std::min(total, config.max_steps);
  const Schedule schedule = Schedule::from(config.optim, total);

  PretrainResult result;
  result.total_steps = total;
  TrainState& st = result.state;
  const std::string hash = config_hash(config);
  if (options.resume) {
    if (config_hash(options.resume->config) != hash)
      throw Error(ErrorCode::ConfigHashMismatch, "config_hash", "resume checkpoint was written by a different config");
    st = std::move(*options.resume);
    st.config = config;
  } else {
    st.config = config;
    st.params = model::init_parameters<float>(config.model, config.seed);
    st.opt = AdamState::zeros_like(st.params);
  }

  const std::filesystem::path run_dir = config.io.run_dir;
  std::ofstream log;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    log.open(run_dir / "train_log.ndjson", st.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw Error(ErrorCode::Io, "io.run_dir", "cannot write the training log");
  }
  auto checkpoint = [&]() {
    if (!run_dir.empty()) save_checkpoint(st, run_dir / ("ckpt_" + std::to_string(st.step) + ".fmck"));
  };

  GradientSet<float> grads(st.params.specs());
  const std::int64_t stop = options.stop_at >= 0 ? std::min(options.stop_at, total) : total;
  std::vector<std::vector<PairSlot>> batches;
  std::int64_t batches_epoch = -1;
  while (st.step < stop) {
    const std::int64_t s = st.step;
    const std::int64_t epoch = s / per_epoch;
    if (epoch != batches_epoch) {
      batches = sampler.epoch(epoch);
      batches_epoch = epoch;
    }
    const auto batch = prepare_batch(config, cache, batches[static_cast<std::size_t>(s % per_epoch)], s);
    grads.zero();
    const auto report = objectives::total_loss(net, st.params, batch, config.loss, &grads);
    for (const auto& [name, value] : report.terms)
      if (!std::isfinite(value))
        throw Error(ErrorCode::NonFiniteLoss, name, "loss term '" + name + "' is not finite at step " + std::to_string(s));
    if (!std::isfinite(report.total))
      throw Error(ErrorCode::NonFiniteLoss, "total", "total loss is not finite at step " + std::to_string(s));

    const double lr = schedule.at(s);
    adamw_step(st.params, grads, st.opt, lr, config.optim);
    st.step = s + 1;
    st.epoch = st.step / per_epoch;

    StepRecord rec{s, epoch, lr, report};
    st.metrics = rec.to_json();
    if (log) log << rec.to_json().dump() << '\n' << std::flush;
    if (options.on_step) options.on_step(rec);
    result.log.push_back(std::move(rec));

    const bool epoch_end = st.step % per_epoch == 0;
    if (epoch_end && config.io.checkpoint_every_epochs > 0 && st.epoch % config.io.checkpoint_every_epochs == 0 &&
        st.step != total)
      checkpoint();
  }
  if (st.step == total) checkpoint();
  return result;
}

}  // namespace fmch::training
