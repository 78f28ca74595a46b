// SPDX-License-Identifier: Apache-2.0
#include "fmch/model.hpp"

#include <cmath>

#include "fmch/rng.hpp"

namespace fmch::model {
namespace {

constexpr double kNormEps = 1e-5;

std::string block_name(const char* part, int level, const std::string& tail) {
  return std::string(part) + std::to_string(level) + "." + tail;
}

void add_block_specs(std::vector<ParamSpec>& specs, const UNetConfig& c, const std::string& name, bool down, int in,
                     int out) {
  const int k = down ? 2 : 3;
  specs.push_back({name + ".weight", {out, in, k, k, k}});
  // A bias in front of instance norm is cancelled by the mean subtraction.
  if (c.norm == NormKind::Instance) {
    specs.push_back({name + ".gamma", {out}});
    specs.push_back({name + ".beta", {out}});
  } else {
    specs.push_back({name + ".bias", {out}});
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_projection(const std::string& name) {
  return name.rfind("out.", 0) == 0 || name.rfind("anat_head.", 0) == 0 || name.rfind("path_head.", 0) == 0 ||
         name.rfind("latent.", 0) == 0 || name.rfind("task.", 0) == 0;
}

template <class T>
FeatureMap<T> zeros_like_or(const FeatureMap<T>& maybe, int channels, Dims3 dims) {
  if (!maybe.empty()) return maybe;
  return FeatureMap<T>(channels, dims);
}

template <class T>
bool all_zero(const FeatureMap<T>& f) {
  for (T v : f.storage())
    if (v != T(0)) return false;
  return true;
}

// Latent bias widened to all C channels (zeros on standardized channels).
template <class T>
std::vector<T> latent_bias(const UNetConfig& c, const ParameterSet<T>& p) {
  const auto b = p["latent.bias"];
  std::vector<T> full(static_cast<std::size_t>(c.bottleneck_channels), T(0));
  std::copy(b.begin(), b.end(), full.end() - static_cast<std::ptrdiff_t>(b.size()));
  return full;
}

}  // namespace

void UNetConfig::validate() const {
  auto bad = [](const char* field, const std::string& what) { throw Error(ErrorCode::InvalidConfig, field, what); };
  if (in_channels < 1) bad("model.in_channels", "must be >= 1");
  if (out_channels < 1) bad("model.out_channels", "must be >= 1");
  if (base_width < 1) bad("model.base_width", "must be >= 1");
  if (depth < 1) bad("model.depth", "must be >= 1");
  if (static_cast<int>(multipliers.size()) != depth + 1) bad("model.multipliers", "need depth + 1 entries");
  for (int m : multipliers)
    if (m < 1) bad("model.multipliers", "entries must be >= 1");
  if (convs_per_level < 1) bad("model.convs_per_level", "must be >= 1");
  if (anat_channels < 1) bad("model.anat_channels", "C_a must be >= 1");
  if (contrast_channels() < 1) bad("model.bottleneck_channels", "C_c = C - C_a must be >= 1");
  if (head_classes < 2) bad("model.head_classes", "must be >= 2");
}

void UNetConfig::check_input(Dims3 dims) const {
  const int r = reduction();
  if (dims.d < r || dims.h < r || dims.w < r || dims.d % r || dims.h % r || dims.w % r)
    throw Error(ErrorCode::ShapeMismatch, "input",
                "input " + to_string(dims) + " not divisible by 2^depth = " + std::to_string(r));
}

std::vector<ParamSpec> parameter_specs(const UNetConfig& c) {
  c.validate();
  std::vector<ParamSpec> specs;
  const int L = c.depth;
  for (int j = 0; j < c.convs_per_level; ++j)
    add_block_specs(specs, c, block_name("enc", 0, "b" + std::to_string(j)), false, j == 0 ? c.in_channels : c.width(0),
                    c.width(0));
  for (int l = 1; l <= L; ++l) {
    add_block_specs(specs, c, block_name("enc", l, "down"), true, c.width(l - 1), c.width(l));
    for (int j = 1; j < c.convs_per_level; ++j)
      add_block_specs(specs, c, block_name("enc", l, "b" + std::to_string(j)), false, c.width(l), c.width(l));
  }
  specs.push_back({"latent.weight", {c.bottleneck_channels, c.width(L), 3, 3, 3}});
  // Standardized anatomical channels drop their bias for the same reason.
  specs.push_back({"latent.bias", {c.anat_code == AnatCode::Standardized ? c.contrast_channels() : c.bottleneck_channels}});
  for (int l = L - 1; l >= 0; --l) {
    const int in = l == L - 1 ? c.bottleneck_channels : c.width(l + 1);
    specs.push_back({block_name("dec", l, "up.weight"), {in, c.width(l), 2, 2, 2}});
    specs.push_back({block_name("dec", l, "up.bias"), {c.width(l)}});
    for (int j = 0; j < c.convs_per_level; ++j)
      add_block_specs(specs, c, block_name("dec", l, "b" + std::to_string(j)), false,
                      j == 0 ? 2 * c.width(l) : c.width(l), c.width(l));
  }
  specs.push_back({"out.weight", {c.out_channels, c.width(0), 1, 1, 1}});
  specs.push_back({"out.bias", {c.out_channels}});
  specs.push_back({"anat_head.weight", {c.head_classes, c.anat_channels, 1, 1, 1}});
  specs.push_back({"anat_head.bias", {c.head_classes}});
  specs.push_back({"path_head.weight", {1, c.contrast_channels()}});
  specs.push_back({"path_head.bias", {1}});
  return specs;
}

std::size_t count_parameters(const UNetConfig& config) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(config)) n += s.count();
  return n;
}

namespace {

template <class T>
void init_tensor(std::span<T> values, const ParamSpec& spec, Rng& rng) {
  const std::string& name = spec.name;
  if (ends_with(name, ".gamma")) {
    std::fill(values.begin(), values.end(), T(1));
    return;
  }
  if (!ends_with(name, ".weight")) {
    std::fill(values.begin(), values.end(), T(0));
    return;
  }
  std::size_t fan_in = 1;
  if (ends_with(name, ".up.weight")) {
    fan_in = static_cast<std::size_t>(spec.shape[0]);
  } else {
    for (std::size_t i = 1; i < spec.shape.size(); ++i) fan_in *= static_cast<std::size_t>(spec.shape[i]);
  }
  const double gain = is_projection(name) ? 1.0 : 2.0;
  const double std = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : values) v = static_cast<T>(std * rng.normal());
}

}  // namespace

template <class T>
ParameterSet<T> init_parameters(const UNetConfig& config, std::uint64_t seed) {
  ParameterSet<T> p(parameter_specs(config));
  Rng rng(derive_seed(seed, Stream::Init));
  for (std::size_t i = 0; i < p.size(); ++i) init_tensor(p.at(i), p.spec(i), rng);
  return p;
}

template <class T>
void add_projection(ParameterSet<T>& params, const std::string& prefix, int in_channels, int out_channels,
                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::Init, {0xBEAD}));
  ParamSpec w{prefix + ".weight", {out_channels, in_channels, 1, 1, 1}};
  init_tensor(params.add(w.name, w.shape), w, rng);
  params.add(prefix + ".bias", {out_channels});
}

template <class T>
UNet<T>::UNet(UNetConfig config) : config_(std::move(config)) {
  config_.validate();
}

template <class T>
FeatureMap<T> UNet<T>::block_forward(const ParameterSet<T>& p, const std::string& name, bool down,
                                     const FeatureMap<T>& x, int out_channels, BlockTrace<T>* trace) const {
  const bool norm = config_.norm == NormKind::Instance;
  const std::vector<T> zero_bias(norm ? static_cast<std::size_t>(out_channels) : 0, T(0));
  const std::span<const T> bias = norm ? std::span<const T>(zero_bias) : p[name + ".bias"];
  FeatureMap<T> y = down ? kernels::down2_forward<T>(x, p[name + ".weight"], bias, out_channels)
                         : kernels::conv3d_forward<T>(x, p[name + ".weight"], bias, out_channels, 3);
  FeatureMap<T> n;
  if (norm) {
    n = kernels::instance_norm_forward<T>(y, p[name + ".gamma"], p[name + ".beta"], static_cast<T>(kNormEps),
                                          trace ? &trace->norm : nullptr);
  } else {
    n = std::move(y);
  }
  FeatureMap<T> out = kernels::silu_forward(n);
  if (trace) {
    trace->input = x;
    trace->pre_activation = std::move(n);
  }
  return out;
}

template <class T>
FeatureMap<T> UNet<T>::block_backward(const ParameterSet<T>& p, const std::string& name, bool down,
                                      const BlockTrace<T>& trace, const FeatureMap<T>& grad_out,
                                      GradientSet<T>& grads) const {
  FeatureMap<T> g = kernels::silu_backward(trace.pre_activation, grad_out);
  const bool norm = config_.norm == NormKind::Instance;
  if (norm)
    g = kernels::instance_norm_backward<T>(g, trace.norm, p[name + ".gamma"], grads[name + ".gamma"],
                                           grads[name + ".beta"]);
  std::vector<T> scratch(norm ? static_cast<std::size_t>(g.channels()) : 0, T(0));
  const std::span<T> grad_bias = norm ? std::span<T>(scratch) : grads[name + ".bias"];
  const int in_channels = trace.input.channels();
  if (down) {
    kernels::down2_backward_weight<T>(trace.input, g, grads[name + ".weight"], grad_bias);
    return kernels::down2_backward_input<T>(g, p[name + ".weight"], in_channels);
  }
  kernels::conv3d_backward_weight<T>(trace.input, g, 3, grads[name + ".weight"], grad_bias);
  return kernels::conv3d_backward_input<T>(g, p[name + ".weight"], in_channels, 3);
}

template <class T>
EncoderOutput<T> UNet<T>::encode(const ParameterSet<T>& p, const FeatureMap<T>& x, EncoderTrace<T>* trace) const {
  const UNetConfig& c = config_;
  if (x.channels() != c.in_channels)
    throw Error(ErrorCode::ShapeMismatch, "input", "expected " + std::to_string(c.in_channels) + " input channels");
  c.check_input(x.dims());

  EncoderOutput<T> out;
  auto next_trace = [&]() -> BlockTrace<T>* {
    if (!trace) return nullptr;
    trace->blocks.emplace_back();
    return &trace->blocks.back();
  };
  if (trace) {
    trace->blocks.clear();
    trace->blocks.reserve(static_cast<std::size_t>((c.depth + 1) * c.convs_per_level));
  }

  FeatureMap<T> h = x;
  for (int j = 0; j < c.convs_per_level; ++j)
    h = block_forward(p, block_name("enc", 0, "b" + std::to_string(j)), false, h, c.width(0), next_trace());
  out.skips.push_back(h);
  for (int l = 1; l <= c.depth; ++l) {
    h = block_forward(p, block_name("enc", l, "down"), true, h, c.width(l), next_trace());
    for (int j = 1; j < c.convs_per_level; ++j)
      h = block_forward(p, block_name("enc", l, "b" + std::to_string(j)), false, h, c.width(l), next_trace());
    if (l < c.depth) out.skips.push_back(h);
  }

  const std::vector<T> bias = latent_bias(c, p);
  FeatureMap<T> latent = kernels::conv3d_forward<T>(h, p["latent.weight"], bias, c.bottleneck_channels, 3);
  FeatureMap<T> anat = slice_channels(latent, 0, c.anat_channels);
  out.latent.z_contrast = slice_channels(latent, c.anat_channels, c.contrast_channels());
  if (c.anat_code == AnatCode::Standardized) {
    out.latent.z_anat = kernels::instance_norm_forward<T>(anat, {}, {}, static_cast<T>(kNormEps),
                                                          trace ? &trace->anat_norm : nullptr);
  } else {
    out.latent.z_anat = std::move(anat);
  }
  if (trace) trace->latent_input = std::move(h);
  return out;
}

template <class T>
void UNet<T>::encode_backward(const ParameterSet<T>& p, const EncoderTrace<T>& trace, const LatentGradient<T>& grad,
                              GradientSet<T>& grads) const {
  const UNetConfig& c = config_;
  const Dims3 bdims = trace.latent_input.dims();
  FeatureMap<T> g_anat = zeros_like_or(grad.z_anat, c.anat_channels, bdims);
  const FeatureMap<T> g_contrast = zeros_like_or(grad.z_contrast, c.contrast_channels(), bdims);
  if (c.anat_code == AnatCode::Standardized)
    g_anat = kernels::instance_norm_backward<T>(g_anat, trace.anat_norm, {}, {}, {});
  const FeatureMap<T> g_latent = concat_channels(g_anat, g_contrast);

  std::vector<T> grad_bias(static_cast<std::size_t>(c.bottleneck_channels), T(0));
  kernels::conv3d_backward_weight<T>(trace.latent_input, g_latent, 3, grads["latent.weight"], grad_bias);
  auto gb = grads["latent.bias"];
  const std::size_t skip = grad_bias.size() - gb.size();
  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += grad_bias[skip + i];
  FeatureMap<T> g = kernels::conv3d_backward_input<T>(g_latent, p["latent.weight"], c.width(c.depth), 3);

  auto add_skip = [&](int level) {
    if (static_cast<std::size_t>(level) < grad.skips.size() && !grad.skips[level].empty())
      kernels::accumulate(g, grad.skips[level]);
  };

  std::size_t b = trace.blocks.size();
  for (int l = c.depth; l >= 1; --l) {
    if (l < c.depth) add_skip(l);
    for (int j = c.convs_per_level - 1; j >= 1; --j)
      g = block_backward(p, block_name("enc", l, "b" + std::to_string(j)), false, trace.blocks[--b], g, grads);
    g = block_backward(p, block_name("enc", l, "down"), true, trace.blocks[--b], g, grads);
  }
  add_skip(0);
  for (int j = c.convs_per_level - 1; j >= 0; --j)
    g = block_backward(p, block_name("enc", 0, "b" + std::to_string(j)), false, trace.blocks[--b], g, grads);
}

template <class T>
FeatureMap<T> UNet<T>::decode_features(const ParameterSet<T>& p, const FeatureMap<T>& z_anat,
                                       const FeatureMap<T>& z_contrast, std::span<const FeatureMap<T>> skips,
                                       DecodeMode mode, DecoderTrace<T>* trace) const {
  const UNetConfig& c = config_;
  if (z_anat.channels() != c.anat_channels || z_contrast.channels() != c.contrast_channels() ||
      z_anat.dims() != z_contrast.dims())
    throw Error(ErrorCode::ShapeMismatch, "latent", "latent partition does not match the configured channel split");
  if (mode == DecodeMode::Swap) {
    for (const auto& s : skips)
      if (!all_zero(s))
        throw Error(ErrorCode::SkipsForbiddenInSwapMode, "skips", "swap-mode decoding received non-zero skip features");
  } else if (static_cast<int>(skips.size()) != c.depth) {
    throw Error(ErrorCode::ShapeMismatch, "skips", "masked reconstruction needs one skip per level");
  }

  if (trace) {
    trace->mode = mode;
    trace->up_inputs.clear();
    trace->blocks.clear();
    trace->blocks.reserve(static_cast<std::size_t>(c.depth * c.convs_per_level));
  }

  FeatureMap<T> h = concat_channels(z_anat, z_contrast);
  for (int l = c.depth - 1; l >= 0; --l) {
    const std::string up = block_name("dec", l, "up");
    FeatureMap<T> u = kernels::up2_forward<T>(h, p[up + ".weight"], p[up + ".bias"], c.width(l));
    if (trace) trace->up_inputs.push_back(std::move(h));
    if (mode == DecodeMode::MaskedRecon) {
      if (!skips[l].same_shape(u))
        throw Error(ErrorCode::ShapeMismatch, "skips", "skip " + std::to_string(l) + " has the wrong shape");
      h = concat_channels(u, skips[l]);
    } else {
      h = concat_channels(u, FeatureMap<T>(c.width(l), u.dims()));
    }
    for (int j = 0; j < c.convs_per_level; ++j) {
      BlockTrace<T>* bt = nullptr;
      if (trace) {
        trace->blocks.emplace_back();
        bt = &trace->blocks.back();
      }
      h = block_forward(p, block_name("dec", l, "b" + std::to_string(j)), false, h, c.width(l), bt);
    }
  }
  if (trace) trace->features = h;
  return h;
}

template <class T>
LatentGradient<T> UNet<T>::decode_features_backward(const ParameterSet<T>& p, const DecoderTrace<T>& trace,
                                                    const FeatureMap<T>& grad_features, GradientSet<T>& grads) const {
  const UNetConfig& c = config_;
  LatentGradient<T> out;
  if (trace.mode == DecodeMode::MaskedRecon) out.skips.resize(static_cast<std::size_t>(c.depth));

  FeatureMap<T> g = grad_features;
  std::size_t b = trace.blocks.size();
  for (int l = 0; l < c.depth; ++l) {
    for (int j = c.convs_per_level - 1; j >= 0; --j)
      g = block_backward(p, block_name("dec", l, "b" + std::to_string(j)), false, trace.blocks[--b], g, grads);
    const int w = c.width(l);
    FeatureMap<T> g_up = slice_channels(g, 0, w);
    if (trace.mode == DecodeMode::MaskedRecon) out.skips[l] = slice_channels(g, w, w);
    const std::string up = block_name("dec", l, "up");
    const FeatureMap<T>& up_in = trace.up_inputs[static_cast<std::size_t>(c.depth - 1 - l)];
    kernels::up2_backward_weight<T>(up_in, g_up, grads[up + ".weight"], grads[up + ".bias"]);
    g = kernels::up2_backward_input<T>(g_up, p[up + ".weight"], up_in.channels());
  }
  out.z_anat = slice_channels(g, 0, c.anat_channels);
  out.z_contrast = slice_channels(g, c.anat_channels, c.contrast_channels());
  return out;
}

template <class T>
FeatureMap<T> UNet<T>::decode(const ParameterSet<T>& p, const FeatureMap<T>& z_anat, const FeatureMap<T>& z_contrast,
                              std::span<const FeatureMap<T>> skips, DecodeMode mode, DecoderTrace<T>* trace) const {
  return project(p, "out", decode_features(p, z_anat, z_contrast, skips, mode, trace));
}

template <class T>
LatentGradient<T> UNet<T>::decode_backward(const ParameterSet<T>& p, const DecoderTrace<T>& trace,
                                           const FeatureMap<T>& grad_output, GradientSet<T>& grads) const {
  const FeatureMap<T> g = project_backward(p, "out", trace.features, grad_output, grads);
  return decode_features_backward(p, trace, g, grads);
}

template <class T>
FeatureMap<T> UNet<T>::anat_head(const ParameterSet<T>& p, const FeatureMap<T>& z_anat) const {
  if (z_anat.channels() != config_.anat_channels)
    throw Error(ErrorCode::ShapeMismatch, "z_anat", "expected " + std::to_string(config_.anat_channels) + " channels");
  return project(p, "anat_head", z_anat);
}

template <class T>
FeatureMap<T> UNet<T>::anat_head_backward(const ParameterSet<T>& p, const FeatureMap<T>& z_anat,
                                          const FeatureMap<T>& grad_logits, GradientSet<T>& grads) const {
  return project_backward(p, "anat_head", z_anat, grad_logits, grads);
}

template <class T>
T UNet<T>::pathology_head(const ParameterSet<T>& p, const FeatureMap<T>& z_contrast) const {
  const auto pooled = global_average_pool(z_contrast);
  const auto w = p["path_head.weight"];
  T logit = p["path_head.bias"][0];
  for (std::size_t c = 0; c < pooled.size(); ++c) logit += w[c] * pooled[c];
  return logit;
}

template <class T>
FeatureMap<T> UNet<T>::pathology_head_backward(const ParameterSet<T>& p, const FeatureMap<T>& z_contrast,
                                               T grad_logit, GradientSet<T>& grads) const {
  const auto pooled = global_average_pool(z_contrast);
  const auto w = p["path_head.weight"];
  auto gw = grads["path_head.weight"];
  grads["path_head.bias"][0] += grad_logit;
  FeatureMap<T> g(z_contrast.channels(), z_contrast.dims());
  const T inv_n = T(1) / static_cast<T>(z_contrast.voxels());
  for (int c = 0; c < z_contrast.channels(); ++c) {
    gw[c] += grad_logit * pooled[c];
    auto gc = g.channel(c);
    std::fill(gc.begin(), gc.end(), grad_logit * w[c] * inv_n);
  }
  return g;
}

template <class T>
FeatureMap<T> project(const ParameterSet<T>& p, const std::string& prefix, const FeatureMap<T>& x) {
  const auto bias = p[prefix + ".bias"];
  return kernels::conv3d_forward<T>(x, p[prefix + ".weight"], bias, static_cast<int>(bias.size()), 1);
}

template <class T>
FeatureMap<T> project_backward(const ParameterSet<T>& p, const std::string& prefix, const FeatureMap<T>& x,
                               const FeatureMap<T>& grad_out, GradientSet<T>& grads) {
  kernels::conv3d_backward_weight<T>(x, grad_out, 1, grads[prefix + ".weight"], grads[prefix + ".bias"]);
  return kernels::conv3d_backward_input<T>(grad_out, p[prefix + ".weight"], x.channels(), 1);
}

template <class T>
std::vector<T> global_average_pool(const FeatureMap<T>& x) {
  std::vector<T> out(static_cast<std::size_t>(x.channels()));
  for (int c = 0; c < x.channels(); ++c) {
    double s = 0.0;
    for (T v : x.channel(c)) s += v;
    out[c] = static_cast<T>(s / static_cast<double>(x.voxels()));
  }
  return out;
}

template <class T>
std::vector<int> argmax_channels(const FeatureMap<T>& logits) {
  std::vector<int> out(logits.voxels(), 0);
  for (std::size_t i = 0; i < logits.voxels(); ++i) {
    T best = logits.channel(0)[i];
    for (int c = 1; c < logits.channels(); ++c) {
      const T v = logits.channel(c)[i];
      if (v > best) {
        best = v;
        out[i] = c;
      }
    }
  }
  return out;
}

template class UNet<float>;
template class UNet<double>;
template ParameterSet<float> init_parameters<float>(const UNetConfig&, std::uint64_t);
template ParameterSet<double> init_parameters<double>(const UNetConfig&, std::uint64_t);
template void add_projection<float>(ParameterSet<float>&, const std::string&, int, int, std::uint64_t);
template void add_projection<double>(ParameterSet<double>&, const std::string&, int, int, std::uint64_t);
template FeatureMap<float> project<float>(const ParameterSet<float>&, const std::string&, const FeatureMap<float>&);
template FeatureMap<double> project<double>(const ParameterSet<double>&, const std::string&, const FeatureMap<double>&);
template FeatureMap<float> project_backward<float>(const ParameterSet<float>&, const std::string&,
                                                   const FeatureMap<float>&, const FeatureMap<float>&,
                                                   GradientSet<float>&);
template FeatureMap<double> project_backward<double>(const ParameterSet<double>&, const std::string&,
                                                     const FeatureMap<double>&, const FeatureMap<double>&,
                                                     GradientSet<double>&);
template std::vector<float> global_average_pool<float>(const FeatureMap<float>&);
template std::vector<double> global_average_pool<double>(const FeatureMap<double>&);
template std::vector<int> argmax_channels<float>(const FeatureMap<float>&);
template std::vector<int> argmax_channels<double>(const FeatureMap<double>&);

}  // namespace fmch::model
