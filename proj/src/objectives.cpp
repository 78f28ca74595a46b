// SPDX-License-Identifier: Apache-2.0
#include "fmch/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "fmch/rng.hpp"

namespace fmch::objectives {
namespace {

constexpr double kStandardizeEps = 1e-5;

template <class T>
void scale_in_place(FeatureMap<T>& f, T s) {
  for (auto& v : f.storage()) v *= s;
}

template <class T>
void require_same_shape(const FeatureMap<T>& a, const FeatureMap<T>& b, const char* field) {
  if (!a.same_shape(b))
    throw Error(ErrorCode::ShapeMismatch, field,
                std::string(field) + ": " + std::to_string(a.channels()) + "x" + to_string(a.dims()) + " vs " +
                    std::to_string(b.channels()) + "x" + to_string(b.dims()));
}

}  // namespace

template <class T>
T masked_recon_loss(const FeatureMap<T>& prediction, const FeatureMap<T>& target, const masking::VoxelMask& mask,
                    FeatureMap<T>* grad) {
  require_same_shape(prediction, target, "prediction");
  if (mask.dims != prediction.dims())
    throw Error(ErrorCode::ShapeMismatch, "mask", "mask dims " + to_string(mask.dims) + " vs prediction");
  const std::size_t n_vox = prediction.voxels();
  const std::size_t n = mask.count() * static_cast<std::size_t>(prediction.channels());
  if (n == 0) throw Error(ErrorCode::EmptyMask, "mask", "no masked voxels");
  if (grad) *grad = FeatureMap<T>(prediction.channels(), prediction.dims());
  double sum = 0.0;
  const T scale = static_cast<T>(2.0 / static_cast<double>(n));
  for (int c = 0; c < prediction.channels(); ++c) {
    const auto p = prediction.channel(c);
    const auto t = target.channel(c);
    for (std::size_t i = 0; i < n_vox; ++i) {
      if (!mask.values[i]) continue;
      const T d = p[i] - t[i];
      sum += static_cast<double>(d) * static_cast<double>(d);
      if (grad) grad->channel(c)[i] = scale * d;
    }
  }
  return static_cast<T>(sum / static_cast<double>(n));
}

template <class T>
T mse_loss(const FeatureMap<T>& prediction, const FeatureMap<T>& target, FeatureMap<T>* grad) {
  require_same_shape(prediction, target, "prediction");
  const std::size_t n = prediction.size();
  if (n == 0) throw Error(ErrorCode::EmptyInput, "prediction", "empty volume");
  if (grad) *grad = FeatureMap<T>(prediction.channels(), prediction.dims());
  double sum = 0.0;
  const T scale = static_cast<T>(2.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const T d = prediction.storage()[i] - target.storage()[i];
    sum += static_cast<double>(d) * static_cast<double>(d);
    if (grad) grad->storage()[i] = scale * d;
  }
  return static_cast<T>(sum / static_cast<double>(n));
}

std::vector<int> downsample_labels(const phantom::TissueMap& map, Dims3 target) {
  const Dims3 s = map.dims;
  if (target.d < 1 || target.h < 1 || target.w < 1 || s.d % target.d || s.h % target.h || s.w % target.w)
    throw Error(ErrorCode::ShapeMismatch, "tissue_map",
                "tissue map " + to_string(s) + " does not pool evenly to " + to_string(target));
  const int fd = s.d / target.d, fh = s.h / target.h, fw = s.w / target.w;
  std::vector<int> out(target.count(), 0);
  for (int z = 0; z < target.d; ++z)
    for (int y = 0; y < target.h; ++y)
      for (int x = 0; x < target.w; ++x) {
        std::array<int, phantom::kNumTissues> votes{};
        for (int a = 0; a < fd; ++a)
          for (int b = 0; b < fh; ++b)
            for (int c = 0; c < fw; ++c) ++votes[map.labels[s.index(z * fd + a, y * fh + b, x * fw + c)]];
        int best = 0;
        for (int k = 1; k < phantom::kNumTissues; ++k)
          if (votes[k] > votes[best]) best = k;
        out[target.index(z, y, x)] = best;
      }
  return out;
}

template <class T>
T cross_entropy_loss(const FeatureMap<T>& logits, const std::vector<int>& labels, FeatureMap<T>* grad) {
  const int k = logits.channels();
  const std::size_t n = logits.voxels();
  if (labels.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "labels",
                std::to_string(labels.size()) + " labels for " + std::to_string(n) + " voxels");
  if (n == 0) throw Error(ErrorCode::EmptyInput, "logits", "no voxels");
  if (grad) *grad = FeatureMap<T>(k, logits.dims());
  double sum = 0.0;
  std::vector<double> prob(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) throw Error(ErrorCode::UnknownLabel, "labels", "label " + std::to_string(y) + " out of range");
    double m = -INFINITY;
    for (int c = 0; c < k; ++c) m = std::max(m, static_cast<double>(logits.channel(c)[i]));
    double z = 0.0;
    for (int c = 0; c < k; ++c) {
      prob[c] = std::exp(static_cast<double>(logits.channel(c)[i]) - m);
      z += prob[c];
    }
    sum += std::log(z) + m - static_cast<double>(logits.channel(y)[i]);
    if (grad) {
      for (int c = 0; c < k; ++c)
        grad->channel(c)[i] = static_cast<T>((prob[c] / z - (c == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  return static_cast<T>(sum / static_cast<double>(n));
}

template <class T>
T anat_anchor_loss(const FeatureMap<T>& logits, const phantom::TissueMap& tissue, FeatureMap<T>* grad) {
  return cross_entropy_loss(logits, downsample_labels(tissue, logits.dims()), grad);
}

template <class T>
T anat_consistency_loss(const FeatureMap<T>& a, const FeatureMap<T>& b, FeatureMap<T>* grad_a,
                        FeatureMap<T>* grad_b) {
  require_same_shape(a, b, "z_anat");
  if (a.empty()) throw Error(ErrorCode::EmptyInput, "z_anat", "empty feature map");
  kernels::InstanceNormCache<T> ca, cb;
  const T eps = static_cast<T>(kStandardizeEps);
  const auto sa = kernels::instance_norm_forward<T>(a, {}, {}, eps, &ca);
  const auto sb = kernels::instance_norm_forward<T>(b, {}, {}, eps, &cb);
  const std::size_t n = a.size();
  double sum = 0.0;
  FeatureMap<T> diff(a.channels(), a.dims());
  const T scale = static_cast<T>(2.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const T d = sa.storage()[i] - sb.storage()[i];
    sum += static_cast<double>(d) * static_cast<double>(d);
    diff.storage()[i] = scale * d;
  }
  if (grad_a) *grad_a = kernels::instance_norm_backward<T>(diff, ca, {}, {}, {});
  if (grad_b) {
    scale_in_place(diff, T(-1));
    *grad_b = kernels::instance_norm_backward<T>(diff, cb, {}, {}, {});
  }
  return static_cast<T>(sum / static_cast<double>(n));
}

template <class T>
T pathology_loss(T logit, int label, T* grad) {
  if (label != 0 && label != 1) throw Error(ErrorCode::UnknownLabel, "health_status", "label must be 0 or 1");
  const double x = static_cast<double>(logit);
  const double y = static_cast<double>(label);
  if (grad) {
    const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    *grad = static_cast<T>(sig - y);
  }
  return static_cast<T>(std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
}

void check_swap_pairing(const ImageId& anat_source, const ImageId& contrast_source, const ImageId& target) {
  if (anat_source.subject_id != contrast_source.subject_id || anat_source.timepoint != contrast_source.timepoint)
    throw Error(ErrorCode::SubjectMismatch, "pair",
                "swap pairs " + anat_source.subject_id + "/t" + std::to_string(anat_source.timepoint) + " with " +
                    contrast_source.subject_id + "/t" + std::to_string(contrast_source.timepoint));
  if (!(target == contrast_source))
    throw Error(ErrorCode::SubjectMismatch, "target", "swap target must be the contrast-code source image");
}

template <class T>
SwapResult<T> swap_recon_loss(const model::UNet<T>& net, const ParameterSet<T>& params, const ImageId& anat_source,
                              const FeatureMap<T>& z_anat, const ImageId& contrast_source,
                              const FeatureMap<T>& z_contrast, const ImageId& target_id, const FeatureMap<T>& target,
                              bool want_grad) {
  check_swap_pairing(anat_source, contrast_source, target_id);
  SwapResult<T> r;
  r.prediction = net.decode(params, z_anat, z_contrast, {}, model::DecodeMode::Swap, want_grad ? &r.trace : nullptr);
  r.value = mse_loss(r.prediction, target, want_grad ? &r.grad_prediction : nullptr);
  return r;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Ssl3d: return "ssl3d";
    case Variant::Fomo25: return "fomo25";
    case Variant::Combined: return "combined";
  }
  return "combined";
}

Variant variant_from_string(const std::string& s) {
  if (s == "ssl3d") return Variant::Ssl3d;
  if (s == "fomo25") return Variant::Fomo25;
  if (s == "combined") return Variant::Combined;
  throw Error(ErrorCode::InvalidConfig, "loss.variant", "unknown variant '" + s + "' (ssl3d, fomo25, combined)");
}

LossWeights LossWeights::for_variant(Variant v) {
  LossWeights w;
  w.variant = v;
  if (v == Variant::Ssl3d) w.swap = 0.0;
  if (v == Variant::Fomo25) w.seg = w.path = 0.0;
  return w;
}

void LossWeights::validate() const {
  const double all[] = {mae, seg, cons, path, swap};
  bool any = false;
  for (std::size_t i = 0; i < 5; ++i) {
    if (!std::isfinite(all[i]) || all[i] < 0.0)
      throw Error(ErrorCode::InvalidWeights, std::string("loss.") + kTermNames[i], "weights must be finite and >= 0");
    any = any || all[i] > 0.0;
  }
  if (!any) throw Error(ErrorCode::InvalidWeights, "loss", "at least one weight must be positive");
  if (variant == Variant::Ssl3d && swap != 0.0)
    throw Error(ErrorCode::InvalidWeights, "loss.swap", "ssl3d variant requires swap = 0");
  if (variant == Variant::Fomo25 && (seg != 0.0 || path != 0.0))
    throw Error(ErrorCode::InvalidWeights, "loss.seg", "fomo25 variant requires seg = path = 0");
}

LossReport combine(const LossWeights& weights, const std::map<std::string, double>& terms) {
  const std::map<std::string, double> w{
      {"mae", weights.mae}, {"seg", weights.seg}, {"cons", weights.cons}, {"path", weights.path}, {"swap", weights.swap}};
  LossReport r;
  for (const auto& [name, value] : terms) {
    auto it = w.find(name);
    if (it == w.end()) throw Error(ErrorCode::InvalidWeights, name, "unknown loss term '" + name + "'");
    if (it->second == 0.0) continue;
    r.terms[name] = value;
    r.total += it->second * value;
  }
  return r;
}

template <class T>
LossReport total_loss(const model::UNet<T>& net, const ParameterSet<T>& params,
                      const std::vector<PreparedPair<T>>& batch, const LossWeights& w, GradientSet<T>* grads) {
  using model::DecodeMode;
  w.validate();
  if (batch.empty()) throw Error(ErrorCode::EmptyInput, "batch", "empty batch");
  const bool paired = w.cons > 0.0 || w.swap > 0.0;

  struct State {
    const PreparedImage<T>* image = nullptr;
    model::EncoderTrace<T> trace;
    model::EncoderOutput<T> enc;
    model::LatentGradient<T> grad;
  };

  std::vector<const PreparedImage<T>*> images;
  for (const auto& pair : batch) {
    images.push_back(&pair.a);
    if (pair.b) {
      if (pair.b->id.subject_id != pair.a.id.subject_id)
        throw Error(ErrorCode::SubjectMismatch, "pair", pair.a.id.subject_id + " paired with " + pair.b->id.subject_id);
      images.push_back(&*pair.b);
    } else if (paired) {
      throw Error(ErrorCode::MissingPairing, "batch",
                  "subject " + pair.a.id.subject_id + " has no partner image but cons/swap is active");
    }
  }
  const std::size_t n_img = images.size();
  const std::size_t n_pairs = batch.size();
  const bool train = grads != nullptr;

  auto encode_all = [&](bool masked) {
    std::vector<State> st(n_img);
    for (std::size_t i = 0; i < n_img; ++i) {
      st[i].image = images[i];
      st[i].enc = net.encode(params, masked ? images[i]->masked : images[i]->full, train ? &st[i].trace : nullptr);
      if (train) {
        st[i].grad.z_anat = FeatureMap<T>(st[i].enc.latent.z_anat.channels(), st[i].enc.latent.z_anat.dims());
        st[i].grad.z_contrast =
            FeatureMap<T>(st[i].enc.latent.z_contrast.channels(), st[i].enc.latent.z_contrast.dims());
      }
    }
    return st;
  };

  std::map<std::string, double> terms;
  const bool need_masked = w.mae > 0 || w.seg > 0 || w.path > 0 || w.cons > 0 || (w.swap > 0 && w.swap_on_masked);
  std::vector<State> masked;
  if (need_masked) masked = encode_all(true);

  if (w.mae > 0) {
    double sum = 0.0;
    const T scale = static_cast<T>(w.mae / static_cast<double>(n_img));
    for (auto& s : masked) {
      model::DecoderTrace<T> dt;
      const auto pred = net.decode(params, s.enc.latent.z_anat, s.enc.latent.z_contrast, s.enc.skips,
                                   DecodeMode::MaskedRecon, train ? &dt : nullptr);
      FeatureMap<T> g;
      sum += masked_recon_loss(pred, s.image->full, s.image->mask, train ? &g : nullptr);
      if (train) {
        scale_in_place(g, scale);
        auto lg = net.decode_backward(params, dt, g, *grads);
        kernels::accumulate(s.grad.z_anat, lg.z_anat);
        kernels::accumulate(s.grad.z_contrast, lg.z_contrast);
        s.grad.skips = std::move(lg.skips);
      }
    }
    terms["mae"] = sum / static_cast<double>(n_img);
  }

  if (w.seg > 0) {
    std::size_t n = 0;
    for (const auto& s : masked) n += s.image->tissue ? 1 : 0;
    if (n == 0) throw Error(ErrorCode::MissingPairing, "tissue_map", "seg term active but no image has a tissue map");
    const T scale = static_cast<T>(w.seg / static_cast<double>(n));
    double sum = 0.0;
    for (auto& s : masked) {
      if (!s.image->tissue) continue;
      const auto logits = net.anat_head(params, s.enc.latent.z_anat);
      FeatureMap<T> g;
      sum += anat_anchor_loss(logits, *s.image->tissue, train ? &g : nullptr);
      if (train) {
        scale_in_place(g, scale);
        kernels::accumulate(s.grad.z_anat, net.anat_head_backward(params, s.enc.latent.z_anat, g, *grads));
      }
    }
    terms["seg"] = sum / static_cast<double>(n);
  }

  if (w.path > 0) {
    std::size_t n = 0;
    for (const auto& s : masked) n += s.image->lesion ? 1 : 0;
    if (n == 0) throw Error(ErrorCode::MissingPairing, "health_status", "path term active but no image has a label");
    const T scale = static_cast<T>(w.path / static_cast<double>(n));
    double sum = 0.0;
    for (auto& s : masked) {
      if (!s.image->lesion) continue;
      T g{};
      sum += pathology_loss(net.pathology_head(params, s.enc.latent.z_contrast), *s.image->lesion, train ? &g : nullptr);
      if (train)
        kernels::accumulate(s.grad.z_contrast,
                            net.pathology_head_backward(params, s.enc.latent.z_contrast, g * scale, *grads));
    }
    terms["path"] = sum / static_cast<double>(n);
  }

  // Pair members sit next to each other in `images`.
  if (w.cons > 0) {
    const T scale = static_cast<T>(w.cons / static_cast<double>(n_pairs));
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < n_img; i += 2) {
      FeatureMap<T> ga, gb;
      sum += anat_consistency_loss(masked[i].enc.latent.z_anat, masked[i + 1].enc.latent.z_anat,
                                   train ? &ga : nullptr, train ? &gb : nullptr);
      if (train) {
        scale_in_place(ga, scale);
        scale_in_place(gb, scale);
        kernels::accumulate(masked[i].grad.z_anat, ga);
        kernels::accumulate(masked[i + 1].grad.z_anat, gb);
      }
    }
    terms["cons"] = sum / static_cast<double>(n_pairs);
  }

  std::vector<State> full;
  if (w.swap > 0) {
    if (!w.swap_on_masked) full = encode_all(false);
    std::vector<State>& src = w.swap_on_masked ? masked : full;
    const T scale = static_cast<T>(w.swap / static_cast<double>(2 * n_pairs));
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < n_img; i += 2) {
      for (int dir = 0; dir < 2; ++dir) {
        State& anat = src[i + dir];
        State& con = src[i + 1 - dir];
        auto r = swap_recon_loss(net, params, anat.image->id, anat.enc.latent.z_anat, con.image->id,
                                 con.enc.latent.z_contrast, con.image->id, con.image->full, train);
        sum += r.value;
        if (train) {
          scale_in_place(r.grad_prediction, scale);
          auto lg = net.decode_backward(params, r.trace, r.grad_prediction, *grads);
          kernels::accumulate(anat.grad.z_anat, lg.z_anat);
          kernels::accumulate(con.grad.z_contrast, lg.z_contrast);
        }
      }
    }
    terms["swap"] = sum / static_cast<double>(2 * n_pairs);
  }

  if (train) {
    for (auto& s : masked) net.encode_backward(params, s.trace, s.grad, *grads);
    for (auto& s : full) net.encode_backward(params, s.trace, s.grad, *grads);
  }
  return combine(w, terms);
}

GradCheckResult grad_check(const std::function<double(const std::vector<double>&)>& loss,
                           const std::vector<double>& point, const std::vector<double>& analytic, double step,
                           std::uint64_t seed, std::size_t max_coords) {
  if (!(step >= 1e-6 && step <= 1e-3)) throw Error(ErrorCode::InvalidConfig, "step", "step must lie in [1e-6, 1e-3]");
  if (analytic.size() != point.size())
    throw Error(ErrorCode::ShapeMismatch, "analytic", "gradient and point sizes differ");
  std::vector<std::size_t> coords(point.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (coords.size() > max_coords) {
    Rng rng(derive_seed(seed, Stream::GradCheck));
    for (std::size_t i = 0; i < max_coords; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(max_coords);
  }
  GradCheckResult r;
  std::vector<double> x = point;
  for (std::size_t i : coords) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = loss(x);
    x[i] = orig - step;
    const double fm = loss(x);
    x[i] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    const double an = analytic[i];
    if (!std::isfinite(fd) || !std::isfinite(an))
      throw Error(ErrorCode::NonFiniteGradient, "coordinate " + std::to_string(i), "non-finite gradient");
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    if (r.coordinates == 0 || rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
      r.worst_fd = fd;
      r.worst_analytic = an;
    }
    ++r.coordinates;
  }
  return r;
}

#define FMCH_INSTANTIATE(T)                                                                                        \
  template T masked_recon_loss<T>(const FeatureMap<T>&, const FeatureMap<T>&, const masking::VoxelMask&,          \
                                  FeatureMap<T>*);                                                                 \
  template T mse_loss<T>(const FeatureMap<T>&, const FeatureMap<T>&, FeatureMap<T>*);                              \
  template T cross_entropy_loss<T>(const FeatureMap<T>&, const std::vector<int>&, FeatureMap<T>*);                 \
  template T anat_anchor_loss<T>(const FeatureMap<T>&, const phantom::TissueMap&, FeatureMap<T>*);                 \
  template T anat_consistency_loss<T>(const FeatureMap<T>&, const FeatureMap<T>&, FeatureMap<T>*, FeatureMap<T>*); \
  template T pathology_loss<T>(T, int, T*);                                                                        \
  template SwapResult<T> swap_recon_loss<T>(const model::UNet<T>&, const ParameterSet<T>&, const ImageId&,         \
                                            const FeatureMap<T>&, const ImageId&, const FeatureMap<T>&,            \
                                            const ImageId&, const FeatureMap<T>&, bool);                           \
  template LossReport total_loss<T>(const model::UNet<T>&, const ParameterSet<T>&,                                 \
                                    const std::vector<PreparedPair<T>>&, const LossWeights&, GradientSet<T>*);

FMCH_INSTANTIATE(float)
FMCH_INSTANTIATE(double)

}  // namespace fmch::objectives
