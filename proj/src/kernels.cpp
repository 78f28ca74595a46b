// SPDX-License-Identifier: Apache-2.0
#include "fmch/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace fmch::kernels {
namespace {

inline std::size_t tap_count(int kernel) { return static_cast<std::size_t>(kernel) * kernel * kernel; }

void check_weights(std::size_t have, std::size_t want, const char* what) {
  if (have != want)
    throw Error(ErrorCode::ShapeMismatch, what,
                std::string(what) + " has " + std::to_string(have) + " values, expected " + std::to_string(want));
}

// Zero-padded flat layout.  With a halo of `pad` voxels on every side, a tap
// at (kd,kh,kw) is a constant offset in the flat index, so each tap becomes
// one long contiguous loop over [first, last) covering every interior voxel.
// Halo positions inside that range hold garbage in outputs and are dropped.
struct Padded {
  Dims3 inner;
  Dims3 outer;
  int pad;

  Padded(Dims3 d, int p) : inner(d), outer{d.d + 2 * p, d.h + 2 * p, d.w + 2 * p}, pad(p) {}

  std::size_t first() const { return outer.index(pad, pad, pad); }
  std::size_t last() const { return outer.index(inner.d - 1 + pad, inner.h - 1 + pad, inner.w - 1 + pad) + 1; }
  std::ptrdiff_t offset(int kd, int kh, int kw) const {
    return static_cast<std::ptrdiff_t>(outer.index(kd, kh, kw)) - static_cast<std::ptrdiff_t>(first());
  }

  template <class T>
  void scatter(const T* src, T* dst) const {
    for (int z = 0; z < inner.d; ++z)
      for (int y = 0; y < inner.h; ++y)
        std::copy_n(src + inner.index(z, y, 0), inner.w, dst + outer.index(z + pad, y + pad, pad));
  }
  template <class T>
  void gather(const T* src, T* dst) const {
    for (int z = 0; z < inner.d; ++z)
      for (int y = 0; y < inner.h; ++y)
        std::copy_n(src + outer.index(z + pad, y + pad, pad), inner.w, dst + inner.index(z, y, 0));
  }
  template <class T>
  std::vector<T> pad_all(const FeatureMap<T>& f) const {
    std::vector<T> out(outer.count() * static_cast<std::size_t>(f.channels()), T(0));
#pragma omp parallel for schedule(static)
    for (int c = 0; c < f.channels(); ++c) scatter(f.channel(c).data(), out.data() + outer.count() * c);
    return out;
  }
};

}  // namespace

template <class T>
FeatureMap<T> conv3d_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                             int out_channels, int kernel) {
  const int ci_n = in.channels();
  const Dims3 d = in.dims();
  const std::size_t taps = tap_count(kernel);
  check_weights(weight.size(), static_cast<std::size_t>(out_channels) * ci_n * taps, "conv3d.weight");
  check_weights(bias.size(), static_cast<std::size_t>(out_channels), "conv3d.bias");
  const Padded pd(d, kernel / 2);
  const std::vector<T> src = pd.pad_all(in);
  const std::size_t first = pd.first(), n = pd.last() - first, stride = pd.outer.count();
  FeatureMap<T> out(out_channels, d);

#pragma omp parallel
  {
    std::vector<T> acc(stride, T(0));
#pragma omp for schedule(static)
    for (int co = 0; co < out_channels; ++co) {
      T* a = acc.data() + first;
      std::fill(a, a + n, bias[co]);
      for (int ci = 0; ci < ci_n; ++ci) {
        const T* s = src.data() + stride * ci + first;
        const T* wk = weight.data() + (static_cast<std::size_t>(co) * ci_n + ci) * taps;
        if (kernel == 3) {
          for (int kd = 0; kd < 3; ++kd)
            for (int kh = 0; kh < 3; ++kh) {
              const T* w3 = wk + (kd * 3 + kh) * 3;
              const T w0 = w3[0], w1 = w3[1], w2 = w3[2];
              const T* sp = s + pd.offset(kd, kh, 0);
#pragma omp simd
              for (std::size_t i = 0; i < n; ++i) a[i] += w0 * sp[i] + w1 * sp[i + 1] + w2 * sp[i + 2];
            }
          continue;
        }
        for (int kd = 0, t = 0; kd < kernel; ++kd)
          for (int kh = 0; kh < kernel; ++kh)
            for (int kw = 0; kw < kernel; ++kw, ++t) {
              const T wv = wk[t];
              const T* sp = s + pd.offset(kd, kh, kw);
#pragma omp simd
              for (std::size_t i = 0; i < n; ++i) a[i] += wv * sp[i];
            }
      }
      pd.gather(acc.data(), out.channel(co).data());
    }
  }
  return out;
}

template <class T>
FeatureMap<T> conv3d_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels,
                                    int kernel) {
  const int co_n = grad_out.channels();
  const Dims3 d = grad_out.dims();
  const std::size_t taps = tap_count(kernel);
  check_weights(weight.size(), static_cast<std::size_t>(co_n) * in_channels * taps, "conv3d.weight");
  const Padded pd(d, kernel / 2);
  const std::vector<T> g = pd.pad_all(grad_out);
  const std::size_t first = pd.first(), n = pd.last() - first, stride = pd.outer.count();
  FeatureMap<T> grad_in(in_channels, d);

#pragma omp parallel
  {
    std::vector<T> acc(stride);
#pragma omp for schedule(static)
    for (int ci = 0; ci < in_channels; ++ci) {
      std::fill(acc.begin(), acc.end(), T(0));
      for (int co = 0; co < co_n; ++co) {
        const T* gp = g.data() + stride * co + first;
        const T* wk = weight.data() + (static_cast<std::size_t>(co) * in_channels + ci) * taps;
        if (kernel == 3) {
          // The halo around gp is zero, so reading one or two steps before
          // the range start or past its end is harmless.
          for (int kd = 0; kd < 3; ++kd)
            for (int kh = 0; kh < 3; ++kh) {
              const T* w3 = wk + (kd * 3 + kh) * 3;
              const T w0 = w3[0], w1 = w3[1], w2 = w3[2];
              T* a = acc.data() + first + pd.offset(kd, kh, 0);
              const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(n) + 2;
#pragma omp simd
              for (std::ptrdiff_t j = 0; j < m; ++j) a[j] += w0 * gp[j] + w1 * gp[j - 1] + w2 * gp[j - 2];
            }
          continue;
        }
        for (int kd = 0, t = 0; kd < kernel; ++kd)
          for (int kh = 0; kh < kernel; ++kh)
            for (int kw = 0; kw < kernel; ++kw, ++t) {
              const T wv = wk[t];
              T* a = acc.data() + first + pd.offset(kd, kh, kw);
#pragma omp simd
              for (std::size_t i = 0; i < n; ++i) a[i] += wv * gp[i];
            }
      }
      pd.gather(acc.data(), grad_in.channel(ci).data());
    }
  }
  return grad_in;
}

template <class T>
void conv3d_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, int kernel,
                            std::span<T> grad_weight, std::span<T> grad_bias) {
  const int ci_n = in.channels();
  const int co_n = grad_out.channels();
  const Dims3 d = in.dims();
  const std::size_t taps = tap_count(kernel);
  check_weights(grad_weight.size(), static_cast<std::size_t>(co_n) * ci_n * taps, "conv3d.grad_weight");
  check_weights(grad_bias.size(), static_cast<std::size_t>(co_n), "conv3d.grad_bias");
  const Padded pd(d, kernel / 2);
  const std::vector<T> src = pd.pad_all(in);
  const std::vector<T> g = pd.pad_all(grad_out);
  const std::size_t first = pd.first(), n = pd.last() - first, stride = pd.outer.count();

#pragma omp parallel for schedule(static)
  for (int co = 0; co < co_n; ++co) {
    const T* gp = g.data() + stride * co + first;
    T bsum = 0;
    for (T v : grad_out.channel(co)) bsum += v;
    grad_bias[co] += bsum;
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* s = src.data() + stride * ci + first;
      T* gw = grad_weight.data() + (static_cast<std::size_t>(co) * ci_n + ci) * taps;
      if (kernel == 3) {
        for (int kd = 0; kd < 3; ++kd)
          for (int kh = 0; kh < 3; ++kh) {
            const T* sp = s + pd.offset(kd, kh, 0);
            T a0 = 0, a1 = 0, a2 = 0;
#pragma omp simd reduction(+ : a0, a1, a2)
            for (std::size_t i = 0; i < n; ++i) {
              a0 += gp[i] * sp[i];
              a1 += gp[i] * sp[i + 1];
              a2 += gp[i] * sp[i + 2];
            }
            T* w3 = gw + (kd * 3 + kh) * 3;
            w3[0] += a0;
            w3[1] += a1;
            w3[2] += a2;
          }
        continue;
      }
      for (int kd = 0, t = 0; kd < kernel; ++kd)
        for (int kh = 0; kh < kernel; ++kh)
          for (int kw = 0; kw < kernel; ++kw, ++t) {
            const T* sp = s + pd.offset(kd, kh, kw);
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < n; ++i) acc += gp[i] * sp[i];
            gw[t] += acc;
          }
    }
  }
}

template <class T>
FeatureMap<T> down2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                            int out_channels) {
  const int ci_n = in.channels();
  const Dims3 di = in.dims();
  const Dims3 d = di.halved();
  check_weights(weight.size(), static_cast<std::size_t>(out_channels) * ci_n * 8, "down2.weight");
  check_weights(bias.size(), static_cast<std::size_t>(out_channels), "down2.bias");
  FeatureMap<T> out(out_channels, d);

#pragma omp parallel for schedule(static)
  for (int co = 0; co < out_channels; ++co) {
    T* o = out.channel(co).data();
    std::fill(o, o + d.count(), bias[co]);
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* src = in.channel(ci).data();
      const T* wk = weight.data() + (static_cast<std::size_t>(co) * ci_n + ci) * 8;
      for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y) {
          T* orow = o + d.index(z, y, 0);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              const T* irow = src + di.index(2 * z + a, 2 * y + b, 0);
              const T w0 = wk[(a * 2 + b) * 2], w1 = wk[(a * 2 + b) * 2 + 1];
              for (int x = 0; x < d.w; ++x) orow[x] += w0 * irow[2 * x] + w1 * irow[2 * x + 1];
            }
        }
    }
  }
  return out;
}

template <class T>
FeatureMap<T> down2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels) {
  const int co_n = grad_out.channels();
  const Dims3 d = grad_out.dims();
  const Dims3 di = d.doubled();
  check_weights(weight.size(), static_cast<std::size_t>(co_n) * in_channels * 8, "down2.weight");
  FeatureMap<T> grad_in(in_channels, di);

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < in_channels; ++ci) {
    T* gi = grad_in.channel(ci).data();
    for (int co = 0; co < co_n; ++co) {
      const T* g = grad_out.channel(co).data();
      const T* wk = weight.data() + (static_cast<std::size_t>(co) * in_channels + ci) * 8;
      for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y) {
          const T* grow = g + d.index(z, y, 0);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              T* irow = gi + di.index(2 * z + a, 2 * y + b, 0);
              const T w0 = wk[(a * 2 + b) * 2], w1 = wk[(a * 2 + b) * 2 + 1];
              for (int x = 0; x < d.w; ++x) {
                irow[2 * x] += w0 * grow[x];
                irow[2 * x + 1] += w1 * grow[x];
              }
            }
        }
    }
  }
  return grad_in;
}

template <class T>
void down2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                           std::span<T> grad_bias) {
  const int ci_n = in.channels();
  const int co_n = grad_out.channels();
  const Dims3 di = in.dims();
  const Dims3 d = grad_out.dims();
  check_weights(grad_weight.size(), static_cast<std::size_t>(co_n) * ci_n * 8, "down2.grad_weight");
  check_weights(grad_bias.size(), static_cast<std::size_t>(co_n), "down2.grad_bias");

#pragma omp parallel for schedule(static)
  for (int co = 0; co < co_n; ++co) {
    const T* g = grad_out.channel(co).data();
    T bsum = 0;
    for (std::size_t i = 0; i < d.count(); ++i) bsum += g[i];
    grad_bias[co] += bsum;
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* src = in.channel(ci).data();
      T* gw = grad_weight.data() + (static_cast<std::size_t>(co) * ci_n + ci) * 8;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          T acc0 = 0, acc1 = 0;
          for (int z = 0; z < d.d; ++z)
            for (int y = 0; y < d.h; ++y) {
              const T* grow = g + d.index(z, y, 0);
              const T* irow = src + di.index(2 * z + a, 2 * y + b, 0);
              for (int x = 0; x < d.w; ++x) {
                acc0 += grow[x] * irow[2 * x];
                acc1 += grow[x] * irow[2 * x + 1];
              }
            }
          gw[(a * 2 + b) * 2] += acc0;
          gw[(a * 2 + b) * 2 + 1] += acc1;
        }
    }
  }
}

template <class T>
FeatureMap<T> up2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                          int out_channels) {
  const int ci_n = in.channels();
  const Dims3 d = in.dims();
  const Dims3 dout = d.doubled();
  check_weights(weight.size(), static_cast<std::size_t>(ci_n) * out_channels * 8, "up2.weight");
  check_weights(bias.size(), static_cast<std::size_t>(out_channels), "up2.bias");
  FeatureMap<T> out(out_channels, dout);

#pragma omp parallel for schedule(static)
  for (int co = 0; co < out_channels; ++co) {
    T* o = out.channel(co).data();
    std::fill(o, o + dout.count(), bias[co]);
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* src = in.channel(ci).data();
      const T* wk = weight.data() + (static_cast<std::size_t>(ci) * out_channels + co) * 8;
      for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y) {
          const T* irow = src + d.index(z, y, 0);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              T* orow = o + dout.index(2 * z + a, 2 * y + b, 0);
              const T w0 = wk[(a * 2 + b) * 2], w1 = wk[(a * 2 + b) * 2 + 1];
              for (int x = 0; x < d.w; ++x) {
                orow[2 * x] += w0 * irow[x];
                orow[2 * x + 1] += w1 * irow[x];
              }
            }
        }
    }
  }
  return out;
}

template <class T>
FeatureMap<T> up2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels) {
  const int co_n = grad_out.channels();
  const Dims3 dout = grad_out.dims();
  const Dims3 d = dout.halved();
  check_weights(weight.size(), static_cast<std::size_t>(in_channels) * co_n * 8, "up2.weight");
  FeatureMap<T> grad_in(in_channels, d);

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < in_channels; ++ci) {
    T* gi = grad_in.channel(ci).data();
    for (int co = 0; co < co_n; ++co) {
      const T* g = grad_out.channel(co).data();
      const T* wk = weight.data() + (static_cast<std::size_t>(ci) * co_n + co) * 8;
      for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y) {
          T* irow = gi + d.index(z, y, 0);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              const T* grow = g + dout.index(2 * z + a, 2 * y + b, 0);
              const T w0 = wk[(a * 2 + b) * 2], w1 = wk[(a * 2 + b) * 2 + 1];
              for (int x = 0; x < d.w; ++x) irow[x] += w0 * grow[2 * x] + w1 * grow[2 * x + 1];
            }
        }
    }
  }
  return grad_in;
}

template <class T>
void up2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                         std::span<T> grad_bias) {
  const int ci_n = in.channels();
  const int co_n = grad_out.channels();
  const Dims3 d = in.dims();
  const Dims3 dout = grad_out.dims();
  check_weights(grad_weight.size(), static_cast<std::size_t>(ci_n) * co_n * 8, "up2.grad_weight");
  check_weights(grad_bias.size(), static_cast<std::size_t>(co_n), "up2.grad_bias");

  for (int co = 0; co < co_n; ++co) {
    const T* g = grad_out.channel(co).data();
    T bsum = 0;
    for (std::size_t i = 0; i < dout.count(); ++i) bsum += g[i];
    grad_bias[co] += bsum;
  }

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < ci_n; ++ci) {
    const T* src = in.channel(ci).data();
    for (int co = 0; co < co_n; ++co) {
      const T* g = grad_out.channel(co).data();
      T* gw = grad_weight.data() + (static_cast<std::size_t>(ci) * co_n + co) * 8;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          T acc0 = 0, acc1 = 0;
          for (int z = 0; z < d.d; ++z)
            for (int y = 0; y < d.h; ++y) {
              const T* irow = src + d.index(z, y, 0);
              const T* grow = g + dout.index(2 * z + a, 2 * y + b, 0);
              for (int x = 0; x < d.w; ++x) {
                acc0 += irow[x] * grow[2 * x];
                acc1 += irow[x] * grow[2 * x + 1];
              }
            }
          gw[(a * 2 + b) * 2] += acc0;
          gw[(a * 2 + b) * 2 + 1] += acc1;
        }
    }
  }
}

template <class T>
FeatureMap<T> instance_norm_forward(const FeatureMap<T>& in, std::span<const T> gamma, std::span<const T> beta, T eps,
                                    InstanceNormCache<T>* cache) {
  const int c_n = in.channels();
  const bool affine = !gamma.empty();
  if (affine) {
    check_weights(gamma.size(), static_cast<std::size_t>(c_n), "norm.gamma");
    check_weights(beta.size(), static_cast<std::size_t>(c_n), "norm.beta");
  }
  const std::size_t n = in.voxels();
  FeatureMap<T> out(c_n, in.dims());
  if (cache) {
    cache->normalized = FeatureMap<T>(c_n, in.dims());
    cache->inv_std.assign(static_cast<std::size_t>(c_n), T(0));
  }

#pragma omp parallel for schedule(static)
  for (int c = 0; c < c_n; ++c) {
    const T* x = in.channel(c).data();
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += x[i];
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    const T m = static_cast<T>(mean);
    const T g = affine ? gamma[c] : T(1);
    const T b = affine ? beta[c] : T(0);
    T* y = out.channel(c).data();
    T* xh = cache ? cache->normalized.channel(c).data() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const T v = (x[i] - m) * inv_std;
      if (xh) xh[i] = v;
      y[i] = g * v + b;
    }
    if (cache) cache->inv_std[c] = inv_std;
  }
  return out;
}

template <class T>
FeatureMap<T> instance_norm_backward(const FeatureMap<T>& grad_out, const InstanceNormCache<T>& cache,
                                     std::span<const T> gamma, std::span<T> grad_gamma, std::span<T> grad_beta) {
  const int c_n = grad_out.channels();
  const bool affine = !gamma.empty();
  const std::size_t n = grad_out.voxels();
  const T inv_n = T(1) / static_cast<T>(n);
  FeatureMap<T> grad_in(c_n, grad_out.dims());

#pragma omp parallel for schedule(static)
  for (int c = 0; c < c_n; ++c) {
    const T* dy = grad_out.channel(c).data();
    const T* xh = cache.normalized.channel(c).data();
    const T g = affine ? gamma[c] : T(1);
    T sum_dy = 0, sum_dy_xh = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += dy[i];
      sum_dy_xh += dy[i] * xh[i];
    }
    if (affine) {
      grad_gamma[c] += sum_dy_xh;
      grad_beta[c] += sum_dy;
    }
    // dx = g * inv_std * (dy - mean(dy) - xh * mean(dy * xh))
    const T scale = g * cache.inv_std[c];
    const T mean_dy = sum_dy * inv_n;
    const T mean_dy_xh = sum_dy_xh * inv_n;
    T* dx = grad_in.channel(c).data();
    for (std::size_t i = 0; i < n; ++i) dx[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
  }
  return grad_in;
}

template <class T>
FeatureMap<T> silu_forward(const FeatureMap<T>& x) {
  FeatureMap<T> y(x.channels(), x.dims());
  const T* in = x.data();
  T* out = y.data();
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = in[i] / (T(1) + std::exp(-in[i]));
  return y;
}

template <class T>
FeatureMap<T> silu_backward(const FeatureMap<T>& x, const FeatureMap<T>& grad_y) {
  FeatureMap<T> dx(x.channels(), x.dims());
  const T* in = x.data();
  const T* g = grad_y.data();
  T* out = dx.data();
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-in[i]));
    out[i] = g[i] * s * (T(1) + in[i] * (T(1) - s));
  }
  return dx;
}

template <class T>
void accumulate(FeatureMap<T>& a, const FeatureMap<T>& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "accumulate", "feature maps differ in shape");
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

#define FMCH_INSTANTIATE(T)                                                                                          \
  template FeatureMap<T> conv3d_forward<T>(const FeatureMap<T>&, std::span<const T>, std::span<const T>, int, int); \
  template FeatureMap<T> conv3d_backward_input<T>(const FeatureMap<T>&, std::span<const T>, int, int);              \
  template void conv3d_backward_weight<T>(const FeatureMap<T>&, const FeatureMap<T>&, int, std::span<T>,            \
                                          std::span<T>);                                                            \
  template FeatureMap<T> down2_forward<T>(const FeatureMap<T>&, std::span<const T>, std::span<const T>, int);       \
  template FeatureMap<T> down2_backward_input<T>(const FeatureMap<T>&, std::span<const T>, int);                    \
  template void down2_backward_weight<T>(const FeatureMap<T>&, const FeatureMap<T>&, std::span<T>, std::span<T>);   \
  template FeatureMap<T> up2_forward<T>(const FeatureMap<T>&, std::span<const T>, std::span<const T>, int);         \
  template FeatureMap<T> up2_backward_input<T>(const FeatureMap<T>&, std::span<const T>, int);                      \
  template void up2_backward_weight<T>(const FeatureMap<T>&, const FeatureMap<T>&, std::span<T>, std::span<T>);     \
  template FeatureMap<T> instance_norm_forward<T>(const FeatureMap<T>&, std::span<const T>, std::span<const T>, T,  \
                                                  InstanceNormCache<T>*);                                           \
  template FeatureMap<T> instance_norm_backward<T>(const FeatureMap<T>&, const InstanceNormCache<T>&,               \
                                                   std::span<const T>, std::span<T>, std::span<T>);                 \
  template FeatureMap<T> silu_forward<T>(const FeatureMap<T>&);                                                     \
  template FeatureMap<T> silu_backward<T>(const FeatureMap<T>&, const FeatureMap<T>&);                              \
  template void accumulate<T>(FeatureMap<T>&, const FeatureMap<T>&);

FMCH_INSTANTIATE(float)
FMCH_INSTANTIATE(double)
#undef FMCH_INSTANTIATE

}  // namespace fmch::kernels
