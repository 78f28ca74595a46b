// SPDX-License-Identifier: Apache-2.0
//
// Textbook serial kernels: one output (or gradient) element at a time with
// explicit bounds checks.  Slow; used only to check the parallel kernels.
#include <cmath>

#include "fmch/kernels.hpp"

namespace fmch::kernels::reference {
namespace {

template <class T>
T at_or_zero(const FeatureMap<T>& f, int c, int z, int y, int x) {
  const Dims3& d = f.dims();
  if (z < 0 || y < 0 || x < 0 || z >= d.d || y >= d.h || x >= d.w) return T(0);
  return f(c, z, y, x);
}

}  // namespace

template <class T>
FeatureMap<T> conv3d_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                             int out_channels, int kernel) {
  const Dims3 d = in.dims();
  const int ci_n = in.channels(), pad = kernel / 2;
  FeatureMap<T> out(out_channels, d);
  for (int co = 0; co < out_channels; ++co)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          T acc = bias[co];
          for (int ci = 0; ci < ci_n; ++ci)
            for (int a = 0; a < kernel; ++a)
              for (int b = 0; b < kernel; ++b)
                for (int c = 0; c < kernel; ++c) {
                  const T w = weight[(((static_cast<std::size_t>(co) * ci_n + ci) * kernel + a) * kernel + b) * kernel + c];
                  acc += w * at_or_zero(in, ci, z + a - pad, y + b - pad, x + c - pad);
                }
          out(co, z, y, x) = acc;
        }
  return out;
}

template <class T>
FeatureMap<T> conv3d_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels,
                                    int kernel) {
  const Dims3 d = grad_out.dims();
  const int co_n = grad_out.channels(), pad = kernel / 2;
  FeatureMap<T> gin(in_channels, d);
  // d out(co,p) / d in(ci,q) = w[co][ci][q - p + pad]
  for (int ci = 0; ci < in_channels; ++ci)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          T acc = 0;
          for (int co = 0; co < co_n; ++co)
            for (int a = 0; a < kernel; ++a)
              for (int b = 0; b < kernel; ++b)
                for (int c = 0; c < kernel; ++c) {
                  const T w = weight[(((static_cast<std::size_t>(co) * in_channels + ci) * kernel + a) * kernel + b) * kernel + c];
                  acc += w * at_or_zero(grad_out, co, z - a + pad, y - b + pad, x - c + pad);
                }
          gin(ci, z, y, x) = acc;
        }
  return gin;
}

template <class T>
void conv3d_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, int kernel,
                            std::span<T> grad_weight, std::span<T> grad_bias) {
  const Dims3 d = in.dims();
  const int ci_n = in.channels(), co_n = grad_out.channels(), pad = kernel / 2;
  for (int co = 0; co < co_n; ++co) {
    T bsum = 0;
    for (T g : grad_out.channel(co)) bsum += g;
    grad_bias[co] += bsum;
    for (int ci = 0; ci < ci_n; ++ci)
      for (int a = 0; a < kernel; ++a)
        for (int b = 0; b < kernel; ++b)
          for (int c = 0; c < kernel; ++c) {
            T acc = 0;
            for (int z = 0; z < d.d; ++z)
              for (int y = 0; y < d.h; ++y)
                for (int x = 0; x < d.w; ++x)
                  acc += grad_out(co, z, y, x) * at_or_zero(in, ci, z + a - pad, y + b - pad, x + c - pad);
            grad_weight[(((static_cast<std::size_t>(co) * ci_n + ci) * kernel + a) * kernel + b) * kernel + c] += acc;
          }
  }
}

template <class T>
FeatureMap<T> down2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                            int out_channels) {
  const Dims3 d = in.dims().halved();
  const int ci_n = in.channels();
  FeatureMap<T> out(out_channels, d);
  for (int co = 0; co < out_channels; ++co)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          T acc = bias[co];
          for (int ci = 0; ci < ci_n; ++ci)
            for (int t = 0; t < 8; ++t)
              acc += weight[(static_cast<std::size_t>(co) * ci_n + ci) * 8 + t] *
                     in(ci, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * x + (t & 1));
          out(co, z, y, x) = acc;
        }
  return out;
}

template <class T>
FeatureMap<T> down2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels) {
  const Dims3 d = grad_out.dims();
  const int co_n = grad_out.channels();
  FeatureMap<T> gin(in_channels, d.doubled());
  for (int ci = 0; ci < in_channels; ++ci)
    for (int z = 0; z < 2 * d.d; ++z)
      for (int y = 0; y < 2 * d.h; ++y)
        for (int x = 0; x < 2 * d.w; ++x) {
          const int t = ((z & 1) << 2) | ((y & 1) << 1) | (x & 1);
          T acc = 0;
          for (int co = 0; co < co_n; ++co)
            acc += weight[(static_cast<std::size_t>(co) * in_channels + ci) * 8 + t] * grad_out(co, z / 2, y / 2, x / 2);
          gin(ci, z, y, x) = acc;
        }
  return gin;
}

template <class T>
void down2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                           std::span<T> grad_bias) {
  const Dims3 d = grad_out.dims();
  const int ci_n = in.channels(), co_n = grad_out.channels();
  for (int co = 0; co < co_n; ++co) {
    T bsum = 0;
    for (T g : grad_out.channel(co)) bsum += g;
    grad_bias[co] += bsum;
    for (int ci = 0; ci < ci_n; ++ci)
      for (int t = 0; t < 8; ++t) {
        T acc = 0;
        for (int z = 0; z < d.d; ++z)
          for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x)
              acc += grad_out(co, z, y, x) * in(ci, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * x + (t & 1));
        grad_weight[(static_cast<std::size_t>(co) * ci_n + ci) * 8 + t] += acc;
      }
  }
}

template <class T>
FeatureMap<T> up2_forward(const FeatureMap<T>& in, std::span<const T> weight, std::span<const T> bias,
                          int out_channels) {
  const Dims3 d = in.dims().doubled();
  const int ci_n = in.channels();
  FeatureMap<T> out(out_channels, d);
  for (int co = 0; co < out_channels; ++co)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          const int t = ((z & 1) << 2) | ((y & 1) << 1) | (x & 1);
          T acc = bias[co];
          for (int ci = 0; ci < ci_n; ++ci)
            acc += weight[(static_cast<std::size_t>(ci) * out_channels + co) * 8 + t] * in(ci, z / 2, y / 2, x / 2);
          out(co, z, y, x) = acc;
        }
  return out;
}

template <class T>
FeatureMap<T> up2_backward_input(const FeatureMap<T>& grad_out, std::span<const T> weight, int in_channels) {
  const Dims3 d = grad_out.dims().halved();
  const int co_n = grad_out.channels();
  FeatureMap<T> gin(in_channels, d);
  for (int ci = 0; ci < in_channels; ++ci)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          T acc = 0;
          for (int co = 0; co < co_n; ++co)
            for (int t = 0; t < 8; ++t)
              acc += weight[(static_cast<std::size_t>(ci) * co_n + co) * 8 + t] *
                     grad_out(co, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * x + (t & 1));
          gin(ci, z, y, x) = acc;
        }
  return gin;
}

template <class T>
void up2_backward_weight(const FeatureMap<T>& in, const FeatureMap<T>& grad_out, std::span<T> grad_weight,
                         std::span<T> grad_bias) {
  const Dims3 d = in.dims();
  const int ci_n = in.channels(), co_n = grad_out.channels();
  for (int co = 0; co < co_n; ++co) {
    T bsum = 0;
    for (T g : grad_out.channel(co)) bsum += g;
    grad_bias[co] += bsum;
  }
  for (int ci = 0; ci < ci_n; ++ci)
    for (int co = 0; co < co_n; ++co)
      for (int t = 0; t < 8; ++t) {
        T acc = 0;
        for (int z = 0; z < d.d; ++z)
          for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x)
              acc += in(ci, z, y, x) * grad_out(co, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * x + (t & 1));
        grad_weight[(static_cast<std::size_t>(ci) * co_n + co) * 8 + t] += acc;
      }
}

template <class T>
FeatureMap<T> instance_norm_forward(const FeatureMap<T>& in, std::span<const T> gamma, std::span<const T> beta, T eps,
                                    InstanceNormCache<T>* cache) {
  const int c_n = in.channels();
  const auto n = static_cast<double>(in.voxels());
  FeatureMap<T> out(c_n, in.dims());
  if (cache) {
    cache->normalized = FeatureMap<T>(c_n, in.dims());
    cache->inv_std.assign(static_cast<std::size_t>(c_n), T(0));
  }
  for (int c = 0; c < c_n; ++c) {
    double mean = 0.0;
    for (T v : in.channel(c)) mean += v;
    mean /= n;
    double var = 0.0;
    for (T v : in.channel(c)) var += (v - mean) * (v - mean);
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (std::size_t i = 0; i < in.voxels(); ++i) {
      const double xh = (in.channel(c)[i] - mean) * inv_std;
      const double g = gamma.empty() ? 1.0 : static_cast<double>(gamma[c]);
      const double b = beta.empty() ? 0.0 : static_cast<double>(beta[c]);
      out.channel(c)[i] = static_cast<T>(g * xh + b);
      if (cache) cache->normalized.channel(c)[i] = static_cast<T>(xh);
    }
    if (cache) cache->inv_std[c] = static_cast<T>(inv_std);
  }
  return out;
}

// Full Jacobian-vector product: dx_i = sum_j dy_j * d y_j / d x_i, with
// d xh_j / d x_i = inv_std * ([i == j] - 1/n - xh_i * xh_j / n).
template <class T>
FeatureMap<T> instance_norm_backward(const FeatureMap<T>& grad_out, const InstanceNormCache<T>& cache,
                                     std::span<const T> gamma, std::span<T> grad_gamma, std::span<T> grad_beta) {
  const int c_n = grad_out.channels();
  const std::size_t n = grad_out.voxels();
  FeatureMap<T> gin(c_n, grad_out.dims());
  for (int c = 0; c < c_n; ++c) {
    const auto dy = grad_out.channel(c);
    const auto xh = cache.normalized.channel(c);
    const double g = gamma.empty() ? 1.0 : static_cast<double>(gamma[c]);
    if (!gamma.empty()) {
      double sg = 0.0, sb = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        sg += static_cast<double>(dy[j]) * xh[j];
        sb += dy[j];
      }
      grad_gamma[c] += static_cast<T>(sg);
      grad_beta[c] += static_cast<T>(sb);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double jac = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n) -
                           static_cast<double>(xh[i]) * xh[j] / static_cast<double>(n);
        acc += dy[j] * jac;
      }
      gin.channel(c)[i] = static_cast<T>(g * cache.inv_std[c] * acc);
    }
  }
  return gin;
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
                                                   std::span<const T>, std::span<T>, std::span<T>);

FMCH_INSTANTIATE(float)
FMCH_INSTANTIATE(double)
#undef FMCH_INSTANTIATE

}  // namespace fmch::kernels::reference
