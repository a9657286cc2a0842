#pragma once

// Straight-line scalar implementations of the attention and attribute
// blocks. Test-only; deliberately shares no code with the library kernels.

#include <cmath>
#include <vector>

#include "attgf/model.hpp"

namespace attgf::testing {

struct Volume {
  int n, c, h, w;
  std::vector<double> v;
  double& operator()(int a, int b, int y, int x) { return v[((a * c + b) * h + y) * w + x]; }
  double operator()(int a, int b, int y, int x) const { return v[((a * c + b) * h + y) * w + x]; }
};

inline Volume to_volume(const Tensor& t) {
  const Shape& s = t.shape();
  return Volume{s.n, s.c, s.h, s.w, std::vector<double>(t.data().begin(), t.data().end())};
}

inline double sigmoid_scalar(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// 'same'-padded convolution with odd kernel, stride 1.
inline Volume conv_same(const Volume& in, const Tensor& weight, const Tensor& bias) {
  const Shape& ws = weight.shape();
  Volume out{in.n, ws.n, in.h, in.w, std::vector<double>(static_cast<std::size_t>(in.n) * ws.n * in.h * in.w)};
  int pad = ws.h / 2;
  for (int n = 0; n < in.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
          double acc = bias.defined() ? bias.data()[o] : 0.0;
          for (int c = 0; c < in.c; ++c)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                int iy = y + ky - pad, ix = x + kx - pad;
                if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w) {
                  acc += in(n, c, iy, ix) * weight.at(o, c, ky, kx);
                }
              }
          out(n, o, y, x) = acc;
        }
  return out;
}

inline Volume reference_cba(const Volume& f, const CbaParams& p) {
  const int hidden = p.reduce_weight.shape().n;
  Volume vc = f;
  for (int n = 0; n < f.n; ++n) {
    std::vector<double> gap(f.c, 0.0);
    for (int c = 0; c < f.c; ++c) {
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) gap[c] += f(n, c, y, x);
      gap[c] /= f.h * f.w;
    }
    std::vector<double> mid(hidden);
    for (int k = 0; k < hidden; ++k) {
      mid[k] = p.reduce_bias.data()[k];
      for (int c = 0; c < f.c; ++c) mid[k] += p.reduce_weight.at(k, c, 0, 0) * gap[c];
    }
    for (int c = 0; c < f.c; ++c) {
      double z = p.expand_bias.data()[c];
      for (int k = 0; k < hidden; ++k) z += p.expand_weight.at(c, k, 0, 0) * mid[k];
      double wc = sigmoid_scalar(z);
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) vc(n, c, y, x) = wc * f(n, c, y, x);
    }
  }
  Volume pooled{f.n, 2, f.h, f.w, std::vector<double>(static_cast<std::size_t>(f.n) * 2 * f.h * f.w)};
  for (int n = 0; n < f.n; ++n)
    for (int y = 0; y < f.h; ++y)
      for (int x = 0; x < f.w; ++x) {
        double mx = vc(n, 0, y, x), sum = 0;
        for (int c = 0; c < f.c; ++c) {
          mx = std::max(mx, vc(n, c, y, x));
          sum += vc(n, c, y, x);
        }
        pooled(n, 0, y, x) = mx;
        pooled(n, 1, y, x) = sum / f.c;
      }
  Volume ws = conv_same(pooled, p.spatial_weight, p.spatial_bias);
  Volume v = vc;
  for (int n = 0; n < f.n; ++n)
    for (int c = 0; c < f.c; ++c)
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) {
          double s = sigmoid_scalar(ws(n, 0, y, x));
          v(n, c, y, x) = s * vc(n, c, y, x) + vc(n, c, y, x);
        }
  return v;
}

// Batch statistics over (N, H, W) with the E[V^2] - mu^2 variance form.
inline Volume reference_batch_norm(const Volume& in, double eps) {
  Volume out = in;
  const double count = static_cast<double>(in.n) * in.h * in.w;
  for (int c = 0; c < in.c; ++c) {
    double s = 0, sq = 0;
    for (int n = 0; n < in.n; ++n)
      for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
          s += in(n, c, y, x);
          sq += in(n, c, y, x) * in(n, c, y, x);
        }
    double mu = s / count;
    double sigma = std::sqrt(sq / count - mu * mu + eps);
    for (int n = 0; n < in.n; ++n)
      for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) out(n, c, y, x) = (in(n, c, y, x) - mu) / sigma;
  }
  return out;
}

inline Volume reference_aba(const Volume& v, const Volume& onehot, const AbaParams& p, double eps) {
  Volume norm = reference_batch_norm(v, eps);
  Volume gamma = conv_same(onehot, p.gamma_weight, p.gamma_bias);
  Volume beta = conv_same(onehot, p.beta_weight, p.beta_bias);
  Volume t = norm;
  for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] = gamma.v[i] * norm.v[i] + beta.v[i];
  return conv_same(t, p.conv_weight, p.conv_bias);
}

}  // namespace attgf::testing
