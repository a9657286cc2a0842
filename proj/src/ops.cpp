#include "attgf/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "attgf/errors.hpp"

namespace attgf::ops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  for (int axis = 0; axis < 4; ++axis) {
    int da = a[axis];
    int db = b[axis];
    if (da == db || db == 1) {
      out[axis] = da;
    } else if (da == 1) {
      out[axis] = db;
    } else {
      throw ShapeError("cannot broadcast " + a.str() + " with " + b.str());
    }
  }
  return out;
}

// Element strides of `s` when read with extent `out`; 0 on broadcast axes.
std::array<std::size_t, 4> broadcast_strides(const Shape& s, const Shape& out) {
  std::array<std::size_t, 4> dense{static_cast<std::size_t>(s.c) * s.h * s.w,
                                   static_cast<std::size_t>(s.h) * s.w,
                                   static_cast<std::size_t>(s.w), 1};
  std::array<std::size_t, 4> strides{};
  for (int axis = 0; axis < 4; ++axis) {
    strides[axis] = (s[axis] == 1 && out[axis] != 1) ? 0 : dense[axis];
  }
  return strides;
}

template <typename F>
std::vector<double> binary_kernel(const Tensor& a, const Tensor& b, const Shape& out, F f) {
  std::vector<double> result(out.size());
  auto da = a.data();
  auto db = b.data();
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(da[i], db[i]);
    return result;
  }
  if (a.shape() == out && b.size() == 1) {
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(da[i], db[0]);
    return result;
  }
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::size_t k = 0;
  for (int n = 0; n < out.n; ++n) {
    for (int c = 0; c < out.c; ++c) {
      for (int h = 0; h < out.h; ++h) {
        std::size_t ia = n * sa[0] + c * sa[1] + h * sa[2];
        std::size_t ib = n * sb[0] + c * sb[1] + h * sb[2];
        for (int w = 0; w < out.w; ++w) {
          result[k++] = f(da[ia + w * sa[3]], db[ib + w * sb[3]]);
        }
      }
    }
  }
  return result;
}

template <typename F>
std::vector<double> unary_kernel(const Tensor& x, F f) {
  auto dx = x.data();
  std::vector<double> result(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) result[i] = f(dx[i]);
  return result;
}

Tensor constant_like(const Tensor& x, std::vector<double> values) {
  return Tensor::from_data(x.shape(), std::move(values));
}

double stable_sigmoid(double v) {
  if (v >= 0) {
    double e = std::exp(-v);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(v);
  return e / (1.0 + e);
}

void check_axis(int axis) {
  if (axis != 0 && axis != 1) {
    throw ShapeError("concat/slice support axis 0 or 1, got " + std::to_string(axis));
  }
}

// Copies the block [start, start+len) along `axis` between tensors whose
// other extents agree. `inner` is the number of contiguous elements after
// the axis, `outer` the number of repetitions before it.
void copy_block(std::span<const double> src, int src_extent, int src_start,
                std::span<double> dst, int dst_extent, int dst_start, int len,
                std::size_t outer, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    const double* s = src.data() + (o * src_extent + src_start) * inner;
    double* d = dst.data() + (o * dst_extent + dst_start) * inner;
    std::copy(s, s + len * inner, d);
  }
}

std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, int axis) {
  if (axis == 0) return {1, static_cast<std::size_t>(s.c) * s.h * s.w};
  return {static_cast<std::size_t>(s.n), static_cast<std::size_t>(s.h) * s.w};
}

struct ConvGeometry {
  int n, in_c, in_h, in_w;
  int out_c, kh, kw;
  int out_h, out_w;
  int stride, pad;

  int patch() const { return in_c * kh * kw; }
  int out_hw() const { return out_h * out_w; }
};

ConvGeometry make_geometry(const Shape& x, const Shape& w, int stride, int pad) {
  if (stride < 1 || pad < 0) throw ShapeError("invalid conv stride/padding");
  if (x.c != w.c) {
    throw ShapeError("conv2d channel mismatch: input " + x.str() + ", weight " + w.str());
  }
  ConvGeometry g{x.n, x.c, x.h, x.w, w.n, w.h, w.w, 0, 0, stride, pad};
  g.out_h = conv_output_extent(x.h, w.h, stride, pad);
  g.out_w = conv_output_extent(x.w, w.w, stride, pad);
  if (g.out_h < 1 || g.out_w < 1) {
    throw ShapeError("conv2d kernel " + w.str() + " larger than padded input " + x.str());
  }
  return g;
}

void im2col(const double* image, const ConvGeometry& g, double* col) {
  const int hw = g.out_hw();
  for (int c = 0; c < g.in_c; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * static_cast<std::size_t>(hw);
        const double* plane = image + static_cast<std::size_t>(c) * g.in_h * g.in_w;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad + ky;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix < 0 || ix >= g.in_w) ? 0.0 : plane[iy * g.in_w + ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* image) {
  const int hw = g.out_hw();
  for (int c = 0; c < g.in_c; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * static_cast<std::size_t>(hw);
        double* plane = image + static_cast<std::size_t>(c) * g.in_h * g.in_w;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const double* src = row + oy * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) plane[iy * g.in_w + ix] += src[ox];
          }
        }
      }
    }
  }
}

std::vector<double> conv_forward_kernel(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  std::vector<double> out(static_cast<std::size_t>(g.n) * g.out_c * g.out_hw());
  std::vector<double> col(static_cast<std::size_t>(g.patch()) * g.out_hw());
  ConstMapMatrix wm(w.data().data(), g.out_c, g.patch());
  const std::size_t in_stride = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_c) * g.out_hw();
  for (int n = 0; n < g.n; ++n) {
    im2col(x.data().data() + n * in_stride, g, col.data());
    ConstMapMatrix cm(col.data(), g.patch(), g.out_hw());
    MapMatrix om(out.data() + n * out_stride, g.out_c, g.out_hw());
    om.noalias() = wm * cm;
  }
  return out;
}

std::vector<double> conv_input_grad_kernel(const Tensor& grad_out, const Tensor& w,
                                           const ConvGeometry& g) {
  std::vector<double> dx(static_cast<std::size_t>(g.n) * g.in_c * g.in_h * g.in_w, 0.0);
  std::vector<double> col(static_cast<std::size_t>(g.patch()) * g.out_hw());
  ConstMapMatrix wm(w.data().data(), g.out_c, g.patch());
  const std::size_t in_stride = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_c) * g.out_hw();
  for (int n = 0; n < g.n; ++n) {
    ConstMapMatrix gm(grad_out.data().data() + n * out_stride, g.out_c, g.out_hw());
    MapMatrix cm(col.data(), g.patch(), g.out_hw());
    cm.noalias() = wm.transpose() * gm;
    col2im(col.data(), g, dx.data() + n * in_stride);
  }
  return dx;
}

std::vector<double> conv_weight_grad_kernel(const Tensor& x, const Tensor& grad_out,
                                            const ConvGeometry& g) {
  std::vector<double> dw(static_cast<std::size_t>(g.out_c) * g.patch(), 0.0);
  std::vector<double> col(static_cast<std::size_t>(g.patch()) * g.out_hw());
  MapMatrix wm(dw.data(), g.out_c, g.patch());
  const std::size_t in_stride = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_c) * g.out_hw();
  for (int n = 0; n < g.n; ++n) {
    im2col(x.data().data() + n * in_stride, g, col.data());
    ConstMapMatrix cm(col.data(), g.patch(), g.out_hw());
    ConstMapMatrix gm(grad_out.data().data() + n * out_stride, g.out_c, g.out_hw());
    wm.noalias() += gm * cm.transpose();
  }
  return dw;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  return Tensor::make_result(
      out, binary_kernel(a, b, out, [](double u, double v) { return u + v; }), {a, b},
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{sum_to(g, a.shape()), sum_to(g, b.shape())};
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  return Tensor::make_result(
      out, binary_kernel(a, b, out, [](double u, double v) { return u - v; }), {a, b},
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{sum_to(g, a.shape()), sum_to(neg(g), b.shape())};
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  return Tensor::make_result(
      out, binary_kernel(a, b, out, [](double u, double v) { return u * v; }), {a, b},
      [a, b](const Tensor& g) {
        Tensor ga = a.requires_grad() ? sum_to(mul(g, b), a.shape()) : Tensor();
        Tensor gb = b.requires_grad() ? sum_to(mul(g, a), b.shape()) : Tensor();
        return std::vector<Tensor>{ga, gb};
      },
      "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  return Tensor::make_result(
      out, binary_kernel(a, b, out, [](double u, double v) { return u / v; }), {a, b},
      [a, b](const Tensor& g) {
        Tensor ga = a.requires_grad() ? sum_to(div(g, b), a.shape()) : Tensor();
        Tensor gb = b.requires_grad()
                        ? sum_to(neg(div(mul(g, a), mul(b, b))), b.shape())
                        : Tensor();
        return std::vector<Tensor>{ga, gb};
      },
      "div");
}

Tensor neg(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [](double v) { return -v; }), {x},
      [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; }, "neg");
}

Tensor scale(const Tensor& x, double s) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [s](double v) { return v * s; }), {x},
      [s](const Tensor& g) { return std::vector<Tensor>{scale(g, s)}; }, "scale");
}

Tensor add_scalar(const Tensor& x, double s) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [s](double v) { return v + s; }), {x},
      [](const Tensor& g) { return std::vector<Tensor>{g}; }, "add_scalar");
}

Tensor exp(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [](double v) { return std::exp(v); }), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(x))}; }, "exp");
}

Tensor log(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [](double v) { return std::log(v); }), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{div(g, x)}; }, "log");
}

Tensor sigmoid(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, stable_sigmoid), {x},
      [x](const Tensor& g) {
        Tensor s = sigmoid(x);
        return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
      },
      "sigmoid");
}

Tensor relu(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [](double v) { return v > 0 ? v : 0.0; }), {x},
      [x](const Tensor& g) {
        Tensor mask = constant_like(x, unary_kernel(x, [](double v) { return v > 0 ? 1.0 : 0.0; }));
        return std::vector<Tensor>{mul(g, mask)};
      },
      "relu");
}

Tensor abs(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [](double v) { return std::abs(v); }), {x},
      [x](const Tensor& g) {
        Tensor sign = constant_like(
            x, unary_kernel(x, [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }));
        return std::vector<Tensor>{mul(g, sign)};
      },
      "abs");
}

Tensor sqrt(const Tensor& x) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [](double v) { return std::sqrt(v); }), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{div(scale(g, 0.5), sqrt(x))}; },
      "sqrt");
}

Tensor pow(const Tensor& x, double exponent) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [exponent](double v) { return std::pow(v, exponent); }), {x},
      [x, exponent](const Tensor& g) {
        if (exponent == 0.0) return std::vector<Tensor>{Tensor::zeros(x.shape())};
        return std::vector<Tensor>{mul(g, scale(pow(x, exponent - 1.0), exponent))};
      },
      "pow");
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor clamp(const Tensor& x, double lo, double hi) {
  return Tensor::make_result(
      x.shape(), unary_kernel(x, [lo, hi](double v) { return std::clamp(v, lo, hi); }), {x},
      [x, lo, hi](const Tensor& g) {
        Tensor mask = constant_like(
            x, unary_kernel(x, [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; }));
        return std::vector<Tensor>{mul(g, mask)};
      },
      "clamp");
}

Tensor sum(const Tensor& x) { return sum_to(x, Shape{}); }

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_to(const Tensor& x, Shape target) {
  const Shape& s = x.shape();
  if (s == target) return x;
  for (int axis = 0; axis < 4; ++axis) {
    if (target[axis] != s[axis] && target[axis] != 1) {
      throw ShapeError("cannot reduce " + s.str() + " to " + target.str());
    }
  }
  std::vector<double> out(target.size(), 0.0);
  auto st = broadcast_strides(target, s);
  auto dx = x.data();
  std::size_t k = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int h = 0; h < s.h; ++h) {
        std::size_t base = n * st[0] + c * st[1] + h * st[2];
        for (int w = 0; w < s.w; ++w) out[base + w * st[3]] += dx[k++];
      }
    }
  }
  Shape from = s;
  return Tensor::make_result(
      target, std::move(out), {x},
      [from](const Tensor& g) { return std::vector<Tensor>{broadcast_to(g, from)}; }, "sum_to");
}

Tensor broadcast_to(const Tensor& x, Shape target) {
  const Shape& s = x.shape();
  if (s == target) return x;
  if (broadcast_shape(s, target) != target) {
    throw ShapeError("cannot broadcast " + s.str() + " to " + target.str());
  }
  Tensor zero = Tensor::from_data(Shape{}, {0.0});
  std::vector<double> out =
      binary_kernel(x, zero, target, [](double u, double) { return u; });
  Shape from = s;
  return Tensor::make_result(
      target, std::move(out), {x},
      [from](const Tensor& g) { return std::vector<Tensor>{sum_to(g, from)}; },
      "broadcast_to");
}

Tensor mean_to(const Tensor& x, Shape target) {
  double count = static_cast<double>(x.size()) / static_cast<double>(target.size());
  return scale(sum_to(x, target), 1.0 / count);
}

Tensor max_channels(const Tensor& x) {
  const Shape& s = x.shape();
  Shape out_shape{s.n, 1, s.h, s.w};
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  std::vector<double> out(out_shape.size(), -std::numeric_limits<double>::infinity());
  std::vector<int> arg(out_shape.size(), 0);
  auto dx = x.data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = dx.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      double* dst = out.data() + n * plane;
      int* am = arg.data() + n * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (src[i] > dst[i]) {
          dst[i] = src[i];
          am[i] = c;
        }
      }
    }
  }
  return Tensor::make_result(
      out_shape, std::move(out), {x},
      [s, arg = std::move(arg), plane](const Tensor& g) {
        std::vector<double> mask(s.size(), 0.0);
        for (int n = 0; n < s.n; ++n) {
          for (std::size_t i = 0; i < plane; ++i) {
            int c = arg[n * plane + i];
            mask[(static_cast<std::size_t>(n) * s.c + c) * plane + i] = 1.0;
          }
        }
        Tensor m = Tensor::from_data(s, std::move(mask));
        return std::vector<Tensor>{mul(broadcast_to(g, s), m)};
      },
      "max_channels");
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check_axis(axis);
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape out = parts.front().shape();
  out[axis] = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    Shape ref = parts.front().shape();
    ps[axis] = ref[axis] = 0;
    if (ps != ref) throw ShapeError("concat shape mismatch: " + p.shape().str());
    out[axis] += p.shape()[axis];
  }
  std::vector<double> values(out.size());
  auto [outer, inner] = outer_inner(out, axis);
  std::vector<int> offsets;
  int offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    copy_block(p.data(), p.shape()[axis], 0, values, out[axis], offset, p.shape()[axis],
               outer, inner);
    offset += p.shape()[axis];
  }
  std::vector<int> lengths;
  for (const auto& p : parts) lengths.push_back(p.shape()[axis]);
  return Tensor::make_result(
      out, std::move(values), parts,
      [axis, offsets, lengths](const Tensor& g) {
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < offsets.size(); ++i) {
          grads.push_back(slice(g, axis, offsets[i], lengths[i]));
        }
        return grads;
      },
      "concat");
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  check_axis(axis);
  const Shape& s = x.shape();
  if (start < 0 || length < 1 || start + length > s[axis]) {
    throw ShapeError("slice out of range on " + s.str());
  }
  if (start == 0 && length == s[axis]) return x;
  Shape out = s;
  out[axis] = length;
  std::vector<double> values(out.size());
  auto [outer, inner] = outer_inner(s, axis);
  copy_block(x.data(), s[axis], start, values, length, 0, length, outer, inner);
  int full = s[axis];
  return Tensor::make_result(
      out, std::move(values), {x},
      [axis, start, full](const Tensor& g) {
        return std::vector<Tensor>{embed(g, axis, start, full)};
      },
      "slice");
}

Tensor embed(const Tensor& x, int axis, int start, int full) {
  check_axis(axis);
  const Shape& s = x.shape();
  if (start < 0 || start + s[axis] > full) throw ShapeError("embed out of range");
  if (start == 0 && s[axis] == full) return x;
  Shape out = s;
  out[axis] = full;
  std::vector<double> values(out.size(), 0.0);
  auto [outer, inner] = outer_inner(out, axis);
  int len = s[axis];
  copy_block(x.data(), len, 0, values, full, start, len, outer, inner);
  return Tensor::make_result(
      out, std::move(values), {x},
      [axis, start, len](const Tensor& g) {
        return std::vector<Tensor>{slice(g, axis, start, len)};
      },
      "embed");
}

int conv_output_extent(int input, int kernel, int stride, int pad) {
  int span = input + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvGeometry g = make_geometry(x.shape(), w.shape(), stride, pad);
  Shape out{g.n, g.out_c, g.out_h, g.out_w};
  Shape xs = x.shape();
  Shape ws = w.shape();
  return Tensor::make_result(
      out, conv_forward_kernel(x, w, g), {x, w},
      [x, w, xs, ws, stride, pad](const Tensor& grad_out) {
        Tensor gx = x.requires_grad() ? conv2d_input_grad(grad_out, w, xs, stride, pad) : Tensor();
        Tensor gw = w.requires_grad() ? conv2d_weight_grad(x, grad_out, ws, stride, pad) : Tensor();
        return std::vector<Tensor>{gx, gw};
      },
      "conv2d");
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  Tensor y = conv2d(x, w, stride, pad);
  if (!bias.defined()) return y;
  return add(y, bias);
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, Shape input_shape,
                         int stride, int pad) {
  ConvGeometry g = make_geometry(input_shape, w.shape(), stride, pad);
  const Shape& gs = grad_out.shape();
  if (gs != Shape{g.n, g.out_c, g.out_h, g.out_w}) {
    throw ShapeError("conv2d_input_grad: gradient shape " + gs.str() +
                     " inconsistent with input " + input_shape.str());
  }
  Shape ws = w.shape();
  return Tensor::make_result(
      input_shape, conv_input_grad_kernel(grad_out, w, g), {grad_out, w},
      [grad_out, w, ws, stride, pad](const Tensor& gg) {
        Tensor d_grad = grad_out.requires_grad() ? conv2d(gg, w, stride, pad) : Tensor();
        Tensor d_w = w.requires_grad() ? conv2d_weight_grad(gg, grad_out, ws, stride, pad) : Tensor();
        return std::vector<Tensor>{d_grad, d_w};
      },
      "conv2d_input_grad");
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, Shape weight_shape,
                          int stride, int pad) {
  ConvGeometry g = make_geometry(x.shape(), weight_shape, stride, pad);
  const Shape& gs = grad_out.shape();
  if (gs != Shape{g.n, g.out_c, g.out_h, g.out_w}) {
    throw ShapeError("conv2d_weight_grad: gradient shape " + gs.str() +
                     " inconsistent with input " + x.shape().str());
  }
  Shape xs = x.shape();
  return Tensor::make_result(
      weight_shape, conv_weight_grad_kernel(x, grad_out, g), {x, grad_out},
      [x, grad_out, xs, stride, pad](const Tensor& gw) {
        Tensor d_x = x.requires_grad() ? conv2d_input_grad(grad_out, gw, xs, stride, pad) : Tensor();
        Tensor d_grad = grad_out.requires_grad() ? conv2d(x, gw, stride, pad) : Tensor();
        return std::vector<Tensor>{d_x, d_grad};
      },
      "conv2d_weight_grad");
}

}  // namespace attgf::ops
