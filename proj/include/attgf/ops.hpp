#pragma once

#include <vector>

#include "attgf/tensor.hpp"

// Differentiable tensor operations. Binary elementwise ops broadcast any
// unit dimension. Every backward is itself written with these ops, so
// gradients can be differentiated again.
namespace attgf::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
Tensor square(const Tensor& x);
// Gradient is zero outside the open interval (lo, hi).
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Sums over every axis where `target` has extent 1 and x does not.
Tensor sum_to(const Tensor& x, Shape target);
Tensor broadcast_to(const Tensor& x, Shape target);
// Mean over the axes where `target` has extent 1 (keepdim semantics).
Tensor mean_to(const Tensor& x, Shape target);
// Max over the channel axis, (N,C,H,W) -> (N,1,H,W). Ties route the
// gradient to the lowest channel index.
Tensor max_channels(const Tensor& x);

// axis is 0 (batch) or 1 (channel).
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
// Inverse of slice: places x at [start, start + x.extent) of a zero tensor
// whose extent along axis is `full`.
Tensor embed(const Tensor& x, int axis, int start, int full);

// Cross-correlation with zero padding. w is (out, in, kh, kw).
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
// conv2d followed by a (1, out, 1, 1) bias; `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
// Adjoint of conv2d with respect to its input.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w,
                         Shape input_shape, int stride, int pad);
// Adjoint of conv2d with respect to its weight.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out,
                          Shape weight_shape, int stride, int pad);

int conv_output_extent(int input, int kernel, int stride, int pad);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

}  // namespace attgf::ops
