#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "attgf/errors.hpp"
#include "attgf/ops.hpp"
#include "gradcheck.hpp"

namespace attgf {
namespace {

using namespace ops;
using testing::grad_check;
using testing::random_tensor;

constexpr double kTol = 1e-6;

TEST(TensorTest, BroadcastAddMatchesManual) {
  Tensor a = Tensor::from_data({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({1, 3, 1, 1}, {10, 20, 30});
  Tensor c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 1, 1}));
  EXPECT_DOUBLE_EQ(c.at(1, 2, 0, 0), 36.0);
  EXPECT_THROW(add(a, Tensor::zeros({1, 2, 1, 1})), ShapeError);
}

TEST(TensorTest, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor(rng, {2, 3, 2, 2});
  Tensor b = random_tensor(rng, {1, 3, 1, 2});
  Tensor pos = random_tensor(rng, {2, 3, 2, 2}, 0.5, 2.0);
  auto check = [](const testing::ScalarFn& f, const std::vector<Tensor>& in) {
    EXPECT_LT(grad_check(f, in).max_relative_error, kTol);
  };
  check([](auto& v) { return sum(mul(add(v[0], v[1]), v[0])); }, {a, b});
  check([](auto& v) { return sum(sub(v[0], v[1])); }, {a, b});
  check([](auto& v) { return sum(div(v[0], add_scalar(v[1], 3.0))); }, {a, b});
  check([](auto& v) { return sum(mul(exp(v[0]), sigmoid(v[0]))); }, {a});
  check([](auto& v) { return sum(log(v[0])); }, {pos});
  check([](auto& v) { return sum(ops::sqrt(v[0])); }, {pos});
  check([](auto& v) { return sum(ops::pow(v[0], 2.5)); }, {pos});
  check([](auto& v) { return sum(mul(relu(v[0]), ops::abs(v[0]))); }, {a});
  check([](auto& v) { return sum(clamp(v[0], -0.5, 0.5)); }, {a});
  check([](auto& v) { return sum(neg(scale(v[0], 3.0))); }, {a});
}

TEST(TensorTest, ReductionAndLayoutGradients) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor(rng, {2, 3, 3, 2});
  Tensor b = random_tensor(rng, {1, 3, 3, 2});
  Tensor w = random_tensor(rng, {2, 3, 3, 2}, -1, 1, false);
  auto check = [](const testing::ScalarFn& f, const std::vector<Tensor>& in) {
    EXPECT_LT(grad_check(f, in).max_relative_error, kTol);
  };
  check([&](auto& v) { return sum(mul(mean_to(v[0], {1, 3, 1, 1}), mean_to(v[0], {2, 1, 1, 1}))); }, {a});
  check([&](auto& v) { return sum(mul(broadcast_to(v[0], {2, 3, 3, 2}), w)); }, {b});
  check([&](auto& v) { return sum(square(max_channels(v[0]))); }, {a});
  check([&](auto& v) { return sum(mul(concat({v[0], v[1]}, 0), concat({w, slice(w, 0, 0, 1)}, 0))); }, {a, b});
  check([&](auto& v) { return sum(square(concat({slice(v[0], 1, 1, 2), v[0]}, 1))); }, {a});
  check([&](auto& v) { return sum(square(embed(v[0], 1, 2, 5))); }, {a});
}

// Direct-loop convolution used as the oracle for the im2col kernels.
Tensor naive_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  int oh = conv_output_extent(xs.h, ws.h, stride, pad);
  int ow = conv_output_extent(xs.w, ws.w, stride, pad);
  std::vector<double> out;
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (int c = 0; c < xs.c; ++c)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
              }
          out.push_back(acc);
        }
  return Tensor::from_data({xs.n, ws.n, oh, ow}, out);
}

TEST(TensorTest, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1, 2}) {
      Tensor x = random_tensor(rng, {2, 3, 7, 6});
      Tensor w = random_tensor(rng, {4, 3, 3, 3});
      Tensor got = conv2d(x, w, stride, pad);
      Tensor want = naive_conv(x, w, stride, pad);
      ASSERT_EQ(got.shape(), want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
      }
    }
  }
}

TEST(TensorTest, ConvGradients) {
  std::mt19937_64 rng(4);
  for (int stride : {1, 2}) {
    Tensor x = random_tensor(rng, {2, 2, 5, 5});
    Tensor w = random_tensor(rng, {3, 2, 3, 3});
    Tensor bias = random_tensor(rng, {1, 3, 1, 1});
    auto r = grad_check([stride](auto& v) { return sum(square(conv2d(v[0], v[1], v[2], stride, 1))); },
                        {x, w, bias});
    EXPECT_LT(r.max_relative_error, kTol);
  }
}

TEST(TensorTest, SecondOrderThroughConvolution) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor(rng, {1, 2, 4, 4});
  Tensor w = random_tensor(rng, {2, 2, 3, 3});
  Tensor probe = random_tensor(rng, {2, 2, 3, 3}, -1, 1, false);
  // f(w) = <d/dw L(w), probe>; its gradient is a Hessian-vector product.
  auto f = [&](const std::vector<Tensor>& v) {
    Tensor loss = sum(square(sigmoid(conv2d(x, v[0], 2, 1))));
    std::vector<Tensor> wrt{v[0]};
    Tensor g = grad(loss, wrt, {.create_graph = true})[0];
    return sum(mul(g, probe));
  };
  auto r = grad_check(f, {w}, 64, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-5);

  reset_autodiff_stats();
  std::vector<Tensor> wrt{w};
  Tensor hv = f(wrt);
  EXPECT_EQ(autodiff_stats().max_backward_depth, 1);
  grad(hv, wrt);
  EXPECT_EQ(autodiff_stats().max_backward_depth, 2);
}

TEST(TensorTest, SecondOrderInputAndWeightAdjoints) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor(rng, {2, 2, 5, 5});
  Tensor w = random_tensor(rng, {3, 2, 3, 3});
  auto f = [](const std::vector<Tensor>& v) {
    Tensor loss = sum(ops::pow(conv2d(v[0], v[1], 1, 1), 3.0));
    auto g = grad(loss, v, {.create_graph = true});
    return add(sum(square(g[0])), sum(square(g[1])));
  };
  EXPECT_LT(grad_check(f, {x, w}, 32, 1e-5).max_relative_error, 1e-5);
}

TEST(TensorTest, UnusedInputsGetZeroGradient) {
  Tensor a = Tensor::parameter({1, 2, 1, 1}, {1, 2});
  Tensor b = Tensor::parameter({1, 2, 1, 1}, {3, 4});
  std::vector<Tensor> in{a, b};
  auto g = grad(sum(square(a)), in);
  EXPECT_DOUBLE_EQ(g[0].data()[1], 4.0);
  EXPECT_DOUBLE_EQ(g[1].data()[0], 0.0);
}

TEST(TensorTest, NoGradGuardSkipsTape) {
  Tensor a = Tensor::parameter({1, 1, 1, 1}, {2});
  NoGradGuard guard;
  Tensor b = mul(a, a);
  EXPECT_FALSE(b.requires_grad());
}

}  // namespace
}  // namespace attgf
