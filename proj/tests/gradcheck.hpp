#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "attgf/tensor.hpp"

namespace attgf::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool parameter = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = dist(rng);
  return parameter ? Tensor::parameter(shape, std::move(v)) : Tensor::from_data(shape, std::move(v));
}

inline double relative_error(double a, double b, double floor = 1e-5) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

// Compares grad() against central differences on up to `max_coords`
// coordinates per input (all coordinates when the input is small enough).
inline GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                  std::size_t max_coords = 64, double h = 1e-6,
                                  std::uint64_t seed = 0) {
  Tensor out = f(inputs);
  std::vector<Tensor> analytic = grad(out, inputs);
  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t i : coords) {
      auto eval = [&](double delta) {
        std::vector<Tensor> shifted = inputs;
        std::vector<double> v(inputs[k].data().begin(), inputs[k].data().end());
        v[i] += delta;
        shifted[k] = Tensor::parameter(inputs[k].shape(), std::move(v));
        return f(shifted).item();
      };
      double numeric = (eval(h) - eval(-h)) / (2 * h);
      double a = analytic[k].data()[i];
      result.max_relative_error = std::max(result.max_relative_error, relative_error(a, numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace attgf::testing
