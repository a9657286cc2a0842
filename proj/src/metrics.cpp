#include "attgf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "attgf/errors.hpp"

namespace attgf {

namespace {

void check_lengths(std::span<const double> a, std::span<const double> b, std::size_t minimum) {
  if (a.size() != b.size()) throw PreconditionError("correlation inputs differ in length");
  if (a.size() < minimum) {
    throw PreconditionError("need at least " + std::to_string(minimum) + " samples, got " +
                            std::to_string(a.size()));
  }
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Value and gradient of the nonlinear part g(y) so that s = b1 g + b4 y + b5.
struct Shape5 {
  double g, dg_db2, dg_db3;
};

Shape5 mapping_shape(MappingForm form, double b2, double b3, double y) {
  const double z = b2 * (y - b3);
  if (form == MappingForm::logistic) {
    // 1/2 - 1/(1+e^z) = s - 1/2 with s the logistic of z.
    double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    double g = s - 0.5;
    double dg_dz = s * (1.0 - s);
    return {g, dg_dz * (y - b3), -dg_dz * b2};
  }
  double e = std::exp(-z);
  return {0.5 - e, e * (y - b3), -e * b2};
}

double mapped(MappingForm form, const std::array<double, 5>& b, double y) {
  return b[0] * mapping_shape(form, b[1], b[2], y).g + b[3] * y + b[4];
}

double sse(MappingForm form, const std::array<double, 5>& b, std::span<const double> y,
           std::span<const double> t) {
  double total = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double r = t[i] - mapped(form, b, y[i]);
    total += r * r;
  }
  return total;
}

}  // namespace

std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  check_lengths(x, y, 2);
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double srcc(std::span<const double> pred, std::span<const double> target) {
  check_lengths(pred, target, 3);
  auto rp = midranks(pred);
  auto rt = midranks(target);
  return pearson(rp, rt);
}

double LogisticFit::map(double y) const { return mapped(form, beta, y); }

std::vector<double> LogisticFit::map(std::span<const double> y) const {
  std::vector<double> out;
  out.reserve(y.size());
  for (double v : y) out.push_back(map(v));
  return out;
}

LogisticFit fit_logistic(std::span<const double> pred, std::span<const double> target,
                         MappingForm form, int max_iterations, double tolerance) {
  check_lengths(pred, target, 5);
  const std::size_t n = pred.size();
  const double my = mean_of(pred), mt = mean_of(target);
  double var = 0;
  for (double v : pred) var += (v - my) * (v - my);
  const double sd = std::sqrt(var / static_cast<double>(n - 1));
  const auto [tmin, tmax] = std::minmax_element(target.begin(), target.end());

  // Ordinary least squares line, also the fallback mapping.
  LogisticFit linear;
  linear.form = form;
  linear.linear_fallback = true;
  {
    double sxy = 0;
    for (std::size_t i = 0; i < n; ++i) sxy += (pred[i] - my) * (target[i] - mt);
    const double slope = var > 0 ? sxy / var : 0.0;
    linear.beta = {0.0, 1.0, my, slope, mt - slope * my};
    linear.residual = sse(form, linear.beta, pred, target);
  }
  if (!(sd > 0)) return linear;

  LogisticFit fit;
  fit.form = form;
  fit.beta = {*tmax - *tmin, 1.0 / sd, my, 0.0, mt};
  double current = sse(form, fit.beta, pred, target);
  double damping = 1e-3;
  Eigen::MatrixXd jac(n, 5);
  Eigen::VectorXd res(n);
  for (fit.iterations = 0; fit.iterations < max_iterations; ++fit.iterations) {
    const auto& b = fit.beta;
    for (std::size_t i = 0; i < n; ++i) {
      Shape5 s = mapping_shape(form, b[1], b[2], pred[i]);
      jac.row(static_cast<Eigen::Index>(i)) << s.g, b[0] * s.dg_db2, b[0] * s.dg_db3, pred[i], 1.0;
      res(static_cast<Eigen::Index>(i)) = target[i] - (b[0] * s.g + b[3] * pred[i] + b[4]);
    }
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd jtr = jac.transpose() * res;
    bool improved = false;
    double change = 0;
    while (damping < 1e12) {
      Eigen::MatrixXd a = jtj;
      for (int k = 0; k < 5; ++k) a(k, k) += damping * std::max(jtj(k, k), 1e-12);
      Eigen::VectorXd delta = a.ldlt().solve(jtr);
      std::array<double, 5> trial = fit.beta;
      for (int k = 0; k < 5; ++k) trial[k] += delta(k);
      const double candidate = sse(form, trial, pred, target);
      if (std::isfinite(candidate) && candidate <= current) {
        change = current - candidate;
        fit.beta = trial;
        current = candidate;
        damping = std::max(damping / 10, 1e-12);
        improved = true;
        break;
      }
      damping *= 10;
    }
    if (!improved || change <= tolerance * (1.0 + current)) {
      fit.converged = true;
      break;
    }
  }
  fit.residual = current;
  if (!fit.converged || !std::isfinite(current) || current > linear.residual) {
    linear.converged = fit.converged;
    linear.iterations = fit.iterations;
    return linear;
  }
  return fit;
}

PlccResult plcc_detailed(std::span<const double> pred, std::span<const double> target,
                         MappingForm form) {
  PlccResult r;
  r.fit = fit_logistic(pred, target, form);
  std::vector<double> m = r.fit.map(pred);
  r.value = pearson(m, target);
  return r;
}

double plcc(std::span<const double> pred, std::span<const double> target) {
  return plcc_detailed(pred, target).value;
}

double pair_accuracy(std::span<const double> score_i, std::span<const double> score_j,
                     std::span<const int> labels) {
  if (score_i.size() != score_j.size() || score_i.size() != labels.size()) {
    throw PreconditionError("pair accuracy inputs differ in length");
  }
  if (labels.empty()) throw PreconditionError("pair accuracy needs at least one pair");
  std::size_t hits = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    hits += (score_i[k] >= score_j[k] ? 1 : 0) == labels[k];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<double> permutation_null(std::span<const double> pred, std::span<const double> target,
                                     int shuffles, std::uint64_t seed) {
  check_lengths(pred, target, 3);
  std::mt19937_64 rng(seed);
  std::vector<double> shuffled(target.begin(), target.end());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(std::max(shuffles, 0)));
  for (int s = 0; s < shuffles; ++s) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    out.push_back(srcc(pred, shuffled));
  }
  std::sort(out.begin(), out.end());
  return out;
}

double quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw PreconditionError("quantile of an empty sample");
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - static_cast<double>(lo));
}

}  // namespace attgf
