#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace attgf {

// Average-tie (mid) ranks, 1-based.
std::vector<double> midranks(std::span<const double> values);

// Pearson correlation; NaN when either side is constant.
double pearson(std::span<const double> x, std::span<const double> y);

// Spearman correlation on midranks; NaN when either side is constant.
// Throws PreconditionError for n < 3 or unequal lengths.
double srcc(std::span<const double> pred, std::span<const double> target);

enum class MappingForm {
  logistic,     // b1 * (1/2 - 1 / (1 + exp(b2 (y - b3)))) + b4 y + b5
  exponential,  // b1 * (1/2 - exp(-b2 (y - b3))) + b4 y + b5
};

struct LogisticFit {
  std::array<double, 5> beta{};
  MappingForm form = MappingForm::logistic;
  bool converged = false;
  // True when the reported mapping is the ordinary linear regression.
  bool linear_fallback = false;
  int iterations = 0;
  double residual = 0.0;  // sum of squared errors of the reported mapping

  double map(double y) const;
  std::vector<double> map(std::span<const double> y) const;
};

// Damped Gauss-Newton (Levenberg-Marquardt) fit of the five-parameter
// mapping. Needs n >= 5.
LogisticFit fit_logistic(std::span<const double> pred, std::span<const double> target,
                         MappingForm form = MappingForm::logistic, int max_iterations = 1000,
                         double tolerance = 1e-10);

struct PlccResult {
  double value = 0.0;
  LogisticFit fit;
};
PlccResult plcc_detailed(std::span<const double> pred, std::span<const double> target,
                         MappingForm form = MappingForm::logistic);
double plcc(std::span<const double> pred, std::span<const double> target);

// Fraction of pairs whose predicted order (score_i >= score_j) matches the label.
double pair_accuracy(std::span<const double> score_i, std::span<const double> score_j,
                     std::span<const int> labels);

// SRCC of `pred` against `shuffles` random permutations of `target`, sorted ascending.
std::vector<double> permutation_null(std::span<const double> pred, std::span<const double> target,
                                     int shuffles, std::uint64_t seed);
// Linear-interpolated quantile of sorted values.
double quantile(std::span<const double> sorted, double q);

}  // namespace attgf
