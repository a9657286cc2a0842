#pragma once

#include <optional>
#include <span>
#include <vector>

#include "attgf/tensor.hpp"

namespace attgf {

// Predicted scores and multi-scale features of the two sides of P pairs.
struct PairBatch {
  Tensor score_i;     // (P, 1, 1, 1)
  Tensor score_j;     // (P, 1, 1, 1)
  Tensor features_i;  // (P, D, 1, 1)
  Tensor features_j;  // (P, D, 1, 1)
  std::vector<int> labels;  // 1 iff pseudo-MOS(i) >= pseudo-MOS(j)
  int domain_id = 0;

  int size() const { return static_cast<int>(labels.size()); }
  // Throws PreconditionError/ConfigError on inconsistent members.
  void validate() const;
};

// Learned prototypes of the ranking feature R = Q_i - Q_j for each label.
struct CenterState {
  Tensor c0;  // (1, D, 1, 1)
  Tensor c1;

  static CenterState zeros(int dim);
  int dim() const { return c0.shape().c; }
};

struct LossWeights {
  double rank = 10.0;         // lambda_0, meta-train rank loss
  double center = 0.01;       // lambda_1, meta-train center loss
  double regression = 1.0;    // lambda_2, shared by both phases
  double test_rank = 10.0;    // lambda_3
  double test_center = 0.01;  // lambda_4
  double focal_gamma = 2.0;
  // Domain whose pseudo-MOS values are regressed directly.
  std::optional<int> inpainting_domain;

  void validate() const;
};

inline constexpr double kProbabilityClamp = 1e-7;

// P(i ranked above j) when label = 1, its complement when label = 0.
double pair_probability(double score_i, double score_j, int label);
Tensor pair_probability(const Tensor& score_i, const Tensor& score_j, std::span<const int> labels);

// Mean over pairs of -(1 - p)^gamma log p with p clamped to [eps, 1 - eps].
Tensor focal_rank_loss(const PairBatch& batch, double gamma);

// Mean over pairs of || (Q_i - Q_j) - c_label ||^2.
Tensor center_loss(const PairBatch& batch, const CenterState& centers);

// Mean squared error against pseudo-MOS on the inpainting domain, exactly
// zero on every other domain.
Tensor score_regression_loss(const Tensor& scores, std::span<const std::optional<double>> targets,
                             int domain_id, std::optional<int> inpainting_domain);

struct DomainLossTerms {
  Tensor rank;
  Tensor center;
  Tensor regression;
};

// Sum over meta-train domains of rank*L_r + center*L_ct + regression*L_s.
Tensor meta_train_loss(std::span<const DomainLossTerms> domains, const LossWeights& weights);
// test_rank*L_r + test_center*L_ct + regression*L_s on the meta-test batch.
Tensor meta_test_loss(const DomainLossTerms& terms, const LossWeights& weights);

}  // namespace attgf
