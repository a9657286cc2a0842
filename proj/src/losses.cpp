#include "attgf/losses.hpp"

#include <cmath>

#include "attgf/errors.hpp"
#include "attgf/ops.hpp"

namespace attgf {

using namespace ops;

namespace {

Tensor label_signs(std::span<const int> labels) {
  std::vector<double> signs;
  signs.reserve(labels.size());
  for (int l : labels) {
    if (l != 0 && l != 1) throw PreconditionError("pair labels must be 0 or 1");
    signs.push_back(l == 1 ? 1.0 : -1.0);
  }
  return Tensor::from_data({static_cast<int>(labels.size()), 1, 1, 1}, std::move(signs));
}

}  // namespace

void PairBatch::validate() const {
  const int p = size();
  if (p < 1) throw PreconditionError("pair batch is empty");
  Shape scores{p, 1, 1, 1};
  if (score_i.shape() != scores || score_j.shape() != scores) {
    throw PreconditionError("pair scores must have shape " + scores.str());
  }
  if (features_i.defined() || features_j.defined()) {
    const Shape& fi = features_i.shape();
    if (fi.n != p || fi.h != 1 || fi.w != 1 || features_j.shape() != fi) {
      throw ConfigError("pair features must both have shape (P, D, 1, 1)");
    }
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw PreconditionError("pair labels must be 0 or 1");
  }
}

CenterState CenterState::zeros(int dim) {
  return CenterState{Tensor::parameter({1, dim, 1, 1}, std::vector<double>(dim, 0.0)),
                     Tensor::parameter({1, dim, 1, 1}, std::vector<double>(dim, 0.0))};
}

void LossWeights::validate() const {
  for (double w : {rank, center, regression, test_rank, test_center, focal_gamma}) {
    if (!(w >= 0) || !std::isfinite(w)) {
      throw ConfigError("loss weights and focal gamma must be finite and non-negative");
    }
  }
}

double pair_probability(double score_i, double score_j, int label) {
  double z = (label == 1 ? 1.0 : -1.0) * (score_i - score_j);
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

Tensor pair_probability(const Tensor& score_i, const Tensor& score_j, std::span<const int> labels) {
  return sigmoid(mul(sub(score_i, score_j), label_signs(labels)));
}

Tensor focal_rank_loss(const PairBatch& batch, double gamma) {
  batch.validate();
  Tensor p = clamp(pair_probability(batch.score_i, batch.score_j, batch.labels),
                   kProbabilityClamp, 1.0 - kProbabilityClamp);
  Tensor modulator = ops::pow(add_scalar(neg(p), 1.0), gamma);
  return neg(mean(mul(modulator, log(p))));
}

Tensor center_loss(const PairBatch& batch, const CenterState& centers) {
  batch.validate();
  if (!batch.features_i.defined()) throw ConfigError("center loss needs pair features");
  const int d = batch.features_i.shape().c;
  if (centers.c0.shape() != Shape{1, d, 1, 1} || centers.c1.shape() != Shape{1, d, 1, 1}) {
    throw ConfigError("center dimension " + std::to_string(centers.dim()) +
                      " does not match feature dimension " + std::to_string(d));
  }
  std::vector<double> on(batch.labels.begin(), batch.labels.end());
  std::vector<double> off;
  for (int l : batch.labels) off.push_back(1.0 - l);
  Shape column{batch.size(), 1, 1, 1};
  Tensor select1 = Tensor::from_data(column, std::move(on));
  Tensor select0 = Tensor::from_data(column, std::move(off));
  Tensor ranking = sub(batch.features_i, batch.features_j);
  Tensor center = add(mul(select1, centers.c1), mul(select0, centers.c0));
  Tensor residual = sub(ranking, center);
  return scale(sum(square(residual)), 1.0 / batch.size());
}

Tensor score_regression_loss(const Tensor& scores, std::span<const std::optional<double>> targets,
                             int domain_id, std::optional<int> inpainting_domain) {
  if (!inpainting_domain || *inpainting_domain != domain_id) return Tensor::scalar(0.0);
  const Shape& s = scores.shape();
  if (s.c != 1 || s.h != 1 || s.w != 1 || static_cast<std::size_t>(s.n) != targets.size()) {
    throw PreconditionError("regression scores must be (M, 1, 1, 1) with one target each");
  }
  std::vector<double> values;
  for (std::size_t m = 0; m < targets.size(); ++m) {
    if (!targets[m]) {
      throw DataError("missing pseudo-MOS for item " + std::to_string(m) +
                      " of inpainting domain " + std::to_string(domain_id));
    }
    values.push_back(*targets[m]);
  }
  Tensor target = Tensor::from_data(s, std::move(values));
  return mean(square(sub(target, scores)));
}

Tensor meta_train_loss(std::span<const DomainLossTerms> domains, const LossWeights& weights) {
  if (domains.empty()) throw PreconditionError("meta-train loss needs at least one domain");
  Tensor total;
  for (const auto& d : domains) {
    Tensor term = add(add(scale(d.rank, weights.rank), scale(d.center, weights.center)),
                      scale(d.regression, weights.regression));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor meta_test_loss(const DomainLossTerms& terms, const LossWeights& weights) {
  return add(add(scale(terms.rank, weights.test_rank), scale(terms.center, weights.test_center)),
             scale(terms.regression, weights.regression));
}

}  // namespace attgf
