#include "attgf/meta.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "attgf/errors.hpp"
#include "attgf/metrics.hpp"
#include "attgf/ops.hpp"

namespace attgf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

bool finite_all(std::span<const Tensor> ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return all_finite(t); });
}

// Adaptive (fresh moments) or plain step computed on values; returns leaves.
std::vector<Tensor> step_leaves(std::span<const Tensor> theta, std::span<const Tensor> g, double lr,
                                const MetaConfig& config) {
  std::vector<Tensor> out;
  out.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    std::vector<double> v = values_of(theta[i]);
    auto gi = g[i].data();
    for (std::size_t k = 0; k < v.size(); ++k) {
      double s = config.inner_optimizer == InnerOptimizer::sgd
                     ? gi[k]
                     : gi[k] / (std::abs(gi[k]) + config.adam_epsilon);
      v[k] -= lr * s;
    }
    out.push_back(Tensor::parameter(theta[i].shape(), std::move(v)));
  }
  return out;
}

std::vector<Tensor> step_graph(std::span<const Tensor> theta, std::span<const Tensor> g, double lr,
                               const MetaConfig& config) {
  std::vector<Tensor> out;
  out.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    Tensor s = config.inner_optimizer == InnerOptimizer::sgd
                   ? g[i]
                   : ops::div(g[i], ops::add_scalar(ops::abs(g[i]), config.adam_epsilon));
    out.push_back(ops::sub(theta[i], ops::scale(s, lr)));
  }
  return out;
}

std::vector<Tensor> add_all(std::span<const Tensor> a, std::span<const Tensor> b) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(ops::add(a[i], b[i]));
  return out;
}

std::seed_seq make_seq(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return std::seed_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                       static_cast<std::uint32_t>(b)};
}

double nan_to_lowest(double v) { return std::isnan(v) ? -std::numeric_limits<double>::infinity() : v; }

}  // namespace

void MetaConfig::validate() const {
  if (!(outer_lr > 0) || !(inner_lr > 0) || !(lr_decay_factor > 0)) {
    throw ConfigError("learning rates and the decay factor must be positive");
  }
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 0 || max_iterations < 0 || iterations_per_epoch < 0 || lr_decay_every < 1) {
    throw ConfigError("epoch and iteration counts must be non-negative");
  }
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("validation_fraction must lie in [0, 1)");
  }
}

double MetaConfig::lr_scale(int epoch) const {
  return std::pow(1.0 / lr_decay_factor, epoch / lr_decay_every);
}

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::full: return "full";
    case AblationMode::no_meta: return "no_meta";
    case AblationMode::no_cba: return "no_cba";
    case AblationMode::no_aba: return "no_aba";
  }
  return "unknown";
}

AblationMode parse_ablation(const std::string& name) {
  for (auto m : {AblationMode::full, AblationMode::no_meta, AblationMode::no_cba, AblationMode::no_aba}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown ablation '" + name + "' (expected full, no_meta, no_cba or no_aba)");
}

ModelConfig apply_ablation(ModelConfig config, AblationMode mode) {
  if (mode == AblationMode::no_cba) config.use_cba = false;
  if (mode == AblationMode::no_aba) config.use_agt = false;
  return config;
}

std::vector<Tensor> inner_update(std::span<const Tensor> theta, const Tensor& loss, double lr,
                                 const MetaConfig& config, bool create_graph) {
  std::vector<Tensor> g = grad(loss, theta, GradOptions{create_graph});
  return create_graph ? step_graph(theta, g, lr, config) : step_leaves(theta, g, lr, config);
}

SubBatchResult meta_sub_batch(std::span<const Tensor> theta, const LossFn& train_loss,
                              const LossFn& test_loss, double inner_lr, const MetaConfig& config) {
  SubBatchResult r;
  Tensor l_tr = train_loss(theta);
  r.train_loss = l_tr.item();
  if (!std::isfinite(r.train_loss)) {
    r.finite = false;
    return r;
  }
  if (config.second_order) {
    std::vector<Tensor> g = grad(l_tr, theta, GradOptions{true});
    std::vector<Tensor> adapted = step_graph(theta, g, inner_lr, config);
    Tensor l_te = test_loss(adapted);
    r.test_loss = l_te.item();
    r.gradient = grad(ops::add(l_tr, l_te), theta);
  } else {
    std::vector<Tensor> g = grad(l_tr, theta);
    std::vector<Tensor> adapted = step_leaves(theta, g, inner_lr, config);
    Tensor l_te = test_loss(adapted);
    r.test_loss = l_te.item();
    r.gradient = add_all(g, grad(l_te, adapted));
  }
  r.finite = std::isfinite(r.test_loss) && finite_all(r.gradient);
  return r;
}

std::vector<Tensor> apply_step(std::span<const Tensor> theta, std::span<const std::vector<double>> gradient,
                               double lr, double weight_decay, OuterOptimizer optimizer,
                               const MetaConfig& config, AdamState* adam) {
  if (optimizer == OuterOptimizer::adam) {
    if (!adam) throw PreconditionError("adaptive outer step needs optimizer state");
    if (adam->m.empty()) {
      for (const auto& t : theta) {
        adam->m.emplace_back(t.size(), 0.0);
        adam->v.emplace_back(t.size(), 0.0);
      }
    }
    ++adam->step;
  }
  std::vector<Tensor> out;
  out.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    std::vector<double> v = values_of(theta[i]);
    const auto& g = gradient[i];
    for (std::size_t k = 0; k < v.size(); ++k) {
      double update = g[k];
      if (optimizer == OuterOptimizer::adam) {
        double& m = adam->m[i][k];
        double& s = adam->v[i][k];
        m = config.adam_beta1 * m + (1 - config.adam_beta1) * g[k];
        s = config.adam_beta2 * s + (1 - config.adam_beta2) * g[k] * g[k];
        const double mh = m / (1 - std::pow(config.adam_beta1, static_cast<double>(adam->step)));
        const double sh = s / (1 - std::pow(config.adam_beta2, static_cast<double>(adam->step)));
        update = mh / (std::sqrt(sh) + config.adam_epsilon);
      }
      v[k] -= lr * update + lr * weight_decay * v[k];
    }
    out.push_back(Tensor::parameter(theta[i].shape(), std::move(v)));
  }
  return out;
}

std::optional<std::vector<Tensor>> accumulate_and_step(std::span<const Tensor> theta,
                                                       std::span<const std::vector<Tensor>> gradients,
                                                       double outer_lr, const MetaConfig& config,
                                                       AdamState* adam) {
  if (gradients.empty()) throw PreconditionError("no sub-batch gradients to aggregate");
  const double n = static_cast<double>(gradients.size());
  std::vector<std::vector<double>> total;
  for (const auto& t : theta) total.emplace_back(t.size(), 0.0);
  for (const auto& g : gradients) {
    if (g.size() != theta.size()) throw PreconditionError("gradient count does not match theta");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      auto d = g[i].data();
      for (std::size_t k = 0; k < d.size(); ++k) total[i][k] += d[k];
    }
  }
  for (auto& t : total) {
    for (double& x : t) {
      x /= n;
      if (!std::isfinite(x)) return std::nullopt;
    }
  }
  return apply_step(theta, total, outer_lr, config.weight_decay, config.outer_optimizer, config, adam);
}

std::vector<SubBatchPlan> sample_meta_batch(std::size_t num_domains, std::mt19937_64& rng) {
  if (num_domains < 2) {
    throw ConfigError("meta-learning needs at least 2 source domains, got " +
                      std::to_string(num_domains));
  }
  std::vector<int> order(num_domains);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<SubBatchPlan> plans;
  for (int test : order) {
    SubBatchPlan p;
    p.test = test;
    for (int d = 0; d < static_cast<int>(num_domains); ++d) {
      if (d != test) p.train.push_back(d);
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

ValidationSplit split_validation(std::span<const DomainDataset> domains, double fraction,
                                 std::uint64_t seed) {
  ValidationSplit split;
  for (const auto& d : domains) {
    const std::size_t n = d.pairs.size();
    std::size_t held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
    if (fraction > 0 && n >= 2) held = std::clamp<std::size_t>(held, 1, n - 1);
    if (n < 2) held = 0;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto seq = make_seq(seed, static_cast<std::uint64_t>(d.domain_id), 0x5a1d);
    std::mt19937_64 rng(seq);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(held), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    DomainDataset tr{d.domain_id, {}, d.is_inpainting}, va{d.domain_id, {}, d.is_inpainting};
    for (auto i : train) tr.pairs.push_back(d.pairs[i]);
    for (auto i : val) va.pairs.push_back(d.pairs[i]);
    split.train.push_back(std::move(tr));
    split.validation.push_back(std::move(va));
  }
  return split;
}

ValidationResult evaluate_pairs(const Model& model, const ImageBank& bank,
                                std::span<const DomainDataset> domains) {
  ValidationResult result;
  double srcc_total = 0;
  int srcc_count = 0;
  std::size_t hits = 0, pairs = 0;
  constexpr std::size_t kChunk = 64;
  for (const auto& d : domains) {
    if (d.pairs.empty()) continue;
    std::set<std::int64_t> ids;
    for (const auto& p : d.pairs) {
      ids.insert(p.anchor_id);
      ids.insert(p.partner_id);
    }
    std::vector<ImageBank::Key> keys;
    for (auto id : ids) keys.push_back({d.domain_id, id});
    std::map<std::int64_t, double> score;
    for (std::size_t start = 0; start < keys.size(); start += kChunk) {
      std::span<const ImageBank::Key> chunk(keys.data() + start, std::min(kChunk, keys.size() - start));
      QualityOutput out = model.predict(bank.images(chunk), bank.maps(chunk));
      for (std::size_t k = 0; k < chunk.size(); ++k) score[chunk[k].stable_id] = out.score.data()[k];
    }
    std::vector<double> pred, target;
    for (const auto& k : keys) {
      pred.push_back(score[k.stable_id]);
      target.push_back(bank.info(k).pseudo_mos);
    }
    if (keys.size() >= 3) {
      double s = srcc(pred, target);
      if (!std::isnan(s)) {
        srcc_total += s;
        ++srcc_count;
      }
    }
    for (const auto& p : d.pairs) {
      hits += (score[p.anchor_id] >= score[p.partner_id] ? 1 : 0) == p.label;
      ++pairs;
    }
  }
  result.srcc = srcc_count ? srcc_total / srcc_count : std::numeric_limits<double>::quiet_NaN();
  result.pair_accuracy = pairs ? static_cast<double>(hits) / static_cast<double>(pairs)
                               : std::numeric_limits<double>::quiet_NaN();
  return result;
}

MetaTrainer::MetaTrainer(ModelConfig model_config, MetaConfig config, LossWeights weights,
                         AblationMode mode, std::vector<DomainDataset> domains,
                         const ImageBank& bank, fs::path run_dir)
    : model_config_(apply_ablation(std::move(model_config), mode)),
      config_(config),
      weights_(weights),
      mode_(mode),
      bank_(bank),
      run_dir_(std::move(run_dir)),
      model_(model_config_),
      centers_(CenterState::zeros(model_config_.feature_dim())) {
  config_.validate();
  weights_.validate();
  if (domains.empty()) throw ConfigError("no training domains");
  if (mode_ != AblationMode::no_meta && domains.size() < 2) {
    throw ConfigError("meta-learning needs at least 2 source domains, got " +
                      std::to_string(domains.size()));
  }
  for (auto& d : domains) {
    if (d.pairs.empty()) throw DataError("domain " + std::to_string(d.domain_id) + " has no pairs");
    for (const auto& p : d.pairs) {
      if (p.domain_id != d.domain_id) {
        throw DataError("pair of domain " + std::to_string(p.domain_id) + " listed under domain " +
                        std::to_string(d.domain_id));
      }
      if (!bank_.contains({d.domain_id, p.anchor_id}) || !bank_.contains({d.domain_id, p.partner_id})) {
        throw DataError("pair (" + std::to_string(p.anchor_id) + ", " + std::to_string(p.partner_id) +
                        ") of domain " + std::to_string(d.domain_id) + " references unknown images");
      }
    }
    if (weights_.inpainting_domain && *weights_.inpainting_domain == d.domain_id) d.is_inpainting = true;
    if (d.is_inpainting) {
      std::set<std::int64_t> ids;
      for (const auto& p : d.pairs) ids.insert(p.anchor_id), ids.insert(p.partner_id);
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (auto id : ids) {
        double v = bank_.info({d.domain_id, id}).pseudo_mos;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      for (auto id : ids) {
        double v = bank_.info({d.domain_id, id}).pseudo_mos;
        regression_targets_[id] = hi > lo ? (v - lo) / (hi - lo) : 0.0;
      }
    }
  }
  split_ = split_validation(domains, config_.validation_fraction, config_.seed);
  fs::create_directories(run_dir_);
  for (const auto& d : split_.train) {
    if (d.pairs.empty()) throw DataError("domain " + std::to_string(d.domain_id) + " has no training pairs");
  }
}

std::vector<Tensor> MetaTrainer::theta() const {
  std::vector<Tensor> t = model_.parameter_tensors();
  t.push_back(centers_.c0);
  t.push_back(centers_.c1);
  return t;
}

void MetaTrainer::set_theta(std::span<const Tensor> values) {
  const std::size_t n = values.size() - 2;
  model_.set_parameters(values.subspan(0, n));
  centers_.c0 = values[n].detach_parameter();
  centers_.c1 = values[n + 1].detach_parameter();
}

MetaTrainer::DomainTerms MetaTrainer::domain_terms(std::span<const Tensor> theta, int domain_index,
                                                   std::span<const TrainPair> pairs) {
  const DomainDataset& domain = split_.train[domain_index];
  const int p = static_cast<int>(pairs.size());
  std::vector<ImageBank::Key> keys;
  keys.reserve(2 * pairs.size());
  for (const auto& pr : pairs) keys.push_back({domain.domain_id, pr.anchor_id});
  for (const auto& pr : pairs) keys.push_back({domain.domain_id, pr.partner_id});
  const std::size_t n = theta.size() - 2;
  QualityOutput out = model_.forward_with(theta.subspan(0, n), bank_.images(keys), bank_.maps(keys), Mode::train);

  PairBatch batch;
  batch.score_i = ops::slice(out.score, 0, 0, p);
  batch.score_j = ops::slice(out.score, 0, p, p);
  batch.features_i = ops::slice(out.features, 0, 0, p);
  batch.features_j = ops::slice(out.features, 0, p, p);
  for (const auto& pr : pairs) batch.labels.push_back(pr.label);
  batch.domain_id = domain.domain_id;

  DomainTerms t;
  t.terms.rank = focal_rank_loss(batch, weights_.focal_gamma);
  t.terms.center = center_loss(batch, CenterState{theta[n], theta[n + 1]});
  std::optional<int> alpha;
  std::vector<std::optional<double>> targets;
  if (domain.is_inpainting) {
    alpha = domain.domain_id;
    for (const auto& k : keys) targets.push_back(regression_targets_.at(k.stable_id));
  } else {
    targets.assign(keys.size(), std::nullopt);
  }
  t.terms.regression = score_regression_loss(out.score, targets, domain.domain_id, alpha);
  t.rank = t.terms.rank.item();
  t.center = t.terms.center.item();
  t.regression = t.terms.regression.item();
  return t;
}

void MetaTrainer::write_metrics(long iteration, int sub_batch, double rank, double center,
                                double regression, double train_loss, double test_loss, double lr) {
  std::ofstream out(run_dir_ / "metrics.jsonl", std::ios::app);
  if (!out) throw DataError("cannot append to " + (run_dir_ / "metrics.jsonl").string());
  json j{{"iteration", iteration}, {"sub_batch", sub_batch}, {"L_r", rank},  {"L_ct", center},
         {"L_s", regression},      {"L_tr", train_loss},    {"L_te", test_loss}, {"lr", lr}};
  out << j.dump() << "\n";
}

void MetaTrainer::step(std::span<const std::vector<TrainPair>> batches, double lr_scale, long iteration) {
  if (batches.size() != split_.train.size()) {
    throw PreconditionError("one pair batch per training domain is required");
  }
  if (mode_ == AblationMode::no_meta) {
    pooled_step(batches, lr_scale, iteration);
  } else {
    meta_step(batches, lr_scale, iteration);
  }
}

void MetaTrainer::meta_step(std::span<const std::vector<TrainPair>> batches, double lr_scale,
                            long iteration) {
  const double inner_lr = config_.inner_lr * lr_scale;
  const double outer_lr = config_.outer_lr * lr_scale;
  const std::vector<Tensor> th = theta();
  auto seq = make_seq(config_.seed, static_cast<std::uint64_t>(iteration), 0x3e7a);
  std::mt19937_64 rng(seq);
  const auto plans = sample_meta_batch(split_.train.size(), rng);
  std::vector<std::vector<Tensor>> gradients;

  auto train_objective = [&](const DomainTerms& t) {
    return ops::add(ops::add(ops::scale(t.terms.rank, weights_.rank),
                             ops::scale(t.terms.center, weights_.center)),
                    ops::scale(t.terms.regression, weights_.regression));
  };

  if (!config_.second_order && config_.share_meta_train_terms) {
    // At theta every domain's meta-train term is shared by all sub-batches
    // that train on it, so each is evaluated and differentiated once.
    std::vector<DomainTerms> at_theta;
    std::vector<std::vector<Tensor>> domain_grads;
    for (std::size_t d = 0; d < split_.train.size(); ++d) {
      at_theta.push_back(domain_terms(th, static_cast<int>(d), batches[d]));
      Tensor loss = train_objective(at_theta.back());
      if (!std::isfinite(loss.item())) {
        spdlog::warn("iteration {}: non-finite meta-train loss on domain {}; skipping",
                     iteration, split_.train[d].domain_id);
        ++skipped_;
        return;
      }
      domain_grads.push_back(grad(loss, th));
    }
    for (std::size_t k = 0; k < plans.size(); ++k) {
      const auto& plan = plans[k];
      std::vector<DomainLossTerms> tr_terms;
      std::vector<Tensor> g_tr;
      double rank = 0, center = 0, regression = 0;
      for (int d : plan.train) {
        tr_terms.push_back(at_theta[d].terms);
        rank += at_theta[d].rank;
        center += at_theta[d].center;
        regression += at_theta[d].regression;
        g_tr = g_tr.empty() ? domain_grads[d] : add_all(g_tr, domain_grads[d]);
      }
      const double l_tr = meta_train_loss(tr_terms, weights_).item();
      std::vector<Tensor> adapted = step_leaves(th, g_tr, inner_lr, config_);
      DomainTerms te = domain_terms(adapted, plan.test, batches[plan.test]);
      Tensor l_te = meta_test_loss(te.terms, weights_);
      gradients.push_back(add_all(g_tr, grad(l_te, adapted)));
      write_metrics(iteration, static_cast<int>(k), rank, center, regression, l_tr, l_te.item(), outer_lr);
    }
  } else {
    for (std::size_t k = 0; k < plans.size(); ++k) {
      const auto& plan = plans[k];
      double rank = 0, center = 0, regression = 0;
      LossFn train_loss = [&](std::span<const Tensor> params) {
        std::vector<DomainLossTerms> terms;
        for (int d : plan.train) {
          DomainTerms t = domain_terms(params, d, batches[d]);
          rank += t.rank;
          center += t.center;
          regression += t.regression;
          terms.push_back(t.terms);
        }
        return meta_train_loss(terms, weights_);
      };
      LossFn test_loss = [&](std::span<const Tensor> params) {
        return meta_test_loss(domain_terms(params, plan.test, batches[plan.test]).terms, weights_);
      };
      SubBatchResult r = meta_sub_batch(th, train_loss, test_loss, inner_lr, config_);
      if (!std::isfinite(r.train_loss)) {
        spdlog::warn("iteration {}: non-finite meta-train loss; skipping", iteration);
        ++skipped_;
        return;
      }
      gradients.push_back(std::move(r.gradient));
      write_metrics(iteration, static_cast<int>(k), rank, center, regression, r.train_loss,
                    r.test_loss, outer_lr);
    }
  }

  auto updated = accumulate_and_step(th, gradients, outer_lr, config_, &adam_);
  if (!updated) {
    spdlog::warn("iteration {}: non-finite aggregate gradient; update skipped", iteration);
    ++skipped_;
    return;
  }
  set_theta(*updated);
}

void MetaTrainer::pooled_step(std::span<const std::vector<TrainPair>> batches, double lr_scale,
                              long iteration) {
  const double lr = config_.outer_lr * lr_scale;
  const std::vector<Tensor> th = theta();
  std::vector<DomainLossTerms> terms;
  double rank = 0, center = 0, regression = 0;
  for (std::size_t d = 0; d < split_.train.size(); ++d) {
    DomainTerms t = domain_terms(th, static_cast<int>(d), batches[d]);
    rank += t.rank;
    center += t.center;
    regression += t.regression;
    terms.push_back(t.terms);
  }
  Tensor loss = meta_train_loss(terms, weights_);
  write_metrics(iteration, 0, rank, center, regression, loss.item(), 0.0, lr);
  if (!std::isfinite(loss.item())) {
    spdlog::warn("iteration {}: non-finite loss; skipping", iteration);
    ++skipped_;
    return;
  }
  std::vector<Tensor> g = grad(loss, th);
  std::vector<std::vector<double>> values;
  for (const auto& t : g) values.push_back(values_of(t));
  set_theta(apply_step(th, values, lr, config_.weight_decay, OuterOptimizer::adam, config_, &adam_));
}

void MetaTrainer::save(const fs::path& path, int epoch, long iteration, double best) const {
  std::vector<NamedTensor> extra{{"center.c0", centers_.c0}, {"center.c1", centers_.c1}};
  extra.push_back({"trainer.state",
                   Tensor::from_data({1, 5, 1, 1}, {static_cast<double>(epoch), static_cast<double>(iteration),
                                                    best, static_cast<double>(adam_.step),
                                                    static_cast<double>(skipped_)})});
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    Shape s{1, static_cast<int>(adam_.m[i].size()), 1, 1};
    extra.push_back({"adam.m." + std::to_string(i), Tensor::from_data(s, adam_.m[i])});
    extra.push_back({"adam.v." + std::to_string(i), Tensor::from_data(s, adam_.v[i])});
  }
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(tmp, model_, extra);
  fs::rename(tmp, path);
}

std::tuple<int, long, double> MetaTrainer::restore(const fs::path& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (model_config_to_json(ck.model.config()) != model_config_to_json(model_config_)) {
    throw DataError("checkpoint " + path.string() + " was written for a different model configuration");
  }
  model_ = std::move(ck.model);
  std::map<std::string, Tensor> extra;
  for (auto& e : ck.extra) extra[e.name] = e.value;
  if (!extra.count("center.c0") || !extra.count("center.c1") || !extra.count("trainer.state")) {
    throw DataError("checkpoint " + path.string() + " lacks trainer state");
  }
  centers_ = CenterState{extra["center.c0"].detach_parameter(), extra["center.c1"].detach_parameter()};
  auto state = extra["trainer.state"].data();
  adam_ = AdamState{};
  adam_.step = static_cast<long>(state[3]);
  skipped_ = static_cast<long>(state[4]);
  for (std::size_t i = 0; extra.count("adam.m." + std::to_string(i)); ++i) {
    adam_.m.push_back(values_of(extra["adam.m." + std::to_string(i)]));
    adam_.v.push_back(values_of(extra["adam.v." + std::to_string(i)]));
  }
  return {static_cast<int>(state[0]), static_cast<long>(state[1]), state[2]};
}

TrainResult MetaTrainer::train(bool resume) {
  fs::create_directories(run_dir_);
  std::size_t smallest = std::numeric_limits<std::size_t>::max();
  for (const auto& d : split_.train) smallest = std::min(smallest, d.pairs.size());
  const long per_epoch = config_.iterations_per_epoch > 0
                             ? config_.iterations_per_epoch
                             : std::max<long>(1, static_cast<long>(smallest) / config_.batch_size);
  long total = per_epoch * config_.max_epochs;
  if (config_.max_iterations > 0) total = std::min(total, config_.max_iterations);

  int epoch = 0;
  long iteration = 0;
  double best = -std::numeric_limits<double>::infinity();
  if (resume && fs::exists(last_checkpoint_path())) {
    std::tie(epoch, iteration, best) = restore(last_checkpoint_path());
    spdlog::info("resuming at epoch {}, iteration {}", epoch, iteration);
  } else {
    std::error_code ec;
    fs::remove(run_dir_ / "metrics.jsonl", ec);
    fs::remove(run_dir_ / "validation.jsonl", ec);
  }

  TrainResult result;
  if (iteration >= total) {
    if (!fs::exists(last_checkpoint_path())) save(last_checkpoint_path(), epoch, iteration, best);
  }
  while (iteration < total) {
    auto seq = make_seq(config_.seed, static_cast<std::uint64_t>(epoch), 0xe90c);
    std::mt19937_64 rng(seq);
    // The epoch's whole sampling schedule derives from (seed, epoch), so a
    // resumed run replays it exactly.
    std::vector<std::vector<std::size_t>> order;
    std::vector<std::vector<bool>> swaps;
    for (const auto& d : split_.train) {
      std::vector<std::size_t> idx(d.pairs.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      order.push_back(std::move(idx));
      std::vector<bool> sw(d.pairs.size());
      std::bernoulli_distribution coin(0.5);
      for (std::size_t k = 0; k < sw.size(); ++k) sw[k] = config_.swap_augment && coin(rng);
      swaps.push_back(std::move(sw));
    }
    const double scale = config_.lr_scale(epoch);
    long within = iteration - static_cast<long>(epoch) * per_epoch;
    for (; within < per_epoch && iteration < total; ++within, ++iteration) {
      std::vector<std::vector<TrainPair>> batches;
      for (std::size_t d = 0; d < split_.train.size(); ++d) {
        const auto& pairs = split_.train[d].pairs;
        std::vector<TrainPair> b;
        for (int j = 0; j < config_.batch_size; ++j) {
          // Wraps when a domain has fewer pairs than an epoch consumes.
          std::size_t slot = (static_cast<std::size_t>(within) * config_.batch_size + j) % pairs.size();
          TrainPair p = pairs[order[d][slot]];
          if (swaps[d][slot]) {
            std::swap(p.anchor_id, p.partner_id);
            p.label = 1 - p.label;
          }
          b.push_back(p);
        }
        batches.push_back(std::move(b));
      }
      step(batches, scale, iteration);
    }
    const bool finished_epoch = within == per_epoch;
    ValidationResult val = evaluate_pairs(model_, bank_, split_.validation);
    {
      std::ofstream out(run_dir_ / "validation.jsonl", std::ios::app);
      json j{{"epoch", epoch}, {"iteration", iteration}, {"lr", config_.outer_lr * scale},
             {"srcc", std::isnan(val.srcc) ? json(nullptr) : json(val.srcc)},
             {"pair_accuracy", std::isnan(val.pair_accuracy) ? json(nullptr) : json(val.pair_accuracy)}};
      out << j.dump() << "\n";
    }
    spdlog::info("epoch {} iteration {}: validation srcc {:.4f}, pair accuracy {:.4f}", epoch, iteration,
                 val.srcc, val.pair_accuracy);
    result.last_validation = val;
    if (finished_epoch) ++epoch;
    if (nan_to_lowest(val.srcc) > best || !fs::exists(best_checkpoint_path())) {
      best = std::max(best, nan_to_lowest(val.srcc));
      save(best_checkpoint_path(), epoch, iteration, best);
    }
    save(last_checkpoint_path(), epoch, iteration, best);
    if (config_.keep_epoch_checkpoints) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
      fs::copy_file(last_checkpoint_path(), run_dir_ / name, fs::copy_options::overwrite_existing);
    }
  }
  result.epochs_completed = epoch;
  result.iterations = iteration;
  result.skipped_updates = skipped_;
  result.best_validation_srcc = best;
  result.last_checkpoint = last_checkpoint_path();
  result.best_checkpoint = fs::exists(best_checkpoint_path()) ? best_checkpoint_path() : last_checkpoint_path();
  return result;
}

}  // namespace attgf
