#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "attgf/dataset.hpp"
#include "attgf/losses.hpp"
#include "attgf/model.hpp"

namespace attgf {

enum class InnerOptimizer { adam, sgd };
enum class OuterOptimizer { sgd, adam };

struct MetaConfig {
  double outer_lr = 1e-5;
  double inner_lr = 1e-5;
  double weight_decay = 5e-5;
  int batch_size = 10;
  int max_epochs = 100;
  // Both rates are divided by lr_decay_factor every lr_decay_every epochs.
  int lr_decay_every = 10;
  double lr_decay_factor = 5.0;
  bool second_order = false;
  InnerOptimizer inner_optimizer = InnerOptimizer::adam;
  OuterOptimizer outer_optimizer = OuterOptimizer::sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  // 0 runs max_epochs full epochs.
  long max_iterations = 0;
  // 0 derives the epoch length from the smallest domain.
  int iterations_per_epoch = 0;
  double validation_fraction = 0.1;
  // Randomly swaps anchor and partner (flipping the label).
  bool swap_augment = true;
  // First-order mode evaluates each domain's meta-train term once per
  // meta-batch instead of once per sub-batch; the result is the same.
  bool share_meta_train_terms = true;
  bool keep_epoch_checkpoints = false;
  std::uint64_t seed = 0;

  void validate() const;
  // Learning-rate multiplier in effect during `epoch` (0-based).
  double lr_scale(int epoch) const;
};

enum class AblationMode { full, no_meta, no_cba, no_aba };
std::string to_string(AblationMode mode);
AblationMode parse_ablation(const std::string& name);
ModelConfig apply_ablation(ModelConfig config, AblationMode mode);

// Differentiable loss of a parameter vector.
using LossFn = std::function<Tensor(std::span<const Tensor>)>;

// One step from theta on `loss` (already evaluated at theta). With
// create_graph the result stays differentiable with respect to theta;
// otherwise it is a set of fresh leaves. Fresh moment state each call, so
// the adaptive step reduces to lr * g / (|g| + eps).
std::vector<Tensor> inner_update(std::span<const Tensor> theta, const Tensor& loss, double lr,
                                 const MetaConfig& config, bool create_graph);

struct SubBatchResult {
  std::vector<Tensor> gradient;  // grad L_tr(theta) + grad L_te(theta')
  double train_loss = 0.0;
  double test_loss = 0.0;
  bool finite = true;
};

// Meta-train loss at theta, inner step, meta-test loss at theta', and the
// combined gradient with respect to theta (first- or second-order).
SubBatchResult meta_sub_batch(std::span<const Tensor> theta, const LossFn& train_loss,
                              const LossFn& test_loss, double inner_lr, const MetaConfig& config);

// Persistent moment state for an adaptive outer optimizer.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

// Sums the sub-batch gradients, divides by their count and applies the
// outer step with decoupled weight decay. Returns nullopt (theta unchanged)
// when the aggregate is not finite.
std::optional<std::vector<Tensor>> accumulate_and_step(std::span<const Tensor> theta,
                                                       std::span<const std::vector<Tensor>> gradients,
                                                       double outer_lr, const MetaConfig& config,
                                                       AdamState* adam = nullptr);

// One optimizer step on an already-averaged gradient.
std::vector<Tensor> apply_step(std::span<const Tensor> theta, std::span<const std::vector<double>> gradient,
                               double lr, double weight_decay, OuterOptimizer optimizer,
                               const MetaConfig& config, AdamState* adam);

struct DomainDataset {
  int domain_id = 0;
  std::vector<TrainPair> pairs;
  bool is_inpainting = false;
};

struct SubBatchPlan {
  std::vector<int> train;  // indices into the domain list
  int test = 0;
};

// One sub-batch per domain, each domain serving as meta-test exactly once.
std::vector<SubBatchPlan> sample_meta_batch(std::size_t num_domains, std::mt19937_64& rng);

// Holds out `fraction` of each domain's pairs (at least one when the domain
// has two or more pairs).
struct ValidationSplit {
  std::vector<DomainDataset> train;
  std::vector<DomainDataset> validation;
};
ValidationSplit split_validation(std::span<const DomainDataset> domains, double fraction,
                                 std::uint64_t seed);

struct ValidationResult {
  double srcc = 0.0;  // mean over domains of image-level SRCC vs pseudo-MOS
  double pair_accuracy = 0.0;
};
ValidationResult evaluate_pairs(const Model& model, const ImageBank& bank,
                                std::span<const DomainDataset> domains);

struct TrainResult {
  int epochs_completed = 0;
  long iterations = 0;
  long skipped_updates = 0;
  double best_validation_srcc = 0.0;
  ValidationResult last_validation;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

class MetaTrainer {
 public:
  MetaTrainer(ModelConfig model_config, MetaConfig config, LossWeights weights, AblationMode mode,
              std::vector<DomainDataset> domains, const ImageBank& bank,
              std::filesystem::path run_dir);

  // Continues from run_dir/last.ckpt when present.
  TrainResult train(bool resume = false);

  // One meta-iteration (or pooled step for no_meta) on explicit pair
  // batches, one per domain. Exposed for tests.
  void step(std::span<const std::vector<TrainPair>> batches, double lr_scale, long iteration);

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const CenterState& centers() const { return centers_; }
  const std::vector<DomainDataset>& train_domains() const { return split_.train; }
  const std::vector<DomainDataset>& validation_domains() const { return split_.validation; }

  std::filesystem::path last_checkpoint_path() const { return run_dir_ / "last.ckpt"; }
  std::filesystem::path best_checkpoint_path() const { return run_dir_ / "best.ckpt"; }

 private:
  struct DomainTerms {
    DomainLossTerms terms;
    double rank = 0, center = 0, regression = 0;
  };

  std::vector<Tensor> theta() const;
  void set_theta(std::span<const Tensor> values);
  DomainTerms domain_terms(std::span<const Tensor> theta, int domain_index,
                           std::span<const TrainPair> pairs);
  void meta_step(std::span<const std::vector<TrainPair>> batches, double lr_scale, long iteration);
  void pooled_step(std::span<const std::vector<TrainPair>> batches, double lr_scale, long iteration);
  void write_metrics(long iteration, int sub_batch, double rank, double center, double regression,
                     double train_loss, double test_loss, double lr);
  void save(const std::filesystem::path& path, int epoch, long iteration, double best) const;
  // Returns (epoch, iteration-within-run, best).
  std::tuple<int, long, double> restore(const std::filesystem::path& path);

  ModelConfig model_config_;
  MetaConfig config_;
  LossWeights weights_;
  AblationMode mode_;
  const ImageBank& bank_;
  std::filesystem::path run_dir_;
  ValidationSplit split_;
  Model model_;
  CenterState centers_;
  AdamState adam_;
  // Inpainting-domain pseudo-MOS rescaled to [0, 1], keyed by stable_id.
  std::map<std::int64_t, double> regression_targets_;
  long skipped_ = 0;
};

}  // namespace attgf
