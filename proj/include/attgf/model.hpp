#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attgf/tensor.hpp"

namespace attgf {

struct ModelConfig {
  int num_stages = 4;
  std::vector<int> stage_channels{64, 128, 256, 512};
  int stem_channels = 64;
  // Channel reduction inside the channel-attention bottleneck.
  int reduction = 16;
  // Face-parsing classes carried by segmentation maps.
  int num_attributes = 19;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;
  // Square input resolution the model accepts.
  int input_size = 256;
  // Ablation switches: without CBA the stage goes straight to its ABA
  // blocks; without AGT each ABA uses batch norm with a learned per-channel
  // affine instead of segmentation-predicted maps.
  bool use_cba = true;
  bool use_agt = true;
  std::uint64_t init_seed = 0;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
  // Width of Q: the sum of the pooled stage widths.
  int feature_dim() const;
};

class SegmentationMap {
 public:
  SegmentationMap() = default;
  SegmentationMap(int height, int width, int num_attributes, std::vector<std::uint8_t> labels);

  // Single-class map used when an image has no parsing result.
  static SegmentationMap uniform(int height, int width, int num_attributes);

  int height() const { return height_; }
  int width() const { return width_; }
  int num_attributes() const { return num_attributes_; }
  std::span<const std::uint8_t> labels() const { return labels_; }
  std::uint8_t label(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }

  // Nearest-neighbour resampling of the label image.
  SegmentationMap resized(int height, int width) const;

 private:
  int height_ = 0;
  int width_ = 0;
  int num_attributes_ = 1;
  std::vector<std::uint8_t> labels_;
};

// (N, A, height, width) one-hot expansion of nearest-resized maps.
Tensor one_hot_batch(std::span<const SegmentationMap> maps, int height, int width);

// Channel map (N,C,1,1) and spatial map (N,1,H,W); sigmoid outputs.
struct AttentionWeights {
  Tensor channel_map;
  Tensor spatial_map;
};

struct CbaParams {
  Tensor reduce_weight;  // (C/r, C, 1, 1)
  Tensor reduce_bias;
  Tensor expand_weight;  // (C, C/r, 1, 1)
  Tensor expand_bias;
  Tensor spatial_weight;  // (1, 2, 5, 5)
  Tensor spatial_bias;
};

struct CbaHooks {
  // Replaces the spatial sigmoid output with a constant.
  std::optional<double> spatial_override;
};

struct CbaResult {
  Tensor output;
  Tensor channel_attended;  // W_c * F before the spatial branch
  AttentionWeights attention;
};

CbaResult cba_forward(const Tensor& input, const CbaParams& params, const CbaHooks& hooks = {});

enum class Mode { train, eval };

struct BatchNormStats {
  Tensor running_mean;  // (1, C, 1, 1)
  Tensor running_var;
};

// Normalizes over (N, H, W) per channel. Train mode uses batch statistics
// and, when `stats` is non-null, folds them into the running estimates;
// eval mode reads `stats`.
Tensor batch_norm(const Tensor& x, BatchNormStats* stats, Mode mode, double epsilon,
                  double momentum);
Tensor batch_norm_eval(const Tensor& x, const BatchNormStats& stats, double epsilon);

struct AbaParams {
  // AGT branch (use_agt): (C, A, 3, 3) convolutions predicting gamma/beta.
  Tensor gamma_weight;
  Tensor gamma_bias;
  Tensor beta_weight;
  Tensor beta_bias;
  // Plain batch-norm affine (ablation), (1, C, 1, 1).
  Tensor bn_scale;
  Tensor bn_shift;
  // Trailing 3x3 convolution.
  Tensor conv_weight;
  Tensor conv_bias;
};

struct AbaHooks {
  // Forces gamma = 1 and beta = 0.
  bool identity_affine = false;
};

struct AbaResult {
  Tensor output;
  Tensor normalized;
  Tensor gamma;
  Tensor beta;
};

// `segmentation` is the (N, A, H, W) one-hot map at the resolution of `input`.
// `stats` is updated in train mode when non-null and read in eval mode.
AbaResult aba_forward(const Tensor& input, const Tensor& segmentation, const AbaParams& params,
                      BatchNormStats* stats, Mode mode, double epsilon, double momentum,
                      const AbaHooks& hooks = {});
// Convenience overload resizing the label maps to the feature resolution.
AbaResult aba_forward(const Tensor& input, std::span<const SegmentationMap> maps,
                      const AbaParams& params, BatchNormStats* stats, Mode mode,
                      double epsilon, double momentum, const AbaHooks& hooks = {});

struct QualityOutput {
  Tensor score;     // (N, 1, 1, 1)
  Tensor features;  // (N, D, 1, 1)
};

// Intermediate results captured by Model::forward for inspection.
struct ForwardTrace {
  std::vector<Tensor> attribute_outputs;  // Att_1 .. Att_{2S}
  std::vector<AttentionWeights> attention;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  // Replaces parameter values with fresh leaves holding `values`.
  void set_parameters(std::span<const Tensor> values);
  std::size_t parameter_count() const;

  std::vector<BatchNormStats>& running_stats() { return stats_; }
  const std::vector<BatchNormStats>& running_stats() const { return stats_; }

  // Forward with the model's own parameters.
  QualityOutput forward(const Tensor& images, std::span<const SegmentationMap> maps, Mode mode,
                        ForwardTrace* trace = nullptr);
  // Forward with substituted parameters (same order as parameters()).
  QualityOutput forward_with(std::span<const Tensor> params, const Tensor& images,
                             std::span<const SegmentationMap> maps, Mode mode,
                             ForwardTrace* trace = nullptr);
  // Eval-mode inference; safe to call concurrently on a shared instance.
  QualityOutput predict(const Tensor& images, std::span<const SegmentationMap> maps) const;

 private:
  struct CbaSlots {
    std::size_t reduce_w, reduce_b, expand_w, expand_b, spatial_w, spatial_b;
  };
  struct AbaSlots {
    std::size_t first;  // index of the first parameter of the block
    std::size_t count;
  };
  struct StageSlots {
    std::size_t down_w, down_b;
    std::optional<CbaSlots> cba;
    AbaSlots aba[2];
  };

  std::size_t add_parameter(const std::string& name, Shape shape, std::vector<double> values);
  CbaParams cba_params(std::span<const Tensor> p, const CbaSlots& s) const;
  AbaParams aba_params(std::span<const Tensor> p, const AbaSlots& s) const;
  QualityOutput run(std::span<const Tensor> params, const Tensor& images,
                    std::span<const SegmentationMap> maps, Mode mode, bool update_stats,
                    ForwardTrace* trace) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  std::size_t stem_w_ = 0, stem_b_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<StageSlots> stages_;
  // Mutated by train-mode forwards; see the class comment on threading.
  mutable std::vector<BatchNormStats> stats_;
};

// Checkpoint archive: all parameters, running statistics, the model
// configuration and a format version. `extra` tensors (e.g. loss centers)
// travel alongside the model.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::vector<NamedTensor>& extra = {});
struct LoadedCheckpoint {
  Model model;
  std::vector<NamedTensor> extra;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace attgf
