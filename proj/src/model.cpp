#include "attgf/model.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <map>
#include <random>

#include "attgf/errors.hpp"
#include "attgf/ops.hpp"

namespace attgf {

using namespace ops;

void ModelConfig::validate() const {
  if (num_stages < 1) throw ConfigError("num_stages must be >= 1");
  if (static_cast<int>(stage_channels.size()) != num_stages) {
    throw ConfigError("stage_channels has " + std::to_string(stage_channels.size()) +
                      " entries, expected num_stages = " + std::to_string(num_stages));
  }
  if (stem_channels < 1) throw ConfigError("stem_channels must be >= 1");
  if (reduction < 1) throw ConfigError("reduction ratio must be >= 1");
  for (int c : stage_channels) {
    if (c < 1) throw ConfigError("stage channel counts must be >= 1");
    if (use_cba && c % reduction != 0) {
      throw ConfigError("reduction ratio " + std::to_string(reduction) +
                        " does not divide stage width " + std::to_string(c));
    }
  }
  if (num_attributes < 1 || num_attributes > 256) {
    throw ConfigError("num_attributes must be in [1, 256]");
  }
  if (!(bn_epsilon > 0)) throw ConfigError("bn_epsilon must be positive");
  if (!(bn_momentum > 0 && bn_momentum <= 1)) throw ConfigError("bn_momentum must be in (0, 1]");
  if (input_size < 1) throw ConfigError("input_size must be >= 1");
}

int ModelConfig::feature_dim() const {
  int d = 0;
  for (int c : stage_channels) d += c;
  return d;
}

SegmentationMap::SegmentationMap(int height, int width, int num_attributes,
                                 std::vector<std::uint8_t> labels)
    : height_(height), width_(width), num_attributes_(num_attributes), labels_(std::move(labels)) {
  if (height < 1 || width < 1) throw ShapeError("segmentation map must be non-empty");
  if (num_attributes < 1 || num_attributes > 256) {
    throw ConfigError("num_attributes must be in [1, 256]");
  }
  if (labels_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("segmentation label count does not match its extent");
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] >= num_attributes) {
      throw DataError("segmentation label " + std::to_string(labels_[i]) + " at pixel " +
                      std::to_string(i) + " is not below num_attributes = " +
                      std::to_string(num_attributes));
    }
  }
}

SegmentationMap SegmentationMap::uniform(int height, int width, int num_attributes) {
  return SegmentationMap(height, width, num_attributes,
                         std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0));
}

SegmentationMap SegmentationMap::resized(int height, int width) const {
  if (height == height_ && width == width_) return *this;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    int sy = static_cast<int>(static_cast<std::int64_t>(y) * height_ / height);
    for (int x = 0; x < width; ++x) {
      int sx = static_cast<int>(static_cast<std::int64_t>(x) * width_ / width);
      out[static_cast<std::size_t>(y) * width + x] = label(sy, sx);
    }
  }
  return SegmentationMap(height, width, num_attributes_, std::move(out));
}

Tensor one_hot_batch(std::span<const SegmentationMap> maps, int height, int width) {
  if (maps.empty()) throw PreconditionError("one_hot_batch needs at least one map");
  const int a = maps.front().num_attributes();
  Shape shape{static_cast<int>(maps.size()), a, height, width};
  std::vector<double> values(shape.size(), 0.0);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::size_t n = 0; n < maps.size(); ++n) {
    if (maps[n].num_attributes() != a) {
      throw ConfigError("segmentation maps disagree on num_attributes");
    }
    SegmentationMap r = maps[n].resized(height, width);
    auto labels = r.labels();
    for (std::size_t i = 0; i < plane; ++i) {
      values[(n * a + labels[i]) * plane + i] = 1.0;
    }
  }
  return Tensor::from_data(shape, std::move(values));
}

CbaResult cba_forward(const Tensor& input, const CbaParams& params, const CbaHooks& hooks) {
  const Shape& s = input.shape();
  const Shape& rw = params.reduce_weight.shape();
  if (rw.c != s.c || rw.n < 1 || s.c % rw.n != 0) {
    throw ConfigError("CBA reduce weight " + rw.str() + " incompatible with input " + s.str());
  }
  if (params.expand_weight.shape() != Shape{s.c, rw.n, 1, 1}) {
    throw ConfigError("CBA expand weight has shape " + params.expand_weight.shape().str());
  }
  Tensor descriptor = mean_to(input, Shape{s.n, s.c, 1, 1});
  Tensor reduced = conv2d(descriptor, params.reduce_weight, params.reduce_bias, 1, 0);
  Tensor channel_map = sigmoid(conv2d(reduced, params.expand_weight, params.expand_bias, 1, 0));
  Tensor attended = mul(input, channel_map);

  Tensor spatial_map;
  if (hooks.spatial_override) {
    spatial_map = Tensor::full(Shape{s.n, 1, s.h, s.w}, *hooks.spatial_override);
  } else {
    Tensor pooled = concat({max_channels(attended), mean_to(attended, Shape{s.n, 1, s.h, s.w})}, 1);
    const int pad = params.spatial_weight.shape().h / 2;
    spatial_map = sigmoid(conv2d(pooled, params.spatial_weight, params.spatial_bias, 1, pad));
  }
  Tensor output = add(mul(spatial_map, attended), attended);
  if (!all_finite(output)) throw NumericalError("non-finite value in CBA output");
  return CbaResult{output, attended, AttentionWeights{channel_map, spatial_map}};
}

Tensor batch_norm(const Tensor& x, BatchNormStats* stats, Mode mode, double epsilon,
                  double momentum) {
  const Shape& s = x.shape();
  Shape per_channel{1, s.c, 1, 1};
  if (mode == Mode::eval) {
    if (stats == nullptr) throw PreconditionError("eval-mode batch norm needs running statistics");
    return batch_norm_eval(x, *stats, epsilon);
  }
  const std::size_t count = static_cast<std::size_t>(s.n) * s.h * s.w;
  if (count < 2) {
    throw PreconditionError("train-mode batch norm needs more than one value per channel, got " +
                            s.str());
  }
  Tensor mu = mean_to(x, per_channel);
  Tensor centered = sub(x, mu);
  Tensor var = mean_to(square(centered), per_channel);
  Tensor normalized = div(centered, ops::sqrt(add_scalar(var, epsilon)));
  if (stats != nullptr) {
    auto rm = stats->running_mean.mutable_data();
    auto rv = stats->running_var.mutable_data();
    auto m = mu.data();
    auto v = var.data();
    const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
    for (int c = 0; c < s.c; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * m[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * v[c] * unbias;
    }
  }
  return normalized;
}

Tensor batch_norm_eval(const Tensor& x, const BatchNormStats& stats, double epsilon) {
  std::vector<double> inv(stats.running_var.size());
  auto rv = stats.running_var.data();
  for (std::size_t c = 0; c < inv.size(); ++c) inv[c] = 1.0 / std::sqrt(rv[c] + epsilon);
  Tensor inv_std = Tensor::from_data(stats.running_var.shape(), std::move(inv));
  return mul(sub(x, stats.running_mean), inv_std);
}

AbaResult aba_forward(const Tensor& input, const Tensor& segmentation, const AbaParams& params,
                      BatchNormStats* stats, Mode mode, double epsilon, double momentum,
                      const AbaHooks& hooks) {
  const Shape& s = input.shape();
  Tensor normalized = batch_norm(input, stats, mode, epsilon, momentum);
  Tensor gamma;
  Tensor beta;
  if (hooks.identity_affine) {
    gamma = Tensor::full(s, 1.0);
    beta = Tensor::zeros(s);
  } else if (params.gamma_weight.defined()) {
    const Shape& seg = segmentation.shape();
    if (seg.n != s.n || seg.h != s.h || seg.w != s.w) {
      throw ShapeError("segmentation " + seg.str() + " does not match features " + s.str());
    }
    gamma = conv2d(segmentation, params.gamma_weight, params.gamma_bias, 1, 1);
    beta = conv2d(segmentation, params.beta_weight, params.beta_bias, 1, 1);
  } else {
    gamma = broadcast_to(params.bn_scale, s);
    beta = broadcast_to(params.bn_shift, s);
  }
  Tensor transformed = add(mul(gamma, normalized), beta);
  Tensor output = conv2d(transformed, params.conv_weight, params.conv_bias, 1, 1);
  if (!all_finite(output)) throw NumericalError("non-finite value in ABA output");
  return AbaResult{output, normalized, gamma, beta};
}

AbaResult aba_forward(const Tensor& input, std::span<const SegmentationMap> maps,
                      const AbaParams& params, BatchNormStats* stats, Mode mode,
                      double epsilon, double momentum, const AbaHooks& hooks) {
  const Shape& s = input.shape();
  if (static_cast<int>(maps.size()) != s.n) {
    throw ShapeError("expected " + std::to_string(s.n) + " segmentation maps, got " +
                     std::to_string(maps.size()));
  }
  return aba_forward(input, one_hot_batch(maps, s.h, s.w), params, stats, mode, epsilon,
                     momentum, hooks);
}

namespace {

std::vector<double> he_normal(std::mt19937_64& rng, std::size_t count, int fan_in, double gain) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
  std::vector<double> values(count);
  for (auto& v : values) v = dist(rng);
  return values;
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.init_seed);
  auto conv = [&](const std::string& name, int out, int in, int k, double gain = 2.0) {
    Shape shape{out, in, k, k};
    return add_parameter(name, shape, he_normal(rng, shape.size(), in * k * k, gain));
  };
  auto bias = [&](const std::string& name, int out, double value = 0.0) {
    return add_parameter(name, Shape{1, out, 1, 1}, std::vector<double>(out, value));
  };
  const int a = config_.num_attributes;

  stem_w_ = conv("stem.weight", config_.stem_channels, 3, 3);
  stem_b_ = bias("stem.bias", config_.stem_channels);
  int in = config_.stem_channels;
  for (int t = 0; t < config_.num_stages; ++t) {
    const int c = config_.stage_channels[t];
    const std::string prefix = "stage" + std::to_string(t + 1) + ".";
    StageSlots stage{};
    stage.down_w = conv(prefix + "down.weight", c, in, 3);
    stage.down_b = bias(prefix + "down.bias", c);
    if (config_.use_cba) {
      const int hidden = c / config_.reduction;
      CbaSlots cba{};
      cba.reduce_w = conv(prefix + "cba.reduce.weight", hidden, c, 1, 1.0);
      cba.reduce_b = bias(prefix + "cba.reduce.bias", hidden);
      cba.expand_w = conv(prefix + "cba.expand.weight", c, hidden, 1, 1.0);
      cba.expand_b = bias(prefix + "cba.expand.bias", c);
      cba.spatial_w = conv(prefix + "cba.spatial.weight", 1, 2, 5, 1.0);
      cba.spatial_b = bias(prefix + "cba.spatial.bias", 1);
      stage.cba = cba;
    }
    for (int k = 0; k < 2; ++k) {
      const std::string block = prefix + "aba" + std::to_string(k + 1) + ".";
      stage.aba[k].first = params_.size();
      if (config_.use_agt) {
        // gamma starts near 1 so the block initially passes the normalized features.
        conv(block + "agt.gamma.weight", c, a, 3, 1.0);
        bias(block + "agt.gamma.bias", c, 1.0);
        conv(block + "agt.beta.weight", c, a, 3, 1.0);
        bias(block + "agt.beta.bias", c);
      } else {
        bias(block + "bn.scale", c, 1.0);
        bias(block + "bn.shift", c);
      }
      conv(block + "conv.weight", c, c, 3);
      bias(block + "conv.bias", c);
      stage.aba[k].count = params_.size() - stage.aba[k].first;
      stats_.push_back(BatchNormStats{Tensor::zeros(Shape{1, c, 1, 1}),
                                      Tensor::full(Shape{1, c, 1, 1}, 1.0)});
    }
    stages_.push_back(stage);
    in = c;
  }
  const int d = config_.feature_dim();
  head_w_ = conv("head.fc.weight", 1, d, 1, 1.0);
  head_b_ = bias("head.fc.bias", 1);
}

std::size_t Model::add_parameter(const std::string& name, Shape shape, std::vector<double> values) {
  params_.push_back(NamedTensor{name, Tensor::parameter(shape, std::move(values))});
  return params_.size() - 1;
}

std::vector<Tensor> Model::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void Model::set_parameters(std::span<const Tensor> values) {
  if (values.size() != params_.size()) {
    throw ConfigError("set_parameters: expected " + std::to_string(params_.size()) +
                      " tensors, got " + std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i].value.shape()) {
      throw ShapeError("set_parameters: shape mismatch for " + params_[i].name);
    }
    params_[i].value = values[i].detach_parameter();
  }
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

CbaParams Model::cba_params(std::span<const Tensor> p, const CbaSlots& s) const {
  return CbaParams{p[s.reduce_w], p[s.reduce_b], p[s.expand_w],
                   p[s.expand_b], p[s.spatial_w], p[s.spatial_b]};
}

AbaParams Model::aba_params(std::span<const Tensor> p, const AbaSlots& s) const {
  AbaParams out;
  std::size_t i = s.first;
  if (config_.use_agt) {
    out.gamma_weight = p[i++];
    out.gamma_bias = p[i++];
    out.beta_weight = p[i++];
    out.beta_bias = p[i++];
  } else {
    out.bn_scale = p[i++];
    out.bn_shift = p[i++];
  }
  out.conv_weight = p[i++];
  out.conv_bias = p[i++];
  return out;
}

QualityOutput Model::forward(const Tensor& images, std::span<const SegmentationMap> maps,
                             Mode mode, ForwardTrace* trace) {
  std::vector<Tensor> own = parameter_tensors();
  return run(own, images, maps, mode, mode == Mode::train, trace);
}

QualityOutput Model::forward_with(std::span<const Tensor> params, const Tensor& images,
                                  std::span<const SegmentationMap> maps, Mode mode,
                                  ForwardTrace* trace) {
  return run(params, images, maps, mode, mode == Mode::train, trace);
}

QualityOutput Model::predict(const Tensor& images, std::span<const SegmentationMap> maps) const {
  std::vector<Tensor> own = parameter_tensors();
  return run(own, images, maps, Mode::eval, false, nullptr);
}

QualityOutput Model::run(std::span<const Tensor> params, const Tensor& images,
                         std::span<const SegmentationMap> maps, Mode mode, bool update_stats,
                         ForwardTrace* trace) const {
  if (params.size() != params_.size()) {
    throw ConfigError("forward: expected " + std::to_string(params_.size()) +
                      " parameter tensors, got " + std::to_string(params.size()));
  }
  const Shape& s = images.shape();
  const int size = config_.input_size;
  if (s.c != 3 || s.h != size || s.w != size) {
    throw ShapeError("model expects (N, 3, " + std::to_string(size) + ", " +
                     std::to_string(size) + ") input, got " + s.str());
  }
  std::vector<SegmentationMap> fallback;
  if (maps.empty()) {
    spdlog::warn("no segmentation maps supplied; using a uniform single-class map for {} images",
                 s.n);
    fallback.assign(s.n, SegmentationMap::uniform(size, size, config_.num_attributes));
    maps = fallback;
  }
  if (static_cast<int>(maps.size()) != s.n) {
    throw ShapeError("expected " + std::to_string(s.n) + " segmentation maps, got " +
                     std::to_string(maps.size()));
  }
  for (const auto& m : maps) {
    if (m.num_attributes() != config_.num_attributes) {
      throw ConfigError("segmentation map declares " + std::to_string(m.num_attributes()) +
                        " attributes, model expects " + std::to_string(config_.num_attributes));
    }
  }

  std::map<std::pair<int, int>, Tensor> one_hot_cache;
  auto segmentation_at = [&](int h, int w) {
    auto key = std::make_pair(h, w);
    auto it = one_hot_cache.find(key);
    if (it == one_hot_cache.end()) {
      it = one_hot_cache.emplace(key, one_hot_batch(maps, h, w)).first;
    }
    return it->second;
  };

  Tensor x = relu(conv2d(images, params[stem_w_], params[stem_b_], 1, 1));
  std::vector<Tensor> pooled;
  std::size_t bn = 0;
  for (const auto& stage : stages_) {
    x = relu(conv2d(x, params[stage.down_w], params[stage.down_b], 2, 1));
    if (stage.cba) {
      CbaResult cba = cba_forward(x, cba_params(params, *stage.cba));
      if (trace) trace->attention.push_back(cba.attention);
      x = cba.output;
    }
    const Shape& xs = x.shape();
    Tensor seg = config_.use_agt ? segmentation_at(xs.h, xs.w) : Tensor();
    for (int k = 0; k < 2; ++k) {
      BatchNormStats* stats = &stats_[bn++];
      if (mode == Mode::train && !update_stats) stats = nullptr;
      AbaResult aba = aba_forward(x, seg, aba_params(params, stage.aba[k]), stats, mode,
                                  config_.bn_epsilon, config_.bn_momentum);
      if (trace) trace->attribute_outputs.push_back(aba.output);
      // The even-indexed output leaves the stage; the odd one is rectified
      // before the second block.
      x = (k == 0) ? relu(aba.output) : aba.output;
    }
    pooled.push_back(mean_to(x, Shape{xs.n, xs.c, 1, 1}));
  }
  Tensor features = concat(pooled, 1);
  Tensor score = conv2d(features, params[head_w_], params[head_b_], 1, 0);
  if (!all_finite(score)) throw NumericalError("non-finite quality score");
  return QualityOutput{score, features};
}

}  // namespace attgf
