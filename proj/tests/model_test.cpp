#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <thread>

#include "attgf/errors.hpp"
#include "attgf/model.hpp"
#include "attgf/ops.hpp"
#include "gradcheck.hpp"
#include "reference_blocks.hpp"

namespace attgf {
namespace {

using namespace ops;
using testing::random_tensor;

CbaParams random_cba(std::mt19937_64& rng, int c, int r) {
  int hidden = c / r;
  return CbaParams{random_tensor(rng, {hidden, c, 1, 1}), random_tensor(rng, {1, hidden, 1, 1}),
                   random_tensor(rng, {c, hidden, 1, 1}), random_tensor(rng, {1, c, 1, 1}),
                   random_tensor(rng, {1, 2, 5, 5}),      random_tensor(rng, {1, 1, 1, 1})};
}

AbaParams random_aba(std::mt19937_64& rng, int c, int a) {
  AbaParams p;
  p.gamma_weight = random_tensor(rng, {c, a, 3, 3});
  p.gamma_bias = random_tensor(rng, {1, c, 1, 1});
  p.beta_weight = random_tensor(rng, {c, a, 3, 3});
  p.beta_bias = random_tensor(rng, {1, c, 1, 1});
  p.conv_weight = random_tensor(rng, {c, c, 3, 3});
  p.conv_bias = random_tensor(rng, {1, c, 1, 1});
  return p;
}

SegmentationMap random_map(std::mt19937_64& rng, int h, int w, int a) {
  std::uniform_int_distribution<int> dist(0, a - 1);
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(h) * w);
  for (auto& l : labels) l = static_cast<std::uint8_t>(dist(rng));
  return SegmentationMap(h, w, a, std::move(labels));
}

ModelConfig small_config() {
  ModelConfig c;
  c.num_stages = 4;
  c.stage_channels = {8, 8, 16, 16};
  c.stem_channels = 8;
  c.reduction = 4;
  c.num_attributes = 5;
  c.input_size = 32;
  c.init_seed = 7;
  return c;
}

Tensor random_images(std::mt19937_64& rng, int n, int size) {
  return random_tensor(rng, {n, 3, size, size}, -1, 1, false);
}

std::vector<SegmentationMap> random_maps(std::mt19937_64& rng, int n, int size, int a) {
  std::vector<SegmentationMap> maps;
  for (int i = 0; i < n; ++i) maps.push_back(random_map(rng, size, size, a));
  return maps;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.data()[i], b.data()[i], tol) << "at " << i;
}

TEST(CbaTest, PreservesShape) {
  std::mt19937_64 rng(1);
  Tensor f = random_tensor(rng, {2, 64, 32, 32}, -1, 1, false);
  CbaResult r = cba_forward(f, random_cba(rng, 64, 16));
  EXPECT_EQ(r.output.shape(), (Shape{2, 64, 32, 32}));
  EXPECT_EQ(r.attention.channel_map.shape(), (Shape{2, 64, 1, 1}));
  EXPECT_EQ(r.attention.spatial_map.shape(), (Shape{2, 1, 32, 32}));
}

TEST(CbaTest, ShapePreservationProperty) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 9);
  for (int trial = 0; trial < 25; ++trial) {
    int r = dim(rng) % 3 + 1;
    int c = r * dim(rng);
    Shape s{dim(rng) % 3 + 1, c, dim(rng), dim(rng)};
    CbaResult out = cba_forward(random_tensor(rng, s, -2, 2, false), random_cba(rng, c, r));
    EXPECT_EQ(out.output.shape(), s);
    for (double v : out.attention.channel_map.data()) ASSERT_TRUE(v > 0 && v < 1);
    for (double v : out.attention.spatial_map.data()) ASSERT_TRUE(v > 0 && v < 1);
  }
}

TEST(CbaTest, ZeroSpatialMapLeavesChannelAttention) {
  std::mt19937_64 rng(2);
  Tensor f = random_tensor(rng, {2, 8, 6, 6}, -1, 1, false);
  CbaResult r = cba_forward(f, random_cba(rng, 8, 2), CbaHooks{.spatial_override = 0.0});
  ASSERT_EQ(r.output.shape(), r.channel_attended.shape());
  for (std::size_t i = 0; i < r.output.size(); ++i) {
    EXPECT_EQ(r.output.data()[i], r.channel_attended.data()[i]);
  }
}

TEST(CbaTest, HandWeightsGiveChannelMeanDescriptor) {
  // Identity bottleneck with zero biases: W_c = sigmoid(mean of each channel).
  Tensor f = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 6, -1, -1, 0, 2});
  CbaParams p{Tensor::from_data({2, 2, 1, 1}, {1, 0, 0, 1}), Tensor::zeros({1, 2, 1, 1}),
              Tensor::from_data({2, 2, 1, 1}, {1, 0, 0, 1}), Tensor::zeros({1, 2, 1, 1}),
              Tensor::full({1, 2, 5, 5}, 0.1),              Tensor::zeros({1, 1, 1, 1})};
  CbaResult r = cba_forward(f, p);
  EXPECT_NEAR(r.attention.channel_map.data()[0], testing::sigmoid_scalar(3.0), 1e-15);
  EXPECT_NEAR(r.attention.channel_map.data()[1], testing::sigmoid_scalar(0.0), 1e-15);
  testing::Volume want = testing::reference_cba(testing::to_volume(f), p);
  for (std::size_t i = 0; i < want.v.size(); ++i) EXPECT_NEAR(r.output.data()[i], want.v[i], 1e-12);
}

TEST(CbaTest, RejectsIndivisibleReduction) {
  std::mt19937_64 rng(3);
  CbaParams p = random_cba(rng, 8, 4);
  EXPECT_THROW(cba_forward(random_tensor(rng, {1, 6, 4, 4}), p), ConfigError);
  ModelConfig c = small_config();
  c.reduction = 3;
  EXPECT_THROW(Model{c}, ConfigError);
}

TEST(AbaTest, IdentityAffineReducesToTrailingConv) {
  std::mt19937_64 rng(4);
  const int a = 4;
  Tensor v = random_tensor(rng, {2, 6, 5, 5}, -3, 3, false);
  AbaParams p = random_aba(rng, 6, a);
  std::vector<SegmentationMap> maps = random_maps(rng, 2, 5, a);
  BatchNormStats stats{Tensor::zeros({1, 6, 1, 1}), Tensor::full({1, 6, 1, 1}, 1.0)};
  AbaResult r = aba_forward(v, maps, p, &stats, Mode::train, 1e-5, 0.1, AbaHooks{.identity_affine = true});
  Tensor want = conv2d(r.normalized, p.conv_weight, p.conv_bias, 1, 1);
  expect_close(r.output, want, 0.0);
}

TEST(AbaTest, ConstantChannelNormalizesToZero) {
  std::mt19937_64 rng(5);
  std::vector<double> values(2 * 3 * 4 * 4);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (auto& x : values) x = dist(rng);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 16; ++i) values[(n * 3 + 1) * 16 + i] = 7.0;
  Tensor v = Tensor::from_data({2, 3, 4, 4}, values);
  Tensor norm = batch_norm(v, nullptr, Mode::train, 1e-5, 0.1);
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) EXPECT_LT(std::abs(norm.at(n, 1, y, x)), 1e-2);
}

TEST(AbaTest, AffineMapsFollowFeatureResolution) {
  std::mt19937_64 rng(6);
  const int a = 19;
  Tensor v = random_tensor(rng, {2, 8, 16, 16}, -1, 1, false);
  std::vector<SegmentationMap> maps = random_maps(rng, 2, 64, a);
  BatchNormStats stats{Tensor::zeros({1, 8, 1, 1}), Tensor::full({1, 8, 1, 1}, 1.0)};
  AbaResult r = aba_forward(v, maps, random_aba(rng, 8, a), &stats, Mode::train, 1e-5, 0.1);
  EXPECT_EQ(r.gamma.shape(), (Shape{2, 8, 16, 16}));
  EXPECT_EQ(r.beta.shape(), (Shape{2, 8, 16, 16}));
  EXPECT_EQ(r.output.shape(), (Shape{2, 8, 16, 16}));
}

TEST(AbaTest, TrainModeNormalizationStatistics) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor v = random_tensor(rng, {3, 4, 5, 6}, -5, 9, false);
    Tensor norm = batch_norm(v, nullptr, Mode::train, 1e-5, 0.1);
    Tensor mu = mean_to(norm, {1, 4, 1, 1});
    Tensor var = mean_to(square(sub(norm, mu)), {1, 4, 1, 1});
    for (int c = 0; c < 4; ++c) {
      EXPECT_LT(std::abs(mu.data()[c]), 1e-4);
      EXPECT_NEAR(var.data()[c], 1.0, 1e-3);
    }
  }
}

TEST(AbaTest, RejectsOutOfRangeLabelsAndTinyBatches) {
  EXPECT_THROW(SegmentationMap(2, 2, 3, {0, 1, 2, 3}), DataError);
  Tensor one = Tensor::zeros({1, 2, 1, 1});
  EXPECT_THROW(batch_norm(one, nullptr, Mode::train, 1e-5, 0.1), PreconditionError);
}

TEST(AbaTest, NearestResizeKeepsLabels) {
  SegmentationMap m(2, 2, 4, {0, 1, 2, 3});
  SegmentationMap big = m.resized(4, 4);
  EXPECT_EQ(big.label(0, 0), 0);
  EXPECT_EQ(big.label(1, 3), 1);
  EXPECT_EQ(big.label(3, 0), 2);
  EXPECT_EQ(big.label(3, 3), 3);
  Tensor oh = one_hot_batch(std::span<const SegmentationMap>(&m, 1), 3, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      double total = 0;
      for (int c = 0; c < 4; ++c) total += oh.at(0, c, y, x);
      EXPECT_EQ(total, 1.0);
    }
}

TEST(BlockOracleTest, VectorizedMatchesScalarLoops) {
  std::mt19937_64 rng(8);
  const int a = 3;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor f = random_tensor(rng, {1, 4, 4, 4}, -2, 2, false);
    CbaParams cp = random_cba(rng, 4, 2);
    AbaParams ap = random_aba(rng, 4, a);
    std::vector<SegmentationMap> maps = random_maps(rng, 1, 4, a);

    CbaResult cba = cba_forward(f, cp);
    testing::Volume ref_v = testing::reference_cba(testing::to_volume(f), cp);
    for (std::size_t i = 0; i < ref_v.v.size(); ++i) ASSERT_NEAR(cba.output.data()[i], ref_v.v[i], 1e-6);

    Tensor onehot = one_hot_batch(maps, 4, 4);
    AbaResult aba = aba_forward(cba.output, onehot, ap, nullptr, Mode::train, 1e-5, 0.1);
    testing::Volume ref_att = testing::reference_aba(ref_v, testing::to_volume(onehot), ap, 1e-5);
    for (std::size_t i = 0; i < ref_att.v.size(); ++i) ASSERT_NEAR(aba.output.data()[i], ref_att.v[i], 1e-6);
  }
}

TEST(ModelTest, BatchedOutputs) {
  std::mt19937_64 rng(9);
  Model model(small_config());
  auto maps = random_maps(rng, 3, 32, 5);
  ForwardTrace trace;
  QualityOutput out = model.forward(random_images(rng, 3, 32), maps, Mode::train, &trace);
  EXPECT_EQ(out.score.shape(), (Shape{3, 1, 1, 1}));
  EXPECT_EQ(out.features.shape(), (Shape{3, 48, 1, 1}));
  EXPECT_EQ(trace.attribute_outputs.size(), 8u);
  EXPECT_EQ(trace.attention.size(), 4u);
  for (int i = 1; i < 8; i += 2) {
    // Q is assembled from the pooled even-indexed attribute outputs.
    const Tensor& att = trace.attribute_outputs[i];
    Tensor pooled = mean_to(att, {3, att.shape().c, 1, 1});
    int offset = 0;
    for (int k = 0; k < i / 2; ++k) offset += small_config().stage_channels[k];
    for (int n = 0; n < 3; ++n)
      for (int c = 0; c < att.shape().c; ++c)
        EXPECT_DOUBLE_EQ(out.features.at(n, offset + c, 0, 0), pooled.at(n, c, 0, 0));
  }
}

TEST(ModelTest, DefaultWidthsGiveNineSixtyFeatures) {
  ModelConfig c;
  EXPECT_EQ(c.feature_dim(), 960);
  c.input_size = 32;
  c.num_attributes = 4;
  std::mt19937_64 rng(10);
  Model model(c);
  QualityOutput out = model.predict(random_images(rng, 1, 32), random_maps(rng, 1, 32, 4));
  EXPECT_EQ(out.features.shape(), (Shape{1, 960, 1, 1}));
}

TEST(ModelTest, FullResolutionForward) {
  ModelConfig c;
  c.stage_channels = {8, 8, 16, 16};
  c.stem_channels = 8;
  c.reduction = 4;
  std::mt19937_64 rng(12);
  Model model(c);
  QualityOutput out = model.predict(random_images(rng, 1, 256), random_maps(rng, 1, 256, 19));
  EXPECT_EQ(out.score.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_THROW(model.predict(random_images(rng, 1, 128), {}), ShapeError);
}

TEST(ModelTest, EvalModeIsDeterministic) {
  std::mt19937_64 rng(13);
  Model model(small_config());
  Tensor images = random_images(rng, 2, 32);
  auto maps = random_maps(rng, 2, 32, 5);
  model.forward(images, maps, Mode::train);  // move running statistics off init
  QualityOutput a = model.predict(images, maps);
  QualityOutput b = model.predict(images, maps);
  for (std::size_t i = 0; i < a.score.size(); ++i) EXPECT_EQ(a.score.data()[i], b.score.data()[i]);
}

TEST(ModelTest, ConcurrentEvalMatchesSerial) {
  std::mt19937_64 rng(14);
  const Model model(small_config());
  Tensor images = random_images(rng, 2, 32);
  auto maps = random_maps(rng, 2, 32, 5);
  QualityOutput serial = model.predict(images, maps);
  std::vector<std::vector<double>> results(4);
  std::vector<std::thread> workers;
  for (int t = 0; t < 4; ++t) {
    workers.emplace_back([&, t] {
      QualityOutput o = model.predict(images, maps);
      results[t].assign(o.score.data().begin(), o.score.data().end());
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i], serial.score.data()[i]);
  }
}

TEST(ModelTest, MissingSegmentationFallsBackToUniformMap) {
  std::mt19937_64 rng(15);
  Model model(small_config());
  Tensor images = random_images(rng, 2, 32);
  std::vector<SegmentationMap> uniform(2, SegmentationMap::uniform(32, 32, 5));
  QualityOutput a = model.predict(images, {});
  QualityOutput b = model.predict(images, uniform);
  expect_close(a.score, b.score, 0.0);
}

TEST(ModelTest, AblationVariants) {
  std::mt19937_64 rng(16);
  ModelConfig full = small_config();
  ModelConfig no_cba = full;
  no_cba.use_cba = false;
  ModelConfig no_aba = full;
  no_aba.use_agt = false;
  Model m_full(full), m_cba(no_cba), m_aba(no_aba);
  EXPECT_LT(m_cba.parameter_count(), m_full.parameter_count());

  Tensor images = random_images(rng, 2, 32);
  auto maps = random_maps(rng, 2, 32, 5);
  QualityOutput a = m_full.predict(images, maps);
  QualityOutput b = m_aba.predict(images, maps);
  bool differs = false;
  for (std::size_t i = 0; i < a.score.size(); ++i) differs |= a.score.data()[i] != b.score.data()[i];
  EXPECT_TRUE(differs);
  // Without AGT the segmentation maps no longer influence the output.
  QualityOutput c = m_aba.predict(images, random_maps(rng, 2, 32, 5));
  expect_close(b.score, c.score, 0.0);
}

ModelConfig miniature_config(std::uint64_t seed) {
  ModelConfig c;
  c.num_stages = 2;
  c.stage_channels = {4, 4};
  c.stem_channels = 4;
  c.reduction = 2;
  c.num_attributes = 3;
  c.input_size = 8;
  c.init_seed = seed;
  return c;
}

TEST(ModelTest, ParameterGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Model model(miniature_config(seed));
    Tensor images = random_images(rng, 2, 8);
    auto maps = random_maps(rng, 2, 8, 3);
    auto loss = [&](const std::vector<Tensor>& p) {
      QualityOutput out = model.forward_with(p, images, maps, Mode::train);
      return add(sum(square(out.score)), scale(sum(out.features), 0.1));
    };
    auto r = testing::grad_check(loss, model.parameter_tensors(), 6, 1e-6, seed);
    EXPECT_LT(r.max_relative_error, 1e-3) << "seed " << seed;
  }
}

TEST(CheckpointTest, RoundTripPreservesPredictionsAndBytes) {
  std::mt19937_64 rng(17);
  Model model(small_config());
  Tensor images = random_images(rng, 2, 32);
  auto maps = random_maps(rng, 2, 32, 5);
  model.forward(images, maps, Mode::train);
  auto dir = std::filesystem::temp_directory_path() / "attgf_ckpt_test";
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> extra{{"center.c0", Tensor::full({1, 48, 1, 1}, 0.25)}};
  save_checkpoint(dir / "a.ckpt", model, extra);
  LoadedCheckpoint loaded = load_checkpoint(dir / "a.ckpt");
  expect_close(model.predict(images, maps).score, loaded.model.predict(images, maps).score, 0.0);
  ASSERT_EQ(loaded.extra.size(), 1u);
  EXPECT_EQ(loaded.extra[0].name, "center.c0");
  save_checkpoint(dir / "b.ckpt", loaded.model, loaded.extra);
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(bytes(dir / "a.ckpt"), bytes(dir / "b.ckpt"));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace attgf
