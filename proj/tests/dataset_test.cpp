#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "attgf/dataset.hpp"
#include "attgf/errors.hpp"

using namespace attgf;
namespace fs = std::filesystem;

namespace {

std::vector<ScoredImage> scored(int n, int domain = 0, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ScoredImage> v;
  for (int i = 0; i < n; ++i) v.push_back({i, domain, "img" + std::to_string(i), "", u(rng)});
  return v;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("attgf_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = (i + j) / 2.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) ma += ra[i], mb += rb[i];
  ma /= ra.size();
  mb /= rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Mean squared finite-difference gradient of the gray image, relative to its
// intensity variance so that content contrast cancels.
double gradient_energy(const Image& im) {
  double e = 0, s = 0, s2 = 0;
  for (int y = 0; y + 1 < im.height; ++y)
    for (int x = 0; x + 1 < im.width; ++x) {
      auto g = [&](int yy, int xx) {
        return (im.at(yy, xx, 0) + im.at(yy, xx, 1) + im.at(yy, xx, 2)) / 3.0;
      };
      double gx = g(y, x + 1) - g(y, x), gy = g(y + 1, x) - g(y, x);
      e += gx * gx + gy * gy;
      s += g(y, x);
      s2 += g(y, x) * g(y, x);
    }
  const double n = (im.height - 1) * (im.width - 1);
  return (e / n) / (s2 / n - (s / n) * (s / n));
}

}  // namespace

TEST(QualityLevelsTest, EqualBlocks) {
  auto levels = assign_quality_levels(scored(15000), 3);
  ASSERT_EQ(levels.size(), 3u);
  for (const auto& l : levels) EXPECT_EQ(l.size(), 5000u);
  auto nine = assign_quality_levels(scored(9), 3);
  for (const auto& l : nine) EXPECT_EQ(l.size(), 3u);
  auto ten = assign_quality_levels(scored(11), 3);
  EXPECT_EQ(ten[0].size(), 4u);
  EXPECT_EQ(ten[1].size(), 4u);
  EXPECT_EQ(ten[2].size(), 3u);
}

TEST(QualityLevelsTest, SortedAndMembershipPreserved) {
  auto input = scored(101, 0, 7);
  auto levels = assign_quality_levels(input, 3);
  std::vector<ScoredImage> flat;
  for (const auto& l : levels) flat.insert(flat.end(), l.begin(), l.end());
  for (std::size_t i = 1; i < flat.size(); ++i) EXPECT_GE(flat[i - 1].pseudo_mos, flat[i].pseudo_mos);
  std::multiset<std::int64_t> a, b;
  for (const auto& im : input) a.insert(im.stable_id);
  for (const auto& im : flat) b.insert(im.stable_id);
  EXPECT_EQ(a, b);
}

TEST(QualityLevelsTest, TiesBrokenByStableId) {
  std::vector<ScoredImage> v{{5, 0, "a", "", 1.0}, {2, 0, "b", "", 1.0}, {9, 0, "c", "", 1.0}};
  auto first = assign_quality_levels(v, 3);
  std::reverse(v.begin(), v.end());
  auto second = assign_quality_levels(v, 3);
  EXPECT_EQ(first[0][0].stable_id, 2);
  EXPECT_EQ(first[1][0].stable_id, 5);
  EXPECT_EQ(first, second);
  EXPECT_THROW(assign_quality_levels({}, 3), PreconditionError);
}

TEST(BuildPairsTest, FullScalePlan) {
  auto start = std::chrono::steady_clock::now();
  auto levels = assign_quality_levels(scored(15000), 3);
  auto pairs = build_pairs(levels, PairPlan{});
  double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 10.0);
  ASSERT_EQ(pairs.size(), 50000u);

  std::map<std::int64_t, int> level_of;
  std::map<std::int64_t, double> mos;
  for (int l = 0; l < 3; ++l)
    for (const auto& im : levels[l]) level_of[im.stable_id] = l, mos[im.stable_id] = im.pseudo_mos;
  std::set<std::int64_t> anchors;
  std::set<std::pair<std::int64_t, std::int64_t>> unique;
  for (const auto& p : pairs) {
    anchors.insert(p.anchor_id);
    EXPECT_EQ(std::abs(level_of[p.anchor_id] - level_of[p.partner_id]), 1);
    EXPECT_EQ(level_of[p.partner_id], 1);
    EXPECT_NE(mos[p.anchor_id], mos[p.partner_id]);
    EXPECT_EQ(p.label, level_of[p.anchor_id] == 0 ? 1 : 0);
    EXPECT_EQ(p.label, mos[p.anchor_id] >= mos[p.partner_id] ? 1 : 0);
    unique.insert({p.anchor_id, p.partner_id});
  }
  EXPECT_EQ(anchors.size(), 100u);
  EXPECT_EQ(unique.size(), pairs.size());
}

TEST(BuildPairsTest, FourDomainsGiveTwoHundredThousandPairs) {
  std::size_t total = 0;
  for (int d = 0; d < 4; ++d) {
    total += build_pairs(assign_quality_levels(scored(15000, d, d + 10), 3), PairPlan{}).size();
  }
  EXPECT_EQ(total, 200000u);
}

TEST(BuildPairsTest, SizeAndCrossingHoldForRandomPlans) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 30; ++t) {
    int n = std::uniform_int_distribution<int>(9, 300)(rng);
    auto levels = assign_quality_levels(scored(n, t, t), 3);
    PairPlan plan;
    plan.top_k = std::uniform_int_distribution<int>(0, static_cast<int>(levels[0].size()))(rng);
    plan.bottom_k = std::uniform_int_distribution<int>(0, static_cast<int>(levels[2].size()))(rng);
    plan.per_anchor = std::uniform_int_distribution<int>(1, static_cast<int>(levels[1].size()))(rng);
    plan.seed = t;
    auto pairs = build_pairs(levels, plan);
    EXPECT_EQ(pairs.size(), static_cast<std::size_t>((plan.top_k + plan.bottom_k) * plan.per_anchor));
    for (const auto& p : pairs) EXPECT_EQ(p.domain_id, t);
  }
}

TEST(BuildPairsTest, RejectsOversizedPlans) {
  auto levels = assign_quality_levels(scored(30), 3);
  PairPlan plan;
  plan.top_k = 5;
  plan.bottom_k = 5;
  plan.per_anchor = 11;
  EXPECT_THROW(build_pairs(levels, plan), ConfigError);
  plan.per_anchor = 10;
  plan.top_k = 11;
  EXPECT_THROW(build_pairs(levels, plan), ConfigError);
}

TEST(BuildPairsTest, DeterministicPairFiles) {
  fs::path dir = scratch("determinism");
  auto levels = assign_quality_levels(scored(600), 3);
  PairPlan plan{3, 20, 20, 50, 99};
  write_pairs(dir / "a.csv", build_pairs(levels, plan));
  write_pairs(dir / "b.csv", build_pairs(levels, plan));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  plan.seed = 100;
  write_pairs(dir / "c.csv", build_pairs(levels, plan));
  EXPECT_NE(slurp(dir / "a.csv"), slurp(dir / "c.csv"));
}

TEST(ManifestTest, RoundTripAndErrors) {
  fs::path dir = scratch("manifest");
  std::vector<ScoredImage> items;
  for (int i = 0; i < 10; ++i) {
    fs::path img = dir / ("i" + std::to_string(i) + ".ppm");
    write_pnm(img, Image(4, 4, 3));
    items.push_back({i, i % 2, img, "", 0.1 * i - 1.0 / 3.0});
  }
  write_manifest(dir / "m.csv", items);
  auto loaded = load_manifest(dir / "m.csv");
  EXPECT_EQ(loaded, items);
  write_manifest(dir / "m2.csv", loaded);
  EXPECT_EQ(slurp(dir / "m.csv"), slurp(dir / "m2.csv"));

  std::vector<TrainPair> pairs;
  for (int i = 0; i < 10; ++i) pairs.push_back({i, i + 100, i % 2, 3});
  write_pairs(dir / "p.csv", pairs);
  EXPECT_EQ(load_pairs(dir / "p.csv"), pairs);
  write_pairs(dir / "p2.csv", load_pairs(dir / "p.csv"));
  EXPECT_EQ(slurp(dir / "p.csv"), slurp(dir / "p2.csv"));

  write_manifest(dir / "empty.csv", {});
  EXPECT_TRUE(load_manifest(dir / "empty.csv").empty());

  items[3].image_path = dir / "absent.ppm";
  write_manifest(dir / "missing.csv", items);
  try {
    load_manifest(dir / "missing.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("absent.ppm"), std::string::npos);
  }

  std::ofstream(dir / "dup.csv") << kManifestMagic << "\nstable_id,domain,image_path,seg_path,pseudo_mos\n"
                                 << "1,0,i0.ppm,,0.5\n1,0,i1.ppm,,0.7\n";
  try {
    load_manifest(dir / "dup.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 4"), std::string::npos);
  }
  std::ofstream(dir / "bad.csv") << kManifestMagic << "\nstable_id,domain,image_path,seg_path,pseudo_mos\n"
                                 << "1,0,i0.ppm,,abc\n";
  EXPECT_THROW(load_manifest(dir / "bad.csv"), DataError);
  std::ofstream(dir / "nomagic.csv") << "stable_id,domain,image_path,seg_path,pseudo_mos\n";
  EXPECT_THROW(load_manifest(dir / "nomagic.csv"), DataError);
  EXPECT_THROW(load_manifest(dir / "nothing_here.csv"), DataError);
}

TEST(ImageIoTest, PnmRoundTrip) {
  fs::path dir = scratch("pnm");
  SynthFace face = render_face(3, 24);
  write_pnm(dir / "f.ppm", face.image);
  write_pnm(dir / "f.pgm", face.labels);
  EXPECT_EQ(read_pnm(dir / "f.ppm").pixels, face.image.pixels);
  Image labels = read_pnm(dir / "f.pgm");
  EXPECT_EQ(labels.channels, 1);
  EXPECT_EQ(labels.pixels, face.labels.pixels);
  std::set<int> classes(face.labels.pixels.begin(), face.labels.pixels.end());
  EXPECT_EQ(classes.size(), static_cast<std::size_t>(kSynthAttributes));
  std::ofstream(dir / "junk.ppm") << "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(read_pnm(dir / "junk.ppm"), DataError);
}

TEST(DegradeTest, ZeroSeverityIsIdentityAndOthersChangeTheImage) {
  SynthFace face = render_face(11, 32);
  for (auto d : {Degradation::blur, Degradation::noise, Degradation::block, Degradation::downsample}) {
    EXPECT_EQ(degrade(face.image, d, 0.0, 1).pixels, face.image.pixels);
    EXPECT_NE(degrade(face.image, d, 0.8, 1).pixels, face.image.pixels) << to_string(d);
    EXPECT_EQ(parse_degradation(to_string(d)), d);
  }
  EXPECT_THROW(parse_degradation("jpeg2000"), ConfigError);
  EXPECT_THROW(degrade(face.image, Degradation::blur, 1.5, 1), PreconditionError);
}

TEST(SynthCorpusTest, LevelsSeverityAndSharpnessOracle) {
  fs::path dir = scratch("synth");
  SynthConfig config;
  config.n_per_domain = 300;
  config.degradations = {Degradation::blur, Degradation::noise};
  config.seed = 4;
  auto items = synth_corpus(config, dir);
  ASSERT_EQ(items.size(), 600u);
  EXPECT_EQ(load_manifest(dir / "manifest.csv"), items);

  auto domains = group_by_domain(items);
  auto levels = assign_quality_levels(domains[0], 3);
  for (const auto& l : levels) EXPECT_EQ(l.size(), 100u);
  for (const auto& im : domains[0]) {
    EXPECT_LE(im.pseudo_mos, 0.0);
    EXPECT_GE(im.pseudo_mos, -1.0);
  }

  std::vector<double> mos, sharpness;
  for (const auto& im : domains[0]) {
    mos.push_back(im.pseudo_mos);
    sharpness.push_back(gradient_energy(read_pnm(im.image_path)));
  }
  EXPECT_GE(spearman(mos, sharpness), 0.9);
}

TEST(ImageBankTest, LoadsNormalizedBatches) {
  fs::path dir = scratch("bank");
  SynthConfig config;
  config.n_per_domain = 4;
  config.degradations = {Degradation::block};
  config.image_size = 16;
  auto items = synth_corpus(config, dir);
  ImageBank bank(8, 19);
  bank.add_all(items);
  EXPECT_EQ(bank.size(), 4u);
  std::vector<ImageBank::Key> keys{{0, 2}, {0, 0}};
  Tensor batch = bank.images(keys);
  EXPECT_EQ(batch.shape(), (Shape{2, 3, 8, 8}));
  for (double v : batch.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  auto maps = bank.maps(keys);
  EXPECT_EQ(maps[0].height(), 8);
  EXPECT_THROW(bank.images(std::vector<ImageBank::Key>{{1, 0}}), DataError);

  ImageBank narrow(8, 3);
  EXPECT_THROW(narrow.add(items[0]), DataError);
}
