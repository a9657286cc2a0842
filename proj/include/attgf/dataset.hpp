#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "attgf/image_io.hpp"
#include "attgf/model.hpp"

namespace attgf {

struct ScoredImage {
  std::int64_t stable_id = 0;
  int domain_id = 0;
  std::filesystem::path image_path;
  std::filesystem::path seg_path;  // empty when no parsing map exists
  double pseudo_mos = 0.0;

  bool operator==(const ScoredImage&) const = default;
};

// label = 1 iff pseudo_mos(anchor) >= pseudo_mos(partner).
struct TrainPair {
  std::int64_t anchor_id = 0;
  std::int64_t partner_id = 0;
  int label = 0;
  int domain_id = 0;

  bool operator==(const TrainPair&) const = default;
};

struct PairPlan {
  int n_levels = 3;
  int top_k = 50;
  int bottom_k = 50;
  int per_anchor = 500;
  std::uint64_t seed = 0;

  void validate() const;
};

// Sorts by pseudo-MOS descending (ties by stable_id) and cuts n_levels
// contiguous blocks; the remainder goes to the earliest levels.
std::vector<std::vector<ScoredImage>> assign_quality_levels(std::vector<ScoredImage> images,
                                                            int n_levels);

// Head of the first level and tail of the last level, each paired with
// distinct partners drawn from the middle level.
std::vector<TrainPair> build_pairs(const std::vector<std::vector<ScoredImage>>& levels,
                                   const PairPlan& plan);

std::map<int, std::vector<ScoredImage>> group_by_domain(std::span<const ScoredImage> images);

inline constexpr const char* kManifestMagic = "#attgf-manifest v1";
inline constexpr const char* kPairsMagic = "#attgf-pairs v1";

// Relative paths are resolved against the manifest's directory.
std::vector<ScoredImage> load_manifest(const std::filesystem::path& path, bool check_files = true);
void write_manifest(const std::filesystem::path& path, std::span<const ScoredImage> images);

std::vector<TrainPair> load_pairs(const std::filesystem::path& path);
void write_pairs(const std::filesystem::path& path, std::span<const TrainPair> pairs);

enum class Degradation { blur, noise, block, downsample };

std::string to_string(Degradation d);
Degradation parse_degradation(const std::string& name);

// Face-like composite and its parsing labels (0 background, 1 skin, 2 hair,
// 3 eyes, 4 mouth).
inline constexpr int kSynthAttributes = 5;
struct SynthFace {
  Image image;
  Image labels;  // single channel
};
SynthFace render_face(std::uint64_t seed, int size);
// severity in [0, 1]; 0 returns the input unchanged.
Image degrade(const Image& image, Degradation kind, double severity, std::uint64_t seed);

struct SynthConfig {
  int n_per_domain = 300;
  std::vector<Degradation> degradations{Degradation::blur, Degradation::noise, Degradation::block};
  int image_size = 32;
  std::uint64_t seed = 0;
};

// Writes images/, segs/ and manifest.csv under `out_dir`. Domain ids follow
// the order of `degradations`; pseudo_mos = -severity.
std::vector<ScoredImage> synth_corpus(const SynthConfig& config,
                                      const std::filesystem::path& out_dir);

// Decoded, resized model inputs keyed by (domain, stable_id).
class ImageBank {
 public:
  struct Key {
    int domain_id;
    std::int64_t stable_id;
    auto operator<=>(const Key&) const = default;
  };

  ImageBank(int input_size, int num_attributes);

  void add(const ScoredImage& image);
  void add_all(std::span<const ScoredImage> images);
  bool contains(Key key) const { return entries_.count(key) > 0; }
  const ScoredImage& info(Key key) const;
  std::size_t size() const { return entries_.size(); }
  int input_size() const { return input_size_; }

  // (N, 3, S, S) with pixels mapped to [-1, 1].
  Tensor images(std::span<const Key> keys) const;
  std::vector<SegmentationMap> maps(std::span<const Key> keys) const;

 private:
  struct Entry {
    ScoredImage info;
    std::vector<double> pixels;  // planar CHW
    SegmentationMap map;
  };
  const Entry& entry(Key key) const;

  int input_size_;
  int num_attributes_;
  std::map<Key, Entry> entries_;
};

}  // namespace attgf
