#include "attgf/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "attgf/errors.hpp"

namespace attgf {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T value{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw DataError(where + ": cannot parse '" + text + "'");
  }
  return value;
}

double parse_double(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw DataError(where + ": cannot parse '" + text + "'");
  return value;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ifstream open_with_magic(const fs::path& path, const char* magic, const char* columns) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != magic) {
    throw DataError(path.string() + ": missing header line '" + magic + "'");
  }
  if (!std::getline(in, line) || line != columns) {
    throw DataError(path.string() + ": expected column line '" + columns + "'");
  }
  return in;
}

constexpr const char* kManifestColumns = "stable_id,domain,image_path,seg_path,pseudo_mos";
constexpr const char* kPairsColumns = "anchor_id,partner_id,label,domain";

std::string relative_to(const fs::path& p, const fs::path& base) {
  if (p.empty()) return "";
  fs::path rel = p.lexically_relative(base);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

}  // namespace

void PairPlan::validate() const {
  if (n_levels < 3) throw ConfigError("pair plan needs at least 3 quality levels");
  if (top_k < 0 || bottom_k < 0 || per_anchor < 1) {
    throw ConfigError("pair plan counts must be non-negative with per_anchor >= 1");
  }
}

std::vector<std::vector<ScoredImage>> assign_quality_levels(std::vector<ScoredImage> images,
                                                            int n_levels) {
  if (images.empty()) throw PreconditionError("cannot assign quality levels to an empty list");
  if (n_levels < 1) throw ConfigError("n_levels must be positive");
  for (const auto& im : images) {
    if (!std::isfinite(im.pseudo_mos)) {
      throw DataError("non-finite pseudo-MOS for stable_id " + std::to_string(im.stable_id));
    }
  }
  std::sort(images.begin(), images.end(), [](const ScoredImage& a, const ScoredImage& b) {
    if (a.pseudo_mos != b.pseudo_mos) return a.pseudo_mos > b.pseudo_mos;
    return a.stable_id < b.stable_id;
  });
  const std::size_t base = images.size() / n_levels;
  const std::size_t extra = images.size() % n_levels;
  std::vector<std::vector<ScoredImage>> levels(n_levels);
  std::size_t pos = 0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    std::size_t count = base + (l < extra ? 1 : 0);
    levels[l].assign(images.begin() + static_cast<std::ptrdiff_t>(pos),
                     images.begin() + static_cast<std::ptrdiff_t>(pos + count));
    pos += count;
  }
  return levels;
}

std::vector<TrainPair> build_pairs(const std::vector<std::vector<ScoredImage>>& levels,
                                   const PairPlan& plan) {
  plan.validate();
  if (static_cast<int>(levels.size()) != plan.n_levels) {
    throw PreconditionError("level count does not match the pair plan");
  }
  const auto& best = levels.front();
  const auto& worst = levels.back();
  const auto& middle = levels[levels.size() / 2];
  if (static_cast<std::size_t>(plan.top_k) > best.size() ||
      static_cast<std::size_t>(plan.bottom_k) > worst.size()) {
    throw ConfigError("anchor counts exceed the sizes of the outer quality levels");
  }
  if (static_cast<std::size_t>(plan.per_anchor) > middle.size()) {
    throw ConfigError("per_anchor " + std::to_string(plan.per_anchor) +
                      " exceeds the middle level size " + std::to_string(middle.size()));
  }
  int domain = best.empty() ? 0 : best.front().domain_id;
  for (const auto& level : levels) {
    for (const auto& im : level) {
      if (im.domain_id != domain) throw PreconditionError("levels mix several domains");
    }
  }

  std::seed_seq seq{static_cast<std::uint32_t>(plan.seed), static_cast<std::uint32_t>(plan.seed >> 32),
                    static_cast<std::uint32_t>(domain)};
  std::mt19937_64 rng(seq);
  std::vector<TrainPair> pairs;
  pairs.reserve(static_cast<std::size_t>(plan.top_k + plan.bottom_k) * plan.per_anchor);
  std::vector<std::size_t> candidates;

  auto pair_anchor = [&](const ScoredImage& anchor, int label) {
    candidates.clear();
    for (std::size_t i = 0; i < middle.size(); ++i) {
      if (middle[i].pseudo_mos != anchor.pseudo_mos) candidates.push_back(i);
    }
    if (candidates.size() < static_cast<std::size_t>(plan.per_anchor)) {
      throw ConfigError("too few untied partners for anchor " + std::to_string(anchor.stable_id));
    }
    // Partial Fisher-Yates: the first per_anchor slots become the sample.
    for (int k = 0; k < plan.per_anchor; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, candidates.size() - 1);
      std::swap(candidates[k], candidates[pick(rng)]);
      const ScoredImage& partner = middle[candidates[k]];
      pairs.push_back({anchor.stable_id, partner.stable_id,
                       anchor.pseudo_mos >= partner.pseudo_mos ? 1 : 0, domain});
      if (pairs.back().label != label) {
        throw PreconditionError("levels are not sorted by pseudo-MOS");
      }
    }
  };
  for (int k = 0; k < plan.top_k; ++k) pair_anchor(best[k], 1);
  for (int k = 0; k < plan.bottom_k; ++k) pair_anchor(worst[worst.size() - plan.bottom_k + k], 0);
  return pairs;
}

std::map<int, std::vector<ScoredImage>> group_by_domain(std::span<const ScoredImage> images) {
  std::map<int, std::vector<ScoredImage>> groups;
  for (const auto& im : images) groups[im.domain_id].push_back(im);
  return groups;
}

std::vector<ScoredImage> load_manifest(const fs::path& path, bool check_files) {
  std::ifstream in = open_with_magic(path, kManifestMagic, kManifestColumns);
  const fs::path base = path.parent_path();
  std::vector<ScoredImage> images;
  std::set<std::pair<int, std::int64_t>> seen;
  std::string line;
  int row = 2;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string where = path.string() + " row " + std::to_string(row);
    auto f = split_row(line);
    if (f.size() != 5) throw DataError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    ScoredImage im;
    im.stable_id = parse_number<std::int64_t>(f[0], where);
    im.domain_id = parse_number<int>(f[1], where);
    if (f[2].empty()) throw DataError(where + ": empty image path");
    im.image_path = fs::path(f[2]).is_absolute() ? fs::path(f[2]) : base / f[2];
    if (!f[3].empty()) im.seg_path = fs::path(f[3]).is_absolute() ? fs::path(f[3]) : base / f[3];
    im.pseudo_mos = parse_double(f[4], where);
    if (!std::isfinite(im.pseudo_mos)) throw DataError(where + ": non-finite pseudo_mos");
    if (!seen.insert({im.domain_id, im.stable_id}).second) {
      throw DataError(where + ": duplicate stable_id " + f[0] + " in domain " + f[1]);
    }
    if (check_files) {
      if (!fs::exists(im.image_path)) {
        throw DataError(where + ": missing image file " + im.image_path.string());
      }
      if (!im.seg_path.empty() && !fs::exists(im.seg_path)) {
        throw DataError(where + ": missing segmentation file " + im.seg_path.string());
      }
    }
    images.push_back(std::move(im));
  }
  return images;
}

void write_manifest(const fs::path& path, std::span<const ScoredImage> images) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open manifest for writing: " + path.string());
  const fs::path base = path.parent_path();
  out << kManifestMagic << "\n" << kManifestColumns << "\n";
  for (const auto& im : images) {
    std::string img = relative_to(im.image_path, base);
    std::string seg = relative_to(im.seg_path, base);
    if (img.find(',') != std::string::npos || seg.find(',') != std::string::npos) {
      throw DataError("manifest paths may not contain commas: " + img);
    }
    out << im.stable_id << "," << im.domain_id << "," << img << "," << seg << ","
        << format_double(im.pseudo_mos) << "\n";
  }
  if (!out) throw DataError("failed writing manifest: " + path.string());
}

std::vector<TrainPair> load_pairs(const fs::path& path) {
  std::ifstream in = open_with_magic(path, kPairsMagic, kPairsColumns);
  std::vector<TrainPair> pairs;
  std::string line;
  int row = 2;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string where = path.string() + " row " + std::to_string(row);
    auto f = split_row(line);
    if (f.size() != 4) throw DataError(where + ": expected 4 fields, got " + std::to_string(f.size()));
    TrainPair p{parse_number<std::int64_t>(f[0], where), parse_number<std::int64_t>(f[1], where),
                parse_number<int>(f[2], where), parse_number<int>(f[3], where)};
    if (p.label != 0 && p.label != 1) throw DataError(where + ": label must be 0 or 1");
    pairs.push_back(p);
  }
  return pairs;
}

void write_pairs(const fs::path& path, std::span<const TrainPair> pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open pairs file for writing: " + path.string());
  out << kPairsMagic << "\n" << kPairsColumns << "\n";
  for (const auto& p : pairs) {
    out << p.anchor_id << "," << p.partner_id << "," << p.label << "," << p.domain_id << "\n";
  }
  if (!out) throw DataError("failed writing pairs file: " + path.string());
}

std::string to_string(Degradation d) {
  switch (d) {
    case Degradation::blur: return "blur";
    case Degradation::noise: return "noise";
    case Degradation::block: return "block";
    case Degradation::downsample: return "downsample";
  }
  return "unknown";
}

Degradation parse_degradation(const std::string& name) {
  for (auto d : {Degradation::blur, Degradation::noise, Degradation::block, Degradation::downsample}) {
    if (to_string(d) == name) return d;
  }
  throw ConfigError("unknown degradation '" + name + "'");
}

ImageBank::ImageBank(int input_size, int num_attributes)
    : input_size_(input_size), num_attributes_(num_attributes) {
  if (input_size < 1 || num_attributes < 1) throw ConfigError("invalid image bank geometry");
}

void ImageBank::add(const ScoredImage& image) {
  Key key{image.domain_id, image.stable_id};
  if (entries_.count(key)) return;
  Image rgb = read_pnm(image.image_path);
  if (rgb.channels != 3) throw DataError("expected an RGB image: " + image.image_path.string());
  rgb = resize_bilinear(rgb, input_size_, input_size_);
  const std::size_t plane = static_cast<std::size_t>(input_size_) * input_size_;
  Entry e;
  e.info = image;
  e.pixels.resize(3 * plane);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < input_size_; ++y) {
      for (int x = 0; x < input_size_; ++x) {
        e.pixels[c * plane + static_cast<std::size_t>(y) * input_size_ + x] =
            rgb.at(y, x, c) / 127.5 - 1.0;
      }
    }
  }
  if (image.seg_path.empty()) {
    spdlog::warn("no segmentation map for stable_id {}; using a uniform map", image.stable_id);
    e.map = SegmentationMap::uniform(input_size_, input_size_, num_attributes_);
  } else {
    Image seg = read_pnm(image.seg_path);
    if (seg.channels != 1) throw DataError("segmentation must be a PGM: " + image.seg_path.string());
    try {
      e.map = SegmentationMap(seg.height, seg.width, num_attributes_, std::move(seg.pixels))
                  .resized(input_size_, input_size_);
    } catch (const DataError& err) {
      throw DataError(image.seg_path.string() + ": " + err.what());
    }
  }
  entries_.emplace(key, std::move(e));
}

void ImageBank::add_all(std::span<const ScoredImage> images) {
  for (const auto& im : images) add(im);
}

const ImageBank::Entry& ImageBank::entry(Key key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw DataError("image " + std::to_string(key.stable_id) + " of domain " +
                    std::to_string(key.domain_id) + " is not in the manifest");
  }
  return it->second;
}

const ScoredImage& ImageBank::info(Key key) const { return entry(key).info; }

Tensor ImageBank::images(std::span<const Key> keys) const {
  const std::size_t plane = static_cast<std::size_t>(input_size_) * input_size_;
  std::vector<double> data;
  data.reserve(keys.size() * 3 * plane);
  for (const auto& k : keys) {
    const auto& px = entry(k).pixels;
    data.insert(data.end(), px.begin(), px.end());
  }
  return Tensor::from_data({static_cast<int>(keys.size()), 3, input_size_, input_size_},
                           std::move(data));
}

std::vector<SegmentationMap> ImageBank::maps(std::span<const Key> keys) const {
  std::vector<SegmentationMap> out;
  out.reserve(keys.size());
  for (const auto& k : keys) out.push_back(entry(k).map);
  return out;
}

}  // namespace attgf
