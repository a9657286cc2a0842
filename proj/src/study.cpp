#include "attgf/study.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "attgf/errors.hpp"
#include "attgf/metrics.hpp"

namespace attgf {

std::vector<StudySession> partition_sessions(std::span<const std::string> corpus, int n_sessions,
                                             std::uint64_t seed, int first_session_id) {
  if (n_sessions <= 0) throw ConfigError("number of sessions must be positive");
  if (corpus.size() < static_cast<std::size_t>(n_sessions)) {
    throw PreconditionError("fewer images than sessions");
  }
  std::set<std::string> unique(corpus.begin(), corpus.end());
  if (unique.size() != corpus.size()) throw DataError("corpus contains duplicate image ids");
  std::vector<std::string> shuffled(corpus.begin(), corpus.end());
  std::mt19937_64 rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<StudySession> sessions(n_sessions);
  const std::size_t base = shuffled.size() / n_sessions, extra = shuffled.size() % n_sessions;
  std::size_t pos = 0;
  for (int k = 0; k < n_sessions; ++k) {
    sessions[k].session_id = first_session_id + k;
    const std::size_t count = base + (static_cast<std::size_t>(k) < extra ? 1 : 0);
    sessions[k].image_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(pos),
                                 shuffled.begin() + static_cast<std::ptrdiff_t>(pos + count));
    pos += count;
  }
  return sessions;
}

double rescale_z(double z) { return std::clamp(100.0 * (z + 3.0) / 6.0, 0.0, 100.0); }

SubjectScores zscore_and_rescale(const std::map<std::string, int>& scores) {
  if (scores.size() < 2) throw PreconditionError("a subject needs at least two ratings per session");
  SubjectScores s;
  const double n = static_cast<double>(scores.size());
  for (const auto& [_, v] : scores) s.mean += v;
  s.mean /= n;
  double ss = 0;
  for (const auto& [_, v] : scores) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / (n - 1));
  if (s.stddev == 0) {
    s.constant = true;
    return s;
  }
  for (const auto& [image, v] : scores) {
    const double z = (v - s.mean) / s.stddev;
    s.z[image] = z;
    s.rescaled[image] = rescale_z(z);
  }
  return s;
}

std::vector<RatingRecord> effective_ratings(std::span<const RatingRecord> records) {
  std::map<std::pair<std::string, std::string>, RatingRecord> latest;
  for (const auto& r : records) {
    if (r.practice) continue;
    auto key = std::make_pair(r.image_id, r.subject_id);
    auto it = latest.find(key);
    if (it == latest.end() || r.timestamp_ms >= it->second.timestamp_ms) latest[key] = r;
  }
  std::vector<RatingRecord> out;
  for (auto& [_, r] : latest) out.push_back(std::move(r));
  return out;
}

namespace {

std::map<std::string, double> provisional_mos(
    const std::map<std::string, std::map<std::string, double>>& rescaled,
    const std::set<std::string>& excluded) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& [subject, images] : rescaled) {
    if (excluded.count(subject)) continue;
    for (const auto& [image, v] : images) {
      acc[image].first += v;
      acc[image].second += 1;
    }
  }
  std::map<std::string, double> mos;
  for (const auto& [image, a] : acc) mos[image] = a.first / a.second;
  return mos;
}

double subject_correlation(const std::map<std::string, double>& ratings,
                           const std::map<std::string, double>& mos) {
  std::vector<double> x, y;
  for (const auto& [image, v] : ratings) {
    auto it = mos.find(image);
    if (it == mos.end()) continue;
    x.push_back(v);
    y.push_back(it->second);
  }
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  return pearson(x, y);
}

}  // namespace

RejectionResult reject_subjects(const std::map<std::string, std::map<std::string, double>>& rescaled,
                                double threshold) {
  RejectionResult result;
  const std::size_t max_removals = rescaled.size() / 4;
  while (true) {
    auto mos = provisional_mos(rescaled, result.rejected);
    result.final_correlation.clear();
    std::string worst;
    double worst_r = std::numeric_limits<double>::infinity();
    for (const auto& [subject, images] : rescaled) {
      if (result.rejected.count(subject)) continue;
      double r = subject_correlation(images, mos);
      result.final_correlation[subject] = r;
      // A subject whose ratings cannot be correlated counts as uncorrelated.
      double key = std::isnan(r) ? -std::numeric_limits<double>::infinity() : r;
      if (key < worst_r) {
        worst_r = key;
        worst = subject;
      }
    }
    if (worst.empty() || threshold <= 0 || worst_r >= threshold || result.rejected.size() >= max_removals) break;
    result.rejected.insert(worst);
  }
  if (!rescaled.empty() && result.rejected.size() == rescaled.size()) {
    throw DataError("every subject was rejected; the study is invalid");
  }
  return result;
}

std::vector<int> mos_histogram(const std::map<std::string, double>& mos, double bin_width) {
  const int bins = static_cast<int>(std::ceil(100.0 / bin_width));
  std::vector<int> h(bins, 0);
  for (const auto& [_, v] : mos) {
    int b = std::clamp(static_cast<int>(std::floor(v / bin_width)), 0, bins - 1);
    ++h[b];
  }
  return h;
}

MosResult compute_mos(std::span<const RatingRecord> records, double threshold) {
  MosResult result;
  auto ratings = effective_ratings(records);
  if (ratings.empty()) throw DataError("no ratings to aggregate");
  result.session_id = ratings.front().session_id;
  std::map<std::string, std::map<std::string, int>> by_subject;
  for (const auto& r : ratings) {
    if (r.session_id != result.session_id) throw PreconditionError("ratings span several sessions");
    if (r.score < 1 || r.score > 5) throw DataError("score outside 1..5 from subject " + r.subject_id);
    by_subject[r.subject_id][r.image_id] = r.score;
  }
  result.n_subjects = static_cast<int>(by_subject.size());

  std::map<std::string, std::map<std::string, double>> rescaled;
  for (const auto& [subject, scores] : by_subject) {
    if (scores.size() < 2) {
      result.constant.insert(subject);
      continue;
    }
    SubjectScores s = zscore_and_rescale(scores);
    if (s.constant) {
      result.constant.insert(subject);
    } else {
      rescaled[subject] = s.rescaled;
    }
    result.subjects[subject] = std::move(s);
  }

  RejectionResult rej = reject_subjects(rescaled, threshold);
  result.rejected = rej.rejected;
  result.m_subjects = static_cast<int>(rescaled.size() - rej.rejected.size());
  if (result.m_subjects < 2) {
    throw DataError("session " + std::to_string(result.session_id) + " has " +
                    std::to_string(result.m_subjects) + " usable subjects; at least 2 are required");
  }
  std::map<std::string, double> sums;
  for (const auto& [subject, images] : rescaled) {
    if (rej.rejected.count(subject)) continue;
    for (const auto& [image, v] : images) {
      sums[image] += v;
      result.raters[image] += 1;
    }
  }
  for (const auto& [image, total] : sums) result.mos[image] = total / result.raters[image];
  result.histogram = mos_histogram(result.mos);
  return result;
}

}  // namespace attgf
