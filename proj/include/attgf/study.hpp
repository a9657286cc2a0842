#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace attgf {

struct RatingRecord {
  std::string image_id;
  std::string subject_id;
  int session_id = 0;
  int score = 0;  // 1 (Bad) .. 5 (Excellent)
  std::int64_t timestamp_ms = 0;
  bool practice = false;

  bool operator==(const RatingRecord&) const = default;
};

struct StudySession {
  int session_id = 0;
  std::vector<std::string> image_ids;
  std::set<std::string> subjects;
};

// Uniform random disjoint split; session sizes differ by at most one.
std::vector<StudySession> partition_sessions(std::span<const std::string> corpus, int n_sessions,
                                             std::uint64_t seed, int first_session_id = 0);

// 100 (z + 3) / 6 clamped to [0, 100].
double rescale_z(double z);

struct SubjectScores {
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1) standard deviation
  bool constant = false;
  std::map<std::string, double> z;         // by image
  std::map<std::string, double> rescaled;  // by image, empty when constant
};

// Per-session normalization of one subject's scores (image -> score).
SubjectScores zscore_and_rescale(const std::map<std::string, int>& scores);

// Latest record per (image, subject) of one session, practice items dropped.
std::vector<RatingRecord> effective_ratings(std::span<const RatingRecord> records);

struct RejectionResult {
  std::set<std::string> rejected;
  std::map<std::string, double> final_correlation;
};

// Iterative correlation screen against the provisional MOS. `rescaled` maps
// subject -> (image -> rescaled score) for subjects with non-zero spread.
// A threshold of zero or below disables the screen.
RejectionResult reject_subjects(const std::map<std::string, std::map<std::string, double>>& rescaled,
                                double threshold);

struct MosResult {
  int session_id = 0;
  std::map<std::string, double> mos;  // by image
  std::map<std::string, int> raters;  // remaining subjects per image
  std::map<std::string, SubjectScores> subjects;
  std::set<std::string> rejected;
  std::set<std::string> constant;  // sigma = 0, excluded
  int n_subjects = 0;              // N_k
  int m_subjects = 0;              // M_k
  std::vector<int> histogram;      // 20 bins of width 5 over [0, 100]
};

inline constexpr double kDefaultRejectionThreshold = 0.25;

// Ratings of a single session. Throws DataError with fewer than two
// remaining subjects.
MosResult compute_mos(std::span<const RatingRecord> records,
                      double threshold = kDefaultRejectionThreshold);

// Fixed-width bins over [0, 100]; 100 falls in the last bin.
std::vector<int> mos_histogram(const std::map<std::string, double>& mos, double bin_width = 5.0);

}  // namespace attgf
