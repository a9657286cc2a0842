#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "attgf/study.hpp"

namespace attgf {

// Request-level failure carrying the HTTP status to report.
class RequestError : public std::runtime_error {
 public:
  RequestError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// Study state backed by an append-only JSON-lines event log. Reconstructed
// by replaying the log on construction.
class StudyStore {
 public:
  using Clock = std::function<std::int64_t()>;

  explicit StudyStore(std::filesystem::path data_dir, int practice_size = 5, Clock clock = {});

  struct CreatedStudy {
    int study_id = 0;
    std::vector<StudySession> sessions;
    std::vector<std::string> practice;
  };
  // Without an explicit practice list the first practice_size images of a
  // seeded shuffle of the corpus are used.
  CreatedStudy create_study(const std::vector<std::string>& images, int n_sessions, std::uint64_t seed,
                            std::optional<std::vector<std::string>> practice = std::nullopt);

  // Assigns the least-populated session unless one is requested.
  int enroll(int study_id, const std::string& subject, std::optional<int> session = std::nullopt);

  struct NextItem {
    bool done = false;
    std::string image_id;
    bool practice = false;
    int rated = 0;           // main-sequence images rated so far
    int total = 0;           // main-sequence length
    int practice_rated = 0;
    int practice_total = 0;
  };
  NextItem next(int session_id, const std::string& subject) const;

  // Returns true when an earlier rating for the same item was replaced.
  bool record_rating(int session_id, const std::string& subject, const std::string& image, int score);

  // Practice images first, then the subject's randomized main sequence.
  std::vector<std::string> presentation_order(int session_id, const std::string& subject) const;

  std::vector<RatingRecord> ratings(int study_id, bool include_practice = false) const;
  // One line per effective main rating: image_id,subject_id,session_id,score,timestamp.
  std::string export_ratings(int study_id) const;
  // Per-session MOS, rejection and histogram as a JSON document.
  std::string mos_report(int study_id, double threshold = kDefaultRejectionThreshold) const;

  std::vector<int> study_ids() const;
  std::optional<int> study_of_session(int session_id) const;

 private:
  struct Study {
    int id = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> practice;
    std::vector<int> sessions;
  };
  struct Session {
    StudySession info;
    int study_id = 0;
    std::set<std::string> images;
  };

  void apply(const std::string& line);
  void append(const std::string& line);
  const Session& session(int id) const;
  std::vector<std::string> order_locked(int session_id, const std::string& subject) const;
  bool practice_done_locked(const Session& s, const std::string& subject) const;

  std::filesystem::path log_path_;
  int practice_size_;
  Clock clock_;
  mutable std::shared_mutex mutex_;
  std::map<int, Study> studies_;
  std::map<int, Session> sessions_;
  // (session, subject, image) -> record, latest wins.
  std::map<std::tuple<int, std::string, std::string>, RatingRecord> ratings_;
  int next_study_ = 1;
  int next_session_ = 1;
};

// HTTP front end for StudyStore.
class StudyServer {
 public:
  StudyServer(StudyStore& store, std::filesystem::path image_dir,
              double threshold = kDefaultRejectionThreshold);
  ~StudyServer();

  // Binds to `port` (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace attgf
