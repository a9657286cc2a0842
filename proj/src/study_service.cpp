#include "attgf/study_service.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "attgf/errors.hpp"

namespace attgf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::int64_t wall_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

StudyStore::StudyStore(fs::path data_dir, int practice_size, Clock clock)
    : log_path_(data_dir / "events.jsonl"),
      practice_size_(practice_size),
      clock_(clock ? std::move(clock) : Clock(wall_clock_ms)) {
  if (practice_size < 0) throw ConfigError("practice size must be non-negative");
  fs::create_directories(data_dir);
  std::ifstream in(log_path_);
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    try {
      apply(line);
    } catch (const std::exception& e) {
      throw DataError(log_path_.string() + " line " + std::to_string(row) + ": " + e.what());
    }
  }
}

void StudyStore::apply(const std::string& line) {
  json e = json::parse(line);
  const std::string kind = e.at("event");
  if (kind == "study") {
    Study st;
    st.id = e.at("study_id");
    st.seed = e.at("seed");
    st.practice = e.at("practice").get<std::vector<std::string>>();
    for (const auto& s : e.at("sessions")) {
      Session ses;
      ses.info.session_id = s.at("session_id");
      ses.info.image_ids = s.at("images").get<std::vector<std::string>>();
      ses.images.insert(ses.info.image_ids.begin(), ses.info.image_ids.end());
      ses.study_id = st.id;
      st.sessions.push_back(ses.info.session_id);
      next_session_ = std::max(next_session_, ses.info.session_id + 1);
      sessions_[ses.info.session_id] = std::move(ses);
    }
    next_study_ = std::max(next_study_, st.id + 1);
    studies_[st.id] = std::move(st);
  } else if (kind == "enroll") {
    sessions_.at(e.at("session_id")).info.subjects.insert(e.at("subject").get<std::string>());
  } else if (kind == "rating") {
    RatingRecord r;
    r.session_id = e.at("session_id");
    r.subject_id = e.at("subject");
    r.image_id = e.at("image");
    r.score = e.at("score");
    r.timestamp_ms = e.at("timestamp");
    r.practice = e.at("practice");
    ratings_[{r.session_id, r.subject_id, r.image_id}] = r;
  } else {
    throw DataError("unknown event '" + kind + "'");
  }
}

void StudyStore::append(const std::string& line) {
  std::ofstream out(log_path_, std::ios::app);
  out << line << "\n";
  out.flush();
  if (!out) throw DataError("cannot append to " + log_path_.string());
}

const StudyStore::Session& StudyStore::session(int id) const {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw RequestError(404, "unknown session " + std::to_string(id));
  return it->second;
}

StudyStore::CreatedStudy StudyStore::create_study(const std::vector<std::string>& images, int n_sessions,
                                                  std::uint64_t seed,
                                                  std::optional<std::vector<std::string>> practice) {
  std::unique_lock lock(mutex_);
  std::vector<StudySession> parts;
  try {
    parts = partition_sessions(images, n_sessions, seed, next_session_);
  } catch (const std::exception& e) {
    throw RequestError(400, e.what());
  }
  std::vector<std::string> practice_ids;
  if (practice) {
    practice_ids = *practice;
  } else {
    std::vector<std::string> pool(images);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min<std::size_t>(pool.size(), static_cast<std::size_t>(practice_size_)));
    practice_ids = pool;
  }
  CreatedStudy created{next_study_, parts, practice_ids};
  json sessions = json::array();
  for (const auto& p : parts) sessions.push_back({{"session_id", p.session_id}, {"images", p.image_ids}});
  json e{{"event", "study"}, {"study_id", created.study_id}, {"seed", seed},
         {"practice", practice_ids}, {"sessions", sessions}};
  const std::string line = e.dump();
  append(line);
  apply(line);
  return created;
}

int StudyStore::enroll(int study_id, const std::string& subject, std::optional<int> requested) {
  if (subject.empty()) throw RequestError(400, "subject id must not be empty");
  std::unique_lock lock(mutex_);
  auto it = studies_.find(study_id);
  if (it == studies_.end()) throw RequestError(404, "unknown study " + std::to_string(study_id));
  for (int s : it->second.sessions) {
    if (sessions_.at(s).info.subjects.count(subject)) return s;
  }
  int chosen;
  if (requested) {
    const auto& ids = it->second.sessions;
    if (std::find(ids.begin(), ids.end(), *requested) == ids.end()) {
      throw RequestError(404, "session " + std::to_string(*requested) + " is not part of study " +
                                  std::to_string(study_id));
    }
    chosen = *requested;
  } else {
    chosen = it->second.sessions.front();
    for (int s : it->second.sessions) {
      if (sessions_.at(s).info.subjects.size() < sessions_.at(chosen).info.subjects.size()) chosen = s;
    }
  }
  json e{{"event", "enroll"}, {"study_id", study_id}, {"subject", subject}, {"session_id", chosen}};
  const std::string line = e.dump();
  append(line);
  apply(line);
  return chosen;
}

std::vector<std::string> StudyStore::order_locked(int session_id, const std::string& subject) const {
  const Session& s = session(session_id);
  const Study& st = studies_.at(s.study_id);
  std::vector<std::string> main = s.info.image_ids;
  std::mt19937_64 rng(st.seed ^ fnv1a(subject) ^ static_cast<std::uint64_t>(session_id));
  std::shuffle(main.begin(), main.end(), rng);
  std::vector<std::string> order = st.practice;
  order.insert(order.end(), main.begin(), main.end());
  return order;
}

std::vector<std::string> StudyStore::presentation_order(int session_id, const std::string& subject) const {
  std::shared_lock lock(mutex_);
  return order_locked(session_id, subject);
}

bool StudyStore::practice_done_locked(const Session& s, const std::string& subject) const {
  const Study& st = studies_.at(s.study_id);
  return std::all_of(st.practice.begin(), st.practice.end(), [&](const std::string& img) {
    auto it = ratings_.find({s.info.session_id, subject, img});
    return it != ratings_.end() && it->second.practice;
  });
}

StudyStore::NextItem StudyStore::next(int session_id, const std::string& subject) const {
  std::shared_lock lock(mutex_);
  const Session& s = session(session_id);
  if (!s.info.subjects.count(subject)) {
    throw RequestError(409, "subject " + subject + " is not enrolled in session " + std::to_string(session_id));
  }
  const Study& st = studies_.at(s.study_id);
  NextItem item;
  item.total = static_cast<int>(s.info.image_ids.size());
  item.practice_total = static_cast<int>(st.practice.size());
  std::optional<std::pair<std::string, bool>> first_open;
  const auto order = order_locked(session_id, subject);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const bool practice = k < st.practice.size();
    auto it = ratings_.find({session_id, subject, order[k]});
    const bool rated = it != ratings_.end() && it->second.practice == practice;
    if (rated) {
      (practice ? item.practice_rated : item.rated) += 1;
    } else if (!first_open) {
      first_open = {order[k], practice};
    }
  }
  if (!first_open) {
    item.done = true;
  } else {
    item.image_id = first_open->first;
    item.practice = first_open->second;
  }
  return item;
}

bool StudyStore::record_rating(int session_id, const std::string& subject, const std::string& image, int score) {
  if (score < 1 || score > 5) throw RequestError(400, "score must be an integer from 1 to 5");
  std::unique_lock lock(mutex_);
  const Session& s = session(session_id);
  if (!s.info.subjects.count(subject)) {
    throw RequestError(409, "subject " + subject + " is not enrolled in session " + std::to_string(session_id));
  }
  const Study& st = studies_.at(s.study_id);
  const bool in_main = s.images.count(image) > 0;
  const bool in_practice = std::find(st.practice.begin(), st.practice.end(), image) != st.practice.end();
  if (!in_main && !in_practice) {
    throw RequestError(400, "image " + image + " is not part of session " + std::to_string(session_id));
  }
  // An image in both lists is practice until the practice set is complete.
  const bool practice = in_practice && (!in_main || !practice_done_locked(s, subject));
  if (!practice && !practice_done_locked(s, subject)) {
    throw RequestError(409, "subject " + subject + " has not completed the practice set");
  }
  auto existing = ratings_.find({session_id, subject, image});
  const bool duplicate = existing != ratings_.end() && existing->second.practice == practice;
  if (duplicate) {
    spdlog::info("replacing rating of image {} by subject {} in session {}", image, subject, session_id);
  }
  json e{{"event", "rating"}, {"session_id", session_id}, {"subject", subject}, {"image", image},
         {"score", score},    {"timestamp", clock_()},    {"practice", practice}};
  const std::string line = e.dump();
  append(line);
  apply(line);
  return duplicate;
}

std::vector<RatingRecord> StudyStore::ratings(int study_id, bool include_practice) const {
  std::shared_lock lock(mutex_);
  auto it = studies_.find(study_id);
  if (it == studies_.end()) throw RequestError(404, "unknown study " + std::to_string(study_id));
  std::vector<RatingRecord> out;
  for (int s : it->second.sessions) {
    for (auto r = ratings_.lower_bound({s, "", ""}); r != ratings_.end() && std::get<0>(r->first) == s; ++r) {
      if (include_practice || !r->second.practice) out.push_back(r->second);
    }
  }
  return out;
}

std::string StudyStore::export_ratings(int study_id) const {
  std::ostringstream out;
  out << "image_id,subject_id,session_id,score,timestamp\n";
  for (const auto& r : ratings(study_id)) {
    out << r.image_id << "," << r.subject_id << "," << r.session_id << "," << r.score << "," << r.timestamp_ms
        << "\n";
  }
  return out.str();
}

std::string StudyStore::mos_report(int study_id, double threshold) const {
  std::vector<RatingRecord> all = ratings(study_id);
  std::vector<int> session_ids;
  {
    std::shared_lock lock(mutex_);
    session_ids = studies_.at(study_id).sessions;
  }
  json sessions = json::array();
  for (int sid : session_ids) {
    std::vector<RatingRecord> mine;
    for (const auto& r : all) {
      if (r.session_id == sid) mine.push_back(r);
    }
    json entry{{"session_id", sid}};
    try {
      MosResult m = compute_mos(mine, threshold);
      entry["n_subjects"] = m.n_subjects;
      entry["m_subjects"] = m.m_subjects;
      entry["rejected"] = m.rejected;
      entry["constant"] = m.constant;
      entry["mos"] = m.mos;
      entry["raters"] = m.raters;
      entry["histogram"] = m.histogram;
    } catch (const DataError& e) {
      entry["error"] = e.what();
    }
    sessions.push_back(entry);
  }
  json report{{"study_id", study_id}, {"threshold", threshold}, {"sessions", sessions}};
  return report.dump(2);
}

std::vector<int> StudyStore::study_ids() const {
  std::shared_lock lock(mutex_);
  std::vector<int> ids;
  for (const auto& [id, _] : studies_) ids.push_back(id);
  return ids;
}

std::optional<int> StudyStore::study_of_session(int session_id) const {
  std::shared_lock lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return std::nullopt;
  return it->second.study_id;
}

struct StudyServer::Impl {
  StudyStore& store;
  fs::path image_dir;
  double threshold;
  httplib::Server server;

  Impl(StudyStore& s, fs::path dir, double t) : store(s), image_dir(std::move(dir)), threshold(t) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Handler>
httplib::Server::Handler guarded(Handler h) {
  return [h](const httplib::Request& req, httplib::Response& res) {
    try {
      h(req, res);
    } catch (const RequestError& e) {
      send_json(res, e.status(), {{"error", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", std::string("malformed request: ") + e.what()}});
    } catch (const std::exception& e) {
      spdlog::error("request {} {} failed: {}", req.method, req.path, e.what());
      send_json(res, 500, {{"error", e.what()}});
    }
  };
}

int integer_field(const json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_number_integer()) {
    throw RequestError(400, std::string("field '") + key + "' must be an integer");
  }
  return body[key].get<int>();
}

std::string string_field(const json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_string()) {
    throw RequestError(400, std::string("field '") + key + "' must be a string");
  }
  return body[key].get<std::string>();
}

}  // namespace

StudyServer::StudyServer(StudyStore& store, fs::path image_dir, double threshold)
    : impl_(std::make_unique<Impl>(store, std::move(image_dir), threshold)) {
  auto& svr = impl_->server;
  Impl* self = impl_.get();
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Headers", "Content-Type"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  svr.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  svr.Post("/studies", guarded([self](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body);
    if (!body.contains("images") || !body["images"].is_array()) throw RequestError(400, "field 'images' must be a list");
    auto images = body["images"].get<std::vector<std::string>>();
    int sessions = integer_field(body, "sessions");
    std::uint64_t seed = body.value("seed", std::uint64_t{0});
    std::optional<std::vector<std::string>> practice;
    if (body.contains("practice")) practice = body["practice"].get<std::vector<std::string>>();
    auto created = self->store.create_study(images, sessions, seed, practice);
    json out{{"study_id", created.study_id}, {"practice", created.practice}};
    json list = json::array();
    for (const auto& s : created.sessions) list.push_back({{"session_id", s.session_id}, {"images", s.image_ids}});
    out["sessions"] = list;
    send_json(res, 201, out);
  }));

  svr.Post(R"(/studies/(\d+)/subjects)", guarded([self](const httplib::Request& req, httplib::Response& res) {
    const int study = std::stoi(req.matches[1]);
    json body = json::parse(req.body);
    std::optional<int> session;
    if (body.contains("session")) session = integer_field(body, "session");
    int assigned = self->store.enroll(study, string_field(body, "subject"), session);
    send_json(res, 200, {{"study_id", study}, {"subject", body["subject"]}, {"session_id", assigned}});
  }));

  svr.Get(R"(/sessions/(\d+)/next)", guarded([self](const httplib::Request& req, httplib::Response& res) {
    const int session = std::stoi(req.matches[1]);
    if (!req.has_param("subject")) throw RequestError(400, "query parameter 'subject' is required");
    auto item = self->store.next(session, req.get_param_value("subject"));
    json out{{"session_id", session},       {"done", item.done},
             {"rated", item.rated},         {"total", item.total},
             {"practice_rated", item.practice_rated}, {"practice_total", item.practice_total}};
    if (!item.done) {
      out["image_id"] = item.image_id;
      out["practice"] = item.practice;
      out["url"] = "/images/" + item.image_id;
    }
    send_json(res, 200, out);
  }));

  svr.Post("/ratings", guarded([self](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body);
    bool duplicate = self->store.record_rating(integer_field(body, "session"), string_field(body, "subject"),
                                               string_field(body, "image"), integer_field(body, "score"));
    send_json(res, 200, {{"status", "ok"}, {"replaced", duplicate}});
  }));

  svr.Get(R"(/studies/(\d+)/mos)", guarded([self](const httplib::Request& req, httplib::Response& res) {
    const int study = std::stoi(req.matches[1]);
    res.set_content(self->store.mos_report(study, self->threshold), "application/json");
  }));

  svr.Get(R"(/studies/(\d+)/ratings)", guarded([self](const httplib::Request& req, httplib::Response& res) {
    res.set_content(self->store.export_ratings(std::stoi(req.matches[1])), "text/csv");
  }));

  svr.Get(R"(/images/([A-Za-z0-9_.\-]+))", guarded([self](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (id.find("..") != std::string::npos) throw RequestError(400, "invalid image id");
    static const std::vector<std::pair<std::string, std::string>> kTypes{
        {"", ""}, {".png", "image/png"}, {".jpg", "image/jpeg"}, {".jpeg", "image/jpeg"},
        {".ppm", "image/x-portable-pixmap"}, {".pgm", "image/x-portable-graymap"}};
    for (const auto& [ext, type] : kTypes) {
      fs::path p = self->image_dir / (id + ext);
      if (!fs::is_regular_file(p)) continue;
      std::ifstream in(p, std::ios::binary);
      std::ostringstream data;
      data << in.rdbuf();
      std::string mime = type;
      if (mime.empty()) {
        const std::string e = p.extension().string();
        for (const auto& [ext2, type2] : kTypes) {
          if (!ext2.empty() && ext2 == e) mime = type2;
        }
        if (mime.empty()) mime = "application/octet-stream";
      }
      res.set_content(data.str(), mime);
      return;
    }
    throw RequestError(404, "no image named " + id);
  }));
}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  if (!impl_->server.bind_to_port(host, port)) {
    throw DataError("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void StudyServer::listen() { impl_->server.listen_after_bind(); }

void StudyServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace attgf
