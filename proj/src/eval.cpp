#include "attgf/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "attgf/errors.hpp"

namespace attgf {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::vector<double> predict_scores(const Model& model, const ImageBank& bank,
                                   std::span<const ImageBank::Key> keys, std::size_t chunk) {
  if (bank.input_size() != model.config().input_size) {
    throw ConfigError("model expects " + std::to_string(model.config().input_size) + " px inputs, images are " +
                      std::to_string(bank.input_size()) + " px");
  }
  std::vector<double> out;
  out.reserve(keys.size());
  for (std::size_t start = 0; start < keys.size(); start += chunk) {
    auto part = keys.subspan(start, std::min(chunk, keys.size() - start));
    QualityOutput q = model.predict(bank.images(part), bank.maps(part));
    auto d = q.score.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

EvalCell evaluate_scores(std::span<const double> pred, const ImageBank& bank, const EvalDomain& domain,
                         MappingForm form) {
  if (pred.size() != domain.image_ids.size()) throw PreconditionError("one score per test image is required");
  EvalCell cell;
  cell.n = static_cast<int>(pred.size());
  std::vector<double> target;
  std::map<std::int64_t, double> by_id;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    target.push_back(bank.info({domain.domain_id, domain.image_ids[i]}).pseudo_mos);
    by_id[domain.image_ids[i]] = pred[i];
  }
  cell.srcc = srcc(pred, target);
  PlccResult p = plcc_detailed(pred, target, form);
  cell.plcc = p.value;
  cell.fit = p.fit;
  cell.pair_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> si, sj;
  std::vector<int> labels;
  for (const auto& pair : domain.pairs) {
    auto a = by_id.find(pair.anchor_id), b = by_id.find(pair.partner_id);
    if (a == by_id.end() || b == by_id.end()) continue;
    si.push_back(a->second);
    sj.push_back(b->second);
    labels.push_back(pair.label);
  }
  if (!labels.empty()) cell.pair_accuracy = pair_accuracy(si, sj, labels);
  return cell;
}

EvalCell evaluate_domain(const Model& model, const ImageBank& bank, const EvalDomain& domain, MappingForm form) {
  std::vector<ImageBank::Key> keys;
  for (auto id : domain.image_ids) keys.push_back({domain.domain_id, id});
  return evaluate_scores(predict_scores(model, bank, keys), bank, domain, form);
}

EvalReport leave_one_out_eval(std::span<const HeldOutCheckpoint> checkpoints, std::span<const EvalDomain> domains,
                              const ImageBank& bank, const EvalOptions& options) {
  EvalReport report;
  report.form = options.form;
  report.config_json = options.config_json;
  for (const auto& d : domains) {
    report.domain_ids.push_back(d.domain_id);
    report.domain_names.push_back(d.name.empty() ? "domain" + std::to_string(d.domain_id) : d.name);
  }
  for (const auto& ck : checkpoints) {
    EvalReport::Row row;
    row.held_out_domain = ck.held_out_domain;
    row.checkpoint = ck.checkpoint.string();
    row.cells.resize(domains.size());
    try {
      if (ck.checkpoint.empty()) throw DataError("no checkpoint given");
      if (!fs::exists(ck.checkpoint)) throw DataError("missing checkpoint " + ck.checkpoint.string());
      LoadedCheckpoint loaded = load_checkpoint(ck.checkpoint);
      std::vector<double> all_pred, all_target;
      for (std::size_t c = 0; c < domains.size(); ++c) {
        std::vector<ImageBank::Key> keys;
        for (auto id : domains[c].image_ids) keys.push_back({domains[c].domain_id, id});
        std::vector<double> pred = predict_scores(loaded.model, bank, keys);
        EvalCell cell = evaluate_scores(pred, bank, domains[c], options.form);
        if (domains[c].domain_id == ck.held_out_domain && options.null_shuffles > 0) {
          std::vector<double> target;
          for (const auto& k : keys) target.push_back(bank.info(k).pseudo_mos);
          auto null = permutation_null(pred, target, options.null_shuffles, options.null_seed);
          cell.null_p95 = quantile(null, 0.95);
        }
        for (std::size_t i = 0; i < keys.size(); ++i) {
          all_pred.push_back(pred[i]);
          all_target.push_back(bank.info(keys[i]).pseudo_mos);
        }
        row.cells[c] = cell;
      }
      if (all_pred.size() >= 5) {
        EvalCell pooled;
        pooled.n = static_cast<int>(all_pred.size());
        pooled.srcc = srcc(all_pred, all_target);
        PlccResult p = plcc_detailed(all_pred, all_target, options.form);
        pooled.plcc = p.value;
        pooled.fit = p.fit;
        pooled.pair_accuracy = std::numeric_limits<double>::quiet_NaN();
        row.pooled = pooled;
      }
    } catch (const std::exception& e) {
      spdlog::warn("checkpoint for held-out domain {} left as a gap: {}", ck.held_out_domain, e.what());
      row.error = e.what();
      row.cells.assign(domains.size(), std::nullopt);
      row.pooled.reset();
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

namespace {

ordered_json number(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

const char* form_name(MappingForm f) { return f == MappingForm::logistic ? "logistic" : "exponential"; }

ordered_json cell_json(const std::optional<EvalCell>& cell) {
  if (!cell) return nullptr;
  ordered_json fit{{"beta", ordered_json::array()},
                   {"converged", cell->fit.converged},
                   {"linear_fallback", cell->fit.linear_fallback},
                   {"iterations", cell->fit.iterations},
                   {"residual", number(cell->fit.residual)}};
  for (double b : cell->fit.beta) fit["beta"].push_back(number(b));
  ordered_json j{{"n", cell->n},
                 {"srcc", number(cell->srcc)},
                 {"plcc", number(cell->plcc)},
                 {"pair_accuracy", number(cell->pair_accuracy)}};
  if (cell->null_p95) j["null_srcc_p95"] = number(*cell->null_p95);
  j["fit"] = fit;
  return j;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string EvalReport::to_json() const {
  ordered_json doc;
  doc["mapping"] = form_name(form);
  doc["config"] = ordered_json::parse(config_json.empty() ? "{}" : config_json);
  doc["domains"] = ordered_json::array();
  for (std::size_t c = 0; c < domain_ids.size(); ++c) {
    doc["domains"].push_back({{"domain_id", domain_ids[c]}, {"name", domain_names[c]}});
  }
  doc["rows"] = ordered_json::array();
  doc["unseen"] = ordered_json::array();
  for (const auto& row : rows) {
    ordered_json r{{"held_out_domain", row.held_out_domain}, {"checkpoint", row.checkpoint}};
    if (!row.error.empty()) r["gap"] = row.error;
    ordered_json cells = ordered_json::array();
    std::optional<EvalCell> unseen;
    for (std::size_t c = 0; c < row.cells.size(); ++c) {
      cells.push_back(cell_json(row.cells[c]));
      if (domain_ids[c] == row.held_out_domain) unseen = row.cells[c];
    }
    r["cells"] = cells;
    r["pooled"] = cell_json(row.pooled);
    doc["rows"].push_back(r);
    doc["unseen"].push_back({{"held_out_domain", row.held_out_domain}, {"cell", cell_json(unseen)}});
  }
  return doc.dump(2) + "\n";
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  auto name_of = [&](int id) {
    for (std::size_t c = 0; c < domain_ids.size(); ++c) {
      if (domain_ids[c] == id) return domain_names[c];
    }
    return "domain" + std::to_string(id);
  };
  out << "Unseen-domain performance (" << form_name(form) << " mapping)\n";
  out << pad("held-out", 14) << pad("SRCC", 9) << pad("PLCC", 9) << pad("pair-acc", 10) << "null-p95\n";
  for (const auto& row : rows) {
    out << pad(name_of(row.held_out_domain), 14);
    std::optional<EvalCell> unseen;
    for (std::size_t c = 0; c < row.cells.size(); ++c) {
      if (domain_ids[c] == row.held_out_domain) unseen = row.cells[c];
    }
    if (!unseen) {
      out << "--  (" << (row.error.empty() ? "not evaluated" : row.error) << ")\n";
      continue;
    }
    out << pad(fmt(unseen->srcc), 9) << pad(fmt(unseen->plcc), 9) << pad(fmt(unseen->pair_accuracy), 10)
        << (unseen->null_p95 ? fmt(*unseen->null_p95) : "--") << "\n";
  }
  out << "\nCross-domain SRCC/PLCC (rows: checkpoint by held-out domain, * unseen)\n";
  out << pad("checkpoint", 14);
  for (const auto& n : domain_names) out << pad(n, 16);
  out << "pooled\n";
  for (const auto& row : rows) {
    out << pad(name_of(row.held_out_domain), 14);
    for (std::size_t c = 0; c < row.cells.size(); ++c) {
      const auto& cell = row.cells[c];
      std::string s = cell ? fmt(cell->srcc) + "/" + fmt(cell->plcc) : "--";
      if (domain_ids[c] == row.held_out_domain) s = "*" + s;
      out << pad(s, 16);
    }
    out << (row.pooled ? fmt(row.pooled->srcc) + "/" + fmt(row.pooled->plcc) : "--") << "\n";
  }
  bool any_fallback = false;
  for (const auto& row : rows) {
    for (const auto& cell : row.cells) any_fallback = any_fallback || (cell && cell->fit.linear_fallback);
  }
  if (any_fallback) out << "\nSome PLCC values use the linear fallback mapping; see the JSON report.\n";
  return out.str();
}

void write_report(const EvalReport& report, const fs::path& json_path, const fs::path& table_path) {
  for (const auto& [path, text] : {std::pair{json_path, report.to_json()}, std::pair{table_path, report.to_table()}}) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw DataError("cannot write report " + path.string());
  }
}

}  // namespace attgf
