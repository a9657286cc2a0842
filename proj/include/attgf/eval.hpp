#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attgf/dataset.hpp"
#include "attgf/metrics.hpp"
#include "attgf/model.hpp"

namespace attgf {

// Eval-mode scores for `keys`, evaluated in fixed-size chunks.
std::vector<double> predict_scores(const Model& model, const ImageBank& bank,
                                   std::span<const ImageBank::Key> keys, std::size_t chunk = 64);

struct EvalDomain {
  int domain_id = 0;
  std::string name;
  std::vector<std::int64_t> image_ids;  // test images, all in the bank
  std::vector<TrainPair> pairs;         // optional, for pair accuracy
};

struct EvalCell {
  int n = 0;
  double srcc = 0.0;
  double plcc = 0.0;
  double pair_accuracy = 0.0;  // NaN without pairs
  LogisticFit fit;
  // 95th percentile of SRCC under shuffled targets (unseen cells only).
  std::optional<double> null_p95;
};

EvalCell evaluate_domain(const Model& model, const ImageBank& bank, const EvalDomain& domain,
                         MappingForm form = MappingForm::logistic);
// Same, on precomputed scores indexed like domain.image_ids.
EvalCell evaluate_scores(std::span<const double> pred, const ImageBank& bank, const EvalDomain& domain,
                         MappingForm form = MappingForm::logistic);

struct HeldOutCheckpoint {
  int held_out_domain = 0;
  std::filesystem::path checkpoint;  // empty or unreadable gives a gap row
};

struct EvalReport {
  struct Row {
    int held_out_domain = 0;
    std::string checkpoint;
    std::string error;                        // non-empty for a gap row
    std::vector<std::optional<EvalCell>> cells;  // one per domain, in report order
    std::optional<EvalCell> pooled;           // all domains concatenated
  };
  std::vector<int> domain_ids;
  std::vector<std::string> domain_names;
  std::vector<Row> rows;
  MappingForm form = MappingForm::logistic;
  std::string config_json;  // echoed verbatim

  std::string to_json() const;
  // Unseen-domain summary followed by the full checkpoint x domain grid.
  std::string to_table() const;
};

struct EvalOptions {
  MappingForm form = MappingForm::logistic;
  int null_shuffles = 1000;
  std::uint64_t null_seed = 0;
  std::string config_json = "{}";
};

// One row per checkpoint; the cell whose column is the row's held-out domain
// is the unseen-domain entry.
EvalReport leave_one_out_eval(std::span<const HeldOutCheckpoint> checkpoints,
                              std::span<const EvalDomain> domains, const ImageBank& bank,
                              const EvalOptions& options = {});

void write_report(const EvalReport& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& table_path);

}  // namespace attgf
