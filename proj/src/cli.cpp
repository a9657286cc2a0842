#include "attgf/cli.hpp"

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "attgf/errors.hpp"
#include "attgf/eval.hpp"
#include "attgf/image_io.hpp"
#include "attgf/spectrum.hpp"
#include "attgf/study_service.hpp"

namespace attgf {

namespace fs = std::filesystem;

Settings default_settings() {
  Settings s;
  s.model.num_stages = 3;
  s.model.stage_channels = {8, 16, 32};
  s.model.stem_channels = 8;
  s.model.reduction = 4;
  s.model.num_attributes = kSynthAttributes;
  s.model.input_size = 32;
  s.meta.outer_lr = 2e-2;
  s.meta.inner_lr = 3e-3;
  s.meta.max_epochs = 1000;
  s.meta.max_iterations = 200;
  s.meta.iterations_per_epoch = 50;
  s.pairs = PairPlan{3, 50, 50, 20, 0};
  s.synth.degradations = {Degradation::blur, Degradation::noise, Degradation::block, Degradation::downsample};
  return s;
}

namespace {

void check_keys(const YAML::Node& node, const std::string& section, const std::set<std::string>& known) {
  if (!node.IsMap()) throw ConfigError("config section '" + section + "' must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!known.count(key)) throw ConfigError("unknown config key '" + section + (section.empty() ? "" : ".") + key + "'");
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out) {
  if (!node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

const char* mapping_name(MappingForm f) { return f == MappingForm::logistic ? "logistic" : "exponential"; }

MappingForm parse_mapping(const std::string& s) {
  if (s == "logistic") return MappingForm::logistic;
  if (s == "exponential") return MappingForm::exponential;
  throw ConfigError("unknown mapping '" + s + "' (expected logistic or exponential)");
}

}  // namespace

Settings load_settings(const fs::path& path, Settings s) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::BadFile&) {
    throw DataError("cannot read config " + path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  if (root.IsNull()) return s;
  check_keys(root, "", {"seed", "ablation", "unseen_domain", "model", "meta", "loss", "pairs", "synth", "eval", "study"});
  read(root, "seed", s.seed);
  if (root["ablation"]) s.ablation = parse_ablation(root["ablation"].as<std::string>());
  if (root["unseen_domain"]) s.unseen_domain = root["unseen_domain"].as<int>();
  if (auto m = root["model"]) {
    check_keys(m, "model", {"num_stages", "stage_channels", "stem_channels", "reduction", "num_attributes", "input_size",
                            "bn_epsilon", "bn_momentum"});
    read(m, "num_stages", s.model.num_stages);
    read(m, "stage_channels", s.model.stage_channels);
    read(m, "stem_channels", s.model.stem_channels);
    read(m, "reduction", s.model.reduction);
    read(m, "num_attributes", s.model.num_attributes);
    read(m, "input_size", s.model.input_size);
    read(m, "bn_epsilon", s.model.bn_epsilon);
    read(m, "bn_momentum", s.model.bn_momentum);
  }
  if (auto m = root["meta"]) {
    check_keys(m, "meta", {"outer_lr", "inner_lr", "weight_decay", "batch_size", "max_epochs", "max_iterations",
                           "iterations_per_epoch", "lr_decay_every", "lr_decay_factor", "second_order",
                           "inner_optimizer", "outer_optimizer", "validation_fraction", "swap_augment",
                           "keep_epoch_checkpoints"});
    read(m, "outer_lr", s.meta.outer_lr);
    read(m, "inner_lr", s.meta.inner_lr);
    read(m, "weight_decay", s.meta.weight_decay);
    read(m, "batch_size", s.meta.batch_size);
    read(m, "max_epochs", s.meta.max_epochs);
    read(m, "max_iterations", s.meta.max_iterations);
    read(m, "iterations_per_epoch", s.meta.iterations_per_epoch);
    read(m, "lr_decay_every", s.meta.lr_decay_every);
    read(m, "lr_decay_factor", s.meta.lr_decay_factor);
    read(m, "second_order", s.meta.second_order);
    read(m, "validation_fraction", s.meta.validation_fraction);
    read(m, "swap_augment", s.meta.swap_augment);
    read(m, "keep_epoch_checkpoints", s.meta.keep_epoch_checkpoints);
    if (m["inner_optimizer"]) {
      auto v = m["inner_optimizer"].as<std::string>();
      if (v != "adam" && v != "sgd") throw ConfigError("meta.inner_optimizer must be adam or sgd");
      s.meta.inner_optimizer = v == "adam" ? InnerOptimizer::adam : InnerOptimizer::sgd;
    }
    if (m["outer_optimizer"]) {
      auto v = m["outer_optimizer"].as<std::string>();
      if (v != "adam" && v != "sgd") throw ConfigError("meta.outer_optimizer must be adam or sgd");
      s.meta.outer_optimizer = v == "adam" ? OuterOptimizer::adam : OuterOptimizer::sgd;
    }
  }
  if (auto m = root["loss"]) {
    check_keys(m, "loss", {"rank", "center", "regression", "test_rank", "test_center", "focal_gamma", "inpainting_domain"});
    read(m, "rank", s.loss.rank);
    read(m, "center", s.loss.center);
    read(m, "regression", s.loss.regression);
    read(m, "test_rank", s.loss.test_rank);
    read(m, "test_center", s.loss.test_center);
    read(m, "focal_gamma", s.loss.focal_gamma);
    if (m["inpainting_domain"]) s.loss.inpainting_domain = m["inpainting_domain"].as<int>();
  }
  if (auto m = root["pairs"]) {
    check_keys(m, "pairs", {"n_levels", "top_k", "bottom_k", "per_anchor"});
    read(m, "n_levels", s.pairs.n_levels);
    read(m, "top_k", s.pairs.top_k);
    read(m, "bottom_k", s.pairs.bottom_k);
    read(m, "per_anchor", s.pairs.per_anchor);
  }
  if (auto m = root["synth"]) {
    check_keys(m, "synth", {"n_per_domain", "image_size", "degradations"});
    read(m, "n_per_domain", s.synth.n_per_domain);
    read(m, "image_size", s.synth.image_size);
    if (m["degradations"]) {
      s.synth.degradations.clear();
      for (const auto& d : m["degradations"]) s.synth.degradations.push_back(parse_degradation(d.as<std::string>()));
    }
  }
  if (auto m = root["eval"]) {
    check_keys(m, "eval", {"mapping", "null_shuffles"});
    if (m["mapping"]) s.mapping = parse_mapping(m["mapping"].as<std::string>());
    read(m, "null_shuffles", s.null_shuffles);
  }
  if (auto m = root["study"]) {
    check_keys(m, "study", {"rejection_threshold", "practice_size"});
    read(m, "rejection_threshold", s.rejection_threshold);
    read(m, "practice_size", s.practice_size);
  }
  return s;
}

std::string settings_to_yaml(const Settings& s) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << s.seed;
  out << YAML::Key << "ablation" << YAML::Value << to_string(s.ablation);
  if (s.unseen_domain) out << YAML::Key << "unseen_domain" << YAML::Value << *s.unseen_domain;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "num_stages" << YAML::Value << s.model.num_stages;
  out << YAML::Key << "stage_channels" << YAML::Value << YAML::Flow << s.model.stage_channels;
  out << YAML::Key << "stem_channels" << YAML::Value << s.model.stem_channels;
  out << YAML::Key << "reduction" << YAML::Value << s.model.reduction;
  out << YAML::Key << "num_attributes" << YAML::Value << s.model.num_attributes;
  out << YAML::Key << "input_size" << YAML::Value << s.model.input_size;
  out << YAML::Key << "bn_epsilon" << YAML::Value << s.model.bn_epsilon;
  out << YAML::Key << "bn_momentum" << YAML::Value << s.model.bn_momentum;
  out << YAML::EndMap;
  out << YAML::Key << "meta" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "outer_lr" << YAML::Value << s.meta.outer_lr;
  out << YAML::Key << "inner_lr" << YAML::Value << s.meta.inner_lr;
  out << YAML::Key << "weight_decay" << YAML::Value << s.meta.weight_decay;
  out << YAML::Key << "batch_size" << YAML::Value << s.meta.batch_size;
  out << YAML::Key << "max_epochs" << YAML::Value << s.meta.max_epochs;
  out << YAML::Key << "max_iterations" << YAML::Value << s.meta.max_iterations;
  out << YAML::Key << "iterations_per_epoch" << YAML::Value << s.meta.iterations_per_epoch;
  out << YAML::Key << "lr_decay_every" << YAML::Value << s.meta.lr_decay_every;
  out << YAML::Key << "lr_decay_factor" << YAML::Value << s.meta.lr_decay_factor;
  out << YAML::Key << "second_order" << YAML::Value << s.meta.second_order;
  out << YAML::Key << "inner_optimizer" << YAML::Value
      << (s.meta.inner_optimizer == InnerOptimizer::adam ? "adam" : "sgd");
  out << YAML::Key << "outer_optimizer" << YAML::Value
      << (s.meta.outer_optimizer == OuterOptimizer::adam ? "adam" : "sgd");
  out << YAML::Key << "validation_fraction" << YAML::Value << s.meta.validation_fraction;
  out << YAML::Key << "swap_augment" << YAML::Value << s.meta.swap_augment;
  out << YAML::Key << "keep_epoch_checkpoints" << YAML::Value << s.meta.keep_epoch_checkpoints;
  out << YAML::EndMap;
  out << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "rank" << YAML::Value << s.loss.rank;
  out << YAML::Key << "center" << YAML::Value << s.loss.center;
  out << YAML::Key << "regression" << YAML::Value << s.loss.regression;
  out << YAML::Key << "test_rank" << YAML::Value << s.loss.test_rank;
  out << YAML::Key << "test_center" << YAML::Value << s.loss.test_center;
  out << YAML::Key << "focal_gamma" << YAML::Value << s.loss.focal_gamma;
  if (s.loss.inpainting_domain) out << YAML::Key << "inpainting_domain" << YAML::Value << *s.loss.inpainting_domain;
  out << YAML::EndMap;
  out << YAML::Key << "pairs" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_levels" << YAML::Value << s.pairs.n_levels;
  out << YAML::Key << "top_k" << YAML::Value << s.pairs.top_k;
  out << YAML::Key << "bottom_k" << YAML::Value << s.pairs.bottom_k;
  out << YAML::Key << "per_anchor" << YAML::Value << s.pairs.per_anchor;
  out << YAML::EndMap;
  out << YAML::Key << "synth" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_per_domain" << YAML::Value << s.synth.n_per_domain;
  out << YAML::Key << "image_size" << YAML::Value << s.synth.image_size;
  std::vector<std::string> names;
  for (auto d : s.synth.degradations) names.push_back(to_string(d));
  out << YAML::Key << "degradations" << YAML::Value << YAML::Flow << names;
  out << YAML::EndMap;
  out << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "mapping" << YAML::Value << mapping_name(s.mapping);
  out << YAML::Key << "null_shuffles" << YAML::Value << s.null_shuffles;
  out << YAML::EndMap;
  out << YAML::Key << "study" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "rejection_threshold" << YAML::Value << s.rejection_threshold;
  out << YAML::Key << "practice_size" << YAML::Value << s.practice_size;
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ablation;
  std::optional<int> unseen_domain;
  std::string out;
  std::string run_dir;
  bool verbose = false;
};

fs::path data_root() {
  const char* env = std::getenv(kDataRootEnv);
  return env && *env ? fs::path(env) : fs::current_path();
}

// Relative input paths fall back to the data root when absent from the working directory.
fs::path resolve_input(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute() || fs::exists(path)) return path;
  fs::path rooted = data_root() / path;
  return fs::exists(rooted) ? rooted : path;
}

// A resumed run starts from its logged config; --config and flags apply on top.
Settings resolve_settings(const Common& c, const std::optional<fs::path>& fallback_config = std::nullopt) {
  Settings s = default_settings();
  if (fallback_config && fs::exists(*fallback_config)) s = load_settings(*fallback_config, s);
  if (!c.config.empty()) s = load_settings(resolve_input(c.config), s);
  if (c.seed) s.seed = *c.seed;
  if (!c.ablation.empty()) s.ablation = parse_ablation(c.ablation);
  if (c.unseen_domain) s.unseen_domain = c.unseen_domain;
  s.meta.seed = s.seed;
  s.model.init_seed = s.seed;
  s.pairs.seed = s.seed;
  s.synth.seed = s.seed;
  s.model.validate();
  s.meta.validate();
  s.loss.validate();
  s.pairs.validate();
  return s;
}

fs::path make_run_dir(const Common& c, const std::string& verb, std::uint64_t seed) {
  if (!c.run_dir.empty()) {
    fs::create_directories(c.run_dir);
    return c.run_dir;
  }
  fs::path parent = c.out.empty() ? data_root() / "runs" : fs::path(c.out);
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  std::string base = std::string(stamp) + "_seed" + std::to_string(seed) + "_" + verb;
  fs::path dir = parent / base;
  for (int k = 1; fs::exists(dir); ++k) dir = parent / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

void setup_logging(const fs::path& run_dir, bool verbose) {
  auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
  auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((run_dir / "run.log").string());
  auto logger = std::make_shared<spdlog::logger>("attgf", spdlog::sinks_init_list{console, file});
  logger->set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_default_logger(logger);
}

void record_config(const fs::path& run_dir, const Settings& s, const std::vector<std::string>& args) {
  const std::string yaml = settings_to_yaml(s);
  std::ofstream(run_dir / "config.yaml") << yaml;
  std::string command;
  for (const auto& a : args) command += (command.empty() ? "" : " ") + a;
  std::ofstream(run_dir / "command.txt") << command << "\n";
  spdlog::info("run directory {}", run_dir.string());
  spdlog::info("resolved config:\n{}", yaml);
}

std::string domain_name(const Settings& s, int domain) {
  if (domain >= 0 && static_cast<std::size_t>(domain) < s.synth.degradations.size()) {
    return to_string(s.synth.degradations[domain]);
  }
  return "domain" + std::to_string(domain);
}

std::map<int, std::vector<TrainPair>> pairs_for(const std::map<int, std::vector<ScoredImage>>& groups,
                                                const Settings& s, const std::string& pairs_path) {
  std::map<int, std::vector<TrainPair>> out;
  if (!pairs_path.empty()) {
    for (const auto& p : load_pairs(resolve_input(pairs_path))) out[p.domain_id].push_back(p);
    return out;
  }
  for (const auto& [d, items] : groups) {
    PairPlan plan = s.pairs;
    plan.seed = s.pairs.seed * 1000003ULL + static_cast<std::uint64_t>(d);
    out[d] = build_pairs(assign_quality_levels(items, plan.n_levels), plan);
  }
  return out;
}

int cmd_synth(const Common& c, const std::vector<std::string>& args) {
  Settings s = resolve_settings(c);
  fs::path run = make_run_dir(c, "synth", s.seed);
  setup_logging(run, c.verbose);
  record_config(run, s, args);
  auto items = synth_corpus(s.synth, run);
  spdlog::info("wrote {} images in {} domains", items.size(), s.synth.degradations.size());
  std::cout << (run / "manifest.csv").string() << "\n";
  return kExitOk;
}

int cmd_build_pairs(const Common& c, const std::vector<std::string>& args, const std::string& manifest) {
  Settings s = resolve_settings(c);
  auto items = load_manifest(resolve_input(manifest), false);
  fs::path run = make_run_dir(c, "pairs", s.seed);
  setup_logging(run, c.verbose);
  record_config(run, s, args);
  auto groups = group_by_domain(items);
  std::vector<TrainPair> all;
  for (const auto& [d, pairs] : pairs_for(groups, s, "")) {
    spdlog::info("domain {}: {} images, {} pairs", d, groups.at(d).size(), pairs.size());
    all.insert(all.end(), pairs.begin(), pairs.end());
  }
  write_pairs(run / "pairs.csv", all);
  std::cout << (run / "pairs.csv").string() << "\n";
  return kExitOk;
}

int cmd_train(const Common& c, const std::vector<std::string>& args, const std::string& manifest,
              const std::string& pairs_path, const std::string& resume) {
  Common common = c;
  std::optional<fs::path> saved_config;
  if (!resume.empty()) {
    common.run_dir = resume;
    saved_config = fs::path(resume) / "config.yaml";
    if (!fs::exists(fs::path(resume) / "last.ckpt")) throw DataError("nothing to resume in " + resume);
  }
  Settings s = resolve_settings(common, saved_config);
  auto items = load_manifest(resolve_input(manifest));
  auto groups = group_by_domain(items);
  if (s.unseen_domain && !groups.count(*s.unseen_domain)) {
    throw DataError("unseen domain " + std::to_string(*s.unseen_domain) + " does not occur in " + manifest);
  }
  fs::path run = make_run_dir(common, "train", s.seed);
  setup_logging(run, c.verbose);
  record_config(run, s, args);

  auto pairs = pairs_for(groups, s, pairs_path);
  ImageBank bank(s.model.input_size, s.model.num_attributes);
  std::vector<DomainDataset> domains;
  for (const auto& [d, list] : groups) {
    bank.add_all(list);
    if (s.unseen_domain && d == *s.unseen_domain) continue;
    bool inpainting = s.loss.inpainting_domain && *s.loss.inpainting_domain == d;
    domains.push_back({d, pairs[d], inpainting});
  }
  if (domains.size() < 2) throw DataError("training needs at least two source domains");
  MetaTrainer trainer(s.model, s.meta, s.loss, s.ablation, domains, bank, run);
  TrainResult result = trainer.train(!resume.empty());
  nlohmann::ordered_json summary{{"epochs", result.epochs_completed},
                                 {"iterations", result.iterations},
                                 {"skipped_updates", result.skipped_updates},
                                 {"best_validation_srcc", result.best_validation_srcc},
                                 {"last_checkpoint", result.last_checkpoint.string()},
                                 {"best_checkpoint", result.best_checkpoint.string()}};
  if (s.unseen_domain) {
    const auto& list = groups.at(*s.unseen_domain);
    EvalDomain unseen{*s.unseen_domain, domain_name(s, *s.unseen_domain), {}, pairs[*s.unseen_domain]};
    for (const auto& img : list) unseen.image_ids.push_back(img.stable_id);
    if (unseen.image_ids.size() >= 5) {
      EvalCell cell = evaluate_domain(trainer.model(), bank, unseen, s.mapping);
      summary["unseen_domain"] = *s.unseen_domain;
      summary["unseen_srcc"] = cell.srcc;
      summary["unseen_plcc"] = cell.plcc;
      spdlog::info("unseen domain {}: srcc {:.4f} plcc {:.4f}", *s.unseen_domain, cell.srcc, cell.plcc);
    }
  }
  std::ofstream(run / "summary.json") << summary.dump(2) << "\n";
  std::cout << run.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Common& c, const std::vector<std::string>& args, const std::string& manifest,
             const std::vector<std::string>& checkpoint_args, const std::string& pairs_path) {
  Settings s = resolve_settings(c);
  if (checkpoint_args.empty()) throw ConfigError("eval needs at least one --checkpoint");
  std::vector<HeldOutCheckpoint> checkpoints;
  for (const auto& arg : checkpoint_args) {
    auto eq = arg.find('=');
    if (eq == std::string::npos) {
      if (!s.unseen_domain) throw ConfigError("--checkpoint " + arg + " needs an --unseen-domain or the ID=PATH form");
      checkpoints.push_back({*s.unseen_domain, resolve_input(arg)});
    } else {
      int id;
      try {
        id = std::stoi(arg.substr(0, eq));
      } catch (const std::exception&) {
        throw ConfigError("bad held-out domain in --checkpoint " + arg);
      }
      checkpoints.push_back({id, resolve_input(arg.substr(eq + 1))});
    }
  }
  auto items = load_manifest(resolve_input(manifest));
  auto groups = group_by_domain(items);
  fs::path run = make_run_dir(c, "eval", s.seed);
  setup_logging(run, c.verbose);
  record_config(run, s, args);

  ModelConfig mc = s.model;
  for (const auto& ck : checkpoints) {
    if (fs::exists(ck.checkpoint)) {
      mc = load_checkpoint(ck.checkpoint).model.config();
      break;
    }
  }
  ImageBank bank(mc.input_size, mc.num_attributes);
  bank.add_all(items);
  auto pairs = pairs_for(groups, s, pairs_path);
  std::vector<EvalDomain> domains;
  for (const auto& [d, list] : groups) {
    EvalDomain e{d, domain_name(s, d), {}, pairs[d]};
    for (const auto& img : list) e.image_ids.push_back(img.stable_id);
    domains.push_back(std::move(e));
  }
  EvalOptions opts;
  opts.form = s.mapping;
  opts.null_shuffles = s.null_shuffles;
  opts.null_seed = s.seed;
  nlohmann::ordered_json echo{{"seed", s.seed}, {"manifest", manifest}, {"mapping", mapping_name(s.mapping)}};
  opts.config_json = echo.dump();
  EvalReport report = leave_one_out_eval(checkpoints, domains, bank, opts);
  write_report(report, run / "report.json", run / "report.txt");
  std::cout << report.to_table();
  int status = kExitOk;
  for (const auto& ck : checkpoints) {
    if (!fs::exists(ck.checkpoint)) {
      std::cerr << "error: checkpoint not found: " << ck.checkpoint.string() << "\n";
      status = kExitData;
    }
  }
  for (const auto& row : report.rows) {
    if (!row.error.empty() && status == kExitOk) {
      std::cerr << "error: " << row.error << "\n";
      status = kExitData;
    }
  }
  return status;
}

StudyServer* g_server = nullptr;

extern "C" void stop_server(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const Common& c, const std::vector<std::string>& args, const std::string& data_dir,
              const std::string& image_dir, const std::string& host, int port) {
  Settings s = resolve_settings(c);
  fs::path run = make_run_dir(c, "study", s.seed);
  setup_logging(run, c.verbose);
  record_config(run, s, args);
  fs::path data = data_dir.empty() ? run / "study" : fs::path(data_dir);
  fs::path images = image_dir.empty() ? data_root() / "images" : resolve_input(image_dir);
  StudyStore store(data, s.practice_size);
  StudyServer server(store, images, s.rejection_threshold);
  int bound = server.bind(host, port);
  spdlog::info("serving study data {} and images {} on {}:{}", data.string(), images.string(), host, bound);
  std::cout << "listening on " << host << ":" << bound << std::endl;
  g_server = &server;
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  server.listen();
  g_server = nullptr;
  return kExitOk;
}

std::vector<fs::path> collect_images(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    fs::path p = resolve_input(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

void export_spectrum(const fs::path& run, const std::string& stem, const std::vector<fs::path>& files) {
  std::vector<Image> images;
  for (const auto& f : files) images.push_back(read_pnm(f));
  Spectrum spec = average_spectrum(images);
  write_pnm(run / (stem + ".pgm"), render_spectrum(spec));
  write_spectrum_matrix(run / (stem + ".txt"), spec);
  spdlog::info("{}: averaged {} images into {}", stem, images.size(), (run / (stem + ".pgm")).string());
}

int cmd_spectrum(const Common& c, const std::vector<std::string>& args, const std::string& manifest,
                 const std::vector<std::string>& inputs) {
  Settings s = resolve_settings(c);
  if (manifest.empty() && inputs.empty()) throw ConfigError("spectrum needs --manifest or image paths");
  std::vector<ScoredImage> items;
  if (!manifest.empty()) items = load_manifest(resolve_input(manifest));
  std::vector<fs::path> files = collect_images(inputs);
  fs::path run = make_run_dir(c, "spectrum", s.seed);
  setup_logging(run, c.verbose);
  record_config(run, s, args);
  for (const auto& [d, list] : group_by_domain(items)) {
    std::vector<fs::path> paths;
    for (const auto& img : list) paths.push_back(img.image_path);
    export_spectrum(run, "spectrum_" + domain_name(s, d), paths);
  }
  if (!files.empty()) export_spectrum(run, "spectrum", files);
  std::cout << run.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Attribute-guided face image quality assessment toolkit", "attgf"};
  app.fallthrough();
  app.require_subcommand(1);
  Common c;
  app.add_option("--config", c.config, "YAML config file");
  app.add_option("--seed", c.seed, "Seed for every random choice of the run");
  app.add_option("--ablation", c.ablation, "full, no_meta, no_cba or no_aba");
  app.add_option("--unseen-domain", c.unseen_domain, "Domain id held out from training");
  app.add_option("--out", c.out, std::string("Parent of the run directory (default $") + kDataRootEnv + "/runs)");
  app.add_option("--run-dir", c.run_dir, "Exact run directory instead of a timestamped one");
  app.add_flag("-v,--verbose", c.verbose, "Debug logging");

  auto* synth = app.add_subcommand("synth", "Write a synthetic degraded-face corpus");

  std::string manifest, pairs_path, resume;
  auto* pairs = app.add_subcommand("build-pairs", "Build ranking pairs for every domain of a manifest");
  pairs->add_option("--manifest", manifest, "Scored image manifest")->required();

  auto* train = app.add_subcommand("train", "Meta-train on the source domains of a manifest");
  train->add_option("--manifest", manifest, "Scored image manifest")->required();
  train->add_option("--pairs", pairs_path, "Pairs file (built from the manifest when absent)");
  train->add_option("--resume", resume, "Continue the run in this directory");

  std::vector<std::string> checkpoints;
  auto* eval = app.add_subcommand("eval", "Cross-domain evaluation report");
  eval->add_option("--manifest", manifest, "Scored image manifest")->required();
  eval->add_option("--checkpoint", checkpoints, "ID=PATH per held-out domain, or PATH with --unseen-domain")
      ->required();
  eval->add_option("--pairs", pairs_path, "Pairs file for pair accuracy");

  std::string data_dir, image_dir, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve-study", "Serve the subjective study over HTTP");
  serve->add_option("--data", data_dir, "Event log directory");
  serve->add_option("--images", image_dir, "Directory of study images");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)");

  std::vector<std::string> inputs;
  auto* spectrum = app.add_subcommand("spectrum", "Average log-magnitude spectrum per domain or image set");
  spectrum->add_option("--manifest", manifest, "Scored image manifest");
  spectrum->add_option("images", inputs, "PNM files or directories");

  if (args.size() <= 1) {
    std::cerr << app.help();
    return kExitUsage;
  }
  std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(c, args);
    if (pairs->parsed()) return cmd_build_pairs(c, args, manifest);
    if (train->parsed()) return cmd_train(c, args, manifest, pairs_path, resume);
    if (eval->parsed()) return cmd_eval(c, args, manifest, checkpoints, pairs_path);
    if (serve->parsed()) return cmd_serve(c, args, data_dir, image_dir, host, port);
    if (spectrum->parsed()) return cmd_spectrum(c, args, manifest, inputs);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace attgf
