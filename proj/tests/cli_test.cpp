#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "attgf/cli.hpp"
#include "attgf/errors.hpp"

namespace fs = std::filesystem;
using namespace attgf;

namespace {

fs::path workspace() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "attgf_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    std::ofstream(p / "tiny.yaml") << "synth: {n_per_domain: 16, image_size: 16}\n"
                                      "model: {input_size: 16, num_stages: 2, stage_channels: [4, 8], "
                                      "stem_channels: 4, reduction: 2}\n"
                                      "meta: {max_iterations: 2, iterations_per_epoch: 1, batch_size: 4}\n"
                                      "pairs: {top_k: 3, bottom_k: 3, per_anchor: 3}\n"
                                      "eval: {null_shuffles: 50}\n";
    return p;
  }();
  return dir;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "attgf");
  return run_cli(args);
}

std::string cfg() { return (workspace() / "tiny.yaml").string(); }

fs::path corpus() {
  static const fs::path dir = [] {
    fs::path d = workspace() / "corpus";
    EXPECT_EQ(run({"synth", "--config", cfg(), "--seed", "2", "--run-dir", d.string()}), kExitOk);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({}), kExitUsage);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("Usage"), std::string::npos);
}

TEST(Cli, UnknownVerbAndFlags) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"frobnicate"}), kExitUsage);
  EXPECT_EQ(run({"synth", "--no-such-flag"}), kExitUsage);
  EXPECT_EQ(run({"synth", "--ablation", "no_everything", "--run-dir", (workspace() / "x").string()}), kExitUsage);
  ::testing::internal::GetCapturedStderr();
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  fs::path bad = workspace() / "bad.yaml";
  std::ofstream(bad) << "meta: {outer_rate: 0.1}\n";
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"synth", "--config", bad.string(), "--run-dir", (workspace() / "y").string()}), kExitUsage);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("meta.outer_rate"), std::string::npos);
}

TEST(Cli, MissingCheckpointIsDataError) {
  fs::path missing = workspace() / "does_not_exist.ckpt";
  ::testing::internal::CaptureStderr();
  ::testing::internal::CaptureStdout();
  int code = run({"eval", "--config", cfg(), "--manifest", (corpus() / "manifest.csv").string(), "--checkpoint",
                  "0=" + missing.string(), "--run-dir", (workspace() / "eval_missing").string()});
  ::testing::internal::GetCapturedStdout();
  std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, kExitData);
  EXPECT_NE(err.find(missing.string()), std::string::npos);
  EXPECT_TRUE(fs::exists(workspace() / "eval_missing" / "report.json"));
}

TEST(Cli, MissingManifestIsDataError) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"train", "--config", cfg(), "--manifest", "/nonexistent/manifest.csv"}), kExitData);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("/nonexistent/manifest.csv"), std::string::npos);
}

TEST(Cli, TrainEvaluateAndResume) {
  const std::string manifest = (corpus() / "manifest.csv").string();
  fs::path pairs_run = workspace() / "pairs";
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"build-pairs", "--config", cfg(), "--manifest", manifest, "--run-dir", pairs_run.string()}), kExitOk);
  fs::path run_dir = workspace() / "train";
  ASSERT_EQ(run({"train", "--config", cfg(), "--manifest", manifest, "--pairs", (pairs_run / "pairs.csv").string(),
                 "--unseen-domain", "3", "--ablation", "no_cba", "--seed", "5", "--run-dir", run_dir.string()}),
            kExitOk);
  for (const char* f : {"config.yaml", "command.txt", "run.log", "last.ckpt", "best.ckpt", "summary.json"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }
  Settings logged = load_settings(run_dir / "config.yaml");
  EXPECT_EQ(logged.seed, 5u);
  EXPECT_EQ(logged.ablation, AblationMode::no_cba);
  ASSERT_TRUE(logged.unseen_domain.has_value());
  EXPECT_EQ(*logged.unseen_domain, 3);
  EXPECT_EQ(logged.model.stage_channels, (std::vector<int>{4, 8}));
  EXPECT_EQ(settings_to_yaml(logged), settings_to_yaml(load_settings(run_dir / "config.yaml", logged)));

  EXPECT_EQ(run({"train", "--config", cfg(), "--manifest", manifest, "--resume", run_dir.string()}), kExitOk);
  EXPECT_EQ(run({"eval", "--config", cfg(), "--manifest", manifest, "--checkpoint", (run_dir / "best.ckpt").string(),
                 "--unseen-domain", "3", "--run-dir", (workspace() / "eval_ok").string()}),
            kExitOk);
  EXPECT_EQ(run({"spectrum", "--manifest", manifest, "--run-dir", (workspace() / "spec").string()}), kExitOk);
  ::testing::internal::GetCapturedStdout();
  EXPECT_TRUE(fs::exists(workspace() / "eval_ok" / "report.txt"));
  EXPECT_TRUE(fs::exists(workspace() / "spec" / "spectrum_blur.pgm"));
  EXPECT_TRUE(fs::exists(workspace() / "spec" / "spectrum_blur.txt"));
}

TEST(Cli, TimestampedRunDirectoryUnderDataRoot) {
  fs::path root = workspace() / "root";
  fs::create_directories(root);
  setenv(kDataRootEnv, root.c_str(), 1);
  ::testing::internal::CaptureStdout();
  EXPECT_EQ(run({"synth", "--config", cfg(), "--seed", "9"}), kExitOk);
  ::testing::internal::GetCapturedStdout();
  unsetenv(kDataRootEnv);
  int found = 0;
  for (const auto& e : fs::directory_iterator(root / "runs")) {
    const std::string name = e.path().filename().string();
    EXPECT_NE(name.find("_seed9_synth"), std::string::npos) << name;
    EXPECT_TRUE(fs::exists(e.path() / "manifest.csv"));
    ++found;
  }
  EXPECT_EQ(found, 1);
}
