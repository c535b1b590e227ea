#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "asgd/harness.hpp"

namespace asgd {
namespace fs = std::filesystem;
namespace {

ExperimentConfig tiny(Scenario s = Scenario::Single) {
  ExperimentConfig c = default_config(s);
  c.dataset.train_per_class = 20;
  c.dataset.test_per_class = 5;
  c.batch = 8;
  c.steps = 12;
  c.window = 4;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("asgd_harness_" + name);
  fs::remove_all(p);
  return p;
}

TEST(Config, ParsesKeyValueText) {
  ExperimentConfig c;
  apply_config_text(c,
                    "# comment\n"
                    "workers = 1, 2,4\n"
                    "n_sync=10,90\n"
                    "transport=tcp\n"
                    "lr_schedule=100:0.1,200:0.01\n"
                    "warm_steps=auto   # half the budget\n"
                    "port=5000\n");
  EXPECT_EQ(c.workers, (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(c.n_sync, (std::vector<std::int64_t>{10, 90}));
  EXPECT_EQ(c.transport, TransportKind::Tcp);
  EXPECT_EQ(c.hyper.lr_schedule.size(), 2u);
  EXPECT_EQ(c.resolved_warm_steps(), c.steps / 2);
  EXPECT_EQ(c.port, 5000);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  ExperimentConfig c;
  EXPECT_THROW(apply_setting(c, "colour", "red"), std::invalid_argument);
  EXPECT_THROW(apply_setting(c, "steps", "ten"), std::invalid_argument);
  EXPECT_THROW(apply_config_text(c, "just words\n"), std::invalid_argument);
  c.workers.clear();
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.warm_steps = -5;
  c.steps = -10;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, EchoRoundTrips) {
  ExperimentConfig c = default_config(Scenario::E3);
  c.hyper.base_lr = 0.003;
  c.hyper.lr_schedule = {{10, 0.5}};
  c.seeds = {4, 5};
  const std::string echo = config_echo(c);
  ExperimentConfig back;
  apply_config_text(back, echo);
  EXPECT_EQ(config_echo(back), echo);
}

TEST(Config, EveryKeyIsSettable) {
  const ExperimentConfig c;
  const std::string echo = config_echo(c);
  for (const auto& key : config_keys()) {
    const bool present = echo.rfind(key + "=", 0) == 0 || echo.find("\n" + key + "=") != std::string::npos;
    EXPECT_TRUE(present) << key;
    ExperimentConfig copy = c;
    const std::size_t at = echo.rfind(key + "=", 0) == 0 ? 0 : echo.find("\n" + key + "=") + 1;
    std::string value = echo.substr(at + key.size() + 1);
    value = value.substr(0, value.find('\n'));
    if (!value.empty()) {
      EXPECT_NO_THROW(apply_setting(copy, key, value)) << key;
    }
  }
}

TEST(Config, ScenarioDefaults) {
  const ExperimentConfig e1 = default_config(Scenario::E1);
  EXPECT_EQ(e1.workers, std::vector<int>{8});
  EXPECT_EQ(e1.n_sync, std::vector<std::int64_t>{60});
  const ExperimentConfig e2 = default_config(Scenario::E2);
  EXPECT_EQ(e2.workers, (std::vector<int>{1, 2, 4, 8}));
  const ExperimentConfig e3 = default_config(Scenario::E3);
  EXPECT_EQ(e3.n_sync, (std::vector<std::int64_t>{10, 30, 60, 90}));
  EXPECT_EQ(e3.resolved_warm_steps(), e3.steps / 2);
}

TEST(Harness, OracleDiffIsIdentical) {
  ExperimentConfig c = tiny();
  c.steps = 25;
  c.eval_every = 10;
  const OracleDiff d = oracle_diff(c, 3);
  EXPECT_TRUE(d.csv_identical);
  EXPECT_TRUE(d.params_identical);
  EXPECT_TRUE(d.trajectory_identical) << d.first_divergent_step;
  // 25 train rows, test rows at versions 10, 20 and 25.
  EXPECT_EQ(std::count(d.cluster_csv.begin(), d.cluster_csv.end(), '\n'), 1 + 25 + 3);
}

TEST(Harness, RunDirectoryContents) {
  ExperimentConfig c = tiny();
  c.workers = {2};
  c.n_sync = {3};
  c.out = scratch("single").string();
  const ScenarioResult r = run_scenario(c);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_EQ(r.cells[0].minibatches, 24);
  const fs::path dir = fs::path(c.out) / "seed_1";
  for (const char* f : {"config.txt", "worker_0.csv", "worker_1.csv", "merged.csv", "smoothed.csv",
                        "summary.txt", "final.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const LearningCurve merged = read_csv((dir / "merged.csv").string());
  EXPECT_EQ(merged.train_rows().rows.size(), 24u);
  EXPECT_EQ(merged.test_rows().rows.size(), 1u);
  EXPECT_EQ(merged.test_rows().rows[0].worker, -1);
  fs::remove_all(c.out);
}

TEST(Harness, DeterministicRunsAreByteIdentical) {
  ExperimentConfig c = tiny(Scenario::E3);
  c.workers = {1, 2};
  c.n_sync = {2, 5};
  c.steps = 10;
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  c.out = a.string();
  run_scenario(c);
  c.out = b.string();
  run_scenario(c);
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    std::string left = slurp(entry.path()), right = slurp(b / rel);
    if (rel.filename() == "config.txt") {
      // The echo names the output directory; everything else must agree.
      left = left.substr(0, left.find("out="));
      right = right.substr(0, right.find("out="));
    }
    EXPECT_EQ(left, right) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 10u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Harness, E1SummaryRecordsReferenceScale) {
  ExperimentConfig c = tiny(Scenario::E1);
  c.workers = {3};
  c.n_sync = {4};
  const ScenarioResult r = run_e1(c);
  EXPECT_NE(r.summary.find("reference_scale workers=8 n_sync=600"), std::string::npos) << r.summary;
  EXPECT_EQ(r.cells.size(), 2u);
  EXPECT_EQ(r.cells[0].workers, 1);
}

TEST(Harness, E2OneCellPerWorkerCount) {
  ExperimentConfig c = tiny(Scenario::E2);
  c.workers = {1, 2, 3};
  c.out = scratch("e2").string();
  const ScenarioResult r = run_e2(c);
  EXPECT_EQ(r.cells.size(), 3u);
  for (int w : {1, 2, 3}) {
    EXPECT_TRUE(fs::exists(fs::path(c.out) / "seed_1" / ("workers_" + std::to_string(w)) / "merged.csv"));
  }
  fs::remove_all(c.out);
}

TEST(Harness, RawDatasetFileWithHoldout) {
  const fs::path dir = scratch("raw");
  fs::create_directories(dir);
  DatasetConfig dc;
  dc.train_per_class = 10;
  const SyntheticData syn = generate(dc);
  save_raw_dataset((dir / "train.asdd").string(), syn.train);
  ExperimentConfig c = tiny();
  c.dataset_file = (dir / "train.asdd").string();
  const DataSplits d = load_data(c);
  EXPECT_EQ(d.train.size() + d.test.size(), syn.train.size());
  EXPECT_EQ(d.test.size(), syn.train.size() / 10);
  fs::remove_all(dir);
}

TEST(Harness, TcpTransportRuns) {
  ExperimentConfig c = tiny();
  c.workers = {2};
  c.n_sync = {2};
  c.transport = TransportKind::Tcp;
  const ScenarioResult r = run_single(c);
  EXPECT_EQ(r.cells[0].minibatches, 24);
  EXPECT_EQ(r.cells[0].pushes, 12);
  EXPECT_FALSE(r.cells[0].partial);
}

TEST(Harness, ConcurrentTransportRuns) {
  ExperimentConfig c = tiny();
  c.workers = {3};
  c.n_sync = {4};
  c.transport = TransportKind::Concurrent;
  const ScenarioResult r = run_single(c);
  EXPECT_EQ(r.cells[0].minibatches, 36);
  EXPECT_EQ(r.cells[0].pushes, 9);
}

}  // namespace
}  // namespace asgd
