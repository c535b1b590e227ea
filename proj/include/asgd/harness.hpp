#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "asgd/dataset.hpp"
#include "asgd/metrics.hpp"
#include "asgd/model.hpp"
#include "asgd/optim.hpp"
#include "asgd/transport.hpp"
#include "asgd/worker.hpp"

namespace asgd {

enum class Scenario { Single, E1, E2, E3 };
enum class TransportKind { Deterministic, Concurrent, Tcp };

/// Scale of the original full-size experiments, echoed in summaries.
struct ReferenceScale {
  static constexpr int e1_workers = 8;
  static constexpr std::int64_t e1_n_sync = 600;
  static constexpr std::int64_t e3_n_sync_min = 100;
  static constexpr std::int64_t e3_n_sync_max = 900;
  static constexpr std::int64_t smoothing_window = 400;
  /// Desk n_sync values are the reference values divided by this.
  static constexpr std::int64_t n_sync_divisor = 10;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::Single;
  std::vector<int> workers{1};
  std::vector<std::int64_t> n_sync{60};
  /// Negative means "half the per-worker step budget".
  std::int64_t warm_steps = 0;
  std::int64_t steps = 600;  // per worker
  TransportKind transport = TransportKind::Deterministic;
  SchedulePolicy schedule = SchedulePolicy::SeededRandom;
  std::vector<std::uint64_t> seeds{1};
  DatasetConfig dataset;
  std::string dataset_file;  // optional raw training set (replaces the synthetic one)
  std::string test_file;     // optional raw test set; default holds out the last tenth
  Hyperparams hyper;
  Index batch = 64;
  std::int64_t window = 40;
  std::int64_t eval_every = 0;  // server versions between test rows; 0 = final only
  AugmentPolicy augment;
  double target_error = 0.5;
  std::uint16_t port = 0;
  std::string out;

  void validate() const;
  std::int64_t resolved_warm_steps() const { return warm_steps < 0 ? steps / 2 : warm_steps; }
};

/// Defaults per scenario (workers, n_sync, warm start).
ExperimentConfig default_config(Scenario scenario);

/// key=value lines; '#' starts a comment. Lists are comma separated.
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);
void apply_config_text(ExperimentConfig& config, const std::string& text);
std::vector<std::string> config_keys();
/// Canonical key=value echo, readable by apply_config_text.
std::string config_echo(const ExperimentConfig& config);

const char* scenario_name(Scenario s);
const char* transport_name(TransportKind t);

struct DataSplits {
  Dataset train;
  Dataset test;
};

DataSplits load_data(const ExperimentConfig& config);
CompiledNetwork build_default_network(const DataSplits& data);

struct EvalResult {
  double loss = 0.0;
  double error = 0.0;
};

/// Eval-mode mean loss and top-1 error over a whole set.
EvalResult evaluate(const CompiledNetwork& net, const ParamVector& params, const Dataset& set);

struct ClusterSpec {
  int workers = 1;
  std::int64_t n_sync = 1;
  std::int64_t steps = 0;
  std::uint64_t seed = 1;
  TransportKind transport = TransportKind::Deterministic;
  SchedulePolicy schedule = SchedulePolicy::SeededRandom;
  Index batch = 64;
  Hyperparams hyper;
  AugmentPolicy augment;
  std::int64_t eval_every = 0;
  std::uint16_t port = 0;
};

struct ClusterResult {
  LearningCurve curve;
  std::vector<ReplicaReport> reports;
  ParamVector final_params;
  EventLog events;  // deterministic transport only
  std::uint64_t final_version = 0;
  std::uint64_t rejected_pushes = 0;
  bool partial = false;
};

WorkerConfig cluster_worker_config(const ClusterSpec& spec, std::uint32_t worker);

/// One parameter server plus `spec.workers` replicas over the chosen transport.
ClusterResult run_cluster(const CompiledNetwork& net, const DataSplits& data, ParamVector init,
                          const ClusterSpec& spec,
                          const std::function<void(std::int64_t tick, const ParameterServer&)>&
                              after_step = {});

struct SequentialRun {
  LearningCurve curve;
  ParamVector final_params;
};

/// Serverless reference loop producing the same CSV a one-worker,
/// n_sync = 1 deterministic cluster would.
SequentialRun run_sequential_reference(
    const CompiledNetwork& net, const DataSplits& data, ParamVector init, const ClusterSpec& spec,
    const std::function<void(std::int64_t step, const ParamVector&)>& after_step = {});

/// Run directory contents: config.txt, worker_<i>.csv, merged.csv,
/// smoothed.csv, summary.txt, final.ckpt.
void write_run(const std::string& dir, const std::string& config_text, const ClusterResult& result,
               std::int64_t window, const std::string& summary_text);

struct CellSummary {
  int workers = 0;
  std::int64_t n_sync = 0;
  std::uint64_t seed = 0;
  std::int64_t minibatches = 0;
  std::int64_t pushes = 0;
  std::int64_t fetches = 0;
  std::optional<double> early_error;  // mean smoothed error over the first quartile of steps
  std::optional<double> final_error;  // last smoothed value
  std::optional<std::int64_t> steps_to_target;  // global minibatches
  double final_test_error = 0.0;
  bool partial = false;
};

CellSummary summarize_cell(const ClusterResult& result, const ClusterSpec& spec, std::int64_t window,
                           double target_error);

std::string format_cell_header();
std::string format_cell(const CellSummary& cell);

struct ScenarioResult {
  std::vector<CellSummary> cells;
  /// E3 only: warm-start checkpoint error (last smoothed value) per seed.
  std::map<std::uint64_t, double> warm_error;
  std::string summary;
};

ScenarioResult run_single(const ExperimentConfig& config);
ScenarioResult run_e1(const ExperimentConfig& config);
ScenarioResult run_e2(const ExperimentConfig& config);
ScenarioResult run_e3(const ExperimentConfig& config);
ScenarioResult run_scenario(const ExperimentConfig& config);

struct OracleDiff {
  bool csv_identical = false;
  bool params_identical = false;
  bool trajectory_identical = false;
  std::int64_t first_divergent_step = -1;
  std::string cluster_csv;
  std::string oracle_csv;
};

/// One worker, n_fetch = n_push = 1, deterministic transport vs. the
/// sequential reference, compared step by step.
OracleDiff oracle_diff(const ExperimentConfig& config, std::uint64_t seed);

}  // namespace asgd
