#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "asgd/dataset.hpp"
#include "asgd/endpoint.hpp"
#include "asgd/model.hpp"
#include "asgd/optim.hpp"

namespace asgd {

struct WorkerConfig {
  std::uint32_t worker_id = 0;
  std::int64_t n_fetch = 1;
  std::int64_t n_push = 1;
  std::int64_t total_steps = 0;
  Index batch_size = 64;
  std::uint64_t data_seed = 0;
  std::uint64_t dropout_seed = 0;
  Hyperparams hyper;
  AugmentPolicy augment;
  int max_attempts = 3;
  std::chrono::milliseconds retry_backoff{50};

  /// n_fetch = n_push = n_sync.
  static WorkerConfig with_sync(std::uint32_t worker_id, std::int64_t n_sync, std::int64_t total_steps);

  void validate() const;
};

struct StepRecord {
  std::int64_t local_step = 0;
  double loss = 0.0;
  double error = 0.0;  // minibatch top-1 error in [0, 1]
  std::uint64_t fetched_version = 0;
};

struct ReplicaReport {
  std::uint32_t worker_id = 0;
  std::vector<StepRecord> steps;
  std::int64_t fetches = 0;
  std::int64_t pushes = 0;
  bool aborted = false;
  std::string failure;
};

/// Everything a replica owns. `accumulated` is the in-order sum of the
/// per-step deltas since the last push.
struct ReplicaState {
  ParamVector params;
  OptimizerState optimizer;
  Eigen::VectorXf accumulated;
  std::int64_t local_step = 0;
  std::int64_t steps_since_push = 0;
  std::uint64_t last_fetched_version = 0;
};

/// Optional instrumentation points.
struct ReplicaHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const ReplicaState&)> after_fetch;
  std::function<void(const Eigen::VectorXf&)> on_delta;
  std::function<void(std::span<const float>, std::uint64_t version)> on_push;
};

/// One model replica. At local step t (1-based):
///   if (t-1) % n_fetch == 0: fetch and replace local params (velocity kept);
///   one minibatch momentum-SGD step, delta accumulated;
///   if t % n_push == 0, or t is the last step with unpushed work: push.
class Replica {
 public:
  Replica(WorkerConfig config, const CompiledNetwork& net, const Dataset& train,
          Endpoint& endpoint, ReplicaHooks hooks = {});

  bool done() const { return report_.aborted || state_.local_step >= config_.total_steps; }

  /// Runs local step t = state().local_step + 1. Failures abort the replica
  /// and are recorded in the report instead of propagating.
  void step();

  const ReplicaState& state() const { return state_; }
  const ReplicaReport& report() const { return report_; }
  const WorkerConfig& config() const { return config_; }

 private:
  template <typename Fn>
  auto with_retry(Fn&& fn);
  void fetch();
  void push();

  WorkerConfig config_;
  const CompiledNetwork* net_;
  Endpoint* endpoint_;
  ReplicaHooks hooks_;
  MinibatchStream stream_;
  Rng dropout_rng_;
  ReplicaState state_;
  ReplicaReport report_;
};

ReplicaReport run_replica(const WorkerConfig& config, const CompiledNetwork& net,
                          const Dataset& train, Endpoint& endpoint, ReplicaHooks hooks = {});

/// Sample, augment, forward (Train), backward and momentum update; shared by
/// replicas and the serverless trainer.
struct LocalStepOutcome {
  StepRecord record;
  Eigen::VectorXf delta;
};
LocalStepOutcome train_one_step(const CompiledNetwork& net, ParamVector& params,
                                OptimizerState& optimizer, const Hyperparams& hyper,
                                MinibatchStream& stream, Rng& dropout_rng, std::int64_t step);

struct SequentialResult {
  ParamVector params;
  std::vector<StepRecord> steps;
};

/// Plain single-process SGD with the same seeds and step function as a
/// replica, but no server. `after_step` sees the params after every step.
SequentialResult train_sequential(
    const CompiledNetwork& net, const Dataset& train, ParamVector params0,
    const WorkerConfig& config,
    const std::function<void(std::int64_t step, const ParamVector& params)>& after_step = {});

struct WarmStartConfig {
  std::int64_t steps = 0;
  std::uint64_t seed = 0;
  Index batch_size = 64;
  Hyperparams hyper;
  AugmentPolicy augment;
};

struct WarmStartResult {
  ParamVector params;
  std::vector<StepRecord> steps;
};

/// Serverless single-replica training from init_params(net, seed). Throws
/// DivergenceError on a non-finite loss.
WarmStartResult warm_start(const CompiledNetwork& net, const Dataset& train,
                           const WarmStartConfig& config);

/// Stream seeds derived from an experiment seed.
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t worker_data_seed(std::uint64_t seed, std::uint32_t worker);
std::uint64_t worker_dropout_seed(std::uint64_t seed, std::uint32_t worker);

}  // namespace asgd
