#include "asgd/worker.hpp"

#include <cmath>
#include <sstream>
#include <thread>

namespace asgd {

FetchReplyMsg LocalEndpoint::fetch(std::uint32_t) {
  Snapshot snap = server_->handle_fetch();
  return {snap.version, std::vector<float>(snap.params.data(), snap.params.data() + snap.params.size())};
}

PushAckMsg LocalEndpoint::push(std::uint32_t worker_id, std::span<const float> delta) {
  return {server_->handle_push(worker_id, delta).version};
}

WorkerConfig WorkerConfig::with_sync(std::uint32_t worker_id, std::int64_t n_sync,
                                     std::int64_t total_steps) {
  WorkerConfig config;
  config.worker_id = worker_id;
  config.n_fetch = n_sync;
  config.n_push = n_sync;
  config.total_steps = total_steps;
  return config;
}

void WorkerConfig::validate() const {
  if (n_fetch < 1 || n_push < 1) throw std::invalid_argument("n_fetch and n_push must be >= 1");
  if (total_steps < 0) throw std::invalid_argument("total_steps must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("minibatch size must be positive");
  if (max_attempts < 1) throw std::invalid_argument("max_attempts must be positive");
  hyper.validate();
}

std::uint64_t init_seed(std::uint64_t seed) { return mix_seed(seed, 0x696e6974); }

std::uint64_t worker_data_seed(std::uint64_t seed, std::uint32_t worker) {
  return mix_seed(mix_seed(seed, 0x64617461), worker);
}

std::uint64_t worker_dropout_seed(std::uint64_t seed, std::uint32_t worker) {
  return mix_seed(mix_seed(seed, 0x64726f70), worker);
}

LocalStepOutcome train_one_step(const CompiledNetwork& net, ParamVector& params,
                                OptimizerState& optimizer, const Hyperparams& hyper,
                                MinibatchStream& stream, Rng& dropout_rng, std::int64_t step) {
  const Minibatch batch = stream.next();
  auto forward = forward_loss(net, params, batch, Mode::Train, &dropout_rng);
  if (!std::isfinite(forward.loss)) {
    std::ostringstream os;
    os << "non-finite loss at local step " << step;
    throw DivergenceError(os.str());
  }
  const Gradient grad = backward(net, params, forward.cache, batch);
  LocalStepOutcome out;
  out.delta = local_step(params, grad, optimizer, hyper, step);
  out.record.local_step = step;
  out.record.loss = forward.loss;
  out.record.error = static_cast<double>(forward.top1_errors) / static_cast<double>(batch.batch_size());
  return out;
}

Replica::Replica(WorkerConfig config, const CompiledNetwork& net, const Dataset& train,
                 Endpoint& endpoint, ReplicaHooks hooks)
    : config_(std::move(config)),
      net_(&net),
      endpoint_(&endpoint),
      hooks_(std::move(hooks)),
      stream_(train, config_.batch_size, config_.data_seed, config_.augment),
      dropout_rng_(config_.dropout_seed) {
  config_.validate();
  state_.params = zero_params(net);
  state_.optimizer = OptimizerState::zeros(net.param_count());
  state_.accumulated = Eigen::VectorXf::Zero(net.param_count());
  report_.worker_id = config_.worker_id;
}

template <typename Fn>
auto Replica::with_retry(Fn&& fn) {
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const TransportError&) {
      if (attempt >= config_.max_attempts) throw;
      std::this_thread::sleep_for(config_.retry_backoff);
    }
  }
}

void Replica::fetch() {
  FetchReplyMsg reply = with_retry([&] { return endpoint_->fetch(config_.worker_id); });
  if (static_cast<Index>(reply.params.size()) != net_->param_count()) {
    std::ostringstream os;
    os << "fetched " << reply.params.size() << " parameters, network has " << net_->param_count();
    throw ShapeError(os.str());
  }
  state_.params.values = Eigen::Map<const Eigen::VectorXf>(reply.params.data(), net_->param_count());
  state_.last_fetched_version = reply.version;
  ++report_.fetches;
  if (hooks_.after_fetch) hooks_.after_fetch(state_);
}

void Replica::push() {
  const std::span<const float> delta(state_.accumulated.data(),
                                     static_cast<std::size_t>(state_.accumulated.size()));
  const PushAckMsg ack = with_retry([&] { return endpoint_->push(config_.worker_id, delta); });
  ++report_.pushes;
  if (hooks_.on_push) hooks_.on_push(delta, ack.version);
  state_.accumulated.setZero();
  state_.steps_since_push = 0;
}

void Replica::step() {
  if (done()) return;
  const std::int64_t t = state_.local_step + 1;
  try {
    if ((t - 1) % config_.n_fetch == 0) fetch();
    LocalStepOutcome out = train_one_step(*net_, state_.params, state_.optimizer, config_.hyper,
                                          stream_, dropout_rng_, t);
    out.record.fetched_version = state_.last_fetched_version;
    state_.accumulated += out.delta;
    ++state_.steps_since_push;
    state_.local_step = t;
    report_.steps.push_back(out.record);
    if (hooks_.on_delta) hooks_.on_delta(out.delta);
    if (hooks_.on_step) hooks_.on_step(out.record);
    if (t % config_.n_push == 0 || (t == config_.total_steps && state_.steps_since_push > 0)) {
      push();
    }
  } catch (const std::exception& e) {
    report_.aborted = true;
    std::ostringstream os;
    os << "worker " << config_.worker_id << " aborted at local step " << t << ": " << e.what();
    report_.failure = os.str();
  }
}

ReplicaReport run_replica(const WorkerConfig& config, const CompiledNetwork& net,
                          const Dataset& train, Endpoint& endpoint, ReplicaHooks hooks) {
  Replica replica(config, net, train, endpoint, std::move(hooks));
  while (!replica.done()) replica.step();
  return replica.report();
}

SequentialResult train_sequential(
    const CompiledNetwork& net, const Dataset& train, ParamVector params0,
    const WorkerConfig& config,
    const std::function<void(std::int64_t, const ParamVector&)>& after_step) {
  config.validate();
  SequentialResult result;
  result.params = std::move(params0);
  OptimizerState optimizer = OptimizerState::zeros(net.param_count());
  MinibatchStream stream(train, config.batch_size, config.data_seed, config.augment);
  Rng dropout_rng(config.dropout_seed);
  for (std::int64_t t = 1; t <= config.total_steps; ++t) {
    LocalStepOutcome out =
        train_one_step(net, result.params, optimizer, config.hyper, stream, dropout_rng, t);
    out.record.fetched_version = static_cast<std::uint64_t>(t - 1);
    result.steps.push_back(out.record);
    if (after_step) after_step(t, result.params);
  }
  return result;
}

WarmStartResult warm_start(const CompiledNetwork& net, const Dataset& train,
                           const WarmStartConfig& config) {
  if (config.steps < 0) throw std::invalid_argument("warm start steps must be non-negative");
  WorkerConfig worker;
  worker.total_steps = config.steps;
  worker.batch_size = config.batch_size;
  worker.hyper = config.hyper;
  worker.augment = config.augment;
  const std::uint64_t stream_seed = mix_seed(config.seed, 0x7761726d);
  worker.data_seed = worker_data_seed(stream_seed, 0);
  worker.dropout_seed = worker_dropout_seed(stream_seed, 0);
  SequentialResult run = train_sequential(net, train, init_params(net, init_seed(config.seed)), worker);
  return {std::move(run.params), std::move(run.steps)};
}

}  // namespace asgd
