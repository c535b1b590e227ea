#include <gtest/gtest.h>

#include "asgd/harness.hpp"
#include "asgd/server.hpp"
#include "asgd/worker.hpp"

namespace asgd {
namespace {

struct Fixture {
  DataSplits data;
  CompiledNetwork net;

  static Fixture make() {
    DatasetConfig dc;
    dc.train_per_class = 20;
    dc.test_per_class = 5;
    SyntheticData syn = generate(dc);
    DataSplits d{std::move(syn.train), std::move(syn.test)};
    CompiledNetwork n = build_default_network(d);
    return {std::move(d), std::move(n)};
  }
};

const Fixture& fixture() {
  static const Fixture f = Fixture::make();
  return f;
}

// Records fetch/push calls with the local step at which they happen.
class TraceEndpoint : public Endpoint {
 public:
  explicit TraceEndpoint(ParameterServer& server) : inner_(server) {}
  FetchReplyMsg fetch(std::uint32_t id) override {
    fetch_steps.push_back(current_step + 1);
    return inner_.fetch(id);
  }
  PushAckMsg push(std::uint32_t id, std::span<const float> delta) override {
    push_steps.push_back(current_step);
    pushed.emplace_back(delta.begin(), delta.end());
    return inner_.push(id, delta);
  }
  std::int64_t current_step = 0;
  std::vector<std::int64_t> fetch_steps, push_steps;
  std::vector<std::vector<float>> pushed;

 private:
  LocalEndpoint inner_;
};

WorkerConfig config(std::int64_t n_fetch, std::int64_t n_push, std::int64_t steps) {
  WorkerConfig c;
  c.n_fetch = n_fetch;
  c.n_push = n_push;
  c.total_steps = steps;
  c.batch_size = 8;
  c.data_seed = 3;
  c.dropout_seed = 4;
  return c;
}

TEST(Replica, FetchAndPushSchedule) {
  const auto& f = fixture();
  ParameterServer server(init_params(f.net, 1));
  TraceEndpoint endpoint(server);
  ReplicaHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { endpoint.current_step = r.local_step; };
  Replica replica(config(4, 4, 10), f.net, f.data.train, endpoint, hooks);
  while (!replica.done()) replica.step();
  EXPECT_EQ(endpoint.fetch_steps, (std::vector<std::int64_t>{1, 5, 9}));
  EXPECT_EQ(endpoint.push_steps, (std::vector<std::int64_t>{4, 8, 10}));
  EXPECT_EQ(replica.report().fetches, 3);
  EXPECT_EQ(replica.report().pushes, 3);
  EXPECT_FALSE(replica.report().aborted);
}

TEST(Replica, PushCarriesSumOfStepDeltas) {
  const auto& f = fixture();
  ParameterServer server(init_params(f.net, 1));
  TraceEndpoint endpoint(server);
  std::vector<Eigen::VectorXf> deltas;
  ReplicaHooks hooks;
  hooks.on_delta = [&](const Eigen::VectorXf& d) { deltas.push_back(d); };
  Replica replica(config(2, 2, 2), f.net, f.data.train, endpoint, hooks);
  while (!replica.done()) replica.step();
  ASSERT_EQ(endpoint.pushed.size(), 1u);
  ASSERT_EQ(deltas.size(), 2u);
  const Eigen::VectorXf sum = deltas[0] + deltas[1];
  const Eigen::Map<const Eigen::VectorXf> pushed(endpoint.pushed[0].data(), sum.size());
  EXPECT_EQ(pushed, sum);
}

TEST(Replica, AccumulatorTracksLocalDrift) {
  const auto& f = fixture();
  ParameterServer server(init_params(f.net, 1));
  LocalEndpoint endpoint(server);
  Eigen::VectorXf anchor;
  ReplicaHooks hooks;
  hooks.after_fetch = [&](const ReplicaState& s) { anchor = s.params.values; };
  Replica replica(config(5, 5, 12), f.net, f.data.train, endpoint, hooks);
  while (!replica.done()) {
    replica.step();
    const ReplicaState& s = replica.state();
    if (s.steps_since_push == 0) continue;
    const Eigen::VectorXf drift = s.params.values - anchor;
    EXPECT_LT((s.accumulated - drift).cwiseAbs().maxCoeff(), 1e-5f);
  }
}

TEST(Replica, VelocitySurvivesFetch) {
  const auto& f = fixture();
  ParameterServer server(init_params(f.net, 1));
  LocalEndpoint endpoint(server);
  std::vector<Eigen::VectorXf> at_fetch;
  ReplicaHooks hooks;
  hooks.after_fetch = [&](const ReplicaState& s) { at_fetch.push_back(s.optimizer.velocity); };
  Replica replica(config(3, 3, 7), f.net, f.data.train, endpoint, hooks);
  while (!replica.done()) replica.step();
  ASSERT_EQ(at_fetch.size(), 3u);
  EXPECT_TRUE(at_fetch[0].isZero(0.0f));
  EXPECT_GT(at_fetch[1].cwiseAbs().maxCoeff(), 0.0f);
}

class FailingEndpoint : public Endpoint {
 public:
  FetchReplyMsg fetch(std::uint32_t) override {
    ++calls;
    throw TransportError("link down");
  }
  PushAckMsg push(std::uint32_t, std::span<const float>) override { throw TransportError("link down"); }
  int calls = 0;
};

TEST(Replica, AbortsAfterRetries) {
  const auto& f = fixture();
  FailingEndpoint endpoint;
  WorkerConfig c = config(1, 1, 5);
  c.retry_backoff = std::chrono::milliseconds(1);
  Replica replica(c, f.net, f.data.train, endpoint);
  replica.step();
  EXPECT_TRUE(replica.done());
  EXPECT_TRUE(replica.report().aborted);
  EXPECT_EQ(endpoint.calls, 3);
  EXPECT_NE(replica.report().failure.find("link down"), std::string::npos);
}

TEST(Replica, InvalidConfigRejected) {
  const auto& f = fixture();
  ParameterServer server(init_params(f.net, 1));
  LocalEndpoint endpoint(server);
  EXPECT_THROW(Replica(config(0, 1, 5), f.net, f.data.train, endpoint), std::invalid_argument);
}

TEST(WarmStart, ZeroStepsReturnsInit) {
  const auto& f = fixture();
  WarmStartConfig wc;
  wc.seed = 5;
  const WarmStartResult r = warm_start(f.net, f.data.train, wc);
  EXPECT_EQ(r.params.values, init_params(f.net, init_seed(5)).values);
  EXPECT_TRUE(r.steps.empty());
}

TEST(WarmStart, Deterministic) {
  const auto& f = fixture();
  WarmStartConfig wc;
  wc.seed = 5;
  wc.steps = 15;
  wc.batch_size = 8;
  const auto a = encode_checkpoint(std::span<const float>(warm_start(f.net, f.data.train, wc).params.values.data(),
                                                          static_cast<std::size_t>(f.net.param_count())));
  const auto b = encode_checkpoint(std::span<const float>(warm_start(f.net, f.data.train, wc).params.values.data(),
                                                          static_cast<std::size_t>(f.net.param_count())));
  EXPECT_EQ(a, b);
}

TEST(WarmStart, DeskScaleImprovesOverInit) {
  ExperimentConfig c;
  const DataSplits data = load_data(c);
  const CompiledNetwork net = build_default_network(data);
  double before = 0, after = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    WarmStartConfig wc;
    wc.seed = seed;
    wc.steps = 2000;
    before += evaluate(net, init_params(net, init_seed(seed)), data.train).error;
    after += evaluate(net, warm_start(net, data.train, wc).params, data.train).error;
  }
  EXPECT_LT(after / 3, before / 3);
}

TEST(Sequential, MatchesReplicaWithoutServerEffects) {
  const auto& f = fixture();
  const ParamVector p0 = init_params(f.net, 2);
  const WorkerConfig c = config(1, 1, 6);
  const SequentialResult seq = train_sequential(f.net, f.data.train, p0, c);
  ParameterServer server(p0);
  LocalEndpoint endpoint(server);
  const ReplicaReport report = run_replica(c, f.net, f.data.train, endpoint);
  EXPECT_EQ(server.params().values, seq.params.values);
  ASSERT_EQ(report.steps.size(), seq.steps.size());
  for (std::size_t i = 0; i < seq.steps.size(); ++i) {
    EXPECT_EQ(report.steps[i].loss, seq.steps[i].loss);
    EXPECT_EQ(report.steps[i].fetched_version, seq.steps[i].fetched_version);
  }
}

}  // namespace
}  // namespace asgd
