#include <gtest/gtest.h>

#include <sys/socket.h>
#include <unistd.h>

#include <netinet/in.h>
#include <arpa/inet.h>

#include "asgd/harness.hpp"
#include "asgd/transport.hpp"

namespace asgd {
namespace {

struct Fixture {
  DataSplits data;
  CompiledNetwork net;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    DatasetConfig dc;
    dc.train_per_class = 20;
    dc.test_per_class = 5;
    SyntheticData syn = generate(dc);
    DataSplits d{std::move(syn.train), std::move(syn.test)};
    CompiledNetwork n = build_default_network(d);
    return Fixture{std::move(d), std::move(n)};
  }();
  return f;
}

WorkerConfig worker(std::uint32_t id, std::int64_t n_sync, std::int64_t steps) {
  WorkerConfig c = WorkerConfig::with_sync(id, n_sync, steps);
  c.batch_size = 8;
  c.data_seed = worker_data_seed(1, id);
  c.dropout_seed = worker_dropout_seed(1, id);
  return c;
}

struct Cluster {
  std::vector<std::unique_ptr<Replica>> replicas;
  std::vector<Replica*> handles;
  std::vector<std::vector<float>> pushed;
};

Cluster make_cluster(Endpoint& endpoint, int workers, std::int64_t n_sync, std::int64_t steps,
                     std::mutex* guard = nullptr) {
  Cluster c;
  for (int w = 0; w < workers; ++w) {
    ReplicaHooks hooks;
    hooks.on_push = [&c, guard](std::span<const float> d, std::uint64_t) {
      std::unique_lock<std::mutex> lock;
      if (guard) lock = std::unique_lock(*guard);
      c.pushed.emplace_back(d.begin(), d.end());
    };
    c.replicas.push_back(std::make_unique<Replica>(worker(static_cast<std::uint32_t>(w), n_sync, steps),
                                                   fixture().net, fixture().data.train, endpoint, hooks));
  }
  for (auto& r : c.replicas) c.handles.push_back(r.get());
  return c;
}

// f32 sum of the pushed deltas in the order the server applied them.
Eigen::VectorXf replay(const ParamVector& p0, const std::vector<std::vector<float>>& pushed) {
  Eigen::VectorXf sum = p0.values;
  for (const auto& d : pushed) sum += Eigen::Map<const Eigen::VectorXf>(d.data(), sum.size());
  return sum;
}

TEST(Deterministic, RoundRobinAlternates) {
  const ParamVector p0 = init_params(fixture().net, 1);
  ParameterServer server(p0);
  DeterministicTransport transport(server);
  Cluster c = make_cluster(transport.endpoint(), 2, 1, 4);
  const EventLog log = transport.run({0, SchedulePolicy::RoundRobin}, c.handles);
  std::vector<std::uint32_t> push_order;
  for (const auto& e : log) {
    if (e.kind == EventKind::Push) push_order.push_back(e.worker);
  }
  EXPECT_EQ(push_order, (std::vector<std::uint32_t>{0, 1, 0, 1, 0, 1, 0, 1}));
  EXPECT_EQ(server.version(), 8u);
}

TEST(Deterministic, SameSeedSameLog) {
  const ParamVector p0 = init_params(fixture().net, 1);
  auto once = [&] {
    ParameterServer server(p0);
    DeterministicTransport transport(server);
    Cluster c = make_cluster(transport.endpoint(), 3, 2, 5);
    EventLog log = transport.run({77, SchedulePolicy::SeededRandom}, c.handles);
    return std::make_pair(log, server.params().values);
  };
  const auto a = once();
  const auto b = once();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Deterministic, ServerHoldsSumOfPushes) {
  const ParamVector p0 = init_params(fixture().net, 1);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    ParameterServer server(p0);
    DeterministicTransport transport(server);
    Cluster c = make_cluster(transport.endpoint(), 4, 3, 7);
    transport.run({seed, SchedulePolicy::SeededRandom}, c.handles);
    EXPECT_EQ(server.params().values, replay(p0, c.pushed));
    EXPECT_EQ(server.version(), c.pushed.size());
  }
}

TEST(Concurrent, ServerHoldsSumOfPushes) {
  const ParamVector p0 = init_params(fixture().net, 1);
  ParameterServer server(p0);
  LocalEndpoint endpoint(server);
  std::mutex guard;
  // The hook runs after the push returns, so order in `pushed` may differ from
  // application order; compare with a tolerance instead of bitwise.
  Cluster c = make_cluster(endpoint, 4, 2, 6, &guard);
  run_concurrent(c.handles);
  EXPECT_EQ(server.version(), 12u);
  EXPECT_LT((server.params().values - replay(p0, c.pushed)).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Tcp, HandshakeFetchPushShutdown) {
  ParamVector p0;
  p0.values = Eigen::VectorXf::LinSpaced(100, -1.0f, 1.0f);
  ParameterServer server(p0);
  TcpServer tcp(server, 0);
  TcpEndpoint client("127.0.0.1", tcp.port());
  const FetchReplyMsg first = client.fetch(0);
  EXPECT_EQ(client.param_count(), 100u);
  EXPECT_EQ(first.version, 0u);
  EXPECT_EQ(Eigen::Map<const Eigen::VectorXf>(first.params.data(), 100), p0.values);
  const std::vector<float> delta(100, 0.5f);
  EXPECT_EQ(client.push(0, delta).version, 1u);
  EXPECT_EQ(client.fetch(0).version, 1u);
  // Rejected push: version unchanged in the ack.
  EXPECT_EQ(client.push(0, std::vector<float>(3, 1.0f)).version, 1u);
  client.close();
  tcp.stop();
  EXPECT_EQ(server.params().values, (p0.values.array() + 0.5f).matrix());
}

TEST(Tcp, ClusterSumInvariant) {
  const ParamVector p0 = init_params(fixture().net, 1);
  ParameterServer server(p0);
  TcpServer tcp(server, 0);
  std::vector<std::unique_ptr<TcpEndpoint>> endpoints;
  std::vector<std::unique_ptr<Replica>> replicas;
  std::vector<Replica*> handles;
  std::mutex guard;
  std::vector<std::vector<float>> pushed;
  for (std::uint32_t w = 0; w < 3; ++w) {
    endpoints.push_back(std::make_unique<TcpEndpoint>("127.0.0.1", tcp.port()));
    ReplicaHooks hooks;
    hooks.on_push = [&](std::span<const float> d, std::uint64_t) {
      std::lock_guard lock(guard);
      pushed.emplace_back(d.begin(), d.end());
    };
    replicas.push_back(std::make_unique<Replica>(worker(w, 2, 4), fixture().net, fixture().data.train,
                                                 *endpoints.back(), hooks));
    handles.push_back(replicas.back().get());
  }
  run_concurrent(handles);
  for (auto& e : endpoints) e->close();
  tcp.stop();
  EXPECT_EQ(server.version(), 6u);
  EXPECT_LT((server.params().values - replay(p0, pushed)).cwiseAbs().maxCoeff(), 1e-5f);
  for (auto* r : handles) EXPECT_FALSE(r->report().aborted) << r->report().failure;
}

TEST(Tcp, MalformedFrameCountsProtocolError) {
  ParamVector p0;
  p0.values = Eigen::VectorXf::Zero(4);
  ParameterServer server(p0);
  TcpServer tcp(server, 0);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(tcp.port());
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  Message hello;
  ASSERT_TRUE(receive_frame(fd, hello));
  const std::uint8_t bad[] = {1, 0, 0, 0, 9};
  ASSERT_EQ(::send(fd, bad, sizeof bad, 0), 5);
  Message reply;
  EXPECT_FALSE(receive_frame(fd, reply));  // server hangs up
  ::close(fd);
  tcp.stop();
  EXPECT_EQ(tcp.protocol_errors(), 1u);
  EXPECT_EQ(server.version(), 0u);
}

TEST(Tcp, UnreachableServerAbortsReplica) {
  std::uint16_t port;
  {
    ParamVector p0;
    p0.values = Eigen::VectorXf::Zero(4);
    ParameterServer server(p0);
    TcpServer tcp(server, 0);
    port = tcp.port();
  }
  TcpEndpoint endpoint("127.0.0.1", port);
  WorkerConfig c = worker(0, 1, 3);
  c.retry_backoff = std::chrono::milliseconds(1);
  Replica replica(c, fixture().net, fixture().data.train, endpoint);
  replica.step();
  EXPECT_TRUE(replica.report().aborted);
}

}  // namespace
}  // namespace asgd
