#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "asgd/bytes.hpp"
#include "asgd/server.hpp"

namespace asgd {
namespace {

ParamVector constant_params(Index n, float value) {
  ParamVector p;
  p.values = Eigen::VectorXf::Constant(n, value);
  return p;
}

std::vector<float> constant_delta(Index n, float value) {
  return std::vector<float>(static_cast<std::size_t>(n), value);
}

TEST(Server, FreshServerServesInitialParams) {
  ParameterServer server(constant_params(5, 1.5f));
  const Snapshot s = server.handle_fetch();
  EXPECT_EQ(s.version, 0u);
  EXPECT_EQ(s.params, Eigen::VectorXf::Constant(5, 1.5f));
}

TEST(Server, PushAddsDeltaAndCountsVersions) {
  ParameterServer server(constant_params(4, 1.0f));
  const auto d = constant_delta(4, -0.25f);
  const PushResult r = server.handle_push(0, d);
  EXPECT_TRUE(r.accepted);
  EXPECT_EQ(r.version, 1u);
  EXPECT_EQ(server.handle_fetch().params, Eigen::VectorXf::Constant(4, 0.75f));
  server.handle_push(1, d);
  server.handle_push(0, d);
  EXPECT_EQ(server.version(), 3u);
  EXPECT_EQ(server.applied_pushes().at(0), 2u);
}

TEST(Server, PushesAreAdditiveAcrossWorkers) {
  ParameterServer server(constant_params(3, 0.0f));
  const std::vector<float> d1{1.0f, 2.0f, 3.0f};
  const std::vector<float> d2{0.5f, -1.0f, 4.0f};
  server.handle_push(7, d1);
  server.handle_push(2, d2);
  const Eigen::VectorXf expected = Eigen::Vector3f(1.5f, 1.0f, 7.0f);
  EXPECT_EQ(server.handle_fetch().params, expected);
}

TEST(Server, ZeroDeltaBumpsVersionOnly) {
  ParameterServer server = init_server(constant_params(6, 0.0f));
  server.handle_push(0, constant_delta(6, 0.0f));
  const Snapshot s = server.handle_fetch();
  EXPECT_EQ(s.version, 1u);
  EXPECT_TRUE(s.params.isZero(0.0f));
}

TEST(Server, RejectsWrongSizeAndNonFinite) {
  ParameterServer server(constant_params(3, 1.0f));
  const PushResult wrong = server.handle_push(0, constant_delta(2, 1.0f));
  EXPECT_FALSE(wrong.accepted);
  EXPECT_FALSE(wrong.diagnostic.empty());
  std::vector<float> nan{0.0f, std::numeric_limits<float>::infinity(), 0.0f};
  EXPECT_FALSE(server.handle_push(0, nan).accepted);
  EXPECT_EQ(server.version(), 0u);
  EXPECT_EQ(server.rejected_pushes(), 2u);
  EXPECT_EQ(server.handle_fetch().params, Eigen::VectorXf::Constant(3, 1.0f));
}

// Every push adds the same constant, so a consistent snapshot taken at
// version v is exactly p0 + v * c in every coordinate.
TEST(Server, ConcurrentFetchSeesOneVersion) {
  constexpr Index kSize = 4096;
  constexpr int kWorkers = 32;
  constexpr int kPushesEach = 40;
  ParameterServer server(constant_params(kSize, 0.0f));
  std::atomic<bool> done{false};
  std::atomic<int> torn{0};
  std::atomic<int> fetches{0};
  std::thread reader([&] {
    while (!done.load()) {
      const Snapshot s = server.handle_fetch();
      const float expected = static_cast<float>(s.version) * 0.5f;
      if (!(s.params.array() == expected).all()) ++torn;
      ++fetches;
    }
  });
  std::vector<std::thread> writers;
  for (int w = 0; w < kWorkers; ++w) {
    writers.emplace_back([&, w] {
      const auto d = constant_delta(kSize, 0.5f);
      for (int i = 0; i < kPushesEach; ++i) server.handle_push(static_cast<std::uint32_t>(w), d);
    });
  }
  for (auto& t : writers) t.join();
  done = true;
  reader.join();
  EXPECT_EQ(torn.load(), 0);
  EXPECT_GT(fetches.load(), 0);
  EXPECT_EQ(server.version(), static_cast<std::uint64_t>(kWorkers * kPushesEach));
  EXPECT_TRUE((server.handle_fetch().params.array() == 0.5f * kWorkers * kPushesEach).all());
}

// Dyadic deltas make f32 addition exact, so any order gives the same sum.
TEST(Server, RandomInterleavingsSumExactly) {
  constexpr Index kSize = 64;
  constexpr int kWorkers = 6;
  Rng rng(12);
  std::vector<std::vector<float>> deltas(kWorkers, std::vector<float>(kSize));
  Eigen::VectorXf expected = Eigen::VectorXf::Constant(kSize, 1.0f);
  for (auto& d : deltas) {
    for (Index i = 0; i < kSize; ++i) {
      d[static_cast<std::size_t>(i)] = static_cast<float>(static_cast<int>(rng.index(65)) - 32) / 64.0f;
      expected[i] += d[static_cast<std::size_t>(i)];
    }
  }
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> order(kWorkers);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<int>(order));
    ParameterServer server(constant_params(kSize, 1.0f));
    for (int w : order) server.handle_push(static_cast<std::uint32_t>(w), deltas[static_cast<std::size_t>(w)]);
    EXPECT_EQ(server.handle_fetch().params, expected);
  }
}

TEST(Checkpoint, ByteLayout) {
  const std::vector<float> values{1.0f, -2.0f};
  const auto bytes = encode_checkpoint(values);
  const std::vector<std::uint8_t> expected{'A', 'S', 'G', 'D', 1, 0, 2, 0, 0, 0, 0, 0, 0, 0,
                                           0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(bytes, expected);
  EXPECT_EQ(decode_checkpoint(bytes), values);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  auto bytes = encode_checkpoint(std::vector<float>{1.0f, 2.0f, 3.0f});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
  const CompiledNetwork net = build_network(default_network_spec());
  const ParamVector p = init_params(net, 21);
  const auto path = std::filesystem::temp_directory_path() / "asgd_test_roundtrip.ckpt";
  save_checkpoint(path.string(), p);
  const ParamVector back = load_checkpoint(path.string(), net);
  ASSERT_EQ(back.values.size(), p.values.size());
  EXPECT_EQ(std::memcmp(back.values.data(), p.values.data(), sizeof(float) * p.values.size()), 0);
  EXPECT_TRUE(back.same_layout(net.layout()));

  ParameterServer server(back);
  EXPECT_EQ(server.handle_fetch().params, p.values);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CountMismatchRejected) {
  NetworkSpec spec;
  spec.input = {1, 2, 2, false};
  spec.classes = 2;
  spec.layers = {FullyConnected{4, 2}, SoftmaxXent{}};
  const CompiledNetwork small = build_network(spec);
  const CompiledNetwork big = build_network(default_network_spec());
  const auto path = std::filesystem::temp_directory_path() / "asgd_test_mismatch.ckpt";
  save_checkpoint(path.string(), init_params(small, 1));
  EXPECT_THROW(load_checkpoint(path.string(), big), std::exception);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace asgd
