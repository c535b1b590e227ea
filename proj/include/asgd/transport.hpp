#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "asgd/endpoint.hpp"
#include "asgd/message.hpp"
#include "asgd/server.hpp"
#include "asgd/worker.hpp"

namespace asgd {

// ---------------------------------------------------------------------------
// Deterministic scheduler
// ---------------------------------------------------------------------------

enum class SchedulePolicy { RoundRobin, SeededRandom };

struct Schedule {
  std::uint64_t seed = 0;
  SchedulePolicy policy = SchedulePolicy::RoundRobin;
};

enum class EventKind { Fetch, Push };

struct Event {
  EventKind kind = EventKind::Fetch;
  std::uint32_t worker = 0;
  std::uint64_t version = 0;  // version returned by the fetch / created by the push
  bool operator==(const Event&) const = default;
};

using EventLog = std::vector<Event>;

/// Single-threaded transport: worker steps run one at a time in schedule
/// order and server calls are inlined, so the event log and final params
/// are pure functions of the seeds.
class DeterministicTransport {
 public:
  explicit DeterministicTransport(ParameterServer& server) : server_(&server), endpoint_(this) {}
  DeterministicTransport(const DeterministicTransport&) = delete;
  DeterministicTransport& operator=(const DeterministicTransport&) = delete;

  /// Endpoint to hand to replicas; records every call in the event log.
  Endpoint& endpoint() { return endpoint_; }

  /// Steps runnable replicas until all are done. `after_step` runs after
  /// every worker step with the 1-based global tick.
  EventLog run(const Schedule& schedule, std::span<Replica* const> replicas,
               const std::function<void(std::int64_t tick, const Replica&)>& after_step = {});

  const EventLog& events() const { return log_; }

 private:
  class RecordingEndpoint : public Endpoint {
   public:
    explicit RecordingEndpoint(DeterministicTransport* owner) : owner_(owner) {}
    FetchReplyMsg fetch(std::uint32_t worker_id) override;
    PushAckMsg push(std::uint32_t worker_id, std::span<const float> delta) override;

   private:
    DeterministicTransport* owner_;
  };

  ParameterServer* server_;
  RecordingEndpoint endpoint_;
  EventLog log_;
};

EventLog run_deterministic(const Schedule& schedule, DeterministicTransport& transport,
                           std::span<Replica* const> replicas);

// ---------------------------------------------------------------------------
// Concurrent in-process transport
// ---------------------------------------------------------------------------

/// One thread per replica, all calling into the server through their own
/// endpoints (typically LocalEndpoint). Returns once every replica is done.
void run_concurrent(std::span<Replica* const> replicas);

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

/// Blocking socket helpers that move whole frames.
void send_frame(int fd, const Message& msg);
/// Reads one frame; returns false on orderly EOF before any byte.
bool receive_frame(int fd, Message& msg);

/// Serves a ParameterServer over TCP, one handler thread per connection.
/// On connect the handler sends FetchReply{version, params}, then answers
/// Fetch with FetchReply and Push with PushAck until Shutdown or EOF.
class TcpServer {
 public:
  /// Port 0 binds an ephemeral port; see port().
  TcpServer(ParameterServer& server, std::uint16_t port, const std::string& bind_address = "127.0.0.1");
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  std::uint16_t port() const { return port_; }
  std::uint64_t protocol_errors() const { return protocol_errors_.load(); }
  void stop();

 private:
  void accept_loop();
  void serve(int fd);

  ParameterServer* server_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> protocol_errors_{0};
  std::thread acceptor_;
  std::mutex connections_mutex_;
  std::vector<int> connection_fds_;
  std::vector<std::thread> handlers_;
};

/// Worker side of the TCP transport. Reconnects lazily after a failure;
/// every error surfaces as TransportError so the replica's retry applies.
class TcpEndpoint : public Endpoint {
 public:
  TcpEndpoint(std::string host, std::uint16_t port);
  ~TcpEndpoint() override;
  TcpEndpoint(const TcpEndpoint&) = delete;
  TcpEndpoint& operator=(const TcpEndpoint&) = delete;

  FetchReplyMsg fetch(std::uint32_t worker_id) override;
  PushAckMsg push(std::uint32_t worker_id, std::span<const float> delta) override;

  /// Sends Shutdown and closes the connection.
  void close();
  /// Parameter count announced by the server's handshake (after connecting).
  std::size_t param_count() const { return param_count_; }

 private:
  void ensure_connected();
  void drop();
  Message round_trip(const Message& request);

  std::string host_;
  std::uint16_t port_;
  int fd_ = -1;
  std::size_t param_count_ = 0;
};

}  // namespace asgd
