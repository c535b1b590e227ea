#include "asgd/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <sstream>

namespace asgd {

// ---------------------------------------------------------------------------
// Deterministic transport
// ---------------------------------------------------------------------------

FetchReplyMsg DeterministicTransport::RecordingEndpoint::fetch(std::uint32_t worker_id) {
  Snapshot snap = owner_->server_->handle_fetch();
  owner_->log_.push_back({EventKind::Fetch, worker_id, snap.version});
  return {snap.version, std::vector<float>(snap.params.data(), snap.params.data() + snap.params.size())};
}

PushAckMsg DeterministicTransport::RecordingEndpoint::push(std::uint32_t worker_id,
                                                           std::span<const float> delta) {
  const PushResult result = owner_->server_->handle_push(worker_id, delta);
  if (result.accepted) owner_->log_.push_back({EventKind::Push, worker_id, result.version});
  return {result.version};
}

EventLog DeterministicTransport::run(
    const Schedule& schedule, std::span<Replica* const> replicas,
    const std::function<void(std::int64_t, const Replica&)>& after_step) {
  Rng rng(schedule.seed);
  std::size_t cursor = 0;
  std::int64_t tick = 0;
  std::vector<std::size_t> runnable;
  runnable.reserve(replicas.size());
  for (;;) {
    runnable.clear();
    for (std::size_t i = 0; i < replicas.size(); ++i) {
      if (!replicas[i]->done()) runnable.push_back(i);
    }
    if (runnable.empty()) break;

    std::size_t pick = runnable.front();
    if (schedule.policy == SchedulePolicy::RoundRobin) {
      for (std::size_t k = 0; k < replicas.size(); ++k) {
        const std::size_t candidate = (cursor + k) % replicas.size();
        if (!replicas[candidate]->done()) {
          pick = candidate;
          break;
        }
      }
      cursor = pick + 1;
    } else {
      pick = runnable[static_cast<std::size_t>(rng.index(runnable.size()))];
    }
    replicas[pick]->step();
    ++tick;
    if (after_step) after_step(tick, *replicas[pick]);
  }
  return log_;
}

EventLog run_deterministic(const Schedule& schedule, DeterministicTransport& transport,
                           std::span<Replica* const> replicas) {
  return transport.run(schedule, replicas);
}

// ---------------------------------------------------------------------------
// Concurrent transport
// ---------------------------------------------------------------------------

void run_concurrent(std::span<Replica* const> replicas) {
  std::vector<std::thread> threads;
  threads.reserve(replicas.size());
  for (Replica* replica : replicas) {
    threads.emplace_back([replica] {
      while (!replica->done()) replica->step();
    });
  }
  for (auto& t : threads) t.join();
}

// ---------------------------------------------------------------------------
// TCP framing
// ---------------------------------------------------------------------------

namespace {

std::string errno_text(const char* what) {
  std::ostringstream os;
  os << what << ": " << std::strerror(errno);
  return os.str();
}

void send_all(int fd, const std::uint8_t* data, std::size_t size) {
  while (size > 0) {
    const ssize_t n = ::send(fd, data, size, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_text("send"));
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

// Returns the number of bytes read; less than `size` only on EOF.
std::size_t recv_all(int fd, std::uint8_t* data, std::size_t size) {
  std::size_t got = 0;
  while (got < size) {
    const ssize_t n = ::recv(fd, data + got, size - got, 0);
    if (n == 0) break;
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_text("recv"));
    }
    got += static_cast<std::size_t>(n);
  }
  return got;
}

}  // namespace

void send_frame(int fd, const Message& msg) {
  const auto bytes = encode(msg);
  send_all(fd, bytes.data(), bytes.size());
}

bool receive_frame(int fd, Message& msg) {
  std::vector<std::uint8_t> frame(4);
  const std::size_t got = recv_all(fd, frame.data(), 4);
  if (got == 0) return false;
  if (got < 4) throw TransportError("connection closed inside a frame header");
  const std::uint32_t length = frame_length(std::span<const std::uint8_t, 4>(frame.data(), 4));
  if (length > kMaxFrameLength) {
    throw ProtocolError("frame length " + std::to_string(length) + " exceeds limit", 0);
  }
  frame.resize(4 + static_cast<std::size_t>(length));
  if (recv_all(fd, frame.data() + 4, length) < length) {
    throw TransportError("connection closed inside a frame body");
  }
  msg = decode(frame);
  return true;
}

// ---------------------------------------------------------------------------
// TCP server
// ---------------------------------------------------------------------------

TcpServer::TcpServer(ParameterServer& server, std::uint16_t port, const std::string& bind_address)
    : server_(&server) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw TransportError(errno_text("socket"));
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, bind_address.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw TransportError("invalid bind address " + bind_address);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 ||
      ::listen(listen_fd_, 64) < 0) {
    const std::string message = errno_text("bind/listen");
    ::close(listen_fd_);
    throw TransportError(message);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

TcpServer::~TcpServer() { stop(); }

void TcpServer::stop() {
  if (stopping_.exchange(true)) return;
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(connections_mutex_);
    for (int fd : connection_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : handlers_) t.join();
  ::close(listen_fd_);
}

void TcpServer::accept_loop() {
  while (!stopping_.load()) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 50);
    if (ready <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(connections_mutex_);
    connection_fds_.push_back(fd);
    handlers_.emplace_back([this, fd] { serve(fd); });
  }
}

void TcpServer::serve(int fd) {
  try {
    Snapshot snap = server_->handle_fetch();
    send_frame(fd, FetchReplyMsg{snap.version, {snap.params.data(), snap.params.data() + snap.params.size()}});
    Message request;
    while (!stopping_.load() && receive_frame(fd, request)) {
      if (std::holds_alternative<FetchMsg>(request)) {
        snap = server_->handle_fetch();
        send_frame(fd, FetchReplyMsg{snap.version, {snap.params.data(), snap.params.data() + snap.params.size()}});
      } else if (const auto* push = std::get_if<PushMsg>(&request)) {
        const PushResult result = server_->handle_push(push->worker_id, push->delta);
        send_frame(fd, PushAckMsg{result.version});
      } else if (std::holds_alternative<ShutdownMsg>(request)) {
        break;
      } else {
        ++protocol_errors_;
        break;
      }
    }
  } catch (const ProtocolError&) {
    ++protocol_errors_;
  } catch (const std::exception&) {
    // Connection-level failure; the worker's retry policy handles it.
  }
  std::lock_guard lock(connections_mutex_);
  ::close(fd);
  std::erase(connection_fds_, fd);
}

// ---------------------------------------------------------------------------
// TCP endpoint
// ---------------------------------------------------------------------------

TcpEndpoint::TcpEndpoint(std::string host, std::uint16_t port) : host_(std::move(host)), port_(port) {}

TcpEndpoint::~TcpEndpoint() {
  try {
    close();
  } catch (...) {
  }
}

void TcpEndpoint::ensure_connected() {
  if (fd_ >= 0) return;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const std::string service = std::to_string(port_);
  if (::getaddrinfo(host_.c_str(), service.c_str(), &hints, &found) != 0 || found == nullptr) {
    throw TransportError("cannot resolve " + host_);
  }
  const int fd = ::socket(found->ai_family, found->ai_socktype, found->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(found);
    throw TransportError(errno_text("socket"));
  }
  const int rc = ::connect(fd, found->ai_addr, found->ai_addrlen);
  ::freeaddrinfo(found);
  if (rc < 0) {
    const std::string message = errno_text("connect");
    ::close(fd);
    throw TransportError(message);
  }
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  timeval timeout{60, 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &timeout, sizeof timeout);
  fd_ = fd;
  try {
    Message hello;
    if (!receive_frame(fd_, hello)) throw TransportError("server closed before handshake");
    const auto* reply = std::get_if<FetchReplyMsg>(&hello);
    if (reply == nullptr) throw TransportError("handshake was not a FetchReply");
    param_count_ = reply->params.size();
  } catch (const TransportError&) {
    drop();
    throw;
  } catch (const std::exception& e) {
    drop();
    throw TransportError(std::string("handshake failed: ") + e.what());
  }
}

void TcpEndpoint::drop() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Message TcpEndpoint::round_trip(const Message& request) {
  ensure_connected();
  try {
    send_frame(fd_, request);
    Message reply;
    if (!receive_frame(fd_, reply)) throw TransportError("server closed the connection");
    return reply;
  } catch (const TransportError&) {
    drop();
    throw;
  } catch (const std::exception& e) {
    drop();
    throw TransportError(e.what());
  }
}

FetchReplyMsg TcpEndpoint::fetch(std::uint32_t worker_id) {
  Message reply = round_trip(FetchMsg{worker_id});
  auto* fetched = std::get_if<FetchReplyMsg>(&reply);
  if (fetched == nullptr) {
    drop();
    throw TransportError("expected FetchReply");
  }
  if (fetched->params.size() != param_count_) {
    drop();
    throw TransportError("FetchReply payload disagrees with handshake parameter count");
  }
  return std::move(*fetched);
}

PushAckMsg TcpEndpoint::push(std::uint32_t worker_id, std::span<const float> delta) {
  Message reply = round_trip(PushMsg{worker_id, {delta.begin(), delta.end()}});
  const auto* ack = std::get_if<PushAckMsg>(&reply);
  if (ack == nullptr) {
    drop();
    throw TransportError("expected PushAck");
  }
  return *ack;
}

void TcpEndpoint::close() {
  if (fd_ < 0) return;
  try {
    send_frame(fd_, ShutdownMsg{});
  } catch (const std::exception&) {
  }
  drop();
}

}  // namespace asgd
