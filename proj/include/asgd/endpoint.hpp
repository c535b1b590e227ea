#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>

#include "asgd/message.hpp"
#include "asgd/server.hpp"

namespace asgd {

/// Connection or protocol failure on the worker side of a transport.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Worker-side view of the parameter server: strictly request/reply.
class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual FetchReplyMsg fetch(std::uint32_t worker_id) = 0;
  virtual PushAckMsg push(std::uint32_t worker_id, std::span<const float> delta) = 0;
};

/// Direct in-process calls into a ParameterServer. Safe to share between
/// threads since the server serializes pushes itself.
class LocalEndpoint : public Endpoint {
 public:
  explicit LocalEndpoint(ParameterServer& server) : server_(&server) {}

  FetchReplyMsg fetch(std::uint32_t worker_id) override;
  PushAckMsg push(std::uint32_t worker_id, std::span<const float> delta) override;

 private:
  ParameterServer* server_;
};

}  // namespace asgd
