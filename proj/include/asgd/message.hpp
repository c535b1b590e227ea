#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "asgd/bytes.hpp"

namespace asgd {

class ProtocolError : public FormatError {
 public:
  using FormatError::FormatError;
};

enum class MessageType : std::uint8_t {
  Fetch = 1,
  FetchReply = 2,
  Push = 3,
  PushAck = 4,
  Shutdown = 5,
};

struct FetchMsg {
  std::uint32_t worker_id = 0;
  bool operator==(const FetchMsg&) const = default;
};

struct FetchReplyMsg {
  std::uint64_t version = 0;
  std::vector<float> params;
  bool operator==(const FetchReplyMsg&) const;
};

struct PushMsg {
  std::uint32_t worker_id = 0;
  std::vector<float> delta;
  bool operator==(const PushMsg&) const;
};

struct PushAckMsg {
  std::uint64_t version = 0;
  bool operator==(const PushAckMsg&) const = default;
};

struct ShutdownMsg {
  bool operator==(const ShutdownMsg&) const = default;
};

using Message = std::variant<FetchMsg, FetchReplyMsg, PushMsg, PushAckMsg, ShutdownMsg>;

MessageType message_type(const Message& msg);

/// Frame length field plus the tag byte.
inline constexpr std::size_t kFrameHeader = 5;
/// Upper bound on a frame body accepted from the wire (1 GiB).
inline constexpr std::uint32_t kMaxFrameLength = 1u << 30;

/// u32 LE length (tag + body), u8 tag, body.
std::vector<std::uint8_t> encode(const Message& msg);

/// Decodes exactly one complete frame. Throws ProtocolError on an unknown
/// tag, truncation, trailing bytes, or a payload that is not a whole number
/// of f32 values.
Message decode(std::span<const std::uint8_t> frame);

/// Length of the frame whose first four bytes are `header`.
std::uint32_t frame_length(std::span<const std::uint8_t, 4> header);

}  // namespace asgd
