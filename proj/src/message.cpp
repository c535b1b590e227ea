#include "asgd/message.hpp"

#include <cstring>

namespace asgd {

namespace {

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

void read_payload(ByteReader& in, std::vector<float>& out) {
  if (in.remaining() % 4 != 0) {
    in.fail("payload of " + std::to_string(in.remaining()) + " bytes is not an f32 array");
  }
  out.resize(in.remaining() / 4);
  in.f32s(out);
}

void decode_body(std::uint8_t tag, ByteReader& in, Message& msg);

}  // namespace

bool FetchReplyMsg::operator==(const FetchReplyMsg& other) const {
  return version == other.version && same_bits(params, other.params);
}

bool PushMsg::operator==(const PushMsg& other) const {
  return worker_id == other.worker_id && same_bits(delta, other.delta);
}

MessageType message_type(const Message& msg) {
  return static_cast<MessageType>(msg.index() + 1);
}

std::vector<std::uint8_t> encode(const Message& msg) {
  ByteWriter out;
  out.u32(0);
  out.u8(static_cast<std::uint8_t>(message_type(msg)));
  if (const auto* m = std::get_if<FetchMsg>(&msg)) {
    out.u32(m->worker_id);
  } else if (const auto* m = std::get_if<FetchReplyMsg>(&msg)) {
    out.u64(m->version);
    out.f32s(m->params);
  } else if (const auto* m = std::get_if<PushMsg>(&msg)) {
    out.u32(m->worker_id);
    out.f32s(m->delta);
  } else if (const auto* m = std::get_if<PushAckMsg>(&msg)) {
    out.u64(m->version);
  }
  auto bytes = out.take();
  const std::uint32_t length = static_cast<std::uint32_t>(bytes.size() - 4);
  for (int i = 0; i < 4; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(length >> (8 * i));
  return bytes;
}

std::uint32_t frame_length(std::span<const std::uint8_t, 4> header) {
  return static_cast<std::uint32_t>(header[0]) | static_cast<std::uint32_t>(header[1]) << 8 |
         static_cast<std::uint32_t>(header[2]) << 16 | static_cast<std::uint32_t>(header[3]) << 24;
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < 4) {
    throw ProtocolError("truncated frame: " + std::to_string(frame.size()) + " header bytes", 0);
  }
  const std::uint32_t length = frame_length(frame.first<4>());
  if (length == 0) throw ProtocolError("frame length 0 leaves no room for a tag", 0);
  if (frame.size() - 4 < length) {
    throw ProtocolError("truncated frame: declared " + std::to_string(length) + " bytes, received " +
                            std::to_string(frame.size() - 4),
                        frame.size());
  }
  if (frame.size() - 4 > length) {
    throw ProtocolError("trailing bytes after frame", 4 + static_cast<std::size_t>(length));
  }

  const std::uint8_t tag = frame[4];
  ByteReader in(frame.subspan(5), 5);
  Message msg;
  try {
    decode_body(tag, in, msg);
  } catch (const ProtocolError&) {
    throw;
  } catch (const FormatError& e) {
    throw ProtocolError(e.detail(), e.offset());
  }
  return msg;
}

namespace {
void decode_body(std::uint8_t tag, ByteReader& in, Message& msg) {
  switch (tag) {
    case static_cast<std::uint8_t>(MessageType::Fetch):
      msg = FetchMsg{in.u32()};
      break;
    case static_cast<std::uint8_t>(MessageType::FetchReply): {
      FetchReplyMsg m;
      m.version = in.u64();
      read_payload(in, m.params);
      msg = std::move(m);
      break;
    }
    case static_cast<std::uint8_t>(MessageType::Push): {
      PushMsg m;
      m.worker_id = in.u32();
      read_payload(in, m.delta);
      msg = std::move(m);
      break;
    }
    case static_cast<std::uint8_t>(MessageType::PushAck):
      msg = PushAckMsg{in.u64()};
      break;
    case static_cast<std::uint8_t>(MessageType::Shutdown):
      msg = ShutdownMsg{};
      break;
    default:
      throw ProtocolError("unknown message type " + std::to_string(tag), 4);
  }
  if (in.remaining() != 0) in.fail("unexpected trailing bytes in message body");
}
}  // namespace

}  // namespace asgd
