#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "asgd/model.hpp"

namespace asgd {

struct Snapshot {
  Eigen::VectorXf params;
  std::uint64_t version = 0;
};

struct PushResult {
  bool accepted = false;
  std::uint64_t version = 0;
  std::string diagnostic;
};

/// Holds the authoritative parameters. Pushed deltas are added verbatim in
/// arrival order; there is no server-side learning rate.
///
/// Pushes are serialized; fetches may run concurrently with them and always
/// observe exactly one version.
class ParameterServer {
 public:
  explicit ParameterServer(ParamVector params0);
  ParameterServer(const ParameterServer&) = delete;
  ParameterServer& operator=(const ParameterServer&) = delete;

  Snapshot handle_fetch() const;
  PushResult handle_push(std::uint32_t worker_id, std::span<const float> delta);

  std::uint64_t version() const;
  std::uint64_t rejected_pushes() const;
  std::map<std::uint32_t, std::uint64_t> applied_pushes() const;
  Index param_count() const { return param_count_; }

  /// Current parameters with their layout attached.
  ParamVector params() const;

 private:
  mutable std::shared_mutex mutex_;
  std::shared_ptr<const ParamLayout> layout_;
  Index param_count_;
  Eigen::VectorXf params_;
  std::uint64_t version_ = 0;
  std::uint64_t rejected_ = 0;
  std::map<std::uint32_t, std::uint64_t> applied_;
};

ParameterServer init_server(ParamVector params0);

// Checkpoint file: "ASGD", u16 format version, u64 count, count x f32 (LE).
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(std::span<const float> values);
std::vector<float> decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const ParamVector& params);
/// Loads a checkpoint and attaches `net`'s layout; the count must match.
ParamVector load_checkpoint(const std::string& path, const CompiledNetwork& net);

}  // namespace asgd
