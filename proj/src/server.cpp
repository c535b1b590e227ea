#include "asgd/server.hpp"

#include <cstdio>
#include <sstream>

#include "asgd/bytes.hpp"

namespace asgd {

ParameterServer::ParameterServer(ParamVector params0)
    : layout_(std::move(params0.layout)),
      param_count_(params0.values.size()),
      params_(std::move(params0.values)) {}

Snapshot ParameterServer::handle_fetch() const {
  std::shared_lock lock(mutex_);
  return {params_, version_};
}

PushResult ParameterServer::handle_push(std::uint32_t worker_id, std::span<const float> delta) {
  std::string problem;
  if (static_cast<Index>(delta.size()) != param_count_) {
    std::ostringstream os;
    os << "push from worker " << worker_id << " rejected: " << delta.size()
       << " values, expected " << param_count_;
    problem = os.str();
  } else {
    const Eigen::Map<const Eigen::VectorXf> d(delta.data(), param_count_);
    if (!d.allFinite()) {
      std::ostringstream os;
      os << "push from worker " << worker_id << " rejected: non-finite delta";
      problem = os.str();
    }
  }

  std::unique_lock lock(mutex_);
  if (!problem.empty()) {
    ++rejected_;
    std::fprintf(stderr, "[server] %s\n", problem.c_str());
    return {false, version_, problem};
  }
  params_ += Eigen::Map<const Eigen::VectorXf>(delta.data(), param_count_);
  ++version_;
  ++applied_[worker_id];
  return {true, version_, {}};
}

std::uint64_t ParameterServer::version() const {
  std::shared_lock lock(mutex_);
  return version_;
}

std::uint64_t ParameterServer::rejected_pushes() const {
  std::shared_lock lock(mutex_);
  return rejected_;
}

std::map<std::uint32_t, std::uint64_t> ParameterServer::applied_pushes() const {
  std::shared_lock lock(mutex_);
  return applied_;
}

ParamVector ParameterServer::params() const {
  std::shared_lock lock(mutex_);
  return {layout_, params_};
}

ParameterServer init_server(ParamVector params0) { return ParameterServer(std::move(params0)); }

std::vector<std::uint8_t> encode_checkpoint(std::span<const float> values) {
  ByteWriter out;
  out.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("ASGD"), 4));
  out.u16(kCheckpointVersion);
  out.u64(values.size());
  out.f32s(values);
  return out.take();
}

std::vector<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const auto magic = in.raw(4);
  if (std::memcmp(magic.data(), "ASGD", 4) != 0) in.fail("bad checkpoint magic");
  const std::uint16_t version = in.u16();
  if (version != kCheckpointVersion) {
    in.fail("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t count = in.u64();
  if (count > in.remaining() / 4) in.fail("checkpoint declares " + std::to_string(count) + " values");
  std::vector<float> values(count);
  in.f32s(values);
  if (in.remaining() != 0) in.fail("trailing bytes after checkpoint payload");
  return values;
}

void save_checkpoint(const std::string& path, const ParamVector& params) {
  write_file(path, encode_checkpoint({params.values.data(), static_cast<std::size_t>(params.size())}));
}

ParamVector load_checkpoint(const std::string& path, const CompiledNetwork& net) {
  const auto values = decode_checkpoint(read_file(path));
  if (static_cast<Index>(values.size()) != net.param_count()) {
    std::ostringstream os;
    os << "checkpoint " << path << " holds " << values.size() << " values, network expects "
       << net.param_count();
    throw ShapeError(os.str());
  }
  ParamVector params = zero_params(net);
  std::copy(values.begin(), values.end(), params.values.data());
  return params;
}

}  // namespace asgd
