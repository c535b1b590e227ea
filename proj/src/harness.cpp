#include "asgd/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "asgd/server.hpp"

namespace asgd {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& value, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' expects an integer, got '" + value + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  const std::int64_t parsed = parse_int(key, value);
  if (parsed < 0) throw std::invalid_argument("config key '" + key + "' must be non-negative");
  return static_cast<std::uint64_t>(parsed);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' expects a number, got '" + value + "'");
  }
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& key, const std::string& value, Parse parse) {
  std::vector<T> out;
  for (const auto& item : split_list(value)) out.push_back(static_cast<T>(parse(key, item)));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i) os << (i ? "," : "") << items[i];
  return os.str();
}

// Shortest round-trip text for a double.
std::string num(double v) {
  char buf[64];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string opt_num(const std::optional<double>& v) {
  if (!v) return "na";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

std::string opt_int(const std::optional<std::int64_t>& v) {
  return v ? std::to_string(*v) : std::string("not_reached");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string seed_dir(const std::string& root, std::uint64_t seed) {
  return (fs::path(root) / ("seed_" + std::to_string(seed))).string();
}

ClusterSpec cluster_spec(const ExperimentConfig& config, int workers, std::int64_t n_sync, std::uint64_t seed) {
  ClusterSpec spec;
  spec.workers = workers;
  spec.n_sync = n_sync;
  spec.steps = config.steps;
  spec.seed = seed;
  spec.transport = config.transport;
  spec.schedule = config.schedule;
  spec.batch = config.batch;
  spec.hyper = config.hyper;
  spec.augment = config.augment;
  spec.eval_every = config.eval_every;
  spec.port = config.port;
  return spec;
}

struct Context {
  DataSplits data;
  CompiledNetwork net;
};

Context make_context(const ExperimentConfig& config) {
  config.validate();
  DataSplits data = load_data(config);
  CompiledNetwork net = build_default_network(data);
  return {std::move(data), std::move(net)};
}

std::string cell_summary_text(const std::string& title, const CellSummary& cell) {
  return "# " + title + "\n" + format_cell_header() + "\n" + format_cell(cell) + "\n";
}

LearningCurve warm_curve(const std::vector<StepRecord>& steps) {
  LearningCurve curve;
  for (const auto& s : steps) {
    curve.rows.push_back({s.local_step, 0, s.local_step, s.fetched_version, Split::Train, s.loss, s.error});
  }
  return curve;
}

// Assembles the CSV rows a cluster emits and decides when test rows are due.
class Recorder {
 public:
  Recorder(const CompiledNetwork& net, const Dataset& test, std::int64_t eval_every)
      : net_(&net), test_(&test), eval_every_(eval_every) {}

  void train(std::int64_t wall_ms, int worker, const StepRecord& r) {
    log_.append({wall_ms, worker, r.local_step, r.fetched_version, Split::Train, r.loss, r.error});
  }

  // Returns true if a test row was written.
  bool maybe_test(std::int64_t wall_ms, std::uint64_t version, const std::function<ParamVector()>& params,
                  bool force) {
    if (test_->size() == 0) return false;
    const bool due = eval_every_ > 0 && version >= next_eval_;
    if (!due && !(force && version != last_eval_)) return false;
    if (version == last_eval_) return false;
    const EvalResult e = evaluate(*net_, params(), *test_);
    log_.append({wall_ms, -1, static_cast<std::int64_t>(version), version, Split::Test, e.loss, e.error});
    last_eval_ = version;
    if (eval_every_ > 0) {
      const auto every = static_cast<std::uint64_t>(eval_every_);
      next_eval_ = (version / every + 1) * every;
    }
    return true;
  }

  LearningCurve curve() const { return log_.curve(); }

 private:
  const CompiledNetwork* net_;
  const Dataset* test_;
  std::int64_t eval_every_;
  std::uint64_t next_eval_ = static_cast<std::uint64_t>(std::max<std::int64_t>(eval_every_, 1));
  std::uint64_t last_eval_ = std::numeric_limits<std::uint64_t>::max();
  CurveLog log_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::Single: return "single";
    case Scenario::E1: return "e1";
    case Scenario::E2: return "e2";
    case Scenario::E3: return "e3";
  }
  return "?";
}

const char* transport_name(TransportKind t) {
  switch (t) {
    case TransportKind::Deterministic: return "deterministic";
    case TransportKind::Concurrent: return "concurrent";
    case TransportKind::Tcp: return "tcp";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  if (workers.empty()) throw std::invalid_argument("workers list must not be empty");
  if (seeds.empty()) throw std::invalid_argument("seeds list must not be empty");
  if (n_sync.empty()) throw std::invalid_argument("n_sync list must not be empty");
  for (int w : workers) {
    if (w < 1) throw std::invalid_argument("worker counts must be positive");
  }
  for (auto n : n_sync) {
    if (n < 1) throw std::invalid_argument("n_sync values must be positive");
  }
  if (resolved_warm_steps() < 0) throw std::invalid_argument("warm_steps must be non-negative");
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (batch < 1) throw std::invalid_argument("batch must be positive");
  if (window < 1) throw std::invalid_argument("window must be positive");
  if (eval_every < 0) throw std::invalid_argument("eval_every must be non-negative");
  if (!(target_error > 0.0 && target_error < 1.0)) throw std::invalid_argument("target_error must lie in (0, 1)");
  hyper.validate();
  dataset.validate();
}

ExperimentConfig default_config(Scenario scenario) {
  ExperimentConfig config;
  config.scenario = scenario;
  switch (scenario) {
    case Scenario::Single:
      break;
    case Scenario::E1:
      config.workers = {ReferenceScale::e1_workers};
      config.n_sync = {ReferenceScale::e1_n_sync / ReferenceScale::n_sync_divisor};
      config.eval_every = 100;
      break;
    case Scenario::E2:
      config.workers = {1, 2, 4, 8};
      config.n_sync = {ReferenceScale::e1_n_sync / ReferenceScale::n_sync_divisor};
      break;
    case Scenario::E3:
      config.workers = {1, 2, 4, 8};
      config.n_sync = {10, 30, 60, 90};
      config.warm_steps = -1;
      break;
  }
  return config;
}

std::vector<std::string> config_keys() {
  return {"scenario", "workers", "n_sync", "warm_steps", "steps", "transport", "schedule", "seeds",
          "classes", "train_per_class", "test_per_class", "image_size", "noise_std",
          "prototype_scale", "smoothness", "data_seed", "dataset_file", "test_file", "base_lr",
          "momentum", "weight_decay", "lr_schedule", "batch", "window", "eval_every", "pad",
          "flip_prob", "target_error", "port", "out"};
}

void apply_setting(ExperimentConfig& c, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  if (key == "scenario") {
    if (value == "single" || value == "train") {
      c.scenario = Scenario::Single;
    } else if (value == "e1") {
      c.scenario = Scenario::E1;
    } else if (value == "e2") {
      c.scenario = Scenario::E2;
    } else if (value == "e3") {
      c.scenario = Scenario::E3;
    } else {
      throw std::invalid_argument("unknown scenario '" + value + "'");
    }
  } else if (key == "workers") {
    c.workers = parse_list<int>(key, value, parse_int);
  } else if (key == "n_sync") {
    c.n_sync = parse_list<std::int64_t>(key, value, parse_int);
  } else if (key == "warm_steps") {
    c.warm_steps = value == "auto" ? -1 : parse_int(key, value);
  } else if (key == "steps") {
    c.steps = parse_int(key, value);
  } else if (key == "transport") {
    if (value == "deterministic") {
      c.transport = TransportKind::Deterministic;
    } else if (value == "concurrent") {
      c.transport = TransportKind::Concurrent;
    } else if (value == "tcp") {
      c.transport = TransportKind::Tcp;
    } else {
      throw std::invalid_argument("unknown transport '" + value + "'");
    }
  } else if (key == "schedule") {
    if (value == "round_robin") {
      c.schedule = SchedulePolicy::RoundRobin;
    } else if (value == "seeded_random") {
      c.schedule = SchedulePolicy::SeededRandom;
    } else {
      throw std::invalid_argument("unknown schedule '" + value + "'");
    }
  } else if (key == "seeds") {
    c.seeds = parse_list<std::uint64_t>(key, value, parse_uint);
  } else if (key == "classes") {
    c.dataset.classes = static_cast<int>(parse_int(key, value));
  } else if (key == "train_per_class") {
    c.dataset.train_per_class = static_cast<int>(parse_int(key, value));
  } else if (key == "test_per_class") {
    c.dataset.test_per_class = static_cast<int>(parse_int(key, value));
  } else if (key == "image_size") {
    c.dataset.height = c.dataset.width = parse_int(key, value);
  } else if (key == "noise_std") {
    c.dataset.noise_std = parse_double(key, value);
  } else if (key == "prototype_scale") {
    c.dataset.prototype_scale = parse_double(key, value);
  } else if (key == "smoothness") {
    c.dataset.smoothness = parse_double(key, value);
  } else if (key == "data_seed") {
    c.dataset.seed = parse_uint(key, value);
  } else if (key == "dataset_file") {
    c.dataset_file = value;
  } else if (key == "test_file") {
    c.test_file = value;
  } else if (key == "base_lr") {
    c.hyper.base_lr = parse_double(key, value);
  } else if (key == "momentum") {
    c.hyper.momentum = parse_double(key, value);
  } else if (key == "weight_decay") {
    c.hyper.weight_decay = parse_double(key, value);
  } else if (key == "lr_schedule") {
    c.hyper.lr_schedule.clear();
    for (const auto& item : split_list(value)) {
      const auto parts = split_list(item, ':');
      if (parts.size() != 2) throw std::invalid_argument("lr_schedule entries look like step:multiplier");
      c.hyper.lr_schedule.emplace_back(parse_int(key, parts[0]), parse_double(key, parts[1]));
    }
  } else if (key == "batch") {
    c.batch = parse_int(key, value);
  } else if (key == "window") {
    c.window = parse_int(key, value);
  } else if (key == "eval_every") {
    c.eval_every = parse_int(key, value);
  } else if (key == "pad") {
    c.augment.pad = parse_int(key, value);
  } else if (key == "flip_prob") {
    c.augment.flip_prob = parse_double(key, value);
  } else if (key == "target_error") {
    c.target_error = parse_double(key, value);
  } else if (key == "port") {
    const std::int64_t port = parse_int(key, value);
    if (port < 0 || port > 65535) throw std::invalid_argument("port must lie in [0, 65535]");
    c.port = static_cast<std::uint16_t>(port);
  } else if (key == "out") {
    c.out = value;
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

void apply_config_text(ExperimentConfig& config, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + " is not key=value");
    }
    apply_setting(config, line.substr(0, eq), line.substr(eq + 1));
  }
}

std::string config_echo(const ExperimentConfig& c) {
  std::ostringstream os;
  std::string schedule;
  for (std::size_t i = 0; i < c.hyper.lr_schedule.size(); ++i) {
    schedule += (i ? "," : "") + std::to_string(c.hyper.lr_schedule[i].first) + ":" +
                num(c.hyper.lr_schedule[i].second);
  }
  os << "scenario=" << scenario_name(c.scenario) << "\n"
     << "workers=" << join(c.workers) << "\n"
     << "n_sync=" << join(c.n_sync) << "\n"
     << "warm_steps=" << c.resolved_warm_steps() << "\n"
     << "steps=" << c.steps << "\n"
     << "transport=" << transport_name(c.transport) << "\n"
     << "schedule=" << (c.schedule == SchedulePolicy::RoundRobin ? "round_robin" : "seeded_random") << "\n"
     << "seeds=" << join(c.seeds) << "\n"
     << "classes=" << c.dataset.classes << "\n"
     << "train_per_class=" << c.dataset.train_per_class << "\n"
     << "test_per_class=" << c.dataset.test_per_class << "\n"
     << "image_size=" << c.dataset.height << "\n"
     << "noise_std=" << num(c.dataset.noise_std) << "\n"
     << "prototype_scale=" << num(c.dataset.prototype_scale) << "\n"
     << "smoothness=" << num(c.dataset.smoothness) << "\n"
     << "data_seed=" << c.dataset.seed << "\n"
     << "dataset_file=" << c.dataset_file << "\n"
     << "test_file=" << c.test_file << "\n"
     << "base_lr=" << num(c.hyper.base_lr) << "\n"
     << "momentum=" << num(c.hyper.momentum) << "\n"
     << "weight_decay=" << num(c.hyper.weight_decay) << "\n"
     << "lr_schedule=" << schedule << "\n"
     << "batch=" << c.batch << "\n"
     << "window=" << c.window << "\n"
     << "eval_every=" << c.eval_every << "\n"
     << "pad=" << c.augment.pad << "\n"
     << "flip_prob=" << num(c.augment.flip_prob) << "\n"
     << "target_error=" << num(c.target_error) << "\n"
     << "port=" << c.port << "\n"
     << "out=" << c.out << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Data, network, evaluation
// ---------------------------------------------------------------------------

DataSplits load_data(const ExperimentConfig& config) {
  if (config.dataset_file.empty()) {
    SyntheticData synthetic = generate(config.dataset);
    return {std::move(synthetic.train), std::move(synthetic.test)};
  }
  Dataset train = load_raw_dataset(config.dataset_file);
  if (!config.test_file.empty()) return {std::move(train), load_raw_dataset(config.test_file)};
  const Index held = train.size() / 10;
  std::vector<Index> train_idx, test_idx;
  for (Index i = 0; i < train.size(); ++i) (i < train.size() - held ? train_idx : test_idx).push_back(i);
  auto subset = [&](const std::vector<Index>& idx) {
    Minibatch b = gather(train, idx);
    return Dataset{std::move(b.examples), std::move(b.labels), train.classes};
  };
  return {subset(train_idx), subset(test_idx)};
}

CompiledNetwork build_default_network(const DataSplits& data) {
  NetworkSpec spec = default_network_spec();
  const auto& shape = data.train.images.shape;
  if (shape.size() != 4) throw ShapeError("training images must be (N, C, H, W)");
  spec.input = {shape[1], shape[2], shape[3], false};
  spec.classes = data.train.classes;
  std::get<Conv2D>(spec.layers[0]).in_channels = shape[1];
  const Conv2D& second = std::get<Conv2D>(spec.layers[2]);
  const Index h = (shape[2] + 2 * second.padding - second.kernel) / second.stride + 1;
  const Index w = (shape[3] + 2 * second.padding - second.kernel) / second.stride + 1;
  spec.layers[5] = FullyConnected{second.out_channels * h * w, spec.classes};
  return build_network(spec);
}

EvalResult evaluate(const CompiledNetwork& net, const ParamVector& params, const Dataset& set) {
  constexpr Index kChunk = 250;
  EvalResult result;
  if (set.size() == 0) return result;
  double loss_sum = 0.0;
  Index errors = 0;
  for (Index start = 0; start < set.size(); start += kChunk) {
    const Index count = std::min(kChunk, set.size() - start);
    std::vector<Index> idx(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    const Minibatch batch = gather(set, idx);
    const auto f = forward_loss(net, params, batch, Mode::Eval, nullptr);
    loss_sum += static_cast<double>(f.loss) * static_cast<double>(count);
    errors += f.top1_errors;
  }
  result.loss = loss_sum / static_cast<double>(set.size());
  result.error = static_cast<double>(errors) / static_cast<double>(set.size());
  return result;
}

// ---------------------------------------------------------------------------
// Cluster
// ---------------------------------------------------------------------------

WorkerConfig cluster_worker_config(const ClusterSpec& spec, std::uint32_t worker) {
  WorkerConfig config = WorkerConfig::with_sync(worker, spec.n_sync, spec.steps);
  config.batch_size = spec.batch;
  config.data_seed = worker_data_seed(spec.seed, worker);
  config.dropout_seed = worker_dropout_seed(spec.seed, worker);
  config.hyper = spec.hyper;
  config.augment = spec.augment;
  return config;
}

ClusterResult run_cluster(const CompiledNetwork& net, const DataSplits& data, ParamVector init,
                          const ClusterSpec& spec,
                          const std::function<void(std::int64_t, const ParameterServer&)>& after_step) {
  if (spec.workers < 1) throw std::invalid_argument("cluster needs at least one worker");
  ParameterServer server(std::move(init));
  Recorder recorder(net, data.test, spec.eval_every);
  const bool deterministic = spec.transport == TransportKind::Deterministic;
  const auto start = std::chrono::steady_clock::now();
  std::int64_t logical = 0;
  auto wall_ms = [&]() -> std::int64_t {
    if (deterministic) return logical;
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
        .count();
  };
  auto server_params = [&] { return server.params(); };

  DeterministicTransport det(server);
  std::unique_ptr<TcpServer> tcp;
  if (spec.transport == TransportKind::Tcp) tcp = std::make_unique<TcpServer>(server, spec.port);

  std::vector<std::unique_ptr<Endpoint>> endpoints;
  std::vector<std::unique_ptr<Replica>> replicas;
  for (int w = 0; w < spec.workers; ++w) {
    Endpoint* endpoint = nullptr;
    switch (spec.transport) {
      case TransportKind::Deterministic:
        endpoint = &det.endpoint();
        break;
      case TransportKind::Concurrent:
        endpoints.push_back(std::make_unique<LocalEndpoint>(server));
        endpoint = endpoints.back().get();
        break;
      case TransportKind::Tcp:
        endpoints.push_back(std::make_unique<TcpEndpoint>("127.0.0.1", tcp->port()));
        endpoint = endpoints.back().get();
        break;
    }
    ReplicaHooks hooks;
    hooks.on_step = [&, w](const StepRecord& r) {
      if (deterministic) ++logical;
      recorder.train(wall_ms(), w, r);
    };
    replicas.push_back(std::make_unique<Replica>(cluster_worker_config(spec, static_cast<std::uint32_t>(w)),
                                                 net, data.train, *endpoint, std::move(hooks)));
  }
  std::vector<Replica*> handles;
  for (auto& r : replicas) handles.push_back(r.get());

  ClusterResult result;
  if (deterministic) {
    result.events = det.run({mix_seed(spec.seed, 0x73636864), spec.schedule}, handles,
                            [&](std::int64_t tick, const Replica&) {
                              recorder.maybe_test(wall_ms(), server.version(), server_params, false);
                              if (after_step) after_step(tick, server);
                            });
  } else {
    std::atomic<bool> finished{false};
    std::thread monitor([&] {
      while (!finished.load()) {
        recorder.maybe_test(wall_ms(), server.version(), server_params, false);
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    });
    run_concurrent(handles);
    finished = true;
    monitor.join();
    for (auto& e : endpoints) {
      if (auto* t = dynamic_cast<TcpEndpoint*>(e.get())) t->close();
    }
    if (tcp) tcp->stop();
  }
  recorder.maybe_test(wall_ms(), server.version(), server_params, true);

  for (const auto& r : replicas) {
    result.reports.push_back(r->report());
    if (r->report().aborted) result.partial = true;
  }
  result.curve = recorder.curve();
  result.final_params = server.params();
  result.final_version = server.version();
  result.rejected_pushes = server.rejected_pushes();
  return result;
}

SequentialRun run_sequential_reference(
    const CompiledNetwork& net, const DataSplits& data, ParamVector init, const ClusterSpec& spec,
    const std::function<void(std::int64_t, const ParamVector&)>& after_step) {
  const WorkerConfig config = cluster_worker_config(spec, 0);
  config.validate();
  Recorder recorder(net, data.test, spec.eval_every);
  ParamVector params = std::move(init);
  OptimizerState optimizer = OptimizerState::zeros(net.param_count());
  MinibatchStream stream(data.train, config.batch_size, config.data_seed, config.augment);
  Rng dropout_rng(config.dropout_seed);
  auto current = [&] { return params; };
  for (std::int64_t t = 1; t <= config.total_steps; ++t) {
    LocalStepOutcome out = train_one_step(net, params, optimizer, config.hyper, stream, dropout_rng, t);
    out.record.fetched_version = static_cast<std::uint64_t>(t - 1);
    recorder.train(t, 0, out.record);
    recorder.maybe_test(t, static_cast<std::uint64_t>(t), current, false);
    if (after_step) after_step(t, params);
  }
  recorder.maybe_test(config.total_steps, static_cast<std::uint64_t>(config.total_steps), current, true);
  return {recorder.curve(), std::move(params)};
}

// ---------------------------------------------------------------------------
// Output and summaries
// ---------------------------------------------------------------------------

void write_run(const std::string& dir, const std::string& config_text, const ClusterResult& result,
               std::int64_t window, const std::string& summary_text) {
  const fs::path root(dir);
  fs::create_directories(root);
  write_text(root / "config.txt", config_text);
  for (const auto& report : result.reports) {
    const int w = static_cast<int>(report.worker_id);
    write_csv((root / ("worker_" + std::to_string(w) + ".csv")).string(), result.curve.worker_rows(w));
  }
  write_csv((root / "merged.csv").string(), result.curve);
  write_text(root / "smoothed.csv", to_csv(smooth(result.curve, window)));
  write_text(root / "summary.txt", summary_text);
  save_checkpoint((root / "final.ckpt").string(), result.final_params);
}

CellSummary summarize_cell(const ClusterResult& result, const ClusterSpec& spec, std::int64_t window,
                           double target_error) {
  CellSummary cell;
  cell.workers = spec.workers;
  cell.n_sync = spec.n_sync;
  cell.seed = spec.seed;
  for (const auto& r : result.reports) {
    cell.minibatches += static_cast<std::int64_t>(r.steps.size());
    cell.pushes += r.pushes;
    cell.fetches += r.fetches;
  }
  const SmoothedCurve smoothed = smooth(result.curve, window);
  cell.early_error = mean_error_between(smoothed, 1, std::max<std::int64_t>(spec.steps / 4, 1));
  cell.final_error = final_window_error(smoothed);
  cell.steps_to_target = steps_to_error(smoothed, target_error);
  const LearningCurve tests = result.curve.test_rows();
  if (!tests.rows.empty()) cell.final_test_error = tests.rows.back().error;
  cell.partial = result.partial;
  return cell;
}

std::string format_cell_header() {
  return "workers,n_sync,seed,minibatches,pushes,fetches,early_error,final_error,steps_to_target,"
         "final_test_error,partial";
}

std::string format_cell(const CellSummary& cell) {
  char test[32];
  std::snprintf(test, sizeof test, "%.6f", cell.final_test_error);
  std::ostringstream os;
  os << cell.workers << ',' << cell.n_sync << ',' << cell.seed << ',' << cell.minibatches << ','
     << cell.pushes << ',' << cell.fetches << ',' << opt_num(cell.early_error) << ','
     << opt_num(cell.final_error) << ',' << opt_int(cell.steps_to_target) << ',' << test << ','
     << (cell.partial ? "yes" : "no");
  return os.str();
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

namespace {

struct CellRun {
  CellSummary summary;
  ClusterResult result;
};

CellRun run_cell(const Context& ctx, const ExperimentConfig& config, const ParamVector& init, int workers,
                 std::int64_t n_sync, std::uint64_t seed, const std::string& dir) {
  const ClusterSpec spec = cluster_spec(config, workers, n_sync, seed);
  ClusterResult result = run_cluster(ctx.net, ctx.data, init, spec);
  CellSummary summary = summarize_cell(result, spec, config.window, config.target_error);
  for (const auto& r : result.reports) {
    if (r.aborted) std::fprintf(stderr, "partial result: %s\n", r.failure.c_str());
  }
  if (!dir.empty()) {
    write_run(dir, config_echo(config), result, config.window,
              cell_summary_text(std::string(scenario_name(config.scenario)) + " cell", summary));
  }
  return {summary, std::move(result)};
}

std::string cell_dir(const ExperimentConfig& config, std::uint64_t seed, const std::string& leaf) {
  if (config.out.empty()) return {};
  return (fs::path(seed_dir(config.out, seed)) / leaf).string();
}

std::string grid_leaf(int workers, std::int64_t n_sync) {
  return "workers_" + std::to_string(workers) + "_nsync_" + std::to_string(n_sync);
}

std::string header_lines(const ExperimentConfig& config) {
  std::ostringstream os;
  os << "# scenario=" << scenario_name(config.scenario) << " transport=" << transport_name(config.transport)
     << " steps_per_worker=" << config.steps << " window=" << config.window
     << " target_error=" << num(config.target_error) << "\n";
  return os.str();
}

void write_summary(const ExperimentConfig& config, const std::string& text) {
  if (config.out.empty()) return;
  fs::create_directories(config.out);
  write_text(fs::path(config.out) / "summary.txt", text);
  write_text(fs::path(config.out) / "config.txt", config_echo(config));
}

ParamVector starting_point(const Context& ctx, const ExperimentConfig& config, std::uint64_t seed,
                           std::optional<double>* warm_error) {
  const std::int64_t w = config.resolved_warm_steps();
  if (w == 0) return init_params(ctx.net, init_seed(seed));
  WarmStartConfig warm;
  warm.steps = w;
  warm.seed = seed;
  warm.batch_size = config.batch;
  warm.hyper = config.hyper;
  warm.augment = config.augment;
  WarmStartResult result = warm_start(ctx.net, ctx.data.train, warm);
  if (warm_error) *warm_error = final_window_error(smooth(warm_curve(result.steps), config.window));
  if (!config.out.empty()) {
    fs::create_directories(seed_dir(config.out, seed));
    save_checkpoint((fs::path(seed_dir(config.out, seed)) / "warm.ckpt").string(), result.params);
  }
  return std::move(result.params);
}

}  // namespace

ScenarioResult run_single(const ExperimentConfig& config) {
  const Context ctx = make_context(config);
  ScenarioResult out;
  std::ostringstream summary;
  summary << header_lines(config) << format_cell_header() << "\n";
  for (const auto seed : config.seeds) {
    std::optional<double> warm_error;
    const ParamVector init = starting_point(ctx, config, seed, &warm_error);
    if (warm_error) out.warm_error[seed] = *warm_error;
    const std::string dir = config.out.empty() ? std::string() : seed_dir(config.out, seed);
    CellRun cell = run_cell(ctx, config, init, config.workers.front(), config.n_sync.front(), seed, dir);
    summary << format_cell(cell.summary) << "\n";
    out.cells.push_back(cell.summary);
  }
  out.summary = summary.str();
  write_summary(config, out.summary);
  return out;
}

ScenarioResult run_e1(const ExperimentConfig& config) {
  const Context ctx = make_context(config);
  ScenarioResult out;
  const int workers = config.workers.front();
  const std::int64_t n_sync = config.n_sync.front();
  std::ostringstream summary;
  summary << header_lines(config) << "# reference_scale workers=" << ReferenceScale::e1_workers
          << " n_sync=" << ReferenceScale::e1_n_sync << " desk workers=" << workers << " n_sync=" << n_sync
          << " (reference n_sync / " << ReferenceScale::n_sync_divisor << ")\n"
          << format_cell_header() << ",speedup_vs_1\n";
  for (const auto seed : config.seeds) {
    const ParamVector init = init_params(ctx.net, init_seed(seed));
    const CellRun base = run_cell(ctx, config, init, 1, n_sync, seed, cell_dir(config, seed, "workers_1"));
    const CellRun multi = run_cell(ctx, config, init, workers, n_sync, seed,
                                   cell_dir(config, seed, "workers_" + std::to_string(workers)));
    for (const CellRun* run : {&base, &multi}) {
      std::string ratio = "na";
      if (base.summary.steps_to_target && run->summary.steps_to_target) {
        ratio = opt_num(speedup(*base.summary.steps_to_target, *run->summary.steps_to_target,
                                run->summary.workers));
      }
      summary << format_cell(run->summary) << ',' << ratio << "\n";
      out.cells.push_back(run->summary);
    }
  }
  out.summary = summary.str();
  write_summary(config, out.summary);
  return out;
}

ScenarioResult run_e2(const ExperimentConfig& config) {
  const Context ctx = make_context(config);
  ScenarioResult out;
  std::ostringstream summary;
  summary << header_lines(config) << "# cold start; early_error = mean smoothed error over local steps [1, "
          << std::max<std::int64_t>(config.steps / 4, 1) << "]\n"
          << format_cell_header() << "\n";
  std::map<int, std::pair<double, int>> early;
  for (const auto seed : config.seeds) {
    const ParamVector init = init_params(ctx.net, init_seed(seed));
    for (const int workers : config.workers) {
      const CellRun cell = run_cell(ctx, config, init, workers, config.n_sync.front(), seed,
                                    cell_dir(config, seed, "workers_" + std::to_string(workers)));
      summary << format_cell(cell.summary) << "\n";
      if (cell.summary.early_error) {
        early[workers].first += *cell.summary.early_error;
        ++early[workers].second;
      }
      out.cells.push_back(cell.summary);
    }
  }
  summary << "# mean early_error over seeds\n";
  for (const auto& [workers, acc] : early) {
    summary << "workers=" << workers << " early_error=" << opt_num(acc.first / acc.second) << "\n";
  }
  out.summary = summary.str();
  write_summary(config, out.summary);
  return out;
}

ScenarioResult run_e3(const ExperimentConfig& config) {
  const Context ctx = make_context(config);
  ScenarioResult out;
  std::ostringstream summary;
  summary << header_lines(config) << "# warm start W=" << config.resolved_warm_steps()
          << "; reference n_sync range " << ReferenceScale::e3_n_sync_min << "-" << ReferenceScale::e3_n_sync_max
          << " scaled by 1/" << ReferenceScale::n_sync_divisor << "\n"
          << format_cell_header() << "\n";
  for (const auto seed : config.seeds) {
    std::optional<double> warm_error;
    const ParamVector init = starting_point(ctx, config, seed, &warm_error);
    if (warm_error) out.warm_error[seed] = *warm_error;
    for (const auto n_sync : config.n_sync) {
      for (const int workers : config.workers) {
        const CellRun cell =
            run_cell(ctx, config, init, workers, n_sync, seed, cell_dir(config, seed, grid_leaf(workers, n_sync)));
        summary << format_cell(cell.summary) << "\n";
        out.cells.push_back(cell.summary);
      }
    }
  }
  summary << "# warm-start error per seed\n";
  for (const auto& [seed, error] : out.warm_error) summary << "seed=" << seed << " warm_error=" << opt_num(error) << "\n";
  const auto [lo, hi] = std::minmax_element(config.n_sync.begin(), config.n_sync.end());
  const int most = *std::max_element(config.workers.begin(), config.workers.end());
  summary << "# final_error(n_sync=" << *hi << ") - final_error(n_sync=" << *lo << ") at workers=" << most << "\n";
  for (const auto seed : config.seeds) {
    std::optional<double> small, large;
    for (const auto& c : out.cells) {
      if (c.seed != seed || c.workers != most) continue;
      if (c.n_sync == *lo) small = c.final_error;
      if (c.n_sync == *hi) large = c.final_error;
    }
    summary << "seed=" << seed << " gap="
            << (small && large ? opt_num(*large - *small) : std::string("na")) << "\n";
  }
  out.summary = summary.str();
  write_summary(config, out.summary);
  return out;
}

ScenarioResult run_scenario(const ExperimentConfig& config) {
  switch (config.scenario) {
    case Scenario::Single: return run_single(config);
    case Scenario::E1: return run_e1(config);
    case Scenario::E2: return run_e2(config);
    case Scenario::E3: return run_e3(config);
  }
  throw std::invalid_argument("unknown scenario");
}

// ---------------------------------------------------------------------------
// Oracle comparison
// ---------------------------------------------------------------------------

OracleDiff oracle_diff(const ExperimentConfig& config, std::uint64_t seed) {
  const Context ctx = make_context(config);
  ClusterSpec spec = cluster_spec(config, 1, 1, seed);
  spec.transport = TransportKind::Deterministic;
  const ParamVector init = init_params(ctx.net, init_seed(seed));

  std::vector<Eigen::VectorXf> trajectory;
  trajectory.reserve(static_cast<std::size_t>(config.steps));
  SequentialRun oracle = run_sequential_reference(
      ctx.net, ctx.data, init, spec,
      [&](std::int64_t, const ParamVector& params) { trajectory.push_back(params.values); });

  OracleDiff diff;
  diff.trajectory_identical = true;
  const ClusterResult cluster =
      run_cluster(ctx.net, ctx.data, init, spec, [&](std::int64_t tick, const ParameterServer& server) {
        if (!diff.trajectory_identical) return;
        const auto i = static_cast<std::size_t>(tick - 1);
        const ParamVector now = server.params();
        if (i >= trajectory.size() || now.values.size() != trajectory[i].size() ||
            std::memcmp(now.values.data(), trajectory[i].data(),
                        sizeof(float) * static_cast<std::size_t>(now.values.size())) != 0) {
          diff.trajectory_identical = false;
          diff.first_divergent_step = tick;
        }
      });
  diff.cluster_csv = to_csv(cluster.curve);
  diff.oracle_csv = to_csv(oracle.curve);
  diff.csv_identical = diff.cluster_csv == diff.oracle_csv;
  diff.params_identical =
      cluster.final_params.values.size() == oracle.final_params.values.size() &&
      std::memcmp(cluster.final_params.values.data(), oracle.final_params.values.data(),
                  sizeof(float) * static_cast<std::size_t>(oracle.final_params.values.size())) == 0;
  if (diff.trajectory_identical && trajectory.size() != static_cast<std::size_t>(config.steps)) {
    diff.trajectory_identical = false;
  }
  return diff;
}

}  // namespace asgd
