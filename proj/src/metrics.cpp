#include "asgd/metrics.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace asgd {

LearningCurve LearningCurve::train_rows() const {
  LearningCurve out;
  for (const auto& r : rows) {
    if (r.split == Split::Train) out.rows.push_back(r);
  }
  return out;
}

LearningCurve LearningCurve::test_rows() const {
  LearningCurve out;
  for (const auto& r : rows) {
    if (r.split == Split::Test) out.rows.push_back(r);
  }
  return out;
}

LearningCurve LearningCurve::worker_rows(int worker) const {
  LearningCurve out;
  for (const auto& r : rows) {
    if (r.worker == worker) out.rows.push_back(r);
  }
  return out;
}

void CurveLog::append(const CurveRow& row) {
  std::lock_guard lock(mutex_);
  rows_.push_back(row);
}

LearningCurve CurveLog::curve() const {
  std::lock_guard lock(mutex_);
  return {rows_};
}

std::size_t CurveLog::size() const {
  std::lock_guard lock(mutex_);
  return rows_.size();
}

std::vector<double> smooth(std::span<const double> errors, std::int64_t window) {
  if (window < 1) throw std::invalid_argument("smoothing window must be at least 1");
  std::vector<double> out;
  const auto n = static_cast<std::int64_t>(errors.size());
  if (n < window) return out;
  out.reserve(static_cast<std::size_t>(n - window + 1));
  // Direct sums keep each point independent of accumulated rounding.
  for (std::int64_t end = window; end <= n; ++end) {
    double sum = 0.0;
    for (std::int64_t i = end - window; i < end; ++i) sum += errors[static_cast<std::size_t>(i)];
    out.push_back(sum / static_cast<double>(window));
  }
  return out;
}

SmoothedCurve smooth(const LearningCurve& curve, std::int64_t window) {
  std::vector<double> errors;
  std::vector<const CurveRow*> train;
  for (const auto& r : curve.rows) {
    if (r.split != Split::Train) continue;
    errors.push_back(r.error);
    train.push_back(&r);
  }
  const auto means = smooth(errors, window);
  SmoothedCurve out;
  out.window = window;
  out.rows.reserve(means.size());
  for (std::size_t i = 0; i < means.size(); ++i) {
    const CurveRow& last = *train[i + static_cast<std::size_t>(window) - 1];
    out.rows.push_back({static_cast<std::int64_t>(i) + window, last.worker, last.local_step, means[i]});
  }
  return out;
}

std::optional<std::int64_t> steps_to_error(const SmoothedCurve& curve, double target) {
  for (const auto& p : curve.rows) {
    if (p.error <= target) return p.index;
  }
  return std::nullopt;
}

double speedup(std::int64_t single_worker_steps, std::int64_t multi_worker_steps, int workers) {
  const double per_worker = static_cast<double>(multi_worker_steps) / static_cast<double>(workers);
  return static_cast<double>(single_worker_steps) / per_worker;
}

std::optional<double> mean_error_between(const SmoothedCurve& curve, std::int64_t first,
                                         std::int64_t last) {
  double sum = 0.0;
  std::int64_t count = 0;
  for (const auto& p : curve.rows) {
    if (p.local_step < first || p.local_step > last) continue;
    sum += p.error;
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

std::optional<double> final_window_error(const SmoothedCurve& curve) {
  if (curve.rows.empty()) return std::nullopt;
  return curve.rows.back().error;
}

std::string format_csv_row(const CurveRow& row) {
  // Shortest text that parses back to the same double.
  auto shortest = [](double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  char buf[128];
  std::snprintf(buf, sizeof buf, "%" PRId64 ",%d,%" PRId64 ",%" PRIu64 ",%s,", row.wall_ms, row.worker,
                row.local_step, row.server_version, row.split == Split::Train ? "train" : "test");
  return buf + shortest(row.loss) + "," + shortest(row.error);
}

std::string to_csv(const LearningCurve& curve) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : curve.rows) {
    out += format_csv_row(r);
    out += '\n';
  }
  return out;
}

LearningCurve parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw std::runtime_error("learning curve CSV must start with header: " + std::string(kCsvHeader));
  }
  LearningCurve curve;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    CurveRow r;
    char split[8] = {};
    if (std::sscanf(line.c_str(), "%" SCNd64 ",%d,%" SCNd64 ",%" SCNu64 ",%7[a-z],%lf,%lf", &r.wall_ms,
                    &r.worker, &r.local_step, &r.server_version, split, &r.loss, &r.error) != 7) {
      throw std::runtime_error("malformed CSV row at line " + std::to_string(line_no));
    }
    const std::string s(split);
    if (s == "train") {
      r.split = Split::Train;
    } else if (s == "test") {
      r.split = Split::Test;
    } else {
      throw std::runtime_error("unknown split '" + s + "' at line " + std::to_string(line_no));
    }
    curve.rows.push_back(r);
  }
  return curve;
}

void write_csv(const std::string& path, const LearningCurve& curve) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_csv(curve);
}

LearningCurve read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

std::string to_csv(const SmoothedCurve& curve) {
  std::string out = "index,worker,local_step,error\n";
  char buf[128];
  for (const auto& p : curve.rows) {
    std::snprintf(buf, sizeof buf, "%" PRId64 ",%d,%" PRId64 ",%.9g\n", p.index, p.worker,
                  p.local_step, p.error);
    out += buf;
  }
  return out;
}

}  // namespace asgd
