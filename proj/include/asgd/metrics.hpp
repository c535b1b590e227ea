#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace asgd {

enum class Split { Train, Test };

/// One CSV row. Test rows carry worker = -1 and local_step = server version.
struct CurveRow {
  std::int64_t wall_ms = 0;
  int worker = 0;
  std::int64_t local_step = 0;
  std::uint64_t server_version = 0;
  Split split = Split::Train;
  double loss = 0.0;
  double error = 0.0;

  bool operator==(const CurveRow&) const = default;
};

/// Rows in global arrival order.
struct LearningCurve {
  std::vector<CurveRow> rows;

  LearningCurve train_rows() const;
  LearningCurve test_rows() const;
  LearningCurve worker_rows(int worker) const;

  bool operator==(const LearningCurve&) const = default;
};

/// Thread-safe appender; arrival order is the order of append calls.
class CurveLog {
 public:
  void append(const CurveRow& row);
  LearningCurve curve() const;
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::vector<CurveRow> rows_;
};

inline constexpr std::int64_t kDefaultSmoothingWindow = 400;

struct SmoothedPoint {
  std::int64_t index = 0;  // 1-based global minibatch count at the window's end
  int worker = 0;
  std::int64_t local_step = 0;
  double error = 0.0;
};

struct SmoothedCurve {
  std::int64_t window = kDefaultSmoothingWindow;
  std::vector<SmoothedPoint> rows;
};

/// Trailing mean of exactly `window` consecutive train-row errors, in
/// arrival order across workers. Shorter curves give an empty result.
SmoothedCurve smooth(const LearningCurve& curve, std::int64_t window = kDefaultSmoothingWindow);
std::vector<double> smooth(std::span<const double> errors, std::int64_t window);

/// First global minibatch index whose smoothed error is <= target.
std::optional<std::int64_t> steps_to_error(const SmoothedCurve& curve, double target);

/// Ratio of single-worker steps to per-worker steps of an N-worker run.
/// Both arguments must be global minibatch counts.
double speedup(std::int64_t single_worker_steps, std::int64_t multi_worker_steps, int workers);

/// Mean smoothed error over points whose local step lies in [first, last].
std::optional<double> mean_error_between(const SmoothedCurve& curve, std::int64_t first,
                                         std::int64_t last);

/// Last smoothed value, or nullopt if the window never filled.
std::optional<double> final_window_error(const SmoothedCurve& curve);

inline constexpr const char* kCsvHeader = "wall_ms,worker,local_step,server_version,split,loss,error";

std::string format_csv_row(const CurveRow& row);
std::string to_csv(const LearningCurve& curve);
LearningCurve parse_csv(const std::string& text);
void write_csv(const std::string& path, const LearningCurve& curve);
LearningCurve read_csv(const std::string& path);

/// `index,worker,local_step,error` dump of a smoothed curve.
std::string to_csv(const SmoothedCurve& curve);

}  // namespace asgd
