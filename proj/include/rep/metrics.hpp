#pragma once

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <vector>

#include "rep/errors.hpp"

namespace rep {

/// a[k][j]: accuracy on task j after training task k (j <= k).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0) : rows_(tasks) {}

  std::size_t tasks() const { return rows_.size(); }

  void set(std::size_t k, std::size_t j, double acc) {
    if (k >= rows_.size() || j > k) throw ConfigError("accuracy matrix index outside the lower triangle");
    if (acc < 0.0 || acc > 1.0) throw InputError("accuracy must lie in [0, 1]");
    if (rows_[k].size() <= j) rows_[k].resize(j + 1, -1.0);
    rows_[k][j] = acc;
  }

  double at(std::size_t k, std::size_t j) const {
    if (k >= rows_.size() || j >= rows_[k].size() || rows_[k][j] < 0.0) {
      throw InputError("accuracy matrix entry (" + std::to_string(k) + "," + std::to_string(j) + ") is missing");
    }
    return rows_[k][j];
  }

  bool complete() const {
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      if (rows_[k].size() != k + 1) return false;
      for (double v : rows_[k])
        if (v < 0.0) return false;
    }
    return !rows_.empty();
  }

  void write_csv(std::ostream& os) const {
    os << "after_task,task,acc\n";
    os.precision(17);
    for (std::size_t k = 0; k < rows_.size(); ++k)
      for (std::size_t j = 0; j < rows_[k].size(); ++j) os << k << ',' << j << ',' << rows_[k][j] << '\n';
  }

 private:
  std::vector<std::vector<double>> rows_;
};

/// Mean over tasks of the accuracy after the last task.
inline double final_average_accuracy(const AccuracyMatrix& a) {
  if (!a.complete()) throw InputError("final average accuracy needs a complete accuracy matrix");
  const std::size_t last = a.tasks() - 1;
  double s = 0.0;
  for (std::size_t j = 0; j <= last; ++j) s += a.at(last, j);
  return s / static_cast<double>(a.tasks());
}

/// (1 / (T-1)) sum_{j < T-1} [max_{k in [j, T-1)} a[k][j] - a[T-1][j]].
/// Terms are not clamped, so backward transfer shows up as negative values.
inline double forgetting(const AccuracyMatrix& a) {
  if (a.tasks() < 2) throw InputError("forgetting is undefined for fewer than two tasks");
  if (!a.complete()) throw InputError("forgetting needs a complete accuracy matrix");
  const std::size_t last = a.tasks() - 1;
  double s = 0.0;
  for (std::size_t j = 0; j < last; ++j) {
    double best = a.at(j, j);
    for (std::size_t k = j + 1; k < last; ++k) best = std::max(best, a.at(k, j));
    s += best - a.at(last, j);
  }
  return s / static_cast<double>(last);
}

struct CostRow {
  std::size_t task = 0;
  std::uint64_t step = 0;
  std::uint64_t macs = 0;
  std::uint64_t activation_bytes = 0;
};

/// Per-step compute and retained-memory accounting for one run.
struct CostLedger {
  std::vector<CostRow> rows;
  std::uint64_t static_bytes = 0;  // parameters + optimizer state

  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.macs;
    return s;
  }
  std::uint64_t peak_activation_bytes() const {
    std::uint64_t m = 0;
    for (const auto& r : rows) m = std::max(m, r.activation_bytes);
    return m;
  }
  std::uint64_t peak_bytes() const { return static_bytes + peak_activation_bytes(); }

  void write_csv(std::ostream& os) const {
    os << "task,step,macs,activation_bytes\n";
    for (const auto& r : rows) os << r.task << ',' << r.step << ',' << r.macs << ',' << r.activation_bytes << '\n';
  }
};

}  // namespace rep
