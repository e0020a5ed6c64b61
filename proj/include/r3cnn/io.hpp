#pragma once

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/metrics.hpp"
#include "r3cnn/r3loop.hpp"

namespace r3cnn {

// Histogram CSV: header row, then (loop, bin_low, bin_high, count).
inline void write_histogram_csv(std::ostream& os, const IoUHistogram& hist) {
  os << "loop,bin_low,bin_high,count\n";
  for (std::size_t l = 0; l < hist.counts.size(); ++l) {
    for (std::size_t b = 0; b < hist.counts[l].size(); ++b) {
      os << (l + 1) << "," << b * hist.bin_width << ","
         << (b + 1) * hist.bin_width << "," << hist.counts[l][b] << "\n";
    }
  }
}

inline void write_histogram_csv(const std::string& path,
                                const IoUHistogram& hist) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write histogram CSV: " + path);
  write_histogram_csv(f, hist);
}

struct HistogramRow {
  std::size_t loop;
  double bin_low, bin_high;
  std::uint64_t count;
};

inline std::vector<HistogramRow> read_histogram_csv(std::istream& is) {
  std::vector<HistogramRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != "loop,bin_low,bin_high,count")
        throw std::invalid_argument("histogram CSV line 1: bad header '" +
                                    line + "'");
      continue;
    }
    HistogramRow r;
    char c1, c2, c3;
    std::istringstream ss(line);
    if (!(ss >> r.loop >> c1 >> r.bin_low >> c2 >> r.bin_high >> c3 >>
          r.count) ||
        c1 != ',' || c2 != ',' || c3 != ',')
      throw std::invalid_argument("histogram CSV line " +
                                  std::to_string(lineno) + ": parse error");
    rows.push_back(r);
  }
  return rows;
}

// Training log: append-only text records, one line per epoch.
inline void write_train_log(std::ostream& os, const TrainLog& log) {
  for (const auto& e : log.epochs) {
    os << "epoch " << e.epoch << " lr " << std::setprecision(10) << e.lr
       << " total " << e.mean_total << " rpn_cls " << e.mean_rpn_cls
       << " rpn_loc " << e.mean_rpn_loc << " det_cls " << e.mean_det_cls
       << " det_loc " << e.mean_det_loc << " mask " << e.mean_mask << "\n";
  }
  if (log.diverged) os << "diverged true\n";
}

// Metrics report: flat key-value text.
inline void write_metrics_report(std::ostream& os, const APResult& box,
                                 const APResult& mask) {
  auto emit = [&](const char* prefix, const APResult& r) {
    if (!r.defined) {
      os << prefix << ".AP = undefined\n";
      return;
    }
    os << prefix << ".AP = " << r.ap << "\n";
    os << prefix << ".AP50 = " << r.ap50 << "\n";
    os << prefix << ".AP75 = " << r.ap75 << "\n";
  };
  os << std::setprecision(6);
  emit("box", box);
  emit("mask", mask);
}

}  // namespace r3cnn
