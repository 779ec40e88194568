#pragma once

// Two published classification reports and a brute-force recovery of the
// confusion counts they imply.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fragpredict/eval.hpp"

namespace testsupport {

struct PublishedRow {
  std::string name;
  std::string precision, recall, f1;  // empty when the cell is blank
  std::string support;
};

struct PublishedReport {
  std::string title;
  std::array<double, 2> precision;  // unfragmented, fragmented
  std::array<double, 2> recall;
  std::array<int, 2> support;
  std::vector<PublishedRow> rows;
};

inline PublishedReport AnilineBlueBrightfield() {
  return {"Aniline Blue, brightfield",
          {0.66, 0.71},
          {0.77, 0.59},
          {113, 108},
          {{"Unfragmented", "0.66", "0.77", "0.71", "113"},
           {"Fragmented", "0.71", "0.59", "0.65", "108"},
           {"Accuracy", "", "", "0.68", "221"},
           {"Macro Avg", "0.69", "0.68", "0.68", "221"},
           {"Weighted Avg", "0.69", "0.68", "0.68", "221"}}};
}

inline PublishedReport ToluidineBluePhaseContrast() {
  return {"Toluidine Blue, phase contrast",
          {0.73, 0.68},
          {0.60, 0.79},
          {103, 111},
          {{"Unfragmented", "0.73", "0.60", "0.66", "103"},
           {"Fragmented", "0.68", "0.79", "0.73", "111"},
           {"Accuracy", "", "", "0.70", "214"},
           {"Macro Avg", "0.71", "0.70", "0.70", "214"},
           {"Weighted Avg", "0.70", "0.70", "0.70", "214"}}};
}

inline bool RoundsTo(double value, double printed) { return std::abs(std::floor(value * 100 + 0.5) / 100 - printed) < 1e-9; }

// Every (tn, tp) pair whose per-class precision and recall round to the
// printed values.
inline std::vector<fragpredict::ConfusionCounts> CountsConsistentWith(const PublishedReport& r) {
  std::vector<fragpredict::ConfusionCounts> out;
  for (int tn = 0; tn <= r.support[0]; ++tn) {
    for (int tp = 0; tp <= r.support[1]; ++tp) {
      const int fp = r.support[0] - tn;
      const int fn = r.support[1] - tp;
      if (tn + fn == 0 || tp + fp == 0) continue;
      const double p0 = static_cast<double>(tn) / (tn + fn);
      const double p1 = static_cast<double>(tp) / (tp + fp);
      const double r0 = static_cast<double>(tn) / r.support[0];
      const double r1 = static_cast<double>(tp) / r.support[1];
      if (RoundsTo(p0, r.precision[0]) && RoundsTo(p1, r.precision[1]) && RoundsTo(r0, r.recall[0]) &&
          RoundsTo(r1, r.recall[1])) {
        out.push_back({tp, fp, tn, fn});
      }
    }
  }
  return out;
}

// Splits a rendered report into rows of whitespace-separated cells. The
// first cell keeps embedded single spaces ("Macro Avg").
inline std::vector<std::vector<std::string>> ReportCells(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.size() < 15) continue;
    std::vector<std::string> cells;
    std::string name = line.substr(0, 14);
    name.erase(name.find_last_not_of(' ') + 1);
    cells.push_back(name);
    for (std::size_t c = 15; c + 9 <= line.size(); c += 10) {
      std::string cell = line.substr(c, 9);
      cell.erase(0, cell.find_first_not_of(' ') == std::string::npos ? cell.size() : cell.find_first_not_of(' '));
      cells.push_back(cell);
    }
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace testsupport
