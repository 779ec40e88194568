#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library code they check.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "fragpredict/imaging.hpp"

namespace testsupport {

using fragpredict::GrayImage;

// Pixel (x, y) belongs to the shape when its centre (x, y) is inside.
inline bool InEllipse(double x, double y, double cx, double cy, double a, double b, double angle) {
  const double dx = x - cx;
  const double dy = y - cy;
  const double u = dx * std::cos(angle) + dy * std::sin(angle);
  const double v = -dx * std::sin(angle) + dy * std::cos(angle);
  return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
}

struct Raster {
  GrayImage image;
  std::int64_t count = 0;  // pixels inside the shape
};

inline Raster RasterEllipse(int w, int h, double cx, double cy, double a, double b, double angle,
                            std::uint8_t inside, std::uint8_t outside) {
  Raster r{GrayImage(w, h, outside), 0};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (InEllipse(x, y, cx, cy, a, b, angle)) {
        r.image.pixels(y, x) = inside;
        ++r.count;
      }
    }
  }
  return r;
}

inline Raster RasterDisk(int size, double r, std::uint8_t inside = 0, std::uint8_t outside = 255) {
  const double c = (size - 1) / 2.0;
  return RasterEllipse(size, size, c, c, r, r, 0.0, inside, outside);
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("fragpredict_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

// Two-sample Kolmogorov-Smirnov statistic.
inline double KsStatistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

// Exhaustive pairwise AUC with half credit for ties.
inline double PairwiseAuc(const std::vector<int>& labels, const std::vector<double>& scores) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace testsupport
