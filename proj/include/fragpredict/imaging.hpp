#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace fragpredict {

// Row-major raster: rows() is the image height, cols() the width.
template <typename T>
using Raster = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // interleaved RGB, row-major

  RgbImage() = default;
  RgbImage(int w, int h);
};

struct GrayImage {
  Raster<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int width, int height, std::uint8_t fill = 0);
  explicit GrayImage(Raster<std::uint8_t> p);

  int width() const { return static_cast<int>(pixels.cols()); }
  int height() const { return static_cast<int>(pixels.rows()); }
  std::uint8_t operator()(int x, int y) const { return pixels(y, x); }
  std::uint8_t& operator()(int x, int y) { return pixels(y, x); }
};

// Three ordered intensity classes: 0 darkest, 2 lightest.
struct TrinaryImage {
  Raster<std::uint8_t> classes;
  int low_threshold = 0;   // p <= low  -> class 0
  int high_threshold = 0;  // low < p <= high -> class 1, p > high -> class 2

  int width() const { return static_cast<int>(classes.cols()); }
  int height() const { return static_cast<int>(classes.rows()); }
  std::uint8_t operator()(int x, int y) const { return classes(y, x); }
};

struct BinaryMask {
  Raster<bool> bits;

  BinaryMask() = default;
  BinaryMask(int width, int height);

  int width() const { return static_cast<int>(bits.cols()); }
  int height() const { return static_cast<int>(bits.rows()); }
  bool operator()(int x, int y) const { return bits(y, x); }
  Eigen::Index count() const { return bits.count(); }
};

// Luminance round(0.299 R + 0.587 G + 0.114 B).
GrayImage ToGrayscale(const RgbImage& rgb);

// Exhaustive two-threshold Otsu over a 256-bin histogram. Returns (t1, t2)
// with 0 <= t1 < t2 <= 254 maximizing the between-class variance; equal
// variances resolve to the lexicographically smallest pair.
std::array<int, 2> OtsuTwoThresholds(const std::array<std::int64_t, 256>& histogram);

// Single-threshold Otsu; returns t in [0, 254] splitting p <= t from p > t.
int OtsuThreshold(const std::array<std::int64_t, 256>& histogram);

std::array<std::int64_t, 256> Histogram(const GrayImage& img);
int DistinctValues(const GrayImage& img);

// Throws kDegenerateInput when the image has fewer than 3 distinct values.
TrinaryImage Trinarize(const GrayImage& img);

// Like Trinarize, but two-tone images map their dark tone to class 0 and
// their light tone to class 2. Constant images throw kSegmentation.
TrinaryImage IntensityClasses(const GrayImage& img);

BinaryMask LargestComponent(const BinaryMask& mask);  // 8-connectivity
BinaryMask FillHoles(const BinaryMask& mask);         // 4-connected background

// Head mask: pixels outside the border-majority class, largest 8-connected
// component, holes filled.
BinaryMask SegmentHead(const GrayImage& img);
BinaryMask SegmentHead(const TrinaryImage& classes);

double MeanHeadIntensity(const GrayImage& img, const BinaryMask& mask);

}  // namespace fragpredict
