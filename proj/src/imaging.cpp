#include "fragpredict/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fragpredict/error.hpp"

namespace fragpredict {

namespace {

void RequirePositiveSize(int width, int height) {
  if (width < 1 || height < 1) {
    throw Error(ErrorKind::kDimension, "image dimensions must be positive, got " +
                                           std::to_string(width) + "x" + std::to_string(height));
  }
}

void RequireSameSize(int w0, int h0, int w1, int h1) {
  if (w0 != w1 || h0 != h1) {
    throw Error(ErrorKind::kDimension, "dimension mismatch: " + std::to_string(w0) + "x" +
                                           std::to_string(h0) + " vs " + std::to_string(w1) +
                                           "x" + std::to_string(h1));
  }
}

// Flood-fill labelling; returns per-pixel labels (-1 for unset) and component sizes.
template <typename Pred>
std::vector<std::int64_t> LabelComponents(int width, int height, bool eight_connected, Pred member,
                                          std::vector<int>& labels) {
  labels.assign(static_cast<std::size_t>(width) * height, -1);
  std::vector<std::int64_t> sizes;
  std::vector<int> stack;
  static constexpr int kDx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  static constexpr int kDy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  const int neighbours = eight_connected ? 8 : 4;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int idx = y * width + x;
      if (labels[idx] >= 0 || !member(x, y)) continue;
      const int label = static_cast<int>(sizes.size());
      sizes.push_back(0);
      labels[idx] = label;
      stack.push_back(idx);
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        ++sizes[label];
        const int cx = cur % width;
        const int cy = cur / width;
        for (int k = 0; k < neighbours; ++k) {
          const int nx = cx + kDx[k];
          const int ny = cy + kDy[k];
          if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
          const int nidx = ny * width + nx;
          if (labels[nidx] >= 0 || !member(nx, ny)) continue;
          labels[nidx] = label;
          stack.push_back(nidx);
        }
      }
    }
  }
  return sizes;
}

}  // namespace

RgbImage::RgbImage(int w, int h) : width(w), height(h) {
  RequirePositiveSize(w, h);
  data.assign(static_cast<std::size_t>(w) * h * 3, 0);
}

GrayImage::GrayImage(int width, int height, std::uint8_t fill) {
  RequirePositiveSize(width, height);
  pixels = Raster<std::uint8_t>::Constant(height, width, fill);
}

GrayImage::GrayImage(Raster<std::uint8_t> p) : pixels(std::move(p)) {
  RequirePositiveSize(static_cast<int>(pixels.cols()), static_cast<int>(pixels.rows()));
}

BinaryMask::BinaryMask(int width, int height) {
  RequirePositiveSize(width, height);
  bits = Raster<bool>::Constant(height, width, false);
}

GrayImage ToGrayscale(const RgbImage& rgb) {
  RequirePositiveSize(rgb.width, rgb.height);
  if (rgb.data.size() != static_cast<std::size_t>(rgb.width) * rgb.height * 3) {
    throw Error(ErrorKind::kDimension, "RGB buffer length does not match its dimensions");
  }
  GrayImage out(rgb.width, rgb.height);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * rgb.width + x) * 3;
      const double lum = 0.299 * rgb.data[i] + 0.587 * rgb.data[i + 1] + 0.114 * rgb.data[i + 2];
      out(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(lum), 0L, 255L));
    }
  }
  return out;
}

std::array<std::int64_t, 256> Histogram(const GrayImage& img) {
  std::array<std::int64_t, 256> hist{};
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) ++hist[img.pixels.data()[i]];
  return hist;
}

int DistinctValues(const GrayImage& img) {
  const auto hist = Histogram(img);
  return static_cast<int>(std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }));
}

std::array<int, 2> OtsuTwoThresholds(const std::array<std::int64_t, 256>& histogram) {
  // Prefix sums of counts and first moments; class k contributes S_k^2 / N_k
  // to the between-class variance up to terms independent of (t1, t2).
  std::array<double, 257> count{};
  std::array<double, 257> moment{};
  for (int v = 0; v < 256; ++v) {
    count[v + 1] = count[v] + static_cast<double>(histogram[v]);
    moment[v + 1] = moment[v] + static_cast<double>(histogram[v]) * v;
  }
  auto term = [&](int lo, int hi) {  // inclusive bin range
    const double n = count[hi + 1] - count[lo];
    if (n <= 0.0) return 0.0;
    const double s = moment[hi + 1] - moment[lo];
    return s * s / n;
  };
  double best = -1.0;
  std::array<int, 2> best_pair{0, 1};
  for (int t1 = 0; t1 < 254; ++t1) {
    const double first = term(0, t1);
    for (int t2 = t1 + 1; t2 <= 254; ++t2) {
      const double score = first + term(t1 + 1, t2) + term(t2 + 1, 255);
      if (score > best) {
        best = score;
        best_pair = {t1, t2};
      }
    }
  }
  return best_pair;
}

int OtsuThreshold(const std::array<std::int64_t, 256>& histogram) {
  double total_n = 0.0;
  double total_s = 0.0;
  for (int v = 0; v < 256; ++v) {
    total_n += static_cast<double>(histogram[v]);
    total_s += static_cast<double>(histogram[v]) * v;
  }
  double n = 0.0;
  double s = 0.0;
  double best = -1.0;
  int best_t = 0;
  for (int t = 0; t <= 254; ++t) {
    n += static_cast<double>(histogram[t]);
    s += static_cast<double>(histogram[t]) * t;
    const double rest_n = total_n - n;
    double score = 0.0;
    if (n > 0.0) score += s * s / n;
    if (rest_n > 0.0) score += (total_s - s) * (total_s - s) / rest_n;
    if (score > best) {
      best = score;
      best_t = t;
    }
  }
  return best_t;
}

namespace {

TrinaryImage ApplyThresholds(const GrayImage& img, int t1, int t2) {
  TrinaryImage out;
  out.low_threshold = t1;
  out.high_threshold = t2;
  out.classes = img.pixels.unaryExpr([t1, t2](std::uint8_t p) -> std::uint8_t {
    if (p <= t1) return 0;
    return p <= t2 ? 1 : 2;
  });
  return out;
}

}  // namespace

TrinaryImage Trinarize(const GrayImage& img) {
  const auto hist = Histogram(img);
  const int distinct =
      static_cast<int>(std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }));
  if (distinct < 3) {
    throw Error(ErrorKind::kDegenerateInput,
                "trinarization needs at least 3 distinct intensity values, image has " +
                    std::to_string(distinct));
  }
  const auto [t1, t2] = OtsuTwoThresholds(hist);
  return ApplyThresholds(img, t1, t2);
}

TrinaryImage IntensityClasses(const GrayImage& img) {
  const auto hist = Histogram(img);
  std::vector<int> values;
  for (int v = 0; v < 256; ++v) {
    if (hist[v] > 0) values.push_back(v);
  }
  if (values.size() < 2) {
    throw Error(ErrorKind::kSegmentation,
                "segmentation failed: image is constant, no foreground region");
  }
  if (values.size() == 2) {
    // Both thresholds at the dark tone: dark -> 0, light -> 2.
    return ApplyThresholds(img, values[0], values[0]);
  }
  return Trinarize(img);
}

BinaryMask LargestComponent(const BinaryMask& mask) {
  const int w = mask.width();
  const int h = mask.height();
  std::vector<int> labels;
  const auto sizes = LabelComponents(w, h, true, [&](int x, int y) { return mask(x, y); }, labels);
  BinaryMask out(w, h);
  if (sizes.empty()) return out;
  const auto best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.bits(y, x) = labels[y * w + x] == best;
  }
  return out;
}

BinaryMask FillHoles(const BinaryMask& mask) {
  const int w = mask.width();
  const int h = mask.height();
  std::vector<int> labels;
  const auto sizes =
      LabelComponents(w, h, false, [&](int x, int y) { return !mask(x, y); }, labels);
  std::vector<bool> touches_border(sizes.size(), false);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if ((x == 0 || y == 0 || x == w - 1 || y == h - 1) && labels[y * w + x] >= 0) {
        touches_border[labels[y * w + x]] = true;
      }
    }
  }
  BinaryMask out = mask;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int label = labels[y * w + x];
      if (label >= 0 && !touches_border[label]) out.bits(y, x) = true;
    }
  }
  return out;
}

BinaryMask SegmentHead(const TrinaryImage& tri) {
  const int w = tri.width();
  const int h = tri.height();
  std::array<std::int64_t, 3> border{};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (x == 0 || y == 0 || x == w - 1 || y == h - 1) ++border[tri(x, y)];
    }
  }
  const auto background =
      static_cast<std::uint8_t>(std::max_element(border.begin(), border.end()) - border.begin());
  BinaryMask foreground(w, h);
  foreground.bits = tri.classes.array() != background;
  if (foreground.count() == 0) {
    throw Error(ErrorKind::kSegmentation, "segmentation failed: no foreground pixels");
  }
  return FillHoles(LargestComponent(foreground));
}

BinaryMask SegmentHead(const GrayImage& img) { return SegmentHead(IntensityClasses(img)); }

double MeanHeadIntensity(const GrayImage& img, const BinaryMask& mask) {
  RequireSameSize(img.width(), img.height(), mask.width(), mask.height());
  const auto n = mask.count();
  if (n == 0) throw Error(ErrorKind::kEmptyRegion, "head mask is empty");
  const double sum = mask.bits.select(img.pixels.cast<double>(), 0.0).sum();
  return sum / static_cast<double>(n);
}

}  // namespace fragpredict
