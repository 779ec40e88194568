#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "fragpredict/error.hpp"
#include "fragpredict/image_io.hpp"
#include "fragpredict/imaging.hpp"
#include "support.hpp"

using namespace fragpredict;
using testsupport::RasterDisk;

namespace {

GrayImage FromValues(int w, int h, const std::vector<int>& values) {
  GrayImage img(w, h);
  for (int i = 0; i < w * h; ++i) img.pixels(i / w, i % w) = static_cast<std::uint8_t>(values[i]);
  return img;
}

// Between-class variance of a 3-way split, summed over classes as
// w_k (mu_k - mu)^2 in long double.
long double BetweenClassVariance(const std::array<std::int64_t, 256>& hist, int t1, int t2) {
  long double n[3] = {0, 0, 0}, s[3] = {0, 0, 0}, total_n = 0, total_s = 0;
  for (int v = 0; v < 256; ++v) {
    const int k = v <= t1 ? 0 : (v <= t2 ? 1 : 2);
    n[k] += hist[v];
    s[k] += static_cast<long double>(hist[v]) * v;
    total_n += hist[v];
    total_s += static_cast<long double>(hist[v]) * v;
  }
  const long double mu = total_s / total_n;
  long double var = 0;
  for (int k = 0; k < 3; ++k) {
    if (n[k] > 0) var += n[k] / total_n * (s[k] / n[k] - mu) * (s[k] / n[k] - mu);
  }
  return var;
}

std::array<double, 3> ClassMeans(const GrayImage& img, const TrinaryImage& tri) {
  std::array<double, 3> sum{0, 0, 0}, cnt{0, 0, 0};
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      sum[tri.classes(y, x)] += img.pixels(y, x);
      cnt[tri.classes(y, x)] += 1;
    }
  }
  return {cnt[0] ? sum[0] / cnt[0] : 0, cnt[1] ? sum[1] / cnt[1] : 0, cnt[2] ? sum[2] / cnt[2] : 0};
}

}  // namespace

TEST_CASE("grayscale conversion uses rounded luminance weights") {
  RgbImage rgb(3, 1);
  rgb.data = {255, 255, 255, 0, 0, 0, 100, 100, 100};
  const GrayImage g = ToGrayscale(rgb);
  CHECK(g(0, 0) == 255);
  CHECK(g(1, 0) == 0);
  CHECK(g(2, 0) == 100);

  RgbImage red(1, 1);
  red.data = {200, 10, 50};
  CHECK(ToGrayscale(red)(0, 0) == static_cast<int>(std::lround(0.299 * 200 + 0.587 * 10 + 0.114 * 50)));

  RgbImage empty;
  CHECK_THROWS_AS(ToGrayscale(empty), Error);
  try {
    ToGrayscale(empty);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDimension);
  }
}

TEST_CASE("trinarize maps three tones to three classes") {
  const GrayImage img = FromValues(3, 2, {0, 128, 255, 255, 128, 0});
  const TrinaryImage tri = Trinarize(img);
  CHECK(tri.low_threshold >= 0);
  CHECK(tri.low_threshold < 128);
  CHECK(tri.high_threshold >= 128);
  CHECK(tri.high_threshold < 255);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 3; ++x) {
      const int expected = img.pixels(y, x) == 0 ? 0 : (img.pixels(y, x) == 128 ? 1 : 2);
      CHECK(tri.classes(y, x) == expected);
    }
  }
  // Idempotent in class structure.
  GrayImage again(3, 2);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 3; ++x) again.pixels(y, x) = static_cast<std::uint8_t>(tri.classes(y, x) == 0 ? 0 : tri.classes(y, x) == 1 ? 128 : 255);
  }
  CHECK(Trinarize(again).classes == tri.classes);
}

TEST_CASE("trinarize rejects images with fewer than three values") {
  for (int distinct : {1, 2}) {
    GrayImage img(4, 4, 10);
    if (distinct == 2) img.pixels(0, 0) = 200;
    try {
      Trinarize(img);
      FAIL("expected a degenerate-input error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kDegenerateInput);
      CHECK(std::string(e.what()).find(std::to_string(distinct)) != std::string::npos);
    }
  }
}

TEST_CASE("trinarize recovers three Gaussian clusters") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0.0, 10.0);
  const std::array<double, 3> centres{40, 128, 215};
  GrayImage img(90, 90);
  Raster<std::uint8_t> truth(90, 90);
  for (int y = 0; y < 90; ++y) {
    for (int x = 0; x < 90; ++x) {
      const int k = (x / 30 + y) % 3;
      truth(y, x) = static_cast<std::uint8_t>(k);
      img.pixels(y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(centres[k] + noise(rng)), 0L, 255L));
    }
  }
  const TrinaryImage tri = Trinarize(img);
  const double agree = static_cast<double>((tri.classes.array() == truth.array()).count()) / truth.size();
  CHECK(agree >= 0.99);
}

TEST_CASE("two-threshold Otsu reaches the exhaustive optimum") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::array<std::int64_t, 256> hist{};
    const int tones = 3 + static_cast<int>(rng() % 6);
    for (int k = 0; k < tones; ++k) hist[rng() % 256] += 1 + static_cast<std::int64_t>(rng() % 50);
    long double best = -1;
    for (int t1 = 0; t1 < 255; ++t1) {
      for (int t2 = t1 + 1; t2 <= 254; ++t2) best = std::max(best, BetweenClassVariance(hist, t1, t2));
    }
    const auto [t1, t2] = OtsuTwoThresholds(hist);
    CHECK(t1 < t2);
    CHECK(static_cast<double>(BetweenClassVariance(hist, t1, t2)) == doctest::Approx(static_cast<double>(best)).epsilon(1e-9));
  }
}

TEST_CASE("two-threshold Otsu breaks ties lexicographically") {
  std::array<std::int64_t, 256> hist{};
  hist[0] = hist[100] = hist[200] = 1;
  const auto t = OtsuTwoThresholds(hist);
  CHECK(t[0] == 0);
  CHECK(t[1] == 100);
}

TEST_CASE("trinary classes are ordered by mean intensity") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    GrayImage img(20, 20);
    for (int i = 0; i < 400; ++i) img.pixels(i / 20, i % 20) = static_cast<std::uint8_t>(rng() % 256);
    const TrinaryImage tri = Trinarize(img);
    const auto means = ClassMeans(img, tri);
    CHECK(means[0] <= means[1]);
    CHECK(means[1] <= means[2]);
  }
}

TEST_CASE("segment_head finds a disk on a white background") {
  const auto disk = RasterDisk(64, 10.0, 0, 255);
  const BinaryMask mask = SegmentHead(disk.image);
  CHECK(mask.count() == disk.count);
  CHECK(std::abs(mask.count() - M_PI * 100.0) / (M_PI * 100.0) <= 0.02);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) CHECK(mask(x, y) == (disk.image(x, y) == 0));
  }
}

TEST_CASE("segment_head keeps only the largest component") {
  GrayImage img(64, 64, 255);
  std::int64_t big = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (testsupport::InEllipse(x, y, 20, 30, 10, 10, 0)) {
        img.pixels(y, x) = 0;
        ++big;
      } else if (testsupport::InEllipse(x, y, 50, 50, 4, 4, 0)) {
        img.pixels(y, x) = 0;
      }
    }
  }
  const BinaryMask mask = SegmentHead(img);
  CHECK(mask.count() == big);
  CHECK_FALSE(mask(50, 50));
  CHECK(mask(20, 30));
}

TEST_CASE("segment_head fills interior holes") {
  auto disk = RasterDisk(64, 12.0, 0, 255);
  // 2-pixel hole near the centre.
  disk.image.pixels(31, 31) = 255;
  disk.image.pixels(31, 32) = 255;
  const BinaryMask mask = SegmentHead(disk.image);
  CHECK(mask.count() == disk.count);
  CHECK(mask(31, 31));
}

TEST_CASE("segment_head on a blank image is a segmentation failure") {
  try {
    SegmentHead(GrayImage(32, 32, 128));
    FAIL("expected a segmentation failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSegmentation);
  }
}

TEST_CASE("segment_head is invariant under intensity offsets with headroom") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 3.0);
  GrayImage base(64, 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      double v = 60;
      if (testsupport::InEllipse(x, y, 31, 33, 18, 10, 0.4)) v = x > 36 ? 190 : 120;
      base.pixels(y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v + noise(rng)), 25L, 230L));
    }
  }
  const BinaryMask reference = SegmentHead(base);
  for (int b : {-20, 20}) {
    GrayImage shifted = base;
    shifted.pixels = base.pixels.unaryExpr([b](std::uint8_t p) { return static_cast<std::uint8_t>(p + b); });
    CHECK(SegmentHead(shifted).bits == reference.bits);
  }
}

TEST_CASE("mean_head_intensity averages the masked pixels") {
  GrayImage img = FromValues(2, 2, {10, 20, 30, 40});
  BinaryMask all(2, 2);
  all.bits.setConstant(true);
  CHECK(MeanHeadIntensity(img, all) == doctest::Approx(25.0));

  GrayImage uniform(5, 5, 77);
  BinaryMask some(5, 5);
  some.bits(1, 2) = some.bits(3, 3) = true;
  CHECK(MeanHeadIntensity(uniform, some) == 77.0);

  GrayImage half = FromValues(2, 1, {0, 255});
  BinaryMask both(2, 1);
  both.bits.setConstant(true);
  CHECK(MeanHeadIntensity(half, both) == 127.5);

  std::mt19937_64 rng(1);
  GrayImage random(13, 7);
  double sum = 0;
  for (int i = 0; i < 91; ++i) {
    random.pixels(i / 13, i % 13) = static_cast<std::uint8_t>(rng() % 256);
    sum += random.pixels(i / 13, i % 13);
  }
  BinaryMask full(13, 7);
  full.bits.setConstant(true);
  CHECK(MeanHeadIntensity(random, full) == sum / 91.0);
}

TEST_CASE("mean_head_intensity errors") {
  GrayImage img(4, 4, 1);
  try {
    MeanHeadIntensity(img, BinaryMask(4, 4));
    FAIL("expected empty-region error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kEmptyRegion);
  }
  BinaryMask wrong(3, 4);
  wrong.bits.setConstant(true);
  try {
    MeanHeadIntensity(img, wrong);
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDimension);
  }
}

TEST_CASE("PGM and PNG round trips") {
  testsupport::TempDir dir("io");
  GrayImage img(7, 5);
  for (int i = 0; i < 35; ++i) img.pixels(i / 7, i % 7) = static_cast<std::uint8_t>(i * 7);
  WritePgm(dir.path() / "a.pgm", img);
  WritePng(dir.path() / "a.png", img);
  CHECK(ReadGrayImage(dir.path() / "a.pgm").pixels == img.pixels);
  CHECK(ReadGrayImage(dir.path() / "a.png").pixels == img.pixels);

  RgbImage rgb(2, 1);
  rgb.data = {255, 0, 0, 10, 20, 30};
  WritePng(dir.path() / "rgb.png", rgb);
  CHECK(ReadGrayImage(dir.path() / "rgb.png").pixels == ToGrayscale(rgb).pixels);
}

TEST_CASE("image reader rejects unknown and truncated files") {
  testsupport::TempDir dir("io_bad");
  {
    std::ofstream(dir.path() / "x.bmp") << "BM not an image";
    std::ofstream(dir.path() / "t.pgm", std::ios::binary) << "P5\n4 4\n255\nabc";
    std::ofstream(dir.path() / "m.pgm", std::ios::binary) << "P5\n1 1\n65535\nab";
  }
  for (const char* name : {"x.bmp", "t.pgm", "m.pgm", "missing.png"}) {
    try {
      ReadGrayImage(dir.path() / name);
      FAIL("expected an I/O error for " << name);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kIo);
    }
  }
}
