#include "fragpredict/morphometry.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "fragpredict/error.hpp"

namespace fragpredict {

namespace {

// Clockwise in image coordinates (y grows downward), starting east.
constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
constexpr int kDy[8] = {0, 1, 1, 1, 0, -1, -1, -1};

// Mean length of an 8-connected chain per unit of true length, averaged over
// orientations, is 8 / (pi (1 + sqrt2)); its inverse removes the bias.
constexpr double kChainIsotropy = std::numbers::pi * (1.0 + std::numbers::sqrt2) / 8.0;

struct ChainCounts {
  long axis = 0;
  long diagonal = 0;
};

// Moore-neighbour trace of the outer boundary starting at the first pixel of
// the component in raster order, with Jacob's stopping criterion.
ChainCounts TraceOuterBoundary(const Raster<bool>& fg, int sx, int sy) {
  const int w = static_cast<int>(fg.cols());
  const int h = static_cast<int>(fg.rows());
  auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && fg(y, x); };

  ChainCounts counts;
  int px = sx;
  int py = sy;
  int search = 4;  // west neighbour is known background
  int first_move = -1;
  for (long steps = 0;; ++steps) {
    int move = -1;
    for (int k = 0; k < 8; ++k) {
      const int d = (search + k) % 8;
      if (inside(px + kDx[d], py + kDy[d])) {
        move = d;
        break;
      }
    }
    if (move < 0) return counts;  // isolated pixel
    if (steps == 0) {
      first_move = move;
    } else if (px == sx && py == sy && move == first_move) {
      return counts;
    }
    (move % 2 == 0 ? counts.axis : counts.diagonal) += 1;
    px += kDx[move];
    py += kDy[move];
    search = (move % 2 == 0) ? (move + 6) % 8 : (move + 5) % 8;
  }
}

}  // namespace

MorphVector MorphFeatures::AsVector() const {
  MorphVector v;
  v << area, perimeter, major_axis, minor_axis, eccentricity, equiv_diameter, circularity,
      acrosome_fraction;
  return v;
}

MorphFeatures MorphFeatures::FromVector(const MorphVector& v) {
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
}

double ContourPerimeter(const BinaryMask& mask) {
  const BinaryMask filled = FillHoles(mask);
  const int w = filled.width();
  const int h = filled.height();
  // Visit each 8-connected component once, from its first raster pixel.
  std::vector<char> seen(static_cast<std::size_t>(w) * h, 0);
  std::vector<int> stack;
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!filled(x, y) || seen[y * w + x]) continue;
      const ChainCounts chain = TraceOuterBoundary(filled.bits, x, y);
      total += kChainIsotropy * (chain.axis + std::numbers::sqrt2 * chain.diagonal) +
               std::numbers::pi;
      stack.push_back(y * w + x);
      seen[y * w + x] = 1;
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        for (int d = 0; d < 8; ++d) {
          const int nx = cur % w + kDx[d];
          const int ny = cur / w + kDy[d];
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          if (!filled(nx, ny) || seen[ny * w + nx]) continue;
          seen[ny * w + nx] = 1;
          stack.push_back(ny * w + nx);
        }
      }
    }
  }
  return total;
}

RegionProps ComputeRegionProps(const BinaryMask& mask) {
  const auto count = mask.count();
  if (count == 0) throw Error(ErrorKind::kEmptyRegion, "region_props on an empty mask");

  double sx = 0.0, sy = 0.0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask(x, y)) {
        sx += x;
        sy += y;
      }
    }
  }
  const double n = static_cast<double>(count);
  const double cx = sx / n;
  const double cy = sy / n;
  double mu20 = 0.0, mu02 = 0.0, mu11 = 0.0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask(x, y)) continue;
      const double dx = x - cx;
      const double dy = y - cy;
      mu20 += dx * dx;
      mu02 += dy * dy;
      mu11 += dx * dy;
    }
  }
  mu20 /= n;
  mu02 /= n;
  mu11 /= n;

  const double root = std::sqrt((mu20 - mu02) * (mu20 - mu02) + 4.0 * mu11 * mu11);
  RegionProps props;
  props.area = n;
  props.perimeter = ContourPerimeter(mask);
  props.major_axis = 2.0 * std::sqrt(std::max(0.0, 2.0 * (mu20 + mu02 + root)));
  props.minor_axis = 2.0 * std::sqrt(std::max(0.0, 2.0 * (mu20 + mu02 - root)));
  if (props.minor_axis < 1.0) {
    props.minor_axis = 1.0;
    props.minor_axis_floored = true;
  }
  props.major_axis = std::max(props.major_axis, props.minor_axis);
  const double axis_ratio = props.minor_axis / props.major_axis;
  props.eccentricity = std::sqrt(std::max(0.0, 1.0 - axis_ratio * axis_ratio));
  props.equiv_diameter = std::sqrt(4.0 * n / std::numbers::pi);
  return props;
}

double Circularity(double area, double perimeter) {
  if (!(area > 0.0) || !(perimeter > 0.0)) {
    throw Error(ErrorKind::kDomain, "circularity needs positive area and perimeter");
  }
  return 4.0 * std::numbers::pi * area / (perimeter * perimeter);
}

double AcrosomeFraction(const TrinaryImage& tri, const BinaryMask& mask,
                        std::uint8_t acrosome_class) {
  if (tri.width() != mask.width() || tri.height() != mask.height()) {
    throw Error(ErrorKind::kDimension, "trinary image and mask dimensions differ");
  }
  const auto total = mask.count();
  if (total == 0) throw Error(ErrorKind::kEmptyRegion, "acrosome fraction of an empty mask");
  const auto cap = (mask.bits.array() && (tri.classes.array() == acrosome_class)).count();
  return static_cast<double>(cap) / static_cast<double>(total);
}

WhoFlags EvaluateWho(const MorphFeatures& f) {
  if (!(f.minor_axis > 0.0) || f.major_axis < f.minor_axis) {
    throw Error(ErrorKind::kDomain, "invalid axes for WHO evaluation");
  }
  WhoFlags flags;
  flags.ratio = f.major_axis / f.minor_axis;
  flags.is_round = flags.ratio < 1.5;
  flags.is_elongated = flags.ratio > 2.0;
  flags.acrosome_normal = f.acrosome_fraction >= 0.40 && f.acrosome_fraction <= 0.70;
  return flags;
}

MorphFeatures ExtractFeatures(const GrayImage& img, const MorphometryOptions& options) {
  const TrinaryImage tri = IntensityClasses(img);
  const BinaryMask mask = SegmentHead(tri);
  const RegionProps props = ComputeRegionProps(mask);
  MorphFeatures f;
  f.area = props.area;
  f.perimeter = props.perimeter;
  f.major_axis = props.major_axis;
  f.minor_axis = props.minor_axis;
  f.eccentricity = props.eccentricity;
  f.equiv_diameter = props.equiv_diameter;
  f.circularity = Circularity(props.area, props.perimeter);
  f.acrosome_fraction = AcrosomeFraction(tri, mask, options.acrosome_class);
  return f;
}

std::string MorphCsvHeader() {
  std::string header;
  for (std::size_t i = 0; i < kMorphFeatureNames.size(); ++i) {
    if (i) header += ',';
    header += kMorphFeatureNames[i];
  }
  return header;
}

std::string MorphCsvRow(const MorphFeatures& f) {
  std::ostringstream row;
  row.precision(10);
  const MorphVector v = f.AsVector();
  for (int i = 0; i < kMorphFeatureCount; ++i) {
    if (i) row << ',';
    row << v[i];
  }
  return row.str();
}

}  // namespace fragpredict
