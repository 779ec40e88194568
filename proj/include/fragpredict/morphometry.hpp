#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "fragpredict/imaging.hpp"

namespace fragpredict {

inline constexpr int kMorphFeatureCount = 8;
using MorphVector = Eigen::Matrix<double, kMorphFeatureCount, 1>;

// Column order used for CSV export and for the fused classifier input.
inline constexpr std::array<std::string_view, kMorphFeatureCount> kMorphFeatureNames = {
    "area",         "perimeter",      "major",       "minor",
    "eccentricity", "equiv_diameter", "circularity", "acrosome_fraction"};

struct RegionProps {
  double area = 0.0;
  double perimeter = 0.0;
  double major_axis = 0.0;
  double minor_axis = 0.0;
  double eccentricity = 0.0;
  double equiv_diameter = 0.0;
  bool minor_axis_floored = false;
};

struct MorphFeatures {
  double area = 0.0;
  double perimeter = 0.0;
  double major_axis = 0.0;
  double minor_axis = 0.0;
  double eccentricity = 0.0;
  double equiv_diameter = 0.0;
  double circularity = 0.0;
  double acrosome_fraction = 0.0;

  MorphVector AsVector() const;
  static MorphFeatures FromVector(const MorphVector& v);
};

struct WhoFlags {
  bool is_round = false;       // major/minor < 1.5
  bool is_elongated = false;   // major/minor > 2
  bool acrosome_normal = false;  // fraction in [0.40, 0.70]
  double ratio = 0.0;
};

struct MorphometryOptions {
  // Trinary class counted as acrosome; the cap renders lighter than the nucleus.
  std::uint8_t acrosome_class = 2;
};

// Outer-contour length. The 8-connected boundary chain of pixel centres is
// weighted 1 (axis step) and sqrt(2) (diagonal step), scaled by the
// orientation-averaged chain-code bias pi(1+sqrt2)/8, and offset outward by
// half a pixel (adds pi per outline).
double ContourPerimeter(const BinaryMask& mask);

RegionProps ComputeRegionProps(const BinaryMask& mask);

double Circularity(double area, double perimeter);

double AcrosomeFraction(const TrinaryImage& tri, const BinaryMask& mask,
                        std::uint8_t acrosome_class = 2);

WhoFlags EvaluateWho(const MorphFeatures& f);

MorphFeatures ExtractFeatures(const GrayImage& img, const MorphometryOptions& options = {});

std::string MorphCsvHeader();
std::string MorphCsvRow(const MorphFeatures& f);

}  // namespace fragpredict
