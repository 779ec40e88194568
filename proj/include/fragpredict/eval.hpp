#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fragpredict {

inline constexpr std::array<const char*, 2> kClassNames = {"Unfragmented", "Fragmented"};

// Positive class is 1 (fragmented).
struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

// All values unrounded; rounding happens only when rendering.
struct ClassificationReport {
  std::array<ClassMetrics, 2> per_class;  // index = class label
  double accuracy = 0.0;
  ClassMetrics macro;
  ClassMetrics weighted;
  ConfusionCounts counts;
  std::vector<std::string> warnings;  // e.g. a class with zero support
};

ConfusionCounts CountConfusion(std::span<const int> labels, std::span<const int> predictions);
ClassificationReport ReportFromCounts(const ConfusionCounts& counts);
ClassificationReport MakeClassificationReport(std::span<const int> labels, std::span<const int> predictions);

struct RocCurve {
  std::string label;
  std::vector<double> fpr;
  std::vector<double> tpr;
  std::vector<double> thresholds;  // thresholds[0] = +inf for the (0,0) point
  double auc = 0.0;
};

// Thresholds sweep the distinct scores in decreasing order; tied scores cross
// together. AUC is the trapezoidal area of the stored points.
RocCurve ComputeRoc(std::span<const int> labels, std::span<const double> scores, std::string label = "");

// Pairwise (Mann-Whitney) AUC: ties count one half.
double AucOracle(std::span<const int> labels, std::span<const double> scores);

struct OneVsRest {
  std::vector<int> labels;  // 1 when the sample belongs to the class
  std::vector<double> scores;
};

// Pools every (label, score) pair of the one-vs-rest problems, then ComputeRoc.
RocCurve MicroAverageRoc(const std::vector<OneVsRest>& problems, std::string label = "micro-average");

// One-vs-rest problems for a binary classifier that outputs P(class 1).
std::vector<OneVsRest> BinaryOneVsRest(std::span<const int> labels, std::span<const double> probabilities);

double TrapezoidArea(const std::vector<double>& x, const std::vector<double>& y);

double RoundHalfUp(double value, int decimals = 2);

std::string RenderReport(const ClassificationReport& report);
std::string ReportCsv(const ClassificationReport& report);
nlohmann::json ReportToJson(const ClassificationReport& report);
std::string RenderRocSvg(const std::vector<RocCurve>& curves, const std::string& title = "ROC");
nlohmann::json RocToJson(const std::vector<RocCurve>& curves);

}  // namespace fragpredict
