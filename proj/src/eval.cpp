#include "fragpredict/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "fragpredict/error.hpp"

namespace fragpredict {

namespace {

void CheckBinary(std::span<const int> labels, const char* what) {
  for (int v : labels) {
    if (v != 0 && v != 1) throw Error(ErrorKind::kValidation, std::string(what) + " must be 0 or 1");
  }
}

std::string Fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", RoundHalfUp(v, 2));
  return buf;
}

std::string XmlEscape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

ConfusionCounts CountConfusion(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.empty()) throw Error(ErrorKind::kEmptyInput, "classification report needs at least one sample");
  if (labels.size() != predictions.size()) {
    throw Error(ErrorKind::kValidation, "labels and predictions differ in length");
  }
  CheckBinary(labels, "labels");
  CheckBinary(predictions, "predictions");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      (predictions[i] == 1 ? c.tp : c.fn) += 1;
    } else {
      (predictions[i] == 1 ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

ClassificationReport ReportFromCounts(const ConfusionCounts& counts) {
  if (counts.total() == 0) throw Error(ErrorKind::kEmptyInput, "classification report needs at least one sample");
  ClassificationReport r;
  r.counts = counts;
  // Class 0 treats "unfragmented" as positive: its true positives are tn.
  const std::array<std::int64_t, 2> correct = {counts.tn, counts.tp};
  const std::array<std::int64_t, 2> predicted = {counts.tn + counts.fn, counts.tp + counts.fp};
  const std::array<std::int64_t, 2> support = {counts.tn + counts.fp, counts.tp + counts.fn};
  for (int k = 0; k < 2; ++k) {
    ClassMetrics& m = r.per_class[k];
    m.support = support[k];
    m.precision = predicted[k] ? static_cast<double>(correct[k]) / predicted[k] : 0.0;
    m.recall = support[k] ? static_cast<double>(correct[k]) / support[k] : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    if (support[k] == 0) {
      r.warnings.push_back(std::string("class '") + kClassNames[k] + "' has zero support; its metrics are 0");
    } else if (predicted[k] == 0) {
      r.warnings.push_back(std::string("class '") + kClassNames[k] + "' is never predicted; precision set to 0");
    }
  }
  const double total = static_cast<double>(counts.total());
  r.accuracy = static_cast<double>(counts.tp + counts.tn) / total;
  r.macro.support = r.weighted.support = counts.total();
  r.macro.precision = (r.per_class[0].precision + r.per_class[1].precision) / 2.0;
  r.macro.recall = (r.per_class[0].recall + r.per_class[1].recall) / 2.0;
  r.macro.f1 = (r.per_class[0].f1 + r.per_class[1].f1) / 2.0;
  const double w0 = support[0] / total;
  const double w1 = support[1] / total;
  r.weighted.precision = w0 * r.per_class[0].precision + w1 * r.per_class[1].precision;
  r.weighted.recall = w0 * r.per_class[0].recall + w1 * r.per_class[1].recall;
  r.weighted.f1 = w0 * r.per_class[0].f1 + w1 * r.per_class[1].f1;
  return r;
}

ClassificationReport MakeClassificationReport(std::span<const int> labels, std::span<const int> predictions) {
  return ReportFromCounts(CountConfusion(labels, predictions));
}

double TrapezoidArea(const std::vector<double>& x, const std::vector<double>& y) {
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2.0;
  return area;
}

RocCurve ComputeRoc(std::span<const int> labels, std::span<const double> scores, std::string label) {
  if (labels.size() != scores.size()) throw Error(ErrorKind::kValidation, "labels and scores differ in length");
  CheckBinary(labels, "labels");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  const auto negatives = static_cast<std::int64_t>(labels.size()) - positives;
  if (positives == 0 || negatives == 0) {
    throw Error(ErrorKind::kUndefinedRoc, "ROC is undefined unless both classes are present");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error(ErrorKind::kValidation, "ROC scores must be finite");
  }
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.label = std::move(label);
  curve.fpr.push_back(0.0);
  curve.tpr.push_back(0.0);
  curve.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::int64_t tp = 0, fp = 0;
  // Twice the area in units of (1/P)(1/N), accumulated exactly in integers.
  std::int64_t twice_area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    const std::int64_t tp_before = tp, fp_before = fp;
    for (; i < order.size() && scores[order[i]] == threshold; ++i) (labels[order[i]] == 1 ? tp : fp) += 1;
    twice_area += (fp - fp_before) * (tp + tp_before);
    curve.fpr.push_back(static_cast<double>(fp) / negatives);
    curve.tpr.push_back(static_cast<double>(tp) / positives);
    curve.thresholds.push_back(threshold);
  }
  curve.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(positives) * negatives);
  return curve;
}

double AucOracle(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw Error(ErrorKind::kValidation, "labels and scores differ in length");
  std::int64_t pos = 0, neg = 0, twice_wins = 0;
  for (int v : labels) (v == 1 ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw Error(ErrorKind::kUndefinedRoc, "AUC is undefined unless both classes are present");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j]) {
        twice_wins += 2;
      } else if (scores[i] == scores[j]) {
        twice_wins += 1;
      }
    }
  }
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * neg);
}

RocCurve MicroAverageRoc(const std::vector<OneVsRest>& problems, std::string label) {
  std::vector<int> labels;
  std::vector<double> scores;
  for (const auto& p : problems) {
    if (p.labels.size() != p.scores.size()) throw Error(ErrorKind::kValidation, "one-vs-rest lengths differ");
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
    scores.insert(scores.end(), p.scores.begin(), p.scores.end());
  }
  return ComputeRoc(labels, scores, std::move(label));
}

std::vector<OneVsRest> BinaryOneVsRest(std::span<const int> labels, std::span<const double> probabilities) {
  if (labels.size() != probabilities.size()) throw Error(ErrorKind::kValidation, "labels and scores differ in length");
  std::vector<OneVsRest> out(2);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[0].labels.push_back(labels[i] == 0 ? 1 : 0);
    out[0].scores.push_back(1.0 - probabilities[i]);
    out[1].labels.push_back(labels[i] == 1 ? 1 : 0);
    out[1].scores.push_back(probabilities[i]);
  }
  return out;
}

double RoundHalfUp(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // The small nudge keeps values like 0.665 (stored as 0.66499...) rounding up.
  return std::floor(value * scale + 0.5 + 1e-9) / scale;
}

std::string RenderReport(const ClassificationReport& report) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %9s %9s %9s %9s\n", "Class", "Precision", "Recall", "F1-Score", "Support");
  out << line;
  auto row = [&](const char* name, const ClassMetrics& m) {
    std::snprintf(line, sizeof(line), "%-14s %9s %9s %9s %9lld\n", name, Fixed2(m.precision).c_str(),
                  Fixed2(m.recall).c_str(), Fixed2(m.f1).c_str(), static_cast<long long>(m.support));
    out << line;
  };
  row(kClassNames[0], report.per_class[0]);
  row(kClassNames[1], report.per_class[1]);
  std::snprintf(line, sizeof(line), "%-14s %9s %9s %9s %9lld\n", "Accuracy", "", "", Fixed2(report.accuracy).c_str(),
                static_cast<long long>(report.counts.total()));
  out << line;
  row("Macro Avg", report.macro);
  row("Weighted Avg", report.weighted);
  for (const auto& w : report.warnings) out << "warning: " << w << '\n';
  return out.str();
}

std::string ReportCsv(const ClassificationReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "class,precision,recall,f1,support\n";
  auto row = [&](const char* name, const ClassMetrics& m) {
    out << name << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ',' << m.support << '\n';
  };
  row(kClassNames[0], report.per_class[0]);
  row(kClassNames[1], report.per_class[1]);
  out << "Accuracy,,," << report.accuracy << ',' << report.counts.total() << '\n';
  row("Macro Avg", report.macro);
  row("Weighted Avg", report.weighted);
  return out.str();
}

nlohmann::json ReportToJson(const ClassificationReport& report) {
  auto metrics = [](const ClassMetrics& m) {
    return nlohmann::json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
  };
  return {{kClassNames[0], metrics(report.per_class[0])},
          {kClassNames[1], metrics(report.per_class[1])},
          {"accuracy", report.accuracy},
          {"macro_avg", metrics(report.macro)},
          {"weighted_avg", metrics(report.weighted)},
          {"confusion", {{"tp", report.counts.tp}, {"fp", report.counts.fp}, {"tn", report.counts.tn}, {"fn", report.counts.fn}}},
          {"warnings", report.warnings}};
}

std::string RenderRocSvg(const std::vector<RocCurve>& curves, const std::string& title) {
  constexpr double kWidth = 480, kHeight = 480;
  constexpr double kLeft = 60, kRight = 20, kTop = 40, kBottom = 60;
  constexpr double kPlotW = kWidth - kLeft - kRight;
  constexpr double kPlotH = kHeight - kTop - kBottom;
  static constexpr std::array<const char*, 6> kColors = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  auto px = [&](double x) { return kLeft + x * kPlotW; };
  auto py = [&](double y) { return kTop + (1.0 - y) * kPlotH; };

  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(2);
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
      << XmlEscape(title) << "</text>\n";
  // Axes over [0,1]^2 with ticks every 0.2.
  svg << "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\">\n"
      << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(0) << "\"/>\n"
      << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\"" << py(1) << "\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double t = i / 5.0;
    svg << "<line x1=\"" << px(t) << "\" y1=\"" << py(0) << "\" x2=\"" << px(t) << "\" y2=\"" << py(0) + 5 << "\"/>\n"
        << "<line x1=\"" << px(0) - 5 << "\" y1=\"" << py(t) << "\" x2=\"" << px(0) << "\" y2=\"" << py(t) << "\"/>\n";
  }
  svg << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double t = i / 5.0;
    svg << "<text x=\"" << px(t) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\">" << Fixed2(t).substr(0, 3)
        << "</text>\n"
        << "<text x=\"" << px(0) - 8 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\">" << Fixed2(t).substr(0, 3)
        << "</text>\n";
  }
  svg << "<text x=\"" << px(0.5) << "\" y=\"" << kHeight - 18 << "\" text-anchor=\"middle\">False Positive Rate</text>\n"
      << "<text x=\"16\" y=\"" << py(0.5) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << py(0.5)
      << ")\">True Positive Rate</text>\n</g>\n";
  svg << "<line id=\"chance\" x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
      << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";

  for (std::size_t c = 0; c < curves.size(); ++c) {
    const auto& curve = curves[c];
    svg << "<path class=\"roc\" fill=\"none\" stroke=\"" << kColors[c % kColors.size()] << "\" stroke-width=\"2\" d=\"";
    for (std::size_t i = 0; i < curve.fpr.size(); ++i) {
      svg << (i == 0 ? "M" : " L") << px(curve.fpr[i]) << ',' << py(curve.tpr[i]);
    }
    svg << "\"/>\n";
  }
  if (!curves.empty()) {
    svg << "<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
    for (std::size_t c = 0; c < curves.size(); ++c) {
      const double y = py(0) - 12.0 - 18.0 * static_cast<double>(curves.size() - 1 - c);
      const std::string name = curves[c].label.empty() ? "curve " + std::to_string(c + 1) : curves[c].label;
      svg << "<line x1=\"" << px(0.45) << "\" y1=\"" << y - 4 << "\" x2=\"" << px(0.52) << "\" y2=\"" << y - 4
          << "\" stroke=\"" << kColors[c % kColors.size()] << "\" stroke-width=\"2\"/>\n"
          << "<text class=\"legend-entry\" x=\"" << px(0.54) << "\" y=\"" << y << "\">" << XmlEscape(name)
          << " (AUC = " << Fixed2(curves[c].auc) << ")</text>\n";
    }
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

nlohmann::json RocToJson(const std::vector<RocCurve>& curves) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : curves) {
    nlohmann::json thresholds = nlohmann::json::array();
    for (double t : c.thresholds) {
      if (std::isinf(t)) {
        thresholds.push_back("inf");
      } else {
        thresholds.push_back(t);
      }
    }
    out.push_back({{"label", c.label}, {"fpr", c.fpr}, {"tpr", c.tpr}, {"thresholds", thresholds}, {"auc", c.auc}});
  }
  return out;
}

}  // namespace fragpredict
