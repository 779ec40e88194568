// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "fragpredict/backbone.hpp"
#include "fragpredict/eval.hpp"
#include "fragpredict/fusion.hpp"
#include "fragpredict/morphometry.hpp"
#include "fragpredict/parallel.hpp"
#include "published_reports.hpp"
#include "support.hpp"

using namespace fragpredict;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void Criterion(const std::string& name, double budget_seconds, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double seconds = testsupport::Seconds(start);
  const bool in_budget = seconds < budget_seconds;
  const bool pass = o.pass && in_budget;
  if (!pass) ++failures;
  std::printf("%s  %-26s %s; %.2f s (budget %.0f s%s)\n", pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds,
              budget_seconds, in_budget ? "" : ", exceeded");
  std::fflush(stdout);
}

std::string Fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

// ---------------------------------------------------------------- metric arithmetic

Outcome MetricArithmetic() {
  bool ok = true;
  std::ostringstream detail;
  for (const auto& published : {testsupport::AnilineBlueBrightfield(), testsupport::ToluidineBluePhaseContrast()}) {
    const auto candidates = testsupport::CountsConsistentWith(published);
    if (candidates.size() != 1) return {false, published.title + ": " + std::to_string(candidates.size()) + " consistent count sets"};
    const ConfusionCounts& c = candidates[0];
    const ClassificationReport r = ReportFromCounts(c);
    auto near = [](double value, const std::string& printed) { return std::abs(value - std::stod(printed)) <= 0.01 + 1e-12; };
    const auto& rows = published.rows;
    const bool rows_ok = near(r.per_class[0].f1, rows[0].f1) && near(r.per_class[1].f1, rows[1].f1) &&
                         near(r.accuracy, rows[2].f1) && near(r.macro.f1, rows[3].f1) &&
                         near(r.macro.precision, rows[3].precision) && near(r.macro.recall, rows[3].recall) &&
                         near(r.weighted.f1, rows[4].f1);
    const auto cells = testsupport::ReportCells(RenderReport(r));
    bool cells_ok = cells.size() == 6;
    for (std::size_t i = 0; cells_ok && i < rows.size(); ++i) {
      cells_ok = cells[i + 1] == std::vector<std::string>{rows[i].name, rows[i].precision, rows[i].recall, rows[i].f1, rows[i].support};
    }
    ok = ok && rows_ok && cells_ok;
    detail << published.title << " tn=" << c.tn << " fp=" << c.fp << " fn=" << c.fn << " tp=" << c.tp
           << Fmt(" F1 %.4f/%.4f acc %.4f macroF1 %.4f", r.per_class[0].f1, r.per_class[1].f1, r.accuracy, r.macro.f1)
           << (cells_ok ? " rendered cells match" : " rendered cells differ") << "; ";
  }
  return {ok, detail.str()};
}

// ---------------------------------------------------------------- AUC

Outcome AucCorrectness() {
  std::mt19937_64 rng(20240);
  double worst = 0.0;
  int with_ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 49);
    const int levels = 2 + static_cast<int>(rng() % 30);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng() % 2);
      s[i] = static_cast<double>(rng() % levels) / (levels - 1);
    }
    y[0] = 0;
    y[1] = 1;
    if (std::set<double>(s.begin(), s.end()).size() < s.size()) ++with_ties;
    worst = std::max(worst, std::abs(ComputeRoc(y, s).auc - testsupport::PairwiseAuc(y, s)));
  }
  return {worst <= 1e-12, Fmt("1000 instances (%d with ties), max |trapezoid - pairwise| = %.3g", with_ties, worst)};
}

// ---------------------------------------------------------------- morphometry

Outcome MorphometryOracle() {
  const MorphFeatures disk = ExtractFeatures(testsupport::RasterDisk(121, 50.0, 0, 255).image);
  const MorphFeatures ellipse = ExtractFeatures(testsupport::RasterEllipse(101, 101, 50, 50, 40, 20, 0.0, 0, 255).image);
  const double ratio = ellipse.major_axis / ellipse.minor_axis;
  const double ecc_target = std::sqrt(0.75);
  const bool ok = disk.circularity >= 0.95 && disk.circularity <= 1.05 && disk.eccentricity <= 0.05 &&
                  std::abs(ratio / 2.0 - 1) <= 0.03 && std::abs(ellipse.eccentricity / ecc_target - 1) <= 0.03;
  return {ok, Fmt("disk C=%.4f e=%.4f; ellipse ratio=%.4f e=%.4f (target %.4f)", disk.circularity, disk.eccentricity,
                  ratio, ellipse.eccentricity, ecc_target)};
}

// ---------------------------------------------------------------- gradient fidelity

std::string LayerType(const std::string& name) {
  static const char* kTypes[] = {"patch_embed", "global_gen", "norm1", "attn.qkv", "attn.kv", "attn.proj",
                                 "norm2",       "mlp.fc1",    "mlp.fc2", "downsample", "fc0", "fc1", "fc2"};
  for (const char* t : kTypes) {
    if (name.find(t) != std::string::npos) return t;
  }
  return name.starts_with("norm.") ? "final_norm" : name;
}

struct GradientTally {
  int sampled = 0;
  int within = 0;
  std::map<std::string, int> per_type;
};

void CheckGradients(const BackboneConfig& bcfg, std::uint64_t seed, int per_tensor, GradientTally& tally) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.2);
  auto backbone = InitBackboneParams<double>(bcfg, seed);
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    for (Eigen::Index k = 0; k < backbone.value(i).size(); ++k) backbone.value(i).data()[k] += jitter(rng);
  }
  auto head = InitHeadParams<double>(bcfg.feature_dim() + kMorphFeatureCount, kDefaultHeadHidden, seed + 1);

  SynthConfig synth;
  synth.counts = {1, 1};
  const SynthSample sample = SynthSampleAt(synth, static_cast<int>(seed % 2));
  const MorphVector morph = ExtractFeatures(sample.image).AsVector();
  std::vector<MorphVector> fit{morph, morph * 1.3, morph * 0.8};
  const Normalizer norm = Normalizer::Fit(fit);
  const Matrix<double> image = ImageTensor<double>(sample.image, bcfg.input_size);
  const double label = static_cast<double>(*sample.record.label);

  auto loss = [&] {
    return nn::BceWithLogits(HeadForward(Fuse(morph, BackboneForward(image, backbone, bcfg), norm), head), label);
  };
  BackboneCache<double> bcache;
  HeadCache<double> hcache;
  const double z = HeadForward(Fuse(morph, BackboneForward(image, backbone, bcfg, &bcache), norm), head, &hcache);
  auto hgrads = head.ZeroGradients();
  auto bgrads = backbone.ZeroGradients();
  const RowVector<double> dinput = HeadBackward(nn::Sigmoid(z) - label, hcache, head, hgrads);
  BackboneBackward<double>(dinput.tail(bcfg.feature_dim()), bcache, backbone, bcfg, bgrads);

  auto sample_store = [&](ParamStore<double>& store, const std::vector<Matrix<double>>& grads) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      const Eigen::Index size = store.value(i).size();
      for (int s = 0; s < std::min<Eigen::Index>(per_tensor, size); ++s) {
        const Eigen::Index k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(size));
        double& w = store.value(i).data()[k];
        const double saved = w;
        const double h = 1e-5;
        w = saved + h;
        const double up = loss();
        w = saved - h;
        const double down = loss();
        w = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = grads[i].data()[k];
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
        ++tally.sampled;
        tally.within += rel <= 1e-3 ? 1 : 0;
        ++tally.per_type[LayerType(store.name(i))];
      }
    }
  };
  sample_store(head, hgrads);
  sample_store(backbone, bgrads);
}

Outcome GradientFidelity() {
  GradientTally tally;
  CheckGradients(BackboneConfig::Micro(), 1, 10, tally);
  CheckGradients(BackboneConfig::Micro(), 2, 10, tally);
  // Two stages so that patch merging is covered as well.
  BackboneConfig two = BackboneConfig::Micro();
  two.patch_size = 2;
  two.stage_dims = {8, 8};
  two.depths = {2, 2};
  two.num_heads = {2, 2};
  CheckGradients(two, 3, 6, tally);

  const std::size_t expected_types = 14;  // 10 backbone layer kinds, final norm, three head layers
  const double fraction = static_cast<double>(tally.within) / tally.sampled;
  std::string types;
  for (const auto& [t, n] : tally.per_type) types += (types.empty() ? "" : ",") + t + "=" + std::to_string(n);
  const bool ok = tally.sampled >= 200 && fraction >= 0.99 && tally.per_type.size() == expected_types;
  return {ok, Fmt("%d/%d within 1e-3 (%.2f%%) over %zu layer types [%s]", tally.within, tally.sampled, 100 * fraction,
                  tally.per_type.size(), types.c_str())};
}

// ---------------------------------------------------------------- learnability and determinism

struct RunSummary {
  TrainResult trained;
  ScoredSet scored;
  ClassificationReport report;
  double auc = 0.0;
};

RunSummary TrainAndScore(const DatasetManifest& manifest, const TrainConfig& tcfg, const BackboneConfig& bcfg,
                         int threads) {
  const LabelRule rule = LabelRule::ForAssay(Assay::kTUNEL);
  RunSummary out;
  out.trained = TrainFromManifest(manifest, Modality::kBrightfield, rule, tcfg, bcfg, threads);
  std::set<std::string> val_ids(out.trained.history.validation_ids.begin(), out.trained.history.validation_ids.end());
  std::vector<SampleRecord> val_records;
  for (const auto& r : manifest.records) {
    if (val_ids.count(r.sample_id)) val_records.push_back(r);
  }
  const PreparedSet prepared = PrepareSamples(val_records, out.trained.model.label_rule, bcfg.input_size, threads);
  out.scored = ScoreSamples(out.trained.model, prepared.samples, threads);
  std::vector<int> predictions;
  for (double p : out.scored.probabilities) predictions.push_back(p >= 0.5 ? 1 : 0);
  out.report = MakeClassificationReport(out.scored.labels, predictions);
  out.auc = ComputeRoc(out.scored.labels, out.scored.probabilities).auc;
  return out;
}

DatasetManifest SyntheticSet(const std::filesystem::path& dir) {
  SynthConfig cfg;  // 250 + 250 images, 25 patients, rho = 1
  cfg.seed = 7;
  DatasetManifest m = SynthGenerate(cfg, dir, ResolveThreads(0));
  return LoadManifest(dir / "manifest.json");
}

TrainConfig LearnabilityConfig() {
  TrainConfig t;
  t.epochs = 15;
  t.seed = 1;
  return t;
}

Outcome Learnability(const DatasetManifest& manifest) {
  const int threads = ResolveThreads(0);
  const BackboneConfig bcfg;
  const RunSummary real = TrainAndScore(manifest, LearnabilityConfig(), bcfg, threads);

  // Null-model control: the same records with labels permuted across samples.
  DatasetManifest shuffled = manifest;
  std::vector<int> labels;
  for (const auto& r : shuffled.records) labels.push_back(*r.label);
  std::mt19937_64 rng(4242);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < labels.size(); ++i) shuffled.records[i].label = labels[i];
  const RunSummary control = TrainAndScore(shuffled, LearnabilityConfig(), bcfg, threads);

  const std::size_t n_train = real.trained.history.train_ids.size(), n_val = real.trained.history.validation_ids.size();
  const bool ok = n_train == 400 && n_val == 100 && real.auc >= 0.90 && control.auc >= 0.40 && control.auc <= 0.60;
  return {ok, Fmt("%zu train / %zu validation; AUC %.4f (acc %.2f, best epoch %d); shuffled control AUC %.4f (acc %.2f)",
                  n_train, n_val, real.auc, real.report.accuracy, real.trained.history.best_epoch, control.auc,
                  control.report.accuracy)};
}

Outcome Determinism(const DatasetManifest& manifest) {
  TrainConfig t;
  t.epochs = 3;
  t.seed = 11;
  const BackboneConfig bcfg;
  const RunSummary a = TrainAndScore(manifest, t, bcfg, 1);
  const RunSummary b = TrainAndScore(manifest, t, bcfg, std::max(2, ResolveThreads(0)));
  const bool history = ToJson(a.trained.history) == ToJson(b.trained.history);
  const bool weights = EncodeWeights(a.trained.model.backbone.ToRecords()) == EncodeWeights(b.trained.model.backbone.ToRecords()) &&
                       EncodeWeights(a.trained.model.head.ToRecords()) == EncodeWeights(b.trained.model.head.ToRecords());
  const bool report = ReportToJson(a.report) == ReportToJson(b.report) && a.scored.probabilities == b.scored.probabilities &&
                      a.auc == b.auc;
  return {history && weights && report, Fmt("history %s, model bytes %s, report %s (threads 1 vs %d)",
                                            history ? "identical" : "DIFFER", weights ? "identical" : "DIFFER",
                                            report ? "identical" : "DIFFER", std::max(2, ResolveThreads(0)))};
}

}  // namespace

int main() {
  Criterion("metric arithmetic", 1, MetricArithmetic);
  Criterion("AUC correctness", 10, AucCorrectness);
  Criterion("morphometry oracle", 1, MorphometryOracle);
  Criterion("gradient fidelity", 120, GradientFidelity);

  testsupport::TempDir dir("acceptance");
  DatasetManifest manifest;
  Criterion("end-to-end learnability", 300, [&] {
    manifest = SyntheticSet(dir.path());
    return Learnability(manifest);
  });
  Criterion("determinism", 600, [&] { return Determinism(manifest); });

  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
