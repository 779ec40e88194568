#include "fragpredict/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "fragpredict/error.hpp"
#include "fragpredict/eval.hpp"
#include "fragpredict/image_io.hpp"
#include "fragpredict/imaging.hpp"
#include "fragpredict/nn.hpp"
#include "fragpredict/parallel.hpp"

namespace fragpredict {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kHeadSeedMix = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kShuffleSeedMix = 0xD1B54A32D192ED03ull;
constexpr const char* kBundleSchema = "1";

const char* ToString(ThresholdSource source) { return source == ThresholdSource::kFixed ? "fixed" : "otsu"; }

ThresholdSource ParseThresholdSource(const std::string& name) {
  if (name == "fixed") return ThresholdSource::kFixed;
  if (name == "otsu") return ThresholdSource::kOtsu;
  throw Error(ErrorKind::kConfig, "unknown threshold source '" + name + "' (expected fixed or otsu)");
}

void RejectUnknownKeys(const json& doc, std::initializer_list<const char*> known, const char* what) {
  if (!doc.is_object()) throw Error(ErrorKind::kConfig, std::string(what) + " must be a JSON object");
  for (const auto& item : doc.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return item.key() == k; }) == known.end()) {
      throw Error(ErrorKind::kConfig, std::string("unknown ") + what + " key '" + item.key() + "'");
    }
  }
}

using Grads = ParamStore<Real>::Gradients;

void SetZero(Grads& g) {
  for (auto& m : g) m.setZero();
}

void AddInto(Grads& total, const Grads& g) {
  for (std::size_t i = 0; i < total.size(); ++i) total[i] += g[i];
}

void Scale(Grads& g, Real factor) {
  for (auto& m : g) m *= factor;
}

class Adam {
 public:
  Adam(const ParamStore<Real>& params, const TrainConfig& cfg)
      : m_(params.ZeroGradients()), v_(params.ZeroGradients()), cfg_(cfg) {}

  void Step(ParamStore<Real>& params, const Grads& grads) {
    ++t_;
    const Real b1 = static_cast<Real>(cfg_.beta1);
    const Real b2 = static_cast<Real>(cfg_.beta2);
    const Real eps = static_cast<Real>(cfg_.epsilon);
    const Real c1 = static_cast<Real>(1.0 - std::pow(cfg_.beta1, t_));
    const Real c2 = static_cast<Real>(1.0 - std::pow(cfg_.beta2, t_));
    const Real lr = static_cast<Real>(cfg_.learning_rate);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (Real(1) - b1) * grads[i];
      v_[i] = b2 * v_[i] + (Real(1) - b2) * grads[i].cwiseProduct(grads[i]);
      params.value(i).array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

 private:
  Grads m_;
  Grads v_;
  TrainConfig cfg_;
  int t_ = 0;
};

// Forward pass through both branches; features may be precomputed when the
// backbone is frozen.
struct SampleForward {
  RowVector<Real> features;
  BackboneCache<Real> backbone_cache;
  HeadCache<Real> head_cache;
  Real logit = 0;
};

void RunForward(const EnsembleModel& model, const PreparedSample& sample, const RowVector<Real>* frozen_features,
                bool keep_cache, SampleForward& out) {
  if (frozen_features != nullptr) {
    out.features = *frozen_features;
  } else {
    out.features = BackboneForward(sample.image, model.backbone, model.backbone_config,
                                   keep_cache ? &out.backbone_cache : nullptr);
  }
  const RowVector<Real> fused = Fuse(sample.morph, out.features, model.normalizer);
  out.logit = HeadForward(fused, model.head, keep_cache ? &out.head_cache : nullptr);
}

double Loss(Real logit, int label) { return nn::BceWithLogits<double>(logit, label); }

struct LossSummary {
  double loss = 0.0;
  double accuracy = 0.0;
};

LossSummary EvaluateSet(const EnsembleModel& model, const std::vector<PreparedSample>& samples,
                        const std::vector<RowVector<Real>>* frozen, const std::vector<double>* weights, int threads) {
  std::vector<Real> logits(samples.size());
  ParallelFor(samples.size(), threads, [&](std::size_t i) {
    SampleForward f;
    RunForward(model, samples[i], frozen ? &(*frozen)[i] : nullptr, false, f);
    logits[i] = f.logit;
  });
  LossSummary s;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    s.loss += w * Loss(logits[i], samples[i].label);
    if ((logits[i] > 0 ? 1 : 0) == samples[i].label) ++correct;
  }
  s.loss /= static_cast<double>(samples.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return s;
}

void CheckLabels(const std::vector<PreparedSample>& samples, const char* split) {
  std::array<std::size_t, 2> counts{0, 0};
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) throw Error(ErrorKind::kTrainingData, "labels must be 0 or 1");
    ++counts[s.label];
  }
  if (std::string(split) == "training" && (counts[0] == 0 || counts[1] == 0)) {
    throw Error(ErrorKind::kTrainingData, std::string("training split holds a single class (") +
                                              kClassNames[counts[0] == 0 ? 1 : 0] + " only); need both classes");
  }
}

bool IsPerImageFailure(ErrorKind kind) {
  return kind == ErrorKind::kSegmentation || kind == ErrorKind::kDegenerateInput ||
         kind == ErrorKind::kEmptyRegion || kind == ErrorKind::kDomain;
}

}  // namespace

// ---------------------------------------------------------------- labels

bool HighIsFragmented(Assay assay) {
  switch (assay) {
    case Assay::kAB:
    case Assay::kTB:
      return false;
    case Assay::kAO:
    case Assay::kCMA3:
    case Assay::kTUNEL:
      return true;
  }
  throw Error(ErrorKind::kConfig, "unknown assay");
}

LabelRule LabelRule::ForAssay(Assay assay, ThresholdSource source, double threshold) {
  LabelRule rule;
  rule.assay = assay;
  rule.high_is_fragmented = HighIsFragmented(assay);
  rule.source = source;
  rule.threshold = threshold;
  rule.Validate();
  return rule;
}

void LabelRule::Validate() const {
  if (!(threshold > 0.0 && threshold < 255.0)) {
    throw Error(ErrorKind::kConfig, "label threshold must lie in (0, 255), got " + std::to_string(threshold));
  }
}

int DeriveLabel(double intensity, const LabelRule& rule) {
  if (!(intensity >= 0.0 && intensity <= 255.0)) {
    throw Error(ErrorKind::kDomain, "stain intensity must lie in [0, 255], got " + std::to_string(intensity));
  }
  if (rule.high_is_fragmented) return intensity > rule.threshold ? 1 : 0;
  return intensity < rule.threshold ? 1 : 0;
}

double OtsuIntensityThreshold(std::span<const double> intensities) {
  std::array<std::int64_t, 256> hist{};
  for (double v : intensities) {
    if (!(v >= 0.0 && v <= 255.0)) {
      throw Error(ErrorKind::kDomain, "stain intensity must lie in [0, 255], got " + std::to_string(v));
    }
    ++hist[static_cast<int>(std::lround(v))];
  }
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](std::int64_t c) { return c > 0; });
  if (occupied < 2) {
    throw Error(ErrorKind::kTrainingData, "Otsu label threshold needs at least two distinct stain intensities");
  }
  const int t = OtsuThreshold(hist);
  int low = t;
  while (hist[low] == 0) --low;
  int high = t + 1;
  while (hist[high] == 0) ++high;
  return (low + high) / 2.0;
}

json ToJson(const LabelRule& rule) {
  return {{"assay", ToString(rule.assay)},
          {"high_is_fragmented", rule.high_is_fragmented},
          {"source", ToString(rule.source)},
          {"threshold", rule.threshold}};
}

LabelRule LabelRuleFromJson(const json& doc) {
  RejectUnknownKeys(doc, {"assay", "high_is_fragmented", "source", "threshold"}, "label rule");
  try {
    LabelRule rule = LabelRule::ForAssay(ParseAssay(doc.at("assay").get<std::string>()));
    rule.high_is_fragmented = doc.value("high_is_fragmented", rule.high_is_fragmented);
    if (doc.contains("source")) rule.source = ParseThresholdSource(doc["source"].get<std::string>());
    rule.threshold = doc.value("threshold", rule.threshold);
    rule.Validate();
    return rule;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("malformed label rule: ") + e.what());
  }
}

// ---------------------------------------------------------------- normalizer

Normalizer Normalizer::Fit(const std::vector<MorphVector>& samples) {
  if (samples.empty()) throw Error(ErrorKind::kTrainingData, "cannot fit a normalizer on zero samples");
  Normalizer n;
  n.mean.setZero();
  for (const auto& s : samples) n.mean += s;
  n.mean /= static_cast<double>(samples.size());
  MorphVector var = MorphVector::Zero();
  for (const auto& s : samples) var += (s - n.mean).cwiseAbs2();
  var /= static_cast<double>(samples.size());
  n.stddev = var.cwiseSqrt().cwiseMax(kMinStd);
  n.fitted = true;
  return n;
}

MorphVector Normalizer::Apply(const MorphVector& raw) const {
  if (!fitted) throw Error(ErrorKind::kState, "normalizer used before fitting");
  return (raw - mean).cwiseQuotient(stddev);
}

MorphVector Normalizer::Invert(const MorphVector& normalized) const {
  if (!fitted) throw Error(ErrorKind::kState, "normalizer used before fitting");
  return normalized.cwiseProduct(stddev) + mean;
}

template <typename Scalar>
RowVector<Scalar> Fuse(const MorphVector& morph, const RowVector<Scalar>& backbone_features, const Normalizer& norm) {
  RowVector<Scalar> out(kMorphFeatureCount + backbone_features.size());
  out.head(kMorphFeatureCount) = norm.Apply(morph).transpose().template cast<Scalar>();
  out.tail(backbone_features.size()) = backbone_features;
  return out;
}

template RowVector<float> Fuse(const MorphVector&, const RowVector<float>&, const Normalizer&);
template RowVector<double> Fuse(const MorphVector&, const RowVector<double>&, const Normalizer&);

// ---------------------------------------------------------------- configs

void TrainConfig::Validate() const {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw Error(ErrorKind::kConfig, msg);
  };
  require(epochs > 0, "train config: epochs must be positive");
  require(batch_size > 0, "train config: batch_size must be positive");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "train config: learning_rate must be positive");
  require(beta1 > 0.0 && beta1 < 1.0, "train config: beta1 must lie in (0, 1)");
  require(beta2 > 0.0 && beta2 < 1.0, "train config: beta2 must lie in (0, 1)");
  require(epsilon > 0.0, "train config: epsilon must be positive");
  require(patience > 0, "train config: patience must be positive");
  require(val_fraction > 0.0 && val_fraction < 1.0, "train config: val_fraction must lie in (0, 1)");
  require(!head_hidden.empty(), "train config: head_hidden needs at least one layer");
  for (int h : head_hidden) require(h > 0, "train config: head_hidden widths must be positive");
}

json ToJson(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"seed", cfg.seed},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"epsilon", cfg.epsilon},
          {"freeze_backbone", cfg.freeze_backbone},
          {"patience", cfg.patience},
          {"val_fraction", cfg.val_fraction},
          {"class_weighting", cfg.class_weighting},
          {"head_hidden", cfg.head_hidden}};
}

TrainConfig TrainConfigFromJson(const json& doc) {
  RejectUnknownKeys(doc,
                    {"epochs", "batch_size", "learning_rate", "seed", "beta1", "beta2", "epsilon",
                     "freeze_backbone", "patience", "val_fraction", "class_weighting", "head_hidden"},
                    "train config");
  TrainConfig cfg;
  try {
    cfg.epochs = doc.value("epochs", cfg.epochs);
    cfg.batch_size = doc.value("batch_size", cfg.batch_size);
    cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
    cfg.seed = doc.value("seed", cfg.seed);
    cfg.beta1 = doc.value("beta1", cfg.beta1);
    cfg.beta2 = doc.value("beta2", cfg.beta2);
    cfg.epsilon = doc.value("epsilon", cfg.epsilon);
    cfg.freeze_backbone = doc.value("freeze_backbone", cfg.freeze_backbone);
    cfg.patience = doc.value("patience", cfg.patience);
    cfg.val_fraction = doc.value("val_fraction", cfg.val_fraction);
    cfg.class_weighting = doc.value("class_weighting", cfg.class_weighting);
    cfg.head_hidden = doc.value("head_hidden", cfg.head_hidden);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("malformed train config: ") + e.what());
  }
  cfg.Validate();
  return cfg;
}

json ToJson(const BackboneConfig& cfg) {
  return {{"input_size", cfg.input_size},   {"patch_size", cfg.patch_size},
          {"stage_dims", cfg.stage_dims},   {"depths", cfg.depths},
          {"window_size", cfg.window_size}, {"num_heads", cfg.num_heads},
          {"mlp_ratio", cfg.mlp_ratio},     {"layer_norm_eps", cfg.layer_norm_eps},
          {"global_extractor", cfg.global_extractor}};
}

BackboneConfig BackboneConfigFromJson(const json& doc) {
  RejectUnknownKeys(doc,
                    {"input_size", "patch_size", "stage_dims", "depths", "window_size", "num_heads", "mlp_ratio",
                     "layer_norm_eps", "global_extractor"},
                    "backbone config");
  BackboneConfig cfg;
  try {
    cfg.input_size = doc.value("input_size", cfg.input_size);
    cfg.patch_size = doc.value("patch_size", cfg.patch_size);
    cfg.stage_dims = doc.value("stage_dims", cfg.stage_dims);
    cfg.depths = doc.value("depths", cfg.depths);
    cfg.window_size = doc.value("window_size", cfg.window_size);
    cfg.num_heads = doc.value("num_heads", cfg.num_heads);
    cfg.mlp_ratio = doc.value("mlp_ratio", cfg.mlp_ratio);
    cfg.layer_norm_eps = doc.value("layer_norm_eps", cfg.layer_norm_eps);
    cfg.global_extractor = doc.value("global_extractor", cfg.global_extractor);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("malformed backbone config: ") + e.what());
  }
  cfg.Validate();
  return cfg;
}

// ---------------------------------------------------------------- model

EnsembleModel InitModel(const BackboneConfig& bcfg, const TrainConfig& tcfg, const LabelRule& rule) {
  bcfg.Validate();
  tcfg.Validate();
  rule.Validate();
  EnsembleModel model;
  model.backbone_config = bcfg;
  model.backbone = InitBackboneParams<Real>(bcfg, tcfg.seed);
  model.head = InitHeadParams<Real>(bcfg.feature_dim() + kMorphFeatureCount, tcfg.head_hidden, tcfg.seed ^ kHeadSeedMix);
  model.label_rule = rule;
  model.train_config = tcfg;
  return model;
}

template <typename Scalar>
Matrix<Scalar> ImageTensor(const GrayImage& img, int size) {
  if (img.width() <= 0 || img.height() <= 0) throw Error(ErrorKind::kDimension, "empty image");
  Matrix<Scalar> out(size, size);
  if (img.width() == size && img.height() == size) {
    out = img.pixels.template cast<Scalar>() / Scalar(255);
    return out;
  }
  // Bilinear with pixel-centre alignment and edge clamping.
  const double sx = static_cast<double>(img.width()) / size;
  const double sy = static_cast<double>(img.height()) / size;
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - x0;
      const double top = (1 - wx) * img.pixels(y0, x0) + wx * img.pixels(y0, x1);
      const double bottom = (1 - wx) * img.pixels(y1, x0) + wx * img.pixels(y1, x1);
      out(y, x) = static_cast<Scalar>(((1 - wy) * top + wy * bottom) / 255.0);
    }
  }
  return out;
}

template Matrix<float> ImageTensor(const GrayImage&, int);
template Matrix<double> ImageTensor(const GrayImage&, int);

double PredictLogit(const EnsembleModel& model, const MorphVector& morph, const Matrix<Real>& image) {
  const RowVector<Real> features = BackboneForward(image, model.backbone, model.backbone_config);
  return HeadForward(Fuse(morph, features, model.normalizer), model.head);
}

double PredictProbability(const EnsembleModel& model, const PreparedSample& sample) {
  return nn::Sigmoid(PredictLogit(model, sample.morph, sample.image));
}

double Predict(const EnsembleModel& model, const GrayImage& img) {
  const MorphVector morph = ExtractFeatures(img).AsVector();
  return nn::Sigmoid(PredictLogit(model, morph, ImageTensor<Real>(img, model.backbone_config.input_size)));
}

json ToJson(const TrainHistory& history) {
  json epochs = json::array();
  for (const auto& e : history.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy}});
  }
  return {{"epochs", epochs},
          {"best_epoch", history.best_epoch},
          {"stopped_early", history.stopped_early},
          {"train_ids", history.train_ids},
          {"validation_ids", history.validation_ids},
          {"warnings", history.warnings}};
}

// ---------------------------------------------------------------- training

TrainResult TrainOnSamples(const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& validation,
                           const BackboneConfig& bcfg, const TrainConfig& tcfg, const LabelRule& rule,
                           int threads) {
  if (validation.empty()) throw Error(ErrorKind::kTrainingData, "validation split is empty");
  CheckLabels(train, "training");
  CheckLabels(validation, "validation");
  if (static_cast<std::size_t>(tcfg.batch_size) > train.size()) {
    throw Error(ErrorKind::kConfig, "batch_size " + std::to_string(tcfg.batch_size) + " exceeds the " +
                                        std::to_string(train.size()) + " training samples");
  }
  for (const auto* set : {&train, &validation}) {
    for (const auto& s : *set) {
      if (s.image.rows() != bcfg.input_size || s.image.cols() != bcfg.input_size) {
        throw Error(ErrorKind::kShape, "sample '" + s.sample_id + "' image does not match the backbone input size");
      }
    }
  }

  TrainResult result;
  EnsembleModel& model = result.model;
  model = InitModel(bcfg, tcfg, rule);
  {
    std::vector<MorphVector> morph;
    morph.reserve(train.size());
    for (const auto& s : train) morph.push_back(s.morph);
    model.normalizer = Normalizer::Fit(morph);
  }
  TrainHistory& history = result.history;
  for (const auto& s : train) history.train_ids.push_back(s.sample_id);
  for (const auto& s : validation) history.validation_ids.push_back(s.sample_id);

  std::vector<double> weights(train.size(), 1.0);
  if (tcfg.class_weighting) {
    std::array<double, 2> counts{0.0, 0.0};
    for (const auto& s : train) counts[s.label] += 1.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      weights[i] = static_cast<double>(train.size()) / (2.0 * counts[train[i].label]);
    }
  }

  // A frozen backbone produces fixed features; compute them once.
  std::vector<RowVector<Real>> train_features, val_features;
  if (tcfg.freeze_backbone) {
    train_features.resize(train.size());
    val_features.resize(validation.size());
    ParallelFor(train.size(), threads, [&](std::size_t i) {
      train_features[i] = BackboneForward(train[i].image, model.backbone, bcfg);
    });
    ParallelFor(validation.size(), threads, [&](std::size_t i) {
      val_features[i] = BackboneForward(validation[i].image, model.backbone, bcfg);
    });
  }
  const auto* frozen_train = tcfg.freeze_backbone ? &train_features : nullptr;
  const auto* frozen_val = tcfg.freeze_backbone ? &val_features : nullptr;

  auto check_finite = [](double loss, int epoch) {
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::kDivergence, "training diverged at epoch " + std::to_string(epoch) + " (loss is not finite)");
    }
  };

  {
    const LossSummary tr = EvaluateSet(model, train, frozen_train, &weights, threads);
    const LossSummary va = EvaluateSet(model, validation, frozen_val, nullptr, threads);
    check_finite(tr.loss, 0);
    check_finite(va.loss, 0);
    history.epochs.push_back({0, tr.loss, va.loss, va.accuracy});
  }
  double best_loss = history.epochs.back().val_loss;
  ParamStore<Real> best_backbone = model.backbone;
  ParamStore<Real> best_head = model.head;
  int since_best = 0;

  Adam backbone_opt(model.backbone, tcfg);
  Adam head_opt(model.head, tcfg);
  const std::size_t slots = static_cast<std::size_t>(tcfg.batch_size);
  std::vector<Grads> backbone_slots(tcfg.freeze_backbone ? 0 : slots, model.backbone.ZeroGradients());
  std::vector<Grads> head_slots(slots, model.head.ZeroGradients());
  std::vector<double> slot_loss(slots, 0.0);
  Grads backbone_total = model.backbone.ZeroGradients();
  Grads head_total = model.head.ZeroGradients();

  std::mt19937_64 shuffle_rng(tcfg.seed ^ kShuffleSeedMix);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const int feature_dim = bcfg.feature_dim();

  // Layer-level divergence (non-finite features) is reported with its epoch too.
  auto run_epoch = [&](int epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += slots) {
      const std::size_t count = std::min(slots, order.size() - start);
      ParallelFor(count, threads, [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        const PreparedSample& sample = train[idx];
        SampleForward f;
        RunForward(model, sample, frozen_train ? &(*frozen_train)[idx] : nullptr, true, f);
        const double w = weights[idx];
        slot_loss[k] = w * Loss(f.logit, sample.label);
        const Real dlogit = static_cast<Real>(w * (nn::Sigmoid<double>(f.logit) - sample.label));
        SetZero(head_slots[k]);
        const RowVector<Real> dinput = HeadBackward(dlogit, f.head_cache, model.head, head_slots[k]);
        if (!tcfg.freeze_backbone) {
          SetZero(backbone_slots[k]);
          BackboneBackward<Real>(dinput.tail(feature_dim), f.backbone_cache, model.backbone, bcfg, backbone_slots[k]);
        }
      });
      double batch_loss = 0.0;
      SetZero(head_total);
      if (!tcfg.freeze_backbone) SetZero(backbone_total);
      for (std::size_t k = 0; k < count; ++k) {
        batch_loss += slot_loss[k];
        AddInto(head_total, head_slots[k]);
        if (!tcfg.freeze_backbone) AddInto(backbone_total, backbone_slots[k]);
      }
      check_finite(batch_loss, epoch);
      epoch_loss += batch_loss;
      const Real inv = Real(1) / static_cast<Real>(count);
      Scale(head_total, inv);
      head_opt.Step(model.head, head_total);
      if (!tcfg.freeze_backbone) {
        Scale(backbone_total, inv);
        backbone_opt.Step(model.backbone, backbone_total);
      }
    }
    const LossSummary va = EvaluateSet(model, validation, frozen_val, nullptr, threads);
    check_finite(va.loss, epoch);
    return EpochRecord{epoch, epoch_loss / static_cast<double>(train.size()), va.loss, va.accuracy};
  };

  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    EpochRecord record;
    try {
      record = run_epoch(epoch);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDivergence || std::string_view(e.what()).starts_with("training diverged")) throw;
      throw Error(ErrorKind::kDivergence, "training diverged at epoch " + std::to_string(epoch) + " (" + e.what() + ")");
    }
    history.epochs.push_back(record);
    const double val_loss = record.val_loss;
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best_backbone = model.backbone;
      best_head = model.head;
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= tcfg.patience) {
      history.stopped_early = epoch < tcfg.epochs;
      break;
    }
  }
  model.backbone = std::move(best_backbone);
  model.head = std::move(best_head);
  return result;
}

// ---------------------------------------------------------------- data preparation

std::optional<double> RecordIntensity(const SampleRecord& record) {
  if (record.stain_intensity) return record.stain_intensity;
  if (!record.stain_image_path) return std::nullopt;
  const GrayImage stain = ReadGrayImage(*record.stain_image_path);
  const GrayImage primary = ReadGrayImage(record.image_path);
  const bool aligned = stain.width() == primary.width() && stain.height() == primary.height();
  return MeanHeadIntensity(stain, SegmentHead(aligned ? primary : stain));
}

PreparedSet PrepareSamples(const std::vector<SampleRecord>& records, const LabelRule& rule, int input_size,
                           int threads) {
  std::vector<std::optional<PreparedSample>> slots(records.size());
  std::vector<std::string> failures(records.size());
  ParallelFor(records.size(), threads, [&](std::size_t i) {
    const SampleRecord& rec = records[i];
    try {
      PreparedSample s;
      s.sample_id = rec.sample_id;
      s.patient_id = rec.patient_id;
      if (rec.label) {
        s.label = *rec.label;
      } else if (auto intensity = RecordIntensity(rec)) {
        s.label = DeriveLabel(*intensity, rule);
      } else {
        throw Error(ErrorKind::kValidation, "record '" + rec.sample_id + "' has no label, intensity or stain image");
      }
      const GrayImage img = ReadGrayImage(rec.image_path);
      s.morph = ExtractFeatures(img).AsVector();
      s.image = ImageTensor<Real>(img, input_size);
      slots[i] = std::move(s);
    } catch (const Error& e) {
      if (!IsPerImageFailure(e.kind())) throw;
      failures[i] = rec.sample_id + ": " + e.what();
    }
  });
  PreparedSet out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (slots[i]) {
      out.samples.push_back(std::move(*slots[i]));
    } else {
      out.skipped.push_back(failures[i]);
    }
  }
  return out;
}

TrainResult TrainFromManifest(const DatasetManifest& manifest, Modality modality, LabelRule rule,
                              const TrainConfig& tcfg, const BackboneConfig& bcfg, int threads) {
  tcfg.Validate();
  bcfg.Validate();
  DatasetManifest subset;
  subset.schema_version = manifest.schema_version;
  for (const auto& rec : manifest.records) {
    if (rec.assay == rule.assay && rec.modality == modality) subset.records.push_back(rec);
  }
  if (subset.records.empty()) {
    throw Error(ErrorKind::kTrainingData,
                "manifest has no records for assay " + ToString(rule.assay) + " with modality " + ToString(modality));
  }
  const SplitResult split = PatientSplit(subset, tcfg.val_fraction, tcfg.seed);
  std::unordered_map<std::string, const SampleRecord*> by_id;
  for (const auto& rec : subset.records) by_id[rec.sample_id] = &rec;
  std::vector<SampleRecord> train_records, val_records;
  for (const auto& id : split.train_ids) train_records.push_back(*by_id.at(id));
  for (const auto& id : split.validation_ids) val_records.push_back(*by_id.at(id));

  if (rule.source == ThresholdSource::kOtsu) {
    std::vector<std::optional<double>> values(train_records.size());
    ParallelFor(train_records.size(), threads, [&](std::size_t i) {
      if (!train_records[i].label) values[i] = RecordIntensity(train_records[i]);
    });
    std::vector<double> intensities;
    for (const auto& v : values) {
      if (v) intensities.push_back(*v);
    }
    if (!intensities.empty()) rule.threshold = OtsuIntensityThreshold(intensities);
  }

  const PreparedSet train = PrepareSamples(train_records, rule, bcfg.input_size, threads);
  const PreparedSet val = PrepareSamples(val_records, rule, bcfg.input_size, threads);
  TrainResult result = TrainOnSamples(train.samples, val.samples, bcfg, tcfg, rule, threads);
  auto& warnings = result.history.warnings;
  warnings.insert(warnings.end(), split.warnings.begin(), split.warnings.end());
  for (const auto& s : train.skipped) warnings.push_back("skipped " + s);
  for (const auto& s : val.skipped) warnings.push_back("skipped " + s);
  return result;
}

ScoredSet ScoreSamples(const EnsembleModel& model, const std::vector<PreparedSample>& samples, int threads) {
  ScoredSet out;
  out.probabilities.resize(samples.size());
  ParallelFor(samples.size(), threads,
              [&](std::size_t i) { out.probabilities[i] = PredictProbability(model, samples[i]); });
  for (const auto& s : samples) {
    out.sample_ids.push_back(s.sample_id);
    out.labels.push_back(s.label);
  }
  return out;
}

// ---------------------------------------------------------------- bundle

void SaveBundle(const fs::path& dir, const EnsembleModel& model) {
  if (!model.normalizer.fitted) throw Error(ErrorKind::kState, "cannot save a model with an unfitted normalizer");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create model directory " + dir.string() + ": " + ec.message());
  WriteWeightFile(dir / "backbone.gcvt", model.backbone.ToRecords());
  WriteWeightFile(dir / "head.gcvt", model.head.ToRecords());
  json doc = {{"schema_version", kBundleSchema},
              {"means", std::vector<double>(model.normalizer.mean.begin(), model.normalizer.mean.end())},
              {"stds", std::vector<double>(model.normalizer.stddev.begin(), model.normalizer.stddev.end())},
              {"label_rule", ToJson(model.label_rule)},
              {"backbone_config", ToJson(model.backbone_config)},
              {"train_config", ToJson(model.train_config)}};
  std::ofstream out(dir / "model.json", std::ios::binary);
  out << doc.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "model.json").string());
}

EnsembleModel LoadBundle(const fs::path& dir) {
  const fs::path meta = dir / "model.json";
  std::ifstream in(meta, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + meta.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kValidation, meta.string() + " is not valid JSON: " + e.what());
  }
  EnsembleModel model;
  try {
    if (doc.at("schema_version").get<std::string>() != kBundleSchema) {
      throw Error(ErrorKind::kValidation, "unsupported model schema_version in " + meta.string());
    }
    const auto means = doc.at("means").get<std::vector<double>>();
    const auto stds = doc.at("stds").get<std::vector<double>>();
    if (means.size() != kMorphFeatureCount || stds.size() != kMorphFeatureCount) {
      throw Error(ErrorKind::kValidation, "model means/stds must hold " + std::to_string(kMorphFeatureCount) + " entries");
    }
    for (int i = 0; i < kMorphFeatureCount; ++i) {
      if (!(stds[i] > 0.0)) throw Error(ErrorKind::kValidation, "model stds must be positive");
      model.normalizer.mean[i] = means[i];
      model.normalizer.stddev[i] = stds[i];
    }
    model.normalizer.fitted = true;
    model.label_rule = LabelRuleFromJson(doc.at("label_rule"));
    model.backbone_config = BackboneConfigFromJson(doc.at("backbone_config"));
    model.train_config = TrainConfigFromJson(doc.at("train_config"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kValidation, "malformed " + meta.string() + ": " + e.what());
  }
  model.backbone = InitBackboneParams<Real>(model.backbone_config, 0);
  model.backbone.LoadRecords(ReadWeightFile(dir / "backbone.gcvt"));
  model.head = InitHeadParams<Real>(model.backbone_config.feature_dim() + kMorphFeatureCount,
                                    model.train_config.head_hidden, 0);
  model.head.LoadRecords(ReadWeightFile(dir / "head.gcvt"));
  return model;
}

}  // namespace fragpredict
