#pragma once

// Two-branch ensemble: z-scored morphometry features and backbone features are
// concatenated and classified by an MLP head.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fragpredict/backbone.hpp"
#include "fragpredict/data.hpp"
#include "fragpredict/head.hpp"
#include "fragpredict/morphometry.hpp"

namespace fragpredict {

// Scalar type of the training pipeline. Gradient checks use double directly.
using Real = float;

enum class ThresholdSource { kFixed, kOtsu };

struct LabelRule {
  Assay assay = Assay::kTUNEL;
  bool high_is_fragmented = true;
  ThresholdSource source = ThresholdSource::kOtsu;
  double threshold = 127.5;  // used as-is for kFixed; replaced by the fitted value for kOtsu

  // Polarity from the assay: AB and TB stain positive cells dark, AO, CMA3
  // and TUNEL light up positive cells.
  static LabelRule ForAssay(Assay assay, ThresholdSource source = ThresholdSource::kOtsu,
                            double threshold = 127.5);

  void Validate() const;  // kConfig unless threshold is in (0, 255)
  bool operator==(const LabelRule&) const = default;
};

bool HighIsFragmented(Assay assay);

// 1 (fragmented) or 0. Strict inequality: a value at the threshold is never
// on the positive side. Throws kDomain outside [0, 255].
int DeriveLabel(double intensity, const LabelRule& rule);

// Two-class Otsu over per-cell mean intensities binned to integers; the
// threshold sits halfway between the last low bin and the first high bin.
double OtsuIntensityThreshold(std::span<const double> intensities);

nlohmann::json ToJson(const LabelRule& rule);
LabelRule LabelRuleFromJson(const nlohmann::json& doc);

struct Normalizer {
  bool fitted = false;
  MorphVector mean = MorphVector::Zero();
  MorphVector stddev = MorphVector::Ones();  // population std, floored at kMinStd

  static constexpr double kMinStd = 1e-8;

  // Throws kTrainingData on an empty sample.
  static Normalizer Fit(const std::vector<MorphVector>& samples);
  MorphVector Apply(const MorphVector& raw) const;  // kState when unfitted
  MorphVector Invert(const MorphVector& normalized) const;
  bool operator==(const Normalizer&) const = default;
};

// Normalized morphometry features in CSV-header order, then the backbone features.
template <typename Scalar>
RowVector<Scalar> Fuse(const MorphVector& morph, const RowVector<Scalar>& backbone_features, const Normalizer& norm);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool freeze_backbone = false;
  int patience = 8;  // epochs without validation-loss improvement before stopping
  double val_fraction = 0.2;
  bool class_weighting = false;  // inverse-frequency loss weights
  std::vector<int> head_hidden = kDefaultHeadHidden;

  void Validate() const;  // kConfig on non-positive fields
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json ToJson(const TrainConfig& cfg);
TrainConfig TrainConfigFromJson(const nlohmann::json& doc);
nlohmann::json ToJson(const BackboneConfig& cfg);
BackboneConfig BackboneConfigFromJson(const nlohmann::json& doc);

struct EnsembleModel {
  BackboneConfig backbone_config;
  ParamStore<Real> backbone;
  ParamStore<Real> head;
  Normalizer normalizer;
  LabelRule label_rule;
  TrainConfig train_config;
};

// Fresh weights: backbone from seed, head from a seed derived from it.
EnsembleModel InitModel(const BackboneConfig& bcfg, const TrainConfig& tcfg, const LabelRule& rule);

// Grayscale image scaled to [0, 1] and resized bilinearly to size x size.
template <typename Scalar>
Matrix<Scalar> ImageTensor(const GrayImage& img, int size);

// One training or evaluation example with its features already extracted.
struct PreparedSample {
  std::string sample_id;
  std::string patient_id;
  MorphVector morph = MorphVector::Zero();
  Matrix<Real> image;
  int label = 0;
};

double PredictLogit(const EnsembleModel& model, const MorphVector& morph, const Matrix<Real>& image);
double PredictProbability(const EnsembleModel& model, const PreparedSample& sample);
// Extracts morphometry (segmentation errors propagate) and runs both branches.
double Predict(const EnsembleModel& model, const GrayImage& img);

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::vector<std::string> warnings;

  bool operator==(const TrainHistory&) const = default;
};

nlohmann::json ToJson(const TrainHistory& history);

struct TrainResult {
  EnsembleModel model;
  TrainHistory history;
};

// Fits the normalizer on `train` only, then runs Adam on mean binary
// cross-entropy. Per-sample gradients are computed on `threads` workers and
// summed in sample order, so results do not depend on the thread count.
// Returns the weights of the epoch with the lowest validation loss.
TrainResult TrainOnSamples(const std::vector<PreparedSample>& train, const std::vector<PreparedSample>& validation,
                           const BackboneConfig& bcfg, const TrainConfig& tcfg, const LabelRule& rule,
                           int threads = 1);

// Loading, feature extraction and labelling for a set of records. Records
// whose image fails segmentation are skipped and reported in `skipped`.
struct PreparedSet {
  std::vector<PreparedSample> samples;
  std::vector<std::string> skipped;  // "sample_id: reason"
};

// Label priority: explicit label, then stain_intensity, then the mean
// intensity of the paired stain image under the head mask.
PreparedSet PrepareSamples(const std::vector<SampleRecord>& records, const LabelRule& rule, int input_size,
                           int threads = 1);

// Raw per-record intensity used for labelling, if the record carries one.
std::optional<double> RecordIntensity(const SampleRecord& record);

// Patient split, label threshold fitted on the training split, then TrainOnSamples.
// Only records matching the rule's assay and `modality` take part.
TrainResult TrainFromManifest(const DatasetManifest& manifest, Modality modality, LabelRule rule,
                              const TrainConfig& tcfg, const BackboneConfig& bcfg, int threads = 1);

struct ScoredSet {
  std::vector<std::string> sample_ids;
  std::vector<int> labels;
  std::vector<double> probabilities;
  std::vector<std::string> skipped;
};

ScoredSet ScoreSamples(const EnsembleModel& model, const std::vector<PreparedSample>& samples, int threads = 1);

// Bundle layout: backbone.gcvt, head.gcvt, model.json.
void SaveBundle(const std::filesystem::path& dir, const EnsembleModel& model);
EnsembleModel LoadBundle(const std::filesystem::path& dir);

}  // namespace fragpredict
