#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fragpredict/imaging.hpp"

namespace fragpredict {

enum class Assay { kAB, kTB, kAO, kCMA3, kTUNEL };
enum class Modality { kBrightfield, kPhaseContrast };

// Throw kConfig for names outside the closed vocabularies.
Assay ParseAssay(const std::string& name);
Modality ParseModality(const std::string& name);
std::string ToString(Assay assay);
std::string ToString(Modality modality);

// Generator ground truth kept alongside synthetic records.
struct GroundTruth {
  double major_axis = 0.0;
  double axis_ratio = 0.0;
  double cap_fraction = 0.0;  // requested
  double angle = 0.0;         // radians
  std::int64_t area_pixels = 0;
  std::int64_t cap_pixels = 0;

  bool operator==(const GroundTruth&) const = default;
};

struct SampleRecord {
  std::string sample_id;
  std::string patient_id;
  Assay assay = Assay::kTUNEL;
  Modality modality = Modality::kBrightfield;
  std::filesystem::path image_path;  // absolute, or relative to the manifest
  std::optional<std::filesystem::path> stain_image_path;
  std::optional<double> stain_intensity;
  std::optional<int> label;  // 0 unfragmented, 1 fragmented
  std::optional<GroundTruth> ground_truth;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::string schema_version = "1";
  std::vector<SampleRecord> records;

  bool operator==(const DatasetManifest&) const = default;
};

// Schema checks only: field types, vocabularies, unique sample ids.
DatasetManifest ManifestFromJson(const nlohmann::json& doc);
nlohmann::json ManifestToJson(const DatasetManifest& manifest);

// Parses, validates, resolves image paths against the manifest's directory
// and checks that every referenced file exists (kPath lists all missing).
DatasetManifest LoadManifest(const std::filesystem::path& path);
void SaveManifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct SplitResult {
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::vector<std::string> train_patients;
  std::vector<std::string> validation_patients;
  double validation_fraction = 0.0;  // realized, by sample count
  std::vector<std::string> warnings;
};

// Patient-level split by seeded shuffle of the sorted patient list. The
// validation set receives round(val_fraction * patients) patients, clamped to
// [1, patients - 1].
SplitResult PatientSplit(const DatasetManifest& manifest, double val_fraction, std::uint64_t seed);

struct ClassDistribution {
  double major_mean = 40.0;  // full major axis, px
  double major_sd = 3.0;
  double ratio_mean = 1.7;   // major / minor
  double ratio_sd = 0.1;
  double cap_mean = 0.55;    // acrosome cap area fraction
  double cap_sd = 0.04;

  bool operator==(const ClassDistribution&) const = default;
};

struct SynthConfig {
  std::array<int, 2> counts{250, 250};  // unfragmented, fragmented
  int image_size = 64;
  std::array<ClassDistribution, 2> classes{
      ClassDistribution{40.0, 3.0, 1.75, 0.1, 0.55, 0.04},
      ClassDistribution{34.0, 3.0, 1.25, 0.08, 0.35, 0.04}};
  double noise_sigma = 4.0;
  double rho = 1.0;  // probability of drawing morphology from the own class
  int patients = 25;
  std::uint64_t seed = 7;
  Assay assay = Assay::kTUNEL;
  Modality modality = Modality::kBrightfield;
  int background_level = 30;
  int nucleus_level = 110;
  int cap_level = 200;

  void Validate() const;
  bool operator==(const SynthConfig&) const = default;
};

nlohmann::json ToJson(const SynthConfig& cfg);
SynthConfig SynthConfigFromJson(const nlohmann::json& doc);

struct SynthSample {
  GrayImage image;
  SampleRecord record;
};

// Deterministic per index: morphology and noise come from an RNG seeded with
// seed XOR index.
SynthSample SynthSampleAt(const SynthConfig& cfg, int index);

// Renders one head: rotated ellipse on a uniform background with a lighter
// cap beyond a chord perpendicular to the major axis, cut so the cap covers
// `cap_fraction` of the ellipse area. Noise is added separately.
struct HeadShape {
  double center_x = 32.0;
  double center_y = 32.0;
  double major_axis = 40.0;
  double axis_ratio = 2.0;
  double angle = 0.0;
  double cap_fraction = 0.5;
};

struct RenderedHead {
  GrayImage image;
  std::int64_t area_pixels = 0;
  std::int64_t cap_pixels = 0;
};

RenderedHead RenderHead(int size, const HeadShape& shape, int background, int nucleus, int cap);

// Writes images/<sample_id>.pgm and manifest.json under out_dir.
DatasetManifest SynthGenerate(const SynthConfig& cfg, const std::filesystem::path& out_dir, int threads = 1);

}  // namespace fragpredict
