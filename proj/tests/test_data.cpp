#include <doctest.h>

#include <fstream>
#include <set>

#include "fragpredict/data.hpp"
#include "fragpredict/error.hpp"
#include "fragpredict/image_io.hpp"
#include "fragpredict/morphometry.hpp"
#include "support.hpp"

using namespace fragpredict;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ErrorKind KindOf(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kState;
}

std::string MessageOf(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

json MinimalRecord(const std::string& id) {
  return {{"sample_id", id}, {"patient_id", "p1"}, {"assay", "TUNEL"}, {"modality", "brightfield"},
          {"image_path", "images/" + id + ".pgm"}, {"label", 1}};
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
}

DatasetManifest PatientManifest(const std::vector<int>& samples_per_patient) {
  DatasetManifest m;
  int id = 0;
  for (std::size_t p = 0; p < samples_per_patient.size(); ++p) {
    for (int k = 0; k < samples_per_patient[p]; ++k) {
      SampleRecord r;
      r.sample_id = "s" + std::to_string(id++);
      r.patient_id = "patient" + std::to_string(p);
      r.image_path = r.sample_id + ".pgm";
      m.records.push_back(r);
    }
  }
  return m;
}

std::map<std::string, std::string> PatientOf(const DatasetManifest& m) {
  std::map<std::string, std::string> out;
  for (const auto& r : m.records) out[r.sample_id] = r.patient_id;
  return out;
}

}  // namespace

TEST_CASE("minimal manifest loads and resolves paths") {
  testsupport::TempDir dir("manifest");
  fs::create_directories(dir.path() / "images");
  WritePgm(dir.path() / "images" / "a.pgm", GrayImage(4, 4, 9));
  WriteText(dir.path() / "m.json", json{{"schema_version", "1"}, {"records", {MinimalRecord("a")}}}.dump());
  const DatasetManifest m = LoadManifest(dir.path() / "m.json");
  REQUIRE(m.records.size() == 1);
  CHECK(m.records[0].image_path == dir.path() / "images" / "a.pgm");
  CHECK(m.records[0].label == 1);
  CHECK(m.records[0].assay == Assay::kTUNEL);
  CHECK_FALSE(m.records[0].stain_intensity.has_value());
}

TEST_CASE("manifest schema errors") {
  const json dup = {{"schema_version", "1"}, {"records", {MinimalRecord("a"), MinimalRecord("a")}}};
  CHECK(KindOf([&] { ManifestFromJson(dup); }) == ErrorKind::kValidation);
  CHECK(MessageOf([&] { ManifestFromJson(dup); }).find("'a'") != std::string::npos);

  json scd = {{"schema_version", "1"}, {"records", {MinimalRecord("a")}}};
  scd["records"][0]["assay"] = "SCD";
  CHECK(MessageOf([&] { ManifestFromJson(scd); }).find("unknown assay 'SCD'") != std::string::npos);

  json bad_type = {{"schema_version", "1"}, {"records", {MinimalRecord("a")}}};
  bad_type["records"][0]["patient_id"] = 4;
  CHECK(KindOf([&] { ManifestFromJson(bad_type); }) == ErrorKind::kValidation);
  CHECK(MessageOf([&] { ManifestFromJson(bad_type); }).find("patient_id") != std::string::npos);

  json no_label = {{"schema_version", "1"}, {"records", {MinimalRecord("a")}}};
  no_label["records"][0]["stain_intensity"] = 300;
  CHECK(MessageOf([&] { ManifestFromJson(no_label); }).find("stain_intensity") != std::string::npos);

  CHECK(KindOf([] { ManifestFromJson(json{{"schema_version", "2"}, {"records", json::array()}}); }) ==
        ErrorKind::kValidation);
  CHECK(KindOf([] { LoadManifest("/nonexistent/manifest.json"); }) == ErrorKind::kPath);
}

TEST_CASE("missing image files are all listed") {
  testsupport::TempDir dir("missing");
  WriteText(dir.path() / "m.json",
            json{{"schema_version", "1"}, {"records", {MinimalRecord("a"), MinimalRecord("b"), MinimalRecord("c")}}}.dump());
  fs::create_directories(dir.path() / "images");
  WritePgm(dir.path() / "images" / "b.pgm", GrayImage(2, 2, 0));
  const std::string msg = MessageOf([&] { LoadManifest(dir.path() / "m.json"); });
  CHECK(msg.find("a.pgm") != std::string::npos);
  CHECK(msg.find("c.pgm") != std::string::npos);
  CHECK(msg.find("b.pgm") == std::string::npos);
  CHECK(KindOf([&] { LoadManifest(dir.path() / "m.json"); }) == ErrorKind::kPath);
}

TEST_CASE("manifest round trip") {
  testsupport::TempDir dir("roundtrip");
  SynthConfig cfg;
  cfg.counts = {3, 3};
  cfg.patients = 2;
  const DatasetManifest generated = SynthGenerate(cfg, dir.path());
  DatasetManifest expected = generated;
  for (auto& r : expected.records) r.image_path = dir.path() / r.image_path;
  expected.records[1].stain_intensity.reset();
  expected.records[2].label.reset();
  expected.records[3].ground_truth.reset();
  expected.records[4].stain_image_path = dir.path() / expected.records[0].image_path.filename().string();
  fs::copy_file(expected.records[0].image_path, *expected.records[4].stain_image_path);
  SaveManifest(dir.path() / "again.json", expected);
  const DatasetManifest back = LoadManifest(dir.path() / "again.json");
  CHECK(back == expected);
  CHECK(ManifestFromJson(ManifestToJson(generated)) == generated);
}

TEST_CASE("patient split with ten patients") {
  const DatasetManifest m = PatientManifest(std::vector<int>(10, 5));
  const SplitResult a = PatientSplit(m, 0.2, 3);
  CHECK(a.validation_patients.size() == 2);
  CHECK(a.validation_ids.size() == 10);
  CHECK(a.train_ids.size() == 40);
  CHECK(a.warnings.empty());
  const SplitResult b = PatientSplit(m, 0.2, 3);
  CHECK(a.validation_ids == b.validation_ids);
  CHECK(a.train_ids == b.train_ids);
}

TEST_CASE("patient split is disjoint and deterministic for 100 seeds") {
  const DatasetManifest m = PatientManifest({3, 7, 5, 5, 4, 6, 5, 8, 2, 5, 4, 6});
  const auto patient = PatientOf(m);
  std::set<std::vector<std::string>> distinct;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SplitResult s = PatientSplit(m, 0.25, seed);
    CHECK(s.validation_ids == PatientSplit(m, 0.25, seed).validation_ids);
    std::set<std::string> train_patients, val_patients;
    for (const auto& id : s.train_ids) train_patients.insert(patient.at(id));
    for (const auto& id : s.validation_ids) val_patients.insert(patient.at(id));
    for (const auto& p : val_patients) CHECK(train_patients.count(p) == 0);
    CHECK(s.train_ids.size() + s.validation_ids.size() == m.records.size());
    CHECK(std::abs(s.validation_fraction - 0.25) <= 0.10);
    distinct.insert(s.validation_patients);
  }
  CHECK(distinct.size() > 10);
}

TEST_CASE("patient split edge cases") {
  const DatasetManifest skewed = PatientManifest({90, 2, 2, 2, 2, 2});
  bool warned = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SplitResult s = PatientSplit(skewed, 0.2, seed);
    const auto patient = PatientOf(skewed);
    std::set<std::string> train_patients;
    for (const auto& id : s.train_ids) train_patients.insert(patient.at(id));
    for (const auto& id : s.validation_ids) CHECK(train_patients.count(patient.at(id)) == 0);
    warned = warned || !s.warnings.empty();
  }
  CHECK(warned);
  CHECK(KindOf([] { PatientSplit(PatientManifest({5}), 0.2, 0); }) == ErrorKind::kSplit);
  CHECK(KindOf([] { PatientSplit(PatientManifest({5, 5}), 1.0, 0); }) == ErrorKind::kSplit);
}

TEST_CASE("without label correlation both classes share one morphology distribution") {
  SynthConfig cfg;
  cfg.counts = {200, 200};
  cfg.rho = 0.0;
  cfg.seed = 17;
  std::vector<double> a, b;
  for (int i = 0; i < 400; ++i) {
    const SynthSample s = SynthSampleAt(cfg, i);
    (*s.record.label == 0 ? a : b).push_back(s.record.ground_truth->major_axis);
  }
  // Two-sample critical value at the 5% level: 1.358 * sqrt(2 / 200).
  CHECK(testsupport::KsStatistic(a, b) < 1.358 * std::sqrt(2.0 / 200));

  cfg.rho = 1.0;
  a.clear();
  b.clear();
  for (int i = 0; i < 400; ++i) {
    const SynthSample s = SynthSampleAt(cfg, i);
    (*s.record.label == 0 ? a : b).push_back(s.record.ground_truth->major_axis);
  }
  CHECK(testsupport::KsStatistic(a, b) > 0.5);
}

TEST_CASE("feature extraction recovers the class axis ratios") {
  SynthConfig cfg;
  cfg.counts = {60, 60};
  cfg.classes[0].ratio_mean = 1.2;
  cfg.classes[0].ratio_sd = 0.05;
  cfg.classes[1].ratio_mean = 2.4;
  cfg.classes[1].ratio_sd = 0.1;
  double sum[2] = {0, 0};
  for (int i = 0; i < 120; ++i) {
    const SynthSample s = SynthSampleAt(cfg, i);
    const MorphFeatures f = ExtractFeatures(s.image);
    sum[*s.record.label] += f.major_axis / f.minor_axis;
  }
  CHECK(std::abs(sum[0] / 60 / 1.2 - 1) <= 0.05);
  CHECK(std::abs(sum[1] / 60 / 2.4 - 1) <= 0.05);
}

TEST_CASE("ground truth round trip through morphometry") {
  SynthConfig cfg;
  cfg.counts = {50, 50};
  cfg.noise_sigma = 5.0;
  cfg.seed = 23;
  for (int i = 0; i < 100; ++i) {
    const SynthSample s = SynthSampleAt(cfg, i);
    const GroundTruth& gt = *s.record.ground_truth;
    const MorphFeatures f = ExtractFeatures(s.image);
    CAPTURE(i);
    CHECK(std::abs(f.area / static_cast<double>(gt.area_pixels) - 1) <= 0.02);
    CHECK(std::abs(f.major_axis / f.minor_axis / gt.axis_ratio - 1) <= 0.05);
    CHECK(std::abs(f.acrosome_fraction - static_cast<double>(gt.cap_pixels) / static_cast<double>(gt.area_pixels)) <= 0.02);
    CHECK(std::abs(f.acrosome_fraction - gt.cap_fraction) <= 0.02);
  }
}

TEST_CASE("generation is byte-identical across runs and thread counts") {
  testsupport::TempDir one("gen1"), two("gen2");
  SynthConfig cfg;
  cfg.counts = {6, 6};
  const DatasetManifest a = SynthGenerate(cfg, one.path(), 1);
  const DatasetManifest b = SynthGenerate(cfg, two.path(), 3);
  CHECK(a == b);
  for (const auto& r : a.records) {
    CHECK(testsupport::ReadFileBytes(one.path() / r.image_path) == testsupport::ReadFileBytes(two.path() / r.image_path));
  }
  CHECK(testsupport::ReadFileBytes(one.path() / "manifest.json") == testsupport::ReadFileBytes(two.path() / "manifest.json"));
  cfg.seed += 1;
  CHECK_FALSE(SynthSampleAt(cfg, 0).image.pixels == SynthSampleAt(SynthConfig(), 0).image.pixels);
}

TEST_CASE("synth config validation") {
  SynthConfig cfg;
  cfg.classes[1].major_mean = 500;
  CHECK(KindOf([&] { cfg.Validate(); }) == ErrorKind::kConfig);
  cfg = SynthConfig();
  cfg.rho = 1.5;
  CHECK(KindOf([&] { cfg.Validate(); }) == ErrorKind::kConfig);
  cfg = SynthConfig();
  cfg.classes[0].cap_mean = 0.99;
  CHECK(KindOf([&] { cfg.Validate(); }) == ErrorKind::kConfig);
  CHECK(SynthConfigFromJson(ToJson(SynthConfig())) == SynthConfig());
  CHECK(KindOf([] { SynthConfigFromJson(json{{"classes", json::array()}}); }) == ErrorKind::kConfig);
}
