#include "fragpredict/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "fragpredict/error.hpp"
#include "fragpredict/image_io.hpp"
#include "fragpredict/parallel.hpp"

namespace fragpredict {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::pair<Assay, const char*>, 5> kAssays = {
    {{Assay::kAB, "AB"}, {Assay::kTB, "TB"}, {Assay::kAO, "AO"}, {Assay::kCMA3, "CMA3"}, {Assay::kTUNEL, "TUNEL"}}};
constexpr std::array<std::pair<Modality, const char*>, 2> kModalities = {
    {{Modality::kBrightfield, "brightfield"}, {Modality::kPhaseContrast, "phase_contrast"}}};

[[noreturn]] void FieldError(std::size_t index, const std::string& field, const std::string& what) {
  throw Error(ErrorKind::kValidation, "manifest record " + std::to_string(index) + ": field '" + field + "' " + what);
}

template <typename T>
T Required(const json& rec, std::size_t index, const char* field) {
  if (!rec.contains(field)) FieldError(index, field, "is missing");
  try {
    return rec.at(field).get<T>();
  } catch (const json::exception&) {
    FieldError(index, field, "has the wrong type");
  }
}

// Inverse of the cap-area function: fraction of an ellipse lying beyond the
// chord at normalized position t along the major axis is
// (acos t - t sqrt(1 - t^2)) / pi, decreasing in t.
double CapChordPosition(double fraction) {
  double lo = -1.0;
  double hi = 1.0;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double f = (std::acos(mid) - mid * std::sqrt(1.0 - mid * mid)) / std::numbers::pi;
    (f > fraction ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double TruncatedNormal(std::mt19937_64& rng, double mean, double sd, double lo, double hi) {
  if (sd <= 0.0) return std::clamp(mean, lo, hi);
  std::normal_distribution<double> normal(mean, sd);
  for (int i = 0; i < 10000; ++i) {
    const double v = normal(rng);
    if (v >= lo && v <= hi) return v;
  }
  throw Error(ErrorKind::kConfig, "synthetic distribution cannot be sampled within its bounds");
}

struct Bounds {
  double major_lo, major_hi;
  static constexpr double kRatioLo = 1.0, kRatioHi = 4.0;
  static constexpr double kCapLo = 0.02, kCapHi = 0.98;
  static constexpr double kMinMinor = 3.0;
};

Bounds BoundsFor(const SynthConfig& cfg) { return {6.0, cfg.image_size - 8.0}; }

}  // namespace

Assay ParseAssay(const std::string& name) {
  for (const auto& [a, n] : kAssays) {
    if (name == n) return a;
  }
  throw Error(ErrorKind::kConfig, "unknown assay '" + name + "' (expected one of AB, TB, AO, CMA3, TUNEL)");
}

Modality ParseModality(const std::string& name) {
  for (const auto& [m, n] : kModalities) {
    if (name == n) return m;
  }
  throw Error(ErrorKind::kConfig, "unknown modality '" + name + "' (expected brightfield or phase_contrast)");
}

std::string ToString(Assay assay) {
  for (const auto& [a, n] : kAssays) {
    if (a == assay) return n;
  }
  return "?";
}

std::string ToString(Modality modality) {
  for (const auto& [m, n] : kModalities) {
    if (m == modality) return n;
  }
  return "?";
}

DatasetManifest ManifestFromJson(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorKind::kValidation, "manifest must be a JSON object");
  DatasetManifest manifest;
  if (!doc.contains("schema_version") || !doc["schema_version"].is_string()) {
    throw Error(ErrorKind::kValidation, "manifest field 'schema_version' must be a string");
  }
  manifest.schema_version = doc["schema_version"].get<std::string>();
  if (manifest.schema_version != "1") {
    throw Error(ErrorKind::kValidation, "unsupported manifest schema_version '" + manifest.schema_version + "'");
  }
  if (!doc.contains("records") || !doc["records"].is_array()) {
    throw Error(ErrorKind::kValidation, "manifest field 'records' must be an array");
  }
  std::set<std::string> seen;
  const auto& records = doc["records"];
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& r = records[i];
    if (!r.is_object()) FieldError(i, "record", "must be an object");
    SampleRecord rec;
    rec.sample_id = Required<std::string>(r, i, "sample_id");
    rec.patient_id = Required<std::string>(r, i, "patient_id");
    try {
      rec.assay = ParseAssay(Required<std::string>(r, i, "assay"));
      rec.modality = ParseModality(Required<std::string>(r, i, "modality"));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kConfig) throw;
      throw Error(ErrorKind::kValidation, "manifest record " + std::to_string(i) + ": " + e.what());
    }
    rec.image_path = Required<std::string>(r, i, "image_path");
    if (r.contains("stain_image_path") && !r["stain_image_path"].is_null()) {
      rec.stain_image_path = Required<std::string>(r, i, "stain_image_path");
    }
    if (r.contains("stain_intensity") && !r["stain_intensity"].is_null()) {
      const double v = Required<double>(r, i, "stain_intensity");
      if (!(v >= 0.0 && v <= 255.0)) FieldError(i, "stain_intensity", "must lie in [0, 255]");
      rec.stain_intensity = v;
    }
    if (r.contains("label") && !r["label"].is_null()) {
      const int label = Required<int>(r, i, "label");
      if (label != 0 && label != 1) FieldError(i, "label", "must be 0 or 1");
      rec.label = label;
    }
    if (r.contains("ground_truth") && !r["ground_truth"].is_null()) {
      const json& g = r["ground_truth"];
      GroundTruth gt;
      gt.major_axis = Required<double>(g, i, "major_axis");
      gt.axis_ratio = Required<double>(g, i, "axis_ratio");
      gt.cap_fraction = Required<double>(g, i, "cap_fraction");
      gt.angle = Required<double>(g, i, "angle");
      gt.area_pixels = Required<std::int64_t>(g, i, "area_pixels");
      gt.cap_pixels = Required<std::int64_t>(g, i, "cap_pixels");
      rec.ground_truth = gt;
    }
    if (!seen.insert(rec.sample_id).second) {
      throw Error(ErrorKind::kValidation, "duplicate sample_id '" + rec.sample_id + "'");
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

json ManifestToJson(const DatasetManifest& manifest) {
  json records = json::array();
  for (const auto& rec : manifest.records) {
    json r = {{"sample_id", rec.sample_id},
              {"patient_id", rec.patient_id},
              {"assay", ToString(rec.assay)},
              {"modality", ToString(rec.modality)},
              {"image_path", rec.image_path.generic_string()}};
    if (rec.stain_image_path) r["stain_image_path"] = rec.stain_image_path->generic_string();
    if (rec.stain_intensity) r["stain_intensity"] = *rec.stain_intensity;
    if (rec.label) r["label"] = *rec.label;
    if (rec.ground_truth) {
      const auto& g = *rec.ground_truth;
      r["ground_truth"] = {{"major_axis", g.major_axis}, {"axis_ratio", g.axis_ratio},
                           {"cap_fraction", g.cap_fraction}, {"angle", g.angle},
                           {"area_pixels", g.area_pixels}, {"cap_pixels", g.cap_pixels}};
    }
    records.push_back(std::move(r));
  }
  return {{"schema_version", manifest.schema_version}, {"records", std::move(records)}};
}

DatasetManifest LoadManifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kPath, "cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kValidation, "manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest manifest = ManifestFromJson(doc);
  const fs::path base = path.parent_path();
  std::vector<std::string> missing;
  auto resolve = [&](fs::path& p) {
    if (p.is_relative()) p = base / p;
    if (!fs::exists(p)) missing.push_back(p.string());
  };
  for (auto& rec : manifest.records) {
    resolve(rec.image_path);
    if (rec.stain_image_path) resolve(*rec.stain_image_path);
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " referenced file(s) missing:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw Error(ErrorKind::kPath, msg);
  }
  return manifest;
}

void SaveManifest(const fs::path& path, const DatasetManifest& manifest) {
  DatasetManifest rel = manifest;
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  auto relativize = [&](fs::path& p) {
    if (p.is_absolute()) {
      const fs::path r = p.lexically_relative(fs::absolute(base));
      if (!r.empty() && *r.begin() != "..") p = r;
    }
  };
  for (auto& rec : rel.records) {
    relativize(rec.image_path);
    if (rec.stain_image_path) relativize(*rec.stain_image_path);
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write manifest " + path.string());
  out << ManifestToJson(rel).dump(2) << '\n';
}

SplitResult PatientSplit(const DatasetManifest& manifest, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error(ErrorKind::kSplit, "validation fraction must lie in (0, 1)");
  }
  std::map<std::string, std::vector<std::string>> by_patient;
  for (const auto& rec : manifest.records) by_patient[rec.patient_id].push_back(rec.sample_id);
  if (by_patient.size() < 2) {
    throw Error(ErrorKind::kSplit, "patient-level split needs at least 2 patients, found " +
                                       std::to_string(by_patient.size()));
  }
  std::vector<std::string> patients;
  for (const auto& [p, _] : by_patient) patients.push_back(p);
  std::mt19937_64 rng(seed);
  for (std::size_t i = patients.size(); i > 1; --i) {
    std::swap(patients[i - 1], patients[rng() % i]);
  }
  const auto n = static_cast<long>(patients.size());
  const long n_val = std::clamp(std::lround(val_fraction * static_cast<double>(n)), 1L, n - 1);

  SplitResult split;
  for (long i = 0; i < n; ++i) {
    const bool val = i < n_val;
    (val ? split.validation_patients : split.train_patients).push_back(patients[i]);
  }
  std::sort(split.validation_patients.begin(), split.validation_patients.end());
  std::sort(split.train_patients.begin(), split.train_patients.end());
  const std::set<std::string> val_set(split.validation_patients.begin(), split.validation_patients.end());
  for (const auto& rec : manifest.records) {
    (val_set.count(rec.patient_id) ? split.validation_ids : split.train_ids).push_back(rec.sample_id);
  }
  split.validation_fraction =
      static_cast<double>(split.validation_ids.size()) / static_cast<double>(manifest.records.size());
  if (std::abs(split.validation_fraction - val_fraction) > 0.10) {
    std::ostringstream w;
    w << "realized validation fraction " << split.validation_fraction << " differs from requested "
      << val_fraction << " by more than 10 points (unequal patient sizes)";
    split.warnings.push_back(w.str());
  }
  return split;
}

void SynthConfig::Validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, "invalid synth config: " + what); };
  if (counts[0] < 0 || counts[1] < 0 || counts[0] + counts[1] == 0) fail("class counts must be >= 0 with a positive total");
  if (image_size < 16) fail("image_size must be at least 16");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!(rho >= 0.0 && rho <= 1.0)) fail("rho must lie in [0, 1]");
  if (patients < 1) fail("patients must be positive");
  for (int level : {background_level, nucleus_level, cap_level}) {
    if (level < 0 || level > 255) fail("gray levels must lie in [0, 255]");
  }
  const Bounds b = BoundsFor(*this);
  for (int c = 0; c < 2; ++c) {
    const auto& d = classes[c];
    const std::string tag = "class " + std::to_string(c) + ": ";
    if (d.major_sd < 0 || d.ratio_sd < 0 || d.cap_sd < 0) fail(tag + "standard deviations must be >= 0");
    if (d.major_mean < b.major_lo || d.major_mean > b.major_hi) {
      fail(tag + "major_mean outside [" + std::to_string(b.major_lo) + ", " + std::to_string(b.major_hi) + "]");
    }
    if (d.ratio_mean < Bounds::kRatioLo || d.ratio_mean > Bounds::kRatioHi) fail(tag + "ratio_mean outside [1, 4]");
    if (d.major_mean / d.ratio_mean < Bounds::kMinMinor) fail(tag + "mean minor axis below 3 px");
    if (d.cap_mean < Bounds::kCapLo || d.cap_mean > Bounds::kCapHi) fail(tag + "cap_mean outside [0.02, 0.98]");
  }
}

json ToJson(const SynthConfig& cfg) {
  json classes = json::array();
  for (const auto& d : cfg.classes) {
    classes.push_back({{"major_mean", d.major_mean}, {"major_sd", d.major_sd}, {"ratio_mean", d.ratio_mean},
                       {"ratio_sd", d.ratio_sd}, {"cap_mean", d.cap_mean}, {"cap_sd", d.cap_sd}});
  }
  return {{"counts", cfg.counts},
          {"image_size", cfg.image_size},
          {"classes", classes},
          {"noise_sigma", cfg.noise_sigma},
          {"rho", cfg.rho},
          {"patients", cfg.patients},
          {"seed", cfg.seed},
          {"assay", ToString(cfg.assay)},
          {"modality", ToString(cfg.modality)},
          {"background_level", cfg.background_level},
          {"nucleus_level", cfg.nucleus_level},
          {"cap_level", cfg.cap_level}};
}

SynthConfig SynthConfigFromJson(const json& doc) {
  SynthConfig cfg;
  try {
    if (doc.contains("counts")) cfg.counts = doc["counts"].get<std::array<int, 2>>();
    cfg.image_size = doc.value("image_size", cfg.image_size);
    if (doc.contains("classes")) {
      const auto& classes = doc["classes"];
      if (!classes.is_array() || classes.size() != 2) {
        throw Error(ErrorKind::kConfig, "synth config 'classes' must hold exactly 2 entries");
      }
      for (int c = 0; c < 2; ++c) {
        auto& d = cfg.classes[c];
        const auto& j = classes[c];
        d.major_mean = j.value("major_mean", d.major_mean);
        d.major_sd = j.value("major_sd", d.major_sd);
        d.ratio_mean = j.value("ratio_mean", d.ratio_mean);
        d.ratio_sd = j.value("ratio_sd", d.ratio_sd);
        d.cap_mean = j.value("cap_mean", d.cap_mean);
        d.cap_sd = j.value("cap_sd", d.cap_sd);
      }
    }
    cfg.noise_sigma = doc.value("noise_sigma", cfg.noise_sigma);
    cfg.rho = doc.value("rho", cfg.rho);
    cfg.patients = doc.value("patients", cfg.patients);
    cfg.seed = doc.value("seed", cfg.seed);
    if (doc.contains("assay")) cfg.assay = ParseAssay(doc["assay"].get<std::string>());
    if (doc.contains("modality")) cfg.modality = ParseModality(doc["modality"].get<std::string>());
    cfg.background_level = doc.value("background_level", cfg.background_level);
    cfg.nucleus_level = doc.value("nucleus_level", cfg.nucleus_level);
    cfg.cap_level = doc.value("cap_level", cfg.cap_level);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("malformed synth config: ") + e.what());
  }
  cfg.Validate();
  return cfg;
}

RenderedHead RenderHead(int size, const HeadShape& shape, int background, int nucleus, int cap) {
  const double a = shape.major_axis / 2.0;
  const double b = a / shape.axis_ratio;
  const double chord = a * CapChordPosition(shape.cap_fraction);
  const double c = std::cos(shape.angle);
  const double s = std::sin(shape.angle);
  RenderedHead out{GrayImage(size, size, static_cast<std::uint8_t>(background)), 0, 0};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - shape.center_x;
      const double dy = y + 0.5 - shape.center_y;
      const double u = dx * c + dy * s;
      const double v = -dx * s + dy * c;
      if ((u * u) / (a * a) + (v * v) / (b * b) > 1.0) continue;
      ++out.area_pixels;
      if (u > chord) {
        ++out.cap_pixels;
        out.image(x, y) = static_cast<std::uint8_t>(cap);
      } else {
        out.image(x, y) = static_cast<std::uint8_t>(nucleus);
      }
    }
  }
  return out;
}

SynthSample SynthSampleAt(const SynthConfig& cfg, int index) {
  const int label = index < cfg.counts[0] ? 0 : 1;
  std::mt19937_64 rng(cfg.seed ^ static_cast<std::uint64_t>(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  int source = label;
  if (unit(rng) >= cfg.rho) source = unit(rng) < 0.5 ? 0 : 1;
  const ClassDistribution& d = cfg.classes[source];
  const Bounds bounds = BoundsFor(cfg);

  HeadShape shape;
  shape.major_axis = TruncatedNormal(rng, d.major_mean, d.major_sd, bounds.major_lo, bounds.major_hi);
  shape.axis_ratio = TruncatedNormal(rng, d.ratio_mean, d.ratio_sd, Bounds::kRatioLo,
                                     std::min(Bounds::kRatioHi, shape.major_axis / Bounds::kMinMinor));
  shape.cap_fraction = TruncatedNormal(rng, d.cap_mean, d.cap_sd, Bounds::kCapLo, Bounds::kCapHi);
  shape.angle = unit(rng) * std::numbers::pi;
  shape.center_x = cfg.image_size / 2.0 + (unit(rng) - 0.5) * 4.0;
  shape.center_y = cfg.image_size / 2.0 + (unit(rng) - 0.5) * 4.0;

  RenderedHead head = RenderHead(cfg.image_size, shape, cfg.background_level, cfg.nucleus_level, cfg.cap_level);
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    auto& px = head.image.pixels;
    for (Eigen::Index i = 0; i < px.size(); ++i) {
      px.data()[i] = static_cast<std::uint8_t>(std::clamp(std::lround(px.data()[i] + noise(rng)), 0L, 255L));
    }
  }

  // Fluorescence readout consistent with the label under the assay's polarity.
  const bool bright_positive = cfg.assay == Assay::kAO || cfg.assay == Assay::kCMA3 || cfg.assay == Assay::kTUNEL;
  const bool bright = (label == 1) == bright_positive;
  std::normal_distribution<double> stain(bright ? 170.0 : 80.0, 15.0);

  char id[32];
  std::snprintf(id, sizeof(id), "s%05d", index);
  SampleRecord rec;
  rec.sample_id = id;
  rec.patient_id = "p" + std::to_string(index % cfg.patients);
  rec.assay = cfg.assay;
  rec.modality = cfg.modality;
  rec.image_path = fs::path("images") / (rec.sample_id + ".pgm");
  rec.stain_intensity = std::clamp(std::round(stain(rng) * 100.0) / 100.0, 1.0, 254.0);
  rec.label = label;
  rec.ground_truth = GroundTruth{shape.major_axis, shape.axis_ratio, shape.cap_fraction, shape.angle,
                                 head.area_pixels, head.cap_pixels};
  return {std::move(head.image), std::move(rec)};
}

DatasetManifest SynthGenerate(const SynthConfig& cfg, const fs::path& out_dir, int threads) {
  cfg.Validate();
  fs::create_directories(out_dir / "images");
  const int total = cfg.counts[0] + cfg.counts[1];
  DatasetManifest manifest;
  manifest.records.resize(total);
  ParallelFor(static_cast<std::size_t>(total), threads, [&](std::size_t i) {
    SynthSample sample = SynthSampleAt(cfg, static_cast<int>(i));
    WritePgm(out_dir / sample.record.image_path, sample.image);
    manifest.records[i] = std::move(sample.record);
  });
  SaveManifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace fragpredict
