// fragpredict command-line interface.
//
// Exit codes: 0 ok, 1 usage, 2 data/validation, 3 training divergence, 4 I/O.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fragpredict/data.hpp"
#include "fragpredict/error.hpp"
#include "fragpredict/eval.hpp"
#include "fragpredict/fusion.hpp"
#include "fragpredict/image_io.hpp"
#include "fragpredict/morphometry.hpp"
#include "fragpredict/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace fragpredict;

namespace {

struct Options {
  bool json_errors = false;
  int threads = 0;
};

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDivergence:
      return 3;
    case ErrorKind::kIo:
    case ErrorKind::kPath:
      return 4;
    default:
      return 2;
  }
}

std::uint64_t Fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void LogRun(const std::string& command, const std::optional<std::uint64_t>& seed, const json& config) {
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(Fnv1a(config.dump())));
  std::cerr << "fragpredict " << command << ": seed=" << (seed ? std::to_string(*seed) : std::string("none"))
            << " config_hash=" << hash << '\n';
}

json ReadJsonFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, path.string() + " is not valid JSON: " + e.what());
  }
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
}

void EnsureDir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create directory " + dir.string() + ": " + ec.message());
}

std::string FormatProbability(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", p);
  return buf;
}

// Report, ROC curves and score table for one scored set.
void WriteEvaluation(const fs::path& out_dir, const std::vector<std::string>& ids, const std::vector<int>& labels,
                     const std::vector<double>& probabilities, const std::string& title) {
  EnsureDir(out_dir);
  std::vector<int> predictions;
  for (double p : probabilities) predictions.push_back(p > 0.5 ? 1 : 0);
  const ClassificationReport report = MakeClassificationReport(labels, predictions);
  const std::string text = RenderReport(report);
  WriteText(out_dir / "report.txt", text);
  WriteText(out_dir / "report.csv", ReportCsv(report));
  WriteText(out_dir / "report.json", ReportToJson(report).dump(2) + "\n");
  std::cout << text;

  std::ostringstream scores;
  scores << "sample_id,label,probability\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    scores << ids[i] << ',' << labels[i] << ',' << FormatProbability(probabilities[i]) << '\n';
  }
  WriteText(out_dir / "scores.csv", scores.str());

  const auto problems = BinaryOneVsRest(labels, probabilities);
  std::vector<RocCurve> curves;
  try {
    curves.push_back(ComputeRoc(problems[0].labels, problems[0].scores, kClassNames[0]));
    curves.push_back(ComputeRoc(problems[1].labels, problems[1].scores, kClassNames[1]));
    curves.push_back(MicroAverageRoc(problems));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kUndefinedRoc) throw;
    std::cerr << "warning: " << e.what() << "; ROC curves omitted\n";
    curves.clear();
  }
  WriteText(out_dir / "roc.svg", RenderRocSvg(curves, title));
  WriteText(out_dir / "roc.json", RocToJson(curves).dump(2) + "\n");
  for (const auto& c : curves) std::cerr << "AUC " << c.label << ": " << FormatProbability(c.auc) << '\n';
}

int RunSynth(const Options& opt, const std::string& config_path, const std::string& out,
             const std::optional<std::uint64_t>& seed) {
  SynthConfig cfg = config_path.empty() ? SynthConfig{} : SynthConfigFromJson(ReadJsonFile(config_path));
  if (seed) cfg.seed = *seed;
  cfg.Validate();
  LogRun("synth", cfg.seed, ToJson(cfg));
  const DatasetManifest manifest = SynthGenerate(cfg, out, ResolveThreads(opt.threads));
  std::cerr << "wrote " << manifest.records.size() << " records to " << (fs::path(out) / "manifest.json").string()
            << '\n';
  return 0;
}

int RunExtract(const Options& opt, const std::string& manifest_path, const std::string& out) {
  const DatasetManifest manifest = LoadManifest(manifest_path);
  LogRun("extract", std::nullopt, json{{"manifest", manifest_path}});
  const auto& records = manifest.records;
  std::vector<std::string> rows(records.size());
  std::vector<std::string> failures(records.size());
  ParallelFor(records.size(), ResolveThreads(opt.threads), [&](std::size_t i) {
    try {
      rows[i] = records[i].sample_id + ',' + MorphCsvRow(ExtractFeatures(ReadGrayImage(records[i].image_path)));
    } catch (const Error& e) {
      if (ExitCodeFor(e.kind()) != 2) throw;
      failures[i] = std::string(ToString(e.kind())) + ": " + e.what();
    }
  });
  std::ostringstream csv;
  csv << "sample_id," << MorphCsvHeader() << '\n';
  int failed = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (failures[i].empty()) {
      csv << rows[i] << '\n';
    } else {
      ++failed;
      std::cerr << "skipped " << records[i].sample_id << ": " << failures[i] << '\n';
    }
  }
  WriteText(out, csv.str());
  std::cerr << "extracted " << records.size() - failed << " of " << records.size() << " records\n";
  return 0;
}

int RunTrain(const Options& opt, const std::string& manifest_path, const std::string& assay_name,
             const std::string& modality_name, const std::string& config_path, const std::string& out,
             const std::optional<std::uint64_t>& seed, const std::optional<int>& epochs) {
  const Assay assay = ParseAssay(assay_name);
  const Modality modality = ParseModality(modality_name);
  TrainConfig tcfg;
  BackboneConfig bcfg;
  LabelRule rule = LabelRule::ForAssay(assay);
  if (!config_path.empty()) {
    const json doc = ReadJsonFile(config_path);
    if (!doc.is_object()) throw Error(ErrorKind::kConfig, "train config file must be a JSON object");
    for (const auto& item : doc.items()) {
      if (item.key() != "train" && item.key() != "backbone" && item.key() != "label_rule") {
        throw Error(ErrorKind::kConfig, "unknown config section '" + item.key() + "'");
      }
    }
    if (doc.contains("train")) tcfg = TrainConfigFromJson(doc["train"]);
    if (doc.contains("backbone")) bcfg = BackboneConfigFromJson(doc["backbone"]);
    if (doc.contains("label_rule")) {
      json r = doc["label_rule"];
      r["assay"] = ToString(assay);
      rule = LabelRuleFromJson(r);
    }
  }
  if (seed) tcfg.seed = *seed;
  if (epochs) tcfg.epochs = *epochs;
  tcfg.Validate();
  LogRun("train", tcfg.seed,
         json{{"train", ToJson(tcfg)}, {"backbone", ToJson(bcfg)}, {"label_rule", ToJson(rule)},
              {"modality", ToString(modality)}});

  const DatasetManifest manifest = LoadManifest(manifest_path);
  const TrainResult result = TrainFromManifest(manifest, modality, rule, tcfg, bcfg, ResolveThreads(opt.threads));
  SaveBundle(out, result.model);
  WriteText(fs::path(out) / "history.json", ToJson(result.history).dump(2) + "\n");
  for (const auto& w : result.history.warnings) std::cerr << "warning: " << w << '\n';
  const auto& best = result.history.epochs[result.history.best_epoch];
  std::cerr << "best epoch " << best.epoch << ": val_loss " << best.val_loss << ", val_accuracy " << best.val_accuracy
            << '\n';
  return 0;
}

int RunEval(const Options& opt, const std::string& model_dir, const std::string& manifest_path,
            const std::string& out, bool validation_only) {
  const EnsembleModel model = LoadBundle(model_dir);
  const DatasetManifest manifest = LoadManifest(manifest_path);
  LogRun("eval", model.train_config.seed, ReadJsonFile(fs::path(model_dir) / "model.json"));

  std::vector<SampleRecord> records;
  std::vector<std::string> wanted;
  if (validation_only) {
    const json history = ReadJsonFile(fs::path(model_dir) / "history.json");
    wanted = history.at("validation_ids").get<std::vector<std::string>>();
    std::sort(wanted.begin(), wanted.end());
  }
  for (const auto& rec : manifest.records) {
    if (rec.assay != model.label_rule.assay) continue;
    if (validation_only && !std::binary_search(wanted.begin(), wanted.end(), rec.sample_id)) continue;
    records.push_back(rec);
  }
  if (records.empty()) {
    throw Error(ErrorKind::kEmptyInput, "no manifest records match the model's assay " + ToString(model.label_rule.assay));
  }
  const int threads = ResolveThreads(opt.threads);
  const PreparedSet prepared = PrepareSamples(records, model.label_rule, model.backbone_config.input_size, threads);
  for (const auto& s : prepared.skipped) std::cerr << "skipped " << s << '\n';
  const ScoredSet scored = ScoreSamples(model, prepared.samples, threads);
  WriteEvaluation(out, scored.sample_ids, scored.labels, scored.probabilities,
                  ToString(model.label_rule.assay) + " ROC Curves");
  return 0;
}

int RunPredict(const Options& opt, const std::string& model_dir, const std::vector<std::string>& images) {
  const EnsembleModel model = LoadBundle(model_dir);
  LogRun("predict", model.train_config.seed, ReadJsonFile(fs::path(model_dir) / "model.json"));
  std::vector<std::optional<double>> probs(images.size());
  std::vector<std::optional<Error>> errors(images.size());
  ParallelFor(images.size(), ResolveThreads(opt.threads), [&](std::size_t i) {
    try {
      probs[i] = Predict(model, ReadGrayImage(images[i]));
    } catch (const Error& e) {
      errors[i] = e;
    }
  });
  int code = 0;
  json failures = json::array();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (probs[i]) {
      std::cout << images[i] << '\t' << FormatProbability(*probs[i]) << '\n';
      continue;
    }
    const Error& e = *errors[i];
    if (code == 0) code = ExitCodeFor(e.kind());
    std::cerr << "error: " << images[i] << ": " << ToString(e.kind()) << ": " << e.what() << '\n';
    failures.push_back({{"path", images[i]}, {"kind", ToString(e.kind())}, {"message", e.what()}});
  }
  if (opt.json_errors && !failures.empty()) {
    std::cout << json{{"error", {{"kind", failures[0]["kind"]}, {"exit_code", code}, {"images", failures}}}}.dump()
              << '\n';
  }
  return code;
}

// scores CSV: sample_id,label,probability (as written by eval).
int RunRender(const std::string& scores_path, const std::string& out, const std::string& title) {
  std::ifstream in(scores_path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + scores_path);
  LogRun("render", std::nullopt, json{{"scores", scores_path}, {"title", title}});
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,label,probability") {
    throw Error(ErrorKind::kValidation, scores_path + ": expected header 'sample_id,label,probability'");
  }
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> probs;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string id, label, prob;
    std::getline(row, id, ',');
    std::getline(row, label, ',');
    std::getline(row, prob, ',');
    try {
      std::size_t used = 0;
      const int l = std::stoi(label, &used);
      if (used != label.size() || (l != 0 && l != 1)) throw std::invalid_argument("label");
      const double p = std::stod(prob, &used);
      if (used != prob.size() || !(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("probability");
      ids.push_back(id);
      labels.push_back(l);
      probs.push_back(p);
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::kValidation, scores_path + ":" + std::to_string(line_no) +
                                              ": expected '<id>,<0|1>,<probability in [0,1]>'");
    }
  }
  WriteEvaluation(out, ids, labels, probs, title);
  return 0;
}

int ReportFailure(const Options& opt, int code, const std::string& kind, const std::string& message) {
  std::cerr << "error: " << kind << ": " << message << '\n';
  if (opt.json_errors) {
    std::cout << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sperm DNA-fragmentation prediction from morphology and a vision-transformer backbone."};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_flag("--json", opt.json_errors, "Print errors as JSON on stdout");
  app.add_option("--threads", opt.threads, "Worker threads (0: FRAGPREDICT_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);

  std::string config, out, manifest, assay, modality, model, scores, title = "ROC Curves";
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::vector<std::string> images;
  bool validation_only = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic image set and manifest");
  synth->add_option("--config", config, "Synth config JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--seed", seed, "Override the config seed");

  auto* extract = app.add_subcommand("extract", "Write morphometry features for every record as CSV");
  extract->add_option("--manifest", manifest, "Manifest JSON")->required();
  extract->add_option("--out", out, "Output CSV")->required();

  auto* train = app.add_subcommand("train", "Train an ensemble model for one assay and modality");
  train->add_option("--manifest", manifest, "Manifest JSON")->required();
  train->add_option("--assay", assay, "AB, TB, AO, CMA3 or TUNEL")->required();
  train->add_option("--modality", modality, "brightfield or phase_contrast")->required();
  train->add_option("--config", config, "JSON with optional train, backbone and label_rule sections")
      ->check(CLI::ExistingFile);
  train->add_option("--out", out, "Model bundle directory")->required();
  train->add_option("--seed", seed, "Override the training seed");
  train->add_option("--epochs", epochs, "Override the epoch count")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Score a manifest and write report and ROC files");
  eval->add_option("--model", model, "Model bundle directory")->required();
  eval->add_option("--manifest", manifest, "Manifest JSON")->required();
  eval->add_option("--out", out, "Output directory")->required();
  eval->add_flag("--validation-only", validation_only, "Only score the model's validation split");

  auto* predict = app.add_subcommand("predict", "Print path<TAB>probability per image");
  predict->add_option("--model", model, "Model bundle directory")->required();
  predict->add_option("--image", images, "Image path (repeatable)")->required();

  auto* render = app.add_subcommand("render", "Render report and ROC files from a scores CSV");
  render->add_option("--scores", scores, "CSV with sample_id,label,probability")->required();
  render->add_option("--out", out, "Output directory")->required();
  render->add_option("--title", title, "ROC plot title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) return RunSynth(opt, config, out, seed);
    if (extract->parsed()) return RunExtract(opt, manifest, out);
    if (train->parsed()) return RunTrain(opt, manifest, assay, modality, config, out, seed, epochs);
    if (eval->parsed()) return RunEval(opt, model, manifest, out, validation_only);
    if (predict->parsed()) return RunPredict(opt, model, images);
    if (render->parsed()) return RunRender(scores, out, title);
  } catch (const Error& e) {
    return ReportFailure(opt, ExitCodeFor(e.kind()), ToString(e.kind()), e.what());
  } catch (const fs::filesystem_error& e) {
    return ReportFailure(opt, 4, "io", e.what());
  } catch (const json::exception& e) {
    return ReportFailure(opt, 2, "validation", e.what());
  } catch (const std::exception& e) {
    return ReportFailure(opt, 2, "error", e.what());
  }
  return 1;
}
