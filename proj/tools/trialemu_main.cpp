#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "trialemu/pipeline.hpp"
#include "trialemu/synthgen.hpp"

namespace fs = std::filesystem;
using namespace trialemu;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool with_truth = false;
  std::string until;
  std::string buckets;
  std::string quotas;
  std::string mode;
  std::optional<std::int64_t> move_budget;
};

std::vector<double> ParseList(const std::string& text, const std::string& flag) {
  std::vector<double> values;
  std::stringstream cells(text);
  std::string cell;
  while (std::getline(cells, cell, ',')) values.push_back(ParseDouble(cell, flag));
  if (values.empty()) throw Error(ErrorKind::kConfig, flag + " needs a comma-separated list");
  return values;
}

void Save(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
}

void Synth(const Options& o) {
  if (o.config.empty()) throw Error(ErrorKind::kConfig, "synth needs --config <dgp.json>");
  if (o.out.empty()) throw Error(ErrorKind::kConfig, "synth needs --out <dir>");
  DGPConfig dgp = LoadDGPConfig(o.config);
  if (o.seed) dgp.seed = *o.seed;
  dgp.Validate();
  fs::create_directories(o.out);
  const SyntheticCohort obs = GenerateObservational(dgp);
  const SyntheticTrial rct = GenerateRctTarget(dgp);
  SaveCohort((fs::path(o.out) / "cohort.csv").string(), obs.cohort);
  SaveCohort((fs::path(o.out) / "rct.csv").string(), rct.cohort);
  Save(fs::path(o.out) / "trial.json", TrialConfigToJson(TrialConfig{rct.target, {}}));
  if (o.with_truth) {
    std::ostringstream a, b;
    WriteGroundTruthCsv(a, obs.truth);
    WriteGroundTruthCsv(b, rct.truth);
    Save(fs::path(o.out) / "truth.csv", a.str());
    Save(fs::path(o.out) / "rct_truth.csv", b.str());
  }
  std::cout << "wrote " << obs.cohort.size() << " observational and " << rct.cohort.size()
            << " trial patients to " << o.out << "\n";
}

PipelineConfig LoadConfig(const Options& o) {
  if (o.config.empty()) throw Error(ErrorKind::kConfig, "--config <pipeline.json> is required");
  PipelineConfig config = LoadPipelineConfig(o.config);
  if (o.seed) config.seed = *o.seed;
  if (!o.buckets.empty()) config.bucket_boundaries = ParseList(o.buckets, "--buckets");
  if (!o.quotas.empty()) {
    if (o.quotas == "auto") {
      config.quotas.reset();
    } else {
      std::vector<int> quotas;
      for (double q : ParseList(o.quotas, "--quotas")) {
        if (q != static_cast<int>(q)) throw Error(ErrorKind::kConfig, "--quotas must be integers");
        quotas.push_back(static_cast<int>(q));
      }
      config.quotas = quotas;
    }
  }
  if (!o.mode.empty()) {
    if (o.mode == "exact") {
      config.matching.mode = SolveMode::kExact;
    } else if (o.mode == "heuristic") {
      config.matching.mode = SolveMode::kHeuristic;
    } else {
      throw Error(ErrorKind::kConfig, "--mode must be heuristic or exact");
    }
  }
  if (o.move_budget) config.matching.move_budget = *o.move_budget;
  return config;
}

std::string RequireOut(const Options& o) {
  if (o.out.empty()) throw Error(ErrorKind::kConfig, "--out <dir> is required");
  return o.out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Target trial emulation from observational survival cohorts"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "Pipeline config (DGP config for synth)");
  app.add_option("--seed", o.seed, "Global seed, overrides the config");
  app.add_option("--out", o.out, "Output or run directory");
  app.add_flag("--with-truth", o.with_truth, "synth: also write the ground-truth sidecars");
  app.add_option("--until", o.until, "run: last stage to execute");
  app.add_option("--buckets", o.buckets, "Risk bucket boundaries, e.g. 0,0.4,0.7,1");
  app.add_option("--quotas", o.quotas, "auto or per-bucket pair counts, e.g. 40,60,30");
  app.add_option("--mode", o.mode, "Matching solver: heuristic or exact");
  app.add_option("--move-budget", o.move_budget, "Local-search move evaluations per restart");

  std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "Generate a synthetic cohort, trial target and simulated trial"},
      {"filter", "Apply eligibility criteria"},
      {"stratify", "Fit the baseline risk model, assign buckets and quotas"},
      {"match", "Select matched pairs"},
      {"tune", "Fit and tune the counterfactual outcome models"},
      {"tree", "Constrain rewards, fit and select the policy tree"},
      {"validate", "Subgroup report, log-rank comparisons and balance audit"},
      {"run", "Run every stage"},
      {"report", "Write the 4-decimal report bundle of a run directory"}};
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "synth") {
      Synth(o);
    } else if (command == "report") {
      WriteReport(RequireOut(o));
      std::cout << "wrote " << (fs::path(o.out) / "report").string() << "\n";
    } else if (command == "run") {
      RunPipeline(LoadConfig(o), RequireOut(o), o.until);
      std::cout << "wrote " << (fs::path(o.out) / "manifest.json").string() << "\n";
    } else if (command == "tree") {
      const PipelineConfig config = LoadConfig(o);
      RunStage(config, RequireOut(o), "constrain");
      RunStage(config, o.out, "tree");
    } else {
      RunStage(LoadConfig(o), RequireOut(o), command);
    }
  } catch (const Error& e) {
    std::cerr << "error (" << ToString(e.kind()) << "): " << e.what() << "\n";
    return ExitCode(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
