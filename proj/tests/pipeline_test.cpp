#include "trialemu/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "trialemu/synthgen.hpp"

using namespace trialemu;
namespace fs = std::filesystem;

namespace {

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void Spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

fs::path Scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("trialemu_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small synthetic inputs plus a fast pipeline config, written under `dir`.
fs::path WriteInputs(const fs::path& dir, const std::string& extra = "") {
  const DGPConfig dgp = ParseDGPConfig(R"({
    "n_obs": 600, "n_rct": 600, "seed": 5,
    "covariates": [
      {"name": "x1", "distribution": "normal", "mean": 0.5, "sd": 1.0, "risk_coef": 0.4},
      {"name": "x2", "distribution": "bernoulli", "p": 0.4, "risk_coef": 0.5}
    ],
    "gamma_u": 0.2, "gamma_x": 0.3, "base_hazard": 0.008,
    "treatment_multiplier": 0.7, "censoring_rate": 0.003
  })");
  SaveCohort((dir / "cohort.csv").string(), GenerateObservational(dgp).cohort);
  const SyntheticTrial rct = GenerateRctTarget(dgp);
  SaveCohort((dir / "rct.csv").string(), rct.cohort);
  Spit(dir / "trial.json", TrialConfigToJson(TrialConfig{rct.target, {}}));
  const std::string config = R"({
    "cohort": "cohort.csv",
    "trial": "trial.json",
    "validation_cohort": "rct.csv",
    "seed": 3,
    "xray": {"n_trees": 20, "max_depth": 5},
    "buckets": [0, 0.3, 0.45, 0.6, 0.75, 1],
    "quotas": "auto",
    "matching": {"move_budget": 20000, "restarts": 2, "distance_covariates": ["x1"]},
    "counterfactual": {"learner": {"n_trees": 20, "max_depth": 4, "min_leaf": 10}, "arms": [1]},
    "constraint": {"factor": 0.78},
    "tree_grid": [{"max_depth": 1, "min_leaf": 20}, {"max_depth": 2, "min_leaf": 20}],
    "min_effect": 0.05)" + extra + "}";
  Spit(dir / "pipeline.json", config);
  return dir / "pipeline.json";
}

std::vector<std::string> ManifestStages(const fs::path& run) {
  std::vector<std::string> out;
  const auto doc = nlohmann::json::parse(Slurp(run / "manifest.json"));
  for (const auto& s : doc.at("stages")) {
    out.push_back(s.at("stage").get<std::string>());
  }
  return out;
}

ErrorKind KindOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::kConfig;
}

std::string MessageOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Pipeline, EndToEndManifestHasSevenStages) {
  const fs::path dir = Scratch("smoke");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  const PipelineState state = RunPipeline(config, (dir / "run").string());
  EXPECT_EQ(ManifestStages(dir / "run"), StageOrder());
  EXPECT_EQ(StageOrder().size(), 7u);
  EXPECT_FALSE(state.matched.empty());
  EXPECT_EQ(state.rewards.size(), state.matched.size());
  EXPECT_EQ(state.comparisons.size(), 4u);
  for (const auto& f : {"eligible.csv", "risks.csv", "matches.csv", "rewards.csv",
                        "rewards_constrained.csv", "tree.json", "logrank.json", "balance.json"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  }
}

TEST(Pipeline, UntilStopsAfterStage) {
  const fs::path dir = Scratch("until");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "run").string(), "match");
  EXPECT_EQ(ManifestStages(dir / "run"),
            (std::vector<std::string>{"filter", "stratify", "match"}));
  EXPECT_FALSE(fs::exists(dir / "run" / "rewards.csv"));
  EXPECT_EQ(KindOf([&] { RunPipeline(config, (dir / "run").string(), "bogus"); }),
            ErrorKind::kConfig);
}

TEST(Pipeline, TamperedArtifactIsNamedOnResume) {
  const fs::path dir = Scratch("tamper");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "run").string(), "match");
  Spit(dir / "run" / "matched.csv", Slurp(dir / "run" / "matched.csv") + "\n");
  const auto fn = [&] { RunStage(config, (dir / "run").string(), "tune"); };
  EXPECT_EQ(KindOf(fn), ErrorKind::kIntegrity);
  EXPECT_NE(MessageOf(fn).find("matched.csv"), std::string::npos);
  EXPECT_NE(MessageOf(fn).find("stage 'tune'"), std::string::npos);
}

TEST(Pipeline, MissingUpstreamStage) {
  const fs::path dir = Scratch("missing");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "run").string(), "filter");
  const auto fn = [&] { RunStage(config, (dir / "run").string(), "match"); };
  EXPECT_EQ(KindOf(fn), ErrorKind::kIntegrity);
  EXPECT_NE(MessageOf(fn).find("stratify"), std::string::npos);
}

TEST(Pipeline, RerunningAnyStageReproducesItsHash) {
  const fs::path dir = Scratch("isolation");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  const std::string run = (dir / "run").string();
  RunPipeline(config, run);
  const std::string manifest = Slurp(dir / "run" / "manifest.json");
  for (const auto& stage : StageOrder()) {
    RunStage(config, run, stage);
    // Rerunning a stage drops later entries; rerun them in order.
    const auto it = std::find(StageOrder().begin(), StageOrder().end(), stage);
    for (auto later = it + 1; later != StageOrder().end(); ++later) RunStage(config, run, *later);
    EXPECT_EQ(Slurp(dir / "run" / "manifest.json"), manifest) << stage;
  }
}

TEST(Pipeline, IdenticalRunsGiveIdenticalManifestAndReport) {
  const fs::path dir = Scratch("determinism");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "a").string());
  RunPipeline(config, (dir / "b").string());
  WriteReport((dir / "a").string());
  WriteReport((dir / "b").string());
  EXPECT_EQ(Slurp(dir / "a" / "manifest.json"), Slurp(dir / "b" / "manifest.json"));
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir / "a" / "report")) {
    EXPECT_EQ(Slurp(entry.path()), Slurp(dir / "b" / "report" / entry.path().filename()))
        << entry.path();
    ++files;
  }
  EXPECT_GT(files, 10u);
}

TEST(Pipeline, SeedChangesResults) {
  const fs::path dir = Scratch("seed");
  PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "a").string(), "stratify");
  config.seed = 4;
  RunPipeline(config, (dir / "b").string(), "stratify");
  EXPECT_NE(Slurp(dir / "a" / "risks.csv"), Slurp(dir / "b" / "risks.csv"));
}

TEST(Report, NumericCellsCarryFourDecimals) {
  const fs::path dir = Scratch("report");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "run").string());
  WriteReport((dir / "run").string());
  const std::regex number(R"(-?\d+(\.\d+)?(e[-+]?\d+)?)");
  const std::regex four(R"(-?\d+\.\d{4})");
  const std::set<std::string> count_columns = {"arm",       "leaf",      "n",       "n_control",
                                               "n_treated", "treatment", "step",    "max_depth",
                                               "min_leaf",  "passes",    "depth",   "leaves",
                                               "at_risk",   "events",    "selected", "recommended",
                                               "flagged",   "within_tolerance"};
  for (const auto& entry : fs::directory_iterator(dir / "run" / "report")) {
    if (entry.path().extension() != ".csv") continue;
    std::istringstream in(Slurp(entry.path()));
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
      std::stringstream cells(line);
      std::string h;
      while (std::getline(cells, h, ',')) header.push_back(h);
    }
    while (std::getline(in, line)) {
      std::stringstream cells(line);
      std::string cell;
      for (std::size_t c = 0; std::getline(cells, cell, ','); ++c) {
        if (!std::regex_match(cell, number) || count_columns.contains(header.at(c))) continue;
        EXPECT_TRUE(std::regex_match(cell, four)) << entry.path() << " " << header[c] << "=" << cell;
      }
    }
  }
}

TEST(Report, MissingArtifactListsStagesToRerun) {
  const fs::path dir = Scratch("report_missing");
  const PipelineConfig config = LoadPipelineConfig(WriteInputs(dir).string());
  RunPipeline(config, (dir / "run").string());
  fs::remove(dir / "run" / "tree.json");
  const std::string message = MessageOf([&] { WriteReport((dir / "run").string()); });
  EXPECT_NE(message.find("rerun stages: tree, validate"), std::string::npos) << message;
  EXPECT_NE(MessageOf([&] { WriteReport((dir / "nothing").string()); }).find("filter"),
            std::string::npos);
}

TEST(Report, RootOnlyTreeLeavesAdvisedAgainstEmpty) {
  const fs::path dir = Scratch("root_only");
  const PipelineConfig config = LoadPipelineConfig(
      WriteInputs(dir, R"(, "tree_grid": [{"max_depth": 1, "min_leaf": 100000}], "constraint": null)")
          .string());
  RunPipeline(config, (dir / "run").string());
  WriteReport((dir / "run").string());
  const auto tree = nlohmann::json::parse(Slurp(dir / "run" / "tree.json"));
  EXPECT_EQ(tree.at("nodes").size(), 1u);
  const std::string groups = Slurp(dir / "run" / "report" / "groups.csv");
  EXPECT_TRUE(groups.find("matched,advised_against,0\n") != std::string::npos ||
              groups.find("matched,recommended,0\n") != std::string::npos)
      << groups;
}

// Validate stage resumed from hand-written upstream artifacts: 216 matched
// patients, 186 of them in the recommended leaf.
TEST(Report, GroupSizesFollowRecommendedLeaves) {
  const fs::path dir = Scratch("groups");
  const fs::path run = dir / "run";
  fs::create_directories(run);
  CovariateSchema schema = CovariateSchema::Continuous({"x"});
  std::vector<Patient> patients;
  std::ostringstream risks, rewards;
  risks << "id,risk,bucket\n";
  rewards << "id,reward_control,reward_treatment\n";
  for (int i = 0; i < 216; ++i) {
    Patient p;
    p.id = "m" + std::to_string(1000 + i);
    p.covariates = {i < 186 ? 0.0 : 1.0};
    p.treatment = i % 2;
    p.event = i % 3 == 0;
    p.time = 10.0 + i % 50;
    patients.push_back(p);
    risks << p.id << ",0.5,0\n";
    rewards << p.id << (i < 186 ? ",0.4,0.6\n" : ",0.5,0.45\n");
  }
  const Cohort cohort(schema, patients);
  SaveCohort((dir / "cohort.csv").string(), cohort);
  SaveCohort((run / "eligible.csv").string(), cohort);
  SaveCohort((run / "matched.csv").string(), cohort);
  Spit(run / "schema.json", SchemaToJson(schema));
  Spit(run / "risks.csv", risks.str());
  Spit(run / "rewards.csv", rewards.str());
  Spit(dir / "trial.json", R"({"horizon_months": 60, "mu0": 0.4, "mu1": 0.5})");
  std::istringstream reward_text(rewards.str());
  const PolicyTree tree = FitPolicyTree(cohort.covariates(), ReadRewardCsv(reward_text).rewards,
                                        PolicyTreeConfig{1, 1, 2, 0});
  Spit(run / "tree.json", PolicyTreeToJson(tree, {"x"}));

  nlohmann::json manifest;
  manifest["inputs"] = nlohmann::json::object();
  auto entry = [&](const std::string& stage, std::vector<std::string> files) {
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& f : files) {
      artifacts.push_back({{"file", f}, {"fnv1a", HexDigest(Fnv1a(Slurp(run / f)))}});
    }
    return nlohmann::json{{"stage", stage}, {"artifacts", artifacts}};
  };
  manifest["stages"] = {entry("filter", {"eligible.csv", "schema.json"}),
                        entry("stratify", {"risks.csv"}), entry("match", {"matched.csv"}),
                        entry("tune", {"rewards.csv"}), entry("tree", {"tree.json"})};
  Spit(run / "manifest.json", manifest.dump(2));

  PipelineConfig config;
  config.cohort_path = (dir / "cohort.csv").string();
  config.trial_path = (dir / "trial.json").string();
  config.min_effect = 0.05;
  RunStage(config, run.string(), "validate");
  const auto sub = nlohmann::json::parse(Slurp(run / "subgroups.json"));
  std::map<std::string, std::size_t> sizes;
  for (const auto& g : sub.at("groups")) sizes[g.at("group")] = g.at("n").get<std::size_t>();
  EXPECT_EQ(sizes["recommended"], 186u);
  EXPECT_EQ(sizes["advised_against"], 30u);
}

TEST(PipelineConfig, ParseErrors) {
  const fs::path dir = Scratch("config");
  WriteInputs(dir);
  EXPECT_EQ(KindOf([&] { ParsePipelineConfig("{", dir.string()); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { ParsePipelineConfig(R"({"trial": "t.json"})", dir.string()); }),
            ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] {
              ParsePipelineConfig(R"({"cohort": "c.csv", "trial": "t.json", "quotas": "some"})",
                                  dir.string());
            }),
            ErrorKind::kConfig);
  const PipelineConfig missing =
      ParsePipelineConfig(R"({"cohort": "nope.csv", "trial": "trial.json"})", dir.string());
  EXPECT_EQ(KindOf([&] { missing.Validate(); }), ErrorKind::kIo);
  PipelineConfig bad = LoadPipelineConfig((dir / "pipeline.json").string());
  bad.constraint_factor = 1.5;
  EXPECT_EQ(KindOf([&] { bad.Validate(); }), ErrorKind::kConfig);
}

TEST(PipelineConfig, PathsResolveAgainstConfigDirectory) {
  const fs::path dir = Scratch("paths");
  const PipelineConfig c = LoadPipelineConfig(WriteInputs(dir).string());
  EXPECT_EQ(fs::path(c.cohort_path), (dir / "cohort.csv").lexically_normal());
  EXPECT_EQ(c.constraint_factor.value(), 0.78);
  EXPECT_EQ(c.tree_grid.size(), 2u);
  EXPECT_EQ(c.distance_covariates, std::vector<std::string>{"x1"});
}

TEST(Schema, JsonRoundTrip) {
  CovariateSchema s;
  s.names = {"age", "stage"};
  s.kinds = {CovariateKind::kContinuous, CovariateKind::kBinary};
  s.units = {"years", ""};
  const CovariateSchema back = ParseSchemaJson(SchemaToJson(s));
  EXPECT_EQ(back.names, s.names);
  EXPECT_EQ(back.kinds, s.kinds);
  EXPECT_EQ(back.units, s.units);
  EXPECT_THROW(ParseSchemaJson(R"({"covariates": [{"name": "a", "kind": "ordinal"}]})"), Error);
}

TEST(ExitCode, Categories) {
  EXPECT_EQ(ExitCode(ErrorKind::kConfig), 2);
  for (auto k : {ErrorKind::kSchema, ErrorKind::kParse, ErrorKind::kIntegrity, ErrorKind::kIo,
                 ErrorKind::kInsufficientData, ErrorKind::kDegenerateModel}) {
    EXPECT_EQ(ExitCode(k), 3);
  }
  EXPECT_EQ(ExitCode(ErrorKind::kInfeasibleTarget), 4);
  EXPECT_EQ(ExitCode(ErrorKind::kInstanceTooLarge), 4);
  EXPECT_EQ(ExitCode(ErrorKind::kUnreachableTarget), 5);
}
