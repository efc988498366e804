#include "trialemu/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace trialemu {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json ParseJson(const std::string& text, const std::string& context) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, context + ": " + e.what());
  }
}

std::string ReadFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void WriteFile(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

template <typename Fn>
void WriteWith(const fs::path& path, Fn&& write) {
  std::ostringstream out;
  write(out);
  WriteFile(path, out.str());
}

std::string FileDigest(const fs::path& path) { return HexDigest(Fnv1a(ReadFile(path))); }

template <typename T>
T Get(const json& node, const std::string& key, const std::string& context) {
  try {
    return node.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, context + "." + key + ": " + e.what());
  }
}

template <typename T>
void Maybe(const json& node, const std::string& key, T& field, const std::string& context) {
  if (node.contains(key) && !node.at(key).is_null()) field = Get<T>(node, key, context);
}

LearnerConfig ParseLearner(const json& node, const std::string& context) {
  LearnerConfig c;
  if (!node.is_object()) throw Error(ErrorKind::kConfig, context + " must be an object");
  Maybe(node, "n_trees", c.n_trees, context);
  Maybe(node, "max_depth", c.max_depth, context);
  Maybe(node, "min_leaf", c.min_leaf, context);
  Maybe(node, "feature_subsample", c.feature_subsample, context);
  Maybe(node, "bootstrap", c.bootstrap, context);
  return c;
}

json LearnerJson(const LearnerConfig& c) {
  return {{"n_trees", c.n_trees},
          {"max_depth", c.max_depth},
          {"min_leaf", c.min_leaf},
          {"feature_subsample", c.feature_subsample},
          {"bootstrap", c.bootstrap},
          {"seed", c.seed}};
}

std::string Resolve(const std::string& base_dir, const std::string& path) {
  if (path.empty()) return path;
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (fs::path(base_dir) / p).lexically_normal().string();
}

SolveMode ParseMode(const std::string& text) {
  if (text == "heuristic") return SolveMode::kHeuristic;
  if (text == "exact") return SolveMode::kExact;
  throw Error(ErrorKind::kConfig, "matching.mode must be 'heuristic' or 'exact', got '" + text + "'");
}

// Stream tags for the per-stage seeds.
enum SeedStream : std::uint64_t { kXray = 1, kMatch = 2, kCounterfactual = 3, kTree = 4 };

std::uint64_t StageSeed(std::uint64_t seed, SeedStream stream) {
  return SplitMix64(seed ^ (0x9e3779b97f4a7c15ULL * stream));
}

// ---------------------------------------------------------------------------
// Manifest

struct ArtifactEntry {
  std::string file;
  std::string digest;
};

struct StageEntry {
  std::string stage;
  std::vector<ArtifactEntry> artifacts;
};

struct Manifest {
  std::map<std::string, std::string> inputs;
  std::vector<StageEntry> stages;

  const StageEntry* Find(const std::string& stage) const {
    for (const auto& s : stages) {
      if (s.stage == stage) return &s;
    }
    return nullptr;
  }
};

fs::path ManifestPath(const std::string& dir) { return fs::path(dir) / "manifest.json"; }

Manifest LoadManifest(const std::string& dir) {
  Manifest m;
  if (!fs::exists(ManifestPath(dir))) return m;
  const json doc = ParseJson(ReadFile(ManifestPath(dir)), "manifest.json");
  try {
    for (const auto& [k, v] : doc.at("inputs").items()) m.inputs[k] = v.get<std::string>();
    for (const auto& node : doc.at("stages")) {
      StageEntry s;
      s.stage = node.at("stage").get<std::string>();
      for (const auto& a : node.at("artifacts")) {
        s.artifacts.push_back({a.at("file").get<std::string>(), a.at("fnv1a").get<std::string>()});
      }
      m.stages.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kIntegrity, std::string("manifest.json: ") + e.what());
  }
  return m;
}

void SaveManifest(const std::string& dir, const Manifest& m) {
  json doc;
  doc["inputs"] = m.inputs;
  json stages = json::array();
  for (const auto& s : m.stages) {
    json artifacts = json::array();
    for (const auto& a : s.artifacts) artifacts.push_back({{"file", a.file}, {"fnv1a", a.digest}});
    stages.push_back({{"stage", s.stage}, {"artifacts", artifacts}});
  }
  doc["stages"] = stages;
  WriteFile(ManifestPath(dir), doc.dump(2) + "\n");
}

int StageIndex(const std::string& stage) {
  const auto& order = StageOrder();
  const auto it = std::find(order.begin(), order.end(), stage);
  if (it == order.end()) throw Error(ErrorKind::kConfig, "unknown stage '" + stage + "'");
  return static_cast<int>(it - order.begin());
}

// ---------------------------------------------------------------------------
// Stage context

struct Context {
  const PipelineConfig& config;
  fs::path dir;
  Manifest manifest;
  PipelineState state;

  fs::path Path(const std::string& file) const { return dir / file; }

  // Checks `file` against the hash the manifest recorded for `stage`.
  fs::path Upstream(const std::string& stage, const std::string& file) const {
    const StageEntry* entry = manifest.Find(stage);
    const fs::path path = Path(file);
    if (entry == nullptr) {
      throw Error(ErrorKind::kIntegrity, "artifact '" + file + "' has no manifest entry; run stage '" +
                                             stage + "' first");
    }
    const auto it = std::find_if(entry->artifacts.begin(), entry->artifacts.end(),
                                 [&](const ArtifactEntry& a) { return a.file == file; });
    if (it == entry->artifacts.end()) {
      throw Error(ErrorKind::kIntegrity,
                  "artifact '" + file + "' missing from manifest entry of stage '" + stage + "'");
    }
    if (!fs::exists(path)) {
      throw Error(ErrorKind::kIo, "artifact '" + file + "' not found; rerun stage '" + stage + "'");
    }
    if (FileDigest(path) != it->digest) {
      throw Error(ErrorKind::kIntegrity, "artifact '" + file + "' hash mismatch against manifest");
    }
    return path;
  }

  // Replaces the manifest entry of `stage` and drops every later stage.
  void Record(const std::string& stage, const std::vector<std::string>& files) {
    const int index = StageIndex(stage);
    std::erase_if(manifest.stages,
                  [&](const StageEntry& s) { return StageIndex(s.stage) >= index; });
    StageEntry entry{stage, {}};
    for (const auto& f : files) entry.artifacts.push_back({f, FileDigest(Path(f))});
    manifest.stages.push_back(std::move(entry));
    SaveManifest(dir.string(), manifest);
  }
};

const CovariateSchema& LoadSchema(Context& ctx) {
  ctx.state.schema = ParseSchemaJson(ReadFile(ctx.Upstream("filter", "schema.json")));
  return ctx.state.schema;
}

void LoadTrial(Context& ctx) { ctx.state.trial = LoadTrialConfig(ctx.config.trial_path); }

std::vector<std::size_t> FeatureColumns(const PipelineConfig& config,
                                        const CovariateSchema& schema) {
  std::vector<std::size_t> cols;
  if (config.tree_features.empty()) {
    for (std::size_t j = 0; j < schema.size(); ++j) cols.push_back(j);
  } else {
    for (const auto& name : config.tree_features) cols.push_back(schema.Require(name));
  }
  return cols;
}

Matrix SelectColumns(const Matrix& x, const std::vector<std::size_t>& cols) {
  Matrix out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out.col(static_cast<Eigen::Index>(j)) = x.col(static_cast<Eigen::Index>(cols[j]));
  }
  return out;
}

std::vector<std::string> FeatureNames(const std::vector<std::size_t>& cols,
                                      const CovariateSchema& schema) {
  std::vector<std::string> names;
  for (auto c : cols) names.push_back(schema.names[c]);
  return names;
}

RewardMatrix LoadRewards(const fs::path& path) {
  std::istringstream in(ReadFile(path));
  return ReadRewardCsv(in, path.filename().string());
}

// Reward rows must follow the matched cohort row order.
void CheckRewardIds(const RewardMatrix& rewards, const Cohort& matched) {
  if (rewards.ids != matched.ids()) {
    throw Error(ErrorKind::kIntegrity, "reward ids do not match the matched cohort");
  }
}

// ---------------------------------------------------------------------------
// Stages

void StageFilter(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  CovariateSchema schema = config.schema ? *config.schema : InferSchema(config.cohort_path);
  const Cohort cohort = LoadCohort(config.cohort_path, schema);
  LoadTrial(ctx);
  ctx.state.trial.target.Validate(schema);
  std::vector<EligibilityRule> rules = ctx.state.trial.eligibility;
  rules.insert(rules.end(), config.extra_eligibility.begin(), config.extra_eligibility.end());
  EligibilityResult result = ApplyEligibility(cohort, rules);
  if (result.cohort.empty()) {
    throw Error(ErrorKind::kInsufficientData, "no patient passes the eligibility rules");
  }

  SaveCohort(ctx.Path("eligible.csv").string(), result.cohort);
  WriteFile(ctx.Path("schema.json"), SchemaToJson(schema));
  json report;
  report["n_input"] = cohort.size();
  report["n_eligible"] = result.cohort.size();
  json steps = json::array();
  std::size_t remaining = cohort.size();
  for (std::size_t k = 0; k < rules.size(); ++k) {
    remaining -= result.excluded_per_rule[k];
    json rule = {{"field", rules[k].field}, {"op", ToString(rules[k].op)}};
    rule["value"] = rules[k].op == Comparator::kInSet ? json(rules[k].values)
                                                      : json(rules[k].values.at(0));
    steps.push_back(
        {{"rule", rule}, {"excluded", result.excluded_per_rule[k]}, {"remaining", remaining}});
  }
  report["attrition"] = steps;
  WriteFile(ctx.Path("filter.json"), report.dump(2) + "\n");

  ctx.state.schema = schema;
  ctx.state.eligible = std::move(result.cohort);
  ctx.state.excluded_per_rule = std::move(result.excluded_per_rule);
  ctx.Record("filter", {"eligible.csv", "schema.json", "filter.json"});
}

void StageStratify(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  const CovariateSchema& schema = LoadSchema(ctx);
  LoadTrial(ctx);
  const Cohort eligible = LoadCohort(ctx.Upstream("filter", "eligible.csv").string(), schema);
  const TrialTarget& target = ctx.state.trial.target;

  const Cohort untreated = eligible.Subset(eligible.Arm(0));
  const LabeledSet labeled = BinarizeAtHorizon(untreated, target.horizon_months);
  if (labeled.rows.empty()) {
    throw Error(ErrorKind::kInsufficientData, "no labeled untreated patient for the risk model");
  }
  Matrix x(static_cast<Eigen::Index>(labeled.rows.size()), untreated.covariates().cols());
  Vector times(x.rows());
  for (std::size_t i = 0; i < labeled.rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(labeled.rows[i]);
    x.row(static_cast<Eigen::Index>(i)) = untreated.covariates().row(r);
    times(static_cast<Eigen::Index>(i)) = untreated.time()(r);
  }
  LearnerConfig lc = config.xray;
  lc.seed = StageSeed(config.seed, kXray);
  const Vector w = Vector::Ones(x.rows());
  FittedEnsemble model = Fit(x, labeled.labels, w, lc);
  Vector risk = PredictProb(model, eligible.covariates());

  // Out-of-fold risks for the untreated training rows, so both arms are scored
  // by a model that did not see them.
  const int folds = config.xray_folds;
  if (folds > 1 && static_cast<std::size_t>(folds) <= labeled.rows.size()) {
    const std::vector<std::size_t> untreated_rows = eligible.Arm(0);
    for (int f = 0; f < folds; ++f) {
      std::vector<Eigen::Index> train, test;
      for (std::size_t i = 0; i < labeled.rows.size(); ++i) {
        (static_cast<int>(i % static_cast<std::size_t>(folds)) == f ? test : train)
            .push_back(static_cast<Eigen::Index>(i));
      }
      Matrix xt(static_cast<Eigen::Index>(train.size()), x.cols());
      IntVector yt(static_cast<Eigen::Index>(train.size()));
      for (std::size_t i = 0; i < train.size(); ++i) {
        xt.row(static_cast<Eigen::Index>(i)) = x.row(train[i]);
        yt(static_cast<Eigen::Index>(i)) = labeled.labels(train[i]);
      }
      LearnerConfig fold_config = lc;
      fold_config.seed = SplitMix64(lc.seed + static_cast<std::uint64_t>(f) + 1);
      const FittedEnsemble fold_model =
          Fit(xt, yt, Vector::Ones(xt.rows()), fold_config, DegeneratePolicy::kConstant);
      Matrix xs(static_cast<Eigen::Index>(test.size()), x.cols());
      for (std::size_t i = 0; i < test.size(); ++i) {
        xs.row(static_cast<Eigen::Index>(i)) = x.row(test[i]);
      }
      const Vector p = PredictProb(fold_model, xs);
      for (std::size_t i = 0; i < test.size(); ++i) {
        const std::size_t untreated_row = labeled.rows[static_cast<std::size_t>(test[i])];
        risk(static_cast<Eigen::Index>(untreated_rows[untreated_row])) =
            p(static_cast<Eigen::Index>(i));
      }
    }
  }

  const std::vector<int> buckets = AssignBuckets(risk, config.bucket_boundaries);
  const std::size_t k = config.bucket_boundaries.size() - 1;
  QuotaReport quotas;
  if (config.quotas) {
    quotas.quotas = *config.quotas;
    if (quotas.quotas.size() != k) {
      throw Error(ErrorKind::kConfig, "quota list has " + std::to_string(quotas.quotas.size()) +
                                          " entries for " + std::to_string(k) + " buckets");
    }
    quotas.treated_per_bucket.assign(k, 0);
    quotas.untreated_per_bucket.assign(k, 0);
    for (std::size_t i = 0; i < eligible.size(); ++i) {
      auto& counts = eligible.treatment()(static_cast<Eigen::Index>(i)) == 1
                         ? quotas.treated_per_bucket
                         : quotas.untreated_per_bucket;
      ++counts[static_cast<std::size_t>(buckets[i])];
    }
    quotas.alpha = 0.0;
  } else {
    quotas = DefaultQuotas(risk, eligible.treatment(), buckets, k, 1.0 - target.mu0,
                           target.tolerance_outcome, config.alpha_max);
  }

  WriteFile(ctx.Path("xray_model.json"), EnsembleToJson(model));
  WriteWith(ctx.Path("risks.csv"), [&](std::ostream& out) {
    out << "id,risk,bucket\n";
    for (std::size_t i = 0; i < eligible.size(); ++i) {
      out << eligible.ids()[i] << ',' << FormatDouble(risk(static_cast<Eigen::Index>(i))) << ','
          << buckets[i] << '\n';
    }
  });
  json q;
  q["boundaries"] = config.bucket_boundaries;
  q["quotas"] = quotas.quotas;
  q["mode"] = config.quotas ? "manual" : "auto";
  if (!config.quotas) q["alpha"] = quotas.alpha;
  q["treated_per_bucket"] = quotas.treated_per_bucket;
  q["untreated_per_bucket"] = quotas.untreated_per_bucket;
  q["xray"] = {{"n_train", labeled.rows.size()},
               {"excluded_censored", labeled.excluded_censored},
               {"folds", folds},
               {"learner", LearnerJson(lc)}};
  WriteFile(ctx.Path("quotas.json"), q.dump(2) + "\n");

  ctx.state.eligible = eligible;
  ctx.state.xray = std::move(model);
  ctx.state.risks = risk;
  ctx.state.buckets = buckets;
  ctx.state.quotas = quotas;
  ctx.Record("stratify", {"xray_model.json", "risks.csv", "quotas.json"});
}

struct RiskTable {
  Vector risk;
  std::vector<int> bucket;
};

RiskTable LoadRisks(const fs::path& path, const Cohort& cohort) {
  std::istringstream in(ReadFile(path));
  std::string line;
  std::getline(in, line);
  if (line != "id,risk,bucket") throw Error(ErrorKind::kSchema, "risks.csv: unexpected header");
  RiskTable t;
  t.risk = Vector::Constant(static_cast<Eigen::Index>(cohort.size()), -1.0);
  t.bucket.assign(cohort.size(), -1);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string id, risk, bucket;
    std::getline(cells, id, ',');
    std::getline(cells, risk, ',');
    std::getline(cells, bucket, ',');
    const std::size_t r = cohort.RowOf(id);
    t.risk(static_cast<Eigen::Index>(r)) = ParseDouble(risk, "risks.csv risk");
    t.bucket[r] = static_cast<int>(ParseDouble(bucket, "risks.csv bucket"));
    ++rows;
  }
  if (rows != cohort.size()) throw Error(ErrorKind::kIntegrity, "risks.csv does not cover the cohort");
  return t;
}

void StageMatch(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  const CovariateSchema& schema = LoadSchema(ctx);
  LoadTrial(ctx);
  const Cohort eligible = LoadCohort(ctx.Upstream("filter", "eligible.csv").string(), schema);
  const RiskTable risks = LoadRisks(ctx.Upstream("stratify", "risks.csv"), eligible);
  const json q = ParseJson(ReadFile(ctx.Upstream("stratify", "quotas.json")), "quotas.json");
  const auto quotas = q.at("quotas").get<std::vector<int>>();

  MatchProblem problem = BuildMatchProblem(eligible, risks.risk, risks.bucket, quotas,
                                           ctx.state.trial.target, config.distance_covariates,
                                           config.weights);
  SolveOptions options = config.matching;
  options.seed = StageSeed(config.seed, kMatch);
  SolveStats stats;
  MatchSolution solution = Solve(problem, options, &stats);

  std::vector<std::size_t> rows;
  for (const auto& p : solution.pairs) {
    rows.push_back(p.treated);
    rows.push_back(p.untreated);
  }
  std::sort(rows.begin(), rows.end());
  const Cohort matched = eligible.Subset(rows);

  WriteWith(ctx.Path("matches.csv"),
            [&](std::ostream& out) { WriteMatchCsv(out, problem, solution); });
  json report = ParseJson(MatchReportJson(problem, solution, ctx.state.trial.target),
                          "match report");
  report["solver"] = {{"mode", options.mode == SolveMode::kExact ? "exact" : "heuristic"},
                      {"move_budget", options.move_budget},
                      {"restarts", options.restarts},
                      {"moves_evaluated", stats.moves_evaluated},
                      {"moves_accepted", stats.moves_accepted},
                      {"nodes_expanded", stats.nodes_expanded},
                      {"greedy_objective", stats.greedy_objective}};
  WriteFile(ctx.Path("match_report.json"), report.dump(2) + "\n");
  SaveCohort(ctx.Path("matched.csv").string(), matched);

  ctx.state.eligible = eligible;
  ctx.state.risks = risks.risk;
  ctx.state.buckets = risks.bucket;
  ctx.state.problem = std::move(problem);
  ctx.state.solution = std::move(solution);
  ctx.state.solve_stats = std::move(stats);
  ctx.state.matched = matched;
  ctx.Record("match", {"matches.csv", "match_report.json", "matched.csv"});
}

void StageTune(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  const CovariateSchema& schema = LoadSchema(ctx);
  LoadTrial(ctx);
  const Cohort matched = LoadCohort(ctx.Upstream("match", "matched.csv").string(), schema);
  const TrialTarget& target = ctx.state.trial.target;
  LearnerConfig lc = config.counterfactual;
  lc.seed = StageSeed(config.seed, kCounterfactual);

  RewardPair pair;
  std::vector<TuneResult> results;
  for (int arm : {0, 1}) {
    FittedEnsemble model;
    double rho = 1.0;
    if (std::find(config.tune_arms.begin(), config.tune_arms.end(), arm) !=
        config.tune_arms.end()) {
      TuneResult r = TuneWeight(matched, arm, arm == 0 ? target.mu0 : target.mu1,
                                target.horizon_months, lc, config.tuning);
      model = r.model;
      rho = r.rho;
      pair.warnings.insert(pair.warnings.end(), r.warnings.begin(), r.warnings.end());
      results.push_back(std::move(r));
    } else {
      model = FitArmModel(matched, arm, target.horizon_months, lc, 1.0, &pair.warnings);
    }
    (arm == 0 ? pair.model0 : pair.model1) = std::move(model);
    (arm == 0 ? pair.rho0 : pair.rho1) = rho;
  }
  pair.hbar0 = MeanReward(pair.model0, matched);
  pair.hbar1 = MeanReward(pair.model1, matched);
  const RewardMatrix rewards = BuildRewardMatrix(pair, matched, target.horizon_months);

  json doc;
  doc["rho"] = {pair.rho0, pair.rho1};
  doc["hbar"] = {pair.hbar0, pair.hbar1};
  doc["target"] = {target.mu0, target.mu1};
  doc["tuned_arms"] = config.tune_arms;
  doc["learner"] = LearnerJson(lc);
  doc["arms"] = ParseJson(TuneTraceJson(results), "tuning trace");
  doc["warnings"] = pair.warnings;
  WriteFile(ctx.Path("tuning.json"), doc.dump(2) + "\n");
  WriteFile(ctx.Path("cf_model0.json"), EnsembleToJson(pair.model0));
  WriteFile(ctx.Path("cf_model1.json"), EnsembleToJson(pair.model1));
  WriteWith(ctx.Path("rewards.csv"), [&](std::ostream& out) { WriteRewardCsv(out, rewards); });

  ctx.state.matched = matched;
  ctx.state.tuning = std::move(results);
  ctx.state.warnings.insert(ctx.state.warnings.end(), pair.warnings.begin(), pair.warnings.end());
  ctx.state.rewards_models = std::move(pair);
  ctx.state.rewards = rewards;
  ctx.Record("tune", {"tuning.json", "cf_model0.json", "cf_model1.json", "rewards.csv"});
}

void StageConstrain(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  const RewardMatrix rewards = LoadRewards(ctx.Upstream("tune", "rewards.csv"));
  const RewardMatrix constrained =
      config.constraint_factor
          ? ConstrainRewards(rewards, *config.constraint_factor, config.constraint_direction)
          : rewards;
  WriteWith(ctx.Path("rewards_constrained.csv"),
            [&](std::ostream& out) { WriteRewardCsv(out, constrained); });
  ctx.state.rewards = rewards;
  ctx.state.constrained = constrained;
  ctx.Record("constrain", {"rewards_constrained.csv"});
}

void StageTree(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  const CovariateSchema& schema = LoadSchema(ctx);
  const Cohort matched = LoadCohort(ctx.Upstream("match", "matched.csv").string(), schema);
  const RewardMatrix rewards = LoadRewards(ctx.Upstream("constrain", "rewards_constrained.csv"));
  CheckRewardIds(rewards, matched);
  const auto cols = FeatureColumns(config, schema);
  const auto names = FeatureNames(cols, schema);
  const Matrix x = SelectColumns(matched.covariates(), cols);

  std::vector<TreeCandidate> candidates;
  for (std::size_t g = 0; g < config.tree_grid.size(); ++g) {
    PolicyTreeConfig tc = config.tree_grid[g];
    tc.seed = SplitMix64(StageSeed(config.seed, kTree) + g);
    candidates.push_back({tc, FitPolicyTree(x, rewards.rewards, tc)});
  }
  const std::size_t selected = SelectTree(candidates, rewards.rewards, x);
  const PolicyTree& tree = candidates[selected].tree;

  json grid = json::array();
  for (std::size_t g = 0; g < candidates.size(); ++g) {
    const auto& c = candidates[g];
    grid.push_back({{"max_depth", c.config.max_depth},
                    {"min_leaf", c.config.min_leaf},
                    {"passes", c.config.passes},
                    {"depth", c.tree.Depth()},
                    {"leaves", c.tree.LeafCount()},
                    {"concordance", Concordance(c.tree, rewards.rewards, x)},
                    {"policy_value", PolicyValue(c.tree, x, rewards.rewards)},
                    {"selected", g == selected}});
  }
  WriteFile(ctx.Path("tree_candidates.json"), json{{"candidates", grid}}.dump(2) + "\n");
  WriteFile(ctx.Path("tree.json"), PolicyTreeToJson(tree, names));
  WriteFile(ctx.Path("tree.txt"), RenderPolicyTree(tree, names));

  ctx.state.matched = matched;
  ctx.state.constrained = rewards;
  ctx.state.candidates = std::move(candidates);
  ctx.state.selected = selected;
  ctx.state.tree = tree;
  ctx.Record("tree", {"tree_candidates.json", "tree.json", "tree.txt"});
}

std::optional<double> KmAt(const Cohort& cohort, const std::vector<std::size_t>& rows,
                           double horizon) {
  if (rows.empty()) return std::nullopt;
  const Cohort sub = cohort.Subset(rows);
  return KaplanMeier(sub.time(), sub.event()).SurvivalAt(horizon);
}

json OptionalJson(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void StageValidate(Context& ctx) {
  const PipelineConfig& config = ctx.config;
  const CovariateSchema& schema = LoadSchema(ctx);
  LoadTrial(ctx);
  const TrialTarget& target = ctx.state.trial.target;
  const Cohort eligible = LoadCohort(ctx.Upstream("filter", "eligible.csv").string(), schema);
  const RiskTable risks = LoadRisks(ctx.Upstream("stratify", "risks.csv"), eligible);
  const Cohort matched = LoadCohort(ctx.Upstream("match", "matched.csv").string(), schema);
  const RewardMatrix rewards = LoadRewards(ctx.Upstream("tune", "rewards.csv"));
  CheckRewardIds(rewards, matched);
  const PolicyTree tree = PolicyTreeFromJson(ReadFile(ctx.Upstream("tree", "tree.json")));
  const auto cols = FeatureColumns(config, schema);
  const Matrix x = SelectColumns(matched.covariates(), cols);
  if (tree.n_features != cols.size()) {
    throw Error(ErrorKind::kIntegrity, "tree.json feature count differs from tree_features");
  }

  const std::vector<LeafReport> leaves =
      SubgroupReport(tree, x, matched.treatment(), rewards.rewards, config.min_effect);
  std::set<int> recommended_leaves;
  for (const auto& l : leaves) {
    if (l.recommended) recommended_leaves.insert(l.leaf);
  }

  std::vector<GroupComparison> comparisons;
  std::vector<std::string> files;
  json group_sizes = json::array();
  auto compare = [&](const std::string& label, const Cohort& cohort) {
    const TreeAssignment a = Assign(tree, SelectColumns(cohort.covariates(), cols));
    for (const std::string group : {"recommended", "advised_against"}) {
      const bool want = group == "recommended";
      std::vector<std::size_t> arm_rows[2];
      for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (recommended_leaves.contains(a.leaf[i]) != want) continue;
        arm_rows[cohort.treatment()(static_cast<Eigen::Index>(i))].push_back(i);
      }
      GroupComparison c;
      c.cohort = label;
      c.group = group;
      c.n_control = arm_rows[0].size();
      c.n_treated = arm_rows[1].size();
      c.event_free_control = KmAt(cohort, arm_rows[0], target.horizon_months);
      c.event_free_treated = KmAt(cohort, arm_rows[1], target.horizon_months);
      group_sizes.push_back({{"cohort", label}, {"group", group}, {"n", c.n_control + c.n_treated}});
      for (int arm : {0, 1}) {
        const std::string file = "km_" + label + "_" + group + "_arm" + std::to_string(arm) + ".csv";
        WriteWith(ctx.Path(file), [&](std::ostream& out) {
          if (arm_rows[arm].empty()) {
            out << "time,survival,at_risk,events\n";
            return;
          }
          const Cohort sub = cohort.Subset(arm_rows[arm]);
          WriteKmCsv(out, KaplanMeier(sub.time(), sub.event()));
        });
        files.push_back(file);
      }
      if (!arm_rows[0].empty() && !arm_rows[1].empty()) {
        const Cohort s0 = cohort.Subset(arm_rows[0]);
        const Cohort s1 = cohort.Subset(arm_rows[1]);
        try {
          c.logrank = LogRank(s0.time(), s0.event(), s1.time(), s1.event());
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::kUndefined) throw;
        }
      }
      comparisons.push_back(std::move(c));
    }
  };
  compare("matched", matched);
  if (!config.validation_cohort_path.empty()) {
    const Cohort validation = LoadCohort(config.validation_cohort_path, schema);
    std::vector<EligibilityRule> rules = ctx.state.trial.eligibility;
    rules.insert(rules.end(), config.extra_eligibility.begin(), config.extra_eligibility.end());
    compare("validation", ApplyEligibility(validation, rules).cohort);
  }

  json subgroups = json::array();
  for (const auto& l : leaves) {
    subgroups.push_back({{"leaf", l.leaf},
                         {"treatment", l.treatment},
                         {"n", l.n},
                         {"n_control", l.n_control},
                         {"n_treated", l.n_treated},
                         {"mean_control", l.mean_control},
                         {"mean_treatment", l.mean_treatment},
                         {"effect", l.effect},
                         {"recommended", l.recommended},
                         {"flagged", l.flagged}});
  }
  WriteFile(ctx.Path("subgroups.json"),
            json{{"min_effect", config.min_effect}, {"leaves", subgroups}, {"groups", group_sizes}}
                    .dump(2) +
                "\n");

  json tests = json::array();
  for (const auto& c : comparisons) {
    json row = {{"cohort", c.cohort},
                {"group", c.group},
                {"n_control", c.n_control},
                {"n_treated", c.n_treated},
                {"event_free_control", OptionalJson(c.event_free_control)},
                {"event_free_treated", OptionalJson(c.event_free_treated)}};
    if (c.logrank) {
      row["statistic"] = c.logrank->statistic;
      row["p_value"] = c.logrank->p_value;
    } else {
      row["statistic"] = nullptr;
      row["p_value"] = nullptr;
    }
    tests.push_back(row);
  }
  WriteFile(ctx.Path("logrank.json"),
            json{{"horizon_months", target.horizon_months}, {"tests", tests}}.dump(2) + "\n");

  // Balance of prognostic scores between received arms within each leaf.
  const TreeAssignment assigned = Assign(tree, x);
  std::vector<std::pair<std::string, Vector>> scores;
  Vector baseline(static_cast<Eigen::Index>(matched.size()));
  for (std::size_t i = 0; i < matched.size(); ++i) {
    baseline(static_cast<Eigen::Index>(i)) =
        risks.risk(static_cast<Eigen::Index>(eligible.RowOf(matched.ids()[i])));
  }
  scores.emplace_back("baseline_risk", baseline);
  if (config.risk_scores) {
    const RiskScoreFields& f = *config.risk_scores;
    const std::size_t c_node = schema.Require(f.node_positive), c_dfi = schema.Require(f.dfi_months),
                      c_n = schema.Require(f.n_tumors), c_size = schema.Require(f.max_size_cm),
                      c_cea = schema.Require(f.cea_ng_ml), c_kras = schema.Require(f.kras_mutated);
    Vector crs(baseline.size()), game(baseline.size());
    for (Eigen::Index i = 0; i < baseline.size(); ++i) {
      auto v = [&](std::size_t c) { return matched.covariates()(i, static_cast<Eigen::Index>(c)); };
      RiskScoreInput in;
      in.node_positive = v(c_node) != 0.0;
      in.dfi_months = v(c_dfi);
      in.n_tumors = v(c_n);
      in.max_size_cm = v(c_size);
      in.cea_ng_ml = v(c_cea);
      in.kras_mutated = v(c_kras) != 0.0;
      crs(i) = CrsScore(in);
      game(i) = GameScore(in);
    }
    scores.emplace_back("crs", crs);
    scores.emplace_back("game", game);
  }
  json balance = json::array();
  for (const auto& [name, s] : scores) {
    for (const auto& row : NodeBalanceAudit(assigned.leaf, matched.treatment(), s)) {
      balance.push_back({{"score", name},
                         {"leaf", row.leaf},
                         {"n_control", row.n0},
                         {"n_treated", row.n1},
                         {"mean_control", std::isfinite(row.mean0) ? json(row.mean0) : json(nullptr)},
                         {"mean_treated", std::isfinite(row.mean1) ? json(row.mean1) : json(nullptr)},
                         {"p_value", OptionalJson(row.p_value)}});
    }
  }
  WriteFile(ctx.Path("balance.json"),
            json{{"test", kBalanceTestName}, {"rows", balance}}.dump(2) + "\n");

  ctx.state.matched = matched;
  ctx.state.rewards = rewards;
  ctx.state.tree = tree;
  ctx.state.subgroups = leaves;
  ctx.state.comparisons = std::move(comparisons);
  files.insert(files.begin(), {"subgroups.json", "logrank.json", "balance.json"});
  ctx.Record("validate", files);
}

using StageFn = void (*)(Context&);

StageFn StageFunction(const std::string& stage) {
  static const std::map<std::string, StageFn> table = {
      {"filter", StageFilter}, {"stratify", StageStratify},   {"match", StageMatch},
      {"tune", StageTune},     {"constrain", StageConstrain}, {"tree", StageTree},
      {"validate", StageValidate}};
  StageIndex(stage);
  return table.at(stage);
}

void RecordInputs(Context& ctx) {
  ctx.manifest.inputs.clear();
  ctx.manifest.inputs["cohort"] = FileDigest(ctx.config.cohort_path);
  ctx.manifest.inputs["trial"] = FileDigest(ctx.config.trial_path);
  if (!ctx.config.validation_cohort_path.empty()) {
    ctx.manifest.inputs["validation_cohort"] = FileDigest(ctx.config.validation_cohort_path);
  }
}

void Execute(Context& ctx, const std::string& stage) {
  try {
    StageFunction(stage)(ctx);
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + stage + "': " + e.what());
  }
}

void PrepareDir(const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error(ErrorKind::kIo, "cannot create output directory '" + out_dir + "'");
  }
}

// ---------------------------------------------------------------------------
// Report

std::string Cell(const json& v) {
  if (v.is_null()) return "NA";
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number()) return Format4(v.get<double>());
  return v.get<std::string>();
}

void WriteTable(const fs::path& path, const std::vector<std::string>& columns, const json& rows) {
  WriteWith(path, [&](std::ostream& out) {
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
    out << '\n';
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < columns.size(); ++c) {
        out << (c ? "," : "") << Cell(row.contains(columns[c]) ? row.at(columns[c]) : json());
      }
      out << '\n';
    }
  });
}

}  // namespace

const std::vector<std::string>& StageOrder() {
  static const std::vector<std::string> order = {"filter",    "stratify", "match",   "tune",
                                                 "constrain", "tree",     "validate"};
  return order;
}

CovariateSchema ParseSchemaJson(const std::string& json_text) {
  const json doc = ParseJson(json_text, "schema");
  CovariateSchema schema;
  try {
    for (const auto& c : doc.at("covariates")) {
      schema.names.push_back(c.at("name").get<std::string>());
      const std::string kind = c.value("kind", "continuous");
      if (kind == "binary") {
        schema.kinds.push_back(CovariateKind::kBinary);
      } else if (kind == "continuous") {
        schema.kinds.push_back(CovariateKind::kContinuous);
      } else {
        throw Error(ErrorKind::kConfig, "schema kind must be binary or continuous, got '" + kind + "'");
      }
      schema.units.push_back(c.value("unit", ""));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("schema: ") + e.what());
  }
  schema.Validate();
  return schema;
}

std::string SchemaToJson(const CovariateSchema& schema) {
  json covariates = json::array();
  for (std::size_t j = 0; j < schema.size(); ++j) {
    covariates.push_back(
        {{"name", schema.names[j]},
         {"kind", schema.kinds[j] == CovariateKind::kBinary ? "binary" : "continuous"},
         {"unit", schema.units[j]}});
  }
  return json{{"covariates", covariates}}.dump(2) + "\n";
}

void PipelineConfig::Validate() const {
  if (cohort_path.empty()) throw Error(ErrorKind::kConfig, "config: 'cohort' path is required");
  if (trial_path.empty()) throw Error(ErrorKind::kConfig, "config: 'trial' path is required");
  for (const auto& p : {cohort_path, trial_path, validation_cohort_path}) {
    if (!p.empty() && !fs::exists(p)) throw Error(ErrorKind::kIo, "input file '" + p + "' not found");
  }
  if (schema) schema->Validate();
  xray.Validate();
  counterfactual.Validate();
  tuning.Validate();
  BucketSpec{bucket_boundaries, {}}.Validate();
  if (!(alpha_max > 0.0 && alpha_max <= 1.0)) {
    throw Error(ErrorKind::kConfig, "alpha_max must lie in (0, 1]");
  }
  if (xray_folds < 0) throw Error(ErrorKind::kConfig, "xray_folds must be >= 0");
  if (matching.move_budget < 0 || matching.restarts < 1) {
    throw Error(ErrorKind::kConfig, "matching: move_budget >= 0 and restarts >= 1 required");
  }
  for (int arm : tune_arms) {
    if (arm != 0 && arm != 1) throw Error(ErrorKind::kConfig, "tune arms must be 0 or 1");
  }
  if (constraint_factor && !(*constraint_factor > 0.0 && *constraint_factor <= 1.0)) {
    throw Error(ErrorKind::kConfig, "constraint factor must lie in (0, 1]");
  }
  if (tree_grid.empty()) throw Error(ErrorKind::kConfig, "tree_grid must not be empty");
  for (const auto& t : tree_grid) t.Validate();
  if (!(min_effect >= 0.0)) throw Error(ErrorKind::kConfig, "min_effect must be >= 0");
}

PipelineConfig ParsePipelineConfig(const std::string& json_text, const std::string& base_dir) {
  const json doc = ParseJson(json_text, "pipeline config");
  const std::string ctx = "config";
  PipelineConfig c;
  c.cohort_path = Resolve(base_dir, Get<std::string>(doc, "cohort", ctx));
  c.trial_path = Resolve(base_dir, Get<std::string>(doc, "trial", ctx));
  if (doc.contains("validation_cohort") && !doc.at("validation_cohort").is_null()) {
    c.validation_cohort_path = Resolve(base_dir, Get<std::string>(doc, "validation_cohort", ctx));
  }
  if (doc.contains("schema") && !doc.at("schema").is_null()) {
    const json& s = doc.at("schema");
    c.schema = s.is_string() ? ParseSchemaJson(ReadFile(Resolve(base_dir, s.get<std::string>())))
                             : ParseSchemaJson(s.dump());
  }
  if (doc.contains("eligibility")) {
    // Same rule syntax as the trial config.
    const TrialConfig extra =
        ParseTrialConfig(json{{"horizon_months", 1}, {"mu0", 0}, {"mu1", 0},
                              {"eligibility", doc.at("eligibility")}}
                             .dump());
    c.extra_eligibility = extra.eligibility;
  }
  Maybe(doc, "seed", c.seed, ctx);
  if (doc.contains("xray")) c.xray = ParseLearner(doc.at("xray"), "xray");
  Maybe(doc, "xray_folds", c.xray_folds, ctx);
  Maybe(doc, "buckets", c.bucket_boundaries, ctx);
  if (doc.contains("quotas")) {
    const json& q = doc.at("quotas");
    if (q.is_string()) {
      if (q.get<std::string>() != "auto") throw Error(ErrorKind::kConfig, "quotas must be 'auto' or a list");
    } else {
      c.quotas = Get<std::vector<int>>(doc, "quotas", ctx);
    }
  }
  Maybe(doc, "alpha_max", c.alpha_max, ctx);
  if (doc.contains("matching")) {
    const json& m = doc.at("matching");
    const std::string mctx = "matching";
    if (m.contains("mode")) c.matching.mode = ParseMode(Get<std::string>(m, "mode", mctx));
    Maybe(m, "move_budget", c.matching.move_budget, mctx);
    Maybe(m, "restarts", c.matching.restarts, mctx);
    Maybe(m, "exact_size_cap", c.matching.exact_size_cap, mctx);
    Maybe(m, "distance_covariates", c.distance_covariates, mctx);
    if (m.contains("weights")) {
      const json& w = m.at("weights");
      Maybe(w, "outcome", c.weights.outcome, "matching.weights");
      Maybe(w, "covariate", c.weights.covariate, "matching.weights");
      Maybe(w, "distance", c.weights.distance, "matching.weights");
    }
  }
  if (doc.contains("counterfactual")) {
    const json& cf = doc.at("counterfactual");
    const std::string cctx = "counterfactual";
    if (cf.contains("learner")) c.counterfactual = ParseLearner(cf.at("learner"), "counterfactual.learner");
    Maybe(cf, "arms", c.tune_arms, cctx);
    Maybe(cf, "tol", c.tuning.tol, cctx);
    Maybe(cf, "rho_max", c.tuning.rho_max, cctx);
    Maybe(cf, "max_refits", c.tuning.max_refits, cctx);
    Maybe(cf, "grid_step", c.tuning.grid_step, cctx);
  }
  if (doc.contains("constraint") && !doc.at("constraint").is_null()) {
    const json& k = doc.at("constraint");
    c.constraint_factor = Get<double>(k, "factor", "constraint");
    if (k.contains("direction")) {
      c.constraint_direction =
          ParseConstraintDirection(Get<std::string>(k, "direction", "constraint"));
    }
  }
  if (doc.contains("tree_grid")) {
    c.tree_grid.clear();
    for (const auto& t : doc.at("tree_grid")) {
      PolicyTreeConfig tc;
      Maybe(t, "max_depth", tc.max_depth, "tree_grid");
      Maybe(t, "min_leaf", tc.min_leaf, "tree_grid");
      Maybe(t, "passes", tc.passes, "tree_grid");
      c.tree_grid.push_back(tc);
    }
  }
  Maybe(doc, "tree_features", c.tree_features, ctx);
  Maybe(doc, "min_effect", c.min_effect, ctx);
  if (doc.contains("risk_scores") && !doc.at("risk_scores").is_null()) {
    const json& r = doc.at("risk_scores");
    const std::string rctx = "risk_scores";
    RiskScoreFields f;
    f.node_positive = Get<std::string>(r, "node_positive", rctx);
    f.dfi_months = Get<std::string>(r, "dfi_months", rctx);
    f.n_tumors = Get<std::string>(r, "n_tumors", rctx);
    f.max_size_cm = Get<std::string>(r, "max_size_cm", rctx);
    f.cea_ng_ml = Get<std::string>(r, "cea_ng_ml", rctx);
    f.kras_mutated = Get<std::string>(r, "kras_mutated", rctx);
    c.risk_scores = f;
  }
  return c;
}

PipelineConfig LoadPipelineConfig(const std::string& path) {
  const fs::path p(path);
  return ParsePipelineConfig(ReadFile(p), p.parent_path().empty() ? "." : p.parent_path().string());
}

PipelineState RunPipeline(const PipelineConfig& config, const std::string& out_dir,
                          const std::string& until) {
  config.Validate();
  const int last = until.empty() ? static_cast<int>(StageOrder().size()) - 1 : StageIndex(until);
  PrepareDir(out_dir);
  Context ctx{config, out_dir, {}, {}};
  RecordInputs(ctx);
  SaveManifest(out_dir, ctx.manifest);
  for (int s = 0; s <= last; ++s) Execute(ctx, StageOrder()[static_cast<std::size_t>(s)]);
  return std::move(ctx.state);
}

void RunStage(const PipelineConfig& config, const std::string& out_dir, const std::string& stage) {
  config.Validate();
  StageIndex(stage);
  PrepareDir(out_dir);
  Context ctx{config, out_dir, LoadManifest(out_dir), {}};
  if (stage == "filter") {
    RecordInputs(ctx);
  } else {
    for (const auto& [name, path] :
         std::map<std::string, std::string>{{"cohort", config.cohort_path},
                                            {"trial", config.trial_path}}) {
      const auto it = ctx.manifest.inputs.find(name);
      if (it != ctx.manifest.inputs.end() && it->second != FileDigest(path)) {
        throw Error(ErrorKind::kIntegrity,
                    "input '" + name + "' changed since the filter stage; rerun from filter");
      }
    }
  }
  Execute(ctx, stage);
}

void WriteReport(const std::string& out_dir) {
  const fs::path dir(out_dir);
  if (!fs::exists(ManifestPath(out_dir))) {
    std::string all;
    for (const auto& s : StageOrder()) all += (all.empty() ? "" : ", ") + s;
    throw Error(ErrorKind::kIo, "no manifest.json in '" + out_dir + "'; rerun stages: " + all);
  }
  const Manifest m = LoadManifest(out_dir);
  // Report sections and the stages their artifacts come from.
  std::vector<std::string> missing;
  for (const auto& s : m.stages) {
    for (const auto& a : s.artifacts) {
      if (!fs::exists(dir / a.file) || FileDigest(dir / a.file) != a.digest) {
        if (std::find(missing.begin(), missing.end(), s.stage) == missing.end()) {
          missing.push_back(s.stage);
        }
      }
    }
  }
  if (!missing.empty()) {
    std::string list;
    // Downstream stages depend on any rerun stage.
    const int first = StageIndex(missing.front());
    for (int k = first; k < static_cast<int>(StageOrder().size()); ++k) {
      if (m.Find(StageOrder()[static_cast<std::size_t>(k)])) {
        list += (list.empty() ? "" : ", ") + StageOrder()[static_cast<std::size_t>(k)];
      }
    }
    throw Error(ErrorKind::kIo, "missing or modified artifacts; rerun stages: " + list);
  }
  if (!m.Find("match")) {
    throw Error(ErrorKind::kIo, "report needs at least the match stage; rerun stages: filter, stratify, match");
  }

  const fs::path report = dir / "report";
  PrepareDir(report.string());
  json sections = json::array();

  {
    const json doc = ParseJson(ReadFile(dir / "match_report.json"), "match_report.json");
    json rows = json::array();
    for (const auto& r : doc.at("achieved_vs_target")) {
      json row = r;
      const double diff = r.at("achieved").get<double>() - r.at("target").get<double>();
      row["difference"] = diff;
      row["within_tolerance"] = std::abs(diff) <= r.at("tolerance").get<double>();
      rows.push_back(row);
    }
    WriteTable(report / "achieved_vs_target.csv",
               {"quantity", "arm", "target", "achieved", "difference", "tolerance",
                "within_tolerance"},
               rows);
    sections.push_back("achieved_vs_target.csv");
  }
  if (m.Find("tune")) {
    const json doc = ParseJson(ReadFile(dir / "tuning.json"), "tuning.json");
    json rows = json::array();
    for (const auto& arm : doc.at("arms")) {
      int step = 0;
      for (const auto& s : arm.at("trace")) {
        json row = s;
        row["arm"] = arm.at("arm");
        row["step"] = step++;
        row["target"] = arm.at("target");
        row["status"] = arm.at("status");
        rows.push_back(row);
      }
    }
    WriteTable(report / "tuning_trace.csv",
               {"arm", "step", "phase", "rho", "hbar", "target", "residual", "status"}, rows);
    json summary = json::array();
    for (int a : {0, 1}) {
      summary.push_back({{"arm", a},
                         {"rho", doc.at("rho")[static_cast<std::size_t>(a)]},
                         {"hbar", doc.at("hbar")[static_cast<std::size_t>(a)]},
                         {"target", doc.at("target")[static_cast<std::size_t>(a)]}});
    }
    WriteTable(report / "tuning_summary.csv", {"arm", "rho", "hbar", "target"}, summary);
    sections.push_back("tuning_trace.csv");
    sections.push_back("tuning_summary.csv");
  }
  if (m.Find("tree")) {
    fs::copy_file(dir / "tree.json", report / "tree.json", fs::copy_options::overwrite_existing);
    fs::copy_file(dir / "tree.txt", report / "tree.txt", fs::copy_options::overwrite_existing);
    const json doc = ParseJson(ReadFile(dir / "tree_candidates.json"), "tree_candidates.json");
    WriteTable(report / "tree_candidates.csv",
               {"max_depth", "min_leaf", "passes", "depth", "leaves", "concordance",
                "policy_value", "selected"},
               doc.at("candidates"));
    sections.push_back("tree.json");
    sections.push_back("tree.txt");
    sections.push_back("tree_candidates.csv");
  }
  if (m.Find("validate")) {
    const json sub = ParseJson(ReadFile(dir / "subgroups.json"), "subgroups.json");
    WriteTable(report / "subgroups.csv",
               {"leaf", "treatment", "n", "n_control", "n_treated", "mean_control",
                "mean_treatment", "effect", "recommended", "flagged"},
               sub.at("leaves"));
    WriteTable(report / "groups.csv", {"cohort", "group", "n"}, sub.at("groups"));
    const json lr = ParseJson(ReadFile(dir / "logrank.json"), "logrank.json");
    WriteTable(report / "logrank.csv",
               {"cohort", "group", "n_control", "n_treated", "event_free_control",
                "event_free_treated", "statistic", "p_value"},
               lr.at("tests"));
    const json bal = ParseJson(ReadFile(dir / "balance.json"), "balance.json");
    WriteTable(report / "balance.csv",
               {"score", "leaf", "n_control", "n_treated", "mean_control", "mean_treated",
                "p_value"},
               bal.at("rows"));
    for (const auto& name : {"subgroups.csv", "groups.csv", "logrank.csv", "balance.csv"}) {
      sections.push_back(name);
    }
    for (const auto& a : m.Find("validate")->artifacts) {
      if (a.file.starts_with("km_")) {
        fs::copy_file(dir / a.file, report / a.file, fs::copy_options::overwrite_existing);
        sections.push_back(a.file);
      }
    }
  }
  json stages = json::array();
  for (const auto& s : m.stages) stages.push_back(s.stage);
  WriteFile(report / "index.json",
            json{{"stages", stages}, {"files", sections}}.dump(2) + "\n");
}

int ExitCode(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kInfeasibleTarget:
    case ErrorKind::kInstanceTooLarge:
      return 4;
    case ErrorKind::kUnreachableTarget:
      return 5;
    default:
      return 3;
  }
}

}  // namespace trialemu
