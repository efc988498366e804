#include "trialemu/cohort.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace trialemu;

namespace {

CovariateSchema AgeSize() {
  CovariateSchema s;
  s.names = {"age", "node_positive"};
  s.kinds = {CovariateKind::kContinuous, CovariateKind::kBinary};
  s.units = {"years", ""};
  return s;
}

Cohort Read(const std::string& text) {
  std::istringstream in(text);
  return ReadCohort(in, AgeSize());
}

const char* kThree =
    "id,treatment,event,time,age,node_positive\n"
    "p1,1,0,72,55,1\n"
    "p2,0,1,30,76,0\n"
    "p3,1,0,40,20,0\n";

}  // namespace

TEST(LoadCohort, PreservesRowsAndOrder) {
  const Cohort c = Read(kThree);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.ids()[0], "p1");
  EXPECT_EQ(c.ids()[2], "p3");
  EXPECT_EQ(c.covariates()(1, 0), 76.0);
  EXPECT_EQ(c.treatment()(1), 0);
  EXPECT_EQ(c.time()(0), 72.0);
}

TEST(LoadCohort, HeaderOnlyIsEmpty) {
  EXPECT_TRUE(Read("id,treatment,event,time,age,node_positive\n").empty());
}

TEST(LoadCohort, ColumnOrderFollowsHeader) {
  const Cohort c = Read("age,id,time,event,node_positive,treatment\n60,a,12,1,0,1\n");
  EXPECT_EQ(c.covariates()(0, 0), 60.0);
  EXPECT_EQ(c.treatment()(0), 1);
}

TEST(LoadCohort, ParseErrorCitesRow) {
  try {
    Read("id,treatment,event,time,age,node_positive\np1,1,0,72,55,1\np2,0,1,abc,76,0\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(LoadCohort, MissingColumnNamed) {
  try {
    Read("id,treatment,event,time,age\np1,1,0,72,55\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSchema);
    EXPECT_NE(std::string(e.what()).find("node_positive"), std::string::npos);
  }
}

TEST(LoadCohort, DuplicateIdRejected) {
  try {
    Read("id,treatment,event,time,age,node_positive\np1,1,0,72,55,1\np1,0,1,3,76,0\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIntegrity);
  }
}

TEST(LoadCohort, RejectsMissingValuesAndBadFlags) {
  EXPECT_THROW(Read("id,treatment,event,time,age,node_positive\np1,1,0,72,,1\n"), Error);
  EXPECT_THROW(Read("id,treatment,event,time,age,node_positive\np1,2,0,72,5,1\n"), Error);
  EXPECT_THROW(Read("id,treatment,event,time,age,node_positive\np1,1,0,-1,5,1\n"), Error);
  EXPECT_THROW(Read("id,treatment,event,time,age,node_positive\np1,1,0,1,5,0.5\n"), Error);
}

TEST(LoadCohort, RoundTrip) {
  const Cohort a = Read(
      "id,treatment,event,time,age,node_positive\n"
      "x,1,0,72.125,55.3333333333333357,1\n"
      "y,0,1,0.1,0.30000000000000004,0\n");
  std::ostringstream out;
  WriteCohort(out, a);
  const Cohort b = Read(out.str());
  EXPECT_EQ(a.ids(), b.ids());
  EXPECT_EQ(a.covariates(), b.covariates());
  EXPECT_EQ(a.treatment(), b.treatment());
  EXPECT_EQ(a.event(), b.event());
  EXPECT_EQ(a.time(), b.time());
}

TEST(Eligibility, AgeBoundsClosed) {
  const Cohort c = Read(kThree);
  const std::vector<EligibilityRule> rules{{"age", Comparator::kGreaterEqual, {20}},
                                           {"age", Comparator::kLessEqual, {75}}};
  const auto r = ApplyEligibility(c, rules);
  ASSERT_EQ(r.cohort.size(), 2u);
  EXPECT_EQ(r.cohort.ids()[0], "p1");
  EXPECT_EQ(r.cohort.ids()[1], "p3");
  EXPECT_EQ(r.excluded_per_rule, (std::vector<std::size_t>{0, 1}));
}

TEST(Eligibility, EmptyRulesIdentityAndIdempotent) {
  const Cohort c = Read(kThree);
  EXPECT_EQ(ApplyEligibility(c, {}).cohort.ids(), c.ids());
  const std::vector<EligibilityRule> rules{{"node_positive", Comparator::kInSet, {0}},
                                           {"time", Comparator::kGreater, {35}}};
  const Cohort once = ApplyEligibility(c, rules).cohort;
  const Cohort twice = ApplyEligibility(once, rules).cohort;
  EXPECT_EQ(once.ids(), twice.ids());
  EXPECT_EQ(once.ids(), std::vector<std::string>{"p3"});
}

TEST(Eligibility, UnknownColumn) {
  try {
    ApplyEligibility(Read(kThree), {{"weight", Comparator::kLess, {3}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSchema);
  }
}

TEST(Binarize, HorizonRules) {
  const Cohort c = Read(
      "id,treatment,event,time,age,node_positive\n"
      "a,0,1,30,50,0\n"
      "b,0,0,72,50,0\n"
      "c,0,0,40,50,0\n"
      "d,0,1,60,50,0\n"
      "e,0,1,61,50,0\n");
  const LabeledSet s = BinarizeAtHorizon(c, 60);
  EXPECT_EQ(s.rows, (std::vector<std::size_t>{0, 1, 3, 4}));
  EXPECT_EQ(s.labels(0), 1);
  EXPECT_EQ(s.labels(1), 0);
  EXPECT_EQ(s.labels(2), 1);
  EXPECT_EQ(s.labels(3), 0);
  EXPECT_EQ(s.excluded_censored, 1u);
  EXPECT_EQ(s.rows.size() + s.excluded_censored, c.size());
}

TEST(TrialConfig, ParseAndValidate) {
  const TrialConfig cfg = ParseTrialConfig(R"({
    "horizon_months": 60, "mu0": 0.387, "mu1": 0.495,
    "covariate_targets": {"node_positive": {"arm0": 0.4, "arm1": 0.45}},
    "eligibility": [{"field": "age", "op": ">=", "value": 20},
                    {"field": "node_positive", "op": "in", "value": [0, 1]}]
  })");
  EXPECT_DOUBLE_EQ(cfg.target.mu0, 0.387);
  EXPECT_EQ(cfg.eligibility.size(), 2u);
  EXPECT_EQ(cfg.eligibility[1].op, Comparator::kInSet);
  cfg.target.Validate(AgeSize());
  const TrialConfig again = ParseTrialConfig(TrialConfigToJson(cfg));
  EXPECT_EQ(again.target.covariate_targets.at("node_positive").arm1, 0.45);

  TrialTarget bad = cfg.target;
  bad.covariate_targets["cea"] = {};
  EXPECT_THROW(bad.Validate(AgeSize()), Error);
  bad = cfg.target;
  bad.mu1 = 1.2;
  EXPECT_THROW(bad.Validate(AgeSize()), Error);
}
