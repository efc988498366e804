#include "trialemu/cohort.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace trialemu {

namespace {

std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  for (auto& f : fields) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
    while (!f.empty() && f.front() == ' ') f.erase(f.begin());
  }
  return fields;
}

bool IsBlank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\r'; });
}

int ParseFlag(const std::string& cell, const std::string& what, std::size_t row) {
  const double v = ParseDouble(cell, "row " + std::to_string(row) + " column " + what);
  if (v != 0.0 && v != 1.0) {
    throw Error(ErrorKind::kParse,
                "row " + std::to_string(row) + " column " + what + ": expected 0 or 1");
  }
  return static_cast<int>(v);
}

}  // namespace

std::optional<std::size_t> CovariateSchema::IndexOf(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t CovariateSchema::Require(std::string_view name) const {
  if (auto idx = IndexOf(name)) return *idx;
  throw Error(ErrorKind::kSchema, "unknown covariate '" + std::string(name) + "'");
}

void CovariateSchema::Validate() const {
  if (kinds.size() != names.size() || units.size() != names.size()) {
    throw Error(ErrorKind::kSchema, "schema field lengths differ");
  }
  std::set<std::string> seen;
  for (const auto& name : names) {
    if (name.empty()) throw Error(ErrorKind::kSchema, "empty covariate name");
    for (const char* reserved : kReservedColumns) {
      if (name == reserved) {
        throw Error(ErrorKind::kSchema, "covariate name '" + name + "' is reserved");
      }
    }
    if (!seen.insert(name).second) {
      throw Error(ErrorKind::kSchema, "duplicate covariate name '" + name + "'");
    }
  }
}

CovariateSchema CovariateSchema::Continuous(std::vector<std::string> names) {
  CovariateSchema schema;
  schema.kinds.assign(names.size(), CovariateKind::kContinuous);
  schema.units.assign(names.size(), "");
  schema.names = std::move(names);
  return schema;
}

Cohort::Cohort(CovariateSchema schema, const std::vector<Patient>& patients)
    : schema_(std::move(schema)) {
  const auto n = static_cast<Eigen::Index>(patients.size());
  const auto l = static_cast<Eigen::Index>(schema_.size());
  covariates_.resize(n, l);
  treatment_.resize(n);
  event_.resize(n);
  time_.resize(n);
  ids_.reserve(patients.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Patient& p = patients[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(p.covariates.size()) != l) {
      throw Error(ErrorKind::kSchema, "patient '" + p.id + "' has " +
                                          std::to_string(p.covariates.size()) +
                                          " covariates, schema has " + std::to_string(l));
    }
    ids_.push_back(p.id);
    for (Eigen::Index j = 0; j < l; ++j) covariates_(i, j) = p.covariates[static_cast<std::size_t>(j)];
    treatment_(i) = p.treatment;
    event_(i) = p.event;
    time_(i) = p.time;
  }
  Validate();
}

Cohort::Cohort(CovariateSchema schema, std::vector<std::string> ids, Matrix covariates,
               IntVector treatment, IntVector event, Vector time)
    : schema_(std::move(schema)),
      ids_(std::move(ids)),
      covariates_(std::move(covariates)),
      treatment_(std::move(treatment)),
      event_(std::move(event)),
      time_(std::move(time)) {
  Validate();
}

void Cohort::Validate() {
  schema_.Validate();
  const auto n = static_cast<Eigen::Index>(ids_.size());
  if (covariates_.rows() != n || treatment_.size() != n || event_.size() != n ||
      time_.size() != n) {
    throw Error(ErrorKind::kSchema, "cohort column lengths differ");
  }
  if (covariates_.cols() != static_cast<Eigen::Index>(schema_.size())) {
    throw Error(ErrorKind::kSchema, "covariate matrix width does not match schema");
  }
  auto& index = row_of_;
  index.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::string& id = ids_[static_cast<std::size_t>(i)];
    if (!index.emplace(id, static_cast<std::size_t>(i)).second) {
      throw Error(ErrorKind::kIntegrity, "duplicate patient id '" + id + "'");
    }
    if (treatment_(i) != 0 && treatment_(i) != 1) {
      throw Error(ErrorKind::kIntegrity, "patient '" + id + "': treatment must be 0 or 1");
    }
    if (event_(i) != 0 && event_(i) != 1) {
      throw Error(ErrorKind::kIntegrity, "patient '" + id + "': event must be 0 or 1");
    }
    if (!(time_(i) >= 0.0)) {
      throw Error(ErrorKind::kIntegrity, "patient '" + id + "': time must be >= 0");
    }
    for (Eigen::Index j = 0; j < covariates_.cols(); ++j) {
      const double v = covariates_(i, j);
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::kIntegrity, "patient '" + id + "': missing value for '" +
                                               schema_.names[static_cast<std::size_t>(j)] + "'");
      }
      if (schema_.kinds[static_cast<std::size_t>(j)] == CovariateKind::kBinary && v != 0.0 &&
          v != 1.0) {
        throw Error(ErrorKind::kIntegrity,
                    "patient '" + id + "': binary covariate '" +
                        schema_.names[static_cast<std::size_t>(j)] + "' must be 0 or 1");
      }
    }
  }
}

Patient Cohort::patient(std::size_t row) const {
  const auto i = static_cast<Eigen::Index>(row);
  Patient p;
  p.id = ids_.at(row);
  p.covariates.resize(schema_.size());
  for (Eigen::Index j = 0; j < covariates_.cols(); ++j) {
    p.covariates[static_cast<std::size_t>(j)] = covariates_(i, j);
  }
  p.treatment = treatment_(i);
  p.event = event_(i);
  p.time = time_(i);
  return p;
}

Cohort Cohort::Subset(const std::vector<std::size_t>& rows) const {
  const auto n = static_cast<Eigen::Index>(rows.size());
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  Matrix x(n, covariates_.cols());
  IntVector t(n), e(n);
  Vector tm(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(k)]);
    ids.push_back(ids_.at(static_cast<std::size_t>(i)));
    x.row(k) = covariates_.row(i);
    t(k) = treatment_(i);
    e(k) = event_(i);
    tm(k) = time_(i);
  }
  return Cohort(schema_, std::move(ids), std::move(x), std::move(t), std::move(e), std::move(tm));
}

std::vector<std::size_t> Cohort::Arm(int treatment) const {
  std::vector<std::size_t> rows;
  for (Eigen::Index i = 0; i < treatment_.size(); ++i) {
    if (treatment_(i) == treatment) rows.push_back(static_cast<std::size_t>(i));
  }
  return rows;
}

std::size_t Cohort::RowOf(const std::string& id) const {
  auto it = row_of_.find(id);
  if (it == row_of_.end()) throw Error(ErrorKind::kSchema, "unknown patient id '" + id + "'");
  return it->second;
}

Cohort ReadCohort(std::istream& in, const CovariateSchema& schema, const std::string& source) {
  schema.Validate();
  std::string line;
  if (!std::getline(in, line)) {
    throw Error(ErrorKind::kParse, source + ": missing header row");
  }
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = SplitCsvLine(line);

  std::map<std::string, std::size_t> column_of;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!column_of.emplace(header[c], c).second) {
      throw Error(ErrorKind::kSchema, source + ": duplicate column '" + header[c] + "'");
    }
  }
  auto require = [&](const std::string& name) {
    auto it = column_of.find(name);
    if (it == column_of.end()) {
      throw Error(ErrorKind::kSchema, source + ": missing column '" + name + "'");
    }
    return it->second;
  };
  const std::size_t id_col = require("id");
  const std::size_t treat_col = require("treatment");
  const std::size_t event_col = require("event");
  const std::size_t time_col = require("time");
  std::vector<std::size_t> cov_cols;
  for (const auto& name : schema.names) cov_cols.push_back(require(name));
  if (header.size() != 4 + schema.size()) {
    for (const auto& h : header) {
      if (h != "id" && h != "treatment" && h != "event" && h != "time" && !schema.IndexOf(h)) {
        throw Error(ErrorKind::kSchema, source + ": unexpected column '" + h + "'");
      }
    }
  }

  std::vector<Patient> patients;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (IsBlank(line)) continue;
    ++row;
    const auto cells = SplitCsvLine(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::kParse, source + ": row " + std::to_string(row) + " has " +
                                         std::to_string(cells.size()) + " fields, expected " +
                                         std::to_string(header.size()));
    }
    Patient p;
    p.id = cells[id_col];
    if (p.id.empty()) {
      throw Error(ErrorKind::kParse, source + ": row " + std::to_string(row) + " has empty id");
    }
    const std::string where = source + ": row " + std::to_string(row);
    p.treatment = ParseFlag(cells[treat_col], "treatment", row);
    p.event = ParseFlag(cells[event_col], "event", row);
    p.time = ParseDouble(cells[time_col], where + " column time");
    if (p.time < 0.0) throw Error(ErrorKind::kParse, where + " column time: negative time");
    p.covariates.reserve(schema.size());
    for (std::size_t j = 0; j < schema.size(); ++j) {
      const std::string& cell = cells[cov_cols[j]];
      if (cell.empty()) {
        throw Error(ErrorKind::kParse, where + " column " + schema.names[j] + ": missing value");
      }
      p.covariates.push_back(ParseDouble(cell, where + " column " + schema.names[j]));
    }
    patients.push_back(std::move(p));
  }
  return Cohort(schema, patients);
}

Cohort LoadCohort(const std::string& path, const CovariateSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  return ReadCohort(in, schema, path);
}

void WriteCohort(std::ostream& out, const Cohort& cohort) {
  out << "id,treatment,event,time";
  for (const auto& name : cohort.schema().names) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << cohort.ids()[i] << ',' << cohort.treatment()(r) << ',' << cohort.event()(r) << ','
        << FormatDouble(cohort.time()(r));
    for (Eigen::Index j = 0; j < cohort.covariates().cols(); ++j) {
      out << ',' << FormatDouble(cohort.covariates()(r, j));
    }
    out << '\n';
  }
}

void SaveCohort(const std::string& path, const Cohort& cohort) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path + "'");
  WriteCohort(out, cohort);
}

CovariateSchema InferSchema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::kParse, path + ": missing header row");
  const auto header = SplitCsvLine(line);
  std::vector<std::size_t> cols;
  CovariateSchema schema;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h == "id" || h == "treatment" || h == "event" || h == "time") continue;
    schema.names.push_back(h);
    cols.push_back(c);
  }
  std::vector<bool> binary(cols.size(), true);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (IsBlank(line)) continue;
    ++row;
    const auto cells = SplitCsvLine(line);
    for (std::size_t k = 0; k < cols.size(); ++k) {
      if (cols[k] >= cells.size()) continue;
      if (cells[cols[k]] != "0" && cells[cols[k]] != "1") binary[k] = false;
    }
  }
  for (std::size_t k = 0; k < cols.size(); ++k) {
    schema.kinds.push_back(row > 0 && binary[k] ? CovariateKind::kBinary
                                                : CovariateKind::kContinuous);
    schema.units.emplace_back();
  }
  schema.Validate();
  return schema;
}

void TrialTarget::Validate(const CovariateSchema& schema) const {
  if (!(horizon_months > 0.0)) throw Error(ErrorKind::kConfig, "horizon_months must be > 0");
  if (!(mu0 >= 0.0 && mu0 <= 1.0)) throw Error(ErrorKind::kConfig, "mu0 must lie in [0,1]");
  if (!(mu1 >= 0.0 && mu1 <= 1.0)) throw Error(ErrorKind::kConfig, "mu1 must lie in [0,1]");
  if (!(tolerance_outcome >= 0.0 && tolerance_outcome <= 1.0)) {
    throw Error(ErrorKind::kConfig, "tolerance_outcome must lie in [0,1]");
  }
  if (!(tolerance_covariate >= 0.0)) {
    throw Error(ErrorKind::kConfig, "tolerance_covariate must be >= 0");
  }
  for (const auto& [name, targets] : covariate_targets) {
    if (!schema.IndexOf(name)) {
      throw Error(ErrorKind::kSchema, "covariate target for unknown column '" + name + "'");
    }
  }
}

Comparator ParseComparator(std::string_view text) {
  if (text == "<") return Comparator::kLess;
  if (text == "<=" || text == "≤") return Comparator::kLessEqual;
  if (text == "=" || text == "==") return Comparator::kEqual;
  if (text == ">=" || text == "≥") return Comparator::kGreaterEqual;
  if (text == ">") return Comparator::kGreater;
  if (text == "in") return Comparator::kInSet;
  throw Error(ErrorKind::kConfig, "unknown comparator '" + std::string(text) + "'");
}

std::string ToString(Comparator op) {
  switch (op) {
    case Comparator::kLess: return "<";
    case Comparator::kLessEqual: return "<=";
    case Comparator::kEqual: return "=";
    case Comparator::kGreaterEqual: return ">=";
    case Comparator::kGreater: return ">";
    case Comparator::kInSet: return "in";
  }
  return "?";
}

bool EligibilityRule::Admits(double value) const {
  if (op == Comparator::kInSet) {
    return std::find(values.begin(), values.end(), value) != values.end();
  }
  const double threshold = values.at(0);
  switch (op) {
    case Comparator::kLess: return value < threshold;
    case Comparator::kLessEqual: return value <= threshold;
    case Comparator::kEqual: return value == threshold;
    case Comparator::kGreaterEqual: return value >= threshold;
    case Comparator::kGreater: return value > threshold;
    case Comparator::kInSet: break;
  }
  return false;
}

EligibilityResult ApplyEligibility(const Cohort& cohort, const std::vector<EligibilityRule>& rules) {
  // Resolve every column up front so an unknown field fails before filtering.
  std::vector<std::optional<std::size_t>> columns;
  for (const auto& rule : rules) {
    if (rule.values.empty() || (rule.op != Comparator::kInSet && rule.values.size() != 1)) {
      throw Error(ErrorKind::kConfig, "eligibility rule on '" + rule.field +
                                          "' needs exactly one value (or a set for 'in')");
    }
    if (rule.field == "time") {
      columns.push_back(std::nullopt);
    } else {
      columns.push_back(cohort.schema().Require(rule.field));
    }
  }
  EligibilityResult result;
  result.excluded_per_rule.assign(rules.size(), 0);
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    bool admitted = true;
    for (std::size_t k = 0; k < rules.size() && admitted; ++k) {
      const double v = columns[k] ? cohort.covariates()(r, static_cast<Eigen::Index>(*columns[k]))
                                  : cohort.time()(r);
      if (!rules[k].Admits(v)) {
        ++result.excluded_per_rule[k];
        admitted = false;
      }
    }
    if (admitted) kept.push_back(i);
  }
  result.cohort = cohort.Subset(kept);
  return result;
}

LabeledSet BinarizeAtHorizon(const Cohort& cohort, double horizon_months) {
  if (!(horizon_months > 0.0)) throw Error(ErrorKind::kConfig, "horizon must be > 0");
  LabeledSet out;
  std::vector<int> labels;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double t = cohort.time()(r);
    if (cohort.event()(r) == 1 && t <= horizon_months) {
      out.rows.push_back(i);
      labels.push_back(1);
    } else if (t > horizon_months) {
      out.rows.push_back(i);
      labels.push_back(0);
    } else {
      ++out.excluded_censored;
    }
  }
  out.labels = Eigen::Map<IntVector>(labels.data(), static_cast<Eigen::Index>(labels.size()));
  return out;
}

namespace {

using nlohmann::json;

double ReadNumber(const json& node, const std::string& key) {
  if (!node.contains(key)) throw Error(ErrorKind::kConfig, "missing key '" + key + "'");
  if (!node.at(key).is_number()) {
    throw Error(ErrorKind::kConfig, "key '" + key + "' must be a number");
  }
  return node.at(key).get<double>();
}

}  // namespace

TrialConfig ParseTrialConfig(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("trial config: ") + e.what());
  }
  TrialConfig config;
  TrialTarget& t = config.target;
  t.horizon_months = ReadNumber(doc, "horizon_months");
  t.mu0 = ReadNumber(doc, "mu0");
  t.mu1 = ReadNumber(doc, "mu1");
  if (doc.contains("tolerance_outcome")) t.tolerance_outcome = ReadNumber(doc, "tolerance_outcome");
  if (doc.contains("tolerance_covariate")) {
    t.tolerance_covariate = ReadNumber(doc, "tolerance_covariate");
  }
  if (doc.contains("covariate_targets")) {
    for (const auto& [name, node] : doc.at("covariate_targets").items()) {
      ArmTargets arms;
      if (node.contains("pooled")) arms.arm0 = arms.arm1 = ReadNumber(node, "pooled");
      if (node.contains("arm0")) arms.arm0 = ReadNumber(node, "arm0");
      if (node.contains("arm1")) arms.arm1 = ReadNumber(node, "arm1");
      if (!arms.arm0 && !arms.arm1) {
        throw Error(ErrorKind::kConfig, "covariate target '" + name + "' has no arm0/arm1/pooled");
      }
      t.covariate_targets.emplace(name, arms);
    }
  }
  if (doc.contains("eligibility")) {
    for (const auto& node : doc.at("eligibility")) {
      EligibilityRule rule;
      if (!node.contains("field") || !node.contains("op") || !node.contains("value")) {
        throw Error(ErrorKind::kConfig, "eligibility entry needs field, op, value");
      }
      rule.field = node.at("field").get<std::string>();
      rule.op = ParseComparator(node.at("op").get<std::string>());
      const json& value = node.at("value");
      if (value.is_array()) {
        for (const auto& v : value) rule.values.push_back(v.get<double>());
      } else {
        rule.values.push_back(value.get<double>());
      }
      config.eligibility.push_back(std::move(rule));
    }
  }
  return config;
}

TrialConfig LoadTrialConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return ParseTrialConfig(buffer.str());
}

std::string TrialConfigToJson(const TrialConfig& config) {
  json doc;
  doc["horizon_months"] = config.target.horizon_months;
  doc["mu0"] = config.target.mu0;
  doc["mu1"] = config.target.mu1;
  doc["tolerance_outcome"] = config.target.tolerance_outcome;
  doc["tolerance_covariate"] = config.target.tolerance_covariate;
  json targets = json::object();
  for (const auto& [name, arms] : config.target.covariate_targets) {
    json entry = json::object();
    if (arms.arm0) entry["arm0"] = *arms.arm0;
    if (arms.arm1) entry["arm1"] = *arms.arm1;
    targets[name] = entry;
  }
  doc["covariate_targets"] = targets;
  json rules = json::array();
  for (const auto& rule : config.eligibility) {
    json entry;
    entry["field"] = rule.field;
    entry["op"] = ToString(rule.op);
    if (rule.op == Comparator::kInSet) {
      entry["value"] = rule.values;
    } else {
      entry["value"] = rule.values.at(0);
    }
    rules.push_back(entry);
  }
  doc["eligibility"] = rules;
  return doc.dump(2) + "\n";
}

}  // namespace trialemu
