#pragma once

// File formats: dataset CSV, simulation truth JSON, chain JSON-lines,
// key = value run configuration and the evidence report.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "softabs/evidence.hpp"
#include "softabs/rrgp_model.hpp"
#include "softabs/sampler.hpp"

namespace softabs {

using json = nlohmann::json;

/// Parse failure tagged with source and 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, int line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(s);
  while (std::getline(in, field, sep)) out.push_back(trim(field));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& source, int line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParseError(source, line, "not a number: '" + s + "'");
  }
  if (used != s.size()) throw ParseError(source, line, "not a number: '" + s + "'");
  return v;
}

}  // namespace detail

/// Header x1,...,xD,y followed by one row per sample.
inline void write_csv(std::ostream& out, const Dataset& data) {
  out.precision(std::numeric_limits<double>::max_digits10);
  for (int k = 0; k < data.covariates(); ++k) out << 'x' << k + 1 << ',';
  out << "y\n";
  for (int i = 0; i < data.size(); ++i) {
    for (int k = 0; k < data.covariates(); ++k) out << data.X(i, k) << ',';
    out << data.y[i] << '\n';
  }
}

inline Dataset read_csv(std::istream& in, const std::string& source = "<csv>") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(source, 1, "empty file; expected header x1,...,xD,y");
  const auto header = detail::split(detail::trim(line), ',');
  const int D = static_cast<int>(header.size()) - 1;
  if (D < 1 || header.back() != "y") throw ParseError(source, 1, "header must be x1,...,xD,y");
  for (int k = 0; k < D; ++k)
    if (header[k] != "x" + std::to_string(k + 1))
      throw ParseError(source, 1, "header column " + std::to_string(k + 1) + " is '" + header[k] + "', expected x" +
                                      std::to_string(k + 1));
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split(detail::trim(line), ',');
    if (static_cast<int>(fields.size()) != D + 1)
      throw ParseError(source, lineno,
                       "expected " + std::to_string(D + 1) + " fields, found " + std::to_string(fields.size()));
    std::vector<double> row;
    for (const auto& f : fields) row.push_back(detail::parse_double(f, source, lineno));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(source, lineno, "no data rows");
  Dataset ds;
  ds.X.resize(static_cast<Eigen::Index>(rows.size()), D);
  ds.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int k = 0; k < D; ++k) ds.X(static_cast<Eigen::Index>(i), k) = rows[i][k];
    ds.y[static_cast<Eigen::Index>(i)] = rows[i][D];
  }
  return ds;
}

inline json truth_to_json(const LogisticTruth& t) {
  return {{"c_star", t.c_star},     {"b_star", t.b_star},         {"a_star", t.a_star},
          {"seed", t.seed},         {"features", t.features},     {"half_width", t.half_width}};
}

/// Non-finite Hamiltonians (divergent moves) are written as null.
inline json record_to_json(const MoveRecord& r) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j = {{"move", r.move},         {"logpost", num(r.logpost)},     {"h_before", num(r.h_before)},
            {"h_after", num(r.h_after)}, {"accept", r.accept},          {"divergent", r.divergent},
            {"sweeps_mean", r.sweeps_mean}, {"wall_ms", r.wall_ms}};
  if (r.q) j["q"] = std::vector<double>(r.q->begin(), r.q->end());
  return j;
}

inline MoveRecord record_from_json(const json& j) {
  auto num = [&](const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
  };
  MoveRecord r;
  r.move = j.at("move").get<int>();
  r.logpost = num("logpost");
  r.h_before = num("h_before");
  r.h_after = num("h_after");
  r.accept = j.at("accept").get<bool>();
  r.divergent = j.at("divergent").get<bool>();
  r.sweeps_mean = j.at("sweeps_mean").get<double>();
  r.wall_ms = j.at("wall_ms").get<double>();
  if (j.contains("q")) {
    const auto v = j.at("q").get<std::vector<double>>();
    r.q = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return r;
}

inline void write_record(std::ostream& out, const MoveRecord& r) { out << record_to_json(r).dump() << '\n'; }

inline std::vector<MoveRecord> read_chain_jsonl(std::istream& in, const std::string& source = "<jsonl>") {
  std::vector<MoveRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(source, lineno, e.what());
    }
  }
  return out;
}

/// Split-half rank-sum p, acceptance rate and divergence count of a chain.
inline json diagnose_chain(const std::vector<MoveRecord>& records, int burnin = 0) {
  if (burnin < 0 || burnin >= static_cast<int>(records.size()))
    throw std::invalid_argument("burn-in must leave at least one record");
  std::vector<double> lp;
  int accepted = 0, divergent = 0;
  for (std::size_t i = static_cast<std::size_t>(burnin); i < records.size(); ++i) {
    lp.push_back(records[i].logpost);
    accepted += records[i].accept;
    divergent += records[i].divergent;
  }
  const auto test = wilcoxon_split_half(lp);
  const double n = static_cast<double>(lp.size());
  return {{"moves", lp.size()},         {"wilcoxon_p", test.p_value}, {"wilcoxon_z", test.z},
          {"acceptance_rate", accepted / n}, {"divergences", divergent}};
}

/// Line-oriented `key = value` settings with `#` comments.
struct RunSettings {
  std::map<std::string, double> values;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{"epsilon",  "leapfrogs", "moves",    "burnin",   "kappa", "zeta",
                                            "alpha_cg", "beta_cg",   "alpha_sg", "beta_sg",  "alpha_cl",
                                            "beta_cl",  "Sigma",     "delta",    "L",        "M"};
    return k;
  }

  bool has(const std::string& key) const { return values.count(key) > 0; }
  double get(const std::string& key, double fallback) const {
    const auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
  }

  void apply(ChainConfig& cfg) const {
    cfg.step_size = get("epsilon", cfg.step_size);
    cfg.leapfrogs = static_cast<int>(get("leapfrogs", cfg.leapfrogs));
    cfg.moves = static_cast<int>(get("moves", cfg.moves));
    cfg.burnin = static_cast<int>(get("burnin", cfg.burnin));
    cfg.kappa = get("kappa", cfg.kappa);
    cfg.zeta = get("zeta", cfg.zeta);
  }

  void apply(ModelSpec& model) const {
    auto prior = [&](Hyper h, const char* a, const char* b) {
      model.prior(h).shape = get(a, model.prior(h).shape);
      model.prior(h).scale = get(b, model.prior(h).scale);
    };
    prior(Hyper::c_gauss, "alpha_cg", "beta_cg");
    prior(Hyper::sigma_gauss, "alpha_sg", "beta_sg");
    prior(Hyper::c_linear, "alpha_cl", "beta_cl");
    model.intercept_variance = get("Sigma", model.intercept_variance);
    model.delta = get("delta", model.delta);
  }
};

inline RunSettings parse_settings(std::istream& in, const std::string& source = "<config>") {
  RunSettings s;
  std::string line;
  int lineno = 0;
  const auto& known = RunSettings::keys();
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ParseError(source, lineno, "unknown key '" + key + "'");
    if (s.has(key)) throw ParseError(source, lineno, "duplicate key '" + key + "'");
    const double v = detail::parse_double(value, source, lineno);
    const bool integral = key == "leapfrogs" || key == "moves" || key == "burnin" || key == "M";
    if (integral && (v != std::floor(v) || v < 0)) throw ParseError(source, lineno, key + " must be a non-negative integer");
    s.values[key] = v;
  }
  return s;
}

inline json evidence_to_json(const EvidenceEstimate& e) {
  return {{"bme_mean", e.bme_mean},     {"bme_stderr", e.bme_stderr},   {"per_chain", e.per_chain},
          {"ladder", e.ladder},         {"rung_means", e.rung_means},   {"warnings", e.warnings},
          {"ti_variance", e.ti_variance}};
}

}  // namespace softabs
