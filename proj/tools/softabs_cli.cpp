// softabs: simulate data, run RMHMC chains, estimate evidence, benchmark
// the metric pipeline and diagnose chain files.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "softabs/evidence.hpp"
#include "softabs/io.hpp"
#include "softabs/posterior.hpp"
#include "softabs/sampler.hpp"

using namespace softabs;
namespace fs = std::filesystem;

namespace {

int effective_threads(int flag) {
  if (const char* env = std::getenv("SOFTABS_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw std::runtime_error(std::string("SOFTABS_THREADS must be a positive integer, got '") + env + "'");
  }
  return flag;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

RunSettings load_settings(const std::string& path) {
  if (path.empty()) return {};
  auto in = open_in(path);
  return parse_settings(in, path);
}

Dataset load_data(const std::string& path) {
  auto in = open_in(path);
  return read_csv(in, path);
}

ModelSpec build_model(const std::string& name, const Dataset& data, const RunSettings& s) {
  const int M = static_cast<int>(s.get("M", 30));
  const double L = s.get("L", 8.0);
  if (M < 1) throw std::runtime_error("M must be >= 1");
  ModelSpec model;
  if (name == "logistic") {
    model = logistic_model(data.covariates(), M, L);
  } else {
    static const std::map<std::string, RegressionKind> kinds{{"l-mean", RegressionKind::linear_mean},
                                                             {"nl-mean", RegressionKind::nonlinear_mean},
                                                             {"l-meanvar", RegressionKind::linear_meanvar},
                                                             {"nl-meanvar", RegressionKind::nonlinear_meanvar}};
    model = regression_model(kinds.at(name), data, M, L);
  }
  return model;
}

template <class T>
double mean_of(const std::vector<T>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

const std::vector<std::string> kModels{"logistic", "l-mean", "nl-mean", "l-meanvar", "nl-meanvar"};
const std::map<std::string, MetricKind> kMetrics{{"softabs-dynamic", MetricKind::softabs_dynamic},
                                                 {"softabs-static", MetricKind::softabs_static},
                                                 {"euclidean", MetricKind::euclidean}};

struct SimulateArgs {
  std::string kind = "logistic";
  int dims = 1;
  int n = 500;
  std::uint64_t seed = 1;
  double half_width = 8.0;
  int features = 30;
  std::string out;
  std::string truth;
};

int cmd_simulate(const SimulateArgs& a) {
  Dataset data;
  if (a.kind == "logistic") {
    const auto sim = simulate_logistic(a.dims, a.n, a.half_width, a.seed, a.features);
    data = sim.data;
    const std::string truth = a.truth.empty() ? fs::path(a.out).replace_extension(".truth.json").string() : a.truth;
    open_out(truth) << truth_to_json(sim.truth).dump(2) << '\n';
  } else {
    data = simulate_heteroscedastic(a.n, a.seed);
  }
  auto out = open_out(a.out);
  write_csv(out, data);
  return 0;
}

struct SampleArgs {
  std::string model = "logistic";
  std::string data;
  std::string config;
  std::string metric = "softabs-dynamic";
  std::string out;
  std::string summary;
  std::uint64_t seed = 1;
  bool record_q = false;
};

int cmd_sample(const SampleArgs& a) {
  const auto settings = load_settings(a.config);
  const Dataset data = load_data(a.data);
  ModelSpec model = build_model(a.model, data, settings);
  settings.apply(model);
  const Posterior post(model, data);

  ChainConfig cfg;
  settings.apply(cfg);
  cfg.metric = kMetrics.at(a.metric);
  cfg.seed = a.seed;
  cfg.record_q = a.record_q;
  cfg.validate();

  auto out = open_out(a.out);
  out.precision(std::numeric_limits<double>::max_digits10);
  const auto result = run_chain(post, post.initial_position(), cfg, [&](const MoveRecord& r) { write_record(out, r); });

  std::vector<double> per100, sweeps;
  for (const auto& r : result.records) {
    per100.push_back(r.wall_ms * 100.0 / cfg.leapfrogs);
    sweeps.push_back(r.sweeps_mean);
  }
  const auto lp = result.logpost(cfg.burnin);
  json summary = {{"model", a.model},
                  {"metric", a.metric},
                  {"d", post.dim()},
                  {"N", data.size()},
                  {"moves", cfg.moves},
                  {"burnin", cfg.burnin},
                  {"acceptance_rate", result.acceptance_rate()},
                  {"divergences", result.divergences()},
                  {"sweeps_mean", mean_of(sweeps)},
                  {"wall_ms_per_100_leapfrogs", mean_of(per100)},
                  {"wall_ms_per_100_leapfrogs_sd", sd_of(per100)},
                  {"final_logpost", result.records.empty() ? 0.0 : result.records.back().logpost},
                  {"final_q", std::vector<double>(result.final_q.begin(), result.final_q.end())}};
  if (lp.size() >= 10) {
    const auto w = wilcoxon_split_half(lp);
    summary["wilcoxon_p"] = w.p_value;
    summary["wilcoxon_z"] = w.z;
  } else {
    summary["wilcoxon_p"] = nullptr;
  }
  if (!a.summary.empty()) open_out(a.summary) << summary.dump(2) << '\n';
  std::cout << summary.dump(2) << '\n';
  return 0;
}

struct EvidenceArgs {
  std::string model = "logistic";
  std::string data;
  std::string config;
  std::string ladder = "default";
  std::string oracle;
  std::string out;
  std::uint64_t seed = 1;
  int chains = 5;
  int moves_per_rung = 12;
  int warmup_block = 200;
  int warmup_max_blocks = 20;
  int prerun_moves = 500;
  int threads = 1;
  bool rung_average = false;
};

int cmd_evidence(const EvidenceArgs& a) {
  const auto settings = load_settings(a.config);
  const Dataset data = load_data(a.data);
  ModelSpec model = build_model(a.model, data, settings);
  apply_evidence_priors(model);
  settings.apply(model);
  const Posterior post(model, data);

  TiConfig cfg;
  settings.apply(cfg.chain);
  cfg.chain.seed = a.seed;
  cfg.chains = a.chains;
  cfg.moves_per_rung = a.moves_per_rung;
  cfg.warmup_block = a.warmup_block;
  cfg.warmup_max_blocks = a.warmup_max_blocks;
  cfg.prerun_moves = a.prerun_moves;
  cfg.rung_average = a.rung_average;
  cfg.threads = effective_threads(a.threads);

  TemperLadder ladder;
  if (a.ladder == "default") {
    ladder = default_ladder();
  } else {
    auto in = open_in(a.ladder);
    ladder = read_ladder(in);
  }

  const auto est = thermo_integrate(post, post.initial_position(), ladder, cfg);
  json report = evidence_to_json(est);
  report["model"] = a.model;
  report["d"] = post.dim();
  if (a.oracle == "laplace-grid") {
    const auto grid = laplace_grid_oracle(model, data, GridSpec{}, cfg.threads);
    report["oracle"] = {{"method", "laplace-grid"},
                        {"log_evidence", grid.log_evidence},
                        {"nodes", grid.nodes},
                        {"skipped", grid.skipped},
                        {"warnings", grid.warnings}};
    report["gap"] = est.bme_mean - grid.log_evidence;
    report["relative_gap"] = std::abs(est.bme_mean - grid.log_evidence) / std::abs(grid.log_evidence);
  }
  if (!a.out.empty()) open_out(a.out) << report.dump(2) << '\n';
  std::cout << report.dump(2) << '\n';
  return 0;
}

struct BenchArgs {
  std::vector<int> dims{1, 2, 4, 8, 16};
  int n = 500;
  int reps = 5;
  int leapfrogs = 20;
  double epsilon = 0.001;
  std::uint64_t seed = 1;
  std::string out;
};

template <class F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_bench(const BenchArgs& a) {
  std::ofstream file;
  if (!a.out.empty()) file = open_out(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  out << "D,d,method,reps,mean_ms,sd_ms,mean_sweeps,sd_sweeps\n";
  auto row = [&](int D, int d, const std::string& method, const std::vector<double>& ms,
                 const std::vector<double>& sweeps) {
    out << D << ',' << d << ',' << method << ',' << ms.size() << ',' << mean_of(ms) << ',' << sd_of(ms) << ',';
    if (sweeps.empty())
      out << ",\n";
    else
      out << mean_of(sweeps) << ',' << sd_of(sweeps) << '\n';
    out.flush();
  };

  for (int D : a.dims) {
    const auto sim = simulate_logistic(D, a.n, 8.0, a.seed);
    const Posterior post(logistic_model(D), sim.data);
    const int d = post.dim();
    std::mt19937_64 rng(detail::mix_seed(a.seed, static_cast<std::uint64_t>(D)));
    std::normal_distribution<double> normal;
    VectorXd q = post.initial_position();
    for (auto& v : q) v += 0.05 * normal(rng);
    const auto state = post.prepare(q);
    MatrixXd W(d, d);
    for (auto& v : W.reshaped()) v = normal(rng);
    W = (W + W.transpose()).eval();

    std::vector<double> structured, naive, dense;
    for (int r = 0; r < a.reps; ++r) {
      structured.push_back(time_ms([&] { (void)post.trace_contraction(state, W); }));
      naive.push_back(time_ms([&] { (void)post.naive_trace_contraction(state, W); }));
      if (d <= 200) dense.push_back(time_ms([&] { (void)dense_oracle(post, q, W); }));
    }
    row(D, d, "contraction_structured", structured, {});
    row(D, d, "contraction_naive", naive, {});
    if (!dense.empty()) row(D, d, "contraction_dense_oracle", dense, {});

    for (const auto& [name, kind] : {std::pair{"decomposition_dynamic", MetricKind::softabs_dynamic},
                                     std::pair{"decomposition_static", MetricKind::softabs_static}}) {
      ChainConfig cfg;
      cfg.metric = kind;
      cfg.step_size = a.epsilon;
      cfg.leapfrogs = a.leapfrogs;
      cfg.moves = a.reps;
      cfg.burnin = 0;
      cfg.seed = a.seed;
      const auto res = run_chain(post, post.initial_position(), cfg);
      std::vector<double> ms, sweeps;
      for (const auto& rec : res.records) {
        ms.push_back(rec.wall_ms * 100.0 / cfg.leapfrogs);
        sweeps.push_back(rec.sweeps_mean);
      }
      row(D, d, name, ms, sweeps);
    }
  }
  return 0;
}

struct DiagnoseArgs {
  std::string chain;
  int burnin = 0;
  std::string out;
};

int cmd_diagnose(const DiagnoseArgs& a) {
  auto in = open_in(a.chain);
  const auto records = read_chain_jsonl(in, a.chain);
  const auto report = diagnose_chain(records, a.burnin);
  if (!a.out.empty()) open_out(a.out) << report.dump(2) << '\n';
  std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Riemannian-manifold HMC with a softabs metric for reduced-rank GP models"};
  app.require_subcommand(1);
  std::function<int()> run;

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "simulate a dataset as CSV (and truth JSON for logistic data)");
  s->add_option("--kind", sim.kind, "logistic or heteroscedastic")
      ->check(CLI::IsMember({"logistic", "heteroscedastic"}))
      ->capture_default_str();
  s->add_option("--dims", sim.dims, "number of covariates (logistic)")->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--n", sim.n, "number of samples")->check(CLI::Range(2, 100000000))->capture_default_str();
  s->add_option("--seed", sim.seed)->capture_default_str();
  s->add_option("--half-width", sim.half_width, "L")->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--features", sim.features, "M")->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--out", sim.out, "CSV path")->required();
  s->add_option("--truth", sim.truth, "truth JSON path (default: <out>.truth.json)");
  s->callback([&] { run = [&] { return cmd_simulate(sim); }; });

  SampleArgs smp;
  auto* sp = app.add_subcommand("sample", "run one chain; writes JSONL records and prints a summary");
  sp->add_option("--model", smp.model)->check(CLI::IsMember(kModels))->capture_default_str();
  sp->add_option("--data", smp.data, "CSV with header x1,...,xD,y")->required()->check(CLI::ExistingFile);
  sp->add_option("--config", smp.config, "key = value settings")->check(CLI::ExistingFile);
  sp->add_option("--metric", smp.metric)
      ->check(CLI::IsMember({"softabs-dynamic", "softabs-static", "euclidean"}))
      ->capture_default_str();
  sp->add_option("--out", smp.out, "chain JSONL path")->required();
  sp->add_option("--summary", smp.summary, "summary JSON path");
  sp->add_option("--seed", smp.seed)->capture_default_str();
  sp->add_flag("--record-q", smp.record_q, "include q in every record");
  sp->callback([&] { run = [&] { return cmd_sample(smp); }; });

  EvidenceArgs ev;
  auto* ep = app.add_subcommand("evidence", "log model evidence by thermodynamic integration");
  ep->add_option("--model", ev.model)->check(CLI::IsMember(kModels))->capture_default_str();
  ep->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
  ep->add_option("--config", ev.config)->check(CLI::ExistingFile);
  ep->add_option("--chains", ev.chains, "Z")->check(CLI::PositiveNumber)->capture_default_str();
  ep->add_option("--moves-per-rung", ev.moves_per_rung, "A")->check(CLI::PositiveNumber)->capture_default_str();
  ep->add_option("--ladder", ev.ladder, "'default' or a file of temperatures")->capture_default_str();
  ep->add_option("--oracle", ev.oracle, "cross-check estimate")->check(CLI::IsMember({"laplace-grid"}));
  ep->add_option("--warmup-block", ev.warmup_block)->check(CLI::Range(10, 1000000))->capture_default_str();
  ep->add_option("--warmup-max-blocks", ev.warmup_max_blocks)->check(CLI::NonNegativeNumber)->capture_default_str();
  ep->add_option("--prerun-moves", ev.prerun_moves)->check(CLI::NonNegativeNumber)->capture_default_str();
  ep->add_flag("--rung-average", ev.rung_average, "average each rung instead of using its endpoint");
  ep->add_option("--threads", ev.threads)->check(CLI::PositiveNumber)->capture_default_str();
  ep->add_option("--seed", ev.seed)->capture_default_str();
  ep->add_option("--out", ev.out, "report JSON path");
  ep->callback([&] {
    if (ev.ladder != "default" && !fs::exists(ev.ladder)) throw CLI::ValidationError("--ladder", "file not found: " + ev.ladder);
    run = [&] { return cmd_evidence(ev); };
  });

  BenchArgs bn;
  auto* bp = app.add_subcommand("bench", "time trace contractions and eigendecompositions; CSV output");
  bp->add_option("--dims", bn.dims, "covariate counts")->delimiter(',')->check(CLI::PositiveNumber);
  bp->add_option("--n", bn.n)->check(CLI::Range(2, 100000000))->capture_default_str();
  bp->add_option("--reps", bn.reps)->check(CLI::PositiveNumber)->capture_default_str();
  bp->add_option("--leapfrogs", bn.leapfrogs)->check(CLI::PositiveNumber)->capture_default_str();
  bp->add_option("--epsilon", bn.epsilon)->check(CLI::PositiveNumber)->capture_default_str();
  bp->add_option("--seed", bn.seed)->capture_default_str();
  bp->add_option("--out", bn.out, "CSV path (default: stdout)");
  bp->callback([&] { run = [&] { return cmd_bench(bn); }; });

  DiagnoseArgs dg;
  auto* dp = app.add_subcommand("diagnose", "split-half rank-sum test, acceptance and divergences of a chain");
  dp->add_option("chain", dg.chain, "chain JSONL")->required()->check(CLI::ExistingFile);
  dp->add_option("--burnin", dg.burnin)->check(CLI::NonNegativeNumber)->capture_default_str();
  dp->add_option("--out", dg.out, "report JSON path");
  dp->callback([&] { run = [&] { return cmd_diagnose(dg); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
