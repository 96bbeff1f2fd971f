#pragma once
// The acquire -> simulate -> train loop and the run archive around it.
//
// Archive layout (one directory per run):
//   config.yaml          effective configuration, every key
//   manifest.json        config hash, seed, constants checksum
//   dataset.jsonl        {"round", "theta", "x"} per simulation; round 0 = initial draws
//   acquisitions.jsonl   {"round", "rule", "theta", "objective", "n_restarts", "fallback"}
//   metrics.csv          run_id,rule,round,metric,value
//   weights/round_NNNN.json   ensemble weight snapshots
//   checkpoint.json/.bin      latest ensemble + optimizer state and file offsets (resume)
//   posterior.csv, posterior.meta.json   written by sample_posterior
//   evaluation.csv       written by evaluate

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emunet/acquisition.hpp"
#include "emunet/config.hpp"
#include "emunet/ensemble.hpp"
#include "emunet/errors.hpp"
#include "emunet/evaluation.hpp"
#include "emunet/hmc.hpp"
#include "emunet/io.hpp"
#include "emunet/simulators.hpp"

namespace emunet::runner {

namespace fs = std::filesystem;
using io::json;

struct ArchivePaths {
  fs::path dir;
  fs::path config() const { return dir / "config.yaml"; }
  fs::path manifest() const { return dir / "manifest.json"; }
  fs::path dataset() const { return dir / "dataset.jsonl"; }
  fs::path acquisitions() const { return dir / "acquisitions.jsonl"; }
  fs::path metrics() const { return dir / "metrics.csv"; }
  fs::path checkpoint() const { return dir / "checkpoint.json"; }
  fs::path checkpoint_bin() const { return dir / "checkpoint.bin"; }
  fs::path weights_dir() const { return dir / "weights"; }
  fs::path weights(int round) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "round_%04d.json", round);
    return weights_dir() / buf;
  }
  fs::path posterior() const { return dir / "posterior.csv"; }
  fs::path posterior_meta() const { return dir / "posterior.meta.json"; }
  fs::path evaluation() const { return dir / "evaluation.csv"; }
};

struct RunOptions {
  bool resume = false;
  int stop_after = -1;           // stop (as if interrupted) after this round; -1 = never
  std::ostream* log = nullptr;   // progress lines
};

struct RunResult {
  int last_round = 0;
  bool early_stopped = false;
  bool interrupted = false;
  std::size_t records = 0;
};

/// Everything the loop and the evaluators need besides the ensemble.
class Context {
 public:
  explicit Context(const RunConfig& cfg) : cfg_(cfg), sim_(cfg.make_simulator()) {
    if (cfg_.experiment.find_first_of(",\n\"") != std::string::npos)
      throw ConfigError("config: experiment label must not contain commas, quotes or newlines");
    x_obs_ = cfg_.observed_data(*sim_);
    if (cfg_.heldout > 0) heldout_ = make_heldout(*sim_, cfg_.heldout, cfg_.seed);
  }

  const RunConfig& config() const { return cfg_; }
  const Simulator& simulator() const { return *sim_; }
  const BoxPrior& prior() const { return sim_->prior(); }
  const std::optional<Vector>& observed() const { return x_obs_; }

  /// Whether a ground-truth posterior is available for TV.
  bool has_truth() const {
    auto* g = dynamic_cast<const GaussianSimulator*>(sim_.get());
    return g && x_obs_ && g->param_dim() <= 2;
  }

  /// Metric rows for one ensemble state.
  std::string metrics(const Ensemble& ens, int round, const std::string& rule) const {
    std::string rows;
    const std::string id = cfg_.run_id();
    if (has_truth()) {
      const Grid& g = grid();
      const Vector p_hat = emulator_posterior_on_grid(ens, g, *x_obs_, prior());
      rows += io::metric_row(id, rule, round, "tv", total_variation(p_hat, truth_, g.volumes));
    }
    if (heldout_) {
      rows += io::metric_row(id, rule, round, "heldout_ll", heldout_loglik(ens, *heldout_));
      if (auto t = true_heldout()) rows += io::metric_row(id, rule, round, "heldout_ll_true", *t);
    }
    return rows;
  }

  std::string constants_checksum() const {
    if (cfg_.simulator_kind != "hh") return "";
    if (!cfg_.hh_constants_file.empty()) return io::hex(io::fingerprint(io::read_file(cfg_.hh_constants_file)));
    const HhConstants c = cfg_.hh.constants;
    std::string s;
    for (double v : {c.c_m, c.e_na, c.e_k, c.e_leak, c.g_leak, c.g_m, c.tau_max, c.v_t}) s += io::format_double(v) + ";";
    return io::hex(io::fingerprint(s));
  }

 private:
  const Grid& grid() const {
    if (!grid_) {
      const int p = sim_->param_dim();
      grid_ = make_grid(prior(), std::vector<int>(static_cast<std::size_t>(p), p == 1 ? cfg_.grid_1d : cfg_.grid_2d));
      truth_ = gaussian_true_posterior(dynamic_cast<const GaussianSimulator&>(*sim_), *grid_, *x_obs_);
    }
    return *grid_;
  }

  // Log-likelihood of the held-out set under the true model, where it is tractable.
  std::optional<double> true_heldout() const {
    double s = 0.0;
    if (auto* g = dynamic_cast<const GaussianSimulator*>(sim_.get())) {
      for (Eigen::Index i = 0; i < heldout_->size(); ++i) s += g->log_likelihood(heldout_->theta.col(i), heldout_->x.col(i));
      return s;
    }
    if (auto* b = dynamic_cast<const BlobSimulator*>(sim_.get())) {
      for (Eigen::Index i = 0; i < heldout_->size(); ++i) s += b->log_likelihood(heldout_->theta.col(i), heldout_->x.col(i));
      return s;
    }
    return std::nullopt;
  }

  RunConfig cfg_;
  std::unique_ptr<Simulator> sim_;
  std::optional<Vector> x_obs_;
  std::optional<HeldOutSet> heldout_;
  mutable std::optional<Grid> grid_;
  mutable Vector truth_;
};

namespace detail {

inline void log_line(const RunOptions& opt, const std::string& s) {
  if (opt.log) *opt.log << s << "\n" << std::flush;
}

inline std::uintmax_t size_or_zero(const fs::path& p) { return fs::exists(p) ? fs::file_size(p) : 0; }

inline void save_checkpoint(const ArchivePaths& a, const RunConfig& cfg, const Ensemble& ens, int round) {
  const std::string bytes = io::ensemble_bytes(ens);
  io::write_file_atomic(a.checkpoint_bin(), bytes);
  json j{{"round", round},
         {"config_hash", cfg.hash()},
         {"ensemble", io::checkpoint_header(ens)},
         {"ensemble_checksum", io::hex(io::fingerprint(bytes))},
         {"offsets",
          {{"dataset", size_or_zero(a.dataset())},
           {"acquisitions", size_or_zero(a.acquisitions())},
           {"metrics", size_or_zero(a.metrics())}}}};
  io::write_file_atomic(a.checkpoint(), j.dump(1) + "\n");
}

struct Checkpoint {
  int round;
  json header;
  Ensemble ensemble;
};

inline Checkpoint load_checkpoint(const ArchivePaths& a, const EnsembleConfig& ecfg) {
  if (!fs::exists(a.checkpoint())) throw ConfigError("archive " + a.dir.string() + " has no checkpoint");
  json j = json::parse(io::read_file(a.checkpoint()));
  const std::string bytes = io::read_file(a.checkpoint_bin());
  if (io::hex(io::fingerprint(bytes)) != j.at("ensemble_checksum").get<std::string>())
    throw ConfigError("checkpoint: ensemble data does not match its checksum");
  return {j.at("round").get<int>(), j, io::ensemble_from_bytes(j.at("ensemble"), bytes, ecfg)};
}

// Draws theta from the prior and simulates; one retry with fresh streams.
inline Record initial_draw(const Context& ctx, int n) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng = stream(ctx.config().seed, "initial", {static_cast<std::uint64_t>(n), attempt});
    const Vector theta = ctx.prior().sample(rng);
    try {
      return {0, theta, ctx.simulator().simulate(theta, rng)};
    } catch (const SimulatorError& e) {
      if (attempt >= 1) throw;
      std::cerr << "warning: initial simulation " << n << " failed (" << e.what() << "); retrying\n";
    }
  }
}

}  // namespace detail

/// Writes the config snapshot and manifest of a fresh archive.
inline void init_archive(const ArchivePaths& a, const Context& ctx) {
  fs::create_directories(a.dir);
  const RunConfig& cfg = ctx.config();
  io::write_file(a.config(), cfg.dump());
  json m{{"config_hash", cfg.hash()},
         {"seed", cfg.seed},
         {"simulator", cfg.simulator_kind},
         {"constants_file", cfg.hh_constants_file},
         {"constants_checksum", ctx.constants_checksum()},
         {"format", 1}};
  io::write_file(a.manifest(), m.dump(1) + "\n");
  io::write_file(a.dataset(), "");
  io::write_file(a.acquisitions(), "");
  io::write_file(a.metrics(), io::kMetricsHeader);
}

inline void write_weights(const ArchivePaths& a, const Ensemble& ens, int round) {
  fs::create_directories(a.weights_dir());
  json j = io::to_json(ens, false);
  j["round"] = round;
  io::write_file_atomic(a.weights(round), j.dump() + "\n");
}

/// Runs (or resumes) the loop: t0 prior draws, initial training, then one
/// acquisition per round until the budget is spent.
inline RunResult run(const RunConfig& cfg, const fs::path& out, const RunOptions& opt = {}) {
  const ArchivePaths a{out};
  const Context ctx(cfg);
  const Simulator& sim = ctx.simulator();
  const BoxPrior& prior = ctx.prior();
  const std::string rule = to_string(cfg.acquisition.rule);
  if (cfg.acquisition.rule == Rule::MaxVar && !ctx.observed())
    throw ConfigError("maxvar acquisition needs observed data (observed or observed_theta)");
  const Vector* x_obs = ctx.observed() ? &*ctx.observed() : nullptr;

  Dataset data(sim.param_dim(), sim.data_dim());
  Ensemble ens;
  int start = 1;
  RunResult result;

  if (opt.resume) {
    auto ck = detail::load_checkpoint(a, cfg.ensemble);
    if (ck.header.at("config_hash").get<std::string>() != cfg.hash())
      throw ConfigError("resume: configuration differs from the archived run (only loop.rounds may change)");
    const auto& off = ck.header.at("offsets");
    fs::resize_file(a.dataset(), off.at("dataset").get<std::uintmax_t>());
    fs::resize_file(a.acquisitions(), off.at("acquisitions").get<std::uintmax_t>());
    fs::resize_file(a.metrics(), off.at("metrics").get<std::uintmax_t>());
    data = io::read_dataset(a.dataset());
    ens = std::move(ck.ensemble);
    start = ck.round + 1;
    io::write_file(a.config(), cfg.dump());
    detail::log_line(opt, "resuming after round " + std::to_string(ck.round));
  } else {
    if (fs::exists(a.checkpoint())) throw ConfigError("archive " + out.string() + " already exists; use --resume");
    init_archive(a, ctx);
    for (int n = 0; n < cfg.t0; ++n) {
      Record r = detail::initial_draw(ctx, n);
      io::append_file(a.dataset(), io::to_jsonl(r));
      data.add(std::move(r));
    }
    ens = Ensemble(prior, sim.head(), cfg.ensemble, cfg.seed);
    const TrainReport rep = ens.train(data, cfg.ensemble.epochs_initial, 0);
    for (const auto& t : rep.members)
      if (t.aborted) std::cerr << "warning: " << t.diagnostic << "\n";
    io::append_file(a.metrics(), ctx.metrics(ens, 0, rule));
    write_weights(a, ens, 0);
    detail::save_checkpoint(a, cfg, ens, 0);
    detail::log_line(opt, "round 0: " + std::to_string(data.size()) + " initial simulations");
  }
  result.last_round = start - 1;

  for (int r = start; r <= cfg.rounds; ++r) {
    AcquisitionResult acq;
    Vector x;
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng arng = stream(cfg.seed, "acquire", {static_cast<std::uint64_t>(r), attempt});
      acq = propose(ens, cfg.acquisition, prior, x_obs, arng);
      Rng srng = stream(cfg.seed, "sim", {static_cast<std::uint64_t>(r), attempt});
      try {
        x = sim.simulate(acq.theta, srng);
        break;
      } catch (const SimulatorError& e) {
        if (attempt >= 1) {
          std::cerr << "error: round " << r << " failed twice; archive left at round " << r - 1 << "\n";
          throw;
        }
        std::cerr << "warning: round " << r << " simulation failed (" << e.what() << "); retrying\n";
      }
    }
    io::append_file(a.acquisitions(), io::to_jsonl(r, acq));
    Record rec{r, acq.theta, x};
    io::append_file(a.dataset(), io::to_jsonl(rec));
    data.add(std::move(rec));

    TrainReport rep;
    if (cfg.ensemble.warm_start) {
      rep = ens.train(data, cfg.ensemble.epochs_per_round, static_cast<std::uint64_t>(r));
    } else {
      ens.reinitialize();
      rep = ens.train(data, cfg.ensemble.epochs_initial, static_cast<std::uint64_t>(r));
    }
    for (const auto& t : rep.members)
      if (t.aborted) std::cerr << "warning: round " << r << ": " << t.diagnostic << "\n";

    const bool stop = cfg.early_stop && acq.objective && *acq.objective < cfg.objective_floor;
    const bool last = r == cfg.rounds || stop;
    if (r % cfg.eval_every == 0 || last) io::append_file(a.metrics(), ctx.metrics(ens, r, rule));
    if (r % cfg.snapshot_every == 0 || last) write_weights(a, ens, r);
    detail::save_checkpoint(a, cfg, ens, r);
    result.last_round = r;
    if (opt.log && (r % 10 == 0 || last)) detail::log_line(opt, "round " + std::to_string(r) + " done");
    if (stop) {
      result.early_stopped = true;
      detail::log_line(opt, "objective below floor; stopping at round " + std::to_string(r));
      break;
    }
    if (opt.stop_after == r && r < cfg.rounds) {
      result.interrupted = true;
      break;
    }
  }
  result.records = data.size();
  return result;
}

// ---------------------------------------------------------------------------

inline RunConfig load_archive_config(const fs::path& dir) {
  const ArchivePaths a{dir};
  if (!fs::exists(a.config())) throw ConfigError(dir.string() + " is not a run archive (no config.yaml)");
  return RunConfig::from_file(a.config());
}

/// Samples the posterior for x_o (defaults to the configured observation)
/// with the archived ensemble. Writes posterior.csv and posterior.meta.json
/// unless `csv` names another destination.
inline PosteriorSampleSet sample_posterior(const fs::path& dir, std::optional<Vector> x_obs = std::nullopt,
                                           std::optional<fs::path> csv = std::nullopt) {
  const ArchivePaths a{dir};
  const RunConfig cfg = load_archive_config(dir);
  const Context ctx(cfg);
  if (!x_obs) x_obs = ctx.observed();
  if (!x_obs) throw ConfigError("sample-posterior: no observation given and none configured");
  if (x_obs->size() != ctx.simulator().data_dim())
    throw DimensionError("sample-posterior: observation has " + std::to_string(x_obs->size()) + " entries, expected " +
                         std::to_string(ctx.simulator().data_dim()));
  const auto ck = detail::load_checkpoint(a, cfg.ensemble);
  PosteriorSampleSet set = run_hmc(ck.ensemble, *x_obs, ctx.prior(), cfg.hmc, cfg.seed);
  const fs::path out = csv ? *csv : a.posterior();
  io::write_posterior_csv(out, set);
  json chains = json::array();
  for (const auto& c : set.chains) {
    chains.push_back({{"member", c.member}, {"accept_rate", c.accept_rate}, {"step_size", c.step_size}});
    if (!c.warning.empty()) {
      chains.back()["warning"] = c.warning;
      std::cerr << "warning: " << c.warning << "\n";
    }
  }
  json meta{{"x_obs", io::to_json(*x_obs)}, {"round", ck.round}, {"config_hash", cfg.hash()}, {"chains", chains}};
  fs::path meta_path = out;
  meta_path.replace_extension(".meta.json");
  io::write_file(meta_path, meta.dump(1) + "\n");
  return set;
}

/// Recomputes metrics from every weight snapshot, plus predictive checks if
/// a posterior was sampled. Writes evaluation.csv and returns its content.
inline std::string evaluate(const fs::path& dir, std::ostream& notices = std::cerr) {
  const ArchivePaths a{dir};
  const RunConfig cfg = load_archive_config(dir);
  const Context ctx(cfg);
  const std::string rule = to_string(cfg.acquisition.rule);
  std::string csv = io::kMetricsHeader;
  if (!ctx.has_truth()) notices << "notice: no ground-truth posterior for this simulator; TV skipped\n";

  std::vector<std::pair<int, fs::path>> snaps;
  if (fs::exists(a.weights_dir()))
    for (const auto& e : fs::directory_iterator(a.weights_dir())) {
      const std::string name = e.path().filename().string();
      if (name.rfind("round_", 0) == 0 && e.path().extension() == ".json")
        snaps.emplace_back(std::stoi(name.substr(6, name.size() - 11)), e.path());
    }
  std::sort(snaps.begin(), snaps.end());
  for (const auto& [round, path] : snaps) {
    const Ensemble ens = io::ensemble_from_json(json::parse(io::read_file(path)), cfg.ensemble);
    csv += ctx.metrics(ens, round, rule);
  }

  if (fs::exists(a.posterior()) && fs::exists(a.posterior_meta())) {
    const json meta = json::parse(io::read_file(a.posterior_meta()));
    const Vector x_obs = io::vector_from_json(meta.at("x_obs"));
    const int round = meta.at("round").get<int>();
    const auto samples = io::read_posterior_csv(a.posterior()).second;
    const PpcReport r = ppc(samples, ctx.simulator(), x_obs, cfg.seed, cfg.ppc_max_samples);
    const std::string id = cfg.run_id();
    csv += io::metric_row(id, rule, round, "ppc_n", static_cast<double>(r.n));
    csv += io::metric_row(id, rule, round, "ppc_failed", static_cast<double>(r.failed));
    if (ctx.simulator().head().kind == HeadKind::Categorical) {
      csv += io::metric_row(id, rule, round, "ppc_match", r.match_fraction);
      csv += io::metric_row(id, rule, round, "ppc_within_one", r.within_one_fraction);
    } else {
      csv += io::metric_row(id, rule, round, "ppc_correlation", r.correlation);
      csv += io::metric_row(id, rule, round, "ppc_mean_abs_residual", r.mean_abs_residual);
      csv += io::metric_row(id, rule, round, "ppc_rms_residual", r.rms_residual);
    }
  }
  io::write_file(a.evaluation(), csv);
  return csv;
}

// ---------------------------------------------------------------------------

struct MetricRow {
  std::string run_id, rule;
  int round;
  std::string metric;
  double value;
};

inline std::vector<MetricRow> read_metrics(const fs::path& csv) {
  std::vector<MetricRow> rows;
  std::stringstream in(io::read_file(csv));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
    if (f.size() != 5) throw ConfigError("metrics: malformed row in " + csv.string());
    rows.push_back({f[0], f[1], std::stoi(f[2]), f[3], std::strtod(f[4].c_str(), nullptr)});
  }
  return rows;
}

/// Aggregates several archives into plot-ready tables in `dest`:
///   curves.csv        metric,rule,round,n,mean,sem,median across runs
///   metrics.csv       all per-run rows
///   acquisitions.csv  run_id,round,rule,objective,fallback,theta_1..p
/// Output depends only on the archives, so re-running gives identical bytes.
inline void export_archives(std::vector<fs::path> archives, const fs::path& dest) {
  std::sort(archives.begin(), archives.end());
  fs::create_directories(dest);
  std::string all = io::kMetricsHeader, acq = "run_id,round,rule,objective,fallback";
  std::map<std::tuple<std::string, std::string, int>, std::vector<double>> groups;
  int max_p = 0;
  std::vector<std::string> acq_rows;
  for (const auto& dir : archives) {
    const ArchivePaths a{dir};
    const RunConfig cfg = load_archive_config(dir);
    for (const auto& r : read_metrics(a.metrics())) {
      all += io::metric_row(r.run_id, r.rule, r.round, r.metric, r.value);
      groups[{r.metric, r.rule, r.round}].push_back(r.value);
    }
    std::stringstream in(io::read_file(a.acquisitions()));
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      std::string row = cfg.run_id() + "," + std::to_string(j.at("round").get<int>()) + "," +
                        j.at("rule").get<std::string>() + "," +
                        (j.at("objective").is_null() ? std::string("nan") : io::format_double(j.at("objective").get<double>())) +
                        "," + (j.at("fallback").get<bool>() ? "1" : "0");
      const auto theta = j.at("theta").get<std::vector<double>>();
      max_p = std::max(max_p, static_cast<int>(theta.size()));
      for (double t : theta) row += "," + io::format_double(t);
      acq_rows.push_back(row + "\n");
    }
  }
  std::string curves = "metric,rule,round,n,mean,sem,median\n";
  for (auto& [key, v] : groups) {
    const auto& [metric, rule, round] = key;
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sem = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size();
    const double median = k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
    curves += metric + "," + rule + "," + std::to_string(round) + "," + std::to_string(k) + "," + io::format_double(mean) +
              "," + io::format_double(sem) + "," + io::format_double(median) + "\n";
  }
  for (int i = 1; i <= max_p; ++i) acq += ",theta_" + std::to_string(i);
  acq += "\n";
  for (const auto& r : acq_rows) acq += r;
  io::write_file(dest / "curves.csv", curves);
  io::write_file(dest / "metrics.csv", all);
  io::write_file(dest / "acquisitions.csv", acq);
}

}  // namespace emunet::runner
