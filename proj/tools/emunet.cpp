// emunet: run, resume, sample, evaluate and export emulator-network experiments.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "emunet/config.hpp"
#include "emunet/io.hpp"
#include "emunet/runner.hpp"

namespace {

using namespace emunet;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kSimulator = 3, kNumerical = 4 };

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) {
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str()) throw ConfigError("cannot parse number '" + cell + "'");
    out.push_back(v);
  }
  return out;
}

Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

struct Overrides {
  std::string config;
  std::optional<long long> seed;
  std::optional<std::string> rule;
  std::optional<int> rounds;

  RunConfig load() const {
    RunConfig cfg = config.empty() ? RunConfig() : RunConfig::from_file(config);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (rule) cfg.set("acquisition.rule", *rule);
    if (rounds) cfg.set("loop.rounds", std::to_string(*rounds));
    return cfg;
  }
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--rule", o.rule, "acquisition rule")->check(CLI::IsMember({"maxvar", "maxinf", "uniform"}));
  cmd->add_option("--rounds", o.rounds, "acquisition budget")->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Likelihood-free inference with emulator-network ensembles"};
  app.require_subcommand(1);

  Overrides run_o;
  std::string run_out;
  bool resume = false, quiet = false;
  int stop_after = -1, repeats = 1;
  auto* run = app.add_subcommand("run", "run (or resume) the acquisition loop");
  run->add_option("--config", run_o.config, "YAML configuration")->check(CLI::ExistingFile);
  run->add_option("--out", run_out, "archive directory")->required();
  add_overrides(run, run_o);
  run->add_flag("--resume", resume, "continue from the archive checkpoint");
  run->add_option("--stop-after", stop_after, "stop after this round (resume later)");
  run->add_flag("--quiet", quiet, "no progress output");
  run->add_option("--repeats", repeats, "independent runs with seeds seed..seed+N-1, one archive each under --out")
      ->check(CLI::PositiveNumber);

  std::string sp_archive, sp_observed, sp_observed_file, sp_out;
  auto* sp = app.add_subcommand("sample-posterior", "HMC posterior for an observation");
  sp->add_option("--out", sp_archive, "archive directory")->required()->check(CLI::ExistingDirectory);
  sp->add_option("--observed", sp_observed, "comma-separated observation (default: configured x_o)");
  sp->add_option("--observed-file", sp_observed_file, "JSON array with the observation")->check(CLI::ExistingFile);
  sp->add_option("--csv", sp_out, "output CSV (default: <archive>/posterior.csv)");

  std::string ev_archive;
  auto* ev = app.add_subcommand("evaluate", "recompute metrics from an archive");
  ev->add_option("--out", ev_archive, "archive directory")->required()->check(CLI::ExistingDirectory);

  std::vector<std::string> ex_archives;
  std::string ex_dest;
  auto* ex = app.add_subcommand("export", "aggregate archives into plot-ready CSVs");
  ex->add_option("archives", ex_archives, "archive directories")->required()->check(CLI::ExistingDirectory);
  ex->add_option("--out", ex_dest, "destination directory")->required();

  Overrides sim_o;
  std::string sim_theta;
  auto* sim = app.add_subcommand("simulate", "one simulation at a parameter, printed as JSON");
  sim->add_option("--config", sim_o.config, "YAML configuration")->check(CLI::ExistingFile);
  sim->add_option("--theta", sim_theta, "comma-separated parameter")->required();
  add_overrides(sim, sim_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfig;
  }

  try {
    if (*run) {
      const RunConfig base = run_o.load();
      runner::RunOptions opt;
      opt.resume = resume;
      opt.stop_after = stop_after;
      opt.log = quiet ? nullptr : &std::cerr;
      for (int k = 0; k < repeats; ++k) {
        RunConfig cfg = base;
        fs::path out = run_out;
        if (repeats > 1) {
          cfg.set("seed", std::to_string(base.seed + static_cast<std::uint64_t>(k)));
          out /= cfg.run_id();
        }
        const auto res = runner::run(cfg, out, opt);
        std::cout << out.string() << ": rounds completed: " << res.last_round << ", records: " << res.records
                  << (res.early_stopped ? " (early stop)" : "")
                  << (res.interrupted ? " (stopped; resume with --resume)" : "") << "\n";
      }
    } else if (*sp) {
      std::optional<Vector> x;
      if (!sp_observed.empty()) x = to_vector(parse_list(sp_observed));
      if (!sp_observed_file.empty())
        x = io::vector_from_json(io::json::parse(io::read_file(sp_observed_file)));
      std::optional<fs::path> csv;
      if (!sp_out.empty()) csv = sp_out;
      const auto set = runner::sample_posterior(sp_archive, x, csv);
      std::cout << "posterior samples: " << set.total() << "\n";
    } else if (*ev) {
      runner::evaluate(ev_archive);
      std::cout << "wrote " << (fs::path(ev_archive) / "evaluation.csv").string() << "\n";
    } else if (*ex) {
      std::vector<fs::path> dirs(ex_archives.begin(), ex_archives.end());
      runner::export_archives(dirs, ex_dest);
      std::cout << "wrote curves.csv, metrics.csv, acquisitions.csv to " << ex_dest << "\n";
    } else if (*sim) {
      const RunConfig cfg = sim_o.load();
      const auto s = cfg.make_simulator();
      Rng rng = stream(cfg.seed, "cli-simulate");
      const Vector x = s->simulate(to_vector(parse_list(sim_theta)), rng);
      std::cout << io::to_json(x).dump() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const SimulatorError& e) {
    std::cerr << "simulator failure: " << e.what() << "\n";
    return kSimulator;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
