#pragma once
// Run configuration: a YAML document validated against a fixed schema.
// Unknown keys and ill-typed values are errors.

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emunet/acquisition.hpp"
#include "emunet/ensemble.hpp"
#include "emunet/errors.hpp"
#include "emunet/hh.hpp"
#include "emunet/hmc.hpp"
#include "emunet/io.hpp"
#include "emunet/simulators.hpp"

namespace emunet {

enum class ValueType { Int, Double, Bool, String, IntList, DoubleList };

struct SchemaEntry {
  const char* key;
  ValueType type;
  const char* default_value;  // YAML literal
  const char* doc;
};

// clang-format off
inline const std::vector<SchemaEntry>& config_schema() {
  static const std::vector<SchemaEntry> schema = {
    {"experiment", ValueType::String, "run", "label used as run_id prefix in metrics"},
    {"seed", ValueType::Int, "1", "master seed; every random stream is derived from it"},
    {"simulator.kind", ValueType::String, "gaussian", "gaussian | blob | hh"},
    {"simulator.gaussian.dim", ValueType::Int, "1", "parameter and data dimension"},
    {"simulator.gaussian.repeats", ValueType::Int, "10", "draws averaged into one sample mean"},
    {"simulator.gaussian.noise_var", ValueType::Double, "0.1", "per-draw noise variance"},
    {"simulator.gaussian.prior_lo", ValueType::Double, "-8", "uniform prior lower bound"},
    {"simulator.gaussian.prior_hi", ValueType::Double, "8", "uniform prior upper bound"},
    {"simulator.gaussian.observed", ValueType::Double, "2", "observed sample mean (every coordinate)"},
    {"simulator.blob.size", ValueType::Int, "32", "image side length in pixels"},
    {"simulator.blob.sigma", ValueType::Double, "2", "blob width"},
    {"simulator.blob.trials", ValueType::Int, "255", "binomial total count per pixel"},
    {"simulator.blob.offset_lo", ValueType::Double, "-16", "offset prior lower bound"},
    {"simulator.blob.offset_hi", ValueType::Double, "16", "offset prior upper bound"},
    {"simulator.blob.gamma_lo", ValueType::Double, "0.25", "contrast prior lower bound"},
    {"simulator.blob.gamma_hi", ValueType::Double, "5", "contrast prior upper bound"},
    {"simulator.hh.constants_file", ValueType::String, "", "membrane constants YAML; empty = built-in values"},
    {"simulator.hh.amplitude", ValueType::Double, "5", "step current (uA/cm^2)"},
    {"simulator.hh.onset", ValueType::Double, "10", "step onset (ms)"},
    {"simulator.hh.duration", ValueType::Double, "25", "step duration (ms)"},
    {"simulator.hh.t_end", ValueType::Double, "55", "simulated time (ms)"},
    {"simulator.hh.dt", ValueType::Double, "0.025", "integration step (ms)"},
    {"simulator.hh.v_init", ValueType::Double, "-70", "initial membrane potential (mV)"},
    {"simulator.hh.spike_threshold", ValueType::Double, "-20", "upward-crossing threshold (mV)"},
    {"simulator.hh.refractory", ValueType::Double, "1", "spike detection lockout (ms)"},
    {"simulator.hh.noise_sd", ValueType::Double, "0", "white current noise amplitude; 0 = deterministic"},
    {"simulator.hh.integrator", ValueType::String, "rk4", "rk4 | exp_euler"},
    {"simulator.hh.g_na_lo", ValueType::Double, "0.5", "g_Na prior lower bound"},
    {"simulator.hh.g_na_hi", ValueType::Double, "60", "g_Na prior upper bound"},
    {"simulator.hh.g_k_lo", ValueType::Double, "0.5", "g_K prior lower bound"},
    {"simulator.hh.g_k_hi", ValueType::Double, "10", "g_K prior upper bound"},
    {"observed", ValueType::DoubleList, "[]", "observed data x_o; empty = simulator default"},
    {"observed_theta", ValueType::DoubleList, "[]", "if set, x_o is simulated at this parameter"},
    {"ensemble.members", ValueType::Int, "50", "ensemble size M"},
    {"ensemble.hidden", ValueType::IntList, "[10]", "hidden layer widths"},
    {"ensemble.activation", ValueType::String, "tanh", "tanh | relu"},
    {"ensemble.lr", ValueType::Double, "0.01", "Adam learning rate"},
    {"ensemble.beta1", ValueType::Double, "0.9", "Adam beta1"},
    {"ensemble.beta2", ValueType::Double, "0.999", "Adam beta2"},
    {"ensemble.epsilon", ValueType::Double, "1e-8", "Adam epsilon"},
    {"ensemble.epochs_initial", ValueType::Int, "500", "epochs on the initial sample (and on full retrains)"},
    {"ensemble.epochs_per_round", ValueType::Int, "100", "epochs after each acquisition when warm starting"},
    {"ensemble.batch_size", ValueType::Int, "0", "minibatch size; 0 = full batch"},
    {"ensemble.warm_start", ValueType::Bool, "true", "continue from previous weights instead of retraining"},
    {"ensemble.threads", ValueType::Int, "1", "members trained in parallel"},
    {"acquisition.rule", ValueType::String, "maxvar", "maxvar | maxinf | uniform"},
    {"acquisition.restarts", ValueType::Int, "20", "prior-drawn starting points"},
    {"acquisition.steps", ValueType::Int, "200", "Adam ascent steps per restart"},
    {"acquisition.lr", ValueType::Double, "0.05", "ascent learning rate"},
    {"acquisition.binomial_entropy", ValueType::String, "exact", "exact | gaussian_bound"},
    {"loop.t0", ValueType::Int, "10", "initial prior draws"},
    {"loop.rounds", ValueType::Int, "100", "acquisition budget"},
    {"loop.early_stop", ValueType::Bool, "false", "stop when the acquisition objective drops below the floor"},
    {"loop.objective_floor", ValueType::Double, "0", "early-stop threshold"},
    {"loop.snapshot_every", ValueType::Int, "10", "save ensemble weights every k rounds (and at the end)"},
    {"evaluation.every", ValueType::Int, "1", "evaluate metrics every k rounds (and at the end)"},
    {"evaluation.grid_1d", ValueType::Int, "1000", "grid points for 1-D total variation"},
    {"evaluation.grid_2d", ValueType::Int, "200", "grid points per axis for 2-D total variation"},
    {"evaluation.heldout", ValueType::Int, "100", "held-out pairs for predictive log-likelihood; 0 = off"},
    {"evaluation.ppc_max_samples", ValueType::Int, "2000", "posterior samples simulated in predictive checks"},
    {"hmc.step_size", ValueType::Double, "0", "initial leapfrog step; 0 = heuristic"},
    {"hmc.leapfrog_steps", ValueType::Int, "20", "leapfrog steps per proposal"},
    {"hmc.samples", ValueType::Int, "2000", "kept samples per member chain"},
    {"hmc.burn_in", ValueType::Int, "500", "adaptation iterations per chain"},
    {"hmc.target_accept", ValueType::Double, "0.8", "dual-averaging acceptance target"},
    {"hmc.init_candidates", ValueType::Int, "100", "prior draws scored to initialize each chain"},
    {"hmc.threads", ValueType::Int, "1", "chains run in parallel"},
  };
  return schema;
}
// clang-format on

inline const SchemaEntry* find_schema(const std::string& key) {
  for (const auto& e : config_schema())
    if (key == e.key) return &e;
  return nullptr;
}

/// Validated configuration. `values` holds every schema key with its
/// effective value; the typed accessors below are derived from it.
class RunConfig {
 public:
  RunConfig() { apply({}); }

  static RunConfig from_yaml(const std::string& text, const std::filesystem::path& base_dir = {}) {
    YAML::Node root;
    try {
      root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
      throw ConfigError(std::string("config: YAML parse error: ") + e.what());
    }
    std::map<std::string, YAML::Node> flat;
    if (root && !root.IsNull()) {
      if (!root.IsMap()) throw ConfigError("config: top level must be a mapping");
      flatten(root, "", flat);
    }
    RunConfig c;
    c.base_dir_ = base_dir;
    c.apply(flat);
    return c;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::string text;
    try {
      text = io::read_file(path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    return from_yaml(text, path.parent_path());
  }

  /// Overrides one key, e.g. set("acquisition.rule", "uniform").
  void set(const std::string& key, const std::string& yaml_value) {
    std::map<std::string, YAML::Node> flat;
    for (const auto& [k, v] : values_) flat[k] = YAML::Load(v);
    flat[key] = YAML::Load(yaml_value);
    apply(flat);
  }

  const std::string& get(const std::string& key) const { return values_.at(key); }

  /// Nested YAML with every key, in schema order.
  std::string dump() const {
    std::string out;
    std::vector<std::string> prev;
    for (const auto& e : config_schema()) {
      std::vector<std::string> parts;
      std::stringstream ss(e.key);
      for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
      std::size_t common = 0;
      while (common + 1 < parts.size() && common + 1 < prev.size() && parts[common] == prev[common]) ++common;
      for (std::size_t i = common; i + 1 < parts.size(); ++i)
        out += std::string(2 * i, ' ') + parts[i] + ":\n";
      out += std::string(2 * (parts.size() - 1), ' ') + parts.back() + ": " + values_.at(e.key) + "\n";
      prev = parts;
    }
    return out;
  }

  /// Fingerprint of everything except the round budget, so a run can be
  /// resumed with a larger budget.
  std::string hash() const {
    std::string canon;
    for (const auto& e : config_schema())
      if (std::string(e.key) != "loop.rounds") canon += std::string(e.key) + "=" + values_.at(e.key) + "\n";
    return io::hex(io::fingerprint(canon));
  }

  // Typed views -------------------------------------------------------------
  std::string experiment;
  std::uint64_t seed = 1;
  std::string simulator_kind;
  GaussianSimSpec gaussian;
  BlobSimSpec blob;
  HhSimSpec hh;
  std::string hh_constants_file;  // resolved path or empty
  std::vector<double> observed;
  std::vector<double> observed_theta;
  EnsembleConfig ensemble;
  AcquisitionConfig acquisition;
  int t0 = 10;
  int rounds = 100;
  bool early_stop = false;
  double objective_floor = 0.0;
  int snapshot_every = 10;
  int eval_every = 1;
  int grid_1d = 1000;
  int grid_2d = 200;
  int heldout = 100;
  int ppc_max_samples = 2000;
  HmcConfig hmc;

  std::string run_id() const { return experiment + "_seed" + std::to_string(seed); }

  std::unique_ptr<Simulator> make_simulator() const {
    if (simulator_kind == "gaussian") return std::make_unique<GaussianSimulator>(gaussian);
    if (simulator_kind == "blob") return std::make_unique<BlobSimulator>(blob);
    if (simulator_kind == "hh") return std::make_unique<HodgkinHuxleySimulator>(hh);
    throw ConfigError("unknown simulator '" + simulator_kind + "'");
  }

  /// The observation x_o, if the configuration defines one.
  std::optional<Vector> observed_data(const Simulator& sim) const {
    if (!observed.empty()) {
      if (static_cast<int>(observed.size()) != sim.data_dim())
        throw ConfigError("observed: expected " + std::to_string(sim.data_dim()) + " values");
      return Eigen::Map<const Vector>(observed.data(), static_cast<Eigen::Index>(observed.size()));
    }
    if (!observed_theta.empty()) {
      if (static_cast<int>(observed_theta.size()) != sim.param_dim())
        throw ConfigError("observed_theta: expected " + std::to_string(sim.param_dim()) + " values");
      Rng rng = stream(seed, "observed");
      return sim.simulate(Eigen::Map<const Vector>(observed_theta.data(), static_cast<Eigen::Index>(observed_theta.size())), rng);
    }
    if (auto* g = dynamic_cast<const GaussianSimulator*>(&sim)) return g->observed();
    return std::nullopt;
  }

 private:
  static void flatten(const YAML::Node& node, const std::string& prefix, std::map<std::string, YAML::Node>& out) {
    for (const auto& kv : node) {
      const std::string key = prefix.empty() ? kv.first.as<std::string>() : prefix + "." + kv.first.as<std::string>();
      if (kv.second.IsMap())
        flatten(kv.second, key, out);
      else
        out[key] = kv.second;
    }
  }

  template <class T>
  static T as(const YAML::Node& n, const std::string& key, const char* type) {
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError("config: '" + key + "' must be " + type);
    }
  }

  static std::string canonical(const YAML::Node& n, const SchemaEntry& e) {
    const std::string key = e.key;
    switch (e.type) {
      case ValueType::Int: return std::to_string(as<long long>(n, key, "an integer"));
      case ValueType::Double: return io::format_double(as<double>(n, key, "a number"));
      case ValueType::Bool: return as<bool>(n, key, "a boolean") ? "true" : "false";
      case ValueType::String: {
        const std::string s = n.IsNull() ? std::string() : as<std::string>(n, key, "a string");
        YAML::Emitter em;
        em << YAML::DoubleQuoted << s;
        return em.c_str();
      }
      case ValueType::IntList: {
        if (!n.IsSequence()) throw ConfigError("config: '" + key + "' must be a list of integers");
        std::string s = "[";
        for (std::size_t i = 0; i < n.size(); ++i) s += (i ? ", " : "") + std::to_string(as<long long>(n[i], key, "a list of integers"));
        return s + "]";
      }
      case ValueType::DoubleList: {
        if (!n.IsSequence()) throw ConfigError("config: '" + key + "' must be a list of numbers");
        std::string s = "[";
        for (std::size_t i = 0; i < n.size(); ++i) s += (i ? ", " : "") + io::format_double(as<double>(n[i], key, "a list of numbers"));
        return s + "]";
      }
    }
    return {};
  }

  void apply(const std::map<std::string, YAML::Node>& flat) {
    for (const auto& [k, v] : flat)
      if (!find_schema(k)) throw ConfigError("config: unknown key '" + k + "'");
    values_.clear();
    for (const auto& e : config_schema()) {
      auto it = flat.find(e.key);
      values_[e.key] = canonical(it != flat.end() ? it->second : YAML::Load(e.default_value), e);
    }
    derive();
  }

  long long i(const std::string& k) const { return YAML::Load(values_.at(k)).as<long long>(); }
  double d(const std::string& k) const { return YAML::Load(values_.at(k)).as<double>(); }
  bool b(const std::string& k) const { return YAML::Load(values_.at(k)).as<bool>(); }
  std::string s(const std::string& k) const { return YAML::Load(values_.at(k)).as<std::string>(); }
  std::vector<double> dl(const std::string& k) const { return YAML::Load(values_.at(k)).as<std::vector<double>>(); }
  std::vector<int> il(const std::string& k) const { return YAML::Load(values_.at(k)).as<std::vector<int>>(); }

  void derive() {
    experiment = s("experiment");
    seed = static_cast<std::uint64_t>(i("seed"));
    simulator_kind = s("simulator.kind");
    if (simulator_kind != "gaussian" && simulator_kind != "blob" && simulator_kind != "hh")
      throw ConfigError("config: simulator.kind must be gaussian, blob or hh");

    gaussian = {static_cast<int>(i("simulator.gaussian.dim")), static_cast<int>(i("simulator.gaussian.repeats")),
                d("simulator.gaussian.noise_var"), d("simulator.gaussian.prior_lo"), d("simulator.gaussian.prior_hi"),
                d("simulator.gaussian.observed")};
    if (gaussian.dim < 1 || gaussian.repeats < 1 || gaussian.noise_var <= 0)
      throw ConfigError("config: invalid gaussian simulator settings");
    blob.size = static_cast<int>(i("simulator.blob.size"));
    blob.sigma = d("simulator.blob.sigma");
    blob.trials = static_cast<int>(i("simulator.blob.trials"));
    blob.offset_lo = d("simulator.blob.offset_lo");
    blob.offset_hi = d("simulator.blob.offset_hi");
    blob.gamma_lo = d("simulator.blob.gamma_lo");
    blob.gamma_hi = d("simulator.blob.gamma_hi");
    if (blob.size < 1 || blob.trials < 1 || blob.sigma <= 0) throw ConfigError("config: invalid blob settings");

    hh = HhSimSpec{};
    hh_constants_file = s("simulator.hh.constants_file");
    if (!hh_constants_file.empty()) {
      std::filesystem::path p(hh_constants_file);
      if (p.is_relative() && !base_dir_.empty()) p = base_dir_ / p;
      hh_constants_file = std::filesystem::absolute(p).lexically_normal().string();
      // archives copy config.yaml elsewhere, so keep the resolved path
      YAML::Emitter em;
      em << YAML::DoubleQuoted << hh_constants_file;
      values_["simulator.hh.constants_file"] = em.c_str();
      hh.constants = load_hh_constants(hh_constants_file);
    }
    auto& pr = hh.protocol;
    pr.amplitude = d("simulator.hh.amplitude");
    pr.onset = d("simulator.hh.onset");
    pr.duration = d("simulator.hh.duration");
    pr.t_end = d("simulator.hh.t_end");
    pr.dt = d("simulator.hh.dt");
    pr.v_init = d("simulator.hh.v_init");
    pr.spike_threshold = d("simulator.hh.spike_threshold");
    pr.refractory = d("simulator.hh.refractory");
    pr.noise_sd = d("simulator.hh.noise_sd");
    pr.integrator = s("simulator.hh.integrator");
    if (pr.integrator != "rk4" && pr.integrator != "exp_euler")
      throw ConfigError("simulator.hh.integrator must be rk4 or exp_euler");
    hh.g_na_lo = d("simulator.hh.g_na_lo");
    hh.g_na_hi = d("simulator.hh.g_na_hi");
    hh.g_k_lo = d("simulator.hh.g_k_lo");
    hh.g_k_hi = d("simulator.hh.g_k_hi");
    if (pr.dt <= 0 || pr.t_end <= 0 || pr.noise_sd < 0) throw ConfigError("config: invalid hh protocol");

    observed = dl("observed");
    observed_theta = dl("observed_theta");

    ensemble.members = static_cast<int>(i("ensemble.members"));
    ensemble.hidden = il("ensemble.hidden");
    ensemble.activation = activation_from_string(s("ensemble.activation"));
    ensemble.adam = {d("ensemble.lr"), d("ensemble.beta1"), d("ensemble.beta2"), d("ensemble.epsilon")};
    ensemble.epochs_initial = static_cast<int>(i("ensemble.epochs_initial"));
    ensemble.epochs_per_round = static_cast<int>(i("ensemble.epochs_per_round"));
    ensemble.batch_size = static_cast<int>(i("ensemble.batch_size"));
    ensemble.warm_start = b("ensemble.warm_start");
    ensemble.threads = static_cast<int>(i("ensemble.threads"));
    if (ensemble.members < 1) throw ConfigError("config: ensemble.members must be >= 1");
    for (int h : ensemble.hidden)
      if (h < 1) throw ConfigError("config: hidden widths must be positive");
    if (ensemble.adam.lr <= 0 || ensemble.epochs_initial < 0 || ensemble.epochs_per_round < 0 || ensemble.batch_size < 0)
      throw ConfigError("config: invalid ensemble training settings");

    acquisition.rule = rule_from_string(s("acquisition.rule"));
    acquisition.restarts = static_cast<int>(i("acquisition.restarts"));
    acquisition.steps = static_cast<int>(i("acquisition.steps"));
    acquisition.lr = d("acquisition.lr");
    acquisition.binomial_entropy = entropy_mode_from_string(s("acquisition.binomial_entropy"));
    if (acquisition.restarts < 1 || acquisition.steps < 0) throw ConfigError("config: invalid acquisition settings");

    t0 = static_cast<int>(i("loop.t0"));
    rounds = static_cast<int>(i("loop.rounds"));
    early_stop = b("loop.early_stop");
    objective_floor = d("loop.objective_floor");
    snapshot_every = static_cast<int>(i("loop.snapshot_every"));
    if (t0 < 1) throw ConfigError("config: loop.t0 must be >= 1");
    if (rounds < 0) throw ConfigError("config: loop.rounds must be >= 0");

    eval_every = static_cast<int>(i("evaluation.every"));
    grid_1d = static_cast<int>(i("evaluation.grid_1d"));
    grid_2d = static_cast<int>(i("evaluation.grid_2d"));
    heldout = static_cast<int>(i("evaluation.heldout"));
    ppc_max_samples = static_cast<int>(i("evaluation.ppc_max_samples"));
    if (eval_every < 1 || snapshot_every < 1) throw ConfigError("config: cadences must be >= 1");

    hmc.initial_step = d("hmc.step_size");
    hmc.leapfrog_steps = static_cast<int>(i("hmc.leapfrog_steps"));
    hmc.samples = static_cast<int>(i("hmc.samples"));
    hmc.burn_in = static_cast<int>(i("hmc.burn_in"));
    hmc.target_accept = d("hmc.target_accept");
    hmc.init_candidates = static_cast<int>(i("hmc.init_candidates"));
    hmc.threads = static_cast<int>(i("hmc.threads"));
    hmc.validate();
  }

 public:
  static HhConstants load_hh_constants(const std::string& path) {
    YAML::Node n;
    try {
      n = YAML::LoadFile(path);
    } catch (const YAML::Exception& e) {
      throw ConfigError("hh constants: cannot load " + path + ": " + e.what());
    }
    HhConstants c;
    const std::map<std::string, double*> fields = {{"c_m", &c.c_m},       {"e_na", &c.e_na},   {"e_k", &c.e_k},
                                                   {"e_leak", &c.e_leak}, {"g_leak", &c.g_leak}, {"g_m", &c.g_m},
                                                   {"tau_max", &c.tau_max}, {"v_t", &c.v_t}};
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      auto it = fields.find(key);
      if (it == fields.end()) throw ConfigError("hh constants: unknown key '" + key + "'");
      *it->second = as<double>(kv.second, key, "a number");
    }
    return c;
  }

 private:
  std::map<std::string, std::string> values_;
  std::filesystem::path base_dir_;
};

}  // namespace emunet
