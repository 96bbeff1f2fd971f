#pragma once
// Single-compartment Hodgkin-Huxley neuron (Pospischil et al. 2008 kinetics:
// Traub-Miles Na/K plus a slow M-type K current) driven by a step current.
// The free parameters are the maximal Na and K conductances; the output is
// the spike-count class 0..4, or 5 for "5 or more".

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "emunet/errors.hpp"
#include "emunet/heads.hpp"
#include "emunet/prior.hpp"
#include "emunet/random.hpp"
#include "emunet/simulators.hpp"

namespace emunet {

/// Membrane constants. Units: mV, ms, mS/cm^2, uF/cm^2, uA/cm^2.
/// The versioned copy with sources lives in configs/hh_constants.yaml.
struct HhConstants {
  double c_m = 1.0;
  double e_na = 53.0;
  double e_k = -107.0;
  double e_leak = -70.0;
  double g_leak = 0.1;
  double g_m = 0.07;
  double tau_max = 600.0;
  double v_t = -60.0;
};

/// Stimulation, integration and spike-detection settings.
struct HhProtocol {
  double amplitude = 5.0;  // step current, uA/cm^2
  double onset = 10.0;
  double duration = 25.0;
  double t_end = 55.0;
  double dt = 0.025;
  double v_init = -70.0;
  double spike_threshold = -20.0;
  double refractory = 1.0;
  double noise_sd = 0.0;  // zero-mean white current noise; 0 = deterministic
  std::string integrator = "rk4";  // or "exp_euler": exponential Euler gates, forward Euler V
  int max_class = 5;      // counts >= max_class collapse into this class
};

struct HhSimSpec {
  HhConstants constants;
  HhProtocol protocol;
  double g_na_lo = 0.5, g_na_hi = 60.0;
  double g_k_lo = 0.5, g_k_hi = 10.0;
};

struct HhGates {
  double m, h, n, p;
};

/// Steady states and time constants of the gating variables at voltage v.
struct HhKinetics {
  double m_inf, tau_m, h_inf, tau_h, n_inf, tau_n, p_inf, tau_p;
};

namespace detail {
// x / (exp(x / y) - 1), continuous at x = 0.
inline double vtrap(double x, double y) {
  const double r = x / y;
  if (std::abs(r) < 1e-6) return y * (1.0 - 0.5 * r);
  return x / std::expm1(r);
}
}  // namespace detail

inline HhKinetics hh_kinetics(const HhConstants& c, double v) {
  const double u = v - c.v_t;
  const double a_m = 0.32 * detail::vtrap(-(u - 13.0), 4.0);
  const double b_m = 0.28 * detail::vtrap(u - 40.0, 5.0);
  const double a_h = 0.128 * std::exp(-(u - 17.0) / 18.0);
  const double b_h = 4.0 / (1.0 + std::exp(-(u - 40.0) / 5.0));
  const double a_n = 0.032 * detail::vtrap(-(u - 15.0), 5.0);
  const double b_n = 0.5 * std::exp(-(u - 10.0) / 40.0);
  HhKinetics k{};
  k.m_inf = a_m / (a_m + b_m);
  k.tau_m = 1.0 / (a_m + b_m);
  k.h_inf = a_h / (a_h + b_h);
  k.tau_h = 1.0 / (a_h + b_h);
  k.n_inf = a_n / (a_n + b_n);
  k.tau_n = 1.0 / (a_n + b_n);
  k.p_inf = 1.0 / (1.0 + std::exp(-(v + 35.0) / 10.0));
  k.tau_p = c.tau_max / (3.3 * std::exp((v + 35.0) / 20.0) + std::exp(-(v + 35.0) / 20.0));
  return k;
}

struct HhRun {
  int spikes = 0;
  std::vector<double> voltage;  // filled only when a trace was requested
  double v_final = 0.0;
};

class HodgkinHuxleySimulator final : public Simulator {
 public:
  explicit HodgkinHuxleySimulator(HhSimSpec spec = {})
      : spec_(spec), prior_(Vector{{spec.g_na_lo, spec.g_k_lo}}, Vector{{spec.g_na_hi, spec.g_k_hi}}) {}

  std::string name() const override { return "hh"; }
  const BoxPrior& prior() const override { return prior_; }
  HeadSpec head() const override { return HeadSpec::categorical(spec_.protocol.max_class + 1); }
  const HhSimSpec& spec() const { return spec_; }

  /// Integrates the membrane equation. "rk4" steps the full state
  /// (V, m, h, n, p) with classic Runge-Kutta; "exp_euler" uses exponential
  /// Euler for the gates and forward Euler for V. The input current is held
  /// fixed within a step.
  HhRun integrate(const ParamVector& theta, Rng& rng, bool keep_trace = false, double dt_override = 0.0) const {
    check_theta(theta);
    const HhProtocol& pr = spec_.protocol;
    const bool rk4 = pr.integrator == "rk4";
    if (!rk4 && pr.integrator != "exp_euler") throw ConfigError("hh: unknown integrator '" + pr.integrator + "'");
    const double dt = dt_override > 0.0 ? dt_override : pr.dt;
    const long steps = std::lround(pr.t_end / dt);
    std::normal_distribution<double> n01;
    double v = pr.v_init;
    const HhKinetics k0 = hh_kinetics(spec_.constants, v);
    HhGates x{k0.m_inf, k0.h_inf, k0.n_inf, k0.p_inf};
    HhRun run;
    if (keep_trace) run.voltage.reserve(static_cast<std::size_t>(steps + 1));
    if (keep_trace) run.voltage.push_back(v);
    double last_spike = -1e300;
    for (long s = 0; s < steps; ++s) {
      const double t = s * dt;
      double i_in = (t >= pr.onset && t < pr.onset + pr.duration) ? pr.amplitude : 0.0;
      if (pr.noise_sd > 0.0) i_in += pr.noise_sd * n01(rng) / std::sqrt(dt);
      double v_next = 0.0;
      if (rk4) {
        v_next = rk4_step(theta, v, x, i_in, dt);
      } else {
        const double dv = dvdt(theta, v, x, i_in);
        const HhKinetics k = hh_kinetics(spec_.constants, v);
        x.m = k.m_inf + (x.m - k.m_inf) * std::exp(-dt / k.tau_m);
        x.h = k.h_inf + (x.h - k.h_inf) * std::exp(-dt / k.tau_h);
        x.n = k.n_inf + (x.n - k.n_inf) * std::exp(-dt / k.tau_n);
        x.p = k.p_inf + (x.p - k.p_inf) * std::exp(-dt / k.tau_p);
        v_next = v + dt * dv;
      }
      check_gates(x, theta);
      if (!std::isfinite(v_next) || std::abs(v_next) > 200.0)
        throw SimulatorError("hh: membrane potential diverged for theta = (" + std::to_string(theta(0)) + ", " +
                             std::to_string(theta(1)) + ")");
      const double t_next = t + dt;
      if (v < pr.spike_threshold && v_next >= pr.spike_threshold && t_next - last_spike >= pr.refractory) {
        ++run.spikes;
        last_spike = t_next;
      }
      v = v_next;
      if (keep_trace) run.voltage.push_back(v);
    }
    run.v_final = v;
    return run;
  }

  int spike_class(int spikes) const { return std::min(spikes, spec_.protocol.max_class); }

  DataVector simulate(const ParamVector& theta, Rng& rng) const override {
    Vector x(1);
    x(0) = spike_class(integrate(theta, rng).spikes);
    return x;
  }

 private:
  double dvdt(const ParamVector& theta, double v, const HhGates& x, double i_in) const {
    const HhConstants& c = spec_.constants;
    const double m3h = x.m * x.m * x.m * x.h;
    const double n4 = x.n * x.n * x.n * x.n;
    return (c.g_leak * (c.e_leak - v) + theta(0) * m3h * (c.e_na - v) + theta(1) * n4 * (c.e_k - v) +
            c.g_m * x.p * (c.e_k - v) + i_in) /
           c.c_m;
  }

  // Returns V after one step and updates the gates in place.
  double rk4_step(const ParamVector& theta, double v, HhGates& x, double i_in, double dt) const {
    struct D {
      double v, m, h, n, p;
    };
    auto f = [&](double vv, const HhGates& g) {
      const HhKinetics k = hh_kinetics(spec_.constants, vv);
      return D{dvdt(theta, vv, g, i_in), (k.m_inf - g.m) / k.tau_m, (k.h_inf - g.h) / k.tau_h,
               (k.n_inf - g.n) / k.tau_n, (k.p_inf - g.p) / k.tau_p};
    };
    auto shift = [&](double a, const D& d) {
      return std::pair{v + a * d.v, HhGates{x.m + a * d.m, x.h + a * d.h, x.n + a * d.n, x.p + a * d.p}};
    };
    const D k1 = f(v, x);
    auto [v2, g2] = shift(0.5 * dt, k1);
    const D k2 = f(v2, g2);
    auto [v3, g3] = shift(0.5 * dt, k2);
    const D k3 = f(v3, g3);
    auto [v4, g4] = shift(dt, k3);
    const D k4 = f(v4, g4);
    const double w = dt / 6.0;
    x.m += w * (k1.m + 2 * k2.m + 2 * k3.m + k4.m);
    x.h += w * (k1.h + 2 * k2.h + 2 * k3.h + k4.h);
    x.n += w * (k1.n + 2 * k2.n + 2 * k3.n + k4.n);
    x.p += w * (k1.p + 2 * k2.p + 2 * k3.p + k4.p);
    return v + w * (k1.v + 2 * k2.v + 2 * k3.v + k4.v);
  }

  static void check_gates(HhGates& x, const ParamVector& theta) {
    for (double* g : {&x.m, &x.h, &x.n, &x.p}) {
      if (!(*g >= -1e-12 && *g <= 1.0 + 1e-12))
        throw SimulatorError("hh: gating variable left [0, 1] for theta = (" + std::to_string(theta(0)) + ", " +
                             std::to_string(theta(1)) + ")");
      *g = std::clamp(*g, 0.0, 1.0);
    }
  }

  HhSimSpec spec_;
  BoxPrior prior_;
};

/// Spike class at the centres of an n_na x n_k grid over the prior box.
/// Entry (i, j) is g_Na index i, g_K index j. Each cell uses its own RNG stream.
struct HhGrid {
  Vector g_na;
  Vector g_k;
  Eigen::MatrixXi classes;
};

inline HhGrid hh_grid_reference(const HodgkinHuxleySimulator& sim, int n_na, int n_k, std::uint64_t seed,
                                double dt_override = 0.0) {
  const BoxPrior& pr = sim.prior();
  HhGrid g;
  g.g_na.resize(n_na);
  g.g_k.resize(n_k);
  for (int i = 0; i < n_na; ++i) g.g_na(i) = pr.lower(0) + (i + 0.5) * (pr.upper(0) - pr.lower(0)) / n_na;
  for (int j = 0; j < n_k; ++j) g.g_k(j) = pr.lower(1) + (j + 0.5) * (pr.upper(1) - pr.lower(1)) / n_k;
  g.classes.resize(n_na, n_k);
  for (int i = 0; i < n_na; ++i) {
    for (int j = 0; j < n_k; ++j) {
      Rng rng = stream(seed, "hh-grid", {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)});
      g.classes(i, j) = sim.spike_class(sim.integrate(Vector{{g.g_na(i), g.g_k(j)}}, rng, false, dt_override).spikes);
    }
  }
  return g;
}

}  // namespace emunet
