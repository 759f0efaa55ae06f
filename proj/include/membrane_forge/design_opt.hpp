#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/tools/toms748_solve.hpp>

#include "membrane_forge/dataset.hpp"
#include "membrane_forge/ensemble.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/membrane_sim.hpp"
#include "membrane_forge/optim.hpp"
#include "membrane_forge/surrogate.hpp"

namespace mforge {

inline constexpr double kGravity = 9.81;  // m/s^2

/// Force and its sensitivities at one (design, h, p).
struct ForceEval {
  double f = 0.0;       ///< [N]
  double df_dh = 0.0;   ///< [N/mm]
  double df_dp = 0.0;   ///< [N/kPa]
  double df_dt = 0.0;
  double df_dr0 = 0.0;
  std::vector<std::array<double, 2>> df_drings;  ///< (centre, half width), design ring order

  static ForceEval value(double f) {
    ForceEval e;
    e.f = f;
    return e;
  }
};

/// (design, h [mm], p [kPa], want_gradient) -> force. Gradients may be left
/// zero when want_gradient is false.
using ForceModel = std::function<ForceEval(const MembraneDesign&, double, double, bool)>;

inline ForceModel surrogate_force_model(nn::SurrogateModel m) {
  return [m = std::move(m)](const MembraneDesign& d, double h, double p, bool grad) {
    if (!grad) return ForceEval::value(nn::predict_force(m, d, h, p));
    const auto g = nn::predict_force_gradient(m, d, h, p);
    return ForceEval{g.force, g.d_height, g.d_pressure, g.d_thickness, g.d_contact_radius, g.d_rings};
  };
}

/// Ensemble mean as a force model.
inline ForceModel ensemble_force_model(RpnEnsemble e) {
  return [e = std::move(e)](const MembraneDesign& d, double h, double p, bool grad) {
    const nn::Architecture arch(e.config);
    ForceEval out;
    out.df_drings.assign(d.rings.size(), {0.0, 0.0});
    const double inv = 1.0 / static_cast<double>(e.size());
    for (const auto& m : e.members) {
      for (const auto* params : {&m.trainable, &m.prior}) {
        const double w = (params == &m.prior ? e.prior_scale : 1.0) * inv;
        if (!grad) {
          const auto c = nn::forward_batch(arch, *params, {nn::make_inputs(e.norm, d, h)}).coeffs;
          double s = 0.0;
          const auto phi = nn::pressure_basis(e.norm, p, arch.n_coeffs() - 1);
          for (Eigen::Index k = 0; k < c.rows(); ++k) s += c(k, 0) * phi[static_cast<std::size_t>(k)];
          out.f += w * e.norm.force.sd * s;
          continue;
        }
        nn::CoeffJacobian cj = nn::coeff_jacobian(arch, *params, e.norm, d, h);
        const auto g = nn::force_gradient_from(e.norm, cj, d, p);
        out.f += w * (g.force - e.norm.force.mean);
        out.df_dh += w * g.d_height;
        out.df_dp += w * g.d_pressure;
        out.df_dt += w * g.d_thickness;
        out.df_dr0 += w * g.d_contact_radius;
        for (std::size_t s = 0; s < d.rings.size(); ++s) {
          out.df_drings[s][0] += w * g.d_rings[s][0];
          out.df_drings[s][1] += w * g.d_rings[s][1];
        }
      }
    }
    out.f += e.norm.force.mean;
    return out;
  };
}

/// Simulator-backed force model (value only; gradients by finite differences
/// would cost a dozen BVP solves per call and are not provided).
inline ForceModel simulator_force_model(MaterialSet mats = {}, SolverConfig cfg = {}) {
  return [mats, cfg](const MembraneDesign& d, double h, double p, bool grad) {
    if (grad) throw ModelEvaluationFailed("the simulator force model has no gradients");
    try {
      return ForceEval::value(force_at_height(d, mats, p * 1e-3, h, cfg));
    } catch (const Error& e) {
      throw ModelEvaluationFailed(std::string("simulator: ") + e.what());
    }
  };
}

// ---------------------------------------------------------------------------
// Lift trajectories

struct TrajectorySample {
  double p_kpa = 0.0;
  double h_mm = 0.0;
  double f_n = 0.0;
  bool lifted = false;
};

struct Trajectory {
  double mass_kg = 0.0;
  std::vector<TrajectorySample> samples;
};

struct LiftOptions {
  double h_max = 70.0;    ///< [mm]
  double scan_step = 0.5; ///< [mm]
};

namespace detail {

inline double checked(double v, const char* what) {
  if (!std::isfinite(v)) throw ModelEvaluationFailed(std::string("non-finite force in ") + what);
  return v;
}

/// Smallest h in [h0, h_max] where F(h) falls to `target`, or nullopt when F
/// stays above it up to h_max. Requires F(h0) >= target.
inline std::optional<double> first_crossing(const std::function<double(double)>& F, double target,
                                            double h0, const LiftOptions& opt) {
  double a = h0;
  double fa = F(a) - target;
  if (fa == 0.0) return a;
  while (a < opt.h_max) {
    const double b = std::min(a + opt.scan_step, opt.h_max);
    const double fb = F(b) - target;
    if (fb <= 0.0) {
      if (fb == 0.0) return b;
      std::uintmax_t iters = 100;
      const auto [lo, hi] = boost::math::tools::toms748_solve(
          [&](double h) { return F(h) - target; }, a, b, fa, fb,
          boost::math::tools::eps_tolerance<double>(48), iters);
      return 0.5 * (lo + hi);
    }
    a = b;
    fa = fb;
  }
  return std::nullopt;
}

}  // namespace detail

/// Height reached under mass m at each pressure of an increasing sweep. Below
/// lift-off the plate rests at h = 0 and the sample records F(0, p).
inline Trajectory lift_trajectory(const ForceModel& model, const MembraneDesign& d, double mass_kg,
                                  const std::vector<double>& pressures_kpa,
                                  const LiftOptions& opt = {}) {
  if (!(mass_kg > 0.0)) throw ConfigError("mass must be positive");
  for (std::size_t i = 1; i < pressures_kpa.size(); ++i) {
    if (!(pressures_kpa[i] > pressures_kpa[i - 1])) throw ConfigError("pressures must increase");
  }
  const double w = mass_kg * kGravity;
  Trajectory t{mass_kg, {}};
  double prev_h = 0.0;
  for (double p : pressures_kpa) {
    auto F = [&](double h) { return detail::checked(model(d, h, p, false).f, "lift_trajectory"); };
    double start = prev_h;
    if (start > 0.0 && F(start) < w) start = 0.0;
    const double f0 = start == 0.0 ? F(0.0) : w;
    if (f0 < w) {
      t.samples.push_back({p, 0.0, std::max(f0, 0.0), false});
      prev_h = 0.0;
      continue;
    }
    const auto h = detail::first_crossing(F, w, start, opt);
    const double hv = h ? *h : opt.h_max;
    t.samples.push_back({p, hv, w, true});
    prev_h = hv;
  }
  return t;
}

/// Evenly spaced pressures (0, step, 2 step, ..., p_max].
inline std::vector<double> pressure_sweep(double p_max_kpa, double step_kpa = 0.05) {
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor(p_max_kpa / step_kpa + 1e-9));
  for (std::size_t i = 1; i <= n; ++i) out.push_back(static_cast<double>(i) * step_kpa);
  return out;
}

// ---------------------------------------------------------------------------
// Waypoint error

struct Waypoint {
  double p_kpa = 0.0;
  double h_mm = 0.0;
};

/// Squared scaled distance from a waypoint to the nearest trajectory sample.
inline double waypoint_error(const Trajectory& t, const Waypoint& w, double p_max, double h_max) {
  if (t.samples.empty()) throw EmptyInput("trajectory has no samples");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : t.samples) {
    const double dp = (s.p_kpa - w.p_kpa) / p_max;
    const double dh = (s.h_mm - w.h_mm) / h_max;
    best = std::min(best, dp * dp + dh * dh);
  }
  return best;
}

inline double trajectory_rmse(const Trajectory& t, const std::vector<Waypoint>& waypoints,
                              double p_max = 10.0, double h_max = 50.0) {
  if (waypoints.empty()) throw EmptyInput("no waypoints");
  double s = 0.0;
  for (const auto& w : waypoints) s += waypoint_error(t, w, p_max, h_max);
  return std::sqrt(s / static_cast<double>(waypoints.size()));
}

/// RMSE over all (trajectory, waypoint) pairs, e.g. three masses with three
/// waypoints each.
inline double trajectory_rmse(const std::vector<std::pair<Trajectory, std::vector<Waypoint>>>& sets,
                              double p_max = 10.0, double h_max = 50.0) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& [t, ws] : sets) {
    for (const auto& w : ws) {
      s += waypoint_error(t, w, p_max, h_max);
      ++n;
    }
  }
  if (n == 0) throw EmptyInput("no waypoints");
  return std::sqrt(s / static_cast<double>(n));
}

/// Waypoints on a trajectory at the given heights: the first lifted sample at
/// or above each height.
inline std::vector<Waypoint> waypoints_at_heights(const Trajectory& t, const std::vector<double>& heights) {
  std::vector<Waypoint> out;
  for (double h : heights) {
    for (const auto& s : t.samples) {
      if (s.lifted && s.h_mm >= h) {
        out.push_back({s.p_kpa, s.h_mm});
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Posterior

struct LiftTargets {
  std::vector<double> forces_n;       ///< one per target
  std::vector<double> pressures_kpa;  ///< same length as forces_n
  double k_force = 10.0;
  double k_pressure = 10.0;
  double k_height = 0.02;  ///< [1/mm]
  double gamma = 0.5;      ///< smooth-min temperature [1/mm]
  double p_max = 10.0;     ///< pressure scale and search limit [kPa]
  double f_scale = 40.0;   ///< force scale [N]
  double h_max = 70.0;     ///< [mm]
  double unreachable_penalty = 100.0;

  void validate() const {
    if (forces_n.empty() || forces_n.size() != pressures_kpa.size())
      throw ConfigError("targets need matching non-empty force and pressure lists");
    if (!(k_force > 0 && k_pressure > 0 && k_height > 0)) throw ConfigError("posterior weights must be positive");
    if (!(gamma > 0)) throw ConfigError("gamma must be positive");
    for (double p : pressures_kpa) {
      if (!(p >= 0.0 && p <= p_max)) throw ConfigError("target pressure outside [0, p_max]");
    }
  }

  static LiftTargets from_masses(const std::vector<double>& masses_kg, const std::vector<double>& p_kpa) {
    LiftTargets t;
    for (double m : masses_kg) t.forces_n.push_back(m * kGravity);
    t.pressures_kpa = p_kpa;
    if (t.pressures_kpa.size() == 1) t.pressures_kpa.assign(masses_kg.size(), p_kpa.front());
    return t;
  }
};

/// -(1/gamma) ln sum exp(-gamma h_i), computed around the minimum; also
/// returns the softmin weights (= d h_min / d h_i).
inline std::pair<double, std::vector<double>> smooth_min(const std::vector<double>& h, double gamma) {
  if (h.empty()) throw EmptyInput("smooth min of nothing");
  const double m = *std::min_element(h.begin(), h.end());
  double s = 0.0;
  std::vector<double> w(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    w[i] = std::exp(-gamma * (h[i] - m));
    s += w[i];
  }
  for (double& x : w) x /= s;
  return {m - std::log(s) / gamma, w};
}

struct PosteriorEval {
  double pi = 0.0;
  double h_min = 0.0;
  std::vector<double> heights;
  double f_error = 0.0;
  double p_error = 0.0;
  bool unreachable = false;
  ForceEval grad;  ///< dPi w.r.t. design parameters in df_dt, df_dr0, df_drings
};

inline PosteriorEval posterior(const ForceModel& model, const MembraneDesign& d,
                               const LiftTargets& tg, bool want_grad = true) {
  PosteriorEval out;
  out.grad.df_drings.assign(d.rings.size(), {0.0, 0.0});
  const std::size_t n = tg.forces_n.size();
  std::vector<ForceEval> dh(n);  // dh_i / dM, stored in ForceEval's design fields
  auto axpy = [](ForceEval& acc, double a, const ForceEval& x) {
    acc.df_dt += a * x.df_dt;
    acc.df_dr0 += a * x.df_dr0;
    for (std::size_t s = 0; s < acc.df_drings.size(); ++s) {
      acc.df_drings[s][0] += a * x.df_drings[s][0];
      acc.df_drings[s][1] += a * x.df_drings[s][1];
    }
  };
  const LiftOptions lift{tg.h_max, 0.5};
  for (std::size_t i = 0; i < n; ++i) {
    const double Fi = tg.forces_n[i];
    const double pi = tg.pressures_kpa[i];
    dh[i].df_drings.assign(d.rings.size(), {0.0, 0.0});
    const ForceEval f0 = model(d, 0.0, pi, want_grad);
    detail::checked(f0.f, "posterior");
    if (f0.f >= Fi) {
      auto F = [&](double h) { return detail::checked(model(d, h, pi, false).f, "posterior"); };
      const auto h = detail::first_crossing(F, Fi, 0.0, lift);
      if (h) {
        out.heights.push_back(*h);
        if (want_grad) {
          const ForceEval fe = model(d, *h, pi, true);
          if (fe.df_dh < 0.0) axpy(dh[i], -1.0 / fe.df_dh, fe);
        }
      } else {
        out.heights.push_back(tg.h_max);
      }
      continue;
    }
    out.heights.push_back(0.0);
    const double fr = (Fi - f0.f) / tg.f_scale;
    out.f_error += fr * fr;
    if (want_grad) axpy(out.grad, tg.k_force * 2.0 * fr / tg.f_scale, f0);
    // Pressure at which this design would lift Fi off the ground.
    auto G = [&](double p) { return detail::checked(model(d, 0.0, p, false).f, "posterior") - Fi; };
    const double gmax = G(tg.p_max);
    if (gmax < 0.0) {
      out.unreachable = true;
      const double pr = (tg.p_max - pi) / tg.p_max;
      out.p_error += pr * pr;
      continue;
    }
    std::uintmax_t iters = 100;
    const auto [lo, hi] = boost::math::tools::toms748_solve(
        G, pi, tg.p_max, f0.f - Fi, gmax, boost::math::tools::eps_tolerance<double>(48), iters);
    const double pl = 0.5 * (lo + hi);
    const double pr = (pl - pi) / tg.p_max;
    out.p_error += pr * pr;
    if (want_grad) {
      const ForceEval fp = model(d, 0.0, pl, true);
      if (fp.df_dp > 0.0) axpy(out.grad, tg.k_pressure * 2.0 * pr / tg.p_max / fp.df_dp, fp);
    }
  }
  const auto [hm, w] = smooth_min(out.heights, tg.gamma);
  out.h_min = hm;
  out.pi = -tg.k_force * out.f_error - tg.k_pressure * out.p_error + tg.k_height * hm;
  if (out.unreachable) out.pi -= tg.unreachable_penalty;
  if (want_grad) {
    for (std::size_t i = 0; i < n; ++i) axpy(out.grad, tg.k_height * w[i], dh[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Design optimization

struct DesignOptOptions {
  std::size_t n_starts = 2500;
  std::uint64_t seed = 0;
  LbfgsOptions lbfgs{.memory = 8, .max_iter = 100, .pg_tol = 1e-9, .f_tol = 1e-14};
};

struct DesignOptResult {
  MembraneDesign design;
  double pi = -std::numeric_limits<double>::infinity();
  PosteriorEval eval;
  std::size_t starts_evaluated = 0;
  std::size_t starts_failed = 0;
  double best_start_pi = -std::numeric_limits<double>::infinity();  ///< best value among start points
};

/// Negative posterior over unit coordinates of a design with a fixed ring count.
inline double neg_posterior_unit(const ForceModel& model, const LiftTargets& tg, const DesignBox& box,
                                 std::size_t n_rings, const Eigen::VectorXd& u, Eigen::VectorXd& g) {
  const MappedDesign m = map_unit(box, n_rings, u.data());
  const PosteriorEval pe = posterior(model, m.design, tg, true);
  g = -pullback(m, pe.grad.df_dt, pe.grad.df_dr0, pe.grad.df_drings);
  return -pe.pi;
}

inline DesignOptResult optimize_design(const ForceModel& model, const LiftTargets& tg,
                                       const DesignBox& box, const DesignOptOptions& opt = {}) {
  tg.validate();
  box.validate();
  if (opt.n_starts < 1) throw ConfigError("n_starts must be >= 1");
  std::vector<std::size_t> classes = box.ring_counts;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const auto starts = multistart_points<std::size_t>(classes, opt.n_starts, opt.seed,
                                                     [](const std::size_t& k) { return DesignBox::dim(k); });
  DesignOptResult best;
  for (const auto& [k, u0] : starts) {
    ++best.starts_evaluated;
    try {
      Eigen::VectorXd g0;
      const double start_val = -neg_posterior_unit(model, tg, box, k, u0, g0);
      best.best_start_pi = std::max(best.best_start_pi, start_val);
      const auto f = [&, k = k](const Eigen::VectorXd& u, Eigen::VectorXd& g) {
        return neg_posterior_unit(model, tg, box, k, u, g);
      };
      const LbfgsResult r = minimize_box(f, u0, opt.lbfgs);
      if (-r.f > best.pi) {
        best.pi = -r.f;
        best.design = map_unit(box, k, r.x.data()).design;
      }
    } catch (const Error&) {
      ++best.starts_failed;
    }
  }
  if (!std::isfinite(best.pi)) throw AllStartsFailed("every design-optimization start failed");
  best.eval = posterior(model, best.design, tg, false);
  return best;
}

// ---------------------------------------------------------------------------
// Height score

struct HeightScore {
  double score = 0.0;
  std::vector<double> heights;
  std::vector<bool> unreachable;
};

/// Sum over targets of the trajectory height at the sample nearest the target
/// pressure; trajectory i belongs to target i. Unlifted samples count 0.
inline HeightScore height_score(const std::vector<Trajectory>& trajs, const LiftTargets& tg) {
  if (trajs.size() != tg.pressures_kpa.size()) throw ConfigError("one trajectory per target is required");
  HeightScore hs;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const TrajectorySample* nearest = nullptr;
    for (const auto& s : trajs[i].samples) {
      if (!nearest || std::abs(s.p_kpa - tg.pressures_kpa[i]) < std::abs(nearest->p_kpa - tg.pressures_kpa[i]))
        nearest = &s;
    }
    const bool ok = nearest != nullptr && nearest->lifted;
    const double h = ok ? nearest->h_mm : 0.0;
    hs.heights.push_back(h);
    hs.unreachable.push_back(!ok);
    hs.score += h;
  }
  return hs;
}

// ---------------------------------------------------------------------------
// JSON

inline json trajectory_to_json(const Trajectory& t) {
  json s = json::array();
  for (const auto& x : t.samples) s.push_back({x.p_kpa, x.h_mm, x.f_n, x.lifted});
  return {{"mass_kg", t.mass_kg}, {"samples", s}};
}

inline LiftTargets targets_from_json(const json& j) {
  LiftTargets t;
  std::vector<double> masses;
  for (const auto& [k, v] : j.items()) {
    if (k == "forces_n") t.forces_n = v.get<std::vector<double>>();
    else if (k == "masses_kg") masses = v.get<std::vector<double>>();
    else if (k == "pressures_kpa") t.pressures_kpa = v.get<std::vector<double>>();
    else if (k == "k_force") t.k_force = v.get<double>();
    else if (k == "k_pressure") t.k_pressure = v.get<double>();
    else if (k == "k_height") t.k_height = v.get<double>();
    else if (k == "gamma") t.gamma = v.get<double>();
    else if (k == "p_max_kpa") t.p_max = v.get<double>();
    else if (k == "f_scale_n") t.f_scale = v.get<double>();
    else if (k == "h_max_mm") t.h_max = v.get<double>();
    else if (k == "unreachable_penalty") t.unreachable_penalty = v.get<double>();
    else throw ConfigError("unknown targets key '" + k + "'");
  }
  if (!masses.empty()) {
    if (!t.forces_n.empty()) throw ConfigError("give either forces_n or masses_kg, not both");
    for (double m : masses) t.forces_n.push_back(m * kGravity);
  }
  if (t.pressures_kpa.size() == 1 && t.forces_n.size() > 1) t.pressures_kpa.assign(t.forces_n.size(), t.pressures_kpa.front());
  t.validate();
  return t;
}

inline json targets_to_json(const LiftTargets& t) {
  return {{"forces_n", t.forces_n},   {"pressures_kpa", t.pressures_kpa},
          {"k_force", t.k_force},     {"k_pressure", t.k_pressure},
          {"k_height", t.k_height},   {"gamma", t.gamma},
          {"p_max_kpa", t.p_max},     {"f_scale_n", t.f_scale},
          {"h_max_mm", t.h_max},      {"unreachable_penalty", t.unreachable_penalty}};
}

}  // namespace mforge
