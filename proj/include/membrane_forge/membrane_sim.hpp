#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/tools/toms748_solve.hpp>

#include "membrane_forge/design.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/material.hpp"
#include "membrane_forge/ode.hpp"

namespace mforge {

struct SolverConfig {
  double ode_abs_tol = 1e-9;
  double ode_rel_tol = 1e-9;
  double shoot_tol = 1e-8;         ///< bracket width in lambda1(r0)
  double boundary_tol = 1e-6;      ///< required |lambda2(rf) - 1|
  double f_cap_n = 200.0;          ///< force_at_height search ceiling [N]
  double height_tol_mm = 0.05;     ///< force_at_height acceptance on contact height
  std::size_t report_nodes = 400;  ///< minimum nodes in a returned profile
  std::size_t max_shoot_iter = 200;
  std::size_t scan_points = 64;  ///< bracket scan density along each beta branch
};

/// Integration state along the meridian. `z` is the raw integral of
/// lambda1 sin(beta) from r0, so it grows towards the clamp for an inflated
/// membrane; physical heights are reported relative to the clamp.
struct BvpState {
  double l1 = 1.0;
  double l2 = 1.0;
  double beta = 0.0;
  double z = 0.0;
};

struct BvpDerivative {
  double dl1 = 0.0;
  double dl2 = 0.0;
  double dbeta = 0.0;
  double dz = 0.0;  ///< lambda1 sin(beta)
  double dR = 0.0;  ///< lambda1 cos(beta)
};

/// Which solution of sin(beta0) = arg is used at the contact edge. The
/// principal branch is the arcsine; the reflected branch continues the family
/// through beta0 = +-pi/2 when the plate load exceeds what the principal
/// branch can balance.
enum class BetaBranch : std::uint8_t { principal, reflected };

inline const char* to_string(BetaBranch b) {
  return b == BetaBranch::principal ? "principal" : "reflected";
}

struct MembraneShape {
  std::vector<double> r;     ///< undeformed radius of each node [mm]
  std::vector<double> R;     ///< deformed radius [mm]
  std::vector<double> Z;     ///< height above the clamp plane [mm], Z(rf) = 0
  std::vector<double> l1;    ///< meridional stretch
  std::vector<double> l2;    ///< circumferential stretch
  std::vector<double> beta;  ///< tangent angle [rad]
  std::vector<std::size_t> segment;  ///< layout segment of each node
  SegmentLayout layout;

  double contact_height = 0.0;  ///< Z at r0 [mm]
  double pressure = 0.0;        ///< [MPa]
  double force = 0.0;           ///< [N]
  double shooting_x = 1.0;      ///< lambda1(r0)
  BetaBranch branch = BetaBranch::principal;
  double boundary_residual = 0.0;  ///< lambda2(rf) - 1
  std::size_t solver_iters = 0;    ///< BVP integrations spent
};

struct ShootingHint {
  double x = 1.0;
  BetaBranch branch = BetaBranch::principal;
};

// ---------------------------------------------------------------------------

/// Equilibrium right-hand side on one material segment; p_tilde = p / t.
inline BvpDerivative ode_rhs(const BvpState& s, double r, double p_tilde,
                             const MaterialParams& mat) {
  if (!(r > 0.0)) throw SingularRhs("radius must be positive");
  const GentDerivatives w = gent_derivatives(s.l1, s.l2, mat);
  const double tiny = 1e-12 * mat.mu;
  if (std::abs(w.w11) <= tiny) throw SingularRhs("W11 vanished (loss of ellipticity)");

  const double cb = std::cos(s.beta);
  const double sb = std::sin(s.beta);
  BvpDerivative d;
  d.dl1 = ((w.w2 - s.l1 * w.w12) * cb + (s.l2 * w.w12 - w.w1)) / (r * w.w11);
  d.dl2 = (s.l1 * cb - s.l2) / r;
  const double beta_num = p_tilde * r * s.l1 * s.l2 - w.w2 * sb;
  if (std::abs(w.w1) <= tiny) {
    // Unstressed meridian: only the flat, unloaded limit is regular.
    if (std::abs(beta_num) > tiny) throw SingularRhs("W1 vanished (meridian slack)");
    d.dbeta = 0.0;
  } else {
    d.dbeta = beta_num / (r * w.w1);
  }
  d.dz = s.l1 * sb;
  d.dR = s.l1 * cb;
  return d;
}

namespace detail {

inline double reflect_beta(double principal) {
  return principal >= 0.0 ? std::numbers::pi - principal : -std::numbers::pi - principal;
}

/// Net vertical load the contact edge must carry: pressure on the plate minus
/// the applied force.
inline double plate_load(double p, double F, double r0) {
  return std::numbers::pi * p * r0 * r0 - F;
}

}  // namespace detail

/// Contact-edge angle from the integrated-by-parts boundary term, with
/// lambda2(r0) = 1.
inline double boundary_beta(double x, double F, double p, const MembraneDesign& design,
                            const MaterialSet& mats, BetaBranch branch = BetaBranch::principal) {
  const double r0 = design.contact_radius;
  const double t = design.thickness;
  const double num = detail::plate_load(p, F, r0);
  double beta = 0.0;
  if (num != 0.0) {
    const double w1 = gent_derivatives(x, 1.0, mats.silicone(t)).w1;
    const double den = 2.0 * std::numbers::pi * t * r0 * w1;
    double arg = den != 0.0 ? num / den : std::numeric_limits<double>::infinity();
    if (!(std::abs(arg) <= 1.0 + 1e-12)) {
      throw NoEquilibrium("no contact-edge angle balances F=" + std::to_string(F) +
                          " N at p=" + std::to_string(p * 1e3) + " kPa for x=" +
                          std::to_string(x));
    }
    arg = std::clamp(arg, -1.0, 1.0);
    beta = std::asin(arg);
  }
  return branch == BetaBranch::principal ? beta : detail::reflect_beta(beta);
}

namespace detail {

struct SegmentMaterials {
  MaterialParams silicone;
  MaterialParams ring;
  const MaterialParams& of(SegmentMaterial m) const {
    return m == SegmentMaterial::ring ? ring : silicone;
  }
};

/// lambda1 on the far side of a junction such that the meridional tension
/// t W1 is continuous (equal thickness on both sides).
inline double match_junction_l1(double l1_left, double l2, const MaterialParams& left,
                                const MaterialParams& right) {
  const double target = gent_derivatives(l1_left, l2, left).w1 * left.thickness;
  // Admissible l1 interval of the right material at this l2:
  //   u^2 - c u + 1/l2^2 = 0,  u = l1^2,  c = Jm + 3 - l2^2.
  const double c = right.jm + 3.0 - l2 * l2 - 2.0 * kGentGuard;
  const double disc = c * c - 4.0 / (l2 * l2);
  if (!(disc > 0.0)) {
    throw ExtensionLimitExceeded("junction: circumferential stretch " + std::to_string(l2) +
                                 " exceeds the limit of the adjoining material");
  }
  const double sq = std::sqrt(disc);
  double lo = std::sqrt(std::max(0.0, (c - sq) / 2.0));
  double hi = std::sqrt((c + sq) / 2.0);
  const double shrink = 1e-12 * (hi - lo);
  lo += shrink;
  hi -= shrink;
  auto f = [&](double l1) { return gent_derivatives(l1, l2, right).w1 * right.thickness - target; };
  // Pull the bracket ends inward until both evaluate (guard band near lock-up).
  auto safe_eval = [&](double& x, double toward) {
    for (int i = 0; i < 60; ++i) {
      if (gent_admissible(x, l2, right)) return f(x);
      x = 0.5 * (x + toward);
    }
    throw ExtensionLimitExceeded("junction: no admissible stretch in adjoining material");
  };
  const double mid = 0.5 * (lo + hi);
  double flo = safe_eval(lo, mid);
  double fhi = safe_eval(hi, mid);
  if (flo > 0.0 || fhi < 0.0) {
    throw ExtensionLimitExceeded("junction: tension cannot be matched");
  }
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  std::uintmax_t iters = 200;
  auto tol = [](double a, double b) { return std::abs(a - b) <= 1e-15 * std::max(1.0, std::abs(a)); };
  auto [a, b] = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, tol, iters);
  return 0.5 * (a + b);
}

class BvpIntegrator {
 public:
  BvpIntegrator(const MembraneDesign& design, const MaterialSet& mats, double p, double F,
                const SolverConfig& cfg)
      : design_(design),
        layout_(segment_layout(design)),
        mats_{mats.silicone(design.thickness), mats.ring(design.thickness)},
        mat_set_(mats),
        p_(p),
        F_(F),
        cfg_(cfg) {}

  const SegmentLayout& layout() const { return layout_; }
  std::size_t evaluations() const { return evaluations_; }

  BvpState initial_state(double x, BetaBranch branch) const {
    return {x, 1.0, boundary_beta(x, F_, p_, design_, mat_set_, branch), 0.0};
  }

  /// Integrate to rf and return the end state.
  BvpState shoot(double x, BetaBranch branch) { return shoot_from(initial_state(x, branch)); }

  /// Integrate from an explicit contact-edge state (lambda2 = 1, z = 0).
  BvpState shoot_from(BvpState s) {
    ++evaluations_;
    for (std::size_t k = 0; k < layout_.size(); ++k) {
      const Segment& seg = layout_[k];
      if (k > 0) s.l1 = junction(s, layout_[k - 1], seg);
      s = integrate_segment(s, seg, nullptr, {});
    }
    return s;
  }

  /// Integrate and record a profile on at least cfg.report_nodes nodes.
  MembraneShape profile(double x, BetaBranch branch) {
    MembraneShape out = profile_from(initial_state(x, branch), F_);
    out.branch = branch;
    return out;
  }

  /// Profile from an explicit contact-edge state carrying plate force F.
  MembraneShape profile_from(BvpState s, double F) {
    ++evaluations_;
    MembraneShape out;
    out.layout = layout_;
    const double total = design_.outer_radius - design_.contact_radius;
    const std::size_t want = std::max<std::size_t>(cfg_.report_nodes, 2);
    const double x = s.l1;
    std::vector<BvpState> states;
    for (std::size_t k = 0; k < layout_.size(); ++k) {
      const Segment& seg = layout_[k];
      if (k > 0) s.l1 = junction(s, layout_[k - 1], seg);
      const double len = seg.r_end - seg.r_begin;
      const auto n = std::max<std::size_t>(
          3, static_cast<std::size_t>(std::ceil(static_cast<double>(want) * len / total)) + 1);
      std::vector<double> nodes(n);
      for (std::size_t i = 0; i < n; ++i) {
        nodes[i] = seg.r_begin + len * static_cast<double>(i) / static_cast<double>(n - 1);
      }
      nodes.back() = seg.r_end;
      std::vector<BvpState> seg_states;
      s = integrate_segment(s, seg, &seg_states, nodes);
      for (std::size_t i = 0; i < n; ++i) {
        out.r.push_back(nodes[i]);
        out.segment.push_back(k);
        states.push_back(seg_states[i]);
      }
    }
    const double z_end = s.z;
    for (std::size_t i = 0; i < states.size(); ++i) {
      const BvpState& st = states[i];
      out.l1.push_back(st.l1);
      out.l2.push_back(st.l2);
      out.beta.push_back(st.beta);
      out.R.push_back(st.l2 * out.r[i]);
      out.Z.push_back(z_end - st.z);
    }
    out.contact_height = z_end;
    out.pressure = p_;
    out.force = F;
    out.shooting_x = x;
    out.branch = std::abs(states.front().beta) <= std::numbers::pi / 2 ? BetaBranch::principal
                                                                       : BetaBranch::reflected;
    out.boundary_residual = s.l2 - 1.0;
    return out;
  }

 private:
  double junction(const BvpState& s, const Segment& left, const Segment& right) const {
    if (left.material == right.material) return s.l1;
    return match_junction_l1(s.l1, s.l2, mats_.of(left.material), mats_.of(right.material));
  }

  BvpState integrate_segment(const BvpState& s, const Segment& seg,
                             std::vector<BvpState>* record, const std::vector<double>& nodes) {
    const MaterialParams& mat = mats_.of(seg.material);
    const double p_tilde = p_ / design_.thickness;
    using State = std::array<double, 4>;
    auto rhs = [&](double r, const State& y) -> State {
      const BvpDerivative d = ode_rhs({y[0], y[1], y[2], y[3]}, r, p_tilde, mat);
      return {d.dl1, d.dl2, d.dbeta, d.dz};
    };
    ode::Options opts;
    opts.abs_tol = cfg_.ode_abs_tol;
    opts.rel_tol = cfg_.ode_rel_tol;
    ode::Dopri5<4> stepper(opts);
    const State y0{s.l1, s.l2, s.beta, s.z};
    if (record != nullptr) {
      const auto states = stepper.integrate_nodes(rhs, y0, seg.r_begin, seg.r_end, nodes);
      record->clear();
      for (const State& y : states) record->push_back({y[0], y[1], y[2], y[3]});
      // The dense output at the right end is the step end itself.
      const State& y = states.back();
      return {y[0], y[1], y[2], y[3]};
    }
    const State y = stepper.integrate(rhs, y0, seg.r_begin, seg.r_end);
    return {y[0], y[1], y[2], y[3]};
  }

  MembraneDesign design_;
  SegmentLayout layout_;
  SegmentMaterials mats_;
  MaterialSet mat_set_;
  double p_;
  double F_;
  SolverConfig cfg_;
  std::size_t evaluations_ = 0;
};

}  // namespace detail

/// One integration pass from r0 to rf for a trial lambda1(r0) = x. The result
/// generally violates lambda2(rf) = 1; solve_shape shoots on x.
inline MembraneShape integrate_bvp(const MembraneDesign& design, const MaterialSet& mats,
                                   double p, double F, double x,
                                   BetaBranch branch = BetaBranch::principal,
                                   const SolverConfig& cfg = {}) {
  detail::BvpIntegrator integ(design, mats, p, F, cfg);
  MembraneShape shape = integ.profile(x, branch);
  shape.solver_iters = integ.evaluations();
  return shape;
}

namespace detail {

/// The undeformed, unloaded membrane.
inline MembraneShape flat_shape(const MembraneDesign& design, const SolverConfig& cfg) {
  MembraneShape out;
  out.layout = segment_layout(design);
  const double total = design.outer_radius - design.contact_radius;
  const std::size_t want = std::max<std::size_t>(cfg.report_nodes, 2);
  for (std::size_t k = 0; k < out.layout.size(); ++k) {
    const Segment& seg = out.layout[k];
    const double len = seg.r_end - seg.r_begin;
    const auto n = std::max<std::size_t>(
        3, static_cast<std::size_t>(std::ceil(static_cast<double>(want) * len / total)) + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = i + 1 == n ? seg.r_end
                                  : seg.r_begin + len * static_cast<double>(i) /
                                                      static_cast<double>(n - 1);
      out.r.push_back(r);
      out.R.push_back(r);
      out.Z.push_back(0.0);
      out.l1.push_back(1.0);
      out.l2.push_back(1.0);
      out.beta.push_back(0.0);
      out.segment.push_back(k);
    }
  }
  return out;
}

/// Shooting on x = lambda1(r0) for lambda2(rf) = 1.
class Shooter {
 public:
  Shooter(const MembraneDesign& design, const MaterialSet& mats, double p, double F,
          const SolverConfig& cfg)
      : integ_(design, mats, p, F, cfg), design_(design), mats_(mats), p_(p), F_(F), cfg_(cfg) {
    const MaterialParams sil = mats.silicone(design.thickness);
    x_hi_ = gent_lockup_stretch(sil) * (1.0 - 1e-9);
    const double load = std::abs(plate_load(p, F, design.contact_radius));
    if (load == 0.0) {
      x_lo_ = 1.0;
    } else {
      // Smallest x whose meridional tension can carry the plate load.
      const double need = load / (2.0 * std::numbers::pi * design.thickness * design.contact_radius);
      auto f = [&](double x) { return gent_derivatives(x, 1.0, sil).w1 - need; };
      std::uintmax_t iters = 200;
      auto tol = [](double a, double b) { return std::abs(a - b) <= 1e-15 * a; };
      const auto [a, b] = boost::math::tools::toms748_solve(f, 1.0, x_hi_, tol, iters);
      x_lo_ = std::max(a, b);  // feasible side
    }
  }

  std::size_t evaluations() const { return integ_.evaluations(); }
  detail::BvpIntegrator& integrator() { return integ_; }

  /// Returns the root (x, branch) or throws ShootingFailed / NoEquilibrium.
  ShootingHint solve(const std::optional<ShootingHint>& hint) {
    if (hint && hint->x > x_lo_ && hint->x < x_hi_) {
      if (auto r = local_bracket(*hint)) return *r;
    }
    for (BetaBranch branch : {BetaBranch::principal, BetaBranch::reflected}) {
      if (auto r = scan(branch)) return *r;
    }
    if (!any_success_) {
      throw NoEquilibrium(last_error_.empty() ? "no admissible shooting parameter"
                                              : "no admissible shooting parameter: " + last_error_);
    }
    throw ShootingFailed("no sign change of lambda2(rf)-1 found over [" + std::to_string(x_lo_) +
                         ", " + std::to_string(x_hi_) + "] on either contact-angle branch");
  }

  double x_lo() const { return x_lo_; }
  double x_hi() const { return x_hi_; }

 private:
  std::optional<double> g(double x, BetaBranch branch) {
    try {
      const BvpState end = integ_.shoot(x, branch);
      any_success_ = true;
      return end.l2 - 1.0;
    } catch (const Error& e) {
      last_error_ = e.what();
      return std::nullopt;
    }
  }

  std::optional<ShootingHint> local_bracket(const ShootingHint& hint) {
    const auto g0 = g(hint.x, hint.branch);
    if (!g0) return std::nullopt;
    if (*g0 == 0.0) return hint;
    double prev_x = hint.x;
    double prev_g = *g0;
    for (double step = 1e-4; step < 0.5; step *= 2.0) {
      for (double dir : {-1.0, 1.0}) {
        const double x = std::clamp(hint.x * (1.0 + dir * step), x_lo_, x_hi_);
        const auto gx = g(x, hint.branch);
        if (!gx) continue;
        if ((*gx > 0.0) != (*g0 > 0.0) || *gx == 0.0) {
          // Tighten with the nearer same-sign sample on this side.
          const double near_x = (dir < 0.0) == (prev_x < hint.x) ? prev_x : hint.x;
          const double near_g = (dir < 0.0) == (prev_x < hint.x) ? prev_g : *g0;
          return refine(std::min(x, near_x), std::max(x, near_x),
                        x < near_x ? *gx : near_g, x < near_x ? near_g : *gx, hint.branch);
        }
        if (dir < 0.0) {
          prev_x = x;
          prev_g = *gx;
        }
      }
    }
    return std::nullopt;
  }

  std::optional<ShootingHint> scan(BetaBranch branch) {
    struct Sample {
      double x;
      std::optional<double> g;
    };
    const std::size_t n = std::max<std::size_t>(cfg_.scan_points, 8);
    const double width = x_hi_ - x_lo_;
    std::vector<Sample> samples;
    samples.reserve(n + 64);
    for (std::size_t k = 0; k <= n; ++k) {
      // s = 0 is the fold at |sin beta0| = 1 where both branches meet; the
      // scan is geometric away from it because roots crowd there.
      const double s = k == 0 ? 0.0
                              : 1e-10 * std::pow(0.999 / 1e-10, static_cast<double>(k - 1) /
                                                                     static_cast<double>(n - 1));
      const double x = x_lo_ + width * s;
      samples.push_back({x, g(x, branch)});
      if (samples.back().g && *samples.back().g == 0.0) return ShootingHint{x, branch};
    }
    if (auto r = first_root(samples, branch)) return r;

    // Ringed membranes often have a narrow feasible window bounded by
    // lock-up, and the residual swings fastest near its edges. Bisect towards
    // every feasible/infeasible transition to sample the edge.
    std::vector<Sample> extra;
    for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
      const Sample& a = samples[i];
      const Sample& b = samples[i + 1];
      if (a.g.has_value() == b.g.has_value()) continue;
      double ok = a.g ? a.x : b.x;
      double bad = a.g ? b.x : a.x;
      for (int it = 0; it < 30 && std::abs(ok - bad) > 1e-12 * ok; ++it) {
        const double mid = 0.5 * (ok + bad);
        const auto gm = g(mid, branch);
        if (gm) {
          extra.push_back({mid, gm});
          ok = mid;
        } else {
          bad = mid;
        }
      }
    }
    if (extra.empty()) return std::nullopt;
    samples.insert(samples.end(), extra.begin(), extra.end());
    std::sort(samples.begin(), samples.end(),
              [](const Sample& a, const Sample& b) { return a.x < b.x; });
    return first_root(samples, branch);
  }

  template <typename Samples>
  std::optional<ShootingHint> first_root(const Samples& samples, BetaBranch branch) {
    for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
      const auto& a = samples[i];
      const auto& b = samples[i + 1];
      if (!a.g || !b.g) continue;
      if (*a.g == 0.0) return ShootingHint{a.x, branch};
      if ((*a.g > 0.0) != (*b.g > 0.0)) {
        if (auto r = refine(a.x, b.x, *a.g, *b.g, branch)) return r;
      }
    }
    return std::nullopt;
  }

  std::optional<ShootingHint> refine(double a, double b, double ga, double gb, BetaBranch branch,
                                     int depth = 0) {
    auto f = [&](double x) {
      const auto v = g(x, branch);
      if (!v) throw ShootingFailed("integration failed inside the bracket");
      return *v;
    };
    try {
      std::uintmax_t iters = cfg_.max_shoot_iter;
      const double tol_x = cfg_.shoot_tol;
      auto tol = [tol_x](double lo, double hi) { return std::abs(hi - lo) <= tol_x; };
      auto [lo, hi] = boost::math::tools::toms748_solve(f, a, b, ga, gb, tol, iters);
      double x = 0.5 * (lo + hi);
      auto gx = g(x, branch);
      // Tighten until the far boundary condition holds to boundary_tol.
      for (int pass = 0; pass < 3 && gx && std::abs(*gx) > cfg_.boundary_tol; ++pass) {
        const double flo = f(lo), fhi = f(hi);
        if (flo == 0.0) return ShootingHint{lo, branch};
        if (fhi == 0.0) return ShootingHint{hi, branch};
        if ((flo > 0.0) == (fhi > 0.0)) break;
        iters = cfg_.max_shoot_iter;
        auto tight = [](double l, double h) { return std::abs(h - l) <= 4e-16 * std::abs(l); };
        std::tie(lo, hi) = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, tight, iters);
        x = std::abs(flo) < std::abs(fhi) ? lo : hi;
        gx = g(x, branch);
      }
      if (gx && std::abs(*gx) <= cfg_.boundary_tol) return ShootingHint{x, branch};
      return std::nullopt;
    } catch (const ShootingFailed&) {
      if (depth >= 2) return std::nullopt;
      // Split the bracket and retry on the sub-brackets that still change sign.
      const int m = 6;
      double px = a, pg = ga;
      for (int i = 1; i <= m; ++i) {
        const double x = i == m ? b : a + (b - a) * i / m;
        const double gx = i == m ? gb : g(x, branch).value_or(std::nan(""));
        if (std::isnan(gx)) {
          px = std::nan("");
          continue;
        }
        if (!std::isnan(px) && (gx > 0.0) != (pg > 0.0)) {
          if (auto r = refine(px, x, pg, gx, branch, depth + 1)) return r;
        }
        px = x;
        pg = gx;
      }
      return std::nullopt;
    }
  }

  BvpIntegrator integ_;
  MembraneDesign design_;
  MaterialSet mats_;
  double p_;
  double F_;
  SolverConfig cfg_;
  double x_lo_ = 1.0;
  double x_hi_ = 2.0;
  bool any_success_ = false;
  std::string last_error_;
};

}  // namespace detail

/// Equilibrium shape at pressure p [MPa] under plate force F [N].
inline MembraneShape solve_shape(const MembraneDesign& design, const MaterialSet& mats, double p,
                                 double F, const SolverConfig& cfg = {},
                                 const std::optional<ShootingHint>& hint = std::nullopt) {
  validate_design(design, /*enforce_bounds=*/false);
  if (!(p >= 0.0) || !(F >= 0.0)) {
    throw InvalidDesign("solve_shape requires p >= 0 and F >= 0");
  }
  if (p == 0.0 && F == 0.0) {
    MembraneShape flat = detail::flat_shape(design, cfg);
    flat.solver_iters = 0;
    return flat;
  }
  detail::Shooter shooter(design, mats, p, F, cfg);
  const ShootingHint root = shooter.solve(hint);
  MembraneShape shape = shooter.integrator().profile(root.x, root.branch);
  shape.solver_iters = shooter.evaluations();
  if (!(std::abs(shape.boundary_residual) <= cfg.boundary_tol)) {
    throw ShootingFailed("boundary residual " + std::to_string(shape.boundary_residual) +
                         " above tolerance");
  }
  return shape;
}

/// Vertical force balance on the part of the membrane inside radius r:
///   V = 2 pi t r W1 sin(beta) + F - pi p R^2,
/// identically zero for an equilibrium shape. Evaluated on every node.
inline std::vector<double> vertical_balance(const MembraneShape& shape,
                                            const MembraneDesign& design,
                                            const MaterialSet& mats) {
  const double t = design.thickness;
  std::vector<double> out(shape.r.size());
  for (std::size_t i = 0; i < shape.r.size(); ++i) {
    const MaterialParams mat = shape.layout[shape.segment[i]].material == SegmentMaterial::ring
                                   ? mats.ring(t)
                                   : mats.silicone(t);
    const double w1 = gent_derivatives(shape.l1[i], shape.l2[i], mat).w1;
    out[i] = 2.0 * std::numbers::pi * t * shape.r[i] * w1 * std::sin(shape.beta[i]) + shape.force -
             std::numbers::pi * shape.pressure * shape.R[i] * shape.R[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ForceQueryStats {
  std::size_t solver_iters = 0;
  double achieved_height = 0.0;
  std::size_t continuation_steps = 0;
};

namespace detail {

/// Contact-edge unknowns for displacement control. With both lambda1(r0) and
/// beta(r0) free, the plate force follows from the edge balance instead of
/// selecting the contact angle.
struct EdgeUnknowns {
  double x = 1.0;
  double beta = 0.0;
};

class HeightSolver {
 public:
  HeightSolver(const MembraneDesign& design, const MaterialSet& mats, double p,
               const SolverConfig& cfg)
      : integ_(design, mats, p, 0.0, cfg),
        sil_(mats.silicone(design.thickness)),
        r0_(design.contact_radius),
        t_(design.thickness),
        p_(p),
        cfg_(cfg) {}

  std::size_t evaluations() const { return integ_.evaluations(); }

  double force(const EdgeUnknowns& u) const {
    const double w1 = gent_derivatives(u.x, 1.0, sil_).w1;
    return plate_load(p_, 0.0, r0_) - 2.0 * std::numbers::pi * t_ * r0_ * w1 * std::sin(u.beta);
  }

  /// Newton on (lambda2(rf) - 1, z(rf) - h) from `u`. Returns false when the
  /// iteration does not converge; `u` then holds the last iterate.
  bool correct(EdgeUnknowns& u, double h, std::size_t& iters_out) {
    auto residual = [&](const EdgeUnknowns& v) -> std::optional<std::array<double, 2>> {
      try {
        const BvpState e = integ_.shoot_from({v.x, 1.0, v.beta, 0.0});
        return std::array<double, 2>{e.l2 - 1.0, (e.z - h) / r0_};
      } catch (const Error&) {
        return std::nullopt;
      }
    };
    auto norm = [](const std::array<double, 2>& r) { return std::hypot(r[0], r[1]); };
    auto r = residual(u);
    if (!r) return false;
    const double tol_z = 0.1 * cfg_.height_tol_mm / r0_;
    for (std::size_t it = 0; it < 30; ++it) {
      iters_out = it;
      if (std::abs((*r)[0]) <= cfg_.boundary_tol && std::abs((*r)[1]) <= tol_z) return true;
      // Forward-difference Jacobian.
      const double dx = 1e-7 * std::max(1.0, u.x);
      const double db = 1e-7;
      const auto rx = residual({u.x + dx, u.beta});
      const auto rb = residual({u.x, u.beta + db});
      const auto rx2 = rx ? rx : residual({u.x - dx, u.beta});
      const auto rb2 = rb ? rb : residual({u.x, u.beta - db});
      if (!rx2 || !rb2) return false;
      const double sx = rx ? dx : -dx;
      const double sb = rb ? db : -db;
      const double j00 = ((*rx2)[0] - (*r)[0]) / sx, j10 = ((*rx2)[1] - (*r)[1]) / sx;
      const double j01 = ((*rb2)[0] - (*r)[0]) / sb, j11 = ((*rb2)[1] - (*r)[1]) / sb;
      const double det = j00 * j11 - j01 * j10;
      if (!(std::abs(det) > 0.0) || !std::isfinite(det)) return false;
      const double ddx = -((*r)[0] * j11 - (*r)[1] * j01) / det;
      const double ddb = -(j00 * (*r)[1] - j10 * (*r)[0]) / det;
      // Backtracking on the residual norm; infeasible trials also shrink.
      double lam = 1.0;
      bool moved = false;
      for (int ls = 0; ls < 12; ++ls, lam *= 0.5) {
        const EdgeUnknowns trial{u.x + lam * ddx, u.beta + lam * ddb};
        if (!(trial.x > 0.0)) continue;
        const auto rt = residual(trial);
        if (!rt) continue;
        if (norm(*rt) < norm(*r) || lam < 1.0 / 64) {
          u = trial;
          r = rt;
          moved = true;
          break;
        }
      }
      if (!moved) return false;
    }
    return std::abs((*r)[0]) <= cfg_.boundary_tol && std::abs((*r)[1]) <= tol_z;
  }

  MembraneShape profile(const EdgeUnknowns& u) {
    return integ_.profile_from({u.x, 1.0, u.beta, 0.0}, force(u));
  }

 private:
  BvpIntegrator integ_;
  MaterialParams sil_;
  double r0_;
  double t_;
  double p_;
  SolverConfig cfg_;
};

}  // namespace detail

/// Equilibrium shape with the contact disc held at height h [mm] under
/// pressure p [MPa]. The plate force is part of the solution.
///
/// The free-inflation shape is pushed down to h by continuation in height,
/// solving for (lambda1(r0), beta(r0)) at every step. Displacement control
/// keeps the path single-valued where the force-controlled response folds
/// (beyond the inflation pressure maximum). Shapes that would need a
/// negative plate force (the plate pulling) are returned as-is; callers
/// decide what a free membrane below the plate means.
inline MembraneShape solve_shape_at_height(const MembraneDesign& design, const MaterialSet& mats,
                                           double p, double h, const SolverConfig& cfg = {},
                                           ForceQueryStats* stats = nullptr) {
  validate_design(design, /*enforce_bounds=*/false);
  if (!(p > 0.0)) throw InvalidDesign("solve_shape_at_height requires p > 0");
  ForceQueryStats local;
  ForceQueryStats& st = stats != nullptr ? *stats : local;

  const MembraneShape free = solve_shape(design, mats, p, 0.0, cfg);
  st.solver_iters += free.solver_iters;
  detail::HeightSolver solver(design, mats, p, cfg);
  detail::EdgeUnknowns u{free.shooting_x, free.beta.front()};
  const double h_free = free.contact_height;

  double h_cur = h_free;
  detail::EdgeUnknowns u_prev = u;
  double h_prev = h_cur;
  bool have_prev = false;
  double step = std::clamp(std::abs(h_free - h) / 4.0, 0.05, 5.0);
  const double min_step = 1e-6;
  while (h_cur != h) {
    const double dir = h < h_cur ? -1.0 : 1.0;
    const double h_next = std::abs(h - h_cur) <= step ? h : h_cur + dir * step;
    // Secant predictor from the previous two converged points.
    detail::EdgeUnknowns guess = u;
    if (have_prev && h_cur != h_prev) {
      const double s = (h_next - h_cur) / (h_cur - h_prev);
      guess = {u.x + s * (u.x - u_prev.x), u.beta + s * (u.beta - u_prev.beta)};
    }
    std::size_t iters = 0;
    bool ok = guess.x > 0.0 && solver.correct(guess, h_next, iters);
    if (!ok && have_prev) {
      guess = u;
      ok = solver.correct(guess, h_next, iters);
    }
    if (!ok) {
      step *= 0.5;
      if (step < min_step) {
        st.solver_iters += solver.evaluations();
        throw ShootingFailed("height continuation stalled at h=" + std::to_string(h_cur) +
                             " mm on the way to " + std::to_string(h) + " mm");
      }
      continue;
    }
    ++st.continuation_steps;
    u_prev = u;
    h_prev = h_cur;
    have_prev = true;
    u = guess;
    h_cur = h_next;
    if (iters <= 3) step = std::min(step * 1.5, 10.0);
  }
  MembraneShape shape = solver.profile(u);
  st.solver_iters += solver.evaluations();
  shape.solver_iters = st.solver_iters;
  st.achieved_height = shape.contact_height;
  return shape;
}

/// Plate force [N] needed to hold the contact disc at height h [mm] while the
/// membrane is inflated to p [MPa]. Zero when the free membrane does not reach
/// the plate.
inline double force_at_height(const MembraneDesign& design, const MaterialSet& mats, double p,
                              double h, const SolverConfig& cfg = {},
                              ForceQueryStats* stats = nullptr) {
  if (!(h >= 0.0)) throw InvalidDesign("force_at_height requires h >= 0");
  ForceQueryStats local;
  ForceQueryStats& st = stats != nullptr ? *stats : local;
  st = {};
  if (p <= 0.0) return 0.0;

  const MembraneShape free = solve_shape(design, mats, p, 0.0, cfg);
  st.solver_iters += free.solver_iters;
  if (free.contact_height <= h) {
    st.achieved_height = free.contact_height;
    return 0.0;
  }
  ForceQueryStats cont;
  const MembraneShape shape = solve_shape_at_height(design, mats, p, h, cfg, &cont);
  st.solver_iters += cont.solver_iters;
  st.continuation_steps = cont.continuation_steps;
  st.achieved_height = shape.contact_height;
  if (!(std::abs(shape.contact_height - h) <= cfg.height_tol_mm)) {
    throw ShootingFailed("contact height " + std::to_string(shape.contact_height) +
                         " mm misses the target " + std::to_string(h) + " mm");
  }
  if (shape.force > cfg.f_cap_n) {
    throw NotReachable("holding h=" + std::to_string(h) + " mm needs " +
                       std::to_string(shape.force) + " N, above the " +
                       std::to_string(cfg.f_cap_n) + " N cap");
  }
  return std::max(shape.force, 0.0);
}

struct SweepPoint {
  double h_mm = 0.0;
  double p_kpa = 0.0;
  double force_n = 0.0;
  bool success = false;
  std::size_t solver_iters = 0;
  std::string diagnostic;
};

/// Grid evaluation of force_at_height, heights outermost. Failed points carry
/// success = false and a diagnostic; their force is NaN.
inline std::vector<SweepPoint> sweep(const MembraneDesign& design, const MaterialSet& mats,
                                     const std::vector<double>& heights_mm,
                                     const std::vector<double>& pressures_kpa,
                                     const SolverConfig& cfg = {}) {
  std::vector<SweepPoint> out;
  out.reserve(heights_mm.size() * pressures_kpa.size());
  for (double h : heights_mm) {
    for (double pk : pressures_kpa) {
      SweepPoint pt;
      pt.h_mm = h;
      pt.p_kpa = pk;
      ForceQueryStats st;
      try {
        pt.force_n = force_at_height(design, mats, pk * 1e-3, h, cfg, &st);
        pt.success = true;
      } catch (const Error& e) {
        pt.force_n = std::nan("");
        pt.diagnostic = e.what();
      }
      pt.solver_iters = st.solver_iters;
      out.push_back(std::move(pt));
    }
  }
  return out;
}

}  // namespace mforge
