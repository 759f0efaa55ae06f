#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "membrane_forge/design.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/rng.hpp"

namespace mforge {

// ---------------------------------------------------------------------------
// Design box and its unit-cube parametrization

/// Search region for design optimization. Coordinates live in [0, 1]^n with
/// n = 2 + 2 * ring_count and are mapped onto designs that satisfy the ring
/// ordering and spacing rules by construction.
struct DesignBox {
  double thickness_lo = limits::kMinThickness;
  double thickness_hi = limits::kMaxThickness;
  double contact_radius_lo = limits::kMinContactRadius;
  double contact_radius_hi = limits::kMaxContactRadius;
  double half_width_lo = limits::kMinRingHalfWidth;
  double half_width_hi = 10.0;
  double gap = 0.5;  ///< clearance between neighbouring edges [mm]
  double outer_radius = limits::kOuterRadius;
  std::vector<std::size_t> ring_counts{0, 1, 2};

  /// Thickness restricted to [2, 3] mm as for lifting designs.
  static DesignBox lift() {
    DesignBox b;
    b.thickness_lo = 2.0;
    return b;
  }

  void validate() const {
    auto bad = [](const std::string& w) { throw ConfigError("design box: " + w); };
    if (!(thickness_lo >= limits::kMinThickness && thickness_hi <= limits::kMaxThickness &&
          thickness_lo <= thickness_hi))
      bad("thickness bounds must lie in [1, 3]");
    if (!(contact_radius_lo >= limits::kMinContactRadius &&
          contact_radius_hi <= limits::kMaxContactRadius && contact_radius_lo <= contact_radius_hi))
      bad("contact radius bounds must lie in [25.4, 38.1]");
    if (!(half_width_lo >= limits::kMinRingHalfWidth && half_width_lo <= half_width_hi))
      bad("ring half width bounds must satisfy 5 <= lo <= hi");
    if (!(gap > 0.0)) bad("gap must be positive");
    if (ring_counts.empty()) bad("ring_counts is empty");
    for (std::size_t k : ring_counts) {
      if (k > limits::kMaxRings) bad("ring count above 2");
      if (span_for(k) < 0.0) bad("rings do not fit at the largest contact radius");
    }
  }

  /// Free radial span left when k minimum-width rings sit at the largest contact radius.
  double span_for(std::size_t k) const {
    return outer_radius - contact_radius_hi -
           static_cast<double>(k) * (2.0 * half_width_lo + gap) - gap;
  }

  static std::size_t dim(std::size_t rings) { return 2 + 2 * rings; }
};

/// Scalar with its gradient w.r.t. the (at most 6) unit coordinates.
struct Lin {
  double v = 0.0;
  std::array<double, 6> g{};

  static Lin var(double v, std::size_t i) {
    Lin l{v, {}};
    l.g[i] = 1.0;
    return l;
  }
  static Lin constant(double v) { return {v, {}}; }
  friend Lin operator+(Lin a, const Lin& b) {
    a.v += b.v;
    for (std::size_t i = 0; i < 6; ++i) a.g[i] += b.g[i];
    return a;
  }
  friend Lin operator-(Lin a, const Lin& b) {
    a.v -= b.v;
    for (std::size_t i = 0; i < 6; ++i) a.g[i] -= b.g[i];
    return a;
  }
  friend Lin operator*(Lin a, const Lin& b) {
    for (std::size_t i = 0; i < 6; ++i) a.g[i] = a.g[i] * b.v + a.v * b.g[i];
    a.v *= b.v;
    return a;
  }
  friend Lin operator*(double s, Lin a) {
    a.v *= s;
    for (double& x : a.g) x *= s;
    return a;
  }
  friend Lin operator+(Lin a, double s) {
    a.v += s;
    return a;
  }
  friend Lin operator+(double s, Lin a) { return a + s; }
  friend Lin min(const Lin& a, const Lin& b) { return a.v <= b.v ? a : b; }
};

/// A design with the Jacobian of its parameters w.r.t. the unit coordinates.
struct MappedDesign {
  MembraneDesign design;
  Lin thickness;
  Lin contact_radius;
  std::vector<std::pair<Lin, Lin>> rings;  ///< (centre, half width), increasing radius
};

/// Map u in [0,1]^(2+2k) to a feasible design. Rings are placed inside out:
/// each ring gets the span left after reserving room for the rings outside it,
/// its half width is a fraction of what fits, and its position a fraction of
/// the remaining slack.
inline MappedDesign map_unit(const DesignBox& box, std::size_t n_rings, const double* u) {
  MappedDesign out;
  auto clamp01 = [](double x) { return std::clamp(x, 0.0, 1.0); };
  out.thickness = box.thickness_lo + (box.thickness_hi - box.thickness_lo) * Lin::var(clamp01(u[0]), 0);
  out.contact_radius = box.contact_radius_lo +
                       (box.contact_radius_hi - box.contact_radius_lo) * Lin::var(clamp01(u[1]), 1);
  Lin prev = out.contact_radius;
  for (std::size_t i = 0; i < n_rings; ++i) {
    const double reserve = static_cast<double>(n_rings - 1 - i) * (2.0 * box.half_width_lo + box.gap);
    const Lin lo = prev + box.gap;
    const Lin span = Lin::constant(box.outer_radius - box.gap - reserve) - lo;
    const Lin wcap = min(Lin::constant(box.half_width_hi), 0.5 * span);
    const Lin uc = Lin::var(clamp01(u[2 + 2 * i]), 2 + 2 * i);
    const Lin uw = Lin::var(clamp01(u[3 + 2 * i]), 3 + 2 * i);
    const Lin w = box.half_width_lo + uw * (wcap + (-box.half_width_lo));
    const Lin a = lo + uc * (span - 2.0 * w);
    const Lin c = a + w;
    out.rings.emplace_back(c, w);
    prev = a + 2.0 * w;
  }
  out.design.thickness = out.thickness.v;
  out.design.contact_radius = out.contact_radius.v;
  out.design.outer_radius = box.outer_radius;
  for (const auto& [c, w] : out.rings) out.design.rings.push_back({c.v, w.v});
  return out;
}

/// Inverse of map_unit for a design that lies inside the box (used for warm
/// starts and tests). Coordinates are clamped into [0, 1].
inline std::vector<double> unmap_design(const DesignBox& box, const MembraneDesign& d) {
  const auto rings = d.sorted_rings();
  std::vector<double> u(DesignBox::dim(rings.size()), 0.0);
  auto frac = [](double x, double lo, double hi) {
    return hi > lo ? std::clamp((x - lo) / (hi - lo), 0.0, 1.0) : 0.0;
  };
  u[0] = frac(d.thickness, box.thickness_lo, box.thickness_hi);
  u[1] = frac(d.contact_radius, box.contact_radius_lo, box.contact_radius_hi);
  double prev = box.contact_radius_lo + u[1] * (box.contact_radius_hi - box.contact_radius_lo);
  for (std::size_t i = 0; i < rings.size(); ++i) {
    const double reserve =
        static_cast<double>(rings.size() - 1 - i) * (2.0 * box.half_width_lo + box.gap);
    const double lo = prev + box.gap;
    const double span = box.outer_radius - box.gap - reserve - lo;
    const double wcap = std::min(box.half_width_hi, 0.5 * span);
    u[3 + 2 * i] = frac(rings[i].half_width, box.half_width_lo, wcap);
    const double w = box.half_width_lo + u[3 + 2 * i] * (wcap - box.half_width_lo);
    u[2 + 2 * i] = frac(rings[i].inner(), lo, lo + span - 2.0 * w);
    prev = lo + u[2 + 2 * i] * (span - 2.0 * w) + 2.0 * w;
  }
  return u;
}

/// Chain rule from physical-parameter sensitivities to unit coordinates.
/// `d_rings` is in increasing-radius order, matching MappedDesign::rings.
inline Eigen::VectorXd pullback(const MappedDesign& m, double d_thickness, double d_contact_radius,
                                const std::vector<std::array<double, 2>>& d_rings) {
  const std::size_t n = DesignBox::dim(m.rings.size());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double s = d_thickness * m.thickness.g[i] + d_contact_radius * m.contact_radius.g[i];
    for (std::size_t k = 0; k < m.rings.size(); ++k) {
      s += d_rings[k][0] * m.rings[k].first.g[i] + d_rings[k][1] * m.rings[k].second.g[i];
    }
    g[static_cast<Eigen::Index>(i)] = s;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Projected L-BFGS on the unit box

struct LbfgsOptions {
  std::size_t memory = 8;
  std::size_t max_iter = 200;
  double pg_tol = 1e-8;    ///< stop when the projected gradient max-norm falls below this
  double f_tol = 1e-12;    ///< stop on relative decrease below this
  double armijo = 1e-4;
  std::size_t max_backtrack = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  bool converged = false;
};

/// Objective returning f(x) and writing the gradient into g.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& g)>;

/// Minimize f over [0, 1]^n. Components at an active bound whose gradient
/// points outward are frozen for the direction computation; steps are
/// projected back into the box with Armijo backtracking.
inline LbfgsResult minimize_box(const Objective& f, Eigen::VectorXd x0, const LbfgsOptions& opt = {}) {
  using Eigen::VectorXd;
  const Eigen::Index n = x0.size();
  auto project = [](VectorXd x) { return x.cwiseMax(0.0).cwiseMin(1.0).eval(); };
  auto free_mask = [&](const VectorXd& x, const VectorXd& g) {
    VectorXd m = VectorXd::Ones(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if ((x[i] <= 0.0 && g[i] > 0.0) || (x[i] >= 1.0 && g[i] < 0.0)) m[i] = 0.0;
    }
    return m;
  };
  LbfgsResult res;
  VectorXd x = project(std::move(x0));
  VectorXd g(n);
  double fx = f(x, g);
  ++res.evaluations;
  if (!std::isfinite(fx)) throw ModelEvaluationFailed("objective is not finite at the start point");
  std::deque<std::pair<VectorXd, VectorXd>> mem;  // (s, y)
  for (res.iterations = 0; res.iterations < opt.max_iter; ++res.iterations) {
    const VectorXd mask = free_mask(x, g);
    const VectorXd pg = g.cwiseProduct(mask);
    if (pg.lpNorm<Eigen::Infinity>() <= opt.pg_tol) {
      res.converged = true;
      break;
    }
    // Two-loop recursion on the free subspace.
    VectorXd q = pg;
    std::vector<double> alpha(mem.size());
    for (std::size_t k = mem.size(); k-- > 0;) {
      const auto& [s, y] = mem[k];
      const double rho = 1.0 / y.cwiseProduct(mask).dot(s.cwiseProduct(mask));
      alpha[k] = rho * s.cwiseProduct(mask).dot(q);
      q -= alpha[k] * y.cwiseProduct(mask);
    }
    if (!mem.empty()) {
      const auto& [s, y] = mem.back();
      const double yy = y.cwiseProduct(mask).squaredNorm();
      if (yy > 0.0) q *= s.cwiseProduct(mask).dot(y.cwiseProduct(mask)) / yy;
    }
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const auto& [s, y] = mem[k];
      const double rho = 1.0 / y.cwiseProduct(mask).dot(s.cwiseProduct(mask));
      const double beta = rho * y.cwiseProduct(mask).dot(q);
      q += (alpha[k] - beta) * s.cwiseProduct(mask);
    }
    VectorXd d = -q.cwiseProduct(mask);
    if (!(d.dot(pg) < 0.0) || !d.allFinite()) {
      d = -pg;
      mem.clear();
    }
    // Keep the first trial step inside a unit-scale neighbourhood.
    const double dn = d.lpNorm<Eigen::Infinity>();
    double step = dn > 1.0 ? 1.0 / dn : 1.0;
    VectorXd xn(n), gn(n);
    double fn = 0.0;
    bool accepted = false;
    for (std::size_t b = 0; b < opt.max_backtrack; ++b, step *= 0.5) {
      xn = project(x + step * d);
      fn = f(xn, gn);
      ++res.evaluations;
      if (std::isfinite(fn) && fn <= fx + opt.armijo * g.dot(xn - x)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (mem.empty()) {
        res.converged = true;  // no descent available at machine precision
        break;
      }
      mem.clear();
      continue;
    }
    const VectorXd s = xn - x;
    const VectorXd y = gn - g;
    const double rel = (fx - fn) / std::max({std::abs(fx), std::abs(fn), 1.0});
    x = xn;
    g = gn;
    const double prev = fx;
    fx = fn;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      mem.emplace_back(s, y);
      if (mem.size() > opt.memory) mem.pop_front();
    }
    if (rel >= 0.0 && rel < opt.f_tol && prev != fx) {
      res.converged = true;
      ++res.iterations;
      break;
    }
  }
  res.x = x;
  res.f = fx;
  return res;
}

// ---------------------------------------------------------------------------
// Multistart over ring-count classes

/// Seeded uniform start points spread round-robin over `classes`, in a fixed
/// order, so that start i always belongs to class i % classes.size().
template <typename Class>
std::vector<std::pair<Class, Eigen::VectorXd>> multistart_points(
    const std::vector<Class>& classes, std::size_t n_starts, std::uint64_t seed,
    const std::function<std::size_t(const Class&)>& dim) {
  std::vector<std::pair<Class, Eigen::VectorXd>> out;
  out.reserve(n_starts);
  for (std::size_t i = 0; i < n_starts; ++i) {
    const Class& c = classes[i % classes.size()];
    Rng rng(mix_seed(seed, i));
    Eigen::VectorXd u(static_cast<Eigen::Index>(dim(c)));
    for (Eigen::Index k = 0; k < u.size(); ++k) u[k] = rng.uniform();
    out.emplace_back(c, std::move(u));
  }
  return out;
}

}  // namespace mforge
