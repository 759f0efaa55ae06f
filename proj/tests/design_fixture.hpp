#pragma once

// Analytic force models for the design-optimization tests and the acceptance run.

#include <array>
#include <cmath>

#include "membrane_forge/design_opt.hpp"

namespace fixture {

using namespace mforge;

/// F = a p - b h.
inline ForceModel affine_model(double a, double b) {
  return [a, b](const MembraneDesign& d, double h, double p, bool) {
    ForceEval e;
    e.f = a * p - b * h;
    e.df_dh = -b;
    e.df_dp = a;
    e.df_drings.assign(d.rings.size(), {0.0, 0.0});
    return e;
  };
}

/// F = a p - b h + q(M) with q a concave bowl peaking at a one-ring design.
/// Every target height grows with q, so the posterior peaks exactly at the
/// bowl centre. Designs with 0 or 2 rings sit at least 3 N lower.
struct Bowl {
  double a = 5.0;    // [N/kPa]
  double b = 0.5;    // [N/mm]
  double q0 = 20.0;  // [N]
  double k = 4.0;    // [N]
  MembraneDesign centre{30.0, 2.4, {{50.0, 7.0}}};
  std::array<double, 4> scale{1.0, 12.7, 20.0, 5.0};  // t, r0, ring centre, ring half width

  ForceEval operator()(const MembraneDesign& d, double h, double p, bool) const {
    ForceEval e;
    e.df_dh = -b;
    e.df_dp = a;
    e.df_drings.assign(d.rings.size(), {0.0, 0.0});
    auto term = [&](double x, double c, double s, double& grad) {
      const double z = (x - c) / s;
      grad = -2.0 * k * z / s;
      return -k * z * z;
    };
    double q = q0 + term(d.thickness, centre.thickness, scale[0], e.df_dt) +
               term(d.contact_radius, centre.contact_radius, scale[1], e.df_dr0);
    if (d.rings.size() == 1) {
      q += term(d.rings[0].center_radius, centre.rings[0].center_radius, scale[2], e.df_drings[0][0]);
      q += term(d.rings[0].half_width, centre.rings[0].half_width, scale[3], e.df_drings[0][1]);
    } else {
      q -= 3.0;
    }
    e.f = a * p - b * h + q;
    return e;
  }

  /// Targets whose heights at the bowl centre are 60, 50 and 40 mm.
  static LiftTargets targets() {
    LiftTargets t;
    t.forces_n = {10.0, 15.0, 20.0};
    t.pressures_kpa = {4.0, 4.0, 4.0};
    return t;
  }

  /// Posterior at the centre: k_height times the smooth min of the three heights.
  static double peak_pi() {
    const LiftTargets t = targets();
    return t.k_height * smooth_min({60.0, 50.0, 40.0}, t.gamma).first;
  }
};

}  // namespace fixture
