#pragma once

#include <cmath>
#include <string>
#include <type_traits>

#include "membrane_forge/errors.hpp"

namespace mforge {

/// Gent constants for one incompressible membrane material.
///
/// Units follow the library convention: moduli in MPa, lengths in mm, so
/// that MPa * mm^2 comes out in newtons.
struct MaterialParams {
  double mu = 0.0315;      ///< shear modulus [MPa]
  double jm = 39.6;        ///< extension-limit constant [-]
  double thickness = 2.0;  ///< undeformed thickness t [mm]

  static MaterialParams from_kpa(double mu_kpa, double jm, double thickness_mm) {
    return {mu_kpa * 1e-3, jm, thickness_mm};
  }

  void validate() const {
    if (!(mu > 0.0) || !(jm > 0.0) || !(thickness > 0.0)) {
      throw InvalidDesign("material parameters must be positive (mu, Jm, thickness)");
    }
  }
};

/// Silicone plus strain-limiter constants. Rings are modelled as a stiff Gent
/// solid that locks up quickly.
struct MaterialSet {
  double mu_kpa = 31.5;
  double jm = 39.6;
  double ring_mu_scale = 100.0;
  double ring_jm = 1.0;

  MaterialParams silicone(double thickness) const {
    return MaterialParams::from_kpa(mu_kpa, jm, thickness);
  }
  MaterialParams ring(double thickness) const {
    return MaterialParams::from_kpa(mu_kpa * ring_mu_scale, ring_jm, thickness);
  }
};

/// First and second partials of W with respect to the principal stretches.
struct GentDerivatives {
  double w1 = 0.0;
  double w2 = 0.0;
  double w11 = 0.0;
  double w12 = 0.0;
  double w22 = 0.0;
};

/// Inputs closer than this to the Gent lock-up are rejected.
inline constexpr double kGentGuard = 1e-9;

namespace detail {

template <typename T>
T first_invariant(const T& l1, const T& l2) {
  const T inv = 1.0 / (l1 * l1 * l2 * l2);
  return l1 * l1 + l2 * l2 + inv;
}

template <typename T>
double scalar_part(const T& v) {
  if constexpr (std::is_arithmetic_v<T>) {
    return static_cast<double>(v);
  } else {
    return v.a;  // ceres::Jet and friends
  }
}

inline void check_domain(double l1, double l2, double i1_minus_3, double jm) {
  if (!(l1 > 0.0) || !(l2 > 0.0) || !std::isfinite(l1) || !std::isfinite(l2)) {
    throw ExtensionLimitExceeded("stretches must be positive and finite (l1=" +
                                 std::to_string(l1) + ", l2=" + std::to_string(l2) + ")");
  }
  if (!(jm - i1_minus_3 > kGentGuard)) {
    throw ExtensionLimitExceeded("Gent extension limit reached: I1-3=" +
                                 std::to_string(i1_minus_3) + " >= Jm=" + std::to_string(jm));
  }
}

}  // namespace detail

/// True when (l1, l2) lies strictly inside the admissible Gent region.
inline bool gent_admissible(double l1, double l2, const MaterialParams& mat) {
  if (!(l1 > 0.0) || !(l2 > 0.0) || !std::isfinite(l1) || !std::isfinite(l2)) return false;
  return mat.jm - (detail::first_invariant(l1, l2) - 3.0) > kGentGuard;
}

/// Gent strain-energy density with lambda3 = 1 / (l1 l2).
///
///   W = -(mu Jm / 2) ln(1 - (I1 - 3) / Jm)
///
/// Templated on the scalar so that automatic-differentiation types can flow
/// through it.
template <typename T = double>
T gent_energy(const T& l1, const T& l2, const MaterialParams& mat) {
  using std::log;
  const T i1m3 = detail::first_invariant(l1, l2) - 3.0;
  detail::check_domain(detail::scalar_part(l1), detail::scalar_part(l2),
                       detail::scalar_part(i1m3), mat.jm);
  return -(mat.mu * mat.jm / 2.0) * log(1.0 - i1m3 / mat.jm);
}

inline GentDerivatives gent_derivatives(double l1, double l2, const MaterialParams& mat) {
  const double l1s = l1 * l1;
  const double l2s = l2 * l2;
  const double i1m3 = l1s + l2s + 1.0 / (l1s * l2s) - 3.0;
  detail::check_domain(l1, l2, i1m3, mat.jm);

  // dI1/dl_i and d2I1/dl_i dl_j
  const double a1 = 2.0 * l1 - 2.0 / (l1s * l1 * l2s);
  const double a2 = 2.0 * l2 - 2.0 / (l1s * l2s * l2);
  const double a11 = 2.0 + 6.0 / (l1s * l1s * l2s);
  const double a22 = 2.0 + 6.0 / (l1s * l2s * l2s);
  const double a12 = 4.0 / (l1s * l1 * l2s * l2);

  const double d = mat.jm - i1m3;
  const double k = mat.mu * mat.jm / 2.0;
  const double inv_d = 1.0 / d;
  const double inv_d2 = inv_d * inv_d;

  GentDerivatives out;
  out.w1 = k * a1 * inv_d;
  out.w2 = k * a2 * inv_d;
  out.w11 = k * (a11 * inv_d + a1 * a1 * inv_d2);
  out.w12 = k * (a12 * inv_d + a1 * a2 * inv_d2);
  out.w22 = k * (a22 * inv_d + a2 * a2 * inv_d2);
  return out;
}

/// Largest meridional stretch admissible at l2 = 1 (the clamped/contact state).
inline double gent_lockup_stretch(const MaterialParams& mat) {
  // x^2 + 1/x^2 - 2 = Jm - guard  =>  (x - 1/x)^2 = Jm - guard
  const double s = std::sqrt(mat.jm - 2.0 * kGentGuard);
  return 0.5 * (s + std::sqrt(s * s + 4.0));
}

}  // namespace mforge
