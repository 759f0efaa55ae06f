#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "membrane_forge/errors.hpp"

namespace mforge {

/// Design-space limits for fabricated membranes.
namespace limits {
inline constexpr double kMinThickness = 1.0;
inline constexpr double kMaxThickness = 3.0;
inline constexpr double kMinContactRadius = 25.4;
inline constexpr double kMaxContactRadius = 38.1;
inline constexpr double kOuterRadius = 70.0;
inline constexpr double kMinRingHalfWidth = 5.0;  // r_outer - r_inner >= 10 mm
inline constexpr std::size_t kMaxRings = 2;
}  // namespace limits

/// Strain-limiting annulus, described by its centreline radius and the
/// centre-to-edge distance.
struct Ring {
  double center_radius = 0.0;  // mm
  double half_width = 0.0;     // mm

  double inner() const { return center_radius - half_width; }
  double outer() const { return center_radius + half_width; }

  friend bool operator==(const Ring&, const Ring&) = default;
};

struct MembraneDesign {
  double contact_radius = limits::kMinContactRadius;  // r0, mm
  double thickness = 2.0;                             // t, mm
  std::vector<Ring> rings;                            // 0-2, any order on input
  double outer_radius = limits::kOuterRadius;         // rf, mm

  friend bool operator==(const MembraneDesign&, const MembraneDesign&) = default;

  /// Rings sorted by centre radius.
  std::vector<Ring> sorted_rings() const {
    std::vector<Ring> out = rings;
    std::sort(out.begin(), out.end(), [](const Ring& a, const Ring& b) {
      return a.center_radius < b.center_radius;
    });
    return out;
  }

  MembraneDesign canonical() const {
    MembraneDesign d = *this;
    d.rings = sorted_rings();
    return d;
  }
};

/// Why a design is outside the fabricable space; empty string when valid.
inline std::string design_violation(const MembraneDesign& d, bool enforce_bounds = true) {
  auto fmt = [](const char* f, double a, double b = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return std::string(buf);
  };
  if (!std::isfinite(d.thickness) || !(d.thickness > 0.0)) return "thickness must be positive";
  if (!std::isfinite(d.contact_radius) || !(d.contact_radius > 0.0))
    return "contact radius must be positive";
  if (!(d.outer_radius > d.contact_radius)) return "outer radius must exceed contact radius";
  if (enforce_bounds) {
    if (d.thickness < limits::kMinThickness - 1e-12 || d.thickness > limits::kMaxThickness + 1e-12)
      return fmt("thickness %.4g mm outside [1, 3]", d.thickness);
    if (d.contact_radius < limits::kMinContactRadius - 1e-12 ||
        d.contact_radius > limits::kMaxContactRadius + 1e-12)
      return fmt("contact radius %.4g mm outside [25.4, 38.1]", d.contact_radius);
  }
  if (d.rings.size() > limits::kMaxRings) return "at most two rings";
  const auto rings = d.sorted_rings();
  double prev_outer = d.contact_radius;
  for (const Ring& r : rings) {
    if (!std::isfinite(r.center_radius) || !std::isfinite(r.half_width) || !(r.half_width > 0.0))
      return "ring geometry must be finite with positive half width";
    if (enforce_bounds && r.half_width < limits::kMinRingHalfWidth - 1e-12)
      return fmt("ring half width %.4g mm below 5 mm", r.half_width);
    if (!(r.inner() > prev_outer))
      return fmt("ring inner radius %.4g mm must exceed %.4g mm", r.inner(), prev_outer);
    prev_outer = r.outer();
  }
  if (!(prev_outer < d.outer_radius))
    return fmt("ring outer radius %.4g mm must stay inside %.4g mm", prev_outer, d.outer_radius);
  return {};
}

inline void validate_design(const MembraneDesign& d, bool enforce_bounds = true) {
  if (auto why = design_violation(d, enforce_bounds); !why.empty()) throw InvalidDesign(why);
}

/// Canonical key used to group records by membrane. Rings are sorted so that
/// the key does not depend on ring order.
inline std::string design_key(const MembraneDesign& d) {
  char buf[64];
  std::string key;
  std::snprintf(buf, sizeof buf, "t=%.4f|r0=%.4f", d.thickness, d.contact_radius);
  key += buf;
  for (const Ring& r : d.sorted_rings()) {
    std::snprintf(buf, sizeof buf, "|ring=%.4f/%.4f", r.center_radius, r.half_width);
    key += buf;
  }
  if (std::abs(d.outer_radius - limits::kOuterRadius) > 1e-12) {
    std::snprintf(buf, sizeof buf, "|rf=%.4f", d.outer_radius);
    key += buf;
  }
  return key;
}

enum class SegmentMaterial { silicone, ring };

struct Segment {
  double r_begin = 0.0;
  double r_end = 0.0;
  SegmentMaterial material = SegmentMaterial::silicone;
};

/// Contiguous partition of [r0, rf] into silicone and ring intervals.
using SegmentLayout = std::vector<Segment>;

inline SegmentLayout segment_layout(const MembraneDesign& d) {
  SegmentLayout out;
  double a = d.contact_radius;
  for (const Ring& r : d.sorted_rings()) {
    out.push_back({a, r.inner(), SegmentMaterial::silicone});
    out.push_back({r.inner(), r.outer(), SegmentMaterial::ring});
    a = r.outer();
  }
  out.push_back({a, d.outer_radius, SegmentMaterial::silicone});
  return out;
}

/// The six design parameters in the fixed order
/// (contact radius, thickness, ring1 radius, ring1 width, ring2 radius, ring2 width);
/// absent rings are NaN.
inline std::array<double, 6> design_vector(const MembraneDesign& d) {
  const double nan = std::nan("");
  std::array<double, 6> v{d.contact_radius, d.thickness, nan, nan, nan, nan};
  const auto rings = d.sorted_rings();
  for (std::size_t i = 0; i < rings.size() && i < 2; ++i) {
    v[2 + 2 * i] = rings[i].center_radius;
    v[3 + 2 * i] = rings[i].half_width;
  }
  return v;
}

/// Designs listed in the lift-experiment table (rows 1-5 were characterised,
/// rows 6-7 are the optimised designs).
inline std::vector<MembraneDesign> reference_designs() {
  return {
      {25.4, 2.0, {}},
      {25.4, 2.0, {{49.0, 5.0}, {62.0, 5.0}}},
      {29.6, 2.3, {{37.6, 5.0}, {62.0, 5.0}}},
      {28.0, 2.0, {{45.6, 5.0}, {60.3, 6.7}}},
      {38.1, 2.0, {{47.6, 6.4}, {62.0, 5.0}}},
      {25.4, 2.0, {{33.4, 5.0}, {46.4, 5.0}}},
      {31.9, 2.0, {{46.0, 5.0}, {59.0, 5.0}}},
  };
}

}  // namespace mforge
