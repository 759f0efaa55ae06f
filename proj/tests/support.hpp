#pragma once

// Fixtures and numerical checks shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <vector>

#include "membrane_forge/dataset.hpp"
#include "membrane_forge/rng.hpp"
#include "membrane_forge/surrogate.hpp"

namespace support {

using namespace mforge;
using Eigen::VectorXd;

/// Normalization with distinct, non-unit statistics on every input.
inline NormStats sample_norm() {
  NormStats n;
  n.ring_center = {50.0, 8.0};
  n.ring_width = {6.5, 1.2};
  n.thickness = {2.0, 0.5};
  n.contact_radius = {30.0, 4.0};
  n.height = {30.0, 20.0};
  n.pressure = {3.5, 2.0};
  n.force = {25.0, 15.0};
  return n;
}

/// Random design inside the fabricable box with `rings` rings in random order.
inline MembraneDesign random_design(Rng& rng, std::size_t rings) {
  MembraneDesign d;
  d.thickness = rng.uniform(1.0, 3.0);
  d.contact_radius = rng.uniform(25.4, 38.1);
  double lo = d.contact_radius + 0.5;
  for (std::size_t k = 0; k < rings; ++k) {
    const double room = (70.0 - 0.5 - lo) / static_cast<double>(rings - k);
    const double w = rng.uniform(5.0, std::min(10.0, room / 2.0));
    const double c = rng.uniform(lo + w, lo + room - w);
    d.rings.push_back({c, w});
    lo = c + w + 0.5;
  }
  if (rings == 2 && rng.uniform() < 0.5) std::swap(d.rings[0], d.rings[1]);
  return d;
}

inline double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Parameter gradient of the batch MSE vs central differences (step 1e-4).
inline GradCheck param_gradient_check(const nn::ModelConfig& cfg, std::size_t n_coords,
                                      std::uint64_t seed) {
  const NormStats norm = sample_norm();
  nn::Architecture arch(cfg);
  Rng rng(seed);
  VectorXd params = nn::init_params(arch, seed);
  for (Eigen::Index i = 0; i < params.size(); ++i) params[i] += 0.1 * rng.normal();
  std::vector<nn::TrainingRow> rows;
  for (int i = 0; i < 24; ++i) {
    const MembraneDesign d = random_design(rng, static_cast<std::size_t>(i % 3));
    const double h = rng.uniform(0.0, 70.0);
    for (int k = 0; k < 4; ++k) rows.push_back({d, h, rng.uniform(0.3, 7.5), rng.uniform(0.0, 60.0)});
  }
  const auto recs = nn::moments_from_rows(norm, cfg.poly_degree, rows);
  const auto lg = nn::loss_and_grad(arch, params, norm, recs);
  const double gscale = lg.grad.cwiseAbs().maxCoeff();
  GradCheck out;
  const double h = 1e-4;
  for (std::size_t c = 0; c < n_coords; ++c) {
    const auto i = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(params.size())));
    VectorXd p = params;
    p[i] += h;
    const double up = nn::loss_and_grad(arch, p, norm, recs, false).loss;
    p[i] -= 2 * h;
    const double dn = nn::loss_and_grad(arch, p, norm, recs, false).loss;
    const double fd = (up - dn) / (2 * h);
    // Coordinates with negligible gradient are compared against the gradient scale.
    out.max_rel = std::max(out.max_rel, rel_err(lg.grad[i], fd, 1e-3 * gscale));
    ++out.checked;
  }
  return out;
}

/// Gradients of predict_force w.r.t. (t, r0, h, p, ring centre, ring width)
/// vs central differences with a 1e-5 relative step.
inline GradCheck input_gradient_check(const nn::ModelConfig& cfg, std::size_t n_points,
                                      std::uint64_t seed) {
  Rng rng(seed);
  nn::SurrogateModel m = nn::SurrogateModel::create(cfg, sample_norm());
  for (Eigen::Index i = 0; i < m.params.size(); ++i) m.params[i] += 0.1 * rng.normal();
  GradCheck out;
  for (std::size_t n = 0; n < n_points; ++n) {
    const MembraneDesign d = random_design(rng, n % 3);
    const double h = rng.uniform(0.0, 70.0), p = rng.uniform(0.3, 7.5);
    const auto g = nn::predict_force_gradient(m, d, h, p);
    const double scale = std::max({std::abs(g.d_thickness), std::abs(g.d_contact_radius),
                                   std::abs(g.d_height), std::abs(g.d_pressure)});
    auto check = [&](double analytic, auto perturb, double x) {
      const double step = 1e-5 * std::max(1.0, std::abs(x));
      const double fd = (perturb(step) - perturb(-step)) / (2 * step);
      out.max_rel = std::max(out.max_rel, rel_err(analytic, fd, 1e-3 * scale));
      ++out.checked;
    };
    check(g.d_thickness, [&](double e) { auto q = d; q.thickness += e; return nn::predict_force(m, q, h, p); },
          d.thickness);
    check(g.d_contact_radius,
          [&](double e) { auto q = d; q.contact_radius += e; return nn::predict_force(m, q, h, p); },
          d.contact_radius);
    check(g.d_height, [&](double e) { return nn::predict_force(m, d, h + e, p); }, h);
    check(g.d_pressure, [&](double e) { return nn::predict_force(m, d, h, p + e); }, p);
    for (std::size_t k = 0; k < d.rings.size(); ++k) {
      check(g.d_rings[k][0],
            [&](double e) { auto q = d; q.rings[k].center_radius += e; return nn::predict_force(m, q, h, p); },
            d.rings[k].center_radius);
      check(g.d_rings[k][1],
            [&](double e) { auto q = d; q.rings[k].half_width += e; return nn::predict_force(m, q, h, p); },
            d.rings[k].half_width);
    }
  }
  return out;
}

/// Number of random two-ring designs whose prediction changes under ring swap.
inline std::size_t permutation_mismatches(std::size_t n_designs, std::uint64_t seed) {
  Rng rng(seed);
  nn::ModelConfig cfg;
  cfg.seed = seed;
  nn::SurrogateModel m = nn::SurrogateModel::create(cfg, sample_norm());
  for (Eigen::Index i = 0; i < m.params.size(); ++i) m.params[i] += 0.05 * rng.normal();
  std::size_t bad = 0;
  for (std::size_t i = 0; i < n_designs; ++i) {
    MembraneDesign d = random_design(rng, 2);
    const double h = rng.uniform(0.0, 70.0), p = rng.uniform(0.3, 7.5);
    MembraneDesign s = d;
    std::swap(s.rings[0], s.rings[1]);
    if (nn::predict_force(m, d, h, p) != nn::predict_force(m, s, h, p)) ++bad;
  }
  return bad;
}

}  // namespace support
