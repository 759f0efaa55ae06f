#pragma once

// Direct minimization of the total potential of a ring-free membrane,
// independent of the shooting solver. Nodes (R_i, Z_i) on a uniform grid in
// the undeformed radius; node 0 is bonded to the plate (R = r0, Z free),
// the last node is clamped at (rf, 0).

#include <cmath>
#include <numbers>
#include <vector>

#include <ceres/ceres.h>

#include "membrane_forge/material.hpp"

namespace oracle {

struct Result {
  double contact_height = 0.0;
  double energy = 0.0;
  bool converged = false;
  int iterations = 0;
};

class Potential : public ceres::FirstOrderFunction {
 public:
  Potential(double r0, double rf, double t, double p, double F, const mforge::MaterialParams& mat,
            int nodes)
      : r0_(r0), rf_(rf), t_(t), p_(p), F_(F), mat_(mat), n_(nodes), dr_((rf - r0) / (nodes - 1)) {}

  int NumParameters() const override { return 1 + 2 * (n_ - 2); }

  bool Evaluate(const double* x, double* cost, double* grad) const override {
    using J = ceres::Jet<double, 4>;
    if (grad != nullptr) std::fill(grad, grad + NumParameters(), 0.0);
    double total = F_ * x[0];
    if (grad != nullptr) grad[0] += F_;
    for (int i = 0; i + 1 < n_; ++i) {
      // local dofs (Ra, Za, Rb, Zb) and their parameter slots (-1 = fixed)
      int slot[4];
      double v[4];
      node(x, i, v[0], v[1], slot[0], slot[1]);
      node(x, i + 1, v[2], v[3], slot[2], slot[3]);
      J Ra(v[0], 0), Za(v[1], 1), Rb(v[2], 2), Zb(v[3], 3);
      const double rm = r0_ + (i + 0.5) * dr_;
      const J l1 = ceres::sqrt((Rb - Ra) * (Rb - Ra) + (Zb - Za) * (Zb - Za)) / dr_;
      const J l2 = (Ra + Rb) / (2.0 * rm);
      if (!mforge::gent_admissible(l1.a, l2.a, mat_)) return false;
      const J w = mforge::gent_energy<J>(l1, l2, mat_);
      // Pressure work from the volume swept between membrane and clamp plane.
      const J vol = std::numbers::pi * (Ra * Ra + Ra * Rb + Rb * Rb) / 3.0 * (Za - Zb);
      const J e = 2.0 * std::numbers::pi * t_ * rm * dr_ * w - p_ * vol;
      total += e.a;
      if (grad != nullptr) {
        for (int k = 0; k < 4; ++k) {
          if (slot[k] >= 0) grad[slot[k]] += e.v[k];
        }
      }
    }
    *cost = total;
    return std::isfinite(total);
  }

  void node(const double* x, int i, double& R, double& Z, int& sR, int& sZ) const {
    if (i == 0) {
      R = r0_;
      Z = x[0];
      sR = -1;
      sZ = 0;
    } else if (i == n_ - 1) {
      R = rf_;
      Z = 0.0;
      sR = sZ = -1;
    } else {
      sR = 1 + 2 * (i - 1);
      sZ = sR + 1;
      R = x[sR];
      Z = x[sZ];
    }
  }

 private:
  double r0_, rf_, t_, p_, F_;
  mforge::MaterialParams mat_;
  int n_;
  double dr_;
};

/// p in MPa, F in N. Starts from a stretched cone of height z0.
inline Result minimize(double r0, double t, double p, double F, const mforge::MaterialSet& mats,
                       int nodes = 200, double rf = 70.0, double z0 = 15.0) {
  auto* fn = new Potential(r0, rf, t, p, F, mats.silicone(t), nodes);
  std::vector<double> x(fn->NumParameters());
  const double dr = (rf - r0) / (nodes - 1);
  x[0] = z0;
  for (int i = 1; i + 1 < nodes; ++i) {
    const double s = static_cast<double>(i) / (nodes - 1);
    x[1 + 2 * (i - 1)] = r0 + i * dr;
    x[2 + 2 * (i - 1)] = z0 * (1.0 - s);
  }
  ceres::GradientProblem problem(fn);
  ceres::GradientProblemSolver::Options opt;
  opt.line_search_direction_type = ceres::LBFGS;
  opt.max_lbfgs_rank = 40;
  opt.max_num_iterations = 200000;
  opt.function_tolerance = 1e-16;
  opt.gradient_tolerance = 1e-14;
  opt.parameter_tolerance = 1e-14;
  opt.logging_type = ceres::SILENT;
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(opt, problem, x.data(), &summary);
  Result r;
  r.contact_height = x[0];
  r.energy = summary.final_cost;
  r.iterations = static_cast<int>(summary.iterations.size());
  r.converged = summary.termination_type == ceres::CONVERGENCE;
  return r;
}

}  // namespace oracle
