#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "membrane_forge/dataset.hpp"
#include "membrane_forge/errors.hpp"

namespace mforge {

/// Least-squares baseline: every monomial of total degree <= 3 in normalized
/// (p, h), plus each design parameter z times {1, p, h}. Ring slots are taken
/// in radius order and contribute zero when absent.
struct CurveFit {
  NormStats norm;
  std::vector<int> active;  ///< indices of candidate features that were fitted
  Eigen::VectorXd coef;

  static constexpr int kPolyTerms = 10;
  static constexpr int kDesignParams = 6;  // t, r0, c1, w1, c2, w2
  static constexpr int kCandidates = kPolyTerms + 3 * kDesignParams;

  static std::array<double, kCandidates> candidates(const NormStats& n, const MembraneDesign& d,
                                                    double h_mm, double p_kpa) {
    std::array<double, kCandidates> f{};
    const double p = n.pressure.normalize(p_kpa);
    const double h = n.height.normalize(h_mm);
    int k = 0;
    for (int deg = 0; deg <= 3; ++deg) {
      for (int a = deg; a >= 0; --a) f[k++] = std::pow(p, a) * std::pow(h, deg - a);
    }
    std::array<double, kDesignParams> z{n.thickness.normalize(d.thickness),
                                        n.contact_radius.normalize(d.contact_radius)};
    const auto rings = d.sorted_rings();
    for (std::size_t s = 0; s < rings.size() && s < 2; ++s) {
      z[2 + 2 * s] = n.ring_center.normalize(rings[s].center_radius);
      z[3 + 2 * s] = n.ring_width.normalize(rings[s].half_width);
    }
    for (int i = 0; i < kDesignParams; ++i) {
      f[k++] = z[i];
      f[k++] = z[i] * p;
      f[k++] = z[i] * h;
    }
    return f;
  }

  double predict(const MembraneDesign& d, double h_mm, double p_kpa) const {
    const auto f = candidates(norm, d, h_mm, p_kpa);
    double s = 0.0;
    for (std::size_t i = 0; i < active.size(); ++i) s += coef[static_cast<Eigen::Index>(i)] * f[active[i]];
    return s;
  }
};

/// Fit the baseline. Ring features that are zero on every training row (no
/// ring in that slot anywhere) are dropped before the rank check.
inline CurveFit fit_curvefit(const Dataset& train) {
  if (train.row_count() == 0) throw EmptyDataset("curve fit needs training rows");
  CurveFit cf;
  cf.norm = compute_norm_stats(train);
  std::vector<std::array<double, CurveFit::kCandidates>> rows;
  std::vector<double> y;
  for (const auto& r : train.records()) {
    for (const auto& s : r.samples) {
      rows.push_back(CurveFit::candidates(cf.norm, r.design, r.height_mm, s.p_kpa));
      y.push_back(s.f_n);
    }
  }
  for (int j = 0; j < CurveFit::kCandidates; ++j) {
    bool any = j < CurveFit::kPolyTerms + 6;  // polynomial, thickness and radius terms always kept
    for (const auto& row : rows) {
      if (any) break;
      any = row[j] != 0.0;
    }
    if (any) cf.active.push_back(j);
  }
  const auto m = static_cast<Eigen::Index>(rows.size());
  const auto n = static_cast<Eigen::Index>(cf.active.size());
  if (m < n) {
    throw RankDeficient("curve fit has " + std::to_string(m) + " rows for " + std::to_string(n) +
                        " coefficients");
  }
  Eigen::MatrixXd A(m, n);
  Eigen::VectorXd b(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = rows[static_cast<std::size_t>(i)][cf.active[static_cast<std::size_t>(j)]];
    b[i] = y[static_cast<std::size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < n) {
    throw RankDeficient("curve fit design matrix has rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(n));
  }
  cf.coef = qr.solve(b);
  return cf;
}

inline double curvefit_rmse(const CurveFit& cf, const Dataset& ds) {
  if (ds.row_count() == 0) throw EmptyDataset("RMSE of an empty dataset");
  double se = 0.0;
  std::size_t n = 0;
  for (const auto& r : ds.records()) {
    for (const auto& s : r.samples) {
      const double e = cf.predict(r.design, r.height_mm, s.p_kpa) - s.f_n;
      se += e * e;
      ++n;
    }
  }
  return std::sqrt(se / static_cast<double>(n));
}

inline double curvefit_baseline(const Dataset& train, const Dataset& test) {
  return curvefit_rmse(fit_curvefit(train), test);
}

}  // namespace mforge
