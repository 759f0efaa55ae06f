#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <exception>
#include <span>
#include <vector>

#include "membrane_forge/errors.hpp"

namespace mforge::ode {

struct Options {
  double abs_tol = 1e-9;
  double rel_tol = 1e-9;
  double min_step = 1e-12;  ///< relative to the interval length
  std::size_t max_steps = 200000;
};

struct Stats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t rhs_evals = 0;
};

/// Dormand-Prince 5(4) with the classic 4th-order continuous extension.
///
/// The right-hand side may throw mforge::Error when a stage leaves the
/// admissible domain (Gent lock-up, vanishing denominators). Such a stage
/// rejects the step and the step is shrunk; only when the step falls below
/// the floor is the last stage error rethrown. Intermediate stages of a large
/// step can wander outside the domain even when the true solution does not.
template <std::size_t N>
class Dopri5 {
 public:
  using State = std::array<double, N>;

  explicit Dopri5(Options opts = {}) : opts_(opts) {}

  const Stats& stats() const { return stats_; }

  /// Integrate y' = f(t, y) from t0 to t1 (t1 > t0). `on_step` is called after
  /// every accepted step as on_step(t_old, t_new, dense) where dense(t)
  /// evaluates the interpolant on [t_old, t_new].
  template <typename Rhs, typename OnStep>
  State integrate(Rhs&& f, State y, double t0, double t1, OnStep&& on_step) {
    const double span = t1 - t0;
    if (!(span > 0.0)) return y;
    const double h_floor = opts_.min_step * span;

    State k1 = eval(f, t0, y);
    double h = initial_step(f, t0, y, k1, span);
    double t = t0;
    std::exception_ptr last_stage_error;
    std::size_t steps = 0;

    State k2, k3, k4, k5, k6, k7, ytmp, ynew, yerr;
    while (t < t1) {
      if (++steps > opts_.max_steps) {
        throw SingularRhs("integrator exceeded step budget at r=" + std::to_string(t));
      }
      const bool last = t + h >= t1;
      if (last) h = t1 - t;

      bool stage_ok = true;
      try {
        for (std::size_t i = 0; i < N; ++i) ytmp[i] = y[i] + h * (a21 * k1[i]);
        k2 = eval(f, t + c2 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i) ytmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
        k3 = eval(f, t + c3 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
          ytmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
        k4 = eval(f, t + c4 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
          ytmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
        k5 = eval(f, t + c5 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
          ytmp[i] =
              y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
        k6 = eval(f, t + h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
          ynew[i] = y[i] + h * (a71 * k1[i] + a73 * k3[i] + a74 * k4[i] + a75 * k5[i] +
                                a76 * k6[i]);
        k7 = eval(f, t + h, ynew);
      } catch (const Error&) {
        stage_ok = false;
        last_stage_error = std::current_exception();
      }

      double err = 0.0;
      if (stage_ok) {
        for (std::size_t i = 0; i < N; ++i) {
          yerr[i] = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] +
                         e7 * k7[i]);
          const double sc =
              opts_.abs_tol + opts_.rel_tol * std::max(std::abs(y[i]), std::abs(ynew[i]));
          const double q = yerr[i] / sc;
          err += q * q;
        }
        err = std::sqrt(err / static_cast<double>(N));
        if (!std::isfinite(err)) stage_ok = false;
      }

      if (!stage_ok) {
        ++stats_.rejected;
        h *= 0.25;
        if (h < h_floor) {
          if (last_stage_error) std::rethrow_exception(last_stage_error);
          throw SingularRhs("step size collapsed at r=" + std::to_string(t));
        }
        continue;
      }

      if (err <= 1.0) {
        ++stats_.accepted;
        // Dense-output coefficients for [t, t + h].
        std::array<State, 5> rc;
        for (std::size_t i = 0; i < N; ++i) {
          const double ydiff = ynew[i] - y[i];
          const double bspl = h * k1[i] - ydiff;
          rc[0][i] = y[i];
          rc[1][i] = ydiff;
          rc[2][i] = bspl;
          rc[3][i] = ydiff - h * k7[i] - bspl;
          rc[4][i] = h * (d1 * k1[i] + d3 * k3[i] + d4 * k4[i] + d5 * k5[i] + d6 * k6[i] +
                          d7 * k7[i]);
        }
        const double t_old = t;
        const double h_used = h;
        auto dense = [&rc, t_old, h_used](double tq) {
          const double th = (tq - t_old) / h_used;
          const double th1 = 1.0 - th;
          State out;
          for (std::size_t i = 0; i < N; ++i) {
            out[i] = rc[0][i] +
                     th * (rc[1][i] + th1 * (rc[2][i] + th * (rc[3][i] + th1 * rc[4][i])));
          }
          return out;
        };
        t = last ? t1 : t + h;
        y = ynew;
        k1 = k7;  // FSAL
        on_step(t_old, t, dense);
        const double fac = std::clamp(0.9 * std::pow(std::max(err, 1e-10), -0.2), 0.2, 5.0);
        h *= fac;
      } else {
        ++stats_.rejected;
        h *= std::clamp(0.9 * std::pow(err, -0.2), 0.1, 0.9);
        if (h < h_floor) throw SingularRhs("step size collapsed at r=" + std::to_string(t));
      }
    }
    return y;
  }

  template <typename Rhs>
  State integrate(Rhs&& f, State y, double t0, double t1) {
    return integrate(std::forward<Rhs>(f), y, t0, t1, [](double, double, const auto&) {});
  }

  /// Integrate and sample the dense solution at the increasing abscissae
  /// `nodes` (all within [t0, t1]). Returns one state per node.
  template <typename Rhs>
  std::vector<State> integrate_nodes(Rhs&& f, State y0, double t0, double t1,
                                     std::span<const double> nodes) {
    std::vector<State> out(nodes.size());
    std::size_t next = 0;
    while (next < nodes.size() && nodes[next] <= t0) out[next++] = y0;
    const State yend = integrate(std::forward<Rhs>(f), y0, t0, t1,
                                 [&](double, double t_new, const auto& dense) {
                                   while (next < nodes.size() && nodes[next] <= t_new) {
                                     out[next] = dense(nodes[next]);
                                     ++next;
                                   }
                                 });
    while (next < nodes.size()) out[next++] = yend;
    return out;
  }

 private:
  template <typename Rhs>
  State eval(Rhs& f, double t, const State& y) {
    ++stats_.rhs_evals;
    State d = f(t, y);
    for (double v : d) {
      if (!std::isfinite(v)) throw SingularRhs("non-finite derivative at r=" + std::to_string(t));
    }
    return d;
  }

  template <typename Rhs>
  double initial_step(Rhs& f, double t0, const State& y0, const State& f0, double span) {
    // Hairer & Wanner's starting-step heuristic, order 5.
    double d0 = 0.0, d1n = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double sc = opts_.abs_tol + opts_.rel_tol * std::abs(y0[i]);
      d0 += (y0[i] / sc) * (y0[i] / sc);
      d1n += (f0[i] / sc) * (f0[i] / sc);
    }
    d0 = std::sqrt(d0 / N);
    d1n = std::sqrt(d1n / N);
    double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
    h0 = std::min(h0, span);
    double h1 = h0;
    try {
      State y1;
      for (std::size_t i = 0; i < N; ++i) y1[i] = y0[i] + h0 * f0[i];
      const State f1 = eval(f, t0 + h0, y1);
      double d2 = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double sc = opts_.abs_tol + opts_.rel_tol * std::abs(y0[i]);
        d2 += ((f1[i] - f0[i]) / sc) * ((f1[i] - f0[i]) / sc);
      }
      d2 = std::sqrt(d2 / N) / h0;
      const double dm = std::max(d1n, d2);
      h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    } catch (const Error&) {
      h1 = h0 * 1e-2;
    }
    return std::clamp(std::min(100.0 * h0, h1), span * 1e-9, span);
  }

  Options opts_;
  Stats stats_;

  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                          a75 = -2187.0 / 6784, a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double d1 = -12715105075.0 / 11282082432.0,
                          d3 = 87487479700.0 / 32700410799.0,
                          d4 = -10690763975.0 / 1880347072.0,
                          d5 = 701980252875.0 / 199316789632.0,
                          d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;
};

}  // namespace mforge::ode
