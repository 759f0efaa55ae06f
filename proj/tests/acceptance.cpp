// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Usage: acceptance [substring]   runs only criteria whose name contains it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "design_fixture.hpp"
#include "energy_oracle.hpp"
#include "membrane_forge/config.hpp"
#include "membrane_forge/curvefit.hpp"
#include "support.hpp"

using namespace mforge;

namespace {

// Tolerances.
constexpr double kMaterialRelTol = 1e-6;
constexpr double kMaterialSeconds = 1.0;
constexpr double kFirstIntegralRelTol = 1e-6;
constexpr double kEdgeBalanceRelTol = 1e-12;
constexpr double kBoundaryTol = 1e-6;
constexpr double kRinglessSuccess = 0.95;
constexpr double kRingedSuccess = 0.70;
constexpr double kShootingSeconds = 300.0;
constexpr double kOracleRelTol = 0.01;
constexpr double kOracleSeconds = 600.0;
constexpr double kParamGradTol = 1e-4;
constexpr double kInputGradTol = 1e-3;
constexpr std::size_t kGradCoords = 100;
constexpr std::size_t kPermutationDesigns = 1000;
constexpr double kClosedLoopFraction = 0.05;
constexpr double kClosedLoopSeconds = 900.0;
constexpr double kRinglessBaselineRatio = 2.0;
constexpr double kAlphaTol = 1e-12;
constexpr std::size_t kAcquisitionScan = 1000;
constexpr double kAlMembraneRatio = 0.70;
constexpr double kAlTargetFraction = 0.05;
constexpr double kAlSeconds = 1800.0;
constexpr double kWaypointTol = 1e-5;
constexpr std::size_t kDesignStarts = 2500;
constexpr std::size_t kDesignScan = 10000;
constexpr double kDesignCoordTol = 1e-3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<MembraneDesign> box_designs(const DesignBox& box, std::size_t n, std::uint64_t seed) {
  std::vector<MembraneDesign> out;
  for (const auto& [k, u] : multistart_points<std::size_t>(
           box.ring_counts, n, seed, [](const std::size_t& c) { return DesignBox::dim(c); })) {
    out.push_back(map_unit(box, k, u.data()).design);
  }
  return out;
}

double max_force(const Dataset& ds) {
  double m = 0.0;
  for (const auto& r : ds.records()) {
    for (const auto& s : r.samples) m = std::max(m, s.f_n);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Shooting grid, shared by the robustness and first-integral criteria.

struct GridSolve {
  MembraneDesign design;
  double p_kpa = 0.0;
  double force = 0.0;
  bool ok = false;
  MembraneShape shape;
};

struct ShootingGrid {
  std::vector<GridSolve> ringless;
  std::vector<GridSolve> ringed;
  double seconds = 0.0;
};

const ShootingGrid& shooting_grid() {
  static const ShootingGrid grid = [] {
    ShootingGrid g;
    const auto t0 = std::chrono::steady_clock::now();
    const MaterialSet mats;
    auto run = [&](const MembraneDesign& d, std::vector<GridSolve>& out) {
      for (int ip = 1; ip <= 12; ++ip) {
        for (double F : {0.0, 10.0, 20.0, 40.0}) {
          GridSolve s{d, 0.5 * ip, F, false, {}};
          try {
            s.shape = solve_shape(d, mats, s.p_kpa * 1e-3, F);
            s.ok = std::abs(s.shape.l2.back() - 1.0) <= kBoundaryTol;
          } catch (const Error&) {
          }
          out.push_back(std::move(s));
        }
      }
    };
    for (double t : {1.0, 2.0, 3.0}) {
      for (double r0 : {25.4, 38.1}) run(MembraneDesign{r0, t, {}}, g.ringless);
    }
    const auto rows = reference_designs();
    for (std::size_t i = 1; i <= 4; ++i) run(rows[i], g.ringed);
    g.seconds = seconds_since(t0);
    return g;
  }();
  return grid;
}

double success_rate(const std::vector<GridSolve>& v) {
  const auto ok = std::count_if(v.begin(), v.end(), [](const GridSolve& s) { return s.ok; });
  return static_cast<double>(ok) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Criteria

Outcome material() {
  const auto t0 = std::chrono::steady_clock::now();
  const MaterialParams mat = MaterialSet{}.silicone(2.0);
  const double floor = 1e-3 * mat.mu;  // stresses near the identity vanish
  double worst = 0.0;
  std::size_t points = 0;
  auto W = [&](double a, double b) { return gent_energy(a, b, mat); };
  auto W1 = [&](double a, double b) { return gent_derivatives(a, b, mat).w1; };
  auto W2 = [&](double a, double b) { return gent_derivatives(a, b, mat).w2; };
  auto cd = [](auto f, double a, double b, bool along_first) {
    const double h = 1e-5 * (along_first ? a : b);
    return along_first ? (f(a + h, b) - f(a - h, b)) / (2 * h) : (f(a, b + h) - f(a, b - h)) / (2 * h);
  };
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 20; ++j) {
      const double a = 0.6 + 2.4 * i / 19.0, b = 0.6 + 2.4 * j / 19.0;
      const auto d = gent_derivatives(a, b, mat);
      for (const auto& [an, fd] : {std::pair{d.w1, cd(W, a, b, true)}, std::pair{d.w2, cd(W, a, b, false)},
                                   std::pair{d.w11, cd(W1, a, b, true)}, std::pair{d.w12, cd(W1, a, b, false)},
                                   std::pair{d.w22, cd(W2, a, b, false)}}) {
        worst = std::max(worst, support::rel_err(an, fd, floor));
      }
      ++points;
    }
  }
  const bool zero = gent_energy(1.0, 1.0, mat) == 0.0;
  const double secs = seconds_since(t0);
  return {worst <= kMaterialRelTol && zero && points == 400 && secs < kMaterialSeconds,
          fmt("max rel err %.2e over %zu points, W(1,1)=0 %s, %.3f s", worst, points, zero ? "yes" : "no", secs)};
}

Outcome first_integral() {
  const ShootingGrid& g = shooting_grid();
  const MaterialSet mats;
  double worst = 0.0, worst_edge = 0.0;
  std::size_t shapes = 0;
  for (const auto* set : {&g.ringless, &g.ringed}) {
    for (const auto& s : *set) {
      if (!s.ok) continue;
      const auto V = vertical_balance(s.shape, s.design, mats);
      const double scale =
          std::numbers::pi * s.shape.pressure * s.design.outer_radius * s.design.outer_radius + s.force;
      for (double v : V) worst = std::max(worst, std::abs(v - V.front()) / scale);
      worst_edge = std::max(worst_edge, std::abs(V.front()) / scale);
      ++shapes;
    }
  }
  return {worst <= kFirstIntegralRelTol && worst_edge <= kEdgeBalanceRelTol && shapes > 0,
          fmt("%zu solutions, max |V(r)-V(r0)| %.2e, max |V(r0)| %.2e (relative)", shapes, worst, worst_edge)};
}

Outcome shooting() {
  const ShootingGrid& g = shooting_grid();
  const double a = success_rate(g.ringless), b = success_rate(g.ringed);
  return {a >= kRinglessSuccess && b >= kRingedSuccess && g.seconds < kShootingSeconds,
          fmt("ringless %.1f%% of %zu, ringed rows 2-5 %.1f%% of %zu, %.1f s", 100 * a, g.ringless.size(),
              100 * b, g.ringed.size(), g.seconds)};
}

Outcome energy_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const MaterialSet mats;
  struct Case {
    double r0, t, p_kpa, F;
  };
  double worst = 0.0;
  bool converged = true;
  for (const Case c : {Case{25.4, 2.0, 3.0, 5.0}, Case{25.4, 2.0, 1.0, 0.0}, Case{25.4, 2.0, 2.0, 10.0},
                       Case{30.0, 1.5, 2.0, 5.0}, Case{38.1, 3.0, 3.0, 20.0}}) {
    const auto shape = solve_shape(MembraneDesign{c.r0, c.t, {}}, mats, c.p_kpa * 1e-3, c.F);
    const auto direct = oracle::minimize(c.r0, c.t, c.p_kpa * 1e-3, c.F, mats);
    converged = converged && direct.converged;
    worst = std::max(worst, std::abs(direct.contact_height - shape.contact_height) / shape.contact_height);
  }
  const double secs = seconds_since(t0);
  return {converged && worst <= kOracleRelTol && secs < kOracleSeconds,
          fmt("5 configurations, max rel diff %.2e, %.1f s", worst, secs)};
}

Outcome surrogate_gradients() {
  double param = 0.0, input = 0.0;
  std::size_t np = 0, ni = 0;
  for (const char* act : {"softplus", "tanh"}) {
    nn::ModelConfig cfg;
    cfg.activation = act;
    cfg.seed = 11;
    const auto p = support::param_gradient_check(cfg, kGradCoords, 12);
    const auto i = support::input_gradient_check(cfg, 30, 13);
    param = std::max(param, p.max_rel);
    input = std::max(input, i.max_rel);
    np += p.checked;
    ni += i.checked;
  }
  return {param <= kParamGradTol && input <= kInputGradTol && np >= kGradCoords && ni >= kGradCoords,
          fmt("param max rel %.2e over %zu coords, input max rel %.2e over %zu coords", param, np, input, ni)};
}

Outcome permutation() {
  const std::size_t bad = support::permutation_mismatches(kPermutationDesigns, 17);
  return {bad == 0, fmt("%zu of %zu ringed designs changed under ring swap", bad, kPermutationDesigns)};
}

/// Membrane-wise k-fold: pooled held-out RMSE of the surrogate and of the curve fit.
struct FoldReport {
  double surrogate = 0.0;
  double curvefit = 0.0;
  bool curvefit_ok = true;
  std::string per_fold;
};

FoldReport kfold(const Dataset& ds, std::uint64_t seed) {
  FoldReport rep;
  double ss = 0.0, sc = 0.0;
  std::size_t rows = 0;
  for (const auto& sp : kfold_by_membrane(ds, 4, seed)) {
    nn::ModelConfig mc;
    mc.seed = seed;
    nn::TrainOptions to;
    to.seed = seed;
    const auto res = nn::train(nn::SurrogateModel::create(mc, compute_norm_stats(sp.train)), sp.train, {}, to);
    const double s = nn::evaluate_rmse(res.model, sp.test);
    double c = std::numeric_limits<double>::quiet_NaN();
    try {
      c = curvefit_baseline(sp.train, sp.test);
    } catch (const Error&) {
      rep.curvefit_ok = false;
    }
    const auto n = static_cast<double>(sp.test.row_count());
    ss += s * s * n;
    sc += c * c * n;
    rows += sp.test.row_count();
    rep.per_fold += fmt(" %.2f/%.2f", s, c);
  }
  rep.surrogate = std::sqrt(ss / static_cast<double>(rows));
  rep.curvefit = std::sqrt(sc / static_cast<double>(rows));
  return rep;
}

Dataset benchmark(std::vector<std::size_t> ring_counts, std::uint64_t seed) {
  DesignBox box;
  box.ring_counts = std::move(ring_counts);
  const DataConfig dc;
  return generate_synthetic(box_designs(box, 16, seed), dc.heights_mm, dc.pressures_kpa);
}

Outcome closed_loop() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = benchmark({0, 1, 2}, 1);
  const double fmax = max_force(ds);
  const FoldReport r = kfold(ds, 1);
  const double secs = seconds_since(t0);
  return {r.surrogate <= kClosedLoopFraction * fmax && secs < kClosedLoopSeconds,
          fmt("16 designs, 4 held out per fold, pooled RMSE %.2f N = %.2f%% of %.1f N (folds N:%s), %.0f s",
              r.surrogate, 100 * r.surrogate / fmax, fmax, r.per_fold.c_str(), secs)};
}

Outcome baseline_ordering() {
  const FoldReport ringed = kfold(benchmark({1, 2}, 3), 3);
  const FoldReport ringless = kfold(benchmark({0}, 2), 2);
  const double ratio = std::max(ringless.surrogate, ringless.curvefit) / std::min(ringless.surrogate, ringless.curvefit);
  const bool ok = ringed.curvefit_ok && ringless.curvefit_ok && ringed.surrogate <= ringed.curvefit &&
                  ratio <= kRinglessBaselineRatio;
  return {ok, fmt("ringed surrogate %.2f N vs curve fit %.2f N; ringless %.2f N vs %.2f N (ratio %.2f)",
                  ringed.surrogate, ringed.curvefit, ringless.surrogate, ringless.curvefit, ratio)};
}

Outcome acquisition_properties() {
  nn::ModelConfig cfg;
  cfg.mlp_depth = 2;
  cfg.mlp_width = 12;
  cfg.ring_latent_dim = 4;
  cfg.seed = 2;
  const RpnEnsemble e = RpnEnsemble::create(cfg, support::sample_norm(), 4, 1.0);
  AcquisitionGrid g;
  g.heights_mm = {5.0, 30.0};
  g.pressures_kpa = {2.0, 6.0};

  Eigen::MatrixXd m1(2, 1), m2(2, 1);
  m1 << 0.0, 2.0;
  m2 << 0.0, 4.0;
  const double worked = acquisition_from_outputs({m1, m2});
  bool ok = std::abs(worked - 4.0) <= kAlphaTol;

  Rng rng(5);
  std::size_t asym = 0, negative = 0;
  for (int i = 0; i < 200; ++i) {
    const auto a = support::random_design(rng, rng.index(3)), b = support::random_design(rng, rng.index(3));
    const double ab = acquisition(e, a, b, g), ba = acquisition(e, b, a, g);
    asym += std::abs(ab - ba) > kAlphaTol * std::max(1.0, ab) ? 1 : 0;
    negative += ab < 0.0 ? 1 : 0;
  }
  RpnEnsemble same = e;
  for (auto& m : same.members) m = same.members.front();
  const MembraneDesign da{28.0, 2.0, {{50.0, 6.0}}}, db{35.0, 1.5, {{48.0, 5.0}, {62.0, 5.5}}};
  const bool zero_iff = acquisition(same, da, db, g) == 0.0 && acquisition(e, da, db, g) > 0.0;

  AcquisitionOptions opt;
  opt.n_starts = 24;
  opt.seed = 9;
  const DesignBox box;
  const auto best = maximize_acquisition(e, box, g, 2, opt);
  const auto classes = ring_count_classes(box, 2);
  double scan = 0.0;
  Rng srng(9);
  for (std::size_t i = 0; i < kAcquisitionScan; ++i) {
    std::vector<MembraneDesign> ds;
    for (std::size_t k : classes[i % classes.size()]) {
      std::vector<double> u(DesignBox::dim(k));
      for (double& x : u) x = srng.uniform();
      ds.push_back(map_unit(box, k, u.data()).design);
    }
    scan = std::max(scan, acquisition(e, ds, g));
  }
  ok = ok && asym == 0 && negative == 0 && zero_iff && best.alpha >= scan;
  return {ok, fmt("worked example %.15g, %zu asymmetric / %zu negative of 200 pairs, zero iff agreement %s, "
                  "maximized %.4f vs scan %.4f",
                  worked, asym, negative, zero_iff ? "yes" : "no", best.alpha, scan)};
}

/// Membranes needed to bring the ensemble-mean test RMSE under `target`;
/// `budget + q` when the budget runs out first.
std::size_t membranes_needed(bool active, std::uint64_t seed, const Dataset& test, double target,
                             std::size_t budget) {
  const std::vector<double> H{0, 15, 30, 45}, P{1, 2, 3, 4, 5, 6, 7};
  const DesignOracle oracle = [&](const MembraneDesign& d) {
    return generate_synthetic({d}, H, P).records();
  };
  const DesignBox box;
  const std::size_t q = 2;
  const auto pool = box_designs(box, budget, seed);
  Dataset ds = generate_synthetic({pool[0], pool[1]}, H, P);
  std::size_t used = 2;
  nn::ModelConfig mc;
  mc.seed = seed;
  AlStepOptions step;
  step.q = q;
  step.training.train.max_epochs = 300;
  step.training.train.patience = 50;
  step.training.train.seed = seed;
  step.acquisition.n_starts = 32;
  RpnEnsemble e = train_ensemble(RpnEnsemble::create(mc, compute_norm_stats(ds), 4), ds, {}, step.training);
  while (ensemble_rmse(e, test) > target) {
    if (used + q > budget) return budget + q;
    if (active) {
      step.acquisition.seed = mix_seed(seed, used);
      auto r = al_iteration(e, box, AcquisitionGrid{}, oracle, ds, step);
      ds = std::move(r.dataset);
      e = std::move(r.ensemble);
    } else {
      for (std::size_t k = 0; k < q; ++k) ds.append(generate_synthetic({pool[used + k]}, H, P));
      e = train_ensemble(e, ds, {}, step.training);
    }
    used += q;
  }
  return used;
}

Outcome al_efficiency() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset test = generate_synthetic(box_designs(DesignBox{}, 12, 999), {0, 15, 30, 45}, {1, 2, 3, 4, 5, 6, 7});
  const double target = kAlTargetFraction * max_force(test);
  const std::size_t budget = 24;
  std::vector<double> ratios;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto a = membranes_needed(true, seed, test, target, budget);
    const auto r = membranes_needed(false, seed, test, target, budget);
    ratios.push_back(static_cast<double>(a) / static_cast<double>(r));
    detail += fmt(" %zu/%zu", a, r);
  }
  const double med = median(ratios);
  const double secs = seconds_since(t0);
  return {med <= kAlMembraneRatio && secs < kAlSeconds,
          fmt("target %.2f N, membranes active/random:%s, median ratio %.2f, %.0f s", target, detail.c_str(), med,
              secs)};
}

Outcome waypoint_cases() {
  Trajectory t;
  for (const auto& [p, h] : std::vector<std::pair<double, double>>{{1, 0}, {2, 5}, {3, 12}, {4, 20}}) {
    t.samples.push_back({p, h, 0.0, true});
  }
  const double exact = trajectory_rmse(t, {{2, 5}, {3, 12}, {4, 20}});
  Trajectory one;
  one.samples.push_back({4, 25, 0.0, true});
  const double off = trajectory_rmse(one, {{5, 30}});
  return {exact == 0.0 && std::abs(off - 0.14142) <= kWaypointTol,
          fmt("exact pass %.3g, 1 kPa / 5 mm case %.6f", exact, off)};
}

Outcome design_optimization() {
  const fixture::Bowl bowl;
  const LiftTargets tg = fixture::Bowl::targets();
  const DesignBox box = DesignBox::lift();
  DesignOptOptions opt;
  opt.n_starts = kDesignStarts;
  opt.seed = 4;
  const auto r = optimize_design(bowl, tg, box, opt);
  double err = std::numeric_limits<double>::infinity();
  if (r.design.rings.size() == 1) {
    err = std::max({std::abs(r.design.thickness - bowl.centre.thickness),
                    std::abs(r.design.contact_radius - bowl.centre.contact_radius),
                    std::abs(r.design.rings[0].center_radius - bowl.centre.rings[0].center_radius),
                    std::abs(r.design.rings[0].half_width - bowl.centre.rings[0].half_width)});
  }
  Rng rng(99);
  double scan = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < kDesignScan; ++i) {
    const std::size_t k = box.ring_counts[i % box.ring_counts.size()];
    std::vector<double> u(DesignBox::dim(k));
    for (double& x : u) x = rng.uniform();
    scan = std::max(scan, posterior(bowl, map_unit(box, k, u.data()).design, tg, false).pi);
  }
  return {err <= kDesignCoordTol && r.pi >= scan,
          fmt("max coordinate error %.2e, Pi* %.6f vs scan max %.6f (%zu starts)", err, r.pi, scan,
              r.starts_evaluated)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string filter = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"material", material},
      {"first-integral", first_integral},
      {"shooting-robustness", shooting},
      {"energy-oracle", energy_oracle},
      {"surrogate-gradients", surrogate_gradients},
      {"ring-permutation", permutation},
      {"closed-loop", closed_loop},
      {"baseline-ordering", baseline_ordering},
      {"acquisition", acquisition_properties},
      {"al-efficiency", al_efficiency},
      {"waypoint-error", waypoint_cases},
      {"design-optimization", design_optimization},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!filter.empty() && name.find(filter) == std::string::npos) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
