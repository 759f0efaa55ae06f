#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "membrane_forge/dataset.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/optim.hpp"
#include "membrane_forge/rng.hpp"
#include "membrane_forge/surrogate.hpp"

namespace mforge {

struct RpnMember {
  Eigen::VectorXd prior;  ///< frozen after construction
  Eigen::VectorXd trainable;
};

/// Randomized-prior ensemble: member l predicts trainable_l(x) + prior_scale * prior_l(x).
struct RpnEnsemble {
  nn::ModelConfig config;
  NormStats norm;
  double prior_scale = 1.0;
  std::vector<RpnMember> members;

  static RpnEnsemble create(const nn::ModelConfig& cfg, const NormStats& norm, std::size_t n,
                            double prior_scale = 1.0) {
    if (n < 1) throw ConfigError("ensemble needs at least one member");
    const nn::Architecture arch(cfg);
    RpnEnsemble e{cfg, norm, prior_scale, {}};
    for (std::size_t l = 0; l < n; ++l) {
      e.members.push_back({nn::init_params(arch, mix_seed(cfg.seed, 2 * l)),
                           nn::init_params(arch, mix_seed(cfg.seed, 2 * l + 1))});
    }
    return e;
  }

  std::size_t size() const { return members.size(); }

  /// Member l as a standalone model (prior folded in only through predictions).
  nn::SurrogateModel trainable_model(std::size_t l) const {
    return {config, norm, members[l].trainable};
  }
};

struct EnsemblePrediction {
  double mean = 0.0;
  double sd = 0.0;  ///< population standard deviation over members
};

/// Member coefficients at one (design, height).
inline std::vector<nn::PolyCoeffs> member_coeffs(const RpnEnsemble& e, const MembraneDesign& d,
                                                 double h_mm) {
  const nn::Architecture arch(e.config);
  const std::vector<nn::ModelInputs> xs{nn::make_inputs(e.norm, d, h_mm)};
  std::vector<nn::PolyCoeffs> out;
  for (const auto& m : e.members) {
    const auto ct = nn::forward_batch(arch, m.trainable, xs).coeffs;
    const auto cp = nn::forward_batch(arch, m.prior, xs).coeffs;
    const Eigen::VectorXd c = ct.col(0) + e.prior_scale * cp.col(0);
    out.emplace_back(c.data(), c.data() + c.size());
  }
  return out;
}

inline std::vector<double> member_predictions(const RpnEnsemble& e, const MembraneDesign& d,
                                              double h_mm, double p_kpa) {
  std::vector<double> f;
  for (const auto& c : member_coeffs(e, d, h_mm)) {
    f.push_back(nn::eval_poly(e.norm, c.data(), c.size(), p_kpa));
  }
  return f;
}

inline EnsemblePrediction mean_sd(const std::vector<double>& f) {
  EnsemblePrediction out;
  if (f.empty()) return out;
  // Offset by the first member so that agreeing members give exactly zero spread.
  double acc = 0.0;
  for (double v : f) acc += v - f.front();
  out.mean = f.front() + acc / static_cast<double>(f.size());
  double ss = 0.0;
  for (double v : f) ss += (v - out.mean) * (v - out.mean);
  out.sd = std::sqrt(ss / static_cast<double>(f.size()));
  return out;
}

inline EnsemblePrediction ensemble_predict(const RpnEnsemble& e, const MembraneDesign& d,
                                           double h_mm, double p_kpa) {
  return mean_sd(member_predictions(e, d, h_mm, p_kpa));
}

// ---------------------------------------------------------------------------
// Acquisition

struct AcquisitionGrid {
  std::vector<double> heights_mm{5.0, 20.0, 35.0, 50.0};
  std::vector<double> pressures_kpa{1, 2, 3, 4, 5, 6, 7, 8};

  void validate() const {
    if (heights_mm.empty() || pressures_kpa.empty()) throw ConfigError("acquisition grid is empty");
    for (double h : heights_mm) {
      if (!(h >= 0.0 && h <= 50.0)) throw ConfigError("acquisition heights must lie in [0, 50] mm");
    }
    for (double p : pressures_kpa) {
      if (!(p >= 0.0 && p <= 10.0)) throw ConfigError("acquisition pressures must lie in [0, 10] kPa");
    }
  }
};

/// Member predictions over the grid for one design, with optional gradients
/// w.r.t. (t, r0, c1, w1, c2, w2) in the design's ring order.
struct GridResponse {
  Eigen::MatrixXd f;                   ///< members x grid points
  std::vector<Eigen::MatrixXd> grad;   ///< per member: grid points x 6
};

inline GridResponse grid_response(const RpnEnsemble& e, const MembraneDesign& d,
                                  const AcquisitionGrid& grid, bool want_grad) {
  const nn::Architecture arch(e.config);
  const auto H = grid.heights_mm.size();
  const auto P = grid.pressures_kpa.size();
  const auto L = e.members.size();
  const std::size_t K = arch.n_coeffs();
  GridResponse r;
  r.f.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(H * P));
  std::vector<std::array<double, 4>> phi;
  for (double p : grid.pressures_kpa) phi.push_back(nn::pressure_basis(e.norm, p, K - 1));
  const double fs = e.norm.force.sd;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& m = e.members[l];
    Eigen::MatrixXd coeffs(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(H));
    std::vector<Eigen::Matrix<double, Eigen::Dynamic, 7>> jac;
    if (want_grad) {
      const auto jt = nn::coeff_jacobians(arch, m.trainable, e.norm, d, grid.heights_mm);
      const auto jp = nn::coeff_jacobians(arch, m.prior, e.norm, d, grid.heights_mm);
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          coeffs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) =
              jt[i].coeffs[k] + e.prior_scale * jp[i].coeffs[k];
        }
        jac.push_back(jt[i].jac + e.prior_scale * jp[i].jac);
      }
    } else {
      std::vector<nn::ModelInputs> xs;
      for (double h : grid.heights_mm) xs.push_back(nn::make_inputs(e.norm, d, h));
      coeffs = nn::forward_batch(arch, m.trainable, xs).coeffs +
               e.prior_scale * nn::forward_batch(arch, m.prior, xs).coeffs;
    }
    Eigen::MatrixXd g;
    if (want_grad) g.setZero(static_cast<Eigen::Index>(H * P), 6);
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < P; ++j) {
        const auto col = static_cast<Eigen::Index>(i * P + j);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += coeffs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) * phi[j][k];
        r.f(static_cast<Eigen::Index>(l), col) = e.norm.force.mean + fs * s;
        if (want_grad) {
          for (std::size_t k = 0; k < K; ++k) {
            const double w = fs * phi[j][k];
            const auto jr = jac[i].row(static_cast<Eigen::Index>(k));
            g(col, 0) += w * jr(0);
            g(col, 1) += w * jr(1);
            for (Eigen::Index q = 2; q < 6; ++q) g(col, q) += w * jr(q + 1);  // skip height
          }
        }
      }
    }
    if (want_grad) r.grad.push_back(std::move(g));
  }
  return r;
}

/// Per-member deviation from the ensemble mean over the grid,
/// D_l(M) = sqrt(sum_ij (mean_ij - F^l_ij)^2), and optionally dD_l/dparams.
struct Deviations {
  Eigen::VectorXd d;
  std::vector<Eigen::Matrix<double, 6, 1>> grad;
};

inline Deviations member_deviations(const GridResponse& r, bool want_grad) {
  const Eigen::Index L = r.f.rows();
  Deviations out;
  const Eigen::RowVectorXd mean =
      r.f.row(0) + (r.f.rowwise() - r.f.row(0)).colwise().sum() / static_cast<double>(L);
  out.d.resize(L);
  Eigen::MatrixXd mean_grad;
  if (want_grad) {
    mean_grad = Eigen::MatrixXd::Zero(r.f.cols(), 6);
    for (const auto& g : r.grad) mean_grad += g;
    mean_grad /= static_cast<double>(L);
  }
  for (Eigen::Index l = 0; l < L; ++l) {
    const Eigen::RowVectorXd diff = mean - r.f.row(l);
    out.d[l] = diff.norm();
    if (want_grad) {
      Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
      if (out.d[l] > 0.0) {
        g = ((mean_grad - r.grad[static_cast<std::size_t>(l)]).transpose() * diff.transpose()) /
            out.d[l];
      }
      out.grad.push_back(g);
    }
  }
  return out;
}

/// Batch acquisition: sum over members of the largest deviation among the
/// candidate designs.
inline double acquisition(const RpnEnsemble& e, const std::vector<MembraneDesign>& designs,
                          const AcquisitionGrid& grid) {
  if (designs.empty()) throw EmptyInput("acquisition needs at least one design");
  Eigen::VectorXd best = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(e.size()), 0.0);
  for (const auto& d : designs) {
    best = best.cwiseMax(member_deviations(grid_response(e, d, grid, false), false).d);
  }
  return best.sum();
}

inline double acquisition(const RpnEnsemble& e, const MembraneDesign& m1, const MembraneDesign& m2,
                          const AcquisitionGrid& grid) {
  return acquisition(e, std::vector<MembraneDesign>{m1, m2}, grid);
}

/// Same as acquisition() but from precomputed member outputs, one matrix per
/// candidate (members x grid points). Exposed for testing the formula alone.
inline double acquisition_from_outputs(const std::vector<Eigen::MatrixXd>& outputs) {
  if (outputs.empty()) throw EmptyInput("acquisition needs at least one design");
  Eigen::VectorXd best = Eigen::VectorXd::Zero(outputs.front().rows());
  for (const auto& f : outputs) {
    GridResponse r{f, {}};
    best = best.cwiseMax(member_deviations(r, false).d);
  }
  return best.sum();
}

/// Mean ensemble sd over the grid, averaged over `designs`.
inline double mean_grid_sd(const RpnEnsemble& e, const std::vector<MembraneDesign>& designs,
                           const AcquisitionGrid& grid) {
  if (designs.empty()) return 0.0;
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& d : designs) {
    const auto r = grid_response(e, d, grid, false);
    for (Eigen::Index c = 0; c < r.f.cols(); ++c) {
      s += mean_sd({r.f.col(c).data(), r.f.col(c).data() + r.f.rows()}).sd;
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Acquisition maximization

struct AcquisitionOptions {
  std::size_t n_starts = 64;
  std::uint64_t seed = 0;
  LbfgsOptions lbfgs{.memory = 8, .max_iter = 60, .pg_tol = 1e-7, .f_tol = 1e-10};
};

struct AcquisitionResult {
  std::vector<MembraneDesign> designs;
  double alpha = 0.0;
  bool degenerate = false;  ///< all members agree everywhere evaluated
  std::size_t starts_evaluated = 0;
  std::size_t starts_failed = 0;
};

/// Ring-count assignments for q designs: non-decreasing tuples over the box's counts.
inline std::vector<std::vector<std::size_t>> ring_count_classes(const DesignBox& box, std::size_t q) {
  std::vector<std::size_t> counts = box.ring_counts;
  std::sort(counts.begin(), counts.end());
  counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t from) {
    if (cur.size() == q) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = from; i < counts.size(); ++i) {
      cur.push_back(counts[i]);
      rec(i);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

namespace detail {

inline std::size_t class_dim(const std::vector<std::size_t>& cls) {
  std::size_t n = 0;
  for (std::size_t k : cls) n += DesignBox::dim(k);
  return n;
}

/// Negative acquisition over the concatenated unit coordinates of q designs.
struct NegAcquisition {
  const RpnEnsemble* ens;
  const DesignBox* box;
  const AcquisitionGrid* grid;
  std::vector<std::size_t> cls;

  std::vector<MappedDesign> map(const Eigen::VectorXd& u) const {
    std::vector<MappedDesign> out;
    std::size_t off = 0;
    for (std::size_t k : cls) {
      out.push_back(map_unit(*box, k, u.data() + off));
      off += DesignBox::dim(k);
    }
    return out;
  }

  double operator()(const Eigen::VectorXd& u, Eigen::VectorXd& g) const {
    const auto mapped = map(u);
    std::vector<Deviations> dev;
    for (const auto& m : mapped) dev.push_back(member_deviations(grid_response(*ens, m.design, *grid, true), true));
    g.setZero(u.size());
    double alpha = 0.0;
    for (std::size_t l = 0; l < ens->size(); ++l) {
      std::size_t kbest = 0;
      for (std::size_t k = 1; k < dev.size(); ++k) {
        if (dev[k].d[static_cast<Eigen::Index>(l)] > dev[kbest].d[static_cast<Eigen::Index>(l)]) kbest = k;
      }
      alpha += dev[kbest].d[static_cast<Eigen::Index>(l)];
      const auto& dg = dev[kbest].grad[l];
      std::vector<std::array<double, 2>> dr;
      for (std::size_t s = 0; s < mapped[kbest].rings.size(); ++s) dr.push_back({dg[2 + 2 * s], dg[3 + 2 * s]});
      const Eigen::VectorXd gu = pullback(mapped[kbest], dg[0], dg[1], dr);
      std::size_t off = 0;
      for (std::size_t k = 0; k < kbest; ++k) off += DesignBox::dim(cls[k]);
      g.segment(static_cast<Eigen::Index>(off), gu.size()) += gu;
    }
    g = -g;
    return -alpha;
  }
};

}  // namespace detail

/// Multistart projected L-BFGS ascent of the acquisition over q designs.
/// Starts are spread round-robin over the ring-count classes.
inline AcquisitionResult maximize_acquisition(const RpnEnsemble& e, const DesignBox& box,
                                              const AcquisitionGrid& grid, std::size_t q,
                                              const AcquisitionOptions& opt = {}) {
  box.validate();
  grid.validate();
  if (q < 1) throw ConfigError("q must be >= 1");
  if (opt.n_starts < 1) throw ConfigError("n_starts must be >= 1");
  const auto classes = ring_count_classes(box, q);
  const auto starts = multistart_points<std::vector<std::size_t>>(
      classes, opt.n_starts, opt.seed, [](const std::vector<std::size_t>& c) { return detail::class_dim(c); });
  AcquisitionResult best;
  best.alpha = -std::numeric_limits<double>::infinity();
  for (const auto& [cls, u0] : starts) {
    const detail::NegAcquisition f{&e, &box, &grid, cls};
    ++best.starts_evaluated;
    try {
      const LbfgsResult r = minimize_box(f, u0, opt.lbfgs);
      const double a = -r.f;
      if (a > best.alpha) {
        best.alpha = a;
        best.designs.clear();
        for (const auto& m : f.map(r.x)) best.designs.push_back(m.design);
      }
    } catch (const Error&) {
      ++best.starts_failed;
    }
  }
  if (best.designs.empty()) throw AllStartsFailed("every acquisition start failed");
  best.degenerate = !(best.alpha > 0.0);
  return best;
}

// ---------------------------------------------------------------------------
// Training and the active-learning step

struct EnsembleTrainOptions {
  nn::TrainOptions train;  ///< seed is replaced per member
  bool recompute_norm = true;
};

/// Train every member on a bootstrap resample of `train_ds` (warm-started
/// from the current trainable parameters). Priors are left untouched.
inline RpnEnsemble train_ensemble(RpnEnsemble e, const Dataset& train_ds, const Dataset& val_ds,
                                  const EnsembleTrainOptions& opt = {}) {
  if (opt.recompute_norm) e.norm = compute_norm_stats(train_ds);
  for (std::size_t l = 0; l < e.size(); ++l) {
    nn::TrainOptions to = opt.train;
    to.seed = mix_seed(opt.train.seed, 1000 + l);
    to.bootstrap = e.size() > 1;
    const nn::CoeffOffset off{&e.members[l].prior, e.prior_scale};
    const auto res = nn::train(e.trainable_model(l), train_ds, val_ds, to, off);
    e.members[l].trainable = res.model.params;
  }
  return e;
}

/// Mean-member RMSE over a dataset (predictions from the ensemble mean).
inline double ensemble_rmse(const RpnEnsemble& e, const Dataset& ds) {
  if (ds.row_count() == 0) throw EmptyDataset("RMSE of an empty dataset");
  double se = 0.0;
  std::size_t n = 0;
  for (const auto& r : ds.records()) {
    const auto coeffs = member_coeffs(e, r.design, r.height_mm);
    for (const auto& s : r.samples) {
      double m = 0.0;
      for (const auto& c : coeffs) m += nn::eval_poly(e.norm, c.data(), c.size(), s.p_kpa);
      m /= static_cast<double>(coeffs.size());
      se += (m - s.f_n) * (m - s.f_n);
      ++n;
    }
  }
  return std::sqrt(se / static_cast<double>(n));
}

/// Oracle: returns measured records for a design (may throw on failure).
using DesignOracle = std::function<std::vector<TrialRecord>(const MembraneDesign&)>;

struct AlStepOptions {
  std::size_t q = 2;
  AcquisitionOptions acquisition;
  EnsembleTrainOptions training;
};

struct AlStepResult {
  Dataset dataset;
  RpnEnsemble ensemble;
  std::vector<MembraneDesign> proposals;
  double alpha = 0.0;
  std::size_t records_added = 0;
  std::vector<std::string> failures;  ///< one message per failed oracle call
};

inline AlStepResult al_iteration(const RpnEnsemble& e, const DesignBox& box,
                                 const AcquisitionGrid& grid, const DesignOracle& oracle,
                                 const Dataset& ds, const AlStepOptions& opt = {}) {
  const auto acq = maximize_acquisition(e, box, grid, opt.q, opt.acquisition);
  AlStepResult out{ds, e, acq.designs, acq.alpha, 0, {}};
  for (const auto& d : acq.designs) {
    try {
      for (auto& rec : oracle(d)) {
        out.dataset.add(std::move(rec));
        ++out.records_added;
      }
    } catch (const Error& err) {
      out.failures.push_back(design_key(d) + ": " + err.what());
    }
  }
  out.ensemble = train_ensemble(e, out.dataset, Dataset{}, opt.training);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline json ensemble_to_json(const RpnEnsemble& e) {
  json members = json::array();
  for (const auto& m : e.members) {
    members.push_back({{"prior", nn::params_to_json(m.prior)},
                       {"trainable", nn::params_to_json(m.trainable)}});
  }
  return {{"format", "membrane_forge.rpn_ensemble"},
          {"version", 1},
          {"config", nn::config_to_json(e.config)},
          {"norm", norm_to_json(e.norm)},
          {"prior_scale", e.prior_scale},
          {"members", members}};
}

inline RpnEnsemble ensemble_from_json(const json& j) {
  if (j.value("format", "") != "membrane_forge.rpn_ensemble") {
    throw SchemaError("not an ensemble checkpoint");
  }
  RpnEnsemble e;
  e.config = nn::config_from_json(j.at("config"));
  e.norm = norm_from_json(j.at("norm"));
  e.prior_scale = j.at("prior_scale").get<double>();
  const std::size_t n = nn::Architecture(e.config).size();
  for (const auto& m : j.at("members")) {
    e.members.push_back({nn::params_from_json(m.at("prior"), n),
                         nn::params_from_json(m.at("trainable"), n)});
  }
  if (e.members.empty()) throw SchemaError("ensemble checkpoint has no members");
  return e;
}

}  // namespace mforge
