#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "membrane_forge/dataset.hpp"
#include "membrane_forge/design.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/rng.hpp"

namespace mforge::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { tanh, softplus };

struct ModelConfig {
  std::size_t mlp_depth = 3;
  std::size_t mlp_width = 64;
  std::size_t ring_latent_dim = 12;
  std::size_t poly_degree = 2;
  std::string activation = "softplus";
  std::uint64_t seed = 0;

  Activation act() const {
    if (activation == "tanh") return Activation::tanh;
    if (activation == "softplus") return Activation::softplus;
    throw ConfigError("unknown activation '" + activation + "' (tanh, softplus)");
  }

  void validate() const {
    if (mlp_depth < 1) throw ConfigError("mlp_depth must be >= 1");
    if (mlp_width < 1) throw ConfigError("mlp_width must be >= 1");
    if (ring_latent_dim < 1) throw ConfigError("ring_latent_dim must be >= 1");
    if (poly_degree < 1 || poly_degree > 3) throw ConfigError("poly_degree must be 1, 2 or 3");
    (void)act();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Offsets of one dense layer inside the flat parameter vector (row-major
/// out x in weights, then the bias).
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t w = 0;
  std::size_t b = 0;
};

/// Parameter layout: a 3 -> L -> L ring encoder applied per ring slot and
/// summed, then an MLP on [latent, t, r0, h] producing d+1 coefficients.
class Architecture {
 public:
  static constexpr std::size_t kSlotInputs = 3;  // centre, half width, presence
  static constexpr std::size_t kRestInputs = 3;  // thickness, contact radius, height
  static constexpr std::size_t kSlots = 2;

  explicit Architecture(const ModelConfig& cfg) : act_(cfg.act()) {
    cfg.validate();
    const std::size_t L = cfg.ring_latent_dim;
    encoder_.push_back(add(kSlotInputs, L));
    encoder_.push_back(add(L, L));
    std::size_t in = L + kRestInputs;
    for (std::size_t i = 0; i < cfg.mlp_depth; ++i) {
      trunk_.push_back(add(in, cfg.mlp_width));
      in = cfg.mlp_width;
    }
    trunk_.push_back(add(in, cfg.poly_degree + 1));
  }

  std::size_t size() const { return size_; }
  const std::vector<DenseLayer>& encoder() const { return encoder_; }
  const std::vector<DenseLayer>& trunk() const { return trunk_; }
  std::size_t latent() const { return encoder_.back().out; }
  std::size_t n_coeffs() const { return trunk_.back().out; }
  Activation activation() const { return act_; }

 private:
  DenseLayer add(std::size_t in, std::size_t out) {
    DenseLayer l{in, out, size_, size_ + in * out};
    size_ += in * out + out;
    return l;
  }

  Activation act_;
  std::vector<DenseLayer> encoder_;
  std::vector<DenseLayer> trunk_;
  std::size_t size_ = 0;
};

/// Glorot-uniform weights, zero biases.
inline VectorXd init_params(const Architecture& arch, std::uint64_t seed) {
  VectorXd p = VectorXd::Zero(static_cast<Eigen::Index>(arch.size()));
  Rng rng(seed);
  auto fill = [&](const DenseLayer& l) {
    const double lim = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    for (std::size_t i = 0; i < l.in * l.out; ++i) {
      p[static_cast<Eigen::Index>(l.w + i)] = rng.uniform(-lim, lim);
    }
  };
  for (const auto& l : arch.encoder()) fill(l);
  for (const auto& l : arch.trunk()) fill(l);
  return p;
}

struct SurrogateModel {
  ModelConfig config;
  NormStats norm;
  VectorXd params;

  static SurrogateModel create(const ModelConfig& cfg, const NormStats& norm) {
    Architecture arch(cfg);
    return {cfg, norm, init_params(arch, cfg.seed)};
  }
};

// ---------------------------------------------------------------------------
// Inputs

/// Normalized network inputs for one (design, height).
struct ModelInputs {
  std::array<std::array<double, 3>, 2> slots{};  // (c, w, presence) or zeros
  std::array<double, 3> rest{};                  // (t, r0, h)
};

inline ModelInputs make_inputs(const NormStats& n, const MembraneDesign& d, double h_mm) {
  if (d.rings.size() > Architecture::kSlots) throw InvalidDesign("at most two rings");
  ModelInputs x;
  for (std::size_t k = 0; k < d.rings.size(); ++k) {
    x.slots[k] = {n.ring_center.normalize(d.rings[k].center_radius),
                  n.ring_width.normalize(d.rings[k].half_width), 1.0};
  }
  x.rest = {n.thickness.normalize(d.thickness), n.contact_radius.normalize(d.contact_radius),
            n.height.normalize(h_mm)};
  return x;
}

/// Polynomial basis [1, pn, pn^2, ...] in normalized pressure.
inline std::array<double, 4> pressure_basis(const NormStats& n, double p_kpa, std::size_t degree) {
  std::array<double, 4> phi{1.0, 0.0, 0.0, 0.0};
  const double pn = n.pressure.normalize(p_kpa);
  for (std::size_t k = 1; k <= degree; ++k) phi[k] = phi[k - 1] * pn;
  return phi;
}

// ---------------------------------------------------------------------------
// Batched forward / backward

namespace detail {

inline void activate(Activation a, MatrixXd& z) {
  if (a == Activation::tanh) {
    z = z.array().tanh();
  } else {
    // softplus, overflow-safe
    z = z.unaryExpr([](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); });
  }
}

/// Multiply `d` in place by the activation derivative, given pre- and
/// post-activation values.
inline void activation_grad(Activation a, const MatrixXd& pre, const MatrixXd& post,
                            MatrixXd& d) {
  if (a == Activation::tanh) {
    d.array() *= 1.0 - post.array().square();
  } else {
    d.array() *= pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }).array();
  }
}

using ConstMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstMap weights(const VectorXd& p, const DenseLayer& l) {
  return ConstMap(p.data() + l.w, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
}
inline Eigen::Map<const VectorXd> bias(const VectorXd& p, const DenseLayer& l) {
  return Eigen::Map<const VectorXd>(p.data() + l.b, static_cast<Eigen::Index>(l.out));
}
inline MutMap weights(VectorXd& p, const DenseLayer& l) {
  return MutMap(p.data() + l.w, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
}
inline Eigen::Map<VectorXd> bias(VectorXd& p, const DenseLayer& l) {
  return Eigen::Map<VectorXd>(p.data() + l.b, static_cast<Eigen::Index>(l.out));
}

}  // namespace detail

/// Activations kept for the backward pass; one column per sample.
struct ForwardCache {
  std::array<MatrixXd, 2> slot_in;
  std::array<MatrixXd, 2> enc_pre;
  std::array<MatrixXd, 2> enc_hidden;
  std::vector<MatrixXd> pre;   // trunk pre-activations
  std::vector<MatrixXd> post;  // trunk inputs per layer; post[0] = [latent; rest]
  MatrixXd coeffs;             // (d+1) x n
};

inline ForwardCache forward_batch(const Architecture& arch, const VectorXd& p,
                                  const std::vector<ModelInputs>& xs) {
  using detail::bias;
  using detail::weights;
  const auto n = static_cast<Eigen::Index>(xs.size());
  const auto L = static_cast<Eigen::Index>(arch.latent());
  ForwardCache c;
  MatrixXd rest(3, n);
  for (std::size_t s = 0; s < Architecture::kSlots; ++s) c.slot_in[s].resize(3, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& x = xs[static_cast<std::size_t>(j)];
    for (std::size_t s = 0; s < Architecture::kSlots; ++s) {
      for (Eigen::Index i = 0; i < 3; ++i) c.slot_in[s](i, j) = x.slots[s][static_cast<std::size_t>(i)];
    }
    for (Eigen::Index i = 0; i < 3; ++i) rest(i, j) = x.rest[static_cast<std::size_t>(i)];
  }
  const DenseLayer& e1 = arch.encoder()[0];
  const DenseLayer& e2 = arch.encoder()[1];
  MatrixXd latent = MatrixXd::Zero(L, n);
  for (std::size_t s = 0; s < Architecture::kSlots; ++s) {
    c.enc_pre[s] = (weights(p, e1) * c.slot_in[s]).colwise() + bias(p, e1);
    c.enc_hidden[s] = c.enc_pre[s];
    detail::activate(arch.activation(), c.enc_hidden[s]);
    latent += (weights(p, e2) * c.enc_hidden[s]).colwise() + bias(p, e2);
  }
  MatrixXd h(L + 3, n);
  h.topRows(L) = latent;
  h.bottomRows(3) = rest;
  c.post.push_back(h);
  const auto& trunk = arch.trunk();
  for (std::size_t k = 0; k + 1 < trunk.size(); ++k) {
    MatrixXd z = (weights(p, trunk[k]) * c.post.back()).colwise() + bias(p, trunk[k]);
    c.pre.push_back(z);
    detail::activate(arch.activation(), z);
    c.post.push_back(std::move(z));
  }
  c.coeffs = (weights(p, trunk.back()) * c.post.back()).colwise() + bias(p, trunk.back());
  return c;
}

struct InputGradients {
  std::array<MatrixXd, 2> slots;  // 3 x n, w.r.t. normalized (c, w, presence)
  MatrixXd rest;                  // 3 x n, w.r.t. normalized (t, r0, h)
};

/// Reverse pass for upstream gradient `d_coeffs` ((d+1) x n). Accumulates
/// into `grad` when given; returns input gradients when requested.
inline void backward_batch(const Architecture& arch, const VectorXd& p, const ForwardCache& c,
                           const MatrixXd& d_coeffs, VectorXd* grad, InputGradients* dx) {
  using detail::bias;
  using detail::weights;
  const auto& trunk = arch.trunk();
  MatrixXd d = d_coeffs;
  if (grad != nullptr) {
    weights(*grad, trunk.back()).noalias() += d * c.post.back().transpose();
    bias(*grad, trunk.back()) += d.rowwise().sum();
  }
  d = weights(p, trunk.back()).transpose() * d;
  for (std::size_t k = trunk.size() - 1; k-- > 0;) {
    detail::activation_grad(arch.activation(), c.pre[k], c.post[k + 1], d);
    if (grad != nullptr) {
      weights(*grad, trunk[k]).noalias() += d * c.post[k].transpose();
      bias(*grad, trunk[k]) += d.rowwise().sum();
    }
    d = weights(p, trunk[k]).transpose() * d;
  }
  const auto L = static_cast<Eigen::Index>(arch.latent());
  const MatrixXd d_latent = d.topRows(L);
  if (dx != nullptr) dx->rest = d.bottomRows(3);
  const DenseLayer& e1 = arch.encoder()[0];
  const DenseLayer& e2 = arch.encoder()[1];
  for (std::size_t s = 0; s < Architecture::kSlots; ++s) {
    if (grad != nullptr) {
      weights(*grad, e2).noalias() += d_latent * c.enc_hidden[s].transpose();
      bias(*grad, e2) += d_latent.rowwise().sum();
    }
    MatrixXd dh = weights(p, e2).transpose() * d_latent;
    detail::activation_grad(arch.activation(), c.enc_pre[s], c.enc_hidden[s], dh);
    if (grad != nullptr) {
      weights(*grad, e1).noalias() += dh * c.slot_in[s].transpose();
      bias(*grad, e1) += dh.rowwise().sum();
    }
    if (dx != nullptr) dx->slots[s] = weights(p, e1).transpose() * dh;
  }
}

// ---------------------------------------------------------------------------
// Single-design API

using PolyCoeffs = std::vector<double>;

inline std::vector<double> ring_encoding(const SurrogateModel& m, const MembraneDesign& d) {
  Architecture arch(m.config);
  const ForwardCache c = forward_batch(arch, m.params, {make_inputs(m.norm, d, 0.0)});
  return {c.post[0].data(), c.post[0].data() + arch.latent()};
}

inline PolyCoeffs forward(const SurrogateModel& m, const MembraneDesign& d, double h_mm) {
  Architecture arch(m.config);
  const ForwardCache c = forward_batch(arch, m.params, {make_inputs(m.norm, d, h_mm)});
  return {c.coeffs.data(), c.coeffs.data() + c.coeffs.rows()};
}

/// F = F_mean + F_sd * sum_k c_k pn^k.
inline double eval_poly(const NormStats& n, const double* c, std::size_t ncoef, double p_kpa) {
  const auto phi = pressure_basis(n, p_kpa, ncoef - 1);
  double s = 0.0;
  for (std::size_t k = 0; k < ncoef; ++k) s += c[k] * phi[k];
  return n.force.mean + n.force.sd * s;
}

inline double predict_force(const SurrogateModel& m, const MembraneDesign& d, double h_mm,
                            double p_kpa) {
  const PolyCoeffs c = forward(m, d, h_mm);
  return eval_poly(m.norm, c.data(), c.size(), p_kpa);
}

/// Gradients of predicted force w.r.t. physical inputs.
struct ForceGradient {
  double force = 0.0;
  double d_thickness = 0.0;
  double d_contact_radius = 0.0;
  double d_height = 0.0;
  double d_pressure = 0.0;
  std::vector<std::array<double, 2>> d_rings;  ///< (d centre, d half width), in design order
};

/// Coefficients plus their Jacobian w.r.t. the physical design inputs and height.
struct CoeffJacobian {
  PolyCoeffs coeffs;
  /// rows: coefficient k; cols: (t, r0, h, c1, w1, c2, w2) in physical units.
  Eigen::Matrix<double, Eigen::Dynamic, 7> jac;
};

/// Coefficients and Jacobians of one design at several heights, batched.
inline std::vector<CoeffJacobian> coeff_jacobians(const Architecture& arch, const VectorXd& params,
                                                  const NormStats& n, const MembraneDesign& d,
                                                  const std::vector<double>& heights_mm) {
  std::vector<ModelInputs> xs;
  xs.reserve(heights_mm.size());
  for (double h : heights_mm) xs.push_back(make_inputs(n, d, h));
  const ForwardCache c = forward_batch(arch, params, xs);
  const auto K = static_cast<Eigen::Index>(arch.n_coeffs());
  const auto H = static_cast<Eigen::Index>(xs.size());
  std::vector<CoeffJacobian> out(xs.size());
  for (Eigen::Index j = 0; j < H; ++j) {
    auto& o = out[static_cast<std::size_t>(j)];
    o.coeffs.assign(c.coeffs.col(j).data(), c.coeffs.col(j).data() + K);
    o.jac.setZero(K, 7);
  }
  for (Eigen::Index k = 0; k < K; ++k) {
    MatrixXd dc = MatrixXd::Zero(K, H);
    dc.row(k).setOnes();
    InputGradients g;
    backward_batch(arch, params, c, dc, nullptr, &g);
    for (Eigen::Index j = 0; j < H; ++j) {
      auto& jac = out[static_cast<std::size_t>(j)].jac;
      jac(k, 0) = g.rest(0, j) / n.thickness.sd;
      jac(k, 1) = g.rest(1, j) / n.contact_radius.sd;
      jac(k, 2) = g.rest(2, j) / n.height.sd;
      for (std::size_t s = 0; s < d.rings.size(); ++s) {
        jac(k, 3 + 2 * static_cast<Eigen::Index>(s)) = g.slots[s](0, j) / n.ring_center.sd;
        jac(k, 4 + 2 * static_cast<Eigen::Index>(s)) = g.slots[s](1, j) / n.ring_width.sd;
      }
    }
  }
  return out;
}

inline CoeffJacobian coeff_jacobian(const Architecture& arch, const VectorXd& params,
                                    const NormStats& n, const MembraneDesign& d, double h_mm) {
  return coeff_jacobians(arch, params, n, d, {h_mm}).front();
}

/// Force and its gradient for the coefficient function `coeffs` with
/// Jacobian `jac` (as from coeff_jacobian).
inline ForceGradient force_gradient_from(const NormStats& n, const CoeffJacobian& cj,
                                         const MembraneDesign& d, double p_kpa) {
  const std::size_t K = cj.coeffs.size();
  const auto phi = pressure_basis(n, p_kpa, K - 1);
  ForceGradient g;
  g.force = eval_poly(n, cj.coeffs.data(), K, p_kpa);
  double dpn = 0.0;
  for (std::size_t k = 1; k < K; ++k) dpn += static_cast<double>(k) * cj.coeffs[k] * phi[k - 1];
  g.d_pressure = n.force.sd * dpn / n.pressure.sd;
  std::array<double, 7> col{};
  for (Eigen::Index j = 0; j < 7; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += cj.jac(static_cast<Eigen::Index>(k), j) * phi[k];
    col[static_cast<std::size_t>(j)] = n.force.sd * s;
  }
  g.d_thickness = col[0];
  g.d_contact_radius = col[1];
  g.d_height = col[2];
  for (std::size_t s = 0; s < d.rings.size(); ++s) g.d_rings.push_back({col[3 + 2 * s], col[4 + 2 * s]});
  return g;
}

inline ForceGradient predict_force_gradient(const SurrogateModel& m, const MembraneDesign& d,
                                            double h_mm, double p_kpa) {
  Architecture arch(m.config);
  return force_gradient_from(m.norm, coeff_jacobian(arch, m.params, m.norm, d, h_mm), d, p_kpa);
}

// ---------------------------------------------------------------------------
// Loss

struct TrainingRow {
  MembraneDesign design;
  double h_mm = 0.0;
  double p_kpa = 0.0;
  double f_n = 0.0;
};

/// Rows sharing one (design, height) reduce to weighted moments of the
/// pressure basis, so each record needs one network evaluation.
struct RecordMoments {
  ModelInputs inputs;
  Eigen::Matrix4d A = Eigen::Matrix4d::Zero();  ///< sum w phi phi^T
  Eigen::Vector4d b = Eigen::Vector4d::Zero();  ///< sum w y phi,  y = F - F_mean
  double yy = 0.0;                              ///< sum w y^2
  double weight = 0.0;
  Eigen::VectorXd offset;  ///< fixed coefficient offset (prior network), may be empty

  void add(const std::array<double, 4>& phi, double y, double w) {
    const Eigen::Vector4d v(phi[0], phi[1], phi[2], phi[3]);
    A.noalias() += w * v * v.transpose();
    b += w * y * v;
    yy += w * y * y;
    weight += w;
  }
};

struct LossGrad {
  double loss = 0.0;  ///< mean squared error [N^2]
  VectorXd grad;
};

/// MSE over the weighted rows summarized in `recs` and its parameter gradient.
inline LossGrad loss_and_grad(const Architecture& arch, const VectorXd& params,
                              const NormStats& n, const std::vector<RecordMoments>& recs,
                              bool want_grad = true) {
  double wsum = 0.0;
  for (const auto& r : recs) wsum += r.weight;
  if (recs.empty() || !(wsum > 0.0)) throw EmptyBatch("loss over an empty batch");
  std::vector<ModelInputs> xs;
  xs.reserve(recs.size());
  for (const auto& r : recs) xs.push_back(r.inputs);
  const ForwardCache c = forward_batch(arch, params, xs);
  const auto K = static_cast<Eigen::Index>(arch.n_coeffs());
  const double s = n.force.sd;
  LossGrad out;
  MatrixXd dc(K, static_cast<Eigen::Index>(recs.size()));
  for (std::size_t j = 0; j < recs.size(); ++j) {
    const auto& r = recs[j];
    Eigen::Vector4d cv = Eigen::Vector4d::Zero();
    for (Eigen::Index k = 0; k < K; ++k) cv[k] = c.coeffs(k, static_cast<Eigen::Index>(j));
    if (r.offset.size() == K) cv.head(K) += r.offset;
    out.loss += s * s * cv.dot(r.A * cv) - 2.0 * s * cv.dot(r.b) + r.yy;
    const Eigen::Vector4d g = (2.0 * s * s * (r.A * cv) - 2.0 * s * r.b) / wsum;
    dc.col(static_cast<Eigen::Index>(j)) = g.head(K);
  }
  out.loss = std::max(out.loss / wsum, 0.0);
  if (want_grad) {
    out.grad = VectorXd::Zero(params.size());
    backward_batch(arch, params, c, dc, &out.grad, nullptr);
  }
  return out;
}

/// Group raw rows by (design, height) into moments.
inline std::vector<RecordMoments> moments_from_rows(const NormStats& n, std::size_t degree,
                                                    const std::vector<TrainingRow>& rows) {
  std::map<std::pair<std::string, double>, std::size_t> where;
  std::vector<RecordMoments> out;
  for (const auto& row : rows) {
    const auto key = std::make_pair(design_key(row.design), row.h_mm);
    auto it = where.find(key);
    if (it == where.end()) {
      it = where.emplace(key, out.size()).first;
      RecordMoments m;
      m.inputs = make_inputs(n, row.design, row.h_mm);
      out.push_back(std::move(m));
    }
    out[it->second].add(pressure_basis(n, row.p_kpa, degree), row.f_n - n.force.mean, 1.0);
  }
  return out;
}

inline LossGrad loss_and_grad(const SurrogateModel& m, const std::vector<TrainingRow>& batch) {
  if (batch.empty()) throw EmptyBatch("loss over an empty batch");
  Architecture arch(m.config);
  return loss_and_grad(arch, m.params, m.norm,
                       moments_from_rows(m.norm, m.config.poly_degree, batch));
}

// ---------------------------------------------------------------------------
// Evaluation

inline double evaluate_rmse(const SurrogateModel& m, const Dataset& ds) {
  if (ds.row_count() == 0) throw EmptyDataset("RMSE of an empty dataset");
  double se = 0.0;
  std::size_t n = 0;
  for (const auto& r : ds.records()) {
    const PolyCoeffs c = forward(m, r.design, r.height_mm);
    for (const auto& s : r.samples) {
      const double e = eval_poly(m.norm, c.data(), c.size(), s.p_kpa) - s.f_n;
      se += e * e;
      ++n;
    }
  }
  return std::sqrt(se / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 2000;
  std::size_t patience = 100;
  std::uint64_t seed = 0;
  bool bootstrap = false;  ///< resample rows with replacement (ensemble members)
  /// Called after every epoch as (epoch, train loss [N^2], validation RMSE [N]).
  std::function<void(std::size_t, double, double)> on_epoch;
};

struct TrainResult {
  SurrogateModel model;
  std::size_t best_epoch = 0;
  double best_val_rmse = 0.0;
  double initial_val_rmse = 0.0;
  std::vector<double> train_loss;
  std::vector<double> val_rmse;
};

/// Fixed coefficient offset added to the trained network's output, i.e. a
/// frozen prior network scaled by `scale`.
struct CoeffOffset {
  const VectorXd* params = nullptr;
  double scale = 1.0;
};

namespace detail {

struct PreparedRecord {
  ModelInputs inputs;
  std::vector<std::array<double, 4>> phi;
  std::vector<double> y;
  std::size_t membrane = 0;
  Eigen::VectorXd offset;
};

inline std::vector<PreparedRecord> prepare(const Dataset& ds, const NormStats& n,
                                           std::size_t degree, std::size_t* n_membranes) {
  std::map<std::string, std::size_t> membrane_ids;
  std::vector<PreparedRecord> out;
  for (const auto& r : ds.records()) {
    PreparedRecord p;
    p.inputs = make_inputs(n, r.design, r.height_mm);
    const auto key = design_key(r.design);
    p.membrane = membrane_ids.emplace(key, membrane_ids.size()).first->second;
    for (const auto& s : r.samples) {
      p.phi.push_back(pressure_basis(n, s.p_kpa, degree));
      p.y.push_back(s.f_n - n.force.mean);
    }
    out.push_back(std::move(p));
  }
  if (n_membranes != nullptr) *n_membranes = membrane_ids.size();
  return out;
}

inline void attach_offsets(std::vector<PreparedRecord>& recs, const Architecture& arch,
                           const CoeffOffset& off) {
  if (off.params == nullptr) return;
  std::vector<ModelInputs> xs;
  for (const auto& r : recs) xs.push_back(r.inputs);
  if (xs.empty()) return;
  const ForwardCache c = forward_batch(arch, *off.params, xs);
  for (std::size_t j = 0; j < recs.size(); ++j) {
    recs[j].offset = off.scale * c.coeffs.col(static_cast<Eigen::Index>(j));
  }
}

inline std::vector<RecordMoments> full_moments(const std::vector<PreparedRecord>& recs) {
  std::vector<RecordMoments> out;
  out.reserve(recs.size());
  for (const auto& r : recs) {
    RecordMoments m;
    m.inputs = r.inputs;
    m.offset = r.offset;
    for (std::size_t i = 0; i < r.y.size(); ++i) m.add(r.phi[i], r.y[i], 1.0);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace detail

/// Seeded Adam on membrane-balanced mini-batches (membrane uniformly, then a
/// row within it). Returns the parameters with the best validation RMSE seen,
/// including the initialization.
inline TrainResult train(SurrogateModel init, const Dataset& train_ds, const Dataset& val_ds,
                         const TrainOptions& opt = {}, const CoeffOffset& offset = {}) {
  if (train_ds.row_count() == 0) throw EmptyDataset("training set is empty");
  if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");
  Architecture arch(init.config);
  if (init.params.size() != static_cast<Eigen::Index>(arch.size())) {
    throw ConfigError("parameter vector does not match the model configuration");
  }
  const NormStats& n = init.norm;
  const std::size_t degree = init.config.poly_degree;
  std::size_t n_membranes = 0;
  auto recs = detail::prepare(train_ds, n, degree, &n_membranes);
  detail::attach_offsets(recs, arch, offset);
  const Dataset& vds = val_ds.row_count() > 0 ? val_ds : train_ds;
  auto val_recs = detail::prepare(vds, n, degree, nullptr);
  detail::attach_offsets(val_recs, arch, offset);
  const auto val_moments = detail::full_moments(val_recs);

  Rng rng(opt.seed);
  // Row pool per membrane: (record, row) pairs, bootstrapped if requested.
  std::vector<std::pair<std::size_t, std::size_t>> all_rows;
  for (std::size_t r = 0; r < recs.size(); ++r) {
    for (std::size_t i = 0; i < recs[r].y.size(); ++i) all_rows.emplace_back(r, i);
  }
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pool(n_membranes);
  if (opt.bootstrap) {
    for (std::size_t i = 0; i < all_rows.size(); ++i) {
      const auto& pick = all_rows[rng.index(all_rows.size())];
      pool[recs[pick.first].membrane].push_back(pick);
    }
  } else {
    for (const auto& rr : all_rows) pool[recs[rr.first].membrane].push_back(rr);
  }
  std::vector<std::size_t> live;
  for (std::size_t m = 0; m < pool.size(); ++m) {
    if (!pool[m].empty()) live.push_back(m);
  }

  auto val_rmse = [&](const VectorXd& p) {
    return std::sqrt(loss_and_grad(arch, p, n, val_moments, false).loss);
  };

  TrainResult res;
  res.model = init;
  VectorXd theta = init.params;
  res.initial_val_rmse = val_rmse(theta);
  res.best_val_rmse = res.initial_val_rmse;
  VectorXd m1 = VectorXd::Zero(theta.size());
  VectorXd m2 = VectorXd::Zero(theta.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  const std::size_t batches_per_epoch =
      std::max<std::size_t>(1, (all_rows.size() + opt.batch_size - 1) / opt.batch_size);
  std::size_t since_best = 0;

  std::vector<std::ptrdiff_t> slot(recs.size(), -1);
  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t bi = 0; bi < batches_per_epoch; ++bi) {
      std::vector<RecordMoments> batch;
      std::vector<std::size_t> touched;
      for (std::size_t k = 0; k < opt.batch_size; ++k) {
        const auto& rows = pool[live[rng.index(live.size())]];
        const auto [r, i] = rows[rng.index(rows.size())];
        if (slot[r] < 0) {
          slot[r] = static_cast<std::ptrdiff_t>(batch.size());
          touched.push_back(r);
          RecordMoments m;
          m.inputs = recs[r].inputs;
          m.offset = recs[r].offset;
          batch.push_back(std::move(m));
        }
        batch[static_cast<std::size_t>(slot[r])].add(recs[r].phi[i], recs[r].y[i], 1.0);
      }
      for (std::size_t r : touched) slot[r] = -1;
      LossGrad lg = loss_and_grad(arch, theta, n, batch);
      if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
        throw Divergence("training loss became non-finite at epoch " + std::to_string(epoch));
      }
      epoch_loss += lg.loss / static_cast<double>(batches_per_epoch);
      ++step;
      m1 = b1 * m1 + (1.0 - b1) * lg.grad;
      m2 = b2 * m2 + (1.0 - b2) * lg.grad.cwiseProduct(lg.grad);
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      theta.array() -= opt.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
    }
    const double v = val_rmse(theta);
    if (!std::isfinite(v)) throw Divergence("validation RMSE became non-finite");
    res.train_loss.push_back(epoch_loss);
    res.val_rmse.push_back(v);
    if (opt.on_epoch) opt.on_epoch(epoch, epoch_loss, v);
    if (v < res.best_val_rmse) {
      res.best_val_rmse = v;
      res.best_epoch = epoch;
      res.model.params = theta;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline json config_to_json(const ModelConfig& c) {
  return {{"mlp_depth", c.mlp_depth},         {"mlp_width", c.mlp_width},
          {"ring_latent_dim", c.ring_latent_dim}, {"poly_degree", c.poly_degree},
          {"activation", c.activation},       {"seed", c.seed}};
}

inline ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "mlp_depth") c.mlp_depth = v.get<std::size_t>();
    else if (k == "mlp_width") c.mlp_width = v.get<std::size_t>();
    else if (k == "ring_latent_dim") c.ring_latent_dim = v.get<std::size_t>();
    else if (k == "poly_degree") c.poly_degree = v.get<std::size_t>();
    else if (k == "activation") c.activation = v.get<std::string>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

inline json params_to_json(const VectorXd& p) {
  return json(std::vector<double>(p.data(), p.data() + p.size()));
}

inline VectorXd params_from_json(const json& j, std::size_t expected) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != expected) {
    throw SchemaError("parameter array has " + std::to_string(v.size()) + " values, expected " +
                      std::to_string(expected));
  }
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json model_to_json(const SurrogateModel& m) {
  return {{"format", "membrane_forge.surrogate"},
          {"version", 1},
          {"config", config_to_json(m.config)},
          {"norm", norm_to_json(m.norm)},
          {"params", params_to_json(m.params)}};
}

inline SurrogateModel model_from_json(const json& j) {
  if (j.value("format", "") != "membrane_forge.surrogate") {
    throw SchemaError("not a surrogate checkpoint");
  }
  SurrogateModel m;
  m.config = config_from_json(j.at("config"));
  m.norm = norm_from_json(j.at("norm"));
  m.params = params_from_json(j.at("params"), Architecture(m.config).size());
  return m;
}

}  // namespace mforge::nn
