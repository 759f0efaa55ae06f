#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "membrane_forge/design_opt.hpp"
#include "membrane_forge/ensemble.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/io.hpp"
#include "membrane_forge/membrane_sim.hpp"
#include "membrane_forge/optim.hpp"
#include "membrane_forge/surrogate.hpp"

namespace mforge {

struct DataConfig {
  std::vector<double> heights_mm{0, 10, 20, 30, 40, 50, 60, 70};
  std::vector<double> pressures_kpa;  ///< default 0.375 .. 7.5 step 0.375
  double noise_sd_n = 0.0;

  DataConfig() {
    for (int k = 1; k <= 20; ++k) pressures_kpa.push_back(0.375 * k);
  }
};

struct AlConfig {
  std::size_t ensemble_size = 8;
  double prior_scale = 1.0;
  std::size_t q = 2;
  std::size_t n_starts = 64;
  std::size_t iterations = 5;
  AcquisitionGrid grid;
};

struct DesignConfig {
  std::size_t n_starts = 2500;
  std::vector<double> masses_kg{1.5, 2.5, 4.0};
  std::vector<double> waypoint_heights_mm{5, 40, 50};
  double pressure_step_kpa = 0.05;
  double lift_thickness_lo_mm = 2.0;  ///< thickness floor for lifting designs
  LiftTargets targets = LiftTargets::from_masses({1.5, 2.5, 4.0}, {6.9});
};

struct PipelineConfig {
  std::size_t n_designs = 16;  ///< synthetic membranes drawn from the design box
  std::size_t k_folds = 4;
};

/// Everything a run needs, read from one JSON document. Unknown keys are errors.
struct RunConfig {
  std::uint64_t seed = 0;
  MaterialSet material;
  SolverConfig solver;
  nn::ModelConfig model;
  nn::TrainOptions training;
  DataConfig data;
  AlConfig al;
  DesignBox box;
  DesignConfig design;
  PipelineConfig pipeline;
};

/// Calls v(section, key, field) for every scalar or list setting. Nested
/// objects (design targets) are handled separately by the readers.
template <typename C, typename V>
void visit_config(C& c, V&& v) {
  v("", "seed", c.seed);
  v("material", "mu_kpa", c.material.mu_kpa);
  v("material", "jm", c.material.jm);
  v("material", "ring_mu_scale", c.material.ring_mu_scale);
  v("material", "ring_jm", c.material.ring_jm);
  v("solver", "ode_abs_tol", c.solver.ode_abs_tol);
  v("solver", "ode_rel_tol", c.solver.ode_rel_tol);
  v("solver", "shoot_tol", c.solver.shoot_tol);
  v("solver", "boundary_tol", c.solver.boundary_tol);
  v("solver", "f_cap_n", c.solver.f_cap_n);
  v("solver", "height_tol_mm", c.solver.height_tol_mm);
  v("solver", "report_nodes", c.solver.report_nodes);
  v("solver", "max_shoot_iter", c.solver.max_shoot_iter);
  v("solver", "scan_points", c.solver.scan_points);
  v("model", "mlp_depth", c.model.mlp_depth);
  v("model", "mlp_width", c.model.mlp_width);
  v("model", "ring_latent_dim", c.model.ring_latent_dim);
  v("model", "poly_degree", c.model.poly_degree);
  v("model", "activation", c.model.activation);
  v("training", "learning_rate", c.training.learning_rate);
  v("training", "batch_size", c.training.batch_size);
  v("training", "max_epochs", c.training.max_epochs);
  v("training", "patience", c.training.patience);
  v("data", "heights_mm", c.data.heights_mm);
  v("data", "pressures_kpa", c.data.pressures_kpa);
  v("data", "noise_sd_n", c.data.noise_sd_n);
  v("al", "ensemble_size", c.al.ensemble_size);
  v("al", "prior_scale", c.al.prior_scale);
  v("al", "q", c.al.q);
  v("al", "n_starts", c.al.n_starts);
  v("al", "iterations", c.al.iterations);
  v("al", "grid_heights_mm", c.al.grid.heights_mm);
  v("al", "grid_pressures_kpa", c.al.grid.pressures_kpa);
  v("design_box", "thickness_lo_mm", c.box.thickness_lo);
  v("design_box", "thickness_hi_mm", c.box.thickness_hi);
  v("design_box", "contact_radius_lo_mm", c.box.contact_radius_lo);
  v("design_box", "contact_radius_hi_mm", c.box.contact_radius_hi);
  v("design_box", "half_width_lo_mm", c.box.half_width_lo);
  v("design_box", "half_width_hi_mm", c.box.half_width_hi);
  v("design_box", "gap_mm", c.box.gap);
  v("design_box", "ring_counts", c.box.ring_counts);
  v("design", "n_starts", c.design.n_starts);
  v("design", "masses_kg", c.design.masses_kg);
  v("design", "waypoint_heights_mm", c.design.waypoint_heights_mm);
  v("design", "pressure_step_kpa", c.design.pressure_step_kpa);
  v("design", "lift_thickness_lo_mm", c.design.lift_thickness_lo_mm);
  v("pipeline", "n_designs", c.pipeline.n_designs);
  v("pipeline", "k_folds", c.pipeline.k_folds);
}

inline json config_to_json(const RunConfig& cfg) {
  json j = json::object();
  visit_config(cfg, [&](const std::string& sec, const std::string& key, const auto& field) {
    if (sec.empty()) j[key] = field;
    else j[sec][key] = field;
  });
  j["design"]["targets"] = targets_to_json(cfg.design.targets);
  return j;
}

/// Parse a run config. Every key is optional; unknown keys and wrong types
/// raise ConfigError.
inline RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  std::set<std::string> known;
  visit_config(c, [&](const std::string& sec, const std::string& key, auto& field) {
    known.insert(sec.empty() ? key : sec + "." + key);
    const json* v = nullptr;
    if (sec.empty()) {
      if (j.contains(key)) v = &j.at(key);
    } else if (j.contains(sec) && j.at(sec).is_object() && j.at(sec).contains(key)) {
      v = &j.at(sec).at(key);
    }
    if (v == nullptr) return;
    try {
      v->get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + (sec.empty() ? key : sec + "." + key) + "': " + e.what());
    }
  });
  for (const auto& [k, v] : j.items()) {
    if (v.is_object()) {
      const bool section = std::any_of(known.begin(), known.end(), [&](const std::string& n) {
        return n.rfind(k + ".", 0) == 0;
      });
      if (!section) throw ConfigError("unknown config section '" + k + "'");
      for (const auto& [k2, v2] : v.items()) {
        const std::string path = k + "." + k2;
        if (path == "design.targets") {
          c.design.targets = targets_from_json(v2);
          continue;
        }
        if (known.count(path) == 0U) throw ConfigError("unknown config key '" + path + "'");
      }
    } else if (known.count(k) == 0U) {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  c.model.seed = c.seed;
  c.training.seed = c.seed;
  c.model.validate();
  c.box.validate();
  c.al.grid.validate();
  if (c.al.ensemble_size < 1) throw ConfigError("al.ensemble_size must be >= 1");
  if (c.design.pressure_step_kpa <= 0.0) throw ConfigError("design.pressure_step_kpa must be positive");
  return c;
}

/// Set the seed from MEMBRANE_FORGE_SEED when present.
inline void apply_env_overrides(RunConfig& c) {
  if (const char* s = std::getenv("MEMBRANE_FORGE_SEED"); s != nullptr && *s != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError("MEMBRANE_FORGE_SEED is not an unsigned integer");
    c.seed = v;
    c.model.seed = v;
    c.training.seed = v;
  }
}

/// Defaults when path is empty; the environment override applies either way.
inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig c;
  if (!path.empty()) {
    json j;
    try {
      j = json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    c = config_from_json(j);
  }
  apply_env_overrides(c);
  return c;
}

/// One "section.key = default" line per setting, for --help.
inline std::string config_reference() {
  const RunConfig c;
  std::string out;
  visit_config(c, [&](const std::string& sec, const std::string& key, const auto& field) {
    out += "  " + (sec.empty() ? key : sec + "." + key) + " = " + json(field).dump() + "\n";
  });
  out += "  design.targets = " + targets_to_json(c.design.targets).dump() + "\n";
  return out;
}

}  // namespace mforge
