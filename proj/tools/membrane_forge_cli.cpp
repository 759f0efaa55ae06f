#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "membrane_forge/config.hpp"
#include "membrane_forge/curvefit.hpp"
#include "membrane_forge/dataset.hpp"
#include "membrane_forge/design_opt.hpp"
#include "membrane_forge/ensemble.hpp"
#include "membrane_forge/membrane_sim.hpp"
#include "membrane_forge/plot.hpp"
#include "membrane_forge/surrogate.hpp"

namespace {

using namespace mforge;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Shared helpers

json read_json(const fs::path& p) {
  try {
    return json::parse(io::read_file(p));
  } catch (const json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) { io::write_atomic(p, j.dump(2) + "\n"); }

void emit(const json& report, const std::string& out) {
  if (!out.empty()) write_json(out, report);
  std::cout << report.dump(2) << "\n";
}

std::string fmt(double v) { return io::fmt_double(v); }

/// Design from a JSON file, or a row of the reference table (1-based).
MembraneDesign pick_design(const std::string& path, int row) {
  if (!path.empty()) {
    const MembraneDesign d = design_from_json(read_json(path), path);
    validate_design(d);
    return d;
  }
  const auto refs = reference_designs();
  if (row < 1 || row > static_cast<int>(refs.size())) {
    throw ConfigError("--row must be in 1.." + std::to_string(refs.size()));
  }
  return refs[static_cast<std::size_t>(row - 1)];
}

/// Designs from a JSON array or one design object per line.
std::vector<MembraneDesign> read_designs(const fs::path& path) {
  const std::string text = io::read_file(path);
  std::vector<MembraneDesign> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    for (std::size_t i = 0; i < j.size(); ++i) {
      out.push_back(design_from_json(j[i], path.string() + "[" + std::to_string(i) + "]"));
    }
  } else {
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = path.string() + ":" + std::to_string(n);
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ParseError(where + ": " + e.what());
      }
      out.push_back(design_from_json(j.contains("design") ? j.at("design") : j, where));
    }
  }
  for (const auto& d : out) validate_design(d);
  return out;
}

/// Seeded designs spread over the ring-count classes of the box.
std::vector<MembraneDesign> random_designs(const DesignBox& box, std::size_t n, std::uint64_t seed) {
  box.validate();
  std::vector<std::size_t> classes = box.ring_counts;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<MembraneDesign> out;
  for (const auto& [k, u] : multistart_points<std::size_t>(classes, n, mix_seed(seed, 0x5eed), [](const std::size_t& k) {
         return DesignBox::dim(k);
       })) {
    out.push_back(map_unit(box, k, u.data()).design);
  }
  return out;
}

SyntheticOptions synthetic_options(const RunConfig& cfg) {
  return {cfg.data.noise_sd_n, cfg.seed, cfg.material, cfg.solver};
}

/// Surrogate or ensemble checkpoint as a force model.
ForceModel load_force_model(const fs::path& path) {
  const json j = read_json(path);
  const std::string format = j.value("format", "");
  if (format == "membrane_forge.surrogate") return surrogate_force_model(nn::model_from_json(j));
  if (format == "membrane_forge.rpn_ensemble") return ensemble_force_model(ensemble_from_json(j));
  if (format == "membrane_forge.al_session") return ensemble_force_model(ensemble_from_json(j.at("ensemble")));
  throw SchemaError(path.string() + ": not a model checkpoint");
}

DesignBox lift_box(const RunConfig& cfg) {
  DesignBox box = cfg.box;
  box.thickness_lo = std::max(box.thickness_lo, cfg.design.lift_thickness_lo_mm);
  return box;
}

std::string trajectories_csv(const std::vector<Trajectory>& trajs) {
  std::string out = "mass_kg,p_kpa,h_mm,F_n,lifted\n";
  for (const auto& t : trajs) {
    for (const auto& s : t.samples) {
      out += fmt(t.mass_kg) + ',' + fmt(s.p_kpa) + ',' + fmt(s.h_mm) + ',' + fmt(s.f_n) + ',' +
             (s.lifted ? "1" : "0") + '\n';
    }
  }
  return out;
}

json posterior_json(const PosteriorEval& pe) {
  return {{"pi", pe.pi},           {"h_min_mm", pe.h_min},      {"heights_mm", pe.heights},
          {"f_error", pe.f_error}, {"p_error", pe.p_error},     {"unreachable", pe.unreachable}};
}

nn::TrainResult train_surrogate(const RunConfig& cfg, const Dataset& train, const Dataset& val) {
  nn::SurrogateModel init = nn::SurrogateModel::create(cfg.model, compute_norm_stats(train));
  return nn::train(std::move(init), train, val, cfg.training);
}

RpnEnsemble train_new_ensemble(const RunConfig& cfg, const Dataset& ds) {
  RpnEnsemble e = RpnEnsemble::create(cfg.model, compute_norm_stats(ds), cfg.al.ensemble_size, cfg.al.prior_scale);
  EnsembleTrainOptions opt;
  opt.train = cfg.training;
  return train_ensemble(std::move(e), ds, Dataset{}, opt);
}

DesignOracle simulator_oracle(const RunConfig& cfg) {
  return [cfg](const MembraneDesign& d) {
    const Dataset ds = generate_synthetic({d}, cfg.data.heights_mm, cfg.data.pressures_kpa, synthetic_options(cfg));
    if (ds.empty()) throw ShootingFailed("simulator produced no points for " + design_key(d));
    return ds.records();
  };
}

/// Simulator force model for lift queries. Forces above the solver cap only
/// ever get compared against a payload weight, so they saturate at the cap.
ForceModel saturating_simulator(const RunConfig& cfg) {
  return [mats = cfg.material, solver = cfg.solver](const MembraneDesign& d, double h, double p, bool) {
    try {
      return ForceEval::value(force_at_height(d, mats, p * 1e-3, h, solver));
    } catch (const NotReachable&) {
      return ForceEval::value(solver.f_cap_n);
    } catch (const Error& e) {
      throw ModelEvaluationFailed(std::string("simulator: ") + e.what());
    }
  };
}

// ---------------------------------------------------------------------------
// simulate / sweep

struct SimulateArgs {
  std::string design;
  int row = 1;
  double p_kpa = 0.0;
  std::optional<double> h_mm;
  std::optional<double> force_n;
  std::string out;
};

std::string profile_csv(const MembraneShape& s) {
  std::string out = "r_mm,R_mm,Z_mm,lambda1,lambda2,beta_rad,segment\n";
  for (std::size_t i = 0; i < s.r.size(); ++i) {
    out += fmt(s.r[i]) + ',' + fmt(s.R[i]) + ',' + fmt(s.Z[i]) + ',' + fmt(s.l1[i]) + ',' + fmt(s.l2[i]) + ',' +
           fmt(s.beta[i]) + ',' + std::to_string(s.segment[i]) + '\n';
  }
  return out;
}

int cmd_simulate(const RunConfig& cfg, const SimulateArgs& a) {
  if (a.h_mm.has_value() == a.force_n.has_value()) throw ConfigError("give exactly one of --h-mm and --force-n");
  const MembraneDesign d = pick_design(a.design, a.row);
  const double p = a.p_kpa * 1e-3;
  MembraneShape shape;
  double force = 0.0;
  if (a.force_n) {
    shape = solve_shape(d, cfg.material, p, *a.force_n, cfg.solver);
    force = *a.force_n;
  } else {
    force = force_at_height(d, cfg.material, p, *a.h_mm, cfg.solver);
    shape = solve_shape(d, cfg.material, std::max(p, 0.0), 0.0, cfg.solver);
    if (p > 0.0 && shape.contact_height > *a.h_mm) shape = solve_shape_at_height(d, cfg.material, p, *a.h_mm, cfg.solver);
  }
  const json report = {{"design", design_to_json(d)},
                       {"p_kpa", a.p_kpa},
                       {"force_n", force},
                       {"contact_height_mm", shape.contact_height},
                       {"shooting_x", shape.shooting_x},
                       {"branch", to_string(shape.branch)},
                       {"boundary_residual", shape.boundary_residual},
                       {"solver_iters", shape.solver_iters}};
  // Nothing is written unless every solve above succeeded.
  if (!a.out.empty()) {
    io::write_atomic(fs::path(a.out) / "profile.csv", profile_csv(shape));
    write_json(fs::path(a.out) / "summary.json", report);
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

struct SweepArgs {
  std::string design;
  int row = 1;
  std::vector<double> heights, pressures;
  std::string out;
};

int cmd_sweep(const RunConfig& cfg, const SweepArgs& a) {
  const MembraneDesign d = pick_design(a.design, a.row);
  const auto& hs = a.heights.empty() ? cfg.data.heights_mm : a.heights;
  const auto& ps = a.pressures.empty() ? cfg.data.pressures_kpa : a.pressures;
  std::vector<SweepRow> rows;
  std::size_t ok = 0;
  for (const auto& pt : sweep(d, cfg.material, hs, ps, cfg.solver)) {
    rows.push_back({design_key(d), pt.h_mm, pt.p_kpa, pt.force_n, pt.success, pt.solver_iters});
    ok += pt.success ? 1 : 0;
  }
  const std::string csv = sweep_csv(rows);
  if (a.out.empty()) std::cout << csv;
  else io::write_atomic(a.out, csv);
  std::cerr << ok << "/" << rows.size() << " grid points solved\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gen-data / train / eval

struct GenArgs {
  std::string designs;
  std::vector<int> rows;
  std::size_t random = 0;
  std::string out;
};

int cmd_gen_data(const RunConfig& cfg, const GenArgs& a) {
  std::vector<MembraneDesign> designs;
  if (!a.designs.empty()) designs = read_designs(a.designs);
  for (int r : a.rows) designs.push_back(pick_design("", r));
  if (a.random > 0) {
    const auto extra = random_designs(cfg.box, a.random, cfg.seed);
    designs.insert(designs.end(), extra.begin(), extra.end());
  }
  if (designs.empty()) throw ConfigError("no designs: use --designs, --rows or --random");
  const Dataset ds = generate_synthetic(designs, cfg.data.heights_mm, cfg.data.pressures_kpa, synthetic_options(cfg));
  save(ds, a.out);
  std::cout << json{{"designs", designs.size()}, {"records", ds.size()}, {"rows", ds.row_count()}, {"out", a.out}}.dump(2)
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, val, out, curve;
};

int cmd_train(const RunConfig& cfg, const TrainArgs& a) {
  const Dataset train = load(a.data);
  const Dataset val = a.val.empty() ? Dataset{} : load(a.val);
  const nn::TrainResult r = train_surrogate(cfg, train, val);
  write_json(a.out, nn::model_to_json(r.model));
  if (!a.curve.empty()) {
    std::string csv = "epoch,train_loss,val_rmse\n";
    for (std::size_t i = 0; i < r.train_loss.size(); ++i) {
      csv += std::to_string(i + 1) + ',' + fmt(r.train_loss[i]) + ',' + fmt(r.val_rmse[i]) + '\n';
    }
    io::write_atomic(a.curve, csv);
  }
  std::cout << json{{"epochs", r.train_loss.size()},
                    {"best_epoch", r.best_epoch},
                    {"initial_val_rmse_n", r.initial_val_rmse},
                    {"best_val_rmse_n", r.best_val_rmse},
                    {"out", a.out}}
                   .dump(2)
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, data, baseline_train, out;
};

int cmd_eval(const RunConfig&, const EvalArgs& a) {
  const Dataset ds = load(a.data);
  json report = {{"data", a.data}, {"rows", ds.row_count()}};
  const json mj = read_json(a.model);
  if (mj.value("format", "") == "membrane_forge.surrogate") {
    report["rmse_n"] = nn::evaluate_rmse(nn::model_from_json(mj), ds);
  } else {
    const RpnEnsemble e = ensemble_from_json(mj.value("format", "") == "membrane_forge.al_session" ? mj.at("ensemble") : mj);
    report["rmse_n"] = ensemble_rmse(e, ds);
    report["mean_grid_sd_n"] = mean_grid_sd(e, ds.designs(), AcquisitionGrid{});
  }
  if (!a.baseline_train.empty()) report["curvefit_rmse_n"] = curvefit_baseline(load(a.baseline_train), ds);
  emit(report, a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// Active-learning session

struct AlArgs {
  std::string session, data, records, oracle = "sim";
};

struct Session {
  fs::path dir;
  fs::path state() const { return dir / "state.json"; }
  fs::path base() const { return dir / "base.jsonl"; }
  fs::path proposals() const { return dir / "proposals.jsonl"; }
  fs::path acquired() const { return dir / "acquired.jsonl"; }

  Dataset dataset() const {
    Dataset ds = load(base());
    if (fs::exists(acquired())) ds.append(load(acquired()));
    return ds;
  }
};

json session_state(const RpnEnsemble& e, std::size_t iteration, double sd) {
  return {{"format", "membrane_forge.al_session"}, {"iteration", iteration}, {"mean_grid_sd_n", sd}, {"ensemble", ensemble_to_json(e)}};
}

/// Loads the session, creating it from --data on first use.
std::pair<RpnEnsemble, std::size_t> open_session(const RunConfig& cfg, const Session& s, const std::string& data) {
  if (fs::exists(s.state())) {
    const json j = read_json(s.state());
    if (j.value("format", "") != "membrane_forge.al_session") throw SchemaError(s.state().string() + ": not a session");
    return {ensemble_from_json(j.at("ensemble")), j.at("iteration").get<std::size_t>()};
  }
  if (data.empty()) throw ConfigError("new session: --data with the initial dataset is required");
  const Dataset ds = load(data);
  save(ds, s.base());
  RpnEnsemble e = train_new_ensemble(cfg, ds);
  write_json(s.state(), session_state(e, 0, mean_grid_sd(e, ds.designs(), cfg.al.grid)));
  return {std::move(e), 0};
}

std::vector<MembraneDesign> propose(const RunConfig& cfg, const Session& s, const RpnEnsemble& e, json& report) {
  AcquisitionOptions opt;
  opt.n_starts = cfg.al.n_starts;
  opt.seed = cfg.seed;
  const AcquisitionResult acq = maximize_acquisition(e, cfg.box, cfg.al.grid, cfg.al.q, opt);
  std::string lines;
  json designs = json::array();
  for (const auto& d : acq.designs) {
    lines += json{{"design", design_to_json(d)}}.dump() + "\n";
    designs.push_back(design_to_json(d));
  }
  io::write_atomic(s.proposals(), lines);
  report["proposals"] = designs;
  report["alpha"] = acq.alpha;
  report["degenerate"] = acq.degenerate;
  return acq.designs;
}

json ingest(const RunConfig& cfg, const Session& s, RpnEnsemble e, std::size_t iteration, const Dataset& fresh) {
  Dataset acquired = fs::exists(s.acquired()) ? load(s.acquired()) : Dataset{};
  acquired.append(fresh);
  Dataset all = load(s.base());
  all.append(acquired);
  EnsembleTrainOptions opt;
  opt.train = cfg.training;
  opt.train.seed = mix_seed(cfg.seed, iteration + 1);
  e = train_ensemble(std::move(e), all, Dataset{}, opt);
  const double sd = mean_grid_sd(e, all.designs(), cfg.al.grid);
  save(acquired, s.acquired());
  write_json(s.state(), session_state(e, iteration + 1, sd));
  fs::remove(s.proposals());
  return {{"iteration", iteration + 1}, {"records_added", fresh.size()}, {"dataset_records", all.size()}, {"mean_grid_sd_n", sd}};
}

int cmd_al_propose(const RunConfig& cfg, const AlArgs& a) {
  const Session s{a.session};
  fs::create_directories(s.dir);
  const auto [e, it] = open_session(cfg, s, a.data);
  json report = {{"iteration", it}};
  propose(cfg, s, e, report);
  emit(report, "");
  return 0;
}

int cmd_al_ingest(const RunConfig& cfg, const AlArgs& a) {
  const Session s{a.session};
  if (!fs::exists(s.state())) throw ConfigError("no session at " + s.dir.string());
  auto [e, it] = open_session(cfg, s, "");
  const Dataset fresh = load(a.records);
  if (fresh.empty()) throw EmptyDataset(a.records + " has no records");
  emit(ingest(cfg, s, std::move(e), it, fresh), "");
  return 0;
}

int cmd_al_step(const RunConfig& cfg, const AlArgs& a) {
  if (a.oracle != "sim") throw ConfigError("only --oracle sim is available");
  const Session s{a.session};
  fs::create_directories(s.dir);
  auto [e, it] = open_session(cfg, s, a.data);
  json report = {{"iteration", it}};
  const auto designs = propose(cfg, s, e, report);
  const DesignOracle oracle = simulator_oracle(cfg);
  Dataset fresh;
  json failures = json::array();
  for (const auto& d : designs) {
    try {
      for (auto& r : oracle(d)) fresh.add(std::move(r));
    } catch (const Error& err) {
      failures.push_back(design_key(d) + ": " + err.what());
    }
  }
  json out = ingest(cfg, s, std::move(e), it, fresh);
  out["proposals"] = report["proposals"];
  out["alpha"] = report["alpha"];
  out["oracle_failures"] = failures;
  emit(out, "");
  return 0;
}

// ---------------------------------------------------------------------------
// design

struct DesignArgs {
  std::string model, design, targets, out;
  int row = 1;
  std::vector<double> masses, heights;
  std::size_t starts = 0;
  std::optional<std::uint64_t> seed;
  std::string reference = "sim";
  double p_step = 0.0;
};

int cmd_design_waypoints(const RunConfig& cfg, const DesignArgs& a) {
  const ForceModel model = load_force_model(a.model);
  const MembraneDesign d = pick_design(a.design, a.row);
  const auto masses = a.masses.empty() ? cfg.design.masses_kg : a.masses;
  const auto heights = a.heights.empty() ? cfg.design.waypoint_heights_mm : a.heights;
  const double step = a.p_step > 0.0 ? a.p_step : cfg.design.pressure_step_kpa;
  const auto pressures = pressure_sweep(10.0, step);
  LiftOptions lift;
  lift.h_max = cfg.design.targets.h_max;
  std::vector<Trajectory> predicted, reference;
  std::vector<std::pair<Trajectory, std::vector<Waypoint>>> sets;
  json per_mass = json::array();
  for (double m : masses) {
    predicted.push_back(lift_trajectory(model, d, m, pressures, lift));
    json entry = {{"mass_kg", m}};
    if (a.reference == "sim") {
      reference.push_back(lift_trajectory(saturating_simulator(cfg), d, m, pressures, lift));
      const auto wps = waypoints_at_heights(reference.back(), heights);
      json wj = json::array();
      for (const auto& w : wps) wj.push_back({w.p_kpa, w.h_mm});
      entry["waypoints"] = wj;
      if (!wps.empty()) {
        entry["scaled_rmse"] = trajectory_rmse(predicted.back(), wps);
        sets.emplace_back(predicted.back(), wps);
      }
    }
    per_mass.push_back(entry);
  }
  json report = {{"design", design_to_json(d)}, {"masses", per_mass}};
  if (!sets.empty()) report["scaled_rmse"] = trajectory_rmse(sets);
  if (!a.out.empty()) {
    io::write_atomic(fs::path(a.out) / "predicted.csv", trajectories_csv(predicted));
    if (!reference.empty()) io::write_atomic(fs::path(a.out) / "reference.csv", trajectories_csv(reference));
    write_json(fs::path(a.out) / "report.json", report);
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_design_optimize(const RunConfig& cfg, const DesignArgs& a) {
  const ForceModel model = load_force_model(a.model);
  const LiftTargets tg = a.targets.empty() ? cfg.design.targets : targets_from_json(read_json(a.targets));
  DesignOptOptions opt;
  opt.n_starts = a.starts > 0 ? a.starts : cfg.design.n_starts;
  opt.seed = a.seed.value_or(cfg.seed);
  const DesignOptResult r = optimize_design(model, tg, lift_box(cfg), opt);
  const double step = a.p_step > 0.0 ? a.p_step : cfg.design.pressure_step_kpa;
  LiftOptions lift;
  lift.h_max = tg.h_max;
  std::vector<Trajectory> trajs;
  for (double f : tg.forces_n) trajs.push_back(lift_trajectory(model, r.design, f / kGravity, pressure_sweep(tg.p_max, step), lift));
  const HeightScore hs = height_score(trajs, tg);
  const json report = {{"design", design_to_json(r.design)},
                       {"posterior", posterior_json(r.eval)},
                       {"starts", opt.n_starts},
                       {"starts_failed", r.starts_failed},
                       {"seed", opt.seed},
                       {"targets", targets_to_json(tg)},
                       {"height_score_mm", hs.score},
                       {"score_heights_mm", hs.heights},
                       {"score_unreachable", hs.unreachable}};
  if (!a.out.empty()) {
    io::write_atomic(fs::path(a.out) / "trajectories.csv", trajectories_csv(trajs));
    write_json(fs::path(a.out) / "report.json", report);
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pipeline

int cmd_pipeline(const RunConfig& cfg, const std::string& out) {
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(name) + ": " + e.what(), e.exit_code());
    }
  };
  const auto designs = random_designs(cfg.box, cfg.pipeline.n_designs, cfg.seed);
  const Dataset ds = stage("data", [&] {
    return generate_synthetic(designs, cfg.data.heights_mm, cfg.data.pressures_kpa, synthetic_options(cfg));
  });
  double f_max = 0.0;
  for (const auto& r : ds.records())
    for (const auto& s : r.samples) f_max = std::max(f_max, s.f_n);

  json folds = json::array();
  stage("kfold", [&] {
    std::size_t i = 0;
    for (const auto& split : kfold_by_membrane(ds, cfg.pipeline.k_folds, cfg.seed)) {
      const nn::TrainResult tr = train_surrogate(cfg, split.train, Dataset{});
      json fj = {{"fold", i++},
                 {"test_designs", split.test_keys.size()},
                 {"surrogate_rmse_n", nn::evaluate_rmse(tr.model, split.test)}};
      try {
        fj["curvefit_rmse_n"] = curvefit_baseline(split.train, split.test);
      } catch (const RankDeficient& e) {
        fj["curvefit_rmse_n"] = nullptr;
        fj["curvefit_error"] = e.what();
      }
      folds.push_back(fj);
    }
    return 0;
  });

  // Active learning from half of the membranes, the rest held out.
  json al_curve = json::array();
  const auto keys = ds.design_keys();
  std::set<std::string> seed_keys(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>((keys.size() + 1) / 2));
  std::set<std::string> held_keys(keys.begin() + static_cast<std::ptrdiff_t>((keys.size() + 1) / 2), keys.end());
  Dataset al_ds = ds.subset(seed_keys);
  const Dataset held = ds.subset(held_keys);
  const std::vector<MembraneDesign> all_designs = ds.designs();
  stage("active-learning", [&] {
    RpnEnsemble e = train_new_ensemble(cfg, al_ds);
    auto record = [&](std::size_t it, double alpha) {
      json p = {{"iteration", it}, {"membranes", al_ds.design_keys().size()},
                {"mean_grid_sd_n", mean_grid_sd(e, all_designs, cfg.al.grid)}, {"alpha", alpha}};
      p["held_out_rmse_n"] = held.row_count() > 0 ? json(ensemble_rmse(e, held)) : json(nullptr);
      al_curve.push_back(p);
    };
    record(0, 0.0);
    AlStepOptions opt;
    opt.q = cfg.al.q;
    opt.acquisition.n_starts = cfg.al.n_starts;
    opt.training.train = cfg.training;
    const DesignOracle oracle = simulator_oracle(cfg);
    for (std::size_t it = 1; it <= cfg.al.iterations; ++it) {
      opt.acquisition.seed = mix_seed(cfg.seed, it);
      opt.training.train.seed = mix_seed(cfg.seed, 1000 + it);
      AlStepResult r = al_iteration(e, cfg.box, cfg.al.grid, oracle, al_ds, opt);
      al_ds = std::move(r.dataset);
      e = std::move(r.ensemble);
      record(it, r.alpha);
    }
    return 0;
  });

  json design_report;
  stage("design", [&] {
    const nn::TrainResult tr = train_surrogate(cfg, ds, Dataset{});
    DesignOptOptions opt;
    opt.n_starts = cfg.design.n_starts;
    opt.seed = cfg.seed;
    const LiftTargets& tg = cfg.design.targets;
    const DesignOptResult r = optimize_design(surrogate_force_model(tr.model), tg, lift_box(cfg), opt);
    design_report = {{"design", design_to_json(r.design)}, {"surrogate", posterior_json(r.eval)}};
    try {
      const PosteriorEval sim = posterior(saturating_simulator(cfg), r.design, tg, false);
      design_report["simulator"] = posterior_json(sim);
      double score = 0.0;
      for (std::size_t i = 0; i < sim.heights.size(); ++i) score += sim.heights[i];
      design_report["simulator_height_score_mm"] = score;
    } catch (const Error& e) {
      design_report["simulator"] = nullptr;
      design_report["simulator_error"] = e.what();
    }
    return 0;
  });

  const json report = {{"format", "membrane_forge.pipeline_report"},
                       {"version", 1},
                       {"config", config_to_json(cfg)},
                       {"data", {{"designs", designs.size()}, {"records", ds.size()}, {"rows", ds.row_count()}, {"max_force_n", f_max}}},
                       {"folds", folds},
                       {"active_learning", al_curve},
                       {"optimized", design_report}};
  emit(report, out);
  return 0;
}

// ---------------------------------------------------------------------------
// plot

struct PlotArgs {
  std::string data, model, trajectories, out;
};

std::string safe_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "design_%02zu.svg", i);
  return buf;
}

int cmd_plot(const RunConfig&, const PlotArgs& a) {
  if (a.data.empty() == a.trajectories.empty()) throw ConfigError("give exactly one of --data and --trajectories");
  if (!a.data.empty()) {
    const Dataset ds = load(a.data);
    std::optional<nn::SurrogateModel> model;
    if (!a.model.empty()) model = nn::model_from_json(read_json(a.model));
    std::size_t i = 0;
    json index = json::array();
    for (const auto& key : ds.design_keys()) {
      std::vector<plot::Series> series;
      for (const auto& r : ds.records()) {
        if (design_key(r.design) != key) continue;
        plot::Series s{"h=" + fmt(r.height_mm) + " mm", {}, {}, model.has_value()};
        for (const auto& pf : r.samples) {
          s.x.push_back(pf.p_kpa);
          s.y.push_back(pf.f_n);
        }
        series.push_back(s);
        if (model) {
          plot::Series m{"model h=" + fmt(r.height_mm), {}, {}, false};
          for (const auto& pf : r.samples) {
            m.x.push_back(pf.p_kpa);
            m.y.push_back(nn::predict_force(*model, r.design, r.height_mm, pf.p_kpa));
          }
          series.push_back(m);
        }
      }
      const std::string name = safe_name(i++);
      io::write_atomic(fs::path(a.out) / name,
                       plot::line_chart(series, {key, "pressure [kPa]", "force [N]"}));
      index.push_back({{"file", name}, {"design", key}});
    }
    write_json(fs::path(a.out) / "index.json", index);
    return 0;
  }
  // Trajectory CSV as written by the design commands.
  std::istringstream in(io::read_file(a.trajectories));
  std::string line;
  std::getline(in, line);
  std::map<double, plot::Series> by_mass;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    double m, p, h, f;
    int lifted;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%d", &m, &p, &h, &f, &lifted) != 5) {
      throw ParseError(a.trajectories + ":" + std::to_string(n) + ": malformed row");
    }
    auto& s = by_mass[m];
    s.name = fmt(m) + " kg";
    s.x.push_back(p);
    s.y.push_back(h);
  }
  std::vector<plot::Series> series;
  for (auto& [m, s] : by_mass) series.push_back(std::move(s));
  io::write_atomic(a.out, plot::line_chart(series, {"lift trajectories", "pressure [kPa]", "height [mm]"}));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"membrane_forge: inflatable membrane simulation, surrogate training, active learning and design"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "run config JSON")->check(CLI::ExistingFile);

  std::function<int(const RunConfig&)> action;

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "solve one membrane shape");
  c_sim->add_option("--design", sim.design, "design JSON file");
  c_sim->add_option("--row", sim.row, "reference design row (1-7)");
  c_sim->add_option("--p-kpa", sim.p_kpa, "pressure [kPa]")->required();
  auto* opt_h = c_sim->add_option("--h-mm", sim.h_mm, "plate height [mm]");
  auto* opt_f = c_sim->add_option("--force-n", sim.force_n, "plate force [N]");
  opt_h->excludes(opt_f);
  c_sim->add_option("--out", sim.out, "directory for profile.csv and summary.json");
  c_sim->callback([&] { action = [&](const RunConfig& c) { return cmd_simulate(c, sim); }; });

  SweepArgs sw;
  auto* c_sw = app.add_subcommand("sweep", "force over a height x pressure grid (CSV)");
  c_sw->add_option("--design", sw.design, "design JSON file");
  c_sw->add_option("--row", sw.row, "reference design row (1-7)");
  c_sw->add_option("--heights", sw.heights, "heights [mm]")->delimiter(',');
  c_sw->add_option("--pressures", sw.pressures, "pressures [kPa]")->delimiter(',');
  c_sw->add_option("--out", sw.out, "CSV path (stdout when absent)");
  c_sw->callback([&] { action = [&](const RunConfig& c) { return cmd_sweep(c, sw); }; });

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "synthetic dataset from the simulator");
  c_gen->add_option("--designs", gen.designs, "designs as a JSON array or one per line");
  c_gen->add_option("--rows", gen.rows, "reference design rows")->delimiter(',');
  c_gen->add_option("--random", gen.random, "number of seeded random designs from the design box");
  c_gen->add_option("--out", gen.out, "JSONL output")->required();
  c_gen->callback([&] { action = [&](const RunConfig& c) { return cmd_gen_data(c, gen); }; });

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "train a surrogate");
  c_tr->add_option("--data", tr.data, "training JSONL")->required();
  c_tr->add_option("--val", tr.val, "validation JSONL");
  c_tr->add_option("--out", tr.out, "model checkpoint")->required();
  c_tr->add_option("--curve", tr.curve, "training curve CSV");
  c_tr->callback([&] { action = [&](const RunConfig& c) { return cmd_train(c, tr); }; });

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "test RMSE of a model or ensemble");
  c_ev->add_option("--model", ev.model, "checkpoint")->required();
  c_ev->add_option("--data", ev.data, "test JSONL")->required();
  c_ev->add_option("--baseline-train", ev.baseline_train, "also fit the curve-fit baseline on this JSONL");
  c_ev->add_option("--out", ev.out, "report JSON");
  c_ev->callback([&] { action = [&](const RunConfig& c) { return cmd_eval(c, ev); }; });

  AlArgs al;
  auto* c_al = app.add_subcommand("al", "active-learning session");
  c_al->require_subcommand(1);
  auto* c_prop = c_al->add_subcommand("propose", "write proposals.jsonl");
  auto* c_ing = c_al->add_subcommand("ingest", "add oracle records and retrain");
  auto* c_step = c_al->add_subcommand("step", "propose, query the oracle, ingest");
  for (auto* c : {c_prop, c_ing, c_step}) c->add_option("--session", al.session, "session directory")->required();
  for (auto* c : {c_prop, c_step}) c->add_option("--data", al.data, "initial dataset for a new session");
  c_ing->add_option("--records", al.records, "JSONL records for the proposals")->required();
  c_step->add_option("--oracle", al.oracle, "oracle (sim)");
  c_prop->callback([&] { action = [&](const RunConfig& c) { return cmd_al_propose(c, al); }; });
  c_ing->callback([&] { action = [&](const RunConfig& c) { return cmd_al_ingest(c, al); }; });
  c_step->callback([&] { action = [&](const RunConfig& c) { return cmd_al_step(c, al); }; });

  DesignArgs ds;
  auto* c_d = app.add_subcommand("design", "lift trajectories and design optimization");
  c_d->require_subcommand(1);
  auto* c_wp = c_d->add_subcommand("waypoints", "trajectories and scaled waypoint RMSE");
  auto* c_opt = c_d->add_subcommand("optimize", "multistart posterior ascent");
  for (auto* c : {c_wp, c_opt}) {
    c->add_option("--model", ds.model, "surrogate, ensemble or session checkpoint")->required();
    c->add_option("--out", ds.out, "output directory");
    c->add_option("--p-step", ds.p_step, "trajectory pressure step [kPa]");
  }
  c_wp->add_option("--design", ds.design, "design JSON file");
  c_wp->add_option("--row", ds.row, "reference design row (1-7)");
  c_wp->add_option("--masses", ds.masses, "masses [kg]")->delimiter(',');
  c_wp->add_option("--heights", ds.heights, "waypoint heights [mm]")->delimiter(',');
  c_wp->add_option("--reference", ds.reference, "reference trajectories: sim or none")->check(CLI::IsMember({"sim", "none"}));
  c_opt->add_option("--targets", ds.targets, "targets JSON");
  c_opt->add_option("--starts", ds.starts, "number of starts");
  c_opt->add_option("--seed", ds.seed, "seed");
  c_wp->callback([&] { action = [&](const RunConfig& c) { return cmd_design_waypoints(c, ds); }; });
  c_opt->callback([&] { action = [&](const RunConfig& c) { return cmd_design_optimize(c, ds); }; });

  std::string pipe_out;
  auto* c_pipe = app.add_subcommand("pipeline", "synthetic end-to-end benchmark");
  c_pipe->add_option("--out", pipe_out, "report JSON");
  c_pipe->callback([&] { action = [&](const RunConfig& c) { return cmd_pipeline(c, pipe_out); }; });

  PlotArgs pl;
  auto* c_plot = app.add_subcommand("plot", "SVG charts");
  c_plot->add_option("--data", pl.data, "dataset JSONL: force-pressure chart per design");
  c_plot->add_option("--model", pl.model, "overlay surrogate predictions");
  c_plot->add_option("--trajectories", pl.trajectories, "trajectory CSV: height-pressure overlay");
  c_plot->add_option("--out", pl.out, "output directory (or SVG path for trajectories)")->required();
  c_plot->callback([&] { action = [&](const RunConfig& c) { return cmd_plot(c, pl); }; });

  // Set last: subcommands copy the parent's footer when they are created.
  app.footer("Config keys (section.key = default):\n" + config_reference() +
             "\nMEMBRANE_FORGE_SEED overrides the seed.\n"
             "Exit codes: 0 ok, 1 unexpected, 2 config, 3 solver, 4 data, 5 training, 6 optimization, 7 no equilibrium.");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorKind::config);
  }
  try {
    const RunConfig cfg = load_config(config_path);
    return action(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
