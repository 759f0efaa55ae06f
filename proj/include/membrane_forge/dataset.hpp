#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "membrane_forge/design.hpp"
#include "membrane_forge/errors.hpp"
#include "membrane_forge/io.hpp"
#include "membrane_forge/membrane_sim.hpp"
#include "membrane_forge/rng.hpp"

namespace mforge {

using json = nlohmann::json;

struct PressureForce {
  double p_kpa = 0.0;
  double f_n = 0.0;
  friend bool operator==(const PressureForce&, const PressureForce&) = default;
};

/// One inflation trial: a membrane held under a plate at a fixed height.
struct TrialRecord {
  MembraneDesign design;
  double height_mm = 0.0;
  std::vector<PressureForce> samples;
  json meta = json::object();

  friend bool operator==(const TrialRecord& a, const TrialRecord& b) {
    return a.design == b.design && a.height_mm == b.height_mm && a.samples == b.samples &&
           a.meta == b.meta;
  }
};

inline constexpr double kMaxRecordHeight = 80.0;

/// Empty when the record satisfies the data invariants.
inline std::string record_violation(const TrialRecord& r) {
  if (auto why = design_violation(r.design, /*enforce_bounds=*/false); !why.empty()) {
    return "design: " + why;
  }
  if (!(r.height_mm >= 0.0 && r.height_mm <= kMaxRecordHeight)) {
    return "height " + io::fmt_double(r.height_mm) + " mm outside [0, 80]";
  }
  if (r.samples.empty()) return "sample list is empty";
  for (const PressureForce& s : r.samples) {
    if (!std::isfinite(s.p_kpa) || !std::isfinite(s.f_n)) return "non-finite sample";
    if (s.p_kpa < 0.0) return "negative pressure " + io::fmt_double(s.p_kpa) + " kPa";
  }
  return {};
}

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<TrialRecord> records) {
    for (auto& r : records) add(std::move(r));
  }

  void add(TrialRecord r) {
    if (auto why = record_violation(r); !why.empty()) throw InvariantViolation(why);
    index_[design_key(r.design)].push_back(records_.size());
    records_.push_back(std::move(r));
  }

  const std::vector<TrialRecord>& records() const { return records_; }
  const std::map<std::string, std::vector<std::size_t>>& index() const { return index_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::size_t row_count() const {
    std::size_t n = 0;
    for (const auto& r : records_) n += r.samples.size();
    return n;
  }

  /// Distinct design keys in key order.
  std::vector<std::string> design_keys() const {
    std::vector<std::string> out;
    out.reserve(index_.size());
    for (const auto& [k, _] : index_) out.push_back(k);
    return out;
  }

  /// One representative design per key, in key order.
  std::vector<MembraneDesign> designs() const {
    std::vector<MembraneDesign> out;
    for (const auto& [_, idx] : index_) out.push_back(records_[idx.front()].design);
    return out;
  }

  Dataset subset(const std::set<std::string>& keys) const {
    Dataset out;
    for (const auto& r : records_) {
      if (keys.count(design_key(r.design)) != 0U) out.add(r);
    }
    return out;
  }

  void append(const Dataset& other) {
    for (const auto& r : other.records_) add(r);
  }

  friend bool operator==(const Dataset& a, const Dataset& b) { return a.records_ == b.records_; }

 private:
  std::vector<TrialRecord> records_;
  std::map<std::string, std::vector<std::size_t>> index_;
};

// ---------------------------------------------------------------------------
// JSON Lines

inline json design_to_json(const MembraneDesign& d) {
  json rings = json::array();
  for (const Ring& r : d.rings) {
    rings.push_back({{"center_radius_mm", r.center_radius}, {"half_width_mm", r.half_width}});
  }
  json j = {{"thickness_mm", d.thickness}, {"contact_radius_mm", d.contact_radius},
            {"rings", rings}};
  if (d.outer_radius != limits::kOuterRadius) j["outer_radius_mm"] = d.outer_radius;
  return j;
}

namespace detail {

inline double require_number(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw SchemaError(where + ": missing key '" + key + "'");
  const json& v = j.at(key);
  if (!v.is_number()) throw SchemaError(where + ": '" + key + "' must be a number");
  return v.get<double>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw SchemaError(where + ": unknown key '" + k + "'");
  }
}

}  // namespace detail

inline MembraneDesign design_from_json(const json& j, const std::string& where = "design") {
  if (!j.is_object()) throw SchemaError(where + ": must be an object");
  detail::reject_unknown(j, {"thickness_mm", "contact_radius_mm", "rings", "outer_radius_mm"},
                         where);
  MembraneDesign d;
  d.thickness = detail::require_number(j, "thickness_mm", where);
  d.contact_radius = detail::require_number(j, "contact_radius_mm", where);
  if (j.contains("outer_radius_mm")) {
    d.outer_radius = detail::require_number(j, "outer_radius_mm", where);
  }
  if (!j.contains("rings") || !j.at("rings").is_array()) {
    throw SchemaError(where + ": 'rings' must be an array (empty when ringless)");
  }
  for (const json& r : j.at("rings")) {
    const std::string rw = where + ".rings[]";
    if (!r.is_object()) throw SchemaError(rw + ": must be an object");
    detail::reject_unknown(r, {"center_radius_mm", "half_width_mm"}, rw);
    d.rings.push_back({detail::require_number(r, "center_radius_mm", rw),
                       detail::require_number(r, "half_width_mm", rw)});
  }
  return d;
}

inline json record_to_json(const TrialRecord& r) {
  json samples = json::array();
  for (const auto& s : r.samples) samples.push_back(json::array({s.p_kpa, s.f_n}));
  return {{"design", design_to_json(r.design)},
          {"height_mm", r.height_mm},
          {"samples", samples},
          {"meta", r.meta}};
}

inline TrialRecord record_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": record must be a JSON object");
  detail::reject_unknown(j, {"design", "height_mm", "samples", "meta"}, where);
  if (!j.contains("design")) throw SchemaError(where + ": missing key 'design'");
  TrialRecord r;
  r.design = design_from_json(j.at("design"), where + ": design");
  r.height_mm = detail::require_number(j, "height_mm", where);
  if (!j.contains("samples") || !j.at("samples").is_array()) {
    throw SchemaError(where + ": 'samples' must be an array of [p_kpa, f_n] pairs");
  }
  for (const json& s : j.at("samples")) {
    if (!s.is_array() || s.size() != 2 || !s[0].is_number() || !s[1].is_number()) {
      throw SchemaError(where + ": each sample must be [p_kpa, f_n]");
    }
    r.samples.push_back({s[0].get<double>(), s[1].get<double>()});
  }
  if (j.contains("meta")) {
    if (!j.at("meta").is_object()) throw SchemaError(where + ": 'meta' must be an object");
    r.meta = j.at("meta");
  }
  return r;
}

inline Dataset parse_jsonl(std::istream& in, const std::string& source = "<stream>") {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(where + ": " + e.what());
    }
    TrialRecord r = record_from_json(j, where);
    if (auto why = record_violation(r); !why.empty()) throw InvariantViolation(where + ": " + why);
    ds.add(std::move(r));
  }
  return ds;
}

inline Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset " + path.string());
  return parse_jsonl(in, path.string());
}

inline std::string to_jsonl(const Dataset& ds) {
  std::string out;
  for (const auto& r : ds.records()) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline void save(const Dataset& ds, const std::filesystem::path& path) {
  io::write_atomic(path, to_jsonl(ds));
}

// ---------------------------------------------------------------------------
// CSV

struct SweepRow {
  std::string design_id;
  double h_mm = 0.0;
  double p_kpa = 0.0;
  double f_n = 0.0;
  bool success = true;
  std::size_t solver_iters = 0;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "design_id,h_mm,p_kpa,F_n,success,solver_iters\n";
  for (const auto& r : rows) {
    out += r.design_id + ',' + io::fmt_double(r.h_mm) + ',' + io::fmt_double(r.p_kpa) + ',' +
           (r.success ? io::fmt_double(r.f_n) : std::string("nan")) + ',' +
           (r.success ? "1" : "0") + ',' + std::to_string(r.solver_iters) + '\n';
  }
  return out;
}

inline std::vector<SweepRow> dataset_rows(const Dataset& ds) {
  std::vector<SweepRow> rows;
  for (const auto& r : ds.records()) {
    for (const auto& s : r.samples) {
      rows.push_back({design_key(r.design), r.height_mm, s.p_kpa, s.f_n, true, 0});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
  double noise_sd = 0.0;  ///< [N]
  std::uint64_t seed = 0;
  MaterialSet materials;
  SolverConfig solver;
};

/// One record per (design, height) from the simulator, with Gaussian force
/// noise. Failed solver points are left out; a (design, height) pair with no
/// surviving points yields no record.
inline Dataset generate_synthetic(const std::vector<MembraneDesign>& designs,
                                  const std::vector<double>& heights_mm,
                                  const std::vector<double>& pressures_kpa,
                                  const SyntheticOptions& opt = {}) {
  if (!(opt.noise_sd >= 0.0)) throw InvalidDesign("noise_sd must be non-negative");
  Rng rng(opt.seed);
  Dataset ds;
  std::size_t design_idx = 0;
  for (const MembraneDesign& d : designs) {
    for (double h : heights_mm) {
      TrialRecord rec;
      rec.design = d;
      rec.height_mm = h;
      std::size_t failed = 0;
      for (double pk : pressures_kpa) {
        double f = 0.0;
        try {
          f = force_at_height(d, opt.materials, pk * 1e-3, h, opt.solver);
        } catch (const Error&) {
          ++failed;
          continue;
        }
        // Draw even for zero noise so the stream does not depend on noise_sd.
        const double e = rng.normal();
        rec.samples.push_back({pk, f + opt.noise_sd * e});
      }
      if (rec.samples.empty()) continue;
      rec.meta = {{"source", "synthetic"},
                  {"design_index", design_idx},
                  {"failed_points", failed},
                  {"noise_sd_n", opt.noise_sd},
                  {"seed", opt.seed}};
      ds.add(std::move(rec));
    }
    ++design_idx;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  Dataset train;
  Dataset test;
  std::vector<std::string> test_keys;
};

/// k folds over membranes (design keys), not rows.
inline std::vector<Split> kfold_by_membrane(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  std::vector<std::string> keys = ds.design_keys();
  if (k < 2) throw TooFewDesigns("k-fold needs k >= 2");
  if (keys.size() < k) {
    throw TooFewDesigns("k=" + std::to_string(k) + " folds need at least " + std::to_string(k) +
                        " designs, dataset has " + std::to_string(keys.size()));
  }
  Rng rng(seed);
  rng.shuffle(keys);
  std::vector<Split> out(k);
  std::vector<std::set<std::string>> test_sets(k);
  for (std::size_t i = 0; i < keys.size(); ++i) test_sets[i % k].insert(keys[i]);
  for (std::size_t f = 0; f < k; ++f) {
    std::set<std::string> train_keys;
    for (const auto& key : keys) {
      if (test_sets[f].count(key) == 0U) train_keys.insert(key);
    }
    out[f].train = ds.subset(train_keys);
    out[f].test = ds.subset(test_sets[f]);
    out[f].test_keys.assign(test_sets[f].begin(), test_sets[f].end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct Moments {
  double mean = 0.0;
  double sd = 1.0;
  friend bool operator==(const Moments&, const Moments&) = default;

  double normalize(double v) const { return (v - mean) / sd; }
};

/// Input/output standardization, computed over rows (one row per pressure sample).
struct NormStats {
  Moments ring_center;
  Moments ring_width;
  Moments thickness;
  Moments contact_radius;
  Moments height;
  Moments pressure;  ///< kPa
  Moments force;     ///< N
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

namespace detail {

/// Welford accumulator; deviations below 1e-12 are replaced by 1.
class MomentAccumulator {
 public:
  void add(double v, double w = 1.0) {
    if (w <= 0.0) return;
    if (n_ == 0.0) {
      // w * v / w can be off by an ulp, which would seed m2 with a spurious variance
      n_ = w;
      mean_ = v;
      return;
    }
    n_ += w;
    const double d = v - mean_;
    mean_ += w * d / n_;
    m2_ += w * d * (v - mean_);
  }
  Moments moments() const {
    Moments m;
    if (n_ <= 0.0) return m;
    m.mean = mean_;
    const double var = m2_ / n_;
    const double sd = std::sqrt(std::max(var, 0.0));
    m.sd = sd > 1e-12 * std::max(1.0, std::abs(mean_)) ? sd : 1.0;
    return m;
  }

 private:
  double n_ = 0.0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

}  // namespace detail

inline NormStats compute_norm_stats(const Dataset& ds) {
  if (ds.empty()) throw EmptyDataset("cannot compute normalization statistics of an empty dataset");
  detail::MomentAccumulator rc, rw, t, r0, h, p, f;
  for (const auto& r : ds.records()) {
    const auto w = static_cast<double>(r.samples.size());
    for (const Ring& ring : r.design.rings) {
      rc.add(ring.center_radius, w);
      rw.add(ring.half_width, w);
    }
    t.add(r.design.thickness, w);
    r0.add(r.design.contact_radius, w);
    h.add(r.height_mm, w);
    for (const auto& s : r.samples) {
      p.add(s.p_kpa);
      f.add(s.f_n);
    }
  }
  return {rc.moments(), rw.moments(), t.moments(), r0.moments(),
          h.moments(),  p.moments(),  f.moments()};
}

inline json moments_to_json(const Moments& m) { return {{"mean", m.mean}, {"sd", m.sd}}; }

inline Moments moments_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("sd").get<double>()};
}

inline json norm_to_json(const NormStats& n) {
  return {{"ring_center", moments_to_json(n.ring_center)},
          {"ring_width", moments_to_json(n.ring_width)},
          {"thickness", moments_to_json(n.thickness)},
          {"contact_radius", moments_to_json(n.contact_radius)},
          {"height", moments_to_json(n.height)},
          {"pressure", moments_to_json(n.pressure)},
          {"force", moments_to_json(n.force)}};
}

inline NormStats norm_from_json(const json& j) {
  return {moments_from_json(j.at("ring_center")),    moments_from_json(j.at("ring_width")),
          moments_from_json(j.at("thickness")),      moments_from_json(j.at("contact_radius")),
          moments_from_json(j.at("height")),         moments_from_json(j.at("pressure")),
          moments_from_json(j.at("force"))};
}

}  // namespace mforge
