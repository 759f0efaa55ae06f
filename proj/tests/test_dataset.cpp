#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "membrane_forge/dataset.hpp"

using namespace mforge;

namespace {

TrialRecord record(const MembraneDesign& d, double h, std::vector<PressureForce> s) {
  TrialRecord r;
  r.design = d;
  r.height_mm = h;
  r.samples = std::move(s);
  return r;
}

MembraneDesign ringless(double r0, double t) { return MembraneDesign{r0, t, {}}; }

Dataset mixed_fixture() {
  Dataset ds;
  ds.add(record(ringless(25.4, 2.0), 10.0, {{1.0, 3.5}, {2.0, 7.25}}));
  ds.add(record(ringless(25.4, 2.0), 20.0, {{1.5, 0.0}}));
  ds.add(record(MembraneDesign{30.0, 1.5, {{60.0, 5.0}, {45.0, 6.0}}}, 0.0,
                {{0.5, 1.0}, {1.0, 2.0}, {1.5, 3.125}}));
  ds.add(record(MembraneDesign{38.1, 3.0, {{55.0, 7.0}}}, 40.0, {{4.0, 12.0}}));
  return ds;
}

Dataset parse(const std::string& s) {
  std::istringstream in(s);
  return parse_jsonl(in, "mem");
}

}  // namespace

TEST(DesignKey, RingOrderIsCanonical) {
  const MembraneDesign a{30.0, 1.5, {{45.0, 6.0}, {60.0, 5.0}}};
  const MembraneDesign b{30.0, 1.5, {{60.0, 5.0}, {45.0, 6.0}}};
  EXPECT_EQ(design_key(a), design_key(b));
  EXPECT_NE(design_key(a), design_key(ringless(30.0, 1.5)));
}

TEST(Dataset, EveryRecordIndexedOnce) {
  const Dataset ds = mixed_fixture();
  std::multiset<std::size_t> seen;
  for (const auto& [key, idx] : ds.index()) {
    for (std::size_t i : idx) {
      seen.insert(i);
      EXPECT_EQ(design_key(ds.records()[i].design), key);
    }
  }
  EXPECT_EQ(seen.size(), ds.size());
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), ds.size());
  EXPECT_EQ(ds.design_keys().size(), 3u);
}

TEST(Dataset, RejectsInvariantViolations) {
  Dataset ds;
  EXPECT_THROW(ds.add(record(ringless(25.4, 2.0), 10.0, {})), InvariantViolation);
  EXPECT_THROW(ds.add(record(ringless(25.4, 2.0), 81.0, {{1.0, 1.0}})), InvariantViolation);
  EXPECT_THROW(ds.add(record(ringless(25.4, 2.0), -1.0, {{1.0, 1.0}})), InvariantViolation);
  EXPECT_THROW(ds.add(record(ringless(25.4, 2.0), 1.0, {{-0.1, 1.0}})), InvariantViolation);
  EXPECT_NO_THROW(ds.add(record(ringless(25.4, 2.0), 80.0, {{0.0, 0.0}})));
}

TEST(Jsonl, EmptyInputGivesEmptyDataset) {
  EXPECT_TRUE(parse("").empty());
  EXPECT_TRUE(parse("\n  \n").empty());
}

TEST(Jsonl, SingleRecord) {
  const auto ds = parse(
      R"({"design":{"thickness_mm":2,"contact_radius_mm":25.4,"rings":[]},"height_mm":10,"samples":[[1.5,4.0]],"meta":{"source":"experimental"}})"
      "\n");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.index().size(), 1u);
  EXPECT_EQ(ds.records()[0].samples[0].f_n, 4.0);
  EXPECT_EQ(ds.records()[0].meta["source"], "experimental");
}

TEST(Jsonl, NegativePressureNamesTheLine) {
  const std::string good =
      R"({"design":{"thickness_mm":2,"contact_radius_mm":25.4,"rings":[]},"height_mm":10,"samples":[[1.5,4.0]]})";
  const std::string bad =
      R"({"design":{"thickness_mm":2,"contact_radius_mm":25.4,"rings":[]},"height_mm":10,"samples":[[-1.5,4.0]]})";
  try {
    parse(good + "\n" + bad + "\n");
    FAIL() << "expected InvariantViolation";
  } catch (const InvariantViolation& e) {
    EXPECT_NE(std::string(e.what()).find("mem:2"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, SchemaAndParseErrors) {
  EXPECT_THROW(parse("{not json\n"), ParseError);
  EXPECT_THROW(parse(R"({"height_mm":1,"samples":[[1,1]]})"), SchemaError);
  EXPECT_THROW(parse(R"({"design":{"thickness_mm":2,"contact_radius_mm":25.4},"height_mm":1,"samples":[[1,1]]})"),
               SchemaError);
  EXPECT_THROW(
      parse(R"({"design":{"thickness_mm":2,"contact_radius_mm":25.4,"rings":[]},"height_mm":1,"samples":[[1,1,1]]})"),
      SchemaError);
  EXPECT_THROW(
      parse(R"({"design":{"thickness_mm":2,"contact_radius_mm":25.4,"rings":[]},"height_mm":1,"samples":[[1,1]],"extra":0})"),
      SchemaError);
}

TEST(Jsonl, RoundTrip) {
  Dataset ds = mixed_fixture();
  TrialRecord r = record(ringless(31.0, 2.2), 33.3, {{0.1, 1.0 / 3.0}, {7.5, 1e-300}});
  r.meta = {{"source", "synthetic"}, {"trial", 7}};
  ds.add(r);
  EXPECT_EQ(parse(to_jsonl(ds)), ds);
  EXPECT_EQ(to_jsonl(parse(to_jsonl(ds))), to_jsonl(ds));
}

TEST(Csv, MirrorsSweepColumns) {
  const auto csv = sweep_csv(dataset_rows(mixed_fixture()));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "design_id,h_mm,p_kpa,F_n,success,solver_iters");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 7);
}

TEST(Kfold, SixDesignsThreeFoldsOfTwo) {
  Dataset ds;
  for (int i = 0; i < 6; ++i) ds.add(record(ringless(26.0 + i, 2.0), 0.0, {{1.0, 1.0}}));
  const auto folds = kfold_by_membrane(ds, 3, 7);
  ASSERT_EQ(folds.size(), 3u);
  std::set<std::string> all;
  for (const auto& f : folds) {
    EXPECT_EQ(f.test_keys.size(), 2u);
    EXPECT_EQ(f.train.design_keys().size(), 4u);
    for (const auto& k : f.test_keys) {
      EXPECT_TRUE(all.insert(k).second) << "design in two test folds";
      EXPECT_EQ(f.train.index().count(k), 0u);
    }
  }
  EXPECT_EQ(all.size(), 6u);
}

TEST(Kfold, TwentyTwoDesignsElevenFolds) {
  Dataset ds;
  for (int i = 0; i < 22; ++i) ds.add(record(ringless(25.5 + 0.5 * i, 2.0), 0.0, {{1.0, 1.0}}));
  const auto folds = kfold_by_membrane(ds, 11, 1);
  ASSERT_EQ(folds.size(), 11u);
  for (const auto& f : folds) EXPECT_EQ(f.test_keys.size(), 2u);
}

TEST(Kfold, RejectsTooFewDesigns) {
  const Dataset ds = mixed_fixture();
  EXPECT_THROW(kfold_by_membrane(ds, 1, 0), TooFewDesigns);
  EXPECT_THROW(kfold_by_membrane(ds, 4, 0), TooFewDesigns);
}

TEST(Kfold, SeedControlsShuffle) {
  Dataset ds;
  for (int i = 0; i < 12; ++i) ds.add(record(ringless(25.5 + i, 2.0), 0.0, {{1.0, 1.0}}));
  EXPECT_EQ(kfold_by_membrane(ds, 3, 5)[0].test_keys, kfold_by_membrane(ds, 3, 5)[0].test_keys);
  bool differs = false;
  for (std::uint64_t s = 1; s < 6 && !differs; ++s) {
    differs = kfold_by_membrane(ds, 3, 0)[0].test_keys != kfold_by_membrane(ds, 3, s)[0].test_keys;
  }
  EXPECT_TRUE(differs);
}

TEST(NormStats, ConstantInputsGetUnitDeviation) {
  Dataset ds;
  ds.add(record(ringless(25.4, 2.0), 10.0, {{1.0, 2.0}, {2.0, 4.0}}));
  ds.add(record(ringless(30.0, 2.0), 10.0, {{3.0, 6.0}}));
  const auto n = compute_norm_stats(ds);
  EXPECT_EQ(n.height.mean, 10.0);
  EXPECT_EQ(n.height.sd, 1.0);
  EXPECT_EQ(n.thickness.sd, 1.0);
  EXPECT_GT(n.contact_radius.sd, 0.0);
  // no rings anywhere
  EXPECT_EQ(n.ring_center.sd, 1.0);
}

TEST(NormStats, RepeatedAwkwardValueHasUnitDeviation) {
  // 7 * v / 7 != v for this v; the spread must still come out exactly zero.
  const double v = 54.531234861856746;
  Dataset ds;
  const std::vector<PressureForce> s(7, PressureForce{1.0, 2.0});
  for (double h : {0.0, 15.0, 30.0, 45.0}) ds.add(record(MembraneDesign{33.9, 2.7, {{v, 6.2}}}, h, s));
  const auto n = compute_norm_stats(ds);
  EXPECT_EQ(n.ring_center.mean, v);
  EXPECT_EQ(n.ring_center.sd, 1.0);
}

TEST(NormStats, SingleRecordHasUnitDeviations) {
  Dataset ds;
  ds.add(record(MembraneDesign{25.4, 2.0, {{50.0, 5.0}}}, 10.0, {{1.0, 2.0}}));
  const auto n = compute_norm_stats(ds);
  for (const Moments* m : {&n.ring_center, &n.ring_width, &n.thickness, &n.contact_radius, &n.height,
                           &n.pressure, &n.force}) {
    EXPECT_EQ(m->sd, 1.0);
  }
  EXPECT_EQ(n.ring_center.mean, 50.0);
  EXPECT_THROW(compute_norm_stats(Dataset{}), EmptyDataset);
}

TEST(NormStats, MatchesTwoPassOracle) {
  const Dataset ds = mixed_fixture();
  const auto n = compute_norm_stats(ds);
  // Two-pass over expanded rows; absent ring slots contribute nothing.
  auto two_pass = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
  };
  std::vector<double> rc, rw, t, h, p, f;
  for (const auto& r : ds.records()) {
    for (const auto& s : r.samples) {
      for (const auto& ring : r.design.rings) {
        rc.push_back(ring.center_radius);
        rw.push_back(ring.half_width);
      }
      t.push_back(r.design.thickness);
      h.push_back(r.height_mm);
      p.push_back(s.p_kpa);
      f.push_back(s.f_n);
    }
  }
  for (auto [v, m] : {std::pair{rc, n.ring_center}, std::pair{rw, n.ring_width}, std::pair{t, n.thickness},
                      std::pair{h, n.height}, std::pair{p, n.pressure}, std::pair{f, n.force}}) {
    const auto [mean, sd] = two_pass(v);
    EXPECT_NEAR(m.mean, mean, 1e-12 * std::max(1.0, std::abs(mean)));
    EXPECT_NEAR(m.sd, sd, 1e-12 * std::max(1.0, sd));
  }
}

TEST(Synthetic, NoiseFreeEqualsSimulatorAndIsDeterministic) {
  const std::vector<MembraneDesign> designs{ringless(25.4, 2.0), MembraneDesign{30.0, 2.0, {{55.0, 5.0}}}};
  const std::vector<double> heights{0.0, 30.0}, pressures{1.5, 3.0};
  const Dataset a = generate_synthetic(designs, heights, pressures, {0.0, 3, {}, {}});
  const Dataset b = generate_synthetic(designs, heights, pressures, {0.0, 3, {}, {}});
  EXPECT_EQ(to_jsonl(a), to_jsonl(b));
  ASSERT_EQ(a.size(), 4u);
  const MaterialSet mats;
  for (const auto& r : a.records()) {
    for (const auto& s : r.samples) {
      EXPECT_EQ(s.f_n, force_at_height(r.design, mats, s.p_kpa * 1e-3, r.height_mm));
    }
  }
  const Dataset noisy = generate_synthetic(designs, heights, pressures, {0.5, 3, {}, {}});
  const Dataset noisy2 = generate_synthetic(designs, heights, pressures, {0.5, 4, {}, {}});
  EXPECT_EQ(noisy.row_count(), a.row_count());
  EXPECT_NE(to_jsonl(noisy), to_jsonl(a));
  EXPECT_NE(to_jsonl(noisy), to_jsonl(noisy2));
  EXPECT_THROW(generate_synthetic(designs, heights, pressures, {-1.0, 3, {}, {}}), InvalidDesign);
}

TEST(Synthetic, SixRingFreeDesignsFullGridCount) {
  std::vector<MembraneDesign> designs;
  for (double t : {1.5, 2.0, 2.5}) {
    for (double r0 : {25.4, 31.75}) designs.push_back(ringless(r0, t));
  }
  std::vector<double> heights, pressures;
  for (int i = 0; i < 8; ++i) heights.push_back(10.0 * i);
  for (int k = 1; k <= 20; ++k) pressures.push_back(0.375 * k);
  const Dataset ds = generate_synthetic(designs, heights, pressures);
  EXPECT_EQ(ds.size(), 48u);
  EXPECT_EQ(ds.row_count(), 960u);  // no solver failures on this grid
}
