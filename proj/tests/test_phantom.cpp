#include "oracles.hpp"

#include "rtp/dosimetry/dosimetry.hpp"
#include "rtp/phantom/phantom.hpp"
#include "rtp/util/files.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace rtp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rtp_phantom_test_" + name);
  fs::remove_all(p);
  return p;
}

/// min over target pixels of the Euclidean distance, by exhaustive scan.
Field brute_distance(const Mask& target) {
  Field d(target.rows(), target.cols());
  for (int r = 0; r < target.rows(); ++r)
    for (int c = 0; c < target.cols(); ++c) {
      double best = 1e300;
      for (int i = 0; i < target.rows(); ++i)
        for (int j = 0; j < target.cols(); ++j)
          if (target(i, j)) best = std::min(best, std::hypot(double(r - i), double(c - j)));
      d(r, c) = best;
    }
  return d;
}

void expect_cases_equal(const Case& a, const Case& b) {
  EXPECT_TRUE((a.ct == b.ct).all());
  EXPECT_TRUE((a.dose == b.dose).all());
  EXPECT_TRUE((a.ptv == b.ptv).all());
  for (std::size_t i = 0; i < kNumOars; ++i) EXPECT_TRUE((a.oars[i] == b.oars[i]).all());
  for (std::size_t i = 0; i < kNumRings; ++i) EXPECT_TRUE((a.rings[i] == b.rings[i]).all());
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.meta.seed, b.meta.seed);
  EXPECT_EQ(a.meta.tau, b.meta.tau);
  EXPECT_EQ(a.meta.config, b.meta.config);
}

}  // namespace

TEST(Config, DefaultsAreValidAndScale) {
  const auto c = PhantomConfig::defaults();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.bands[4], (Band{11, 16}));
  EXPECT_EQ(PhantomConfig::defaults(128).bands[1], (Band{4, 8}));
  auto bad = c;
  bad.bands[2].lo = 4.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.size = 16;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.d_p = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  auto c = PhantomConfig::defaults(96);
  c.noise = false;
  c.d_p = 45.0;
  EXPECT_EQ(phantom_config_from_json(to_json(c)), c);
  EXPECT_EQ(config_hash(c), config_hash(phantom_config_from_json(to_json(c))));
  EXPECT_NE(config_hash(c), config_hash(PhantomConfig::defaults()));
}

TEST(Distance, MatchesBruteForce) {
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    Mask m = Mask::Zero(13, 17);
    for (int i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < 0.05 ? 1 : 0;
    m(static_cast<int>(rng() % 13), static_cast<int>(rng() % 17)) = 1;
    const Field fast = distance_to(m);
    const Field ref = brute_distance(m);
    EXPECT_LT((fast - ref).abs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(distance_to(Mask::Zero(4, 4)), GeometryError);
}

TEST(Rings, SinglePixelFirstBandIsTheEightNeighbours) {
  Mask ptv = Mask::Zero(9, 9);
  ptv(4, 4) = 1;
  auto bands = PhantomConfig::defaults().bands;
  const auto rings = derive_ring_masks(ptv, Mask::Ones(9, 9), bands);
  const Field d = brute_distance(ptv);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 9; ++c) EXPECT_EQ(rings[0](r, c), (d(r, c) > 0 && d(r, c) <= 1.99) ? 1 : 0);
  EXPECT_EQ((rings[0] != 0).count(), 8);
}

TEST(Rings, VacuousBandsGiveEmptyRings) {
  Mask ptv = Mask::Zero(32, 32);
  ptv(10, 10) = 1;
  std::array<Band, kNumRings> far{};
  for (std::size_t i = 0; i < kNumRings; ++i) far[i] = {100.0 + double(i), 101.0 + double(i)};
  for (const auto& r : derive_ring_masks(ptv, Mask::Ones(32, 32), far)) EXPECT_EQ((r != 0).count(), 0);
  auto cfg = PhantomConfig::defaults(32);
  cfg.bands = far;
  EXPECT_THROW(generate_case(cfg, 1), std::invalid_argument);
}

TEST(Generate, DeterministicInConfigAndSeed) {
  const auto cfg = PhantomConfig::defaults();
  expect_cases_equal(generate_case(cfg, 7), generate_case(cfg, 7));
  EXPECT_FALSE((generate_case(cfg, 7).dose == generate_case(cfg, 8).dose).all());
}

TEST(Generate, StructuresDisjointAndNonempty) {
  for (int size : {32, 64, 96}) {
    const auto cfg = PhantomConfig::defaults(size);
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      const auto c = generate_case(cfg, seed);
      std::vector<const Mask*> s{&c.ptv};
      for (const auto& m : c.oars) s.push_back(&m);
      for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_GT((*s[i] != 0).count(), 0) << "size " << size << " seed " << seed << " structure " << i;
        for (std::size_t j = i + 1; j < s.size(); ++j) EXPECT_EQ(((*s[i] != 0) && (*s[j] != 0)).count(), 0);
      }
      Mask ring_sum = Mask::Zero(size, size);
      for (const auto& r : c.rings) {
        EXPECT_GT((r != 0).count(), 0);
        ring_sum += r;
      }
      EXPECT_LE(ring_sum.maxCoeff(), 1);
      EXPECT_EQ(((ring_sum != 0) && (c.ptv != 0)).count(), 0);
    }
  }
}

TEST(Generate, RingsLieInTheirBands) {
  const auto cfg = PhantomConfig::defaults();
  const auto c = generate_case(cfg, 3);
  const Field d = brute_distance(c.ptv);
  const Mask body = c.body();
  for (std::size_t i = 0; i < kNumRings; ++i)
    for (int r = 0; r < 64; ++r)
      for (int col = 0; col < 64; ++col) {
        const bool expected = body(r, col) && !c.ptv(r, col) && d(r, col) >= cfg.bands[i].lo && d(r, col) < cfg.bands[i].hi;
        ASSERT_EQ(c.rings[i](r, col) != 0, expected) << "ring " << i + 1 << " at " << r << "," << col;
      }
}

TEST(Generate, DoseContract) {
  const auto cfg = PhantomConfig::defaults();
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto c = generate_case(cfg, seed);
    const Mask body = c.body();
    EXPECT_LE(c.dose.maxCoeff(), 1.1 * cfg.d_p);
    EXPECT_GE(c.dose.minCoeff(), 0.0f);
    EXPECT_EQ(((body == 0) && (c.dose != 0.0f)).count(), 0);
    const auto ptv = dosimetry::masked_values(c.dose, c.ptv);
    for (double v : ptv) {
      EXPECT_GE(v, 0.95 * cfg.d_p - 1e-4);
      EXPECT_LE(v, 1.05 * cfg.d_p + 1e-4);
    }
    EXPECT_GE(c.ct.minCoeff(), 0.0f);
    EXPECT_LE(c.ct.maxCoeff(), 1.0f);
  }
}

TEST(AnalyticDose, ExponentialFalloffWithoutNoise) {
  auto cfg = PhantomConfig::defaults(32);
  cfg.noise = false;
  cfg.modulate = false;
  Mask ptv = Mask::Zero(32, 32);
  ptv(5, 5) = 1;
  Mask body = Mask::Ones(32, 32);
  body(31, 31) = 0;
  const Field d = analytic_dose(ptv, body, cfg, 3.0, 0.0, nullptr);
  EXPECT_NEAR(d(5, 8), cfg.d_p / std::exp(1.0), 1e-12);
  EXPECT_NEAR(d(8, 9), cfg.d_p * std::exp(-5.0 / 3.0), 1e-12);
  EXPECT_EQ(d(5, 5), cfg.d_p);
  EXPECT_EQ(d(31, 31), 0.0);
}

TEST(AnalyticDose, ModulationStaysWithinFivePercent) {
  auto cfg = PhantomConfig::defaults(32);
  cfg.noise = false;
  Mask ptv = Mask::Ones(32, 32);
  const Field d = analytic_dose(ptv, Mask::Ones(32, 32), cfg, 5.0, 16.0, nullptr);
  EXPECT_NEAR(d.maxCoeff(), cfg.d_p * (1 + cfg.modulation), 1e-9);
  EXPECT_GE(d.minCoeff(), cfg.d_p * (1 - cfg.modulation) - 1e-9);
}

TEST(GtParams, TablePatternWhenUnperturbed) {
  auto cfg = PhantomConfig::defaults();
  cfg.perturb_params = false;
  const auto c = generate_case(cfg, 11);
  EXPECT_EQ(c.params.at(Structure::Ring1).weight, 20.0);
  EXPECT_FALSE(c.params.at(Structure::Ring1).volume.has_value());
  EXPECT_EQ(c.params.at(Structure::Bladder).weight, 20.0);
  EXPECT_EQ(*c.params.at(Structure::Bladder).volume, 31.0);
  EXPECT_EQ(c.params.at(Structure::ST).weight, 20.0);
  EXPECT_EQ(*c.params.at(Structure::ST).volume, 22.0);
  EXPECT_EQ(c.params.at(Structure::FHL).weight, 10.0);
  EXPECT_EQ(*c.params.at(Structure::FHL).volume, 5.0);
  EXPECT_EQ(*c.params.at(Structure::FHR).volume, 5.0);
}

TEST(GtParams, PerturbationsStayInRange) {
  const auto cfg = PhantomConfig::defaults();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = generate_case(cfg, seed).params;
    for (std::size_t i = 0; i < kNumRings; ++i) {
      EXPECT_GE(p.rows[i].weight, 15.0);
      EXPECT_LE(p.rows[i].weight, 25.0);
    }
    const auto& bl = p.at(Structure::Bladder);
    EXPECT_GE(*bl.volume, std::round(31 * 0.8));
    EXPECT_LE(*bl.volume, std::round(31 * 1.2));
    EXPECT_EQ(std::round(bl.weight), bl.weight);
  }
}

TEST(GtParams, UniformBladderDoseAndRingMaxima) {
  auto cfg = PhantomConfig::defaults();
  cfg.perturb_params = false;
  auto c = generate_case(cfg, 5);
  Image dose = c.dose;
  dose = (c.oars[0] != 0).select(Image::Constant(64, 64, 40.0f), dose);
  const auto p = derive_gt_params(dose, c.rings, c.oars, cfg, 5);
  EXPECT_EQ(p.at(Structure::Bladder).dose, 40.0);
  for (std::size_t i = 0; i < kNumRings; ++i) {
    EXPECT_EQ(p.rows[i].dose, round_dose(oracle::dmax(dose, c.rings[i])));
  }
}

TEST(GtParams, EmptyMaskIsAnError) {
  auto c = generate_case(PhantomConfig::defaults(), 5);
  c.oars[2].setZero();
  EXPECT_THROW(derive_gt_params(c.dose, c.rings, c.oars, c.meta.config, 5), GeometryError);
}

TEST(CaseIo, RoundTripIsExact) {
  const auto dir = scratch("roundtrip");
  const auto c = generate_case(PhantomConfig::defaults(), 21);
  write_case(c, dir);
  expect_cases_equal(read_case(dir), c);
  const auto inputs = read_case_inputs(dir);
  EXPECT_TRUE((inputs.ct == c.ct).all());
  fs::remove_all(dir);
}

TEST(CaseIo, ClosureFromStoredDose) {
  const auto dir = scratch("closure");
  write_case(generate_case(PhantomConfig::defaults(), 99), dir);
  const auto c = read_case(dir);
  EXPECT_EQ(derive_gt_params(c.dose, c.rings, c.oars, c.meta.config, c.meta.seed), c.params);
  fs::remove_all(dir);
}

TEST(CaseIo, TruncatedRasterNamesTheFile) {
  const auto dir = scratch("truncated");
  write_case(generate_case(PhantomConfig::defaults(32), 2), dir);
  auto bytes = read_file(dir / "dose.rtr");
  write_file_atomic(dir / "dose.rtr", bytes.substr(0, bytes.size() - 3));
  try {
    read_case(dir);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("dose.rtr"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(CaseIo, BadMagicAndDimensionMismatch) {
  auto bytes = encode_raster(Mask(Mask::Zero(2, 2)));
  bytes[0] = 'X';
  EXPECT_THROW(decode_mask(bytes, "m"), RasterError);
  const auto dir = scratch("dims");
  write_case(generate_case(PhantomConfig::defaults(32), 2), dir);
  write_raster(dir / "mask_st.rtr", Mask(Mask::Zero(16, 16)));
  EXPECT_THROW(read_case(dir), RasterError);
  fs::remove(dir / "ring3.rtr");
  EXPECT_THROW(read_case(dir), std::runtime_error);
  fs::remove_all(dir);
}

TEST(ParamsCsv, DashVolumeParsesAsAbsent) {
  const std::string text =
      "structure,function,weight_pct,volume_pct,dose_gy\n"
      "Ring1,MaxDose,20,-,48.38\n"
      "Ring2,MaxDose,20,,45.00\n";
  const auto t = parse_params_csv(text);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_FALSE(t.rows[0].volume.has_value());
  EXPECT_FALSE(t.rows[1].volume.has_value());
  EXPECT_EQ(t.rows[0].dose, 48.38);
  EXPECT_THROW(parse_params_csv("bad header\n"), ParamError);
}

TEST(ParamsCsv, RoundTripAndTableSchema) {
  const auto p = generate_case(PhantomConfig::defaults(), 4).params;
  const auto csv = params_to_csv(p);
  EXPECT_EQ(parse_params_csv(csv), p);
  EXPECT_NE(csv.find("\nRing1,MaxDose,"), std::string::npos);
  EXPECT_NE(csv.find("\nFHR,MaxDVH,"), std::string::npos);
}

TEST(Split, EightyTwenty) {
  const auto s = make_split(10);
  EXPECT_EQ(s.train, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(s.test, (std::vector<int>{8, 9}));
  EXPECT_EQ(make_split(2).train.size(), 1u);
  EXPECT_THROW(make_split(1), std::invalid_argument);
}

TEST(Dataset, RerunIsByteIdentical) {
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  const auto cfg = PhantomConfig::defaults(32);
  generate_dataset(cfg, 3, 42, a);
  generate_dataset(cfg, 3, 42, b);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(file_hash(e.path()), file_hash(b / rel)) << rel;
  }
  const auto split = read_split(a);
  EXPECT_EQ(split.train, (std::vector<int>{0, 1}));
  EXPECT_EQ(split.test, (std::vector<int>{2}));
  fs::remove_all(a);
  fs::remove_all(b);
}
