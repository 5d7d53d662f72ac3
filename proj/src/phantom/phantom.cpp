#include "rtp/phantom/phantom.hpp"

#include "rtp/dosimetry/dosimetry.hpp"
#include "rtp/util/files.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rtp {

namespace {

constexpr double kPi = 3.141592653589793;

// Reference band edges at H = 64.
constexpr std::array<double, kNumRings + 1> kBandEdges{0, 2, 4, 7, 11, 16};

constexpr std::array<double, kNumOars> kOarVolume{31, 22, 5, 5};
constexpr std::array<double, kNumOars> kOarWeight{20, 20, 10, 10};
constexpr double kRingWeight = 20;

void fill_ellipse(Mask& m, double cy, double cx, double ry, double rx, std::uint8_t value = 1) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double dy = (static_cast<double>(r) - cy) / ry;
      const double dx = (static_cast<double>(c) - cx) / rx;
      if (dy * dy + dx * dx <= 1.0) m(r, c) = value;
    }
  }
}

// 1-D squared distance transform: lower envelope of parabolas rooted at the
// finite samples of f (Felzenszwalb and Huttenlocher).
void sq_dt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const auto n = static_cast<std::ptrdiff_t>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::ptrdiff_t> v;
  std::vector<double> z;
  auto key = [&](std::ptrdiff_t q) { return f[static_cast<std::size_t>(q)] + static_cast<double>(q * q); };
  for (std::ptrdiff_t q = 0; q < n; ++q) {
    if (std::isinf(f[static_cast<std::size_t>(q)])) continue;
    double s = -inf;
    while (!v.empty()) {
      s = (key(q) - key(v.back())) / static_cast<double>(2 * (q - v.back()));
      if (s > z.back()) break;
      v.pop_back();
      z.pop_back();
      s = -inf;
    }
    v.push_back(q);
    z.push_back(s);
  }
  d.assign(static_cast<std::size_t>(n), inf);
  std::size_t j = 0;
  for (std::ptrdiff_t q = 0; q < n && !v.empty(); ++q) {
    while (j + 1 < v.size() && z[j + 1] < static_cast<double>(q)) ++j;
    const auto dq = static_cast<double>(q - v[j]);
    d[static_cast<std::size_t>(q)] = dq * dq + f[static_cast<std::size_t>(v[j])];
  }
}

Eigen::Index count(const Mask& m) { return (m != 0).count(); }

std::array<double, 2> centroid(const Mask& m) {
  double sr = 0, sc = 0, n = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(r, c)) {
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        n += 1;
      }
    }
  }
  return {sr / n, sc / n};
}

const std::array<std::string, kNumOars> kOarFiles{"mask_bladder", "mask_st", "mask_fhl", "mask_fhr"};

nlohmann::json meta_to_json(const CaseMeta& m) {
  return {{"seed", m.seed},
          {"size", m.config.size},
          {"d_p", m.config.d_p},
          {"tau", m.tau},
          {"config_hash", config_hash(m.config)},
          {"config", to_json(m.config)}};
}

CaseMeta meta_from_json(const nlohmann::json& j) {
  CaseMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.tau = j.at("tau").get<double>();
  m.config = phantom_config_from_json(j.at("config"));
  return m;
}

}  // namespace

PhantomConfig PhantomConfig::defaults(int h) {
  PhantomConfig cfg;
  cfg.size = h;
  const double s = h / 64.0;
  // Below H = 64 proportional edges would make ring 1 narrower than one
  // pixel step, so every edge keeps at least 1.5 px per band.
  auto edge = [&](std::size_t i) { return std::max(kBandEdges[i] * s, 1.5 * static_cast<double>(i)); };
  for (std::size_t i = 0; i < kNumRings; ++i) cfg.bands[i] = {edge(i), edge(i + 1)};
  cfg.tau_min = 4.0 * s;
  cfg.tau_max = 8.0 * s;
  return cfg;
}

void PhantomConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("phantom config: " + msg); };
  if (size < 32) fail("grid size must be at least 32, got " + std::to_string(size));
  if (size > 512) fail("grid size must be at most 512, got " + std::to_string(size));
  if (!(d_p > 0.0)) fail("prescription dose must be positive");
  if (bands[0].lo != 0.0) fail("first ring band must start at 0");
  for (std::size_t i = 0; i < kNumRings; ++i) {
    if (!(bands[i].hi > bands[i].lo)) fail("ring band " + std::to_string(i + 1) + " is empty");
    if (i > 0 && bands[i].lo != bands[i - 1].hi) fail("ring bands must be contiguous");
  }
  if (!(tau_min > 0.0 && tau_max >= tau_min)) fail("falloff range must satisfy 0 < tau_min <= tau_max");
  if (!(noise_sigma >= 0.0)) fail("noise sigma must be nonnegative");
  if (!(modulation >= 0.0 && modulation <= 0.05)) fail("modulation amplitude must lie in [0, 0.05]");
}

nlohmann::json to_json(const PhantomConfig& cfg) {
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : cfg.bands) bands.push_back({b.lo, b.hi});
  return {{"size", cfg.size},
          {"d_p", cfg.d_p},
          {"bands", bands},
          {"tau_min", cfg.tau_min},
          {"tau_max", cfg.tau_max},
          {"noise_sigma", cfg.noise_sigma},
          {"modulation", cfg.modulation},
          {"noise", cfg.noise},
          {"modulate", cfg.modulate},
          {"perturb_params", cfg.perturb_params}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
  PhantomConfig cfg = PhantomConfig::defaults(j.value("size", 64));
  cfg.d_p = j.value("d_p", cfg.d_p);
  if (j.contains("bands")) {
    const auto& b = j.at("bands");
    if (!b.is_array() || b.size() != kNumRings) throw std::invalid_argument("phantom config: need 5 ring bands");
    for (std::size_t i = 0; i < kNumRings; ++i) cfg.bands[i] = {b[i].at(0).get<double>(), b[i].at(1).get<double>()};
  }
  cfg.tau_min = j.value("tau_min", cfg.tau_min);
  cfg.tau_max = j.value("tau_max", cfg.tau_max);
  cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
  cfg.modulation = j.value("modulation", cfg.modulation);
  cfg.noise = j.value("noise", cfg.noise);
  cfg.modulate = j.value("modulate", cfg.modulate);
  cfg.perturb_params = j.value("perturb_params", cfg.perturb_params);
  cfg.validate();
  return cfg;
}

std::string config_hash(const PhantomConfig& cfg) { return hex64(fnv1a64(to_json(cfg).dump())); }

Mask Case::body() const { return (ct > 0.0f).cast<std::uint8_t>(); }

Field distance_to(const Mask& target) {
  if (count(target) == 0) throw GeometryError("distance_to: target mask is empty");
  const auto rows = target.rows(), cols = target.cols();
  const double inf = std::numeric_limits<double>::infinity();
  Field sq(rows, cols);
  std::vector<double> f, d;
  for (Eigen::Index c = 0; c < cols; ++c) {
    f.assign(static_cast<std::size_t>(rows), inf);
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (target(r, c)) f[static_cast<std::size_t>(r)] = 0.0;
    }
    sq_dt_1d(f, d);
    for (Eigen::Index r = 0; r < rows; ++r) sq(r, c) = d[static_cast<std::size_t>(r)];
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    f.assign(sq.row(r).data(), sq.row(r).data() + cols);
    sq_dt_1d(f, d);
    for (Eigen::Index c = 0; c < cols; ++c) sq(r, c) = d[static_cast<std::size_t>(c)];
  }
  return sq.sqrt();
}

std::array<Mask, kNumRings> derive_ring_masks(const Mask& ptv, const Mask& body,
                                              const std::array<Band, kNumRings>& bands) {
  const Field dist = distance_to(ptv);
  std::array<Mask, kNumRings> rings;
  for (std::size_t i = 0; i < kNumRings; ++i) {
    rings[i] = ((ptv == 0) && (body != 0) && (dist >= bands[i].lo) && (dist < bands[i].hi)).cast<std::uint8_t>();
  }
  return rings;
}

Field analytic_dose(const Mask& ptv, const Mask& body, const PhantomConfig& cfg, double tau,
                    double modulation_center, Rng* noise_rng) {
  if (cfg.noise && !noise_rng) throw std::invalid_argument("analytic_dose: noise enabled without a generator");
  const Field dist = distance_to(ptv);
  const double w = static_cast<double>(ptv.cols());
  Field dose = Field::Zero(ptv.rows(), ptv.cols());
  for (Eigen::Index r = 0; r < dose.rows(); ++r) {
    for (Eigen::Index c = 0; c < dose.cols(); ++c) {
      if (!body(r, c)) continue;
      double m = 1.0;
      if (cfg.modulate) m += cfg.modulation * std::cos(2.0 * kPi * (static_cast<double>(c) - modulation_center) / w);
      double v = cfg.d_p * std::exp(-dist(r, c) / tau) * m;
      if (cfg.noise) v += cfg.noise_sigma * normal(*noise_rng);
      v = std::max(v, 0.0);
      if (ptv(r, c)) v = std::clamp(v, 0.95 * cfg.d_p, 1.05 * cfg.d_p);
      dose(r, c) = std::min(v, 1.1 * cfg.d_p);
    }
  }
  return dose;
}

ParamTable derive_gt_params(const Image& dose, const std::array<Mask, kNumRings>& rings,
                            const std::array<Mask, kNumOars>& oars, const PhantomConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed, "params");
  const bool perturb = cfg.perturb_params;
  ParamTable t;
  for (std::size_t i = 0; i < kNumRings; ++i) {
    if (count(rings[i]) == 0) throw GeometryError("ring " + std::to_string(i + 1) + " is empty");
    ParamRow row;
    row.structure = kAllStructures[i];
    row.function = Function::MaxDose;
    row.weight = perturb ? std::round(kRingWeight + uniform(rng, -5, 5)) : kRingWeight;
    row.dose = round_dose(dosimetry::d_stats(dose, rings[i]).max);
    t.rows.push_back(row);
  }
  for (std::size_t i = 0; i < kNumOars; ++i) {
    if (count(oars[i]) == 0) throw GeometryError(std::string(structure_name(kOarStructures[i])) + " mask is empty");
    ParamRow row;
    row.structure = kOarStructures[i];
    row.function = Function::MaxDVH;
    row.volume = perturb ? std::max(1.0, std::round(kOarVolume[i] * (1.0 + uniform(rng, -0.2, 0.2)))) : kOarVolume[i];
    row.weight = perturb ? std::round(kOarWeight[i] + uniform(rng, -5, 5)) : kOarWeight[i];
    row.dose = round_dose(dosimetry::d_at_volume(dose, oars[i], *row.volume));
    t.rows.push_back(row);
  }
  try {
    t.validate();
  } catch (const ParamError& e) {
    throw GeometryError(std::string("derived parameters are invalid: ") + e.what());
  }
  return t;
}

Case generate_case(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int n = cfg.size;
  const double h = n;
  Rng geo = make_rng(seed, "geometry");
  auto jitter = [&](double a) { return uniform(geo, -a, a); };

  Mask body = Mask::Zero(n, n);
  const double body_cy = h * (0.5 + jitter(0.02)), body_cx = h * (0.5 + jitter(0.02));
  fill_ellipse(body, body_cy, body_cx, h * (0.36 + jitter(0.02)), h * (0.44 + jitter(0.02)));

  // Row 0 is anterior. The PTV sits slightly posterior of the body center.
  const double ptv_cy = body_cy + h * (0.08 + jitter(0.03));
  const double ptv_cx = body_cx + h * jitter(0.03);
  const double ptv_ry = h * uniform(geo, 0.10, 0.13), ptv_rx = h * uniform(geo, 0.12, 0.16);

  const double bl_ry = h * uniform(geo, 0.07, 0.09), bl_rx = h * uniform(geo, 0.10, 0.13);
  const double bl_cy = ptv_cy - ptv_ry - bl_ry + h * 0.01, bl_cx = ptv_cx + h * jitter(0.02);

  const double st_r = h * uniform(geo, 0.05, 0.065);
  const double st_cy = bl_cy - bl_ry - st_r * 0.8, st_cx = bl_cx + h * jitter(0.05);
  const double st_dx = h * uniform(geo, 0.04, 0.06), st_dy = h * jitter(0.02);

  const double fh_r = h * uniform(geo, 0.06, 0.07);
  const double fh_cy = ptv_cy - h * (0.02 + jitter(0.01));
  const double fh_off = h * uniform(geo, 0.27, 0.30);

  // Lower priority first; later fills overwrite.
  Mask label = Mask::Zero(n, n);  // 1 PTV, 2 bladder, 3 ST, 4 FHL, 5 FHR
  fill_ellipse(label, fh_cy, body_cx - fh_off, fh_r, fh_r, 5);
  fill_ellipse(label, fh_cy, body_cx + fh_off, fh_r, fh_r, 4);
  fill_ellipse(label, st_cy, st_cx, st_r, st_r, 3);
  fill_ellipse(label, st_cy + st_dy, st_cx + st_dx, st_r * 0.8, st_r * 0.8, 3);
  fill_ellipse(label, bl_cy, bl_cx, bl_ry, bl_rx, 2);
  fill_ellipse(label, ptv_cy, ptv_cx, ptv_ry, ptv_rx, 1);
  label = (body != 0).select(label, Mask::Zero(n, n));

  Case c;
  c.ptv = (label == 1).cast<std::uint8_t>();
  for (std::size_t i = 0; i < kNumOars; ++i) c.oars[i] = (label == static_cast<std::uint8_t>(i + 2)).cast<std::uint8_t>();
  if (count(c.ptv) == 0) throw GeometryError("PTV is empty at grid size " + std::to_string(n));
  for (std::size_t i = 0; i < kNumOars; ++i) {
    if (count(c.oars[i]) == 0) {
      throw GeometryError(std::string(structure_name(kOarStructures[i])) + " is empty at grid size " +
                          std::to_string(n));
    }
  }
  c.rings = derive_ring_masks(c.ptv, body, cfg.bands);
  for (std::size_t i = 0; i < kNumRings; ++i) {
    if (count(c.rings[i]) == 0) throw GeometryError("ring " + std::to_string(i + 1) + " is empty; check ring bands");
  }

  // CT: soft tissue with smooth texture, organ-specific offsets, dense bone.
  Rng ct_rng = make_rng(seed, "ct");
  struct Wave {
    double fy, fx, phase;
  };
  std::array<Wave, 3> waves;
  for (auto& wv : waves) wv = {uniform(ct_rng, 1, 4), uniform(ct_rng, 1, 4), uniform(ct_rng, 0, 2 * kPi)};
  constexpr std::array<float, 6> kOffset{0.0f, 0.05f, -0.05f, 0.03f, 0.0f, 0.0f};
  c.ct = Image::Zero(n, n);
  for (int r = 0; r < n; ++r) {
    for (int col = 0; col < n; ++col) {
      if (!body(r, col)) continue;
      double v = 0.35;
      for (const auto& wv : waves) v += 0.02 * std::cos(2 * kPi * (wv.fy * r + wv.fx * col) / h + wv.phase);
      v += 0.01 * normal(ct_rng);
      const auto lab = label(r, col);
      if (lab == 4 || lab == 5) v = 0.9 + 0.02 * normal(ct_rng);
      v += kOffset[lab];
      c.ct(r, col) = static_cast<float>(std::clamp(v, 0.05, 1.0));
    }
  }

  Rng dose_rng = make_rng(seed, "dose");
  const double tau = uniform(dose_rng, cfg.tau_min, cfg.tau_max);
  const auto center = centroid(c.ptv);
  c.dose = analytic_dose(c.ptv, body, cfg, tau, center[1], &dose_rng).cast<float>();

  c.meta = {seed, tau, cfg};
  c.params = derive_gt_params(c.dose, c.rings, c.oars, cfg, seed);
  return c;
}

void write_case(const Case& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_raster(dir / "ct.rtr", c.ct);
  write_raster(dir / "dose.rtr", c.dose);
  write_raster(dir / "mask_ptv.rtr", c.ptv);
  for (std::size_t i = 0; i < kNumOars; ++i) write_raster(dir / (kOarFiles[i] + ".rtr"), c.oars[i]);
  for (std::size_t i = 0; i < kNumRings; ++i) write_raster(dir / ("ring" + std::to_string(i + 1) + ".rtr"), c.rings[i]);
  write_params_csv(dir / "params.csv", c.params);
  write_file_atomic(dir / "meta.json", meta_to_json(c.meta).dump(2) + "\n");
}

namespace {

template <typename A>
void check_same_dims(const A& a, const Image& ref, const std::filesystem::path& file) {
  if (a.rows() != ref.rows() || a.cols() != ref.cols()) {
    throw RasterError(file.string() + ": raster is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                      " but ct is " + std::to_string(ref.rows()) + "x" + std::to_string(ref.cols()));
  }
}

}  // namespace

Case read_case_inputs(const std::filesystem::path& dir) {
  Case c;
  c.ct = read_image(dir / "ct.rtr");
  c.ptv = read_mask(dir / "mask_ptv.rtr");
  check_same_dims(c.ptv, c.ct, dir / "mask_ptv.rtr");
  for (std::size_t i = 0; i < kNumOars; ++i) {
    const auto p = dir / (kOarFiles[i] + ".rtr");
    c.oars[i] = read_mask(p);
    check_same_dims(c.oars[i], c.ct, p);
  }
  return c;
}

Case read_case(const std::filesystem::path& dir) {
  Case c = read_case_inputs(dir);
  c.dose = read_image(dir / "dose.rtr");
  check_same_dims(c.dose, c.ct, dir / "dose.rtr");
  for (std::size_t i = 0; i < kNumRings; ++i) {
    const auto p = dir / ("ring" + std::to_string(i + 1) + ".rtr");
    c.rings[i] = read_mask(p);
    check_same_dims(c.rings[i], c.ct, p);
  }
  c.params = read_params_csv(dir / "params.csv");
  c.params.validate();
  const auto meta_path = dir / "meta.json";
  try {
    c.meta = meta_from_json(nlohmann::json::parse(read_file(meta_path)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(meta_path.string() + ": " + e.what());
  }
  return c;
}

DatasetSplit make_split(int n_cases) {
  if (n_cases < 2) throw std::invalid_argument("need at least 2 cases for a train/test split, got " +
                                               std::to_string(n_cases));
  const int n_train = std::clamp(static_cast<int>(std::floor(0.8 * n_cases)), 1, n_cases - 1);
  DatasetSplit s;
  for (int i = 0; i < n_cases; ++i) (i < n_train ? s.train : s.test).push_back(i);
  return s;
}

std::string case_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03d", index);
  return buf;
}

void generate_dataset(const PhantomConfig& cfg, int n_cases, std::uint64_t seed, const std::filesystem::path& out) {
  const auto split = make_split(n_cases);
  for (int i = 0; i < n_cases; ++i) {
    const auto case_seed = derive_seed(seed, "case/" + std::to_string(i));
    write_case(generate_case(cfg, case_seed), out / case_dir_name(i));
  }
  nlohmann::json j{{"n_cases", n_cases}, {"seed", seed}, {"train", split.train}, {"test", split.test}};
  write_file_atomic(out / "split.json", j.dump(2) + "\n");
}

DatasetSplit read_split(const std::filesystem::path& dataset) {
  const auto path = dataset / "split.json";
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    return {j.at("train").get<std::vector<int>>(), j.at("test").get<std::vector<int>>()};
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace rtp
