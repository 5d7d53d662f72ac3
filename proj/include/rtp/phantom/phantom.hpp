#pragma once

// Synthetic pelvic phantom: CT, PTV and OAR masks, ring masks, an analytic
// dose map and the treatment-planning parameters derived from that map.

#include "rtp/phantom/params.hpp"
#include "rtp/phantom/raster.hpp"
#include "rtp/util/rng.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rtp {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Half-open pixel-distance interval [lo, hi).
struct Band {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Band&) const = default;
};

struct PhantomConfig {
  int size = 64;
  double d_p = 50.4;
  std::array<Band, kNumRings> bands{};
  double tau_min = 4.0;
  double tau_max = 8.0;
  double noise_sigma = 0.2;
  double modulation = 0.045;  // cosine amplitude across columns, <= 0.05
  bool noise = true;
  bool modulate = true;
  bool perturb_params = true;

  /// Defaults for grid size h: bands and falloff scale with h / 64.
  static PhantomConfig defaults(int h = 64);

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;

  bool operator==(const PhantomConfig&) const = default;
};

nlohmann::json to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);
/// FNV-1a over the canonical JSON dump of the config.
std::string config_hash(const PhantomConfig& cfg);

struct CaseMeta {
  std::uint64_t seed = 0;
  double tau = 0.0;
  PhantomConfig config;
};

/// OAR order used throughout: Bladder, ST, FHL, FHR.
inline constexpr std::array<Structure, kNumOars> kOarStructures{Structure::Bladder, Structure::ST, Structure::FHL,
                                                                Structure::FHR};

struct Case {
  Image ct;
  Image dose;
  Mask ptv;
  std::array<Mask, kNumOars> oars;
  std::array<Mask, kNumRings> rings;
  ParamTable params;
  CaseMeta meta;

  int size() const { return static_cast<int>(ct.rows()); }
  /// Body region; the CT is strictly positive inside and zero outside.
  Mask body() const;
};

/// Exact Euclidean distance from every pixel to the nearest nonzero pixel
/// of `target` (0 on the target). Throws if the target is empty.
Field distance_to(const Mask& target);

/// ring_i = body pixels outside the PTV whose distance lies in band i.
std::array<Mask, kNumRings> derive_ring_masks(const Mask& ptv, const Mask& body,
                                              const std::array<Band, kNumRings>& bands);

/// Dose in Gy before float storage. `modulation_center` is the column at
/// which the lateral cosine peaks; `noise_rng` may be null when noise is off.
Field analytic_dose(const Mask& ptv, const Mask& body, const PhantomConfig& cfg, double tau,
                    double modulation_center, Rng* noise_rng);

/// Parameters from the stored dose map. Perturbations draw from a stream
/// derived from `seed`, so the table is a pure function of its inputs.
ParamTable derive_gt_params(const Image& dose, const std::array<Mask, kNumRings>& rings,
                            const std::array<Mask, kNumOars>& oars, const PhantomConfig& cfg, std::uint64_t seed);

Case generate_case(const PhantomConfig& cfg, std::uint64_t seed);

/// Files: ct.rtr, dose.rtr, mask_{ptv,bladder,st,fhl,fhr}.rtr,
/// ring1..ring5.rtr, params.csv, meta.json.
void write_case(const Case& c, const std::filesystem::path& dir);
Case read_case(const std::filesystem::path& dir);
/// Reads only the network inputs (CT and structure masks) of a case.
Case read_case_inputs(const std::filesystem::path& dir);

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> test;
};

/// floor(0.8 N) training cases by index, clamped so both sides are nonempty.
DatasetSplit make_split(int n_cases);
std::string case_dir_name(int index);

/// Writes n_cases case directories plus split.json under `out`.
void generate_dataset(const PhantomConfig& cfg, int n_cases, std::uint64_t seed, const std::filesystem::path& out);
DatasetSplit read_split(const std::filesystem::path& dataset);

}  // namespace rtp
