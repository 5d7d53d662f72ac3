#pragma once

#include "rtp/models/dose_net.hpp"
#include "rtp/models/param_net.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>

namespace rtp {

/// Ablation variants: A no transformer, B no Intra-RM, C no Inter-RM,
/// D neither relation module, E the full model.
enum class Variant { A, B, C, D, E };

Variant parse_variant(std::string_view s);
std::string variant_name(Variant v);

/// Which dose map feeds stage two while it trains.
enum class Stage2Dose { Predicted, GroundTruth };

struct TrainConfig {
  int epochs = 60;
  /// When positive, training stops after exactly this many optimizer steps
  /// (epochs keep cycling) and `epochs` is ignored.
  int steps_stage1 = 0;
  int steps_stage2 = 0;
  int batch = 4;
  double lr_stage1 = 1e-5;
  double lr_stage2 = 1e-4;
  double huber_delta = 0.5;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  bool freeze_stage1 = true;
  Variant variant = Variant::E;
  Stage2Dose stage2_dose = Stage2Dose::Predicted;
  DoseNetConfig dose_net;
  ParamNetConfig param_net;

  void validate() const;

  /// Stage-one-relevant fields only; used to key and verify stage-one checkpoints.
  nlohmann::json stage1_json() const;
};

/// Network configs with the variant's ablations switched off.
DoseNetConfig effective_dose_net(const TrainConfig& cfg);
ParamNetConfig effective_param_net(const TrainConfig& cfg);

nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const DoseNetConfig& cfg);
nlohmann::json to_json(const ParamNetConfig& cfg);

/// Fields absent from `j` keep the values already in `base`; unknown keys
/// are rejected so typos do not pass silently.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
DoseNetConfig dose_net_config_from_json(const nlohmann::json& j, DoseNetConfig base = {});
ParamNetConfig param_net_config_from_json(const nlohmann::json& j, ParamNetConfig base = {});

/// Build identifier baked in at configure time (git describe when available).
std::string build_id();

}  // namespace rtp
