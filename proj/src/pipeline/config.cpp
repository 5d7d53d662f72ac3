#include "rtp/pipeline/config.hpp"

#include <set>
#include <stdexcept>

namespace rtp {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument(where + ": unknown key '" + k + "'");
  }
}

template <std::size_t N>
std::array<Index, N> index_array(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != N) {
    throw std::invalid_argument(what + " needs exactly " + std::to_string(N) + " entries");
  }
  std::array<Index, N> a{};
  for (std::size_t i = 0; i < N; ++i) a[i] = j[i].get<Index>();
  return a;
}

}  // namespace

DoseNetConfig dose_net_config_from_json(const json& j, DoseNetConfig c) {
  reject_unknown(j, {"channels", "decoder_channels", "in_channels", "depth", "heads", "mlp_ratio", "skips", "transformer", "ref_size"},
                 "dose_net config");
  if (j.contains("channels")) c.channels = index_array<4>(j.at("channels"), "dose_net.channels");
  if (j.contains("decoder_channels")) c.decoder_channels = index_array<4>(j.at("decoder_channels"), "dose_net.decoder_channels");
  c.in_channels = j.value("in_channels", c.in_channels);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.skips = j.value("skips", c.skips);
  c.transformer = j.value("transformer", c.transformer);
  c.ref_size = j.value("ref_size", c.ref_size);
  return c;
}

ParamNetConfig param_net_config_from_json(const json& j, ParamNetConfig c) {
  reject_unknown(j, {"in_channels", "features", "grid", "ptv_hidden", "gcn_hidden", "intra", "inter"}, "param_net config");
  c.in_channels = j.value("in_channels", c.in_channels);
  c.features = j.value("features", c.features);
  c.grid = j.value("grid", c.grid);
  c.ptv_hidden = j.value("ptv_hidden", c.ptv_hidden);
  c.gcn_hidden = j.value("gcn_hidden", c.gcn_hidden);
  c.intra = j.value("intra", c.intra);
  c.inter = j.value("inter", c.inter);
  return c;
}

Variant parse_variant(std::string_view s) {
  if (s == "A") return Variant::A;
  if (s == "B") return Variant::B;
  if (s == "C") return Variant::C;
  if (s == "D") return Variant::D;
  if (s == "E") return Variant::E;
  throw std::invalid_argument("unknown ablation variant '" + std::string(s) + "' (expected A, B, C, D or E)");
}

std::string variant_name(Variant v) { return std::string(1, static_cast<char>('A' + static_cast<int>(v))); }

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs < 1) fail("epochs must be at least 1");
  if (steps_stage1 < 0 || steps_stage2 < 0) fail("step counts must be nonnegative");
  if (batch < 1) fail("batch size must be at least 1");
  if (!(lr_stage1 > 0) || !(lr_stage2 > 0)) fail("learning rates must be positive");
  if (!(huber_delta > 0)) fail("huber delta must be positive");
  if (!(lambda >= 0)) fail("lambda must be nonnegative");
  if (!freeze_stage1) fail("stage one is always frozen during stage two; freeze_stage1=false is not supported");
  effective_dose_net(*this).validate();
  effective_param_net(*this).validate();
}

DoseNetConfig effective_dose_net(const TrainConfig& cfg) {
  DoseNetConfig c = cfg.dose_net;
  if (cfg.variant == Variant::A) c.transformer = false;
  return c;
}

ParamNetConfig effective_param_net(const TrainConfig& cfg) {
  ParamNetConfig c = cfg.param_net;
  if (cfg.variant == Variant::B || cfg.variant == Variant::D) c.intra = false;
  if (cfg.variant == Variant::C || cfg.variant == Variant::D) c.inter = false;
  return c;
}

json to_json(const DoseNetConfig& c) {
  return {{"channels", c.channels},   {"decoder_channels", c.decoder_channels},
          {"in_channels", c.in_channels}, {"depth", c.depth},
          {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio},
          {"skips", c.skips},         {"transformer", c.transformer},
          {"ref_size", c.ref_size}};
}

json to_json(const ParamNetConfig& c) {
  return {{"in_channels", c.in_channels}, {"features", c.features},     {"grid", c.grid},
          {"ptv_hidden", c.ptv_hidden},   {"gcn_hidden", c.gcn_hidden}, {"intra", c.intra},
          {"inter", c.inter}};
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"steps_stage1", c.steps_stage1},
          {"steps_stage2", c.steps_stage2},
          {"batch", c.batch},
          {"lr_stage1", c.lr_stage1},
          {"lr_stage2", c.lr_stage2},
          {"huber_delta", c.huber_delta},
          {"lambda", c.lambda},
          {"seed", c.seed},
          {"freeze_stage1", c.freeze_stage1},
          {"variant", variant_name(c.variant)},
          {"stage2_dose", c.stage2_dose == Stage2Dose::Predicted ? "predicted" : "ground_truth"},
          {"dose_net", to_json(c.dose_net)},
          {"param_net", to_json(c.param_net)}};
}

json TrainConfig::stage1_json() const {
  return {{"epochs", steps_stage1 > 0 ? 0 : epochs},
          {"steps_stage1", steps_stage1},
          {"batch", batch},
          {"lr_stage1", lr_stage1},
          {"huber_delta", huber_delta},
          {"seed", seed},
          {"dose_net", to_json(effective_dose_net(*this))}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j, {"epochs", "steps_stage1", "steps_stage2", "batch", "lr_stage1", "lr_stage2", "huber_delta", "lambda",
                     "seed", "freeze_stage1", "variant", "stage2_dose", "dose_net", "param_net"},
                 "train config");
  c.epochs = j.value("epochs", c.epochs);
  c.steps_stage1 = j.value("steps_stage1", c.steps_stage1);
  c.steps_stage2 = j.value("steps_stage2", c.steps_stage2);
  c.batch = j.value("batch", c.batch);
  c.lr_stage1 = j.value("lr_stage1", c.lr_stage1);
  c.lr_stage2 = j.value("lr_stage2", c.lr_stage2);
  c.huber_delta = j.value("huber_delta", c.huber_delta);
  c.lambda = j.value("lambda", c.lambda);
  c.seed = j.value("seed", c.seed);
  c.freeze_stage1 = j.value("freeze_stage1", c.freeze_stage1);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("stage2_dose")) {
    const auto s = j.at("stage2_dose").get<std::string>();
    if (s == "predicted") {
      c.stage2_dose = Stage2Dose::Predicted;
    } else if (s == "ground_truth") {
      c.stage2_dose = Stage2Dose::GroundTruth;
    } else {
      throw std::invalid_argument("train config: stage2_dose must be 'predicted' or 'ground_truth'");
    }
  }
  if (j.contains("dose_net")) c.dose_net = dose_net_config_from_json(j.at("dose_net"), c.dose_net);
  if (j.contains("param_net")) c.param_net = param_net_config_from_json(j.at("param_net"), c.param_net);
  return c;
}

std::string build_id() { return RTP_BUILD_ID; }

}  // namespace rtp
