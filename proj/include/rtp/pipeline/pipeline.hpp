#pragma once

// Two-stage training, evaluation, ablation and prediction over a phantom
// dataset on disk. Every output is a pure function of (dataset, config);
// reports carry no paths or timestamps so reruns are byte-identical.

#include "rtp/dosimetry/dosimetry.hpp"
#include "rtp/models/dose_net.hpp"
#include "rtp/models/param_net.hpp"
#include "rtp/phantom/phantom.hpp"
#include "rtp/pipeline/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace rtp {

namespace fs = std::filesystem;

struct Dataset {
  std::vector<Case> cases;  // index i lives in case_%03d
  DatasetSplit split;

  enum class Part { Train, Test, All };
  std::vector<int> indices(Part part) const;
};

Dataset::Part parse_part(std::string_view s);
std::string part_name(Dataset::Part p);

/// Reads every case listed in split.json; read errors name the case.
Dataset load_dataset(const fs::path& root);

/// Per-epoch mean training loss; each epoch visits every training case once
/// (the last epoch may be cut short by a step budget).
struct LossLog {
  std::vector<double> epoch_mean;
  std::vector<int> epoch_steps;
  int steps = 0;

  double initial() const { return epoch_mean.front(); }
  double final() const { return epoch_mean.back(); }
  std::string csv() const;
};

using EpochHook = std::function<void(int epoch, double mean_loss)>;

/// File names inside a stage output directory.
inline constexpr const char* kStage1Checkpoint = "stage1.rtck";
inline constexpr const char* kStage2Checkpoint = "stage2.rtck";

/// Sidecar JSON written next to a checkpoint: same stem, .json extension.
fs::path sidecar_path(const fs::path& checkpoint);

/// Trains the dose network on the training split; writes stage1.rtck,
/// stage1.json and loss_stage1.csv into `out`.
LossLog train_stage1(const Dataset& data, const TrainConfig& cfg, const fs::path& out, const EpochHook& hook = {});

/// Trains the parameter network with the given stage-one checkpoint frozen;
/// writes stage2.rtck, stage2.json and loss_stage2.csv into `out`. Throws if
/// the stage-one file changed while training.
LossLog train_stage2(const Dataset& data, const fs::path& stage1, const TrainConfig& cfg, const fs::path& out,
                     const EpochHook& hook = {});

DoseNet<float> load_dose_net(const fs::path& checkpoint);
ParamNet<float> load_param_net(const fs::path& checkpoint);

/// Eval-mode dose prediction in units of D_p, one [1, 1, H, W] tensor per case.
std::vector<Tensor<float>> predict_doses(DoseNet<float>& net, const std::vector<const Case*>& cases);

/// Eval-mode parameter prediction in natural units (clamped for reporting).
std::vector<ParamTable> predict_params(ParamNet<float>& net, const std::vector<const Case*>& cases,
                                       const std::vector<Tensor<float>>& doses);

// ---------------------------------------------------------------------------
// Evaluation

/// Structures scored for dose: the PTV then the four OARs.
inline constexpr std::array<const char*, 5> kDoseStructures{"PTV", "Bladder", "ST", "FHL", "FHR"};

struct DoseMetrics {
  double v40 = 0, v50 = 0;  // volume fractions
  double dmean = 0, dmax = 0;
};

struct CaseEval {
  std::string id;
  std::array<DoseMetrics, 5> dose_pred, dose_gt;
  double ci_pred = 0, ci_gt = 0, hi_pred = 0, hi_gt = 0;
  ParamTable params_pred, params_gt;
};

struct EvalReport {
  std::vector<CaseEval> cases;

  nlohmann::json to_json(const nlohmann::json& config) const;
  std::string cases_csv() const;
  std::string params_csv() const;
};

CaseEval evaluate_case(const Case& c, std::string id, const Image& dose_pred_gy, const ParamTable& params_pred);

/// Paired t-tests between two report JSONs over the case ids they share.
nlohmann::json compare_reports(const nlohmann::json& a, const nlohmann::json& b);

struct EvalOptions {
  Dataset::Part part = Dataset::Part::Test;
  std::optional<fs::path> compare;  // earlier eval_report.json
};

/// Predicts with both checkpoints, scores the chosen split and writes
/// eval_report.json, eval_cases.csv and eval_params.csv into `out`.
EvalReport run_eval(const Dataset& data, const fs::path& stage1, const fs::path& stage2, const EvalOptions& opt,
                    const fs::path& out);

/// Trains and evaluates each variant under `out/variant_X`, then writes a
/// one-row-per-variant ablation.csv and ablation.json. Variants whose stage-one
/// configuration matches an earlier one reuse that checkpoint (training is
/// deterministic, so retraining would reproduce it bit for bit).
nlohmann::json run_ablation(const Dataset& data, const TrainConfig& base, const std::vector<Variant>& variants,
                            Dataset::Part part, const fs::path& out, const EpochHook& hook = {});

/// Predicts dose and parameters for one case directory holding CT and masks;
/// writes dose.rtr, params.csv and params.json into `out`.
void run_predict(const fs::path& case_dir, const fs::path& stage1, const fs::path& stage2, double d_p,
                 const fs::path& out);

}  // namespace rtp
