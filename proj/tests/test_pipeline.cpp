#include "rtp/pipeline/pipeline.hpp"
#include "rtp/util/files.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <unistd.h>

using namespace rtp;
using nlohmann::json;

namespace {

// Small networks so whole pipeline runs take a second or two.
TrainConfig tiny_config() {
  TrainConfig c;
  c.seed = 3;
  c.steps_stage1 = 4;
  c.steps_stage2 = 6;
  c.batch = 2;
  c.dose_net.channels = {4, 4, 8, 8};
  c.dose_net.decoder_channels = {4, 4, 8, 8};
  c.dose_net.depth = 1;
  c.dose_net.heads = 2;
  c.param_net.features = 4;
  c.param_net.grid = 4;
  c.param_net.ptv_hidden = 8;
  c.param_net.gcn_hidden = 8;
  return c;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("rtp_pipeline_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    generate_dataset(PhantomConfig::defaults(32), 5, 11, root_ / "data");
    data_ = new Dataset(load_dataset(root_ / "data"));
  }
  static void TearDownTestSuite() {
    delete data_;
    fs::remove_all(root_);
  }

  /// Trains both stages into `dir` and returns it.
  static fs::path run_both(const TrainConfig& cfg, const std::string& name) {
    const auto dir = root_ / name;
    train_stage1(*data_, cfg, dir);
    train_stage2(*data_, dir / kStage1Checkpoint, cfg, dir);
    return dir;
  }

  static inline fs::path root_;
  static inline Dataset* data_ = nullptr;
};

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(TrainConfigTest, DefaultsMatchTheTrainingRecipe) {
  const TrainConfig c;
  EXPECT_EQ(c.batch, 4);
  EXPECT_DOUBLE_EQ(c.lr_stage1, 1e-5);
  EXPECT_DOUBLE_EQ(c.lr_stage2, 1e-4);
  EXPECT_DOUBLE_EQ(c.huber_delta, 0.5);
  EXPECT_DOUBLE_EQ(c.lambda, 1.0);
  EXPECT_TRUE(c.freeze_stage1);
  EXPECT_EQ(c.variant, Variant::E);
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfigTest, JsonRoundTrip) {
  auto c = tiny_config();
  c.variant = Variant::C;
  c.lambda = 0.25;
  c.stage2_dose = Stage2Dose::GroundTruth;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(TrainConfigTest, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(train_config_from_json(json{{"lr_stage_1", 1e-3}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(json{{"dose_net", {{"chanels", 3}}}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(json{{"variant", "F"}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(json{{"stage2_dose", "oracle"}}), std::invalid_argument);
  for (auto j : {json{{"lr_stage1", 0.0}}, json{{"lambda", -1.0}}, json{{"batch", 0}}, json{{"freeze_stage1", false}}}) {
    EXPECT_THROW(train_config_from_json(j).validate(), std::invalid_argument) << j.dump();
  }
}

TEST(TrainConfigTest, VariantsSwitchOffTheirModules) {
  TrainConfig c;
  for (Variant v : {Variant::A, Variant::B, Variant::C, Variant::D, Variant::E}) {
    c.variant = v;
    EXPECT_EQ(parse_variant(variant_name(v)), v);
    EXPECT_EQ(effective_dose_net(c).transformer, v != Variant::A);
    EXPECT_EQ(effective_param_net(c).intra, v != Variant::B && v != Variant::D);
    EXPECT_EQ(effective_param_net(c).inter, v != Variant::C && v != Variant::D);
  }
}

TEST(TrainConfigTest, StageOneKeyIgnoresStageTwoFields) {
  auto a = tiny_config();
  auto b = a;
  b.lambda = 0;
  b.lr_stage2 = 3e-2;
  b.steps_stage2 = 99;
  b.variant = Variant::D;
  EXPECT_EQ(a.stage1_json(), b.stage1_json());
  b.variant = Variant::A;
  EXPECT_NE(a.stage1_json(), b.stage1_json());
}

// ---------------------------------------------------------------------------
// Dataset

TEST_F(PipelineTest, DatasetSplitIsEightyTwenty) {
  EXPECT_EQ(data_->cases.size(), 5u);
  EXPECT_EQ(data_->split.train, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(data_->split.test, (std::vector<int>{4}));
  EXPECT_EQ(data_->indices(Dataset::Part::All).size(), 5u);
  EXPECT_EQ(parse_part("test"), Dataset::Part::Test);
  EXPECT_THROW(parse_part("val"), std::invalid_argument);
}

TEST_F(PipelineTest, SingleCaseDatasetIsRejected) {
  EXPECT_THROW(generate_dataset(PhantomConfig::defaults(32), 1, 0, root_ / "one"), std::invalid_argument);
  EXPECT_FALSE(fs::exists(root_ / "one" / "split.json"));
}

TEST_F(PipelineTest, LoadErrorsNameTheCase) {
  const auto dir = root_ / "broken";
  fs::copy(root_ / "data", dir, fs::copy_options::recursive);
  fs::remove(dir / "case_002" / "mask_st.rtr");
  try {
    load_dataset(dir);
    FAIL() << "expected a load error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("case_002"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Training

TEST_F(PipelineTest, StepBudgetIsExact) {
  auto cfg = tiny_config();
  cfg.steps_stage1 = 5;  // 2 steps per epoch: epochs of 2, 2, 1
  const auto log = train_stage1(*data_, cfg, root_ / "steps");
  EXPECT_EQ(log.steps, 5);
  EXPECT_EQ(log.epoch_steps, (std::vector<int>{2, 2, 1}));
  const auto csv = read_csv(root_ / "steps" / "loss_stage1.csv");
  ASSERT_EQ(csv.size(), 4u);
  EXPECT_EQ(csv[0], (std::vector<std::string>{"epoch", "steps", "mean_loss"}));
  EXPECT_DOUBLE_EQ(std::stod(csv[3][2]), log.final());
}

TEST_F(PipelineTest, EpochsUsedWhenNoStepBudget) {
  auto cfg = tiny_config();
  cfg.steps_stage1 = 0;
  cfg.epochs = 2;
  const auto log = train_stage1(*data_, cfg, root_ / "epochs");
  EXPECT_EQ(log.epoch_mean.size(), 2u);
  EXPECT_EQ(log.steps, 4);
}

TEST_F(PipelineTest, TrainingIsDeterministic) {
  const auto a = run_both(tiny_config(), "det_a");
  const auto b = run_both(tiny_config(), "det_b");
  for (const char* f : {"stage1.rtck", "stage2.rtck", "stage1.json", "stage2.json", "loss_stage1.csv", "loss_stage2.csv"}) {
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  auto other = tiny_config();
  other.seed = 4;
  train_stage1(*data_, other, root_ / "det_c");
  EXPECT_NE(read_file(a / "stage1.rtck"), read_file(root_ / "det_c" / "stage1.rtck"));
}

TEST_F(PipelineTest, StageOneIgnoresStageTwoSettings) {
  auto a = tiny_config();
  auto b = a;
  b.lambda = 0;
  b.lr_stage2 = 0.5;
  train_stage1(*data_, a, root_ / "sep_a");
  train_stage1(*data_, b, root_ / "sep_b");
  EXPECT_EQ(read_file(root_ / "sep_a" / kStage1Checkpoint), read_file(root_ / "sep_b" / kStage1Checkpoint));
  EXPECT_EQ(read_file(root_ / "sep_a" / "stage1.json"), read_file(root_ / "sep_b" / "stage1.json"));
}

TEST_F(PipelineTest, StageTwoLeavesStageOneUntouched) {
  const auto dir = root_ / "freeze";
  const auto cfg = tiny_config();
  train_stage1(*data_, cfg, dir);
  const auto before = file_hash(dir / kStage1Checkpoint);
  train_stage2(*data_, dir / kStage1Checkpoint, cfg, dir);
  EXPECT_EQ(file_hash(dir / kStage1Checkpoint), before);
  const auto side = json::parse(read_file(dir / "stage2.json"));
  EXPECT_EQ(side.at("stage1_hash").get<std::string>(), before);
  EXPECT_EQ(side.at("checkpoint_hash").get<std::string>(), file_hash(dir / kStage2Checkpoint));
}

TEST_F(PipelineTest, StageTwoNeedsStageOneCheckpoint) {
  EXPECT_THROW(train_stage2(*data_, root_ / "nowhere" / kStage1Checkpoint, tiny_config(), root_ / "nowhere"),
               std::runtime_error);
}

TEST_F(PipelineTest, ZeroLambdaFreezesOarBranch) {
  auto cfg = tiny_config();
  cfg.lambda = 0;
  const auto dir = run_both(cfg, "lambda0");
  ParamNet<float> fresh(effective_param_net(cfg), cfg.seed);
  const auto init = fresh.params().state();
  const auto trained = load_checkpoint(dir / kStage2Checkpoint);
  ASSERT_EQ(init.size(), trained.size());
  int oar = 0, moved = 0;
  for (std::size_t i = 0; i < init.size(); ++i) {
    ASSERT_EQ(init[i].name, trained[i].name);
    const bool branch = init[i].name.rfind("inter.", 0) == 0 || init[i].name.rfind("oar.", 0) == 0;
    if (branch) {
      ++oar;
      EXPECT_EQ(init[i].values, trained[i].values) << init[i].name;
    } else if (init[i].values != trained[i].values) {
      ++moved;
    }
  }
  EXPECT_GT(oar, 0);
  EXPECT_GT(moved, 0);
}

TEST_F(PipelineTest, LoadedNetworksReproducePredictions) {
  const auto dir = run_both(tiny_config(), "reload");
  auto n1 = load_dose_net(dir / kStage1Checkpoint);
  auto n1b = load_dose_net(dir / kStage1Checkpoint);
  const std::vector<const Case*> cs{&data_->cases[4]};
  const auto d1 = predict_doses(n1, cs);
  const auto d2 = predict_doses(n1b, cs);
  EXPECT_EQ(d1[0].shape(), (Shape{1, 1, 32, 32}));
  EXPECT_TRUE((d1[0].values().array() == d2[0].values().array()).all());
  auto n2 = load_param_net(dir / kStage2Checkpoint);
  const auto p = predict_params(n2, cs, d1);
  for (const auto& r : p[0].rows) {
    EXPECT_GE(r.weight, 0);
    EXPECT_LE(r.weight, 100);
    EXPECT_GE(r.dose, 0);
    EXPECT_LE(r.dose, 2 * data_->cases[4].meta.config.d_p);
  }
}

// ---------------------------------------------------------------------------
// Evaluation

TEST_F(PipelineTest, SelfComparisonScoresZero) {
  EvalReport r;
  for (int i = 0; i < 5; ++i) {
    const auto& c = data_->cases[static_cast<std::size_t>(i)];
    r.cases.push_back(evaluate_case(c, case_dir_name(i), c.dose, c.params));
  }
  const auto j = r.to_json(json::object());
  const auto& agg = j.at("aggregate");
  EXPECT_EQ(agg.at("dose").at("ci_mad").get<double>(), 0.0);
  EXPECT_EQ(agg.at("dose").at("hi_mad").get<double>(), 0.0);
  for (const char* f : {"weight", "volume", "dose"}) {
    EXPECT_EQ(agg.at("params").at(f).at("mean").get<double>(), 0.0) << f;
  }
  for (const auto& [name, m] : agg.at("dose").at("abs_err").items()) {
    for (const auto& [metric, v] : m.items()) EXPECT_EQ(v.at("mean").get<double>(), 0.0) << name << " " << metric;
  }
}

TEST_F(PipelineTest, EvalReportShapeAndRecomputableAggregates) {
  const auto dir = run_both(tiny_config(), "eval");
  const auto report = run_eval(*data_, dir / kStage1Checkpoint, dir / kStage2Checkpoint, {Dataset::Part::All, {}}, dir);
  ASSERT_EQ(report.cases.size(), 5u);
  const auto j = json::parse(read_file(dir / "eval_report.json"));
  EXPECT_EQ(j.at("n_cases").get<int>(), 5);
  EXPECT_EQ(j.at("config").at("split").get<std::string>(), "all");
  for (const auto& c : j.at("cases")) {
    EXPECT_EQ(c.at("params").size(), 9u);
    int rings = 0;
    for (const auto& p : c.at("params")) rings += p.at("gt").at("volume").is_null() ? 1 : 0;
    EXPECT_EQ(rings, 5);
  }

  // Parameter aggregates from eval_params.csv.
  const auto rows = read_csv(dir / "eval_params.csv");
  ASSERT_EQ(rows.size(), 1u + 5u * 9u);
  double w = 0, v = 0, d = 0;
  int nv = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    ASSERT_EQ(r.size(), 9u);
    w += std::abs(std::stod(r[3]) - std::stod(r[4]));
    d += std::abs(std::stod(r[7]) - std::stod(r[8]));
    if (!r[6].empty()) v += std::abs(std::stod(r[5]) - std::stod(r[6])), ++nv;
  }
  const auto& pa = j.at("aggregate").at("params");
  EXPECT_NEAR(pa.at("weight").at("mean").get<double>(), w / 45, 1e-9);
  EXPECT_NEAR(pa.at("dose").at("mean").get<double>(), d / 45, 1e-9);
  EXPECT_EQ(nv, 20);
  EXPECT_NEAR(pa.at("volume").at("mean").get<double>(), v / nv, 1e-9);

  // CI/HI MAD from eval_cases.csv.
  const auto cases = read_csv(dir / "eval_cases.csv");
  ASSERT_EQ(cases.size(), 6u);
  EXPECT_EQ(cases[0][1], "ci_pred");
  double ci = 0, hi = 0;
  for (std::size_t i = 1; i < cases.size(); ++i) {
    ci += std::abs(std::stod(cases[i][1]) - std::stod(cases[i][2]));
    hi += std::abs(std::stod(cases[i][3]) - std::stod(cases[i][4]));
  }
  EXPECT_NEAR(j.at("aggregate").at("dose").at("ci_mad").get<double>(), ci / 5, 1e-9);
  EXPECT_NEAR(j.at("aggregate").at("dose").at("hi_mad").get<double>(), hi / 5, 1e-9);

  // Rerun gives identical bytes; the report holds no paths or timestamps.
  const auto again = root_ / "eval_again";
  run_eval(*data_, dir / kStage1Checkpoint, dir / kStage2Checkpoint, {Dataset::Part::All, {}}, again);
  for (const char* f : {"eval_report.json", "eval_cases.csv", "eval_params.csv"}) {
    EXPECT_EQ(read_file(dir / f), read_file(again / f)) << f;
  }
  EXPECT_EQ(read_file(dir / "eval_report.json").find(root_.string()), std::string::npos);
}

TEST_F(PipelineTest, CompareRunsPairedTests) {
  const auto dir = run_both(tiny_config(), "cmp");
  run_eval(*data_, dir / kStage1Checkpoint, dir / kStage2Checkpoint, {Dataset::Part::All, {}}, dir / "a");
  auto other = tiny_config();
  other.seed = 9;
  const auto dir2 = run_both(other, "cmp2");
  run_eval(*data_, dir2 / kStage1Checkpoint, dir2 / kStage2Checkpoint,
           {Dataset::Part::All, dir / "a" / "eval_report.json"}, dir2 / "b");
  const auto j = json::parse(read_file(dir2 / "b" / "eval_report.json"));
  const auto& t = j.at("compare").at("paired_t");
  EXPECT_EQ(j.at("compare").at("cases").size(), 5u);
  for (const char* k : {"ci_abs_err", "hi_abs_err", "weight_abs_err", "volume_abs_err", "dose_abs_err"}) {
    ASSERT_TRUE(t.contains(k)) << k;
    EXPECT_EQ(t.at(k).at("dof").get<double>(), 4.0);
    const double p = t.at(k).at("p").get<double>();
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }

  // Against itself every difference is zero.
  const auto self = compare_reports(j, j);
  EXPECT_TRUE(self.at("paired_t").at("weight_abs_err").at("degenerate").get<bool>());
  EXPECT_EQ(self.at("paired_t").at("weight_abs_err").at("p").get<double>(), 1.0);

  json lone = j;
  lone["cases"] = json::array({j.at("cases")[0]});
  EXPECT_THROW(compare_reports(j, lone), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Ablation

TEST_F(PipelineTest, AblationProducesTableAndMatchesStandardRun) {
  const auto cfg = tiny_config();
  const auto out = root_ / "ablate";
  const auto j = run_ablation(*data_, cfg, {Variant::A, Variant::B, Variant::C, Variant::D, Variant::E},
                              Dataset::Part::Test, out);
  const auto rows = read_csv(out / "ablation.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"variant", "ci_mad", "hi_mad", "weight_abs_err", "volume_abs_err",
                                               "dose_abs_err"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    ASSERT_EQ(r.size(), 6u);
    const bool stage1 = r[0] == "A" || r[0] == "E";
    EXPECT_EQ(!r[1].empty(), stage1) << r[0];
    EXPECT_EQ(!r[2].empty(), stage1) << r[0];
    for (std::size_t k = 3; k < 6; ++k) EXPECT_FALSE(r[k].empty()) << r[0];
  }
  EXPECT_EQ(j.at("rows").size(), 5u);

  // B, C, D and E share one stage-one network; A has its own.
  const auto e1 = read_file(out / "variant_E" / kStage1Checkpoint);
  for (const char* v : {"variant_B", "variant_C", "variant_D"}) EXPECT_EQ(read_file(out / v / kStage1Checkpoint), e1);
  EXPECT_NE(read_file(out / "variant_A" / kStage1Checkpoint), e1);

  // E is the standard pipeline.
  const auto std_dir = run_both(cfg, "standard");
  run_eval(*data_, std_dir / kStage1Checkpoint, std_dir / kStage2Checkpoint, {Dataset::Part::Test, {}}, std_dir);
  for (const char* f : {"stage1.rtck", "stage2.rtck", "eval_report.json", "eval_params.csv", "eval_cases.csv"}) {
    EXPECT_EQ(read_file(out / "variant_E" / f), read_file(std_dir / f)) << f;
  }
}

TEST_F(PipelineTest, AblationRejectsEmptyVariantList) {
  EXPECT_THROW(run_ablation(*data_, tiny_config(), {}, Dataset::Part::Test, root_ / "none"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Prediction

TEST_F(PipelineTest, PredictWritesReadableOutputs) {
  const auto dir = run_both(tiny_config(), "predict");
  const auto case_dir = root_ / "data" / "case_004";
  run_predict(case_dir, dir / kStage1Checkpoint, dir / kStage2Checkpoint, 50.4, dir / "p1");
  run_predict(case_dir, dir / kStage1Checkpoint, dir / kStage2Checkpoint, 50.4, dir / "p2");
  for (const char* f : {"dose.rtr", "params.csv", "params.json"}) {
    EXPECT_EQ(read_file(dir / "p1" / f), read_file(dir / "p2" / f)) << f;
  }
  const auto table = read_params_csv(dir / "p1" / "params.csv");
  ASSERT_EQ(table.rows.size(), 9u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_FALSE(table.rows[i].volume.has_value());
  for (std::size_t i = 5; i < 9; ++i) EXPECT_TRUE(table.rows[i].volume.has_value());
  for (const auto& line : read_csv(dir / "p1" / "params.csv")) {
    if (line[0].rfind("Ring", 0) == 0) {
      EXPECT_TRUE(line[3].empty()) << line[0];
    }
  }
  const auto dose = read_image(dir / "p1" / "dose.rtr");
  EXPECT_EQ(dose.rows(), 32);
  EXPECT_GE(dose.minCoeff(), 0.0f);
}

TEST_F(PipelineTest, PredictRejectsMissingInputs) {
  const auto dir = run_both(tiny_config(), "predict_bad");
  const auto case_dir = root_ / "nomask";
  fs::copy(root_ / "data" / "case_004", case_dir);
  fs::remove(case_dir / "mask_bladder.rtr");
  EXPECT_ANY_THROW(run_predict(case_dir, dir / kStage1Checkpoint, dir / kStage2Checkpoint, 50.4, dir / "p"));
  EXPECT_THROW(run_predict(root_ / "data" / "case_004", dir / kStage1Checkpoint, dir / kStage2Checkpoint, 0.0, dir / "p"),
               std::invalid_argument);
}
