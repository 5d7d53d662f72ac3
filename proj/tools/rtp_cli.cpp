// Command-line front end: gen-data, train-stage1, train-stage2, eval,
// ablate, predict. Failures print {"error": ...} on stderr and exit 1.

#include "rtp/pipeline/pipeline.hpp"
#include "rtp/util/files.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace {

using namespace rtp;
using nlohmann::json;

/// Flag overrides shared by the training commands; applied after --config.
struct TrainFlags {
  std::string config;
  std::optional<int> epochs, steps, batch;
  std::optional<double> lr_stage1, lr_stage2, lambda, huber_delta;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string stage2_dose;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON file overriding training defaults")->check(CLI::ExistingFile);
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--steps", steps, "Exact optimizer step budget for this stage (overrides --epochs)");
    app->add_option("--batch", batch, "Batch size");
    app->add_option("--lr-stage1", lr_stage1, "Stage-one learning rate");
    app->add_option("--lr-stage2", lr_stage2, "Stage-two learning rate");
    app->add_option("--lambda", lambda, "OAR loss weight");
    app->add_option("--huber-delta", huber_delta, "Huber threshold");
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--variant", variant, "Ablation variant A-E")->check(CLI::IsMember({"A", "B", "C", "D", "E"}));
    app->add_option("--stage2-dose", stage2_dose, "Dose map fed to stage two while training")
        ->check(CLI::IsMember({"predicted", "ground_truth"}));
  }

  TrainConfig resolve(int stage) const {
    json j = json::object();
    if (!config.empty()) {
      try {
        j = json::parse(read_file(config));
      } catch (const json::exception& e) {
        throw std::runtime_error(config + ": " + e.what());
      }
    }
    if (epochs) j["epochs"] = *epochs;
    // Stage 0 means both stages (the ablation harness).
    if (steps && stage != 2) j["steps_stage1"] = *steps;
    if (steps && stage != 1) j["steps_stage2"] = *steps;
    if (batch) j["batch"] = *batch;
    if (lr_stage1) j["lr_stage1"] = *lr_stage1;
    if (lr_stage2) j["lr_stage2"] = *lr_stage2;
    if (lambda) j["lambda"] = *lambda;
    if (huber_delta) j["huber_delta"] = *huber_delta;
    if (seed) j["seed"] = *seed;
    if (!variant.empty()) j["variant"] = variant;
    if (!stage2_dose.empty()) j["stage2_dose"] = stage2_dose;
    auto cfg = train_config_from_json(j);
    cfg.validate();
    return cfg;
  }
};

EpochHook progress(const char* stage) {
  return [stage](int epoch, double loss) { std::printf("%s epoch %d loss %.6g\n", stage, epoch, loss); };
}

void print_log(const char* stage, const LossLog& log) {
  std::printf("%s done: %d steps, epoch loss %.6g -> %.6g\n", stage, log.steps, log.initial(), log.final());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage radiotherapy dose and planning-parameter prediction on synthetic phantoms"};
  app.set_version_flag("--version", build_id());
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress per-epoch progress");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  int n_cases = 10, size = 64;
  std::uint64_t data_seed = 0;
  std::string gen_out, gen_config;
  gen->add_option("--cases", n_cases, "Number of cases (>= 2)");
  gen->add_option("--size", size, "Image side length in pixels");
  gen->add_option("--seed", data_seed, "Dataset seed");
  gen->add_option("--config", gen_config, "JSON file overriding phantom defaults")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train-stage1
  auto* s1 = app.add_subcommand("train-stage1", "Train the dose network");
  std::string data_dir, out_dir;
  TrainFlags s1_flags;
  s1->add_option("--data", data_dir, "Dataset directory")->required();
  s1->add_option("--out", out_dir, "Output directory")->required();
  s1_flags.add(s1);

  // train-stage2
  auto* s2 = app.add_subcommand("train-stage2", "Train the parameter network with stage one frozen");
  std::string stage1_path, stage2_path;
  TrainFlags s2_flags;
  s2->add_option("--data", data_dir, "Dataset directory")->required();
  s2->add_option("--stage1", stage1_path, "Stage-one checkpoint")->required();
  s2->add_option("--out", out_dir, "Output directory")->required();
  s2_flags.add(s2);

  // eval
  auto* ev = app.add_subcommand("eval", "Score both stages on a split");
  std::string split = "test", compare;
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--stage1", stage1_path, "Stage-one checkpoint")->required();
  ev->add_option("--stage2", stage2_path, "Stage-two checkpoint")->required();
  ev->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  ev->add_option("--compare", compare, "Earlier eval_report.json for paired t-tests");
  ev->add_option("--out", out_dir, "Output directory")->required();

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate ablation variants");
  std::vector<std::string> variants;
  TrainFlags ab_flags;
  int ab_steps1 = 0, ab_steps2 = 0;
  ab->add_option("--data", data_dir, "Dataset directory")->required();
  ab->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  ab->add_option("--out", out_dir, "Output directory")->required();
  ab->add_option("--variants", variants, "Variants to run, or 'all'")->delimiter(',');
  ab->add_option("--steps1", ab_steps1, "Stage-one step budget");
  ab->add_option("--steps2", ab_steps2, "Stage-two step budget");
  ab_flags.add(ab);

  // predict
  auto* pr = app.add_subcommand("predict", "Predict dose and parameters for one case directory");
  std::string case_dir;
  double d_p = 50.4;
  pr->add_option("--case", case_dir, "Case directory with ct.rtr and structure masks")->required();
  pr->add_option("--stage1", stage1_path, "Stage-one checkpoint")->required();
  pr->add_option("--stage2", stage2_path, "Stage-two checkpoint")->required();
  pr->add_option("--dp", d_p, "Prescription dose in Gy");
  pr->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "usage"}}.dump() << "\n";
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      json j{{"size", size}};
      if (!gen_config.empty()) j.merge_patch(json::parse(read_file(gen_config)));
      generate_dataset(phantom_config_from_json(j), n_cases, data_seed, gen_out);
      std::printf("wrote %d cases to %s\n", n_cases, gen_out.c_str());
    } else if (*s1) {
      const auto cfg = s1_flags.resolve(1);
      const auto log = train_stage1(load_dataset(data_dir), cfg, out_dir, quiet ? EpochHook{} : progress("stage1"));
      print_log("stage1", log);
    } else if (*s2) {
      const auto cfg = s2_flags.resolve(2);
      const auto log =
          train_stage2(load_dataset(data_dir), stage1_path, cfg, out_dir, quiet ? EpochHook{} : progress("stage2"));
      print_log("stage2", log);
    } else if (*ev) {
      EvalOptions opt{parse_part(split), std::nullopt};
      if (!compare.empty()) opt.compare = compare;
      const auto report = run_eval(load_dataset(data_dir), stage1_path, stage2_path, opt, out_dir);
      std::printf("evaluated %zu cases\n", report.cases.size());
    } else if (*ab) {
      auto cfg = ab_flags.resolve(0);
      if (ab_steps1 > 0) cfg.steps_stage1 = ab_steps1;
      if (ab_steps2 > 0) cfg.steps_stage2 = ab_steps2;
      std::vector<Variant> vs;
      if (variants.empty() || (variants.size() == 1 && variants[0] == "all")) {
        vs = {Variant::A, Variant::B, Variant::C, Variant::D, Variant::E};
      } else {
        for (const auto& v : variants) vs.push_back(parse_variant(v));
      }
      const auto j = run_ablation(load_dataset(data_dir), cfg, vs, parse_part(split), out_dir,
                                  quiet ? EpochHook{} : progress("ablate"));
      std::printf("%s", read_file(fs::path(out_dir) / "ablation.csv").c_str());
    } else if (*pr) {
      run_predict(case_dir, stage1_path, stage2_path, d_p, out_dir);
      std::printf("wrote prediction to %s\n", out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"command", command}}.dump() << "\n";
    return 1;
  }
  return 0;
}
