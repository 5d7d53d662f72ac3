#include "rtp/pipeline/pipeline.hpp"

#include "rtp/autodiff/adam.hpp"
#include "rtp/autodiff/checkpoint.hpp"
#include "rtp/pipeline/batch.hpp"
#include "rtp/util/files.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

namespace rtp {

namespace ds = dosimetry;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Fisher-Yates over our own uniform draw, so the order depends only on the
/// seed and not on the standard library's distribution implementation.
void shuffle(std::vector<int>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

/// Runs epochs over `n` items in shuffled batches; `step` trains on one batch
/// and returns its mean loss.
LossLog run_epochs(const std::vector<int>& items, int batch, int epochs, int max_steps, Rng& rng,
                   const std::function<double(const std::vector<int>&)>& step, const EpochHook& hook) {
  if (items.empty()) throw std::invalid_argument("training split is empty");
  LossLog log;
  const bool by_steps = max_steps > 0;
  for (int epoch = 1; by_steps ? log.steps < max_steps : epoch <= epochs; ++epoch) {
    std::vector<int> order = items;
    shuffle(order, rng);
    double total = 0;
    int seen = 0, steps = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch)) {
      if (by_steps && log.steps >= max_steps) break;
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + static_cast<std::size_t>(batch))));
      total += step(idx) * static_cast<double>(idx.size());
      seen += static_cast<int>(idx.size());
      ++steps;
      ++log.steps;
    }
    log.epoch_mean.push_back(total / seen);
    log.epoch_steps.push_back(steps);
    if (hook) hook(epoch, log.epoch_mean.back());
  }
  return log;
}

std::vector<const Case*> select(const Dataset& d, const std::vector<int>& idx) {
  std::vector<const Case*> out;
  for (int i : idx) out.push_back(&d.cases.at(static_cast<std::size_t>(i)));
  return out;
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw std::runtime_error(what + " not found: " + p.string());
}

template <typename Net>
void save_net(const Net& net, const fs::path& path) {
  save_checkpoint(path, net.params().state());
}

json mean_std(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {{"mean", mean}, {"std", v.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0}};
}

json param_fields(const ParamRow& r) {
  return {{"weight", r.weight}, {"volume", r.volume ? json(*r.volume) : json(nullptr)}, {"dose", r.dose}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

std::vector<int> Dataset::indices(Part part) const {
  switch (part) {
    case Part::Train:
      return split.train;
    case Part::Test:
      return split.test;
    case Part::All: {
      std::vector<int> all(cases.size());
      std::iota(all.begin(), all.end(), 0);
      return all;
    }
  }
  return {};
}

Dataset::Part parse_part(std::string_view s) {
  if (s == "train") return Dataset::Part::Train;
  if (s == "test") return Dataset::Part::Test;
  if (s == "all") return Dataset::Part::All;
  throw std::invalid_argument("unknown split '" + std::string(s) + "' (expected train, test or all)");
}

std::string part_name(Dataset::Part p) {
  return p == Dataset::Part::Train ? "train" : p == Dataset::Part::Test ? "test" : "all";
}

Dataset load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory not found: " + root.string());
  Dataset d;
  d.split = read_split(root);
  const int n = static_cast<int>(d.split.train.size() + d.split.test.size());
  for (int i : d.split.train) {
    if (i < 0 || i >= n) throw std::runtime_error("split.json: case index " + std::to_string(i) + " out of range");
  }
  for (int i = 0; i < n; ++i) {
    try {
      d.cases.push_back(read_case(root / case_dir_name(i)));
    } catch (const std::exception& e) {
      throw std::runtime_error(case_dir_name(i) + ": " + e.what());
    }
  }
  return d;
}

std::string LossLog::csv() const {
  std::string s = "epoch,steps,mean_loss\n";
  for (std::size_t i = 0; i < epoch_mean.size(); ++i) {
    s += std::to_string(i + 1) + "," + std::to_string(epoch_steps[i]) + "," + fmt(epoch_mean[i]) + "\n";
  }
  return s;
}

fs::path sidecar_path(const fs::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".json");
}

// ---------------------------------------------------------------------------
// Training

LossLog train_stage1(const Dataset& data, const TrainConfig& cfg, const fs::path& out, const EpochHook& hook) {
  cfg.validate();
  DoseNet<float> net(effective_dose_net(cfg), cfg.seed);
  Adam<float> opt(net.params().trainable(), AdamOptions{.lr = cfg.lr_stage1});
  Rng rng = make_rng(cfg.seed, "shuffle/stage1");
  const auto delta = static_cast<float>(cfg.huber_delta);
  auto step = [&](const std::vector<int>& idx) {
    const auto cases = select(data, idx);
    Tape<float> tape;
    opt.zero_grad();
    auto loss = ops::huber_loss(tape, net.forward(tape, stage_one_input<float>(cases), true), dose_target<float>(cases), delta);
    tape.backward(loss);
    opt.step();
    return static_cast<double>(loss.item());
  };
  const auto log = run_epochs(data.split.train, cfg.batch, cfg.epochs, cfg.steps_stage1, rng, step, hook);

  fs::create_directories(out);
  const auto ckpt = out / kStage1Checkpoint;
  save_net(net, ckpt);
  const json side{{"stage", 1},
                  {"build_id", build_id()},
                  {"config", cfg.stage1_json()},
                  {"train_cases", data.split.train.size()},
                  {"steps", log.steps},
                  {"checkpoint_hash", file_hash(ckpt)}};
  write_file_atomic(sidecar_path(ckpt), side.dump(2) + "\n");
  write_file_atomic(out / "loss_stage1.csv", log.csv());
  return log;
}

DoseNet<float> load_dose_net(const fs::path& checkpoint) {
  require_file(checkpoint, "stage-one checkpoint");
  const auto side = read_json(sidecar_path(checkpoint));
  DoseNet<float> net(dose_net_config_from_json(side.at("config").at("dose_net")), 0);
  net.params().load_state(load_checkpoint(checkpoint));
  return net;
}

ParamNet<float> load_param_net(const fs::path& checkpoint) {
  require_file(checkpoint, "stage-two checkpoint");
  const auto side = read_json(sidecar_path(checkpoint));
  ParamNet<float> net(param_net_config_from_json(side.at("param_net")), 0);
  net.params().load_state(load_checkpoint(checkpoint));
  return net;
}

std::vector<Tensor<float>> predict_doses(DoseNet<float>& net, const std::vector<const Case*>& cases) {
  std::vector<Tensor<float>> out;
  for (const Case* c : cases) {
    Tape<float> tape = Tape<float>::inference();
    out.push_back(net.forward(tape, stage_one_input<float>({c}), false));
  }
  return out;
}

std::vector<ParamTable> predict_params(ParamNet<float>& net, const std::vector<const Case*>& cases,
                                       const std::vector<Tensor<float>>& doses) {
  std::vector<ParamTable> out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Tape<float> tape = Tape<float>::inference();
    const auto x7 = stage_two_input(stage_one_input<float>({cases[i]}), doses.at(i));
    out.push_back(denormalize_params(prediction_vector<float>(net.forward(tape, x7, false), 0), cases[i]->meta.config.d_p));
  }
  return out;
}

LossLog train_stage2(const Dataset& data, const fs::path& stage1, const TrainConfig& cfg, const fs::path& out,
                     const EpochHook& hook) {
  cfg.validate();
  require_file(stage1, "stage-one checkpoint");
  const std::string hash_before = file_hash(stage1);
  const auto side1 = read_json(sidecar_path(stage1));

  // Stage-two inputs are fixed for the whole run: the frozen network's
  // eval-mode prediction (or the GT dose when diagnosing).
  const auto train = select(data, data.split.train);
  std::map<int, Tensor<float>> x7;
  {
    std::vector<Tensor<float>> doses;
    if (cfg.stage2_dose == Stage2Dose::Predicted) {
      auto net1 = load_dose_net(stage1);
      doses = predict_doses(net1, train);
    } else {
      for (const Case* c : train) doses.push_back(dose_target<float>({c}));
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
      x7[data.split.train[i]] = stage_two_input(stage_one_input<float>({train[i]}), doses[i]);
    }
  }

  ParamNet<float> net(effective_param_net(cfg), cfg.seed);
  Adam<float> opt(net.params().trainable(), AdamOptions{.lr = cfg.lr_stage2});
  Rng rng = make_rng(cfg.seed, "shuffle/stage2");
  const auto lambda = static_cast<float>(cfg.lambda);
  auto step = [&](const std::vector<int>& idx) {
    std::vector<Tensor<float>> parts;
    std::vector<const ParamTable*> tables;
    for (int i : idx) {
      parts.push_back(x7.at(i));
      tables.push_back(&data.cases[static_cast<std::size_t>(i)].params);
    }
    Tape<float> inputs = Tape<float>::inference();
    const auto x = ops::concat(inputs, parts, 0);
    const auto [gt_rings, gt_oars] = param_targets<float>(tables);
    Tape<float> tape;
    opt.zero_grad();
    auto o = net.forward(tape, x, true);
    auto loss = loss_total(tape, loss_reg_ptv(tape, o.rings, gt_rings), loss_reg_oars(tape, o.oars, gt_oars), lambda);
    tape.backward(loss);
    opt.step();
    return static_cast<double>(loss.item());
  };
  const auto log = run_epochs(data.split.train, cfg.batch, cfg.epochs, cfg.steps_stage2, rng, step, hook);

  const std::string hash_after = file_hash(stage1);
  if (hash_after != hash_before) {
    throw std::runtime_error("stage-one checkpoint changed during stage-two training (" + hash_before + " -> " +
                             hash_after + ")");
  }
  fs::create_directories(out);
  const auto ckpt = out / kStage2Checkpoint;
  save_net(net, ckpt);
  const json side{{"stage", 2},
                  {"build_id", build_id()},
                  {"config", to_json(cfg)},
                  {"param_net", to_json(effective_param_net(cfg))},
                  {"stage1_config", side1.at("config")},
                  {"stage1_hash", hash_before},
                  {"train_cases", data.split.train.size()},
                  {"steps", log.steps},
                  {"checkpoint_hash", file_hash(ckpt)}};
  write_file_atomic(sidecar_path(ckpt), side.dump(2) + "\n");
  write_file_atomic(out / "loss_stage2.csv", log.csv());
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation

CaseEval evaluate_case(const Case& c, std::string id, const Image& dose_pred, const ParamTable& params_pred) {
  const double d_p = c.meta.config.d_p;
  CaseEval e;
  e.id = std::move(id);
  std::array<const Mask*, 5> masks{&c.ptv, &c.oars[0], &c.oars[1], &c.oars[2], &c.oars[3]};
  auto metrics = [](const Image& d, const Mask& m) {
    const auto s = ds::d_stats(d, m);
    return DoseMetrics{ds::v_at(d, m, 40.0), ds::v_at(d, m, 50.0), s.mean, s.max};
  };
  for (std::size_t s = 0; s < masks.size(); ++s) {
    e.dose_pred[s] = metrics(dose_pred, *masks[s]);
    e.dose_gt[s] = metrics(c.dose, *masks[s]);
  }
  e.ci_pred = ds::ci_paddick(dose_pred, c.ptv, d_p);
  e.ci_gt = ds::ci_paddick(c.dose, c.ptv, d_p);
  e.hi_pred = ds::hi(dose_pred, c.ptv, d_p);
  e.hi_gt = ds::hi(c.dose, c.ptv, d_p);
  e.params_pred = params_pred;
  e.params_gt = c.params;
  return e;
}

json EvalReport::to_json(const json& config) const {
  if (cases.empty()) throw std::invalid_argument("evaluation report has no cases");
  static constexpr std::array<const char*, 4> kMetricNames{"v40", "v50", "dmean", "dmax"};
  auto metric = [](const DoseMetrics& m, std::size_t k) {
    return k == 0 ? m.v40 : k == 1 ? m.v50 : k == 2 ? m.dmean : m.dmax;
  };
  json jcases = json::array();
  for (const auto& c : cases) {
    json structures = json::object();
    for (std::size_t s = 0; s < kDoseStructures.size(); ++s) {
      json m = json::object();
      for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
        m[kMetricNames[k]] = {{"pred", metric(c.dose_pred[s], k)}, {"gt", metric(c.dose_gt[s], k)}};
      }
      structures[kDoseStructures[s]] = m;
    }
    json params = json::array();
    for (Structure st : kAllStructures) {
      const auto& p = c.params_pred.at(st);
      const auto& g = c.params_gt.at(st);
      json err{{"weight", std::abs(p.weight - g.weight)},
               {"volume", g.volume ? json(std::abs(p.volume.value_or(0.0) - *g.volume)) : json(nullptr)},
               {"dose", std::abs(p.dose - g.dose)}};
      params.push_back({{"structure", structure_name(st)},
                        {"function", function_name(g.function)},
                        {"pred", param_fields(p)},
                        {"gt", param_fields(g)},
                        {"abs_err", err}});
    }
    jcases.push_back({{"case", c.id},
                      {"dose",
                       {{"ci", {{"pred", c.ci_pred}, {"gt", c.ci_gt}}},
                        {"hi", {{"pred", c.hi_pred}, {"gt", c.hi_gt}}},
                        {"structures", structures}}},
                      {"params", params}});
  }

  // Aggregates.
  std::vector<double> ci_p, ci_g, hi_p, hi_g;
  for (const auto& c : cases) {
    ci_p.push_back(c.ci_pred), ci_g.push_back(c.ci_gt), hi_p.push_back(c.hi_pred), hi_g.push_back(c.hi_gt);
  }
  json dose_agg{{"ci_mad", ds::mad(ci_p, ci_g)},
                {"hi_mad", ds::mad(hi_p, hi_g)},
                {"ci", {{"pred", mean_std(ci_p)}, {"gt", mean_std(ci_g)}}},
                {"hi", {{"pred", mean_std(hi_p)}, {"gt", mean_std(hi_g)}}}};
  json per_structure = json::object();
  for (std::size_t s = 0; s < kDoseStructures.size(); ++s) {
    json m = json::object();
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
      std::vector<double> err;
      for (const auto& c : cases) err.push_back(std::abs(metric(c.dose_pred[s], k) - metric(c.dose_gt[s], k)));
      m[kMetricNames[k]] = mean_std(err);
    }
    per_structure[kDoseStructures[s]] = m;
  }
  dose_agg["abs_err"] = per_structure;

  std::vector<double> ew, ev, ed;
  json per_row = json::object();
  for (Structure st : kAllStructures) {
    std::vector<double> rw, rv, rd;
    for (const auto& c : cases) {
      const auto& p = c.params_pred.at(st);
      const auto& g = c.params_gt.at(st);
      rw.push_back(std::abs(p.weight - g.weight));
      rd.push_back(std::abs(p.dose - g.dose));
      if (g.volume) rv.push_back(std::abs(p.volume.value_or(0.0) - *g.volume));
    }
    ew.insert(ew.end(), rw.begin(), rw.end());
    ed.insert(ed.end(), rd.begin(), rd.end());
    ev.insert(ev.end(), rv.begin(), rv.end());
    json r{{"weight", mean_std(rw)}, {"dose", mean_std(rd)}};
    r["volume"] = rv.empty() ? json(nullptr) : mean_std(rv);
    per_row[std::string(structure_name(st))] = r;
  }
  json param_agg{{"weight", mean_std(ew)}, {"volume", mean_std(ev)}, {"dose", mean_std(ed)}, {"rows", per_row}};

  return {{"build_id", build_id()},
          {"config", config},
          {"n_cases", cases.size()},
          {"cases", jcases},
          {"aggregate", {{"dose", dose_agg}, {"params", param_agg}}}};
}

std::string EvalReport::cases_csv() const {
  std::string s = "case,ci_pred,ci_gt,hi_pred,hi_gt";
  for (const char* st : kDoseStructures) {
    for (const char* m : {"v40", "v50", "dmean", "dmax"}) s += std::string(",") + st + "_" + m + "_pred," + st + "_" + m + "_gt";
  }
  s += "\n";
  for (const auto& c : cases) {
    s += c.id + "," + fmt(c.ci_pred) + "," + fmt(c.ci_gt) + "," + fmt(c.hi_pred) + "," + fmt(c.hi_gt);
    for (std::size_t i = 0; i < kDoseStructures.size(); ++i) {
      const auto& p = c.dose_pred[i];
      const auto& g = c.dose_gt[i];
      for (auto [a, b] : {std::pair{p.v40, g.v40}, {p.v50, g.v50}, {p.dmean, g.dmean}, {p.dmax, g.dmax}}) {
        s += "," + fmt(a) + "," + fmt(b);
      }
    }
    s += "\n";
  }
  return s;
}

std::string EvalReport::params_csv() const {
  std::string s = "case,structure,function,weight_pred,weight_gt,volume_pred,volume_gt,dose_pred,dose_gt\n";
  for (const auto& c : cases) {
    for (Structure st : kAllStructures) {
      const auto& p = c.params_pred.at(st);
      const auto& g = c.params_gt.at(st);
      s += c.id + "," + std::string(structure_name(st)) + "," + std::string(function_name(g.function)) + "," +
           fmt(p.weight) + "," + fmt(g.weight) + "," + (p.volume ? fmt(*p.volume) : "") + "," +
           (g.volume ? fmt(*g.volume) : "") + "," + fmt(p.dose) + "," + fmt(g.dose) + "\n";
    }
  }
  return s;
}

json compare_reports(const json& a, const json& b) {
  // Per-case error series keyed by case id.
  auto series = [](const json& r) {
    std::map<std::string, std::array<double, 5>> m;
    for (const auto& c : r.at("cases")) {
      const auto& d = c.at("dose");
      std::array<double, 5> v{std::abs(d.at("ci").at("pred").get<double>() - d.at("ci").at("gt").get<double>()),
                              std::abs(d.at("hi").at("pred").get<double>() - d.at("hi").at("gt").get<double>()), 0, 0, 0};
      double nw = 0, nv = 0, nd = 0;
      for (const auto& p : c.at("params")) {
        const auto& e = p.at("abs_err");
        v[2] += e.at("weight").get<double>(), nw += 1;
        v[4] += e.at("dose").get<double>(), nd += 1;
        if (!e.at("volume").is_null()) v[3] += e.at("volume").get<double>(), nv += 1;
      }
      v[2] /= nw, v[3] /= nv, v[4] /= nd;
      m[c.at("case").get<std::string>()] = v;
    }
    return m;
  };
  const auto sa = series(a), sb = series(b);
  std::vector<std::string> ids;
  for (const auto& [id, v] : sa) {
    if (sb.count(id)) ids.push_back(id);
  }
  if (ids.size() < 2) throw std::invalid_argument("compare: the two reports share fewer than 2 cases");
  static constexpr std::array<const char*, 5> kNames{"ci_abs_err", "hi_abs_err", "weight_abs_err", "volume_abs_err",
                                                      "dose_abs_err"};
  json tests = json::object();
  for (std::size_t k = 0; k < kNames.size(); ++k) {
    std::vector<double> x, y;
    for (const auto& id : ids) x.push_back(sa.at(id)[k]), y.push_back(sb.at(id)[k]);
    const auto t = ds::paired_t_test(x, y);
    tests[kNames[k]] = {{"mean_this", mean_std(x).at("mean")},
                        {"mean_other", mean_std(y).at("mean")},
                        {"t", t.t},
                        {"p", t.p},
                        {"dof", t.dof},
                        {"degenerate", t.degenerate}};
  }
  return {{"cases", ids}, {"paired_t", tests}};
}

EvalReport run_eval(const Dataset& data, const fs::path& stage1, const fs::path& stage2, const EvalOptions& opt,
                    const fs::path& out) {
  auto net1 = load_dose_net(stage1);
  auto net2 = load_param_net(stage2);
  const auto idx = data.indices(opt.part);
  const auto cases = select(data, idx);
  const auto doses = predict_doses(net1, cases);
  const auto params = predict_params(net2, cases, doses);
  EvalReport report;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    report.cases.push_back(evaluate_case(*cases[i], case_dir_name(idx[i]),
                                         dose_image(doses[i], 0, cases[i]->meta.config.d_p), params[i]));
  }
  const auto side1 = read_json(sidecar_path(stage1));
  const auto side2 = read_json(sidecar_path(stage2));
  const json config{{"stage1", side1.at("config")},
                    {"stage2", side2.at("config")},
                    {"stage1_hash", file_hash(stage1)},
                    {"stage2_hash", file_hash(stage2)},
                    {"split", part_name(opt.part)}};
  json j = report.to_json(config);
  if (opt.compare) {
    require_file(*opt.compare, "comparison report");
    j["compare"] = compare_reports(j, read_json(*opt.compare));
  }
  fs::create_directories(out);
  write_file_atomic(out / "eval_report.json", j.dump(2) + "\n");
  write_file_atomic(out / "eval_cases.csv", report.cases_csv());
  write_file_atomic(out / "eval_params.csv", report.params_csv());
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

json run_ablation(const Dataset& data, const TrainConfig& base, const std::vector<Variant>& variants,
                  Dataset::Part part, const fs::path& out, const EpochHook& hook) {
  if (variants.empty()) throw std::invalid_argument("ablation: no variants requested");
  std::map<std::string, fs::path> stage1_by_config;
  std::string csv = "variant,ci_mad,hi_mad,weight_abs_err,volume_abs_err,dose_abs_err\n";
  json rows = json::array();
  for (Variant v : variants) {
    TrainConfig cfg = base;
    cfg.variant = v;
    cfg.validate();
    const auto dir = out / ("variant_" + variant_name(v));
    fs::create_directories(dir);
    const std::string key = cfg.stage1_json().dump();
    if (auto it = stage1_by_config.find(key); it != stage1_by_config.end()) {
      for (const char* f : {kStage1Checkpoint, "stage1.json", "loss_stage1.csv"}) {
        fs::copy_file(it->second / f, dir / f, fs::copy_options::overwrite_existing);
      }
    } else {
      train_stage1(data, cfg, dir, hook);
      stage1_by_config[key] = dir;
    }
    train_stage2(data, dir / kStage1Checkpoint, cfg, dir, hook);
    const auto report = run_eval(data, dir / kStage1Checkpoint, dir / kStage2Checkpoint, {part, std::nullopt}, dir);
    const auto agg = read_json(dir / "eval_report.json").at("aggregate");
    const bool stage1_cols = v == Variant::A || v == Variant::E;
    const double ci = agg.at("dose").at("ci_mad").get<double>(), hi = agg.at("dose").at("hi_mad").get<double>();
    const double w = agg.at("params").at("weight").at("mean").get<double>();
    const double vol = agg.at("params").at("volume").at("mean").get<double>();
    const double d = agg.at("params").at("dose").at("mean").get<double>();
    csv += variant_name(v) + "," + (stage1_cols ? fmt(ci) : "") + "," + (stage1_cols ? fmt(hi) : "") + "," + fmt(w) +
           "," + fmt(vol) + "," + fmt(d) + "\n";
    rows.push_back({{"variant", variant_name(v)},
                    {"ci_mad", stage1_cols ? json(ci) : json(nullptr)},
                    {"hi_mad", stage1_cols ? json(hi) : json(nullptr)},
                    {"weight_abs_err", w},
                    {"volume_abs_err", vol},
                    {"dose_abs_err", d},
                    {"n_cases", report.cases.size()}});
  }
  const json j{{"build_id", build_id()}, {"config", to_json(base)}, {"split", part_name(part)}, {"rows", rows}};
  write_file_atomic(out / "ablation.csv", csv);
  write_file_atomic(out / "ablation.json", j.dump(2) + "\n");
  return j;
}

// ---------------------------------------------------------------------------
// Prediction

void run_predict(const fs::path& case_dir, const fs::path& stage1, const fs::path& stage2, double d_p,
                 const fs::path& out) {
  if (!(d_p > 0)) throw std::invalid_argument("prescription dose must be positive");
  Case c = read_case_inputs(case_dir);
  c.meta.config.d_p = d_p;
  auto net1 = load_dose_net(stage1);
  auto net2 = load_param_net(stage2);
  const auto dose = predict_doses(net1, {&c}).front();
  Tape<float> tape = Tape<float>::inference();
  const auto pv = prediction_vector<float>(net2.forward(tape, stage_two_input(stage_one_input<float>({&c}), dose), false), 0);
  const auto table = denormalize_params(pv, d_p);

  fs::create_directories(out);
  write_raster(out / "dose.rtr", dose_image(dose, 0, d_p));
  write_params_csv(out / "params.csv", table);
  json natural = json::array();
  for (const auto& r : table.rows) {
    natural.push_back({{"structure", structure_name(r.structure)}, {"function", function_name(r.function)}, {"values", param_fields(r)}});
  }
  const json j{{"build_id", build_id()},
               {"d_p", d_p},
               {"stage1_hash", file_hash(stage1)},
               {"stage2_hash", file_hash(stage2)},
               {"normalized", {{"rings", pv.rings}, {"oars", pv.oars}}},
               {"natural", natural}};
  write_file_atomic(out / "params.json", j.dump(2) + "\n");
}

}  // namespace rtp
