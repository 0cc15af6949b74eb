// vscd: desk-scale video scene change detection pipeline.
// Subcommands: gen, train, infer, eval, sweep, report.
// Exit codes: 0 success, 2 usage/config error, 3 runtime/data error.

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "vscd/config.hpp"
#include "vscd/evaluator.hpp"
#include "vscd/model.hpp"
#include "vscd/synthdata.hpp"
#include "vscd/trainer.hpp"

namespace fs = std::filesystem;
using namespace vscd;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::string data_root;
  int64_t seed = -1;
  double threshold = -1;
  int t_key = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--out", args.out_dir, "output directory")->required();
  cmd->add_option("--set", args.overrides, "dotted-key override, key=value (repeatable)");
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_option("--threshold", args.threshold, "mask decision threshold override");
  cmd->add_option("--tkey", args.t_key, "keyframes per video override");
}

json effective_config(const CommonArgs& args) {
  json cfg = resolve_config(args.config_path, args.overrides);
  if (args.seed >= 0) {
    cfg["data"]["seed"] = args.seed;
    cfg["train"]["seed"] = args.seed;
  }
  // decision threshold is an eval-time knob, not part of the model identity
  if (args.threshold >= 0) cfg["eval"]["threshold"] = args.threshold;
  if (args.t_key >= 0) {
    cfg["train"]["t_key"] = args.t_key;
    cfg["eval"]["t_key"] = args.t_key;
  }
  return cfg;
}

void persist_config(const json& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "config.json");
  f << cfg.dump(2) << "\n";
}

std::string resolve_data_root(const std::string& flag_value, const json& cfg) {
  if (!flag_value.empty()) return flag_value;
  std::string from_cfg = cfg.at("data").at("root");
  if (!from_cfg.empty()) return from_cfg;
  if (const char* env = std::getenv("VSCD_DATA_ROOT")) return env;
  throw ConfigError("no dataset root: pass --data, set data.root, or export VSCD_DATA_ROOT");
}

std::vector<DatasetPair> load_split(const std::string& root, const std::string& split) {
  std::vector<DatasetPair> out;
  for (const auto& rec : load_manifest(root))
    if (split == "all" || rec.split == split) out.push_back(load_pair(root, rec.pair_id));
  if (out.empty()) throw DataError("no pairs with split '" + split + "' in " + root);
  return out;
}

// ---- gen ----

int cmd_gen(const CommonArgs& args) {
  json cfg = effective_config(args);
  GenConfig gen = gen_config_from_json(cfg.at("data"));
  auto result = generate_dataset(gen, args.out_dir);
  persist_config(cfg, args.out_dir);
  std::cout << "generated " << result.pairs << " pairs in " << args.out_dir << "\n";
  std::cout << "manifest_hash " << result.manifest_hash << "\n";
  for (const auto& [bin, count] : result.change_histogram)
    std::cout << "  " << bin << ": " << count << " pairs\n";
  return 0;
}

// ---- train ----

int cmd_train(const CommonArgs& args, const std::string& split) {
  json cfg = effective_config(args);
  std::string root = resolve_data_root(args.data_root, cfg);
  auto pairs = load_split(root, split);
  VscdNet<float> model(model_config_from_json(cfg.at("model")));
  TrainConfig tc = train_config_from_json(cfg.at("train"));

  persist_config(cfg, args.out_dir);
  auto result = train(model, pairs, tc, (fs::path(args.out_dir) / "train_log.jsonl").string());
  save_checkpoint((fs::path(args.out_dir) / "checkpoint.ckpt").string(), model, cfg.at("model"),
                  result.steps, result.loss_history);
  double final_loss = result.loss_history.empty() ? 0.0 : result.loss_history.back();
  std::cout << "trained " << result.steps << " steps on " << pairs.size() << " pairs; final loss "
            << final_loss << (result.hit_time_budget ? " (time budget hit)" : "") << "\n";
  return 0;
}

// ---- infer ----

int cmd_infer(const CommonArgs& args, const std::string& checkpoint, int pair_id, bool dump_probs,
              bool dump_align) {
  json cfg = effective_config(args);
  std::string root = resolve_data_root(args.data_root, cfg);

  VscdNet<float> model(model_config_from_json(cfg.at("model")));
  load_checkpoint(checkpoint, model, cfg.at("model"));

  DatasetPair dp = load_pair(root, pair_id);
  double tau = cfg.at("eval").at("threshold");
  int t_key = cfg.at("eval").at("t_key");

  auto pp = prepare_pair<float>(dp, t_key);
  Tape<float> tape;
  TapeParams<float> P(tape, model.params(), [](const std::string&) { return false; });
  auto res = model.forward(tape, P, pp.q_frames, pp.r_frames);

  fs::create_directories(args.out_dir);
  persist_config(cfg, args.out_dir);
  for (size_t t = 0; t < res.mask_logits.size(); ++t) {
    const Tensor<float>& logits = tape.val(res.mask_logits[t]);
    Tensor<uint8_t> m = predict_mask(logits, tau);
    Image img(m.dim(0), m.dim(1), 1);
    for (int64_t i = 0; i < m.numel(); ++i) img.data[static_cast<size_t>(i)] = m[i] ? 255 : 0;
    write_pgm(
        (fs::path(args.out_dir) / frame_file_name("mask", static_cast<int>(t), "pgm")).string(),
        img);
    if (dump_probs) {
      std::vector<float> plane;
      plane.reserve(static_cast<size_t>(logits.numel()));
      for (int64_t i = 0; i < logits.numel(); ++i)
        plane.push_back(Tape<float>::sigmoid_scalar(logits[i]));
      write_float_planes(
          (fs::path(args.out_dir) / frame_file_name("prob", static_cast<int>(t), "bin")).string(),
          logits.dim(1), {plane});
    }
  }
  if (dump_align)
    dump_alignment((fs::path(args.out_dir) / "alignment.bin").string(), tape.val(res.similarity),
                   tape.val(res.logits_grid), tape.val(res.matching));
  std::cout << "wrote " << res.mask_logits.size() << " masks to " << args.out_dir << "\n";
  return 0;
}

// ---- eval ----

struct EvalOutcome {
  json report;
  double overall_f1 = 0;
  int failures = 0;
};

EvalOutcome run_eval(VscdNet<float>& model, const std::vector<DatasetPair>& pairs,
                     const EvalConfig& ecfg, const std::string& out_dir) {
  EvalOutcome out;
  std::vector<std::pair<PairRecord, std::vector<FrameScore>>> per_pair;
  std::vector<FrameScore> all_scores;
  std::map<int, std::vector<double>> anomaly_series;
  // probabilities and GT kept for the threshold sweep
  std::vector<std::vector<Tensor<float>>> probs_per_pair;
  std::vector<std::vector<Tensor<uint8_t>>> gt_per_pair;

  for (const auto& dp : pairs) {
    try {
      auto ev = evaluate_pair(model, dp, ecfg.threshold, ecfg.t_key);
      per_pair.emplace_back(ev.meta, ev.scores);
      all_scores.insert(all_scores.end(), ev.scores.begin(), ev.scores.end());
      std::vector<double> series;
      for (const auto& m : ev.prediction.masks) series.push_back(anomaly_score(m));
      anomaly_series[dp.meta.pair_id] = series;

      auto pp = prepare_pair<float>(dp, ecfg.t_key);
      std::vector<Tensor<uint8_t>> gts;
      for (const auto& m : pp.masks) {
        Tensor<uint8_t> g({m.dim(1), m.dim(2)});
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = m[i] != 0.0f ? 1 : 0;
        gts.push_back(std::move(g));
      }
      gt_per_pair.push_back(std::move(gts));
      probs_per_pair.push_back(std::move(ev.prediction.probabilities));
    } catch (const std::exception& e) {
      std::cerr << "pair " << dp.meta.pair_id << " failed: " << e.what() << "\n";
      ++out.failures;
    }
  }
  if (per_pair.empty()) throw DataError("eval: every pair failed");

  auto strat = stratified_report(per_pair, ecfg);
  auto amb = ambiguity_bins(all_scores);
  auto tax = error_taxonomy(all_scores, ecfg.taxonomy_ratio);

  std::vector<std::pair<double, double>> curve;
  for (int i = 1; i <= 19; ++i) {
    double tau = 0.05 * i;
    double acc = 0;
    int n = 0;
    for (size_t pi = 0; pi < probs_per_pair.size(); ++pi)
      for (size_t t = 0; t < probs_per_pair[pi].size(); ++t) {
        const auto& prob = probs_per_pair[pi][t];
        Tensor<uint8_t> m({prob.dim(1), prob.dim(2)});
        for (int64_t j = 0; j < m.numel(); ++j)
          m[j] = static_cast<double>(prob[j]) > tau ? 1 : 0;
        acc += frame_f1(m, gt_per_pair[pi][t]).f1;
        ++n;
      }
    curve.emplace_back(tau, n ? acc / n : 0.0);
  }

  out.report = report_to_json(strat, amb, tax, ecfg, curve, anomaly_series);
  out.overall_f1 = strat.overall_f1;

  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "report.json");
    f << out.report.dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(out_dir) / "report.md");
    f << report_to_markdown(out.report);
  }
  {
    std::ofstream f(fs::path(out_dir) / "frames.csv");
    f << "pair_id,frame,tp,fp,fn,precision,recall,f1,gt_area,top_gap\n";
    for (const auto& s : all_scores)
      f << s.pair_id << "," << s.frame_index << "," << s.tp << "," << s.fp << "," << s.fn << ","
        << s.precision << "," << s.recall << "," << s.f1 << "," << s.gt_area_fraction << ","
        << s.top_gap << "\n";
  }
  return out;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, const std::string& split) {
  json cfg = effective_config(args);
  std::string root = resolve_data_root(args.data_root, cfg);
  EvalConfig ecfg = eval_config_from_json(cfg.at("eval"));
  VscdNet<float> model(model_config_from_json(cfg.at("model")));
  load_checkpoint(checkpoint, model, cfg.at("model"));
  auto pairs = load_split(root, split);
  persist_config(cfg, args.out_dir);
  auto outcome = run_eval(model, pairs, ecfg, args.out_dir);
  std::cout << "mean F1 " << outcome.overall_f1 << " over " << pairs.size() << " pairs ("
            << outcome.failures << " failures)\n";
  return outcome.failures == 0 ? 0 : 3;
}

// ---- sweep ----

struct SweepRun {
  std::string name;
  std::vector<std::string> extra_overrides;
};

int cmd_sweep(const CommonArgs& args, const std::string& grid_json, bool ablations, int parallel) {
  json cfg = effective_config(args);
  std::string root = resolve_data_root(args.data_root, cfg);

  std::vector<SweepRun> runs;
  runs.push_back({"default", {}});
  if (!grid_json.empty()) {
    json grid = json::parse(grid_json, nullptr, false);
    if (grid.is_discarded() || !grid.is_object())
      throw ConfigError("sweep: --grid must be a JSON object of key -> [values]");
    for (auto it = grid.begin(); it != grid.end(); ++it) {
      if (!it.value().is_array()) throw ConfigError("sweep: grid values must be arrays");
      for (const auto& v : it.value()) {
        std::string value = v.is_string() ? v.get<std::string>() : v.dump();
        std::string name = it.key() + "=" + value;
        for (auto& ch : name)
          if (ch == '.' || ch == '/' || ch == ' ') ch = '_';
        runs.push_back({name, {it.key() + "=" + value}});
      }
    }
  }
  if (ablations) {
    runs.push_back({"wo_at", {"model.encoder.at_enabled=false"}});
    runs.push_back({"wo_csp", {"model.fusion.use_csp=false"}});
    runs.push_back({"wo_cf", {"model.fusion.use_cf=false"}});
    runs.push_back({"wo_cf_csp", {"model.fusion.use_cf=false", "model.fusion.use_csp=false"}});
  }

  auto train_pairs = load_split(root, "train");
  auto test_pairs = load_split(root, "test");
  fs::create_directories(args.out_dir);
  persist_config(cfg, args.out_dir);

  std::mutex io_mutex;
  std::vector<std::pair<std::string, double>> table(runs.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= runs.size()) break;
      const auto& run = runs[i];
      CommonArgs run_args = args;
      for (const auto& o : run.extra_overrides) run_args.overrides.push_back(o);
      json run_cfg = effective_config(run_args);
      std::string run_dir = (fs::path(args.out_dir) / ("run_" + run.name)).string();

      VscdNet<float> model(model_config_from_json(run_cfg.at("model")));
      TrainConfig tc = train_config_from_json(run_cfg.at("train"));
      EvalConfig ecfg = eval_config_from_json(run_cfg.at("eval"));
      persist_config(run_cfg, run_dir);
      auto result = train(model, train_pairs, tc, (fs::path(run_dir) / "train_log.jsonl").string());
      save_checkpoint((fs::path(run_dir) / "checkpoint.ckpt").string(), model,
                      run_cfg.at("model"), result.steps, result.loss_history);
      auto outcome = run_eval(model, test_pairs, ecfg, run_dir);
      table[i] = {run.name, outcome.overall_f1};
      std::lock_guard<std::mutex> lock(io_mutex);
      std::cout << "run " << run.name << ": mean F1 " << outcome.overall_f1 << "\n";
    }
  };
  int workers = std::max(1, std::min<int>(parallel, static_cast<int>(runs.size())));
  std::vector<std::thread> threads;
  for (int i = 0; i < workers; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  std::ofstream csv(fs::path(args.out_dir) / "table.csv");
  csv << "run,mean_f1\n";
  std::ofstream md(fs::path(args.out_dir) / "table.md");
  md << "| run | mean F1 |\n|---|---|\n";
  for (const auto& [name, f1] : table) {
    csv << name << "," << f1 << "\n";
    char row[128];
    std::snprintf(row, sizeof(row), "| %s | %.4f |\n", name.c_str(), f1);
    md << row;
  }
  return 0;
}

// ---- report ----

int cmd_report(const std::string& eval_dir, const std::string& out_dir) {
  std::ifstream f(fs::path(eval_dir) / "report.json");
  if (!f) throw DataError("report: missing report.json in " + eval_dir);
  json rep = json::parse(f);
  fs::create_directories(out_dir);

  {
    std::ofstream curve(fs::path(out_dir) / "f1_vs_threshold.csv");
    curve << "threshold,mean_f1\n";
    for (const auto& pt : rep.at("f1_vs_threshold"))
      curve << pt.at(0).get<double>() << "," << pt.at(1).get<double>() << "\n";
  }
  {
    // minimal SVG polyline of the threshold curve
    const auto& pts = rep.at("f1_vs_threshold");
    std::ofstream svg(fs::path(out_dir) / "f1_vs_threshold.svg");
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='400' height='300' "
           "viewBox='0 0 400 300'>\n";
    svg << "<rect width='400' height='300' fill='white'/>\n<polyline fill='none' "
           "stroke='black' points='";
    for (const auto& pt : pts) {
      double x = 40 + pt.at(0).get<double>() * 320;
      double y = 280 - pt.at(1).get<double>() * 260;
      svg << x << "," << y << " ";
    }
    svg << "'/>\n<text x='150' y='295' font-size='12'>threshold</text>\n"
           "<text x='5' y='150' font-size='12' transform='rotate(-90 12 150)'>F1</text>\n</svg>\n";
  }
  for (auto it = rep.at("anomaly_scores").begin(); it != rep.at("anomaly_scores").end(); ++it) {
    std::ofstream series(fs::path(out_dir) / ("anomaly_pair" + it.key() + ".csv"));
    series << "keyframe,anomaly_score\n";
    int t = 0;
    for (const auto& v : it.value()) series << t++ << "," << v.get<double>() << "\n";
  }
  {
    std::ofstream md(fs::path(out_dir) / "tables.md");
    auto table = [&md](const char* title, const json& bins) {
      md << "## " << title << "\n\n| bin | frames | mean F1 |\n|---|---|---|\n";
      for (const auto& b : bins)
        md << "| " << b.at("bin").get<std::string>() << " | " << b.at("frames").get<int>() << " | "
           << b.at("mean_f1").get<double>() << " |\n";
      md << "\n";
    };
    table("By video length", rep.at("by_length"));
    table("By change count", rep.at("by_change_count"));
    table("By change-mask size", rep.at("by_size"));
  }
  std::cout << "report artifacts written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vscd: video scene change detection at desk scale"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, infer_args, eval_args, sweep_args;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, gen_args);

  auto* train = app.add_subcommand("train", "train the model on a dataset split");
  add_common(train, train_args);
  std::string train_split = "train";
  train->add_option("--data", train_args.data_root, "dataset root");
  train->add_option("--split", train_split, "train|test|all");

  auto* infer = app.add_subcommand("infer", "run one pair and write mask files");
  add_common(infer, infer_args);
  std::string infer_ckpt;
  int infer_pair = 0;
  bool dump_probs = false, dump_align = false;
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--data", infer_args.data_root, "dataset root");
  infer->add_option("--pair-id", infer_pair, "pair id")->required();
  infer->add_flag("--dump-probs", dump_probs, "also write probability planes");
  infer->add_flag("--dump-alignment", dump_align, "also write the S/A/P alignment dump");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(eval, eval_args);
  std::string eval_ckpt, eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_args.data_root, "dataset root");
  eval->add_option("--split", eval_split, "train|test|all");

  auto* sweep = app.add_subcommand("sweep", "one-at-a-time hyper-parameter/ablation study");
  add_common(sweep, sweep_args);
  std::string grid_json;
  bool ablations = false;
  int parallel = 1;
  sweep->add_option("--data", sweep_args.data_root, "dataset root");
  sweep->add_option("--grid", grid_json, "JSON object: dotted key -> array of values");
  sweep->add_flag("--ablations", ablations, "add AT/C_f/C_sp ablation rows");
  sweep->add_option("--parallel", parallel, "concurrent runs (default 1)");

  auto* report = app.add_subcommand("report", "emit plots/tables from an eval directory");
  std::string report_eval_dir, report_out;
  report->add_option("--eval", report_eval_dir, "eval output directory")->required();
  report->add_option("--out", report_out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen(gen_args);
    if (train->parsed()) return cmd_train(train_args, train_split);
    if (infer->parsed())
      return cmd_infer(infer_args, infer_ckpt, infer_pair, dump_probs, dump_align);
    if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_split);
    if (sweep->parsed()) return cmd_sweep(sweep_args, grid_json, ablations, parallel);
    if (report->parsed()) return cmd_report(report_eval_dir, report_out);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
