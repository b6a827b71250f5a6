// Command-line front end. Every command writes config.json (the fully
// resolved config) into --out before doing any work.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "reltopo/error.hpp"
#include "reltopo/experiment.hpp"
#include "reltopo/gradcheck.hpp"
#include "reltopo/parallel.hpp"
#include "reltopo/parameters.hpp"
#include "reltopo/report.hpp"
#include "reltopo/run_config.hpp"
#include "reltopo/scenes.hpp"

namespace fs = std::filesystem;
using namespace reltopo;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4, kFailedCheck = 5 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> steps;
  std::string out = "out";
  bool plain_sa = false, no_curve_ca = false, baseline_l2l = false, baseline_l2t = false, no_contrastive = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_steps, bool with_flags) {
  cmd->add_option("--config", c.config, "JSON run config (defaults apply to missing keys)");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory");
  if (with_steps) cmd->add_option("--steps", c.steps, "overrides train.steps");
  if (with_flags) {
    cmd->add_flag("--plain-sa,--plain_sa", c.plain_sa, "plain self-attention (no geometry bias)");
    cmd->add_flag("--no-curve-ca,--no_curve_ca", c.no_curve_ca, "control points as cross-attention references");
    cmd->add_flag("--baseline-l2l,--baseline_l2l", c.baseline_l2l, "MLP pair head for lane-lane topology");
    cmd->add_flag("--baseline-l2t,--baseline_l2t", c.baseline_l2t, "MLP pair head for lane-TE topology");
    cmd->add_flag("--no-contrastive,--no_contrastive", c.no_contrastive, "drop the InfoNCE term");
  }
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.steps) cfg.train.steps = *c.steps;
  auto& f = cfg.model.flags;
  f.plain_sa |= c.plain_sa;
  f.no_curve_ca |= c.no_curve_ca;
  f.baseline_l2l |= c.baseline_l2l;
  f.baseline_l2t |= c.baseline_l2t;
  f.no_contrastive |= c.no_contrastive;
  cfg.validate();
  return cfg;
}

fs::path begin(const Common& c, const RunConfig& cfg) {
  const fs::path out(c.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create " + out.string() + ": " + ec.message());
  write_run_config(cfg, out / "config.json");
  return out;
}

std::ofstream open_file(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw DataError("cannot write " + p.string());
  return f;
}

std::vector<scenes::Scene> dataset_or_generate(const std::string& data, const RunConfig& cfg) {
  if (!data.empty()) return scenes::load_dataset(data);
  std::vector<scenes::Scene> s(cfg.dataset_count);
  parallel_for(s.size(), [&](std::size_t i) { s[i] = scenes::generate_scene(cfg.scene, cfg.seed + i); });
  return s;
}

void write_metrics(const eval::MetricsReport& r, const fs::path& out, bool plots) {
  auto txt = open_file(out / "metrics.txt");
  r.write_text(txt);
  auto csv = open_file(out / "metrics.csv");
  csv << eval::MetricsReport::csv_header() << "\n" << r.csv_row() << "\n";
  if (plots) {
    experiment::write_pr_svg(r.det_l_curve, "lane PR @1.0m", out / "pr_lanes.svg");
    experiment::write_score_histogram_svg(r.matched_scores, r.unmatched_scores, out / "lane_scores.svg");
  }
}

int cmd_generate(const Common& c, std::size_t count) {
  RunConfig cfg = resolve(c);
  cfg.dataset_count = count;
  const fs::path out = begin(c, cfg);
  const auto entries = scenes::generate_dataset(cfg.scene, cfg.seed, count, out);
  std::cout << "generated " << entries.size() << " scenes in " << out.string() << "\n";
  return kOk;
}

int cmd_train(const Common& c, const std::string& data) {
  const RunConfig cfg = resolve(c);
  const fs::path out = begin(c, cfg);
  const auto data_set = experiment::prepare_all(dataset_or_generate(data, cfg), cfg.scene);
  Model model = Model::create(cfg.resolved_model(), cfg.seed);
  auto log = open_file(out / "train.log");
  train::StepCallback cb;
  if (cfg.eval_every > 0) {
    cb = [&](const train::StepRecord& rec, const Model& m) {
      if (rec.step % cfg.eval_every != 0) return;
      char name[64];
      std::snprintf(name, sizeof name, "metrics_step%06llu.txt", static_cast<unsigned long long>(rec.step));
      auto f = open_file(out / name);
      experiment::evaluate_model(m, data_set).write_text(f);
    };
  }
  const auto records = train::train(model, data_set, cfg.resolved_train(), cfg.weights, cfg.resolved_loss(), &log, cb);
  save_checkpoint(model.params, out / "checkpoint.bin");
  write_metrics(experiment::evaluate_model(model, data_set), out, false);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", records.empty() ? 0.0 : records.back().total);
  std::cout << "trained " << records.size() << " steps on " << data_set.size() << " scenes, final loss " << buf << "\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data, bool plots) {
  const RunConfig cfg = resolve(c);
  const fs::path out = begin(c, cfg);
  Model model = Model::create(cfg.resolved_model(), cfg.seed);
  load_checkpoint(model.params, checkpoint);
  const auto data_set = experiment::prepare_all(dataset_or_generate(data, cfg), cfg.scene);
  const auto report = experiment::evaluate_model(model, data_set);
  write_metrics(report, out, plots);
  report.write_text(std::cout);
  return kOk;
}

int cmd_gradcheck(const Common& c, int cases) {
  const RunConfig cfg = resolve(c);
  const fs::path out = begin(c, cfg);
  const auto results = gradcheck::run_suite(cases, cfg.seed);
  auto f = open_file(out / "gradcheck.txt");
  bool ok = true;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-26s %6s %14s %s\n", "op", "cases", "max_rel_err", "status");
  std::cout << buf;
  f << buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-26s %6d %14.3e %s%s%s\n", r.name.c_str(), r.cases, r.max_rel_error,
                  r.passed ? "PASS" : "FAIL", r.failure.empty() ? "" : " ", r.failure.c_str());
    std::cout << buf;
    f << buf;
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailedCheck;
}

int cmd_ablate(const Common& c, const std::string& data, std::optional<std::size_t> seeds,
               const std::vector<std::string>& variants) {
  RunConfig cfg = resolve(c);
  if (seeds) cfg.ablation_seeds = *seeds;
  if (!variants.empty()) cfg.ablation_variants = variants;
  cfg.validate();
  const fs::path out = begin(c, cfg);
  auto all = experiment::prepare_all(dataset_or_generate(data, cfg), cfg.scene);
  const std::size_t split = experiment::holdout_split(all.size(), cfg.holdout_fraction);
  std::vector<train::PreparedScene> test(std::make_move_iterator(all.begin() + split), std::make_move_iterator(all.end()));
  all.resize(split);
  auto log = open_file(out / "ablation.log");
  const auto runs = experiment::run_ablation(cfg, all, test, &log);
  auto csv = open_file(out / "ablation.csv");
  experiment::write_ablation_csv(runs, csv);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t k = 0; k < cfg.ablation_seeds; ++k) seed_list.push_back(cfg.seed + k);
  auto md = open_file(out / "ablation.md");
  const auto summary = experiment::summarize(runs);
  report::write_ablation_table(summary, seed_list, all.size(), test.size(), md);
  report::write_ablation_table(summary, seed_list, all.size(), test.size(), std::cout);
  return kOk;
}

int cmd_report(const Common& c, const std::string& table, const std::vector<std::string>& metrics, bool strict) {
  const RunConfig cfg = resolve(c);
  const fs::path out = begin(c, cfg);
  if (table.empty() && metrics.empty()) throw ConfigError("report needs --table or --metrics");
  auto md = open_file(out / "report.md");
  bool ok = true;
  if (!table.empty()) {
    std::vector<report::OlsCheck> checks;
    for (const auto& row : report::load_table(table)) {
      checks.push_back(report::check_ols(row));
      ok = ok && checks.back().within;
    }
    report::write_ols_table(checks, md);
    report::write_ols_table(checks, std::cout);
  }
  if (!metrics.empty()) {
    md << "\n| file | DET_l | DET_t | TOP_ll | TOP_lt | OLS |\n|---|---|---|---|---|---|\n";
    for (const auto& m : metrics) {
      std::ifstream in(m);
      if (!in) throw DataError("cannot open " + m);
      std::map<std::string, std::string> kv;
      std::string line;
      while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
      }
      for (const char* k : {"DET_l", "DET_t", "TOP_ll", "TOP_lt", "OLS"}) {
        if (!kv.count(k)) throw DataError(m + ": missing " + k);
      }
      md << "| " << m << " | " << kv["DET_l"] << " | " << kv["DET_t"] << " | " << kv["TOP_ll"] << " | " << kv["TOP_lt"]
         << " | " << kv["OLS"] << " |\n";
    }
  }
  return (strict && !ok) ? kFailedCheck : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reltopo: desk-scale lane topology reasoning"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, grad_c, abl_c, rep_c;
  std::size_t count = 200;
  std::string train_data, eval_data, abl_data, checkpoint, table;
  std::vector<std::string> metrics, variants;
  std::optional<std::size_t> seeds;
  int cases = 20;
  bool plots = true, strict = false;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(gen, gen_c, false, false);
  gen->add_option("--count", count, "number of scenes");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, train_c, true, true);
  tr->add_option("--data", train_data, "dataset directory (generated in memory when omitted)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_c, false, true);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset directory");
  ev->add_flag("!--no-plots", plots, "skip the SVG plots");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gc, grad_c, false, false);
  gc->add_option("--cases", cases, "seeded cases per op");

  auto* ab = app.add_subcommand("ablate", "train and compare ablation variants");
  add_common(ab, abl_c, true, false);
  ab->add_option("--data", abl_data, "dataset directory");
  ab->add_option("--seeds", seeds, "seeds per variant");
  ab->add_option("--variants", variants, "subset of baseline,sa,sa_ca,sa_ca_heads,full")->delimiter(',');

  auto* rp = app.add_subcommand("report", "tables from published rows or metrics files");
  add_common(rp, rep_c, false, false);
  rp->add_option("--table", table, "JSON results table; OLS is recomputed per row");
  rp->add_option("--metrics", metrics, "metrics.txt files to tabulate");
  rp->add_flag("--strict", strict, "exit with the failed-check code when any OLS is off");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_c, count);
    if (*tr) return cmd_train(train_c, train_data);
    if (*ev) return cmd_eval(eval_c, checkpoint, eval_data, plots);
    if (*gc) return cmd_gradcheck(grad_c, cases);
    if (*ab) return cmd_ablate(abl_c, abl_data, seeds, variants);
    if (*rp) return cmd_report(rep_c, table, metrics, strict);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
