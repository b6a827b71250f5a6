#include "reltopo/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "reltopo/error.hpp"
#include "reltopo/parallel.hpp"

namespace reltopo::experiment {

std::vector<train::PreparedScene> prepare_all(const std::vector<scenes::Scene>& scenes,
                                              const scenes::SceneConfig& cfg) {
  std::vector<train::PreparedScene> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { out[i] = train::prepare(scenes[i], cfg); });
  return out;
}

TrainedModel train_model(const RunConfig& cfg, const std::vector<train::PreparedScene>& data, std::ostream* log) {
  TrainedModel t{Model::create(cfg.resolved_model(), cfg.seed), {}};
  t.records = train::train(t.model, data, cfg.resolved_train(), cfg.weights, cfg.resolved_loss(), log);
  return t;
}

std::vector<eval::ScenePrediction> predict_all(const Model& model, const std::vector<train::PreparedScene>& data) {
  std::vector<eval::ScenePrediction> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) { out[i] = eval::predict(model, data[i].scene, data[i].grids); });
  return out;
}

eval::MetricsReport evaluate_model(const Model& model, const std::vector<train::PreparedScene>& data) {
  const auto preds = predict_all(model, data);
  std::vector<eval::EvalItem> items;
  items.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) items.push_back({&data[i].scene, &preds[i]});
  return eval::evaluate(items);
}

std::size_t holdout_split(std::size_t count, double holdout_fraction) {
  const auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(count)));
  if (held >= count) throw ConfigError("holdout leaves no training scenes");
  return count - held;
}

namespace {

double tail_mean(const std::vector<train::StepRecord>& r) {
  if (r.empty()) return 0.0;
  const std::size_t n = std::min<std::size_t>(r.size(), 20);
  double s = 0.0;
  for (std::size_t i = r.size() - n; i < r.size(); ++i) s += r[i].total;
  return s / static_cast<double>(n);
}

}  // namespace

std::vector<AblationRun> run_ablation(const RunConfig& cfg, const std::vector<train::PreparedScene>& train_set,
                                      const std::vector<train::PreparedScene>& test_set, std::ostream* log) {
  if (train_set.empty() || test_set.empty()) throw DataError("ablation needs non-empty train and test sets");
  std::vector<AblationRun> runs;
  for (const auto& variant : cfg.ablation_variants) {
    for (std::size_t k = 0; k < cfg.ablation_seeds; ++k) {
      RunConfig rc = cfg;
      const AblationFlags f = ablation_variant(variant);
      rc.model.flags.plain_sa = f.plain_sa;
      rc.model.flags.no_curve_ca = f.no_curve_ca;
      rc.model.flags.baseline_l2l = f.baseline_l2l;
      rc.model.flags.baseline_l2t = f.baseline_l2t;
      rc.model.flags.no_contrastive = f.no_contrastive;
      rc.seed = cfg.seed + k;
      TrainedModel t = train_model(rc, train_set, nullptr);
      AblationRun run{variant, rc.seed, evaluate_model(t.model, test_set), tail_mean(t.records)};
      if (log) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "variant=%s seed=%llu loss=%.6f DET_l=%.4f DET_t=%.4f TOP_ll=%.4f TOP_lt=%.4f OLS=%.4f\n",
                      variant.c_str(), static_cast<unsigned long long>(rc.seed), run.final_loss, run.report.det_l,
                      run.report.det_t, run.report.top_ll, run.report.top_lt, run.report.ols);
        *log << buf << std::flush;
      }
      runs.push_back(std::move(run));
    }
  }
  return runs;
}

std::vector<AblationSummary> summarize(const std::vector<AblationRun>& runs) {
  std::vector<AblationSummary> out;
  std::map<std::string, std::size_t> slot;
  std::vector<std::vector<double>> top;
  for (const auto& r : runs) {
    auto [it, fresh] = slot.try_emplace(r.variant, out.size());
    if (fresh) {
      out.push_back({r.variant, 0, {}, 0.0});
      top.emplace_back();
    }
    auto& s = out[it->second];
    auto& m = s.mean;
    ++s.runs;
    m.det_l += r.report.det_l;
    m.det_t += r.report.det_t;
    m.top_ll += r.report.top_ll;
    m.top_lt += r.report.top_lt;
    m.ols += r.report.ols;
    for (std::size_t i = 0; i < m.det_l_at.size(); ++i) m.det_l_at[i] += r.report.det_l_at[i];
    top[it->second].push_back(r.report.top_ll);
  }
  for (std::size_t v = 0; v < out.size(); ++v) {
    auto& m = out[v].mean;
    const double n = static_cast<double>(out[v].runs);
    m.det_l /= n;
    m.det_t /= n;
    m.top_ll /= n;
    m.top_lt /= n;
    m.ols /= n;
    for (auto& d : m.det_l_at) d /= n;
    double ss = 0.0;
    for (double x : top[v]) ss += (x - m.top_ll) * (x - m.top_ll);
    out[v].top_ll_std = top[v].size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return out;
}

void write_ablation_csv(const std::vector<AblationRun>& runs, std::ostream& os) {
  os << "variant,seed,final_loss," << eval::MetricsReport::csv_header() << "\n";
  char buf[64];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%.10f", r.final_loss);
    os << r.variant << "," << r.seed << "," << buf << "," << r.report.csv_row() << "\n";
  }
}

namespace {

constexpr double kW = 480, kH = 360, kL = 60, kR = 20, kT = 40, kB = 50;

double px(double v) { return kL + v * (kW - kL - kR); }
double py(double v) { return kH - kB - v * (kH - kT - kB); }

void svg_frame(std::ostream& os, const std::string& title, const std::string& xl, const std::string& yl, double ymax) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(0) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\"" << py(1) << "\" stroke=\"black\"/>\n";
  char buf[64];
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    std::snprintf(buf, sizeof buf, "%.2f", f);
    os << "<text x=\"" << px(f) << "\" y=\"" << py(0) + 16 << "\" text-anchor=\"middle\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.3g", f * ymax);
    os << "<text x=\"" << px(0) - 6 << "\" y=\"" << py(f) + 4 << "\" text-anchor=\"end\">" << buf << "</text>\n";
  }
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << xl << "</text>\n";
  os << "<text x=\"16\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kH / 2 << ")\">" << yl
     << "</text>\n";
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_pr_svg(const eval::ApResult& curve, const std::string& title, const std::filesystem::path& path) {
  auto os = open_out(path);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s (AP %.3f)", title.c_str(), curve.ap);
  svg_frame(os, buf, "recall", "precision", 1.0);
  os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"" << px(0) << "," << py(1);
  for (std::size_t i = 0; i < curve.recall.size(); ++i) os << " " << px(curve.recall[i]) << "," << py(curve.precision[i]);
  os << "\"/>\n</svg>\n";
}

void write_score_histogram_svg(const std::vector<double>& matched, const std::vector<double>& unmatched,
                               const std::filesystem::path& path, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  auto count = [&](const std::vector<double>& v) {
    std::vector<double> h(bins, 0.0);
    for (double s : v) h[std::min(bins - 1, static_cast<std::size_t>(std::clamp(s, 0.0, 1.0) * bins))] += 1.0;
    return h;
  };
  const auto hm = count(matched), hu = count(unmatched);
  double top = 1.0;
  for (std::size_t b = 0; b < bins; ++b) top = std::max({top, hm[b], hu[b]});
  auto os = open_out(path);
  svg_frame(os, "lane confidence (matched vs unmatched)", "confidence", "count", top);
  const double bw = 1.0 / static_cast<double>(bins);
  auto bars = [&](const std::vector<double>& h, const char* colour) {
    for (std::size_t b = 0; b < bins; ++b) {
      if (h[b] == 0.0) continue;
      const double x0 = px(b * bw), x1 = px((b + 1) * bw), y = py(h[b] / top);
      os << "<rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << x1 - x0 << "\" height=\"" << py(0) - y
         << "\" fill=\"" << colour << "\" fill-opacity=\"0.5\"/>\n";
    }
  };
  bars(hm, "#2ca02c");
  bars(hu, "#d62728");
  os << "<text x=\"" << px(0.02) << "\" y=\"" << py(0.95) << "\" fill=\"#2ca02c\">matched " << matched.size() << "</text>\n";
  os << "<text x=\"" << px(0.02) << "\" y=\"" << py(0.88) << "\" fill=\"#d62728\">unmatched " << unmatched.size()
     << "</text>\n</svg>\n";
}

}  // namespace reltopo::experiment
