#include "reltopo/report.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "reltopo/error.hpp"

namespace reltopo::report {

std::vector<TableRow> load_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<TableRow> rows;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& r : j.at("rows")) {
      rows.push_back({r.at("subset").get<std::string>(), r.at("method").get<std::string>(), r.at("det_l").get<double>(),
                      r.at("det_t").get<double>(), r.at("top_ll").get<double>(), r.at("top_lt").get<double>(),
                      r.at("ols").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return rows;
}

namespace {

double pct_ols(double dl, double dt, double tll, double tlt) {
  auto c = [](double v) { return std::clamp(v / 100.0, 0.0, 1.0); };
  return 100.0 * eval::ols(c(dl), c(dt), c(tll), c(tlt));
}

}  // namespace

OlsCheck check_ols(const TableRow& row, double tolerance, double rounding) {
  OlsCheck c;
  c.row = row;
  c.recomputed = pct_ols(row.det_l, row.det_t, row.top_ll, row.top_lt);
  c.within = std::abs(c.recomputed - row.ols) <= tolerance;
  // ols is increasing in every component, so the corners bound it.
  c.reachable_min = pct_ols(row.det_l - rounding, row.det_t - rounding, row.top_ll - rounding, row.top_lt - rounding);
  c.reachable_max = pct_ols(row.det_l + rounding, row.det_t + rounding, row.top_ll + rounding, row.top_lt + rounding);
  c.consistent_with_rounding = c.reachable_max >= row.ols - rounding && c.reachable_min <= row.ols + rounding;
  return c;
}

void write_ols_table(const std::vector<OlsCheck>& checks, std::ostream& os) {
  os << "| subset | method | DET_l | DET_t | TOP_ll | TOP_lt | OLS (published) | OLS (recomputed) | diff | reachable | status |\n"
     << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  char buf[320];
  for (const auto& c : checks) {
    const auto& r = c.row;
    std::snprintf(buf, sizeof buf, "| %s | %s | %.1f | %.1f | %.1f | %.1f | %.1f | %.3f | %+.3f | [%.3f, %.3f] | %s |\n",
                  r.subset.c_str(), r.method.c_str(), r.det_l, r.det_t, r.top_ll, r.top_lt, r.ols, c.recomputed,
                  c.recomputed - r.ols, c.reachable_min, c.reachable_max,
                  c.within ? "ok" : (c.consistent_with_rounding ? "off (rounding)" : "off (inconsistent)"));
    os << buf;
  }
}

void write_ablation_table(const std::vector<experiment::AblationSummary>& rows, const std::vector<std::uint64_t>& seeds,
                          std::size_t train_scenes, std::size_t test_scenes, std::ostream& os) {
  os << "| variant | runs | DET_l | DET_t | TOP_ll | TOP_lt | OLS |\n|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& s : rows) {
    const auto& m = s.mean;
    std::snprintf(buf, sizeof buf, "| %s | %zu | %.2f | %.2f | %.2f ± %.2f | %.2f | %.2f |\n", s.variant.c_str(), s.runs,
                  100 * m.det_l, 100 * m.det_t, 100 * m.top_ll, 100 * s.top_ll_std, 100 * m.top_lt, 100 * m.ols);
    os << buf;
  }
  os << "\nseeds:";
  for (auto s : seeds) os << " " << s;
  os << " (shared by every variant); train scenes " << train_scenes << ", held-out scenes " << test_scenes << "\n";
}

}  // namespace reltopo::report
