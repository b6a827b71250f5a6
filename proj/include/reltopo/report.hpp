#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "reltopo/experiment.hpp"

namespace reltopo::report {

/// One published results row on the percentage scale.
struct TableRow {
  std::string subset, method;
  double det_l = 0.0, det_t = 0.0, top_ll = 0.0, top_lt = 0.0, ols = 0.0;
};

/// {"rows": [{"subset", "method", "det_l", "det_t", "top_ll", "top_lt", "ols"}]}
std::vector<TableRow> load_table(const std::filesystem::path& path);

struct OlsCheck {
  TableRow row;
  double recomputed = 0.0;  // ols() on the published components, percentage scale
  bool within = false;      // |recomputed - published| <= tolerance
  // Range of OLS reachable when every component may differ from its printed
  // value by up to half a unit in the last digit.
  double reachable_min = 0.0, reachable_max = 0.0;
  bool consistent_with_rounding = false;
};

OlsCheck check_ols(const TableRow& row, double tolerance = 0.05, double rounding = 0.05);

void write_ols_table(const std::vector<OlsCheck>& checks, std::ostream& os);

/// Rows = variants, columns DET_l DET_t TOP_ll TOP_lt OLS on the 0-100 scale,
/// footer listing the shared seeds.
void write_ablation_table(const std::vector<experiment::AblationSummary>& rows, const std::vector<std::uint64_t>& seeds,
                          std::size_t train_scenes, std::size_t test_scenes, std::ostream& os);

}  // namespace reltopo::report
