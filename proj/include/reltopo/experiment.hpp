#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "reltopo/evaluation.hpp"
#include "reltopo/model.hpp"
#include "reltopo/run_config.hpp"
#include "reltopo/training.hpp"

namespace reltopo::experiment {

/// Rasters and targets for every scene, built in parallel.
std::vector<train::PreparedScene> prepare_all(const std::vector<scenes::Scene>& scenes,
                                              const scenes::SceneConfig& cfg);

struct TrainedModel {
  Model model;
  std::vector<train::StepRecord> records;
};

/// Builds the model from the config seed and trains it.
TrainedModel train_model(const RunConfig& cfg, const std::vector<train::PreparedScene>& data,
                         std::ostream* log = nullptr);

std::vector<eval::ScenePrediction> predict_all(const Model& model, const std::vector<train::PreparedScene>& data);
eval::MetricsReport evaluate_model(const Model& model, const std::vector<train::PreparedScene>& data);

/// First `count - holdout` scenes train, the rest evaluate.
std::size_t holdout_split(std::size_t count, double holdout_fraction);

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  eval::MetricsReport report;
  double final_loss = 0.0;
};

/// Trains every configured variant for seeds cfg.seed, cfg.seed + 1, ...
/// and evaluates each on `test`.
std::vector<AblationRun> run_ablation(const RunConfig& cfg, const std::vector<train::PreparedScene>& train_set,
                                      const std::vector<train::PreparedScene>& test_set, std::ostream* log = nullptr);

struct AblationSummary {
  std::string variant;
  std::size_t runs = 0;
  eval::MetricsReport mean;  // metric fields only
  double top_ll_std = 0.0;
};

/// Variant order follows first appearance in `runs`.
std::vector<AblationSummary> summarize(const std::vector<AblationRun>& runs);

void write_ablation_csv(const std::vector<AblationRun>& runs, std::ostream& os);

/// Precision-recall curve as a standalone SVG.
void write_pr_svg(const eval::ApResult& curve, const std::string& title, const std::filesystem::path& path);
/// Overlaid histograms of matched and unmatched lane confidences.
void write_score_histogram_svg(const std::vector<double>& matched, const std::vector<double>& unmatched,
                               const std::filesystem::path& path, std::size_t bins = 20);

}  // namespace reltopo::experiment
