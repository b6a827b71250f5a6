#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reltopo/model.hpp"
#include "reltopo/scenes.hpp"
#include "reltopo/training.hpp"

namespace reltopo {

/// Every knob a command can use. Parsing rejects unknown keys; serialising
/// writes every field so the echoed config is fully resolved.
struct RunConfig {
  std::uint64_t seed = 0;
  scenes::SceneConfig scene;
  ModelConfig model;
  train::LossWeights weights;
  train::LossOptions loss;
  train::TrainConfig train;
  std::size_t eval_every = 0;  // steps between training-set reports, 0 = end only

  std::size_t dataset_count = 200;
  double holdout_fraction = 0.2;  // tail of the dataset kept for evaluation by `ablate`

  std::vector<std::string> ablation_variants{"baseline", "sa", "sa_ca", "full"};
  std::size_t ablation_seeds = 3;

  /// Model config with extents, image size and flags resolved from the other sections.
  ModelConfig resolved_model() const;
  /// Loss options with the contrastive switch taken from the ablation flags.
  train::LossOptions resolved_loss() const;
  /// Training config with the top-level seed.
  train::TrainConfig resolved_train() const;
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);
/// Pretty JSON with a trailing newline.
void write_run_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Named ablation variants, baseline (#1 analogue) through full (#7 analogue).
AblationFlags ablation_variant(const std::string& name);
const std::vector<std::string>& ablation_variant_names();

}  // namespace reltopo
