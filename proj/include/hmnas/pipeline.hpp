#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hmnas/config.hpp"
#include "hmnas/dataset.hpp"
#include "hmnas/derive.hpp"
#include "hmnas/finetune.hpp"
#include "hmnas/trainer.hpp"

namespace hmnas {

enum class Stage { train_supernet, search_mask, finetune, derive, eval };
const char* stage_name(Stage s);
std::optional<Stage> parse_stage(std::string_view name);

using Logger = std::function<void(const std::string&)>;

/// The dataset split three ways. `pool` holds train+val with statistics of
/// its own; `test` is held out and normalized with the pool statistics.
/// `split` indexes into `pool` exactly as the supernet trainer splits it.
struct ExperimentData {
  Dataset pool;
  Dataset test;
  DataSplit split;
};
ExperimentData prepare_data(const ExperimentConfig& cfg);

// Sets search.in_channels / num_classes from the data.
ExperimentConfig bind_to_data(ExperimentConfig cfg, const Dataset& data);

// Keys that influence a stage's artifacts; a checkpoint is only reused
// (or resumed) when its recorded fingerprint matches.
std::string stage_fingerprint(const ExperimentConfig& cfg, Stage s);

struct StagePaths {
  std::filesystem::path dir;
  std::filesystem::path supernet() const { return dir / "supernet.ckpt"; }
  std::filesystem::path masks() const { return dir / "masks.ckpt"; }
  std::filesystem::path final_model() const { return dir / "final.ckpt"; }
};

struct ModelScore {
  std::string model;
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t params = 0;
};

struct EvalReport {
  ModelScore supernet;  // unmasked, supernet weights
  ModelScore masked;    // masks applied, before fine-tuning
  ModelScore final;     // after fine-tuning
  double params_fraction = 0.0;  // final.params / supernet.params
};

/// Runs the given stages in order, reusing any matching checkpoint found in
/// cfg.out. Throws PrerequisiteError when a stage's input is missing.
void run_pipeline(const ExperimentConfig& cfg, std::span<const Stage> stages, const Logger& log = {});
EvalReport run_eval(const ExperimentConfig& cfg, const Logger& log = {});

struct AblationRow {
  std::string arm;
  std::string description;
  int runs = 0;
  double test_error_mean = 0.0;
  double test_error_std = 0.0;  // sample standard deviation, 0 for one run
  double params = 0.0;
  double epochs_to_target = 0.0;  // mean; infinity if some run never got there
};

/// Five arms on one supernet: hierarchical masks, multi- and single-level
/// heuristics, random architectures and hierarchical masks from a random
/// initialization. Writes ablation.csv to cfg.out.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const Logger& log = {});

inline const char* kAblationHeader = "arm,description,runs,test_error_mean,test_error_std,params,epochs_to_target";
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace hmnas
