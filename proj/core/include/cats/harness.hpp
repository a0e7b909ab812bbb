#pragma once

// Run configuration, optimiser, training loop, evaluation and ablation driver.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cats/data.hpp"
#include "cats/metrics.hpp"
#include "cats/model.hpp"

namespace cats::harness {

// The only environment variable consulted: overrides RunConfig::output_dir.
inline constexpr const char* kOutputDirEnv = "CATS_OUTPUT_DIR";

struct RunConfig {
  ModelConfig model;
  data::SynthSpec synth;
  data::SplitRatios split;
  std::string dataset_dir;  // empty: generate from `synth` under output_dir/data
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 2;
  int max_steps = 200;
  int eval_every = 50;  // 0 evaluates only after the last step
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  void validate() const;
  kv::Record to_record() const;
  // Unknown keys are rejected. Model input extents default to the synthetic
  // volume shape. When `apply_env` is set, CATS_OUTPUT_DIR replaces output_dir.
  static RunConfig from_record(const kv::Record& record, bool apply_env = true);
  static RunConfig load(const std::string& path, bool apply_env = true);
};

// Every key accepted by RunConfig::from_record, with its one-line meaning.
const std::vector<std::pair<std::string, std::string>>& documented_keys();

// Adaptive-moment optimiser with bias correction and constant step size.
template <typename T>
class Adam {
 public:
  Adam(ag::ParameterSet<T>& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);
  // Applies one update from the accumulated gradients; parameters without a
  // gradient are left unchanged.
  void step();
  std::int64_t steps() const noexcept { return t_; }

 private:
  ag::ParameterSet<T>& params_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  double dice_loss = 0.0;
  double cross_entropy = 0.0;
};

struct EvalRecord {
  int step = 0;
  metrics::MetricsReport report;
};

struct RunLog {
  kv::Record config;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  double seconds = 0.0;
  int best_step = 0;
  double best_val_dice = -1.0;
};

struct TrainResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;
  RunLog log;
};

struct TrainOptions {
  bool write_outputs = true;  // checkpoints, loss log and config snapshot under output_dir
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

// Deterministic for a fixed config. Throws DivergenceError on a non-finite loss.
TrainResult train(const RunConfig& config, const data::Dataset& dataset, const TrainOptions& options = {});

// Predicts and scores each listed case; failures are recorded per case.
metrics::MetricsReport evaluate(const CatsModel<float>& model, const data::Dataset& dataset,
                                const std::vector<std::string>& ids);
metrics::MetricsReport evaluate(const Checkpoint& checkpoint, const data::Dataset& dataset,
                                const std::vector<std::string>& ids);

// Mean Dice over foreground classes of the prediction on each case, averaged.
double mean_dice(const CatsModel<float>& model, const data::Dataset& dataset, const std::vector<std::string>& ids);

struct AblationEntry {
  ModelMode mode = ModelMode::kHybrid;
  metrics::MetricsReport report;
  RunLog log;
};

struct AblationReport {
  std::vector<AblationEntry> entries;  // hybrid, cnn_only, swin_only
  std::string split;

  // hybrid minus `mode` mean Dice for foreground class k (0-based); the
  // overall delta when k < 0.
  double dice_delta(ModelMode mode, int k) const;
};

// Trains all three modes with identical seeds and budgets and evaluates the
// best checkpoint of each on `split`.
AblationReport ablate(const RunConfig& config, const data::Dataset& dataset, const std::string& split = "test",
                      const TrainOptions& options = {});
std::string render_ablation(const AblationReport& report);

// Uses dataset_dir when set, otherwise generates (or reuses) output_dir/data.
data::Dataset prepare_dataset(const RunConfig& config);

std::string render_loss_log(const RunLog& log);

}  // namespace cats::harness
