#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "merit/checkpoint.hpp"
#include "merit/config.hpp"
#include "merit/data.hpp"
#include "merit/diagnostics.hpp"
#include "merit/metrics.hpp"
#include "merit/model.hpp"
#include "merit/optim.hpp"

namespace merit {

/// Seeds of the independent random streams of one run.
struct RunStreams {
  std::uint64_t init;
  std::uint64_t train;
  std::uint64_t val;
  std::uint64_t probe;

  static RunStreams from_seed(std::uint64_t seed);
};

/// Mean loss and gradient over micro-batches, each weighted 1/k.
template <typename T>
LossAndGrads<T> accumulate_gradients(const Model<T> &model,
                                     std::span<const Batch> micro_batches);

/// Mean cross-entropy over `batches` fixed windows of a split.
template <typename T>
double evaluate_split(const Model<T> &model,
                      std::span<const std::int32_t> split,
                      std::uint64_t stream, std::size_t batches,
                      std::size_t batch_size);

/// Result of one optimizer step.
struct StepOutcome {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  /// Max logit is the max over micro-batches; entropy is their mean.
  std::vector<AttentionProbe> probes;
  diagnostics::TriggerStats triggers;
  bool diverged = false;
};

/// Step-by-step training of one config on one corpus.
template <typename T> class Trainer {
public:
  /// Throws ConfigError when the corpus cannot supply a full window.
  Trainer(TrainConfig cfg, const Corpus &corpus);

  const TrainConfig &config() const { return cfg_; }
  Model<T> &model() { return model_; }
  const Model<T> &model() const { return model_; }
  Optimizer<T> &optimizer() { return optimizer_; }
  std::int64_t steps_done() const { return steps_done_; }
  bool finished() const { return steps_done_ >= cfg_.sched.total_steps; }

  /// The micro-batches of a 1-based step.
  std::vector<Batch> batches_for_step(std::int64_t step) const;

  /// One full step. After a divergence (non-finite loss or gradient norm)
  /// the parameters are left untouched and the outcome is flagged.
  StepOutcome step();

  /// Validation loss on the fixed evaluation windows.
  double evaluate() const;

  /// Probes of a fixed training batch, the same at every call.
  std::vector<AttentionProbe> probe() const;

  Checkpoint<T> checkpoint() const;

private:
  TrainConfig cfg_;
  const Corpus &corpus_;
  RunStreams streams_;
  Model<T> model_;
  Optimizer<T> optimizer_;
  std::int64_t steps_done_ = 0;
};

struct TrainResult {
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
  std::int64_t steps_run = 0;
  bool diverged = false;
  std::optional<double> first_train_loss;
  std::optional<double> final_train_loss;
  std::optional<double> final_val_loss;
};

/// Runs a config end to end: out_dir/metrics.jsonl and out_dir/final.ckpt.
/// A divergence stops the run, appends a record with "diverged": true and
/// keeps the last finite parameters in the checkpoint.
TrainResult train(const TrainConfig &cfg);

/// Validation (or training) loss of a checkpoint using the data, seed and
/// evaluation settings of `cfg`.
enum class Split { train, val };
double evaluate(const Checkpoint<double> &ckpt, const TrainConfig &cfg,
                Split split = Split::val);

/// Runs configs that differ only in optimizer settings on identical data and
/// writes out_dir/compare.csv with header
/// step,run_id,val_loss,peak_mal,clip_fraction,bound_fraction
/// (one row per run and evaluation step, ordered by step then run).
struct CompareResult {
  std::filesystem::path csv_path;
  std::vector<std::string> run_ids;
  std::vector<TrainResult> runs;
};
CompareResult compare(std::vector<TrainConfig> cfgs,
                      const std::filesystem::path &out_dir);

/// Throws ConfigError unless a and b share model, data, seed, batch layout,
/// schedule and precision.
void check_comparable(const TrainConfig &a, const TrainConfig &b);

/// Peak max attention logit per layer while training a fresh model at one
/// learning rate, measured on a fixed probe batch (step 0 included).
struct SweepRow {
  double lr = 0;
  std::uint64_t seed = 0;
  std::vector<double> initial_max_logit;
  std::vector<double> peak_max_logit;
  double final_loss = 0;
  bool diverged = false;
};

/// Rows sorted by lr (stable in seed order). Uses cfg's model, data and
/// hyperparameters with peak_lr = lr and total_steps = steps.
std::vector<SweepRow> lr_logit_sweep(const TrainConfig &cfg,
                                     std::vector<double> lrs,
                                     std::int64_t steps,
                                     OptimizerKind optimizer,
                                     std::vector<std::uint64_t> seeds = {});

void write_sweep_csv(const std::vector<SweepRow> &rows,
                     const std::filesystem::path &path);

/// Analytic versus central-difference gradients on random coordinates.
struct GradCheckResult {
  std::size_t coords = 0;
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_offset = 0;
};

/// Coordinates cycle through the parameters in order so every group is
/// covered once coords >= #params. `corrupt` perturbs the analytic gradient
/// (negative control).
GradCheckResult gradient_check(const TrainConfig &cfg, std::size_t coords,
                               double eps = 1e-4, bool corrupt = false);

/// |a - n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

} // namespace merit
