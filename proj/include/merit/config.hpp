#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "merit/model.hpp"
#include "merit/optim.hpp"

namespace merit {

/// Where training text comes from: a byte file, or a synthetic Markov
/// stream when corpus_path is empty.
struct DataSpec {
  std::string corpus_path;
  std::size_t synthetic_length = 200000;
  std::size_t synthetic_order = 1;
  /// Distinct successors per context; entropy of the stream is ln(branching).
  std::size_t synthetic_branching = 4;

  friend bool operator==(const DataSpec &, const DataSpec &) = default;
};

enum class Precision { f32, f64 };

struct TrainConfig {
  ModelConfig model;
  OptimizerKind optimizer = OptimizerKind::merit;
  HyperParams hp;
  MeritOptions merit;
  VectorPolicy vector_policy = VectorPolicy::weightwise;
  Schedule sched;
  std::size_t batch_size_sequences = 8;
  std::size_t grad_accum_steps = 1;
  DataSpec data;
  std::uint64_t seed = 0;
  std::int64_t eval_interval = 100;
  std::int64_t log_interval = 10;
  /// Validation batches per evaluation (fixed windows, same every time).
  std::size_t eval_batches = 4;
  std::string out_dir = "runs/default";
  std::string run_id;
  Precision precision = Precision::f64;
  /// Wall time makes metrics files differ between reruns, so it is opt-in.
  bool log_wall_time = false;

  std::size_t effective_batch() const {
    return batch_size_sequences * grad_accum_steps;
  }
  std::size_t tokens_per_step() const {
    return effective_batch() * model.context_len;
  }

  /// Throws ConfigError describing the first invalid field.
  void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment. Errors are
/// ConfigError with "<origin>:<line>: ..." context. Unknown keys are errors.
///
/// `preset = chinchilla` sets sched.total_steps to about 20 training tokens
/// per parameter unless sched.total_steps is given explicitly.
TrainConfig parse_config(std::string_view text,
                         const std::string &origin = "<config>");

/// Reads and parses a config file. Throws IoError naming the path when the
/// file cannot be read.
TrainConfig load_config(const std::filesystem::path &path);

/// Number of trainable scalars of a model with this shape.
std::size_t parameter_count(const ModelConfig &cfg);

/// Steps for ~20 tokens per parameter at the config's tokens per step.
std::int64_t chinchilla_steps(const TrainConfig &cfg);

std::string_view to_string(Precision p);

} // namespace merit
