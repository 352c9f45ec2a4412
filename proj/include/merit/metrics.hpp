#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace merit {

/// One line of a metrics JSONL file.
struct MetricsRecord {
  std::int64_t step = 0;
  double lr = 0;
  /// Absent (null) on the record that flags a divergence.
  std::optional<double> train_loss;
  std::optional<double> val_loss;
  std::vector<double> per_layer_max_logit;
  std::vector<double> per_layer_attention_entropy;
  /// Mean of per_layer_attention_entropy.
  double mean_attention_entropy = 0;
  double clip_fraction = 0;
  double bound_fraction = 0;
  std::vector<double> per_layer_clip_fraction;
  std::vector<double> per_layer_bound_fraction;
  double global_grad_norm = 0;
  std::int64_t wall_ms = 0;
  std::size_t tokens_per_step = 0;
  bool diverged = false;

  /// Largest per-layer max logit, 0 when there are no layers.
  double peak_max_logit() const;

  friend bool operator==(const MetricsRecord &,
                         const MetricsRecord &) = default;
};

/// Single-line JSON without a trailing newline. Non-finite numbers are
/// written as null.
std::string to_json_line(const MetricsRecord &r);

/// Throws FormatError mentioning "line <line_no>".
MetricsRecord parse_metrics_line(const std::string &line, std::size_t line_no);

/// Parses every non-empty line and checks that steps strictly increase.
std::vector<MetricsRecord> read_metrics(const std::filesystem::path &path);

/// Truncates the file on open; every append is flushed.
class MetricsWriter {
public:
  explicit MetricsWriter(const std::filesystem::path &path);
  void append(const MetricsRecord &r);
  const std::filesystem::path &path() const { return path_; }

private:
  std::filesystem::path path_;
  std::ofstream out_;
};

} // namespace merit
