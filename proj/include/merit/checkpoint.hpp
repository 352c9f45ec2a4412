#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "merit/model.hpp"
#include "merit/optim.hpp"

namespace merit {

/// Model weights plus optimizer state after `step` completed steps.
///
/// On disk (little-endian): "MERITCKPT", u32 version, the six ModelConfig
/// fields, i64 step, u8 optimizer kind, u8 element width, u32 tensor count,
/// then per tensor (u32 name length, name, u32 rank, u64 dims, raw data),
/// then i64 optimizer step, u32 moment count and the m and v data of each
/// parameter in order.
template <typename T> struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  OptimizerKind optimizer = OptimizerKind::merit;
  ParamSet<T> params;
  OptimState<T> state;

  Model<T> model() const { return {config, params}; }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T> std::string serialize_checkpoint(const Checkpoint<T> &c);

/// Throws FormatError on a bad magic, version, element width, truncation
/// or trailing bytes.
template <typename T> Checkpoint<T> parse_checkpoint(const std::string &bytes);

/// Writes atomically (temp file, then rename). Throws IoError.
template <typename T>
void save_checkpoint(const Checkpoint<T> &c, const std::filesystem::path &path);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path &path);

/// 4 or 8: the element width stored in a checkpoint file.
unsigned checkpoint_element_width(const std::filesystem::path &path);

/// Loads either width as 64-bit (float -> double is exact).
Checkpoint<double> load_checkpoint_f64(const std::filesystem::path &path);

std::string read_file(const std::filesystem::path &path);

} // namespace merit
