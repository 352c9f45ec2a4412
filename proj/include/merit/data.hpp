#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "merit/config.hpp"
#include "merit/model.hpp"

namespace merit {

/// Byte tokens split into training and validation parts.
struct Corpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> val;
};

/// Splits a token stream: the last floor(5%) tokens are validation.
Corpus split_tokens(std::vector<std::int32_t> tokens);

/// Reads a file as bytes 0..255. Throws IoError for a missing, unreadable
/// or empty file.
Corpus load_corpus(const std::filesystem::path &path);

/// Order-k Markov byte stream. Each context (the previous `order` bytes)
/// has `branching` distinct successors, drawn uniformly, so the best
/// achievable loss is ln(branching). Throws DomainError on invalid sizes.
std::vector<std::int32_t> synth_corpus(std::uint64_t seed, std::size_t length,
                                       std::size_t order,
                                       std::size_t branching = 4);

/// Loads `spec.corpus_path` when set, otherwise synthesizes a stream from `seed`.
Corpus make_corpus(const DataSpec &spec, std::uint64_t seed);

struct Batch {
  TokenBatch tokens;
  TokenBatch targets;
};

/// `batch` windows of length `len` at offsets drawn from
/// SeededRng(stream).derive(index); targets are the windows shifted by one.
/// Throws DomainError when the split is shorter than len + 1.
Batch next_batch(std::span<const std::int32_t> split, std::uint64_t stream,
                 std::uint64_t index, std::size_t batch, std::size_t len);

} // namespace merit
