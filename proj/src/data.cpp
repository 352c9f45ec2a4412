#include "merit/data.hpp"

#include <fstream>
#include <iterator>
#include <string>

#include "merit/errors.hpp"
#include "merit/rng.hpp"

namespace merit {

Corpus split_tokens(std::vector<std::int32_t> tokens) {
  const std::size_t n_val = tokens.size() / 20;
  Corpus c;
  c.val.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_val), tokens.end());
  tokens.resize(tokens.size() - n_val);
  c.train = std::move(tokens);
  return c;
}

Corpus load_corpus(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read corpus '" + path.string() + "'");
  }
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw IoError("error while reading corpus '" + path.string() + "'");
  }
  if (bytes.empty()) {
    throw IoError("corpus '" + path.string() + "' is empty");
  }
  std::vector<std::int32_t> tokens;
  tokens.reserve(bytes.size());
  for (char b : bytes) {
    tokens.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(b)));
  }
  return split_tokens(std::move(tokens));
}

std::vector<std::int32_t> synth_corpus(std::uint64_t seed, std::size_t length,
                                       std::size_t order,
                                       std::size_t branching) {
  if (order == 0) {
    throw DomainError("synth_corpus: order must be at least 1");
  }
  if (branching == 0 || branching > 256) {
    throw DomainError("synth_corpus: branching must lie in [1, 256]");
  }
  if (length <= order) {
    throw DomainError("synth_corpus: length must exceed order");
  }
  SeededRng rng(seed);
  const std::uint64_t table_key = mix64(seed ^ 0x7ab1e5eedULL);
  std::vector<std::int32_t> out;
  out.reserve(length);
  for (std::size_t i = 0; i < order; ++i) {
    out.push_back(static_cast<std::int32_t>(rng.below(256)));
  }
  while (out.size() < length) {
    std::uint64_t h = table_key;
    for (std::size_t i = out.size() - order; i < out.size(); ++i) {
      h = mix64(h ^ static_cast<std::uint64_t>(out[i]));
    }
    // Successors start + k * stride (mod 256) are distinct for odd strides.
    const std::uint64_t start = h & 0xff;
    const std::uint64_t stride = ((h >> 8) & 0xff) | 1;
    const std::uint64_t k = rng.below(branching);
    out.push_back(static_cast<std::int32_t>((start + k * stride) & 0xff));
  }
  return out;
}

Corpus make_corpus(const DataSpec &spec, std::uint64_t seed) {
  if (!spec.corpus_path.empty()) {
    return load_corpus(spec.corpus_path);
  }
  return split_tokens(synth_corpus(seed, spec.synthetic_length,
                                   spec.synthetic_order,
                                   spec.synthetic_branching));
}

Batch next_batch(std::span<const std::int32_t> split, std::uint64_t stream,
                 std::uint64_t index, std::size_t batch, std::size_t len) {
  if (split.size() < len + 1) {
    throw DomainError("next_batch: split has " + std::to_string(split.size()) +
                      " tokens, need at least " + std::to_string(len + 1));
  }
  SeededRng rng = SeededRng(stream).derive(index);
  Batch b{{batch, len, {}}, {batch, len, {}}};
  b.tokens.ids.reserve(batch * len);
  b.targets.ids.reserve(batch * len);
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t start = rng.below(split.size() - len);
    for (std::size_t t = 0; t < len; ++t) {
      b.tokens.ids.push_back(split[start + t]);
      b.targets.ids.push_back(split[start + t + 1]);
    }
  }
  return b;
}

} // namespace merit
