#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "merit/rng.hpp"
#include "merit/tensor.hpp"

namespace merit {

struct ModelConfig {
  std::size_t n_layer = 2;
  std::size_t n_head = 2;
  std::size_t d_model = 64;
  std::size_t context_len = 32;
  std::size_t vocab_size = 256;
  bool qk_norm = false;

  std::size_t head_dim() const { return d_model / n_head; }

  /// Throws ConfigError when a field is zero or d_model % n_head != 0.
  void validate() const;

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

/// Ordered, named collection of tensors. Insertion order is the canonical
/// parameter order (checkpoints, flattening, optimizer state).
template <typename T> class ParamSet {
public:
  std::size_t add(std::string name, Tensor<T> tensor);

  std::size_t size() const { return tensors_.size(); }
  const std::string &name(std::size_t i) const { return names_.at(i); }
  Tensor<T> &operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<T> &operator[](std::size_t i) const { return tensors_[i]; }

  std::optional<std::size_t> find(const std::string &name) const;
  /// Throws std::out_of_range for an unknown name.
  Tensor<T> &at(const std::string &name);
  const Tensor<T> &at(const std::string &name) const;

  /// Same names and shapes, all elements zero.
  ParamSet zeros_like() const;

  std::size_t numel() const;

  friend bool operator==(const ParamSet &a, const ParamSet &b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Token ids, row-major [batch x len].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;

  std::int32_t operator()(std::size_t b, std::size_t t) const {
    return ids[b * len + t];
  }
  friend bool operator==(const TokenBatch &, const TokenBatch &) = default;
};

struct AttentionProbe {
  std::size_t layer_index = 0;
  /// Max pre-softmax logit over batch, heads and causally visible positions.
  double max_logit = 0.0;
  /// Mean Shannon entropy (nats) of the attention rows.
  double attention_entropy = 0.0;
};

/// Parameter indices of one transformer block inside the ParamSet.
struct BlockSlots {
  std::size_t ln1_gain, wq, wk, wv, wo, ln2_gain, mlp_in, mlp_out;
};

/// Decoder-only transformer: learned token and position embeddings, pre-LN
/// blocks (causal multi-head attention, 4x GELU MLP), final layer norm and an
/// unembedding tied to the token embedding. No biases, no dropout.
///
/// Weights act on row vectors: y = x W with W stored [in x out].
template <typename T> struct Model {
  ModelConfig config;
  ParamSet<T> params;

  std::size_t token_embedding() const { return 0; }
  std::size_t position_embedding() const { return 1; }
  BlockSlots block(std::size_t layer) const;
  std::size_t final_gain() const { return 2 + 8 * config.n_layer; }
};

/// Parameter names, in canonical order, for a config.
std::vector<std::string> parameter_names(const ModelConfig &cfg);

/// Normal(0, 0.02) weights; attention and MLP output projections use
/// 0.02 / sqrt(2 n_layer); layer norm gains are 1.
template <typename T> Model<T> init_model(const ModelConfig &cfg, SeededRng &rng);

/// Everything the backward pass needs from one forward pass.
template <typename T> struct LayerCache {
  Tensor<T> x_in;       // [N x d] block input
  Tensor<T> xhat1;      // normalized input of ln1
  std::vector<T> rstd1; // [N]
  Tensor<T> h1;         // ln1 output
  Tensor<T> q, k, v;    // [N x d]; q, k after optional QK normalization
  std::vector<T> q_rstd, k_rstd; // [N * n_head] when qk_norm is on
  std::vector<T> att;   // [B x H x T x T] softmax weights, zero above diagonal
  Tensor<T> y;          // attention output before W_O
  Tensor<T> xhat2;
  std::vector<T> rstd2;
  Tensor<T> h2;
  Tensor<T> pre_act; // [N x 4d]
  Tensor<T> act;     // gelu(pre_act)
};

template <typename T> struct ForwardCache {
  TokenBatch tokens;
  std::vector<LayerCache<T>> layers;
  Tensor<T> x_final; // residual stream entering the final norm
  Tensor<T> xhat_f;
  std::vector<T> rstd_f;
  Tensor<T> h_final;
};

template <typename T> struct ForwardResult {
  Tensor<T> logits; // [batch*T x vocab], rows in (b, t) order
  ForwardCache<T> cache;
  std::vector<AttentionProbe> probes;
};

/// Throws InputError on token ids outside the vocabulary or sequences
/// longer than the context.
template <typename T>
ForwardResult<T> forward(const Model<T> &model, const TokenBatch &tokens);

template <typename T> struct LossAndGrads {
  double loss = 0.0;
  ParamSet<T> grads;
  std::vector<AttentionProbe> probes;
};

/// Mean token cross-entropy (nats) without gradients.
template <typename T>
double loss(const Model<T> &model, const TokenBatch &tokens,
            const TokenBatch &targets);

/// Mean token cross-entropy and its exact gradient by reverse mode.
template <typename T>
LossAndGrads<T> loss_and_grads(const Model<T> &model, const TokenBatch &tokens,
                               const TokenBatch &targets);

/// (f(x + eps) - f(x - eps)) / (2 eps).
template <typename F> double central_difference(F &&f, double x, double eps) {
  if (!(eps > 0)) {
    throw DomainError("central_difference: eps must be positive");
  }
  const double up = f(x + eps);
  const double down = f(x - eps);
  return (up - down) / (2.0 * eps);
}

/// (param index, flat element offset).
struct Coordinate {
  std::size_t param = 0;
  std::size_t offset = 0;
};

/// Central difference (f(w + eps e) - f(w - eps e)) / (2 eps) of the loss
/// along one coordinate. The model is perturbed in place and restored.
template <typename T>
double finite_diff_grad(Model<T> &model, const TokenBatch &tokens,
                        const TokenBatch &targets, Coordinate coord,
                        double eps);

} // namespace merit
