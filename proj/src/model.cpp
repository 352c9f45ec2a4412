#include "merit/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace merit {

void ModelConfig::validate() const {
  if (n_layer == 0 || n_head == 0 || d_model == 0 || context_len == 0 ||
      vocab_size == 0) {
    throw ConfigError("model: n_layer, n_head, d_model, context_len and "
                      "vocab_size must all be positive");
  }
  if (d_model % n_head != 0) {
    throw ConfigError("model: d_model (" + std::to_string(d_model) +
                      ") is not divisible by n_head (" +
                      std::to_string(n_head) + ")");
  }
}

// ---- ParamSet ---------------------------------------------------------------

template <typename T>
std::size_t ParamSet<T>::add(std::string name, Tensor<T> tensor) {
  if (index_.count(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  const std::size_t i = tensors_.size();
  index_.emplace(name, i);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
  return i;
}

template <typename T>
std::optional<std::size_t> ParamSet<T>::find(const std::string &name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    return std::nullopt;
  }
  return it->second;
}

template <typename T> Tensor<T> &ParamSet<T>::at(const std::string &name) {
  auto i = find(name);
  if (!i) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return tensors_[*i];
}

template <typename T>
const Tensor<T> &ParamSet<T>::at(const std::string &name) const {
  auto i = find(name);
  if (!i) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return tensors_[*i];
}

template <typename T> ParamSet<T> ParamSet<T>::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < size(); ++i) {
    out.add(names_[i], Tensor<T>(tensors_[i].shape()));
  }
  return out;
}

template <typename T> std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto &t : tensors_) {
    n += t.numel();
  }
  return n;
}

// ---- construction -------------------------------------------------------------

std::vector<std::string> parameter_names(const ModelConfig &cfg) {
  std::vector<std::string> names{"wte", "wpe"};
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    for (const char *role : {"ln1.g", "attn.wq", "attn.wk", "attn.wv",
                             "attn.wo", "ln2.g", "mlp.w_in", "mlp.w_out"}) {
      names.push_back(p + role);
    }
  }
  names.push_back("ln_f.g");
  return names;
}

template <typename T> BlockSlots Model<T>::block(std::size_t layer) const {
  const std::size_t base = 2 + 8 * layer;
  return {base, base + 1, base + 2, base + 3,
          base + 4, base + 5, base + 6, base + 7};
}

template <typename T>
Model<T> init_model(const ModelConfig &cfg, SeededRng &rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const T std_w = T(0.02);
  const T std_proj = T(0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layer)));
  const auto names = parameter_names(cfg);

  Model<T> model;
  model.config = cfg;
  auto &ps = model.params;
  std::size_t next = 0;
  auto add = [&](Tensor<T> t) { ps.add(names[next++], std::move(t)); };

  add(seeded_normal<T>({cfg.vocab_size, d}, 0, std_w, rng));
  add(seeded_normal<T>({cfg.context_len, d}, 0, std_w, rng));
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    add(Tensor<T>({d}, T{1}));
    add(seeded_normal<T>({d, d}, 0, std_w, rng));
    add(seeded_normal<T>({d, d}, 0, std_w, rng));
    add(seeded_normal<T>({d, d}, 0, std_w, rng));
    add(seeded_normal<T>({d, d}, 0, std_proj, rng));
    add(Tensor<T>({d}, T{1}));
    add(seeded_normal<T>({d, 4 * d}, 0, std_w, rng));
    add(seeded_normal<T>({4 * d, d}, 0, std_proj, rng));
  }
  add(Tensor<T>({d}, T{1}));
  return model;
}

// ---- kernels --------------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;
// QK normalization has no gain to absorb the eps bias, so it uses a much
// smaller eps to keep normalized rows at unit variance.
constexpr double kQkNormEps = 1e-20;

constexpr double kInvSqrt2 = 0.70710678118654752440;

template <typename T> T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2)));
}

template <typename T> T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
  const T pdf = std::exp(T(-0.5) * x * x) *
                T(std::numbers::inv_sqrtpi * kInvSqrt2);
  return cdf + x * pdf;
}

/// Normalizes every `seg`-wide segment of every row of x to zero mean and
/// unit variance. rstd holds one reciprocal std per segment.
template <typename T>
void layer_norm_forward(const Tensor<T> &x, std::size_t seg, T eps,
                        Tensor<T> &xhat, std::vector<T> &rstd) {
  const std::size_t n = x.rows();
  const std::size_t width = x.cols();
  const std::size_t per_row = width / seg;
  xhat = Tensor<T>(x.shape());
  rstd.assign(n * per_row, T{0});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t s = 0; s < per_row; ++s) {
      const T *src = x.data() + r * width + s * seg;
      T *dst = xhat.data() + r * width + s * seg;
      T mean = 0;
      for (std::size_t j = 0; j < seg; ++j) {
        mean += src[j];
      }
      mean /= T(seg);
      T var = 0;
      for (std::size_t j = 0; j < seg; ++j) {
        const T c = src[j] - mean;
        var += c * c;
      }
      var /= T(seg);
      const T inv = T(1) / std::sqrt(var + eps);
      rstd[r * per_row + s] = inv;
      for (std::size_t j = 0; j < seg; ++j) {
        dst[j] = (src[j] - mean) * inv;
      }
    }
  }
}

template <typename T>
Tensor<T> apply_gain(const Tensor<T> &xhat, const Tensor<T> &gain) {
  Tensor<T> out(xhat.shape());
  const std::size_t width = xhat.cols();
  for (std::size_t r = 0; r < xhat.rows(); ++r) {
    for (std::size_t j = 0; j < width; ++j) {
      out(r, j) = xhat(r, j) * gain[j];
    }
  }
  return out;
}

/// Backward of layer_norm_forward. `dy` is the gradient w.r.t. the
/// (gained) output; returns the gradient w.r.t. the input and accumulates
/// into `dgain` when a gain is present.
template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T> &dy, const Tensor<T> &xhat,
                              const std::vector<T> &rstd, std::size_t seg,
                              const Tensor<T> *gain, Tensor<T> *dgain) {
  const std::size_t n = dy.rows();
  const std::size_t width = dy.cols();
  const std::size_t per_row = width / seg;
  Tensor<T> dx(dy.shape());
  std::vector<T> dxhat(seg);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t s = 0; s < per_row; ++s) {
      const std::size_t off = r * width + s * seg;
      T mean_d = 0;
      T mean_dx = 0;
      for (std::size_t j = 0; j < seg; ++j) {
        const T g = dy[off + j];
        const T dh = gain ? g * (*gain)[s * seg + j] : g;
        if (dgain) {
          (*dgain)[s * seg + j] += g * xhat[off + j];
        }
        dxhat[j] = dh;
        mean_d += dh;
        mean_dx += dh * xhat[off + j];
      }
      mean_d /= T(seg);
      mean_dx /= T(seg);
      const T inv = rstd[r * per_row + s];
      for (std::size_t j = 0; j < seg; ++j) {
        dx[off + j] = inv * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
      }
    }
  }
  return dx;
}

template <typename T> void add_into(Tensor<T> &acc, const Tensor<T> &x) {
  for (std::size_t i = 0; i < acc.numel(); ++i) {
    acc[i] += x[i];
  }
}

void validate_tokens(const ModelConfig &cfg, const TokenBatch &tokens) {
  if (tokens.batch == 0 || tokens.len == 0 ||
      tokens.ids.size() != tokens.batch * tokens.len) {
    throw InputError("token batch is empty or its id count does not match "
                     "batch x len");
  }
  if (tokens.len > cfg.context_len) {
    throw InputError("sequence length " + std::to_string(tokens.len) +
                     " exceeds context_len " +
                     std::to_string(cfg.context_len));
  }
  for (auto id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(id) +
                       " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

/// Causal multi-head attention core for one layer. Fills cache.att and
/// cache.y from cache.q/k/v and records the probe.
template <typename T>
void attention_forward(const ModelConfig &cfg, std::size_t batch,
                       std::size_t len, LayerCache<T> &c,
                       AttentionProbe &probe) {
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_head;
  const std::size_t dk = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(dk));
  c.att.assign(batch * heads * len * len, T{0});
  c.y = Tensor<T>({batch * len, d});

  double max_logit = -std::numeric_limits<double>::infinity();
  double entropy_sum = 0.0;
  std::vector<T> z(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T *att = c.att.data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const T *qi = c.q.data() + (b * len + i) * d + h * dk;
        T top = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T *kj = c.k.data() + (b * len + j) * d + h * dk;
          T dot = 0;
          for (std::size_t e = 0; e < dk; ++e) {
            dot += qi[e] * kj[e];
          }
          z[j] = dot * scale;
          top = std::max(top, z[j]);
        }
        max_logit = std::max(max_logit, static_cast<double>(top));
        T sum = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          z[j] = std::exp(z[j] - top);
          sum += z[j];
        }
        const T inv = T(1) / sum;
        T *arow = att + i * len;
        double entropy = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T a = z[j] * inv;
          arow[j] = a;
          if (a > 0) {
            entropy -= static_cast<double>(a) * std::log(static_cast<double>(a));
          }
        }
        entropy_sum += entropy;
        T *yi = c.y.data() + (b * len + i) * d + h * dk;
        for (std::size_t j = 0; j <= i; ++j) {
          const T a = arow[j];
          const T *vj = c.v.data() + (b * len + j) * d + h * dk;
          for (std::size_t e = 0; e < dk; ++e) {
            yi[e] += a * vj[e];
          }
        }
      }
    }
  }
  probe.max_logit = max_logit;
  probe.attention_entropy =
      entropy_sum / static_cast<double>(batch * heads * len);
}

template <typename T>
void attention_backward(const ModelConfig &cfg, std::size_t batch,
                        std::size_t len, const LayerCache<T> &c,
                        const Tensor<T> &dy, Tensor<T> &dq, Tensor<T> &dk_out,
                        Tensor<T> &dv) {
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_head;
  const std::size_t dk = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(dk));
  dq = Tensor<T>({batch * len, d});
  dk_out = Tensor<T>({batch * len, d});
  dv = Tensor<T>({batch * len, d});
  std::vector<T> datt(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T *att = c.att.data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const T *arow = att + i * len;
        const T *dyi = dy.data() + (b * len + i) * d + h * dk;
        T weighted = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T *vj = c.v.data() + (b * len + j) * d + h * dk;
          T *dvj = dv.data() + (b * len + j) * d + h * dk;
          T dot = 0;
          for (std::size_t e = 0; e < dk; ++e) {
            dot += dyi[e] * vj[e];
            dvj[e] += arow[j] * dyi[e];
          }
          datt[j] = dot;
          weighted += arow[j] * dot;
        }
        const T *qi = c.q.data() + (b * len + i) * d + h * dk;
        T *dqi = dq.data() + (b * len + i) * d + h * dk;
        for (std::size_t j = 0; j <= i; ++j) {
          const T dz = arow[j] * (datt[j] - weighted) * scale;
          const T *kj = c.k.data() + (b * len + j) * d + h * dk;
          T *dkj = dk_out.data() + (b * len + j) * d + h * dk;
          for (std::size_t e = 0; e < dk; ++e) {
            dqi[e] += dz * kj[e];
            dkj[e] += dz * qi[e];
          }
        }
      }
    }
  }
}

/// Logits and cache; shared by forward() and the loss paths.
template <typename T>
ForwardResult<T> run_forward(const Model<T> &model, const TokenBatch &tokens) {
  const ModelConfig &cfg = model.config;
  validate_tokens(cfg, tokens);
  const std::size_t batch = tokens.batch;
  const std::size_t len = tokens.len;
  const std::size_t n = batch * len;
  const std::size_t d = cfg.d_model;
  const auto &ps = model.params;
  const Tensor<T> &wte = ps[model.token_embedding()];
  const Tensor<T> &wpe = ps[model.position_embedding()];

  ForwardResult<T> out;
  ForwardCache<T> &cache = out.cache;
  cache.tokens = tokens;
  cache.layers.resize(cfg.n_layer);

  Tensor<T> x({n, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      const auto tok = static_cast<std::size_t>(tokens(b, t));
      T *xr = x.data() + (b * len + t) * d;
      for (std::size_t j = 0; j < d; ++j) {
        xr[j] = wte(tok, j) + wpe(t, j);
      }
    }
  }

  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    const BlockSlots s = model.block(l);
    LayerCache<T> &c = cache.layers[l];
    c.x_in = x;
    layer_norm_forward(x, d, T(kLayerNormEps), c.xhat1, c.rstd1);
    c.h1 = apply_gain(c.xhat1, ps[s.ln1_gain]);
    c.q = matmul(c.h1, ps[s.wq]);
    c.k = matmul(c.h1, ps[s.wk]);
    c.v = matmul(c.h1, ps[s.wv]);
    if (cfg.qk_norm) {
      Tensor<T> qn, kn;
      layer_norm_forward(c.q, cfg.head_dim(), T(kQkNormEps), qn, c.q_rstd);
      layer_norm_forward(c.k, cfg.head_dim(), T(kQkNormEps), kn, c.k_rstd);
      c.q = std::move(qn);
      c.k = std::move(kn);
    }
    AttentionProbe probe;
    probe.layer_index = l;
    attention_forward(cfg, batch, len, c, probe);
    out.probes.push_back(probe);

    add_into(x, matmul(c.y, ps[s.wo]));
    layer_norm_forward(x, d, T(kLayerNormEps), c.xhat2, c.rstd2);
    c.h2 = apply_gain(c.xhat2, ps[s.ln2_gain]);
    c.pre_act = matmul(c.h2, ps[s.mlp_in]);
    c.act = Tensor<T>(c.pre_act.shape());
    for (std::size_t i = 0; i < c.act.numel(); ++i) {
      c.act[i] = gelu(c.pre_act[i]);
    }
    add_into(x, matmul(c.act, ps[s.mlp_out]));
  }

  cache.x_final = x;
  layer_norm_forward(x, d, T(kLayerNormEps), cache.xhat_f, cache.rstd_f);
  cache.h_final = apply_gain(cache.xhat_f, ps[model.final_gain()]);
  out.logits = matmul_nt(cache.h_final, wte);
  debug_check_finite(out.logits, "forward");
  return out;
}

void validate_targets(const ModelConfig &cfg, const TokenBatch &tokens,
                      const TokenBatch &targets) {
  if (targets.batch != tokens.batch || targets.len != tokens.len ||
      targets.ids.size() != tokens.ids.size()) {
    throw InputError("targets must have the same shape as tokens");
  }
  for (auto id : targets.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw InputError("target id " + std::to_string(id) +
                       " outside vocabulary");
    }
  }
}

/// Mean cross-entropy; fills dlogits = d(loss)/d(logits) when non-null.
template <typename T>
double cross_entropy(const Tensor<T> &logits, const TokenBatch &targets,
                     Tensor<T> *dlogits) {
  const std::size_t n = logits.rows();
  const std::size_t vocab = logits.cols();
  if (dlogits) {
    *dlogits = Tensor<T>(logits.shape());
  }
  const T inv_n = T(1) / T(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const T *row = logits.data() + r * vocab;
    T top = row[0];
    for (std::size_t j = 1; j < vocab; ++j) {
      top = std::max(top, row[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      sum += std::exp(row[j] - top);
    }
    const T lse = top + std::log(sum);
    const auto target = static_cast<std::size_t>(targets.ids[r]);
    total += static_cast<double>(lse - row[target]);
    if (dlogits) {
      T *drow = dlogits->data() + r * vocab;
      for (std::size_t j = 0; j < vocab; ++j) {
        drow[j] = std::exp(row[j] - lse) * inv_n;
      }
      drow[target] -= inv_n;
    }
  }
  return total / static_cast<double>(n);
}

} // namespace

template <typename T>
ForwardResult<T> forward(const Model<T> &model, const TokenBatch &tokens) {
  return run_forward(model, tokens);
}

template <typename T>
double loss(const Model<T> &model, const TokenBatch &tokens,
            const TokenBatch &targets) {
  validate_targets(model.config, tokens, targets);
  auto fwd = run_forward(model, tokens);
  return cross_entropy<T>(fwd.logits, targets, nullptr);
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Model<T> &model, const TokenBatch &tokens,
                               const TokenBatch &targets) {
  const ModelConfig &cfg = model.config;
  validate_targets(cfg, tokens, targets);
  auto fwd = run_forward(model, tokens);
  const ForwardCache<T> &cache = fwd.cache;
  const auto &ps = model.params;
  const std::size_t batch = tokens.batch;
  const std::size_t len = tokens.len;
  const std::size_t d = cfg.d_model;
  const std::size_t dk = cfg.head_dim();

  LossAndGrads<T> out;
  out.grads = ps.zeros_like();
  out.probes = std::move(fwd.probes);
  auto &gs = out.grads;

  Tensor<T> dlogits;
  out.loss = cross_entropy<T>(fwd.logits, targets, &dlogits);

  // Tied unembedding: logits = h_final * wte^T.
  const Tensor<T> &wte = ps[model.token_embedding()];
  add_into(gs[model.token_embedding()], matmul_tn(dlogits, cache.h_final));
  Tensor<T> dh = matmul(dlogits, wte);
  Tensor<T> dx =
      layer_norm_backward(dh, cache.xhat_f, cache.rstd_f, d,
                          &ps[model.final_gain()], &gs[model.final_gain()]);

  for (std::size_t l = cfg.n_layer; l-- > 0;) {
    const BlockSlots s = model.block(l);
    const LayerCache<T> &c = cache.layers[l];

    // MLP branch.
    add_into(gs[s.mlp_out], matmul_tn(c.act, dx));
    Tensor<T> dpre = matmul_nt(dx, ps[s.mlp_out]);
    for (std::size_t i = 0; i < dpre.numel(); ++i) {
      dpre[i] *= gelu_grad(c.pre_act[i]);
    }
    add_into(gs[s.mlp_in], matmul_tn(c.h2, dpre));
    Tensor<T> dh2 = matmul_nt(dpre, ps[s.mlp_in]);
    add_into(dx, layer_norm_backward(dh2, c.xhat2, c.rstd2, d,
                                     &ps[s.ln2_gain], &gs[s.ln2_gain]));

    // Attention branch.
    add_into(gs[s.wo], matmul_tn(c.y, dx));
    Tensor<T> dy = matmul_nt(dx, ps[s.wo]);
    Tensor<T> dq, dkey, dv;
    attention_backward(cfg, batch, len, c, dy, dq, dkey, dv);
    if (cfg.qk_norm) {
      dq = layer_norm_backward<T>(dq, c.q, c.q_rstd, dk, nullptr, nullptr);
      dkey = layer_norm_backward<T>(dkey, c.k, c.k_rstd, dk, nullptr, nullptr);
    }
    add_into(gs[s.wq], matmul_tn(c.h1, dq));
    add_into(gs[s.wk], matmul_tn(c.h1, dkey));
    add_into(gs[s.wv], matmul_tn(c.h1, dv));
    Tensor<T> dh1 = matmul_nt(dq, ps[s.wq]);
    add_into(dh1, matmul_nt(dkey, ps[s.wk]));
    add_into(dh1, matmul_nt(dv, ps[s.wv]));
    add_into(dx, layer_norm_backward(dh1, c.xhat1, c.rstd1, d,
                                     &ps[s.ln1_gain], &gs[s.ln1_gain]));
  }

  Tensor<T> &dwte = gs[model.token_embedding()];
  Tensor<T> &dwpe = gs[model.position_embedding()];
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      const auto tok = static_cast<std::size_t>(tokens(b, t));
      const T *g = dx.data() + (b * len + t) * d;
      for (std::size_t j = 0; j < d; ++j) {
        dwte(tok, j) += g[j];
        dwpe(t, j) += g[j];
      }
    }
  }
  return out;
}

template <typename T>
double finite_diff_grad(Model<T> &model, const TokenBatch &tokens,
                        const TokenBatch &targets, Coordinate coord,
                        double eps) {
  if (!(eps > 0)) {
    throw DomainError("finite_diff_grad: eps must be positive");
  }
  if (coord.param >= model.params.size() ||
      coord.offset >= model.params[coord.param].numel()) {
    throw DomainError("finite_diff_grad: coordinate (" +
                      std::to_string(coord.param) + ", " +
                      std::to_string(coord.offset) + ") out of range");
  }
  T &w = model.params[coord.param][coord.offset];
  const T original = w;
  const double slope = central_difference(
      [&](double x) {
        w = static_cast<T>(x);
        return loss(model, tokens, targets);
      },
      static_cast<double>(original), eps);
  w = original;
  return slope;
}

#define MERIT_INSTANTIATE_MODEL(T)                                             \
  template class ParamSet<T>;                                                  \
  template struct Model<T>;                                                    \
  template Model<T> init_model<T>(const ModelConfig &, SeededRng &);           \
  template ForwardResult<T> forward<T>(const Model<T> &, const TokenBatch &);  \
  template double loss<T>(const Model<T> &, const TokenBatch &,                \
                          const TokenBatch &);                                 \
  template LossAndGrads<T> loss_and_grads<T>(                                  \
      const Model<T> &, const TokenBatch &, const TokenBatch &);               \
  template double finite_diff_grad<T>(Model<T> &, const TokenBatch &,          \
                                      const TokenBatch &, Coordinate, double);

MERIT_INSTANTIATE_MODEL(float)
MERIT_INSTANTIATE_MODEL(double)

#undef MERIT_INSTANTIATE_MODEL

} // namespace merit
