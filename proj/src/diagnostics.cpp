#include "merit/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace merit::diagnostics {

double logit_upper_bound(double max_q, double max_k, double input_abs_sum,
                         std::size_t head_dim) {
  if (max_q < 0 || max_k < 0 || input_abs_sum < 0) {
    throw DomainError("logit_upper_bound: norms must be non-negative");
  }
  if (head_dim == 0) {
    throw DomainError("logit_upper_bound: head dimension must be positive");
  }
  return std::sqrt(static_cast<double>(head_dim)) * max_q * max_k *
         input_abs_sum * input_abs_sum;
}

template <typename T>
std::vector<LayerBoundCheck> check_logit_bounds(const Model<T> &model,
                                                const TokenBatch &tokens) {
  const auto fwd = forward(model, tokens);
  std::vector<LayerBoundCheck> out;
  for (std::size_t l = 0; l < model.config.n_layer; ++l) {
    const BlockSlots s = model.block(l);
    const Tensor<T> &h1 = fwd.cache.layers[l].h1;
    double abs_sum = 0;
    for (std::size_t r = 0; r < h1.rows(); ++r) {
      double row = 0;
      for (T x : h1.row(r)) {
        row += std::abs(static_cast<double>(x));
      }
      abs_sum = std::max(abs_sum, row);
    }
    LayerBoundCheck c;
    c.layer = l;
    c.max_q = max_norm(model.params[s.wq]);
    c.max_k = max_norm(model.params[s.wk]);
    c.input_abs_sum = abs_sum;
    c.bound = logit_upper_bound(c.max_q, c.max_k, c.input_abs_sum,
                                model.config.head_dim());
    c.observed_max_logit = fwd.probes[l].max_logit;
    out.push_back(c);
  }
  return out;
}

template <typename T> double norm_gap_ratio(const Tensor<T> &w) {
  const double l2 = l2_norm(w);
  if (l2 == 0) {
    throw DomainError("norm_gap_ratio: all-zero tensor");
  }
  return (l2 - static_cast<double>(max_norm(w))) / l2;
}

template <typename T>
double clip_trigger_ratio(const Tensor<T> &pre_clip, double threshold) {
  if (pre_clip.empty()) {
    return 0.0;
  }
  std::size_t hits = 0;
  for (T x : pre_clip.values()) {
    if (std::abs(static_cast<double>(x)) > threshold) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(pre_clip.numel());
}

template <typename T> double bound_trigger_ratio(const TrustRatios<T> &tr) {
  if (tr.row.empty() || tr.col.empty()) {
    return 0.0;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tr.row.numel(); ++i) {
    for (std::size_t j = 0; j < tr.col.numel(); ++j) {
      if (tr.weight > std::max(tr.row[i], tr.col[j])) {
        ++hits;
      }
    }
  }
  return static_cast<double>(hits) /
         static_cast<double>(tr.row.numel() * tr.col.numel());
}

namespace {

/// Mean pairwise cosine similarity of the given vectors (all nonzero).
/// Pair values are sorted before summation so the result does not depend on
/// the order of the vectors.
double mean_pairwise_cosine(const std::vector<std::vector<double>> &vecs) {
  std::vector<double> norms;
  for (const auto &v : vecs) {
    double s = 0;
    for (double x : v) {
      s += x * x;
    }
    norms.push_back(std::sqrt(s));
  }
  std::vector<double> pairs;
  for (std::size_t a = 0; a < vecs.size(); ++a) {
    for (std::size_t b = a + 1; b < vecs.size(); ++b) {
      double dot = 0;
      for (std::size_t k = 0; k < vecs[a].size(); ++k) {
        dot += vecs[a][k] * vecs[b][k];
      }
      pairs.push_back(dot / (norms[a] * norms[b]));
    }
  }
  std::sort(pairs.begin(), pairs.end());
  double sum = 0;
  for (double p : pairs) {
    sum += p;
  }
  return sum / static_cast<double>(pairs.size());
}

} // namespace

template <typename T> RowColSimilarity rowcol_similarity(const Tensor<T> &w) {
  if (w.rank() != 2 || w.rows() < 2 || w.cols() < 2) {
    throw DomainError("rowcol_similarity: need a 2-D matrix with at least "
                      "two rows and two columns");
  }
  std::vector<std::vector<double>> rows, cols;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    std::vector<double> r;
    bool nonzero = false;
    for (T x : w.row(i)) {
      r.push_back(std::abs(static_cast<double>(x)));
      nonzero = nonzero || x != T(0);
    }
    if (nonzero) {
      rows.push_back(std::move(r));
    }
  }
  for (std::size_t j = 0; j < w.cols(); ++j) {
    std::vector<double> c;
    bool nonzero = false;
    for (std::size_t i = 0; i < w.rows(); ++i) {
      c.push_back(std::abs(static_cast<double>(w(i, j))));
      nonzero = nonzero || w(i, j) != T(0);
    }
    if (nonzero) {
      cols.push_back(std::move(c));
    }
  }
  if (rows.empty()) {
    throw DomainError("rowcol_similarity: all-zero matrix");
  }
  if (rows.size() < 2 || cols.size() < 2) {
    throw DomainError("rowcol_similarity: fewer than two nonzero rows or "
                      "columns");
  }
  return {mean_pairwise_cosine(rows), mean_pairwise_cosine(cols)};
}

TriggerStats summarize_triggers(const StepReport &report,
                                const std::vector<std::string> &names,
                                std::size_t n_layer) {
  TriggerStats stats;
  stats.clip_fraction = report.pooled_clip_fraction();
  stats.bound_fraction = report.pooled_bound_fraction();
  std::vector<double> clip_hits(n_layer, 0), bound_hits(n_layer, 0);
  std::vector<double> all(n_layer, 0), matrices(n_layer, 0);
  for (std::size_t i = 0; i < report.numel.size() && i < names.size(); ++i) {
    const std::string &name = names[i];
    if (name.rfind("h.", 0) != 0) {
      continue;
    }
    const std::size_t layer = std::stoul(name.substr(2));
    if (layer >= n_layer) {
      continue;
    }
    const double n = static_cast<double>(report.numel[i]);
    clip_hits[layer] += report.clip_fraction[i] * n;
    all[layer] += n;
    if (report.is_matrix[i]) {
      bound_hits[layer] += report.bound_fraction[i] * n;
      matrices[layer] += n;
    }
  }
  for (std::size_t l = 0; l < n_layer; ++l) {
    stats.per_layer.push_back(
        {l, all[l] > 0 ? clip_hits[l] / all[l] : 0.0,
         matrices[l] > 0 ? bound_hits[l] / matrices[l] : 0.0});
  }
  return stats;
}

// ---- curvature ---------------------------------------------------------------------

namespace {

double norm2(std::span<const double> v) {
  double s = 0;
  for (double x : v) {
    s += x * x;
  }
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i] * b[i];
  }
  return s;
}

} // namespace

std::vector<double> hessian_vector_product(const GradientFn &grad,
                                           std::span<const double> params,
                                           std::span<const double> v) {
  if (v.size() != params.size()) {
    throw DimensionError("hessian_vector_product: direction has " +
                         std::to_string(v.size()) + " entries, parameters " +
                         std::to_string(params.size()));
  }
  const double vnorm = norm2(v);
  if (vnorm == 0) {
    throw DomainError("hessian_vector_product: zero direction");
  }
  const double eps = 1e-3 / vnorm;
  std::vector<double> plus(params.begin(), params.end());
  std::vector<double> minus(params.begin(), params.end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    plus[i] += eps * v[i];
    minus[i] -= eps * v[i];
  }
  const auto g_plus = grad(plus);
  const auto g_minus = grad(minus);
  std::vector<double> hv(params.size());
  for (std::size_t i = 0; i < hv.size(); ++i) {
    hv[i] = (g_plus[i] - g_minus[i]) / (2 * eps);
  }
  return hv;
}

double hutchinson_trace(const GradientFn &grad, std::span<const double> params,
                        std::size_t probes, SeededRng &rng) {
  if (probes == 0) {
    throw DomainError("hutchinson_trace: need at least one probe");
  }
  double sum = 0;
  std::vector<double> z(params.size());
  for (std::size_t p = 0; p < probes; ++p) {
    for (double &x : z) {
      x = rng.rademacher();
    }
    sum += dot(z, hessian_vector_product(grad, params, z));
  }
  return sum / static_cast<double>(probes);
}

CurvatureReport top_eigenvalue(const GradientFn &grad,
                               std::span<const double> params,
                               const CurvatureOptions &opts) {
  if (opts.iters == 0) {
    throw DomainError("top_eigenvalue: iters must be at least 1");
  }
  SeededRng rng(opts.seed);
  std::vector<double> v(params.size());
  for (double &x : v) {
    x = rng.normal();
  }
  double n = norm2(v);
  for (double &x : v) {
    x /= n;
  }

  CurvatureReport report;
  for (std::size_t it = 0; it < opts.iters; ++it) {
    const auto hv = hessian_vector_product(grad, params, v);
    const double lambda = dot(v, hv);
    double res = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double r = hv[i] - lambda * v[i];
      res += r * r;
    }
    report.top_eigenvalue = lambda;
    report.residual = std::sqrt(res);
    report.power_iters = it + 1;
    const double hn = norm2(hv);
    if (report.residual <= opts.tol || hn == 0) {
      break;
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = hv[i] / hn;
    }
  }

  SeededRng probe_rng = rng.derive(1);
  report.trace_estimate = hutchinson_trace(grad, params, opts.probes, probe_rng);
  report.probes_used = opts.probes;
  return report;
}

template <typename T> std::vector<double> flatten(const ParamSet<T> &params) {
  std::vector<double> flat;
  flat.reserve(params.numel());
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (T x : params[i].values()) {
      flat.push_back(static_cast<double>(x));
    }
  }
  return flat;
}

template <typename T>
void unflatten(std::span<const double> flat, ParamSet<T> &params) {
  if (flat.size() != params.numel()) {
    throw DimensionError("unflatten: " + std::to_string(flat.size()) +
                         " values for " + std::to_string(params.numel()) +
                         " parameters");
  }
  std::size_t k = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (T &x : params[i].values()) {
      x = static_cast<T>(flat[k++]);
    }
  }
}

template <typename T>
GradientFn model_gradient_fn(const Model<T> &model, TokenBatch tokens,
                             TokenBatch targets) {
  return [work = model, tokens = std::move(tokens),
          targets = std::move(targets)](std::span<const double> flat) mutable {
    unflatten(flat, work.params);
    return flatten(loss_and_grads(work, tokens, targets).grads);
  };
}

#define MERIT_INSTANTIATE_DIAG(T)                                              \
  template std::vector<LayerBoundCheck> check_logit_bounds<T>(                 \
      const Model<T> &, const TokenBatch &);                                   \
  template double norm_gap_ratio<T>(const Tensor<T> &);                        \
  template double clip_trigger_ratio<T>(const Tensor<T> &, double);            \
  template double bound_trigger_ratio<T>(const TrustRatios<T> &);              \
  template RowColSimilarity rowcol_similarity<T>(const Tensor<T> &);           \
  template std::vector<double> flatten<T>(const ParamSet<T> &);                \
  template void unflatten<T>(std::span<const double>, ParamSet<T> &);          \
  template GradientFn model_gradient_fn<T>(const Model<T> &, TokenBatch,       \
                                           TokenBatch);

MERIT_INSTANTIATE_DIAG(float)
MERIT_INSTANTIATE_DIAG(double)

#undef MERIT_INSTANTIATE_DIAG

} // namespace merit::diagnostics
