#include "merit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "merit/diagnostics.hpp"

namespace merit {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
  case OptimizerKind::adamw:
    return "adamw";
  case OptimizerKind::lamb:
    return "lamb";
  case OptimizerKind::maxlamb:
    return "maxlamb";
  case OptimizerKind::merit:
    return "merit";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  for (auto kind : {OptimizerKind::adamw, OptimizerKind::lamb,
                    OptimizerKind::maxlamb, OptimizerKind::merit}) {
    if (to_string(kind) == name) {
      return kind;
    }
  }
  throw ConfigError("unknown optimizer '" + std::string(name) +
                    "' (expected adamw, lamb, maxlamb or merit)");
}

std::string_view to_string(VectorPolicy policy) {
  return policy == VectorPolicy::weightwise ? "weightwise" : "exempt";
}

VectorPolicy parse_vector_policy(std::string_view name) {
  if (name == "weightwise") {
    return VectorPolicy::weightwise;
  }
  if (name == "exempt") {
    return VectorPolicy::exempt;
  }
  throw ConfigError("unknown vector policy '" + std::string(name) +
                    "' (expected weightwise or exempt)");
}

void HyperParams::validate() const {
  if (!(peak_lr >= 0)) {
    throw ConfigError("hp.peak_lr must be non-negative");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("hp.beta1 and hp.beta2 must lie in [0, 1)");
  }
  if (!(eps > 0)) {
    throw ConfigError("hp.eps must be positive");
  }
  if (!(weight_decay >= 0)) {
    throw ConfigError("hp.weight_decay must be non-negative");
  }
  if (!(clip_threshold > 0)) {
    throw ConfigError("hp.clip_threshold must be positive");
  }
}

template <typename T>
OptimState<T> OptimState<T>::zeros_like(const ParamSet<T> &params) {
  OptimState<T> state;
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.moments.push_back(Moments<T>::zeros(params[i].shape()));
  }
  return state;
}

namespace {

template <typename T>
void require_same_shape(const Tensor<T> &a, const Tensor<T> &b,
                        const char *op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " +
                         shape_string(a.shape()) + " does not match " +
                         shape_string(b.shape()));
  }
}

/// d = u + lambda w.
template <typename T>
Tensor<T> update_direction(const Tensor<T> &u, const Tensor<T> &w,
                           double weight_decay) {
  Tensor<T> d = u;
  const T lambda = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < d.numel(); ++i) {
    d[i] = u[i] + lambda * w[i];
  }
  return d;
}

} // namespace

template <typename T>
Tensor<T> update_moments(Moments<T> &state, const Tensor<T> &g,
                         const HyperParams &hp) {
  require_same_shape(state.m, g, "update_moments");
  require_same_shape(state.v, g, "update_moments");
  const T b1 = static_cast<T>(hp.beta1);
  const T b2 = static_cast<T>(hp.beta2);
  const T eps = static_cast<T>(hp.eps);
  Tensor<T> u(g.shape());
  for (std::size_t i = 0; i < g.numel(); ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g[i] * g[i];
    u[i] = state.m[i] / (std::sqrt(state.v[i]) + eps);
  }
  debug_check_finite(u, "update_moments");
  return u;
}

template <typename T>
void adamw_step(Tensor<T> &w, const Tensor<T> &g, Moments<T> &state,
                std::int64_t step, const HyperParams &hp, double lr) {
  require_same_shape(w, g, "adamw_step");
  require_same_shape(state.m, g, "adamw_step");
  const T b1 = static_cast<T>(hp.beta1);
  const T b2 = static_cast<T>(hp.beta2);
  const T eps = static_cast<T>(hp.eps);
  const T lambda = static_cast<T>(hp.weight_decay);
  const T rate = static_cast<T>(lr);
  const double t = static_cast<double>(step);
  const T corr1 = static_cast<T>(1.0 - std::pow(hp.beta1, t));
  const T corr2 = static_cast<T>(1.0 - std::pow(hp.beta2, t));
  for (std::size_t i = 0; i < w.numel(); ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g[i] * g[i];
    const T m_hat = state.m[i] / corr1;
    const T v_hat = state.v[i] / corr2;
    w[i] -= rate * (m_hat / (std::sqrt(v_hat) + eps) + lambda * w[i]);
  }
  debug_check_finite(w, "adamw_step");
}

template <typename T> T ratio_or_one(T numerator, T denominator) {
  if (numerator == T(0) || denominator == T(0)) {
    return T(1);
  }
  return numerator / denominator;
}

template <typename T>
T lamb_trust_ratio(const Tensor<T> &w, const Tensor<T> &d) {
  require_same_shape(w, d, "lamb_trust_ratio");
  return ratio_or_one(l2_norm(w), l2_norm(d));
}

template <typename T>
TrustRatios<T> merit_trust_ratios(const Tensor<T> &w, const Tensor<T> &d,
                                  const MeritOptions &opts) {
  require_same_shape(w, d, "merit_trust_ratios");
  if (w.rank() != 2) {
    throw DimensionError("merit_trust_ratios: expected 2-D tensors, got " +
                         shape_string(w.shape()));
  }
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  TrustRatios<T> tr;
  tr.weight = ratio_or_one(max_norm(w), max_norm(d));

  const Tensor<T> w_rows = row_max_norms(w);
  const Tensor<T> d_rows = row_max_norms(d);
  const Tensor<T> w_cols = col_max_norms(w);
  const Tensor<T> d_cols = col_max_norms(d);
  tr.row = Tensor<T>({rows});
  tr.col = Tensor<T>({cols});
  for (std::size_t i = 0; i < rows; ++i) {
    tr.row[i] = ratio_or_one(w_rows[i], d_rows[i]);
  }
  for (std::size_t j = 0; j < cols; ++j) {
    tr.col[j] = ratio_or_one(w_cols[j], d_cols[j]);
  }

  tr.elem = Tensor<T>({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      T s = tr.weight;
      if (opts.elementwise) {
        s = std::max(tr.row[i], tr.col[j]);
        if (opts.weightwise_bound) {
          s = std::max(s, tr.weight);
        }
      }
      tr.elem(i, j) = s;
    }
  }
  return tr;
}

template <typename T>
StepDiagnostics<T> merit_apply(Tensor<T> &w, const Tensor<T> &d, double lr,
                               const HyperParams &hp, const MeritOptions &opts,
                               VectorPolicy policy) {
  require_same_shape(w, d, "merit_apply");
  StepDiagnostics<T> diag;
  if (w.rank() == 2) {
    diag.ratios = merit_trust_ratios(w, d, opts);
    diag.bound_fraction = diagnostics::bound_trigger_ratio(diag.ratios);
  } else {
    // Rows and columns are undefined for vectors: one ratio for the tensor.
    diag.ratios.weight = policy == VectorPolicy::exempt
                             ? T(1)
                             : ratio_or_one(max_norm(w), max_norm(d));
    diag.ratios.elem = Tensor<T>(w.shape(), diag.ratios.weight);
  }

  const T limit = static_cast<T>(hp.clip_threshold);
  const T rate = static_cast<T>(lr);
  diag.pre_clip = Tensor<T>(w.shape());
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const T pre = diag.ratios.elem[i] * d[i];
    diag.pre_clip[i] = pre;
    T update = pre;
    if (opts.clip) {
      if (std::abs(pre) > limit) {
        ++clipped;
      }
      update = std::clamp(pre, -limit, limit);
    }
    w[i] -= rate * update;
  }
  diag.clip_fraction =
      static_cast<double>(clipped) / static_cast<double>(w.numel());
  debug_check_finite(w, "merit_apply");
  return diag;
}

template <typename T>
StepDiagnostics<T> merit_step(Tensor<T> &w, const Tensor<T> &g,
                              Moments<T> &state, const HyperParams &hp,
                              double lr, const MeritOptions &opts,
                              VectorPolicy policy) {
  require_same_shape(w, g, "merit_step");
  const Tensor<T> u = update_moments(state, g, hp);
  const Tensor<T> d = update_direction(u, w, hp.weight_decay);
  return merit_apply(w, d, lr, hp, opts, policy);
}

template <typename T>
void weightwise_apply(Tensor<T> &w, const Tensor<T> &d, double lr,
                      NormFn<T> norm, bool exempt) {
  require_same_shape(w, d, "weightwise_apply");
  const T ratio = exempt ? T(1) : ratio_or_one(norm(w), norm(d));
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    w[i] -= rate * (ratio * d[i]);
  }
  debug_check_finite(w, "weightwise_apply");
}

template <typename T>
void maxlamb_step(Tensor<T> &w, const Tensor<T> &g, Moments<T> &state,
                  const HyperParams &hp, double lr, NormFn<T> norm,
                  bool exempt) {
  require_same_shape(w, g, "maxlamb_step");
  const Tensor<T> u = update_moments(state, g, hp);
  const Tensor<T> d = update_direction(u, w, hp.weight_decay);
  weightwise_apply(w, d, lr, norm, exempt);
}

template <typename T>
void lamb_step(Tensor<T> &w, const Tensor<T> &g, Moments<T> &state,
               const HyperParams &hp, double lr, bool exempt) {
  require_same_shape(w, g, "lamb_step");
  const Tensor<T> u = update_moments(state, g, hp);
  const Tensor<T> d = update_direction(u, w, hp.weight_decay);
  const T ratio = exempt ? T(1) : lamb_trust_ratio(w, d);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    w[i] -= rate * (ratio * d[i]);
  }
  debug_check_finite(w, "lamb_step");
}

// ---- schedule -----------------------------------------------------------------

std::int64_t Schedule::warmup_steps() const {
  // The small slack keeps products like 0.02 * 1000 from rounding up a step.
  return static_cast<std::int64_t>(
      std::ceil(warmup_ratio * static_cast<double>(total_steps) - 1e-9));
}

void Schedule::validate() const {
  if (total_steps < 0) {
    throw ConfigError("sched.total_steps must be non-negative");
  }
  if (!(warmup_ratio >= 0 && warmup_ratio < 1)) {
    throw ConfigError("sched.warmup_ratio must lie in [0, 1)");
  }
  if (!(floor_fraction >= 0 && floor_fraction <= 1)) {
    throw ConfigError("sched.floor_fraction must lie in [0, 1]");
  }
}

double cosine_lr(std::int64_t step, const Schedule &sched, double peak) {
  if (step < 0 || step > sched.total_steps) {
    throw DomainError("cosine_lr: step " + std::to_string(step) +
                      " outside [0, " + std::to_string(sched.total_steps) +
                      "]");
  }
  const std::int64_t warmup = sched.warmup_steps();
  if (step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const std::int64_t decay = sched.total_steps - warmup;
  if (decay == 0) {
    return peak;
  }
  const double floor = sched.floor_fraction * peak;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(decay);
  return floor +
         (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double global_grad_clip(ParamSet<T> &grads, double threshold) {
  double sum = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (T g : grads[i].values()) {
      sum += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sum);
  if (threshold > 0 && norm > threshold) {
    const T scale = static_cast<T>(threshold / norm);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (T &g : grads[i].values()) {
        g *= scale;
      }
    }
  }
  return norm;
}

// ---- Optimizer ---------------------------------------------------------------------

double StepReport::pooled_clip_fraction() const {
  double hits = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < numel.size(); ++i) {
    hits += clip_fraction[i] * static_cast<double>(numel[i]);
    total += static_cast<double>(numel[i]);
  }
  return total > 0 ? hits / total : 0.0;
}

double StepReport::pooled_bound_fraction() const {
  double hits = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < numel.size(); ++i) {
    if (is_matrix[i]) {
      hits += bound_fraction[i] * static_cast<double>(numel[i]);
      total += static_cast<double>(numel[i]);
    }
  }
  return total > 0 ? hits / total : 0.0;
}

template <typename T>
Optimizer<T>::Optimizer(OptimizerKind kind, HyperParams hp,
                        MeritOptions merit, VectorPolicy policy)
    : kind_(kind), hp_(hp), merit_(merit), policy_(policy) {
  hp_.validate();
}

template <typename T>
StepReport Optimizer<T>::step(ParamSet<T> &params, const ParamSet<T> &grads,
                              double lr) {
  if (grads.size() != params.size()) {
    throw DimensionError("optimizer: gradient count does not match "
                         "parameter count");
  }
  if (state_.moments.empty()) {
    state_ = OptimState<T>::zeros_like(params);
  }
  if (state_.moments.size() != params.size()) {
    throw DimensionError("optimizer: state was built for a different "
                         "parameter layout");
  }

  StepReport report;
  const std::size_t n = params.size();
  report.clip_fraction.assign(n, 0.0);
  report.bound_fraction.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> &w = params[i];
    const Tensor<T> &g = grads[i];
    Moments<T> &mom = state_.moments[i];
    const bool matrix = w.rank() >= 2;
    report.numel.push_back(w.numel());
    report.is_matrix.push_back(matrix);
    // Weight decay applies to matrices only; gains are not decayed.
    HyperParams hp = hp_;
    if (!matrix) {
      hp.weight_decay = 0.0;
    }
    const bool exempt = !matrix && policy_ == VectorPolicy::exempt;
    switch (kind_) {
    case OptimizerKind::adamw:
      adamw_step(w, g, mom, state_.step, hp, lr);
      break;
    case OptimizerKind::lamb:
      lamb_step(w, g, mom, hp, lr, exempt);
      break;
    case OptimizerKind::maxlamb:
      maxlamb_step(w, g, mom, hp, lr, &max_norm<T>, exempt);
      break;
    case OptimizerKind::merit: {
      const auto diag = merit_step(w, g, mom, hp, lr, merit_, policy_);
      report.clip_fraction[i] = diag.clip_fraction;
      report.bound_fraction[i] = diag.bound_fraction;
      break;
    }
    }
  }
  ++state_.step;
  return report;
}

#define MERIT_INSTANTIATE_OPTIM(T)                                             \
  template struct OptimState<T>;                                               \
  template Tensor<T> update_moments<T>(Moments<T> &, const Tensor<T> &,        \
                                       const HyperParams &);                   \
  template void adamw_step<T>(Tensor<T> &, const Tensor<T> &, Moments<T> &,    \
                              std::int64_t, const HyperParams &, double);      \
  template T ratio_or_one<T>(T, T);                                            \
  template T lamb_trust_ratio<T>(const Tensor<T> &, const Tensor<T> &);        \
  template TrustRatios<T> merit_trust_ratios<T>(                               \
      const Tensor<T> &, const Tensor<T> &, const MeritOptions &);             \
  template StepDiagnostics<T> merit_apply<T>(Tensor<T> &, const Tensor<T> &,   \
                                             double, const HyperParams &,      \
                                             const MeritOptions &,             \
                                             VectorPolicy);                    \
  template StepDiagnostics<T> merit_step<T>(                                   \
      Tensor<T> &, const Tensor<T> &, Moments<T> &, const HyperParams &,       \
      double, const MeritOptions &, VectorPolicy);                             \
  template void weightwise_apply<T>(Tensor<T> &, const Tensor<T> &, double,    \
                                    NormFn<T>, bool);                          \
  template void maxlamb_step<T>(Tensor<T> &, const Tensor<T> &, Moments<T> &,  \
                                const HyperParams &, double, NormFn<T>, bool); \
  template void lamb_step<T>(Tensor<T> &, const Tensor<T> &, Moments<T> &,     \
                             const HyperParams &, double, bool);               \
  template double global_grad_clip<T>(ParamSet<T> &, double);                  \
  template class Optimizer<T>;

MERIT_INSTANTIATE_OPTIM(float)
MERIT_INSTANTIATE_OPTIM(double)

#undef MERIT_INSTANTIATE_OPTIM

} // namespace merit
