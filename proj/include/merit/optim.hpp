#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "merit/model.hpp"
#include "merit/tensor.hpp"

namespace merit {

enum class OptimizerKind { adamw, lamb, maxlamb, merit };

std::string_view to_string(OptimizerKind kind);
/// Throws ConfigError for an unknown name.
OptimizerKind parse_optimizer_kind(std::string_view name);

struct HyperParams {
  double peak_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  /// Element-wise update limit of MERIT.
  double clip_threshold = 1.0;
  /// Global gradient-norm clip; <= 0 disables it.
  double global_grad_clip = 1.0;

  void validate() const;
};

/// Switches for the MERIT ablations. All on is the full optimizer.
struct MeritOptions {
  /// Off: every element uses the weight-wise ratio b.
  bool elementwise = true;
  /// Off: s = max(r, c) without the weight-wise lower bound.
  bool weightwise_bound = true;
  /// Off: no element-wise update clipping.
  bool clip = true;
};

/// How trust-ratio optimizers treat 1-D parameters (layer norm gains).
enum class VectorPolicy {
  /// Weight-wise max-norm ratio (LAMB/maxLAMB: their own weight-wise ratio).
  weightwise,
  /// Ratio fixed at 1.
  exempt,
};

std::string_view to_string(VectorPolicy policy);
VectorPolicy parse_vector_policy(std::string_view name);

/// First and second moments of one parameter tensor.
template <typename T> struct Moments {
  Tensor<T> m;
  Tensor<T> v;

  static Moments zeros(const Shape &shape) {
    return {Tensor<T>(shape), Tensor<T>(shape)};
  }
};

/// Moments for every parameter plus the 1-based step counter.
template <typename T> struct OptimState {
  std::vector<Moments<T>> moments;
  std::int64_t step = 1;

  static OptimState zeros_like(const ParamSet<T> &params);
};

/// Weight-, row-, column- and element-wise trust ratios of one matrix.
template <typename T> struct TrustRatios {
  T weight = 1;
  Tensor<T> row;
  Tensor<T> col;
  Tensor<T> elem;
};

/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; returns m / (sqrt(v) + eps).
/// No bias correction.
template <typename T>
Tensor<T> update_moments(Moments<T> &state, const Tensor<T> &g,
                         const HyperParams &hp);

/// Decoupled weight decay Adam with bias correction. `step` is 1-based.
template <typename T>
void adamw_step(Tensor<T> &w, const Tensor<T> &g, Moments<T> &state,
                std::int64_t step, const HyperParams &hp, double lr);

/// ||w|| / ||d|| with either norm; 1 when either norm is zero.
template <typename T>
T ratio_or_one(T numerator, T denominator);

/// LAMB's l2 trust ratio ||w||_2 / ||d||_2.
template <typename T> T lamb_trust_ratio(const Tensor<T> &w, const Tensor<T> &d);

/// MERIT's max-norm trust ratios. w and d are 2-D with equal shapes.
template <typename T>
TrustRatios<T> merit_trust_ratios(const Tensor<T> &w, const Tensor<T> &d,
                                  const MeritOptions &opts = {});

/// What one MERIT update did to one tensor.
template <typename T> struct StepDiagnostics {
  /// s * d before clipping.
  Tensor<T> pre_clip;
  TrustRatios<T> ratios;
  /// Fraction of elements whose |s * d| exceeded the clip threshold.
  double clip_fraction = 0.0;
  /// Fraction of elements where b > max(r_i, c_j). Zero for 1-D tensors.
  double bound_fraction = 0.0;
};

/// MERIT update for a precomputed direction d = u + lambda w:
/// w <- w - lr * clip(s * d, threshold).
template <typename T>
StepDiagnostics<T> merit_apply(Tensor<T> &w, const Tensor<T> &d, double lr,
                               const HyperParams &hp,
                               const MeritOptions &opts = {},
                               VectorPolicy policy = VectorPolicy::weightwise);

template <typename T>
StepDiagnostics<T> merit_step(Tensor<T> &w, const Tensor<T> &g,
                              Moments<T> &state, const HyperParams &hp,
                              double lr, const MeritOptions &opts = {},
                              VectorPolicy policy = VectorPolicy::weightwise);

/// Norm used by a weight-wise trust ratio.
template <typename T> using NormFn = T (*)(const Tensor<T> &);

/// w <- w - lr * (||w|| / ||d||) * d for a precomputed direction.
template <typename T>
void weightwise_apply(Tensor<T> &w, const Tensor<T> &d, double lr,
                      NormFn<T> norm, bool exempt = false);

/// LAMB with max norms in place of l2 norms. `norm` exists so the ablation
/// can be checked by substituting l2_norm.
template <typename T>
void maxlamb_step(Tensor<T> &w, const Tensor<T> &g, Moments<T> &state,
                  const HyperParams &hp, double lr,
                  NormFn<T> norm = &max_norm<T>, bool exempt = false);

template <typename T>
void lamb_step(Tensor<T> &w, const Tensor<T> &g, Moments<T> &state,
               const HyperParams &hp, double lr, bool exempt = false);

// ---- schedule and clipping ---------------------------------------------------

struct Schedule {
  std::int64_t total_steps = 1000;
  double warmup_ratio = 0.02;
  double floor_fraction = 0.1;

  std::int64_t warmup_steps() const;
  void validate() const;
};

/// Linear warm-up from 0 to peak over warmup_steps(), then cosine decay to
/// floor_fraction * peak at total_steps. Throws DomainError outside
/// [0, total_steps].
double cosine_lr(std::int64_t step, const Schedule &sched, double peak);

/// Scales every gradient by threshold / norm when the global l2 norm exceeds
/// threshold. Returns the norm before scaling.
template <typename T>
double global_grad_clip(ParamSet<T> &grads, double threshold);

// ---- optimizer over a whole ParamSet -----------------------------------------

/// Aggregated diagnostics from one optimizer step.
struct StepReport {
  /// Per parameter (same order as the ParamSet); zero for non-MERIT kinds.
  std::vector<double> clip_fraction;
  std::vector<double> bound_fraction;
  std::vector<std::size_t> numel;
  std::vector<bool> is_matrix;

  /// Element-weighted pooled fractions.
  double pooled_clip_fraction() const;
  /// Pooled over 2-D parameters only.
  double pooled_bound_fraction() const;
};

template <typename T> class Optimizer {
public:
  Optimizer(OptimizerKind kind, HyperParams hp, MeritOptions merit = {},
            VectorPolicy policy = VectorPolicy::weightwise);

  OptimizerKind kind() const { return kind_; }
  const HyperParams &hyper_params() const { return hp_; }
  const MeritOptions &merit_options() const { return merit_; }
  VectorPolicy vector_policy() const { return policy_; }

  /// Allocates zero moments on first use; throws DimensionError if the
  /// parameter layout changes afterwards.
  StepReport step(ParamSet<T> &params, const ParamSet<T> &grads, double lr);

  OptimState<T> &state() { return state_; }
  const OptimState<T> &state() const { return state_; }

private:
  OptimizerKind kind_;
  HyperParams hp_;
  MeritOptions merit_;
  VectorPolicy policy_;
  OptimState<T> state_;
};

} // namespace merit
