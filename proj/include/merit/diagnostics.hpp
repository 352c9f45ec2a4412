#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "merit/model.hpp"
#include "merit/optim.hpp"
#include "merit/tensor.hpp"

namespace merit::diagnostics {

// ---- attention logit bound ------------------------------------------------------

/// sqrt(d) * M_Q * M_K * C_X^2: an upper bound on every logit q.k / sqrt(d)
/// when |W_Q| <= M_Q and |W_K| <= M_K element-wise and every input row has
/// absolute sum at most C_X. Throws DomainError on negative inputs or d == 0.
double logit_upper_bound(double max_q, double max_k, double input_abs_sum,
                         std::size_t head_dim);

/// Bound versus observation for one layer of a model on one batch.
struct LayerBoundCheck {
  std::size_t layer = 0;
  double max_q = 0;          // max |W_Q|
  double max_k = 0;          // max |W_K|
  double input_abs_sum = 0;  // max row abs-sum of the attention input
  double bound = 0;
  double observed_max_logit = 0;
  bool holds() const { return observed_max_logit <= bound; }
};

template <typename T>
std::vector<LayerBoundCheck> check_logit_bounds(const Model<T> &model,
                                                const TokenBatch &tokens);

// ---- norms and structure ------------------------------------------------------------

/// (||W||_2 - ||W||_max) / ||W||_2, in [0, 1). Throws DomainError for an
/// all-zero tensor.
template <typename T> double norm_gap_ratio(const Tensor<T> &w);

/// Fraction of elements with |x| > threshold.
template <typename T>
double clip_trigger_ratio(const Tensor<T> &pre_clip, double threshold = 1.0);

/// Fraction of (i, j) where the weight-wise ratio strictly exceeds
/// max(r_i, c_j). Zero when the ratios carry no row/column split.
template <typename T> double bound_trigger_ratio(const TrustRatios<T> &tr);

struct RowColSimilarity {
  double row_sim = 0;
  double col_sim = 0;
};

/// Mean pairwise cosine similarity of |row| vectors and of |column|
/// vectors. All-zero rows (columns) are left out. Throws DomainError when
/// the matrix is not 2-D with m, n >= 2, or fewer than two nonzero rows or
/// columns remain.
template <typename T> RowColSimilarity rowcol_similarity(const Tensor<T> &w);

/// Clip/bound trigger fractions for one step, pooled and per layer.
struct TriggerStats {
  struct Layer {
    std::size_t layer = 0;
    double clip_fraction = 0;
    double bound_fraction = 0;
  };
  double clip_fraction = 0;
  double bound_fraction = 0;
  std::vector<Layer> per_layer;
};

/// Groups a StepReport by transformer block using parameter names of the
/// form "h.<layer>.<role>". Parameters outside blocks only count in the
/// pooled fractions.
TriggerStats summarize_triggers(const StepReport &report,
                                const std::vector<std::string> &names,
                                std::size_t n_layer);

// ---- curvature --------------------------------------------------------------------

/// Gradient of a scalar objective at a flat parameter vector.
using GradientFn =
    std::function<std::vector<double>(std::span<const double> params)>;

/// Hv by central differences of the gradient with step 1e-3 / ||v||.
/// Throws DomainError for a zero v.
std::vector<double> hessian_vector_product(const GradientFn &grad,
                                           std::span<const double> params,
                                           std::span<const double> v);

struct CurvatureReport {
  /// Dominant Hessian eigenvalue (largest magnitude) from power iteration.
  double top_eigenvalue = 0;
  double trace_estimate = 0;
  std::size_t probes_used = 0;
  std::size_t power_iters = 0;
  /// ||Hv - lambda v|| / ||v|| at the last iterate.
  double residual = 0;
};

struct CurvatureOptions {
  std::size_t iters = 500;
  double tol = 1e-8;
  std::size_t probes = 100;
  std::uint64_t seed = 0;
};

/// Power iteration for the dominant eigenvalue plus a Hutchinson trace
/// estimate with Rademacher probes. Never throws on non-convergence; check
/// residual instead.
CurvatureReport top_eigenvalue(const GradientFn &grad,
                               std::span<const double> params,
                               const CurvatureOptions &opts);

/// Mean of z^T H z over `probes` Rademacher vectors z.
double hutchinson_trace(const GradientFn &grad, std::span<const double> params,
                        std::size_t probes, SeededRng &rng);

template <typename T> std::vector<double> flatten(const ParamSet<T> &params);
template <typename T>
void unflatten(std::span<const double> flat, ParamSet<T> &params);

/// Gradient of the model's loss on a fixed batch as a GradientFn.
template <typename T>
GradientFn model_gradient_fn(const Model<T> &model, TokenBatch tokens,
                             TokenBatch targets);

} // namespace merit::diagnostics
