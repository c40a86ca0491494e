#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>

#include "gpstruct/errors.hpp"
#include "gpstruct/kernel.hpp"
#include "gpstruct/rng.hpp"

namespace gpstruct {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Grammar rule probabilities
// ---------------------------------------------------------------------------

/// Production probabilities of the structure grammar
///   s -> s + s | s x s | b,  b in {Lin, SE, Per, RQ}.
/// Subcriticality (2 (p_sum + p_prod) < 1) makes expansion terminate almost
/// surely.
struct RuleProbs {
  double p_sum = 0.2;
  double p_prod = 0.2;
  std::array<double, kBaseKindCount> p_base{0.15, 0.15, 0.15, 0.15};  // indexed by BaseKind

  double base_total() const { return p_base[0] + p_base[1] + p_base[2] + p_base[3]; }

  void validate() const {
    for (double p : {p_sum, p_prod, p_base[0], p_base[1], p_base[2], p_base[3]})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("rule probabilities must lie in [0, 1]");
    const double total = p_sum + p_prod + base_total();
    if (std::abs(total - 1.0) > 1e-12)
      throw ConfigError("rule probabilities must sum to 1 (got " + std::to_string(total) + ")");
    if (2.0 * (p_sum + p_prod) >= 1.0)
      throw ConfigError("grammar is not subcritical: need 2 (p_sum + p_prod) < 1");
    if (base_total() <= 0.0) throw ConfigError("at least one base kernel needs positive mass");
  }
};

// ---------------------------------------------------------------------------
// Hyperparameter priors
// ---------------------------------------------------------------------------

/// Independent Gaussian on one unconstrained entry. scale == 0 denotes a
/// point mass at `location` (log-density 0 at the point, -inf elsewhere),
/// which is how tests pin parameters while leaving every density identity
/// intact.
struct NormalPrior {
  double location = 0.0;
  double scale = 1.0;

  double sample(Rng& rng) const { return scale == 0.0 ? location : rng.normal(location, scale); }

  double log_density(double x) const {
    if (scale == 0.0) return x == location ? 0.0 : kNegInf;
    const double z = (x - location) / scale;
    return -0.5 * z * z - std::log(scale) - 0.5 * std::log(2.0 * std::numbers::pi);
  }

  double grad_log_density(double x) const {
    return scale == 0.0 ? 0.0 : -(x - location) / (scale * scale);
  }
};

/// Full generative prior: grammar rules, leaf cap, and one Gaussian per
/// hyperparameter role.
struct PriorConfig {
  RuleProbs rules;
  int max_leaves = 16;
  NormalPrior lengthscale{0.0, 1.0};
  NormalPrior period{0.0, 1.0};
  NormalPrior amplitude{0.0, 1.0};
  NormalPrior rq_shape{0.0, 1.0};
  NormalPrior lin_offset{0.0, 2.0};
  NormalPrior noise{-2.0, 1.0};

  const NormalPrior& for_role(ParamRole r) const {
    switch (r) {
      case ParamRole::Lengthscale:
        return lengthscale;
      case ParamRole::Period:
        return period;
      case ParamRole::Amplitude:
        return amplitude;
      case ParamRole::RqShape:
        return rq_shape;
      case ParamRole::LinOffset:
        return lin_offset;
      case ParamRole::Noise:
        return noise;
    }
    return amplitude;
  }

  void validate() const {
    rules.validate();
    if (max_leaves < 1) throw ConfigError("max_leaves must be at least 1");
    for (ParamRole r : {ParamRole::Lengthscale, ParamRole::Period, ParamRole::Amplitude,
                        ParamRole::RqShape, ParamRole::LinOffset, ParamRole::Noise})
      if (!(for_role(r).scale >= 0.0) || !std::isfinite(for_role(r).location))
        throw ConfigError("hyperparameter priors need finite location and scale >= 0");
  }
};

// ---------------------------------------------------------------------------
// Structure prior
// ---------------------------------------------------------------------------

namespace detail {

/// Expands one nonterminal. `emitted` counts leaves already produced across
/// the whole tree; `pending` counts sibling nonterminals still awaiting
/// expansion (each needs at least one leaf). Returns nullopt as soon as the
/// completed tree could not respect the cap, which rejects exactly the trees
/// full expansion would reject.
inline std::optional<KernelExpr> expand_structure(Rng& rng, const PriorConfig& cfg,
                                                  int& emitted, int pending) {
  if (emitted + pending + 1 > cfg.max_leaves) return std::nullopt;
  const RuleProbs& r = cfg.rules;
  const double u = rng.uniform();
  if (u < r.p_sum + r.p_prod) {
    const bool is_sum = u < r.p_sum;
    auto left = expand_structure(rng, cfg, emitted, pending + 1);
    if (!left) return std::nullopt;
    auto right = expand_structure(rng, cfg, emitted, pending);
    if (!right) return std::nullopt;
    return is_sum ? KernelExpr::sum(*left, *right) : KernelExpr::product(*left, *right);
  }
  // base kernel draw from the remaining mass
  double rem = u - r.p_sum - r.p_prod;
  int kind = kBaseKindCount - 1;
  for (int i = 0; i < kBaseKindCount; ++i) {
    if (rem < r.p_base[static_cast<std::size_t>(i)]) {
      kind = i;
      break;
    }
    rem -= r.p_base[static_cast<std::size_t>(i)];
  }
  ++emitted;
  return KernelExpr::leaf(static_cast<BaseKind>(kind));
}

}  // namespace detail

inline constexpr int kStructureSampleRetries = 10000;

/// Draws a kernel structure from the grammar, rejecting trees above the leaf
/// cap.
inline KernelExpr sample_structure(Rng& rng, const PriorConfig& config) {
  config.validate();
  for (int attempt = 0; attempt < kStructureSampleRetries; ++attempt) {
    int emitted = 0;
    if (auto e = detail::expand_structure(rng, config, emitted, 0)) return *e;
  }
  throw ConfigError("sample_structure: rejection retries exhausted (rule probabilities too "
                    "close to critical for the configured leaf cap)");
}

namespace detail {
inline double log_prior_structure_rec(const KernelExpr& expr, const RuleProbs& r) {
  if (expr.is_leaf()) return std::log(r.p_base[static_cast<std::size_t>(expr.kind())]);
  const double rule = expr.tag() == KernelExpr::Tag::Sum ? r.p_sum : r.p_prod;
  return std::log(rule) + log_prior_structure_rec(expr.left(), r) +
         log_prior_structure_rec(expr.right(), r);
}
}  // namespace detail

/// Log probability of the unique derivation of `expr` under the grammar.
/// Not renormalized by the leaf-cap truncation mass: that constant cancels
/// in every acceptance ratio and relative weight.
inline double log_prior_structure(const KernelExpr& expr, const PriorConfig& config) {
  if (expr.leaf_count() > config.max_leaves)
    throw std::domain_error("log_prior_structure: tree exceeds the leaf cap");
  return detail::log_prior_structure_rec(expr, config.rules);
}

// ---------------------------------------------------------------------------
// Hyperparameter prior
// ---------------------------------------------------------------------------

/// Independent draw of every unconstrained entry for `expr`'s layout, noise
/// included.
inline HyperParams sample_params(Rng& rng, const KernelExpr& expr, const PriorConfig& config) {
  HyperParams p;
  p.values.resize(param_count(expr));
  int offset = 0;
  for (const LeafInfo& li : leaf_info(expr)) {
    for (ParamRole role : leaf_roles(li.kind)) p.values[offset++] = config.for_role(role).sample(rng);
  }
  p.values[offset] = config.noise.sample(rng);
  return p;
}

/// Sum of the per-entry Gaussian log densities; the exact density of
/// sample_params.
inline double log_prior_params(const KernelExpr& expr, const HyperParams& params,
                               const PriorConfig& config) {
  if (params.values.size() != param_count(expr))
    throw std::invalid_argument("log_prior_params: layout mismatch");
  double lp = 0.0;
  int offset = 0;
  for (const LeafInfo& li : leaf_info(expr)) {
    for (ParamRole role : leaf_roles(li.kind))
      lp += config.for_role(role).log_density(params.values[offset++]);
  }
  lp += config.noise.log_density(params.values[offset]);
  return lp;
}

/// Gradient of log_prior_params w.r.t. every unconstrained entry.
inline Vector grad_log_prior_params(const KernelExpr& expr, const HyperParams& params,
                                    const PriorConfig& config) {
  if (params.values.size() != param_count(expr))
    throw std::invalid_argument("grad_log_prior_params: layout mismatch");
  Vector g(params.values.size());
  int offset = 0;
  for (const LeafInfo& li : leaf_info(expr)) {
    for (ParamRole role : leaf_roles(li.kind)) {
      g[offset] = config.for_role(role).grad_log_density(params.values[offset]);
      ++offset;
    }
  }
  g[offset] = config.noise.grad_log_density(params.values[offset]);
  return g;
}

/// 1 where the prior leaves the entry free, 0 where it pins a point mass.
inline Vector free_param_mask(const KernelExpr& expr, const PriorConfig& config) {
  Vector mask(param_count(expr));
  int offset = 0;
  for (const LeafInfo& li : leaf_info(expr)) {
    for (ParamRole role : leaf_roles(li.kind))
      mask[offset++] = config.for_role(role).scale == 0.0 ? 0.0 : 1.0;
  }
  mask[offset] = config.noise.scale == 0.0 ? 0.0 : 1.0;
  return mask;
}

}  // namespace gpstruct
