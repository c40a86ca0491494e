#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gpstruct/errors.hpp"
#include "gpstruct/gp.hpp"
#include "gpstruct/kernel.hpp"
#include "gpstruct/prior.hpp"
#include "gpstruct/rng.hpp"

namespace gpstruct {

// ---------------------------------------------------------------------------
// Particles
// ---------------------------------------------------------------------------

/// One (structure, hyperparameters) state with cached target-density pieces.
/// The caches always equal recomputation from (expr, params, data).
struct Particle {
  KernelExpr expr;
  HyperParams params;
  double log_marginal = 0.0;
  double log_prior_structure = 0.0;
  double log_prior_params = 0.0;

  double log_prior() const { return log_prior_structure + log_prior_params; }
  /// Unnormalized log posterior density of this state.
  double log_target() const { return log_marginal + log_prior(); }
};

inline Particle make_particle(KernelExpr expr, HyperParams params, const Dataset& data,
                              const PriorConfig& prior) {
  Particle p;
  p.log_marginal = GpModel::fit(expr, params, data).log_marginal();
  p.log_prior_structure = log_prior_structure(expr, prior);
  p.log_prior_params = log_prior_params(expr, params, prior);
  p.expr = std::move(expr);
  p.params = std::move(params);
  return p;
}

struct Population {
  std::vector<Particle> particles;
  Vector log_weights;  // unnormalized

  int size() const { return static_cast<int>(particles.size()); }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct HmcConfig {
  int leapfrog_steps = 10;
  double step_size = 0.02;
  int transitions_per_sweep = 5;
};

enum class MoveKind { ExpandSum, ExpandProd, Swap, Delete };

struct MoveProbs {
  double expand_sum = 0.25;
  double expand_prod = 0.25;
  double swap = 0.25;
  double del = 0.25;

  double operator[](MoveKind m) const {
    switch (m) {
      case MoveKind::ExpandSum:
        return expand_sum;
      case MoveKind::ExpandProd:
        return expand_prod;
      case MoveKind::Swap:
        return swap;
      case MoveKind::Delete:
        return del;
    }
    return 0.0;
  }

  void validate() const {
    for (double p : {expand_sum, expand_prod, swap, del})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("move probabilities must lie in [0, 1]");
    if (std::abs(expand_sum + expand_prod + swap + del - 1.0) > 1e-12)
      throw ConfigError("move probabilities must sum to 1");
  }
};

/// "mh": every move is a posterior-invariant MH kernel and weights stay
/// uniform. "smc": structure proposals are always applied, their MH ratio
/// becomes an incremental importance weight, and the population is resampled
/// when the effective sample size drops below the threshold.
enum class WeightMode { Mh, Smc };

struct SamplerConfig {
  int particle_count = 64;
  int sweep_count = 100;
  HmcConfig hmc;
  double ess_threshold_fraction = 0.5;
  MoveProbs moves;
  WeightMode mode = WeightMode::Mh;
  std::uint64_t seed = 0;

  void validate() const {
    if (particle_count < 1) throw ConfigError("particle_count must be at least 1");
    if (sweep_count < 0) throw ConfigError("sweep_count must be non-negative");
    if (hmc.leapfrog_steps < 0) throw ConfigError("leapfrog_steps must be non-negative");
    if (!(hmc.step_size > 0.0)) throw ConfigError("hmc step_size must be positive");
    if (hmc.transitions_per_sweep < 0)
      throw ConfigError("transitions_per_sweep must be non-negative");
    if (!(ess_threshold_fraction > 0.0 && ess_threshold_fraction <= 1.0))
      throw ConfigError("ess_threshold_fraction must lie in (0, 1]");
    moves.validate();
  }
};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

inline double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf (or a stray +inf)
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::exp(v[i] - m);
  return m + std::log(acc);
}

/// Weights normalized to sum to 1. Throws if every log weight is -inf.
inline Vector normalized_weights(const Vector& log_weights) {
  if (log_weights.size() == 0) throw DegeneratePopulationError("empty weight vector");
  const double lse = log_sum_exp(log_weights);
  if (!std::isfinite(lse))
    throw DegeneratePopulationError("all particle weights vanished");
  return (log_weights.array() - lse).exp();
}

/// Effective sample size 1 / sum w_i^2 of the normalized weights.
inline double ess(const Vector& log_weights) {
  const Vector w = normalized_weights(log_weights);
  return 1.0 / w.squaredNorm();
}

/// Systematic resampling: one uniform offset, M evenly spaced positions.
/// Expected offspring count of particle i is exactly M * w_i.
inline std::vector<int> systematic_resample(Rng& rng, const Vector& log_weights) {
  const Vector w = normalized_weights(log_weights);
  const int m = static_cast<int>(w.size());
  const double u0 = rng.uniform() / m;
  std::vector<int> idx(static_cast<std::size_t>(m));
  int i = 0;
  double cum = w[0];
  for (int k = 0; k < m; ++k) {
    const double u = u0 + static_cast<double>(k) / m;
    while (u > cum && i + 1 < m) cum += w[++i];
    idx[static_cast<std::size_t>(k)] = i;
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Structure moves
// ---------------------------------------------------------------------------

/// A proposed structure jump with the forward and reverse proposal densities
/// needed by the acceptance ratio. New parameters are drawn from the prior
/// (so their prior terms cancel against the target in the ratio); parameters
/// of untouched leaves are carried over bitwise.
struct StructureProposal {
  bool valid = false;  // false: null proposal, always rejected
  KernelExpr new_expr;
  HyperParams new_params;
  double log_forward = 0.0;
  double log_reverse = 0.0;
  MoveKind move = MoveKind::Swap;
  int leaf_index = 0;
};

namespace detail {

inline Vector erase_segment(const Vector& v, int pos, int len) {
  Vector out(v.size() - len);
  out.head(pos) = v.head(pos);
  out.tail(v.size() - pos - len) = v.tail(v.size() - pos - len);
  return out;
}

inline Vector splice_segment(const Vector& v, int pos, int old_len, const Vector& seg) {
  Vector out(v.size() - old_len + seg.size());
  out.head(pos) = v.head(pos);
  out.segment(pos, seg.size()) = seg;
  out.tail(v.size() - pos - old_len) = v.tail(v.size() - pos - old_len);
  return out;
}

inline double renormalized_base_log_prob(const RuleProbs& r, BaseKind k) {
  const double p = r.p_base[static_cast<std::size_t>(k)];
  return p > 0.0 ? std::log(p / r.base_total()) : kNegInf;
}

inline Vector sample_leaf_params(Rng& rng, BaseKind kind, const PriorConfig& prior) {
  Vector vals(arity(kind));
  int i = 0;
  for (ParamRole role : leaf_roles(kind)) vals[i++] = prior.for_role(role).sample(rng);
  return vals;
}

inline double leaf_param_log_prior(BaseKind kind, const Vector& vals, const PriorConfig& prior) {
  double lp = 0.0;
  int i = 0;
  for (ParamRole role : leaf_roles(kind)) lp += prior.for_role(role).log_density(vals[i++]);
  return lp;
}

}  // namespace detail

/// Deterministic core of the structure proposal: everything random
/// (leaf choice, move type, fresh kind, fresh parameter values) is passed in.
/// Exposed so tests can enumerate the move set exactly.
inline StructureProposal propose_structure_move_at(const Particle& particle, int leaf_index,
                                                   MoveKind move, BaseKind fresh_kind,
                                                   const Vector& fresh_values,
                                                   const PriorConfig& prior,
                                                   const SamplerConfig& config) {
  const KernelExpr& expr = particle.expr;
  const int n_leaves = expr.leaf_count();
  const auto infos = leaf_info(expr);
  const LeafInfo& li = infos[static_cast<std::size_t>(leaf_index)];
  const double log_select = -std::log(static_cast<double>(n_leaves));

  StructureProposal prop;
  prop.move = move;
  prop.leaf_index = leaf_index;

  switch (move) {
    case MoveKind::ExpandSum:
    case MoveKind::ExpandProd: {
      if (n_leaves + 1 > prior.max_leaves) return prop;  // null: cap reached
      const bool is_sum = move == MoveKind::ExpandSum;
      const KernelExpr kept = KernelExpr::leaf(li.kind);
      const KernelExpr fresh = KernelExpr::leaf(fresh_kind);
      const KernelExpr sub =
          is_sum ? KernelExpr::sum(kept, fresh) : KernelExpr::product(kept, fresh);
      prop.new_expr = expr.replace_leaf(leaf_index, sub);
      // kept leaf keeps its block; the fresh block slots in right after it
      const int insert_at = li.param_offset + arity(li.kind);
      prop.new_params.values =
          detail::splice_segment(particle.params.values, insert_at, 0, fresh_values);
      prop.log_forward = log_select + std::log(config.moves[move]) +
                         detail::renormalized_base_log_prob(prior.rules, fresh_kind) +
                         detail::leaf_param_log_prior(fresh_kind, fresh_values, prior);
      // reverse: delete the fresh leaf out of the grown tree
      prop.log_reverse = -std::log(static_cast<double>(n_leaves + 1)) +
                         std::log(config.moves[MoveKind::Delete]);
      prop.valid = true;
      return prop;
    }
    case MoveKind::Swap: {
      prop.new_expr = expr.replace_leaf(leaf_index, KernelExpr::leaf(fresh_kind));
      const int a_old = arity(li.kind);
      const Vector old_values = particle.params.values.segment(li.param_offset, a_old);
      prop.new_params.values = detail::splice_segment(particle.params.values, li.param_offset,
                                                      a_old, fresh_values);
      prop.log_forward = log_select + std::log(config.moves[move]) +
                         detail::renormalized_base_log_prob(prior.rules, fresh_kind) +
                         detail::leaf_param_log_prior(fresh_kind, fresh_values, prior);
      prop.log_reverse = log_select + std::log(config.moves[move]) +
                         detail::renormalized_base_log_prob(prior.rules, li.kind) +
                         detail::leaf_param_log_prior(li.kind, old_values, prior);
      prop.valid = true;
      return prop;
    }
    case MoveKind::Delete: {
      if (n_leaves == 1) return prop;  // null: nothing to delete
      const int a_old = arity(li.kind);
      const Vector old_values = particle.params.values.segment(li.param_offset, a_old);
      prop.new_expr = expr.delete_leaf(leaf_index);
      prop.new_params.values =
          detail::erase_segment(particle.params.values, li.param_offset, a_old);
      prop.log_forward = log_select + std::log(config.moves[move]);
      // The reverse move is an expand on the sibling, which exists only when
      // this leaf is the right child of its parent and the sibling is itself
      // a leaf (expand always grows Sum(leaf, fresh) / Product(leaf, fresh)).
      if (li.is_right_child && li.sibling_is_leaf) {
        const MoveKind rev = li.parent_tag == KernelExpr::Tag::Sum ? MoveKind::ExpandSum
                                                                   : MoveKind::ExpandProd;
        prop.log_reverse = -std::log(static_cast<double>(n_leaves - 1)) +
                           std::log(config.moves[rev]) +
                           detail::renormalized_base_log_prob(prior.rules, li.kind) +
                           detail::leaf_param_log_prior(li.kind, old_values, prior);
      } else {
        prop.log_reverse = kNegInf;  // unreachable by any single move
      }
      prop.valid = true;
      return prop;
    }
  }
  return prop;
}

/// Draws (leaf, move type, fresh kind, fresh parameters) and builds the
/// proposal. Invalid combinations come back flagged as null.
inline StructureProposal propose_structure_move(Rng& rng, const Particle& particle,
                                                const PriorConfig& prior,
                                                const SamplerConfig& config) {
  const int n_leaves = particle.expr.leaf_count();
  const int leaf_index = rng.uniform_index(n_leaves);
  const std::array<double, 4> move_probs{config.moves.expand_sum, config.moves.expand_prod,
                                         config.moves.swap, config.moves.del};
  const auto move = static_cast<MoveKind>(rng.categorical(move_probs));
  BaseKind fresh_kind = BaseKind::SE;
  Vector fresh_values;
  if (move != MoveKind::Delete) {
    fresh_kind = static_cast<BaseKind>(rng.categorical(prior.rules.p_base));
    fresh_values = detail::sample_leaf_params(rng, fresh_kind, prior);
  }
  return propose_structure_move_at(particle, leaf_index, move, fresh_kind, fresh_values, prior,
                                   config);
}

// ---------------------------------------------------------------------------
// Metropolis-Hastings structure step
// ---------------------------------------------------------------------------

struct MhResult {
  Particle particle;
  bool accepted = false;
  bool numerical_failure = false;
  double log_ratio = kNegInf;
};

/// Accept/reject a given proposal against the posterior. A numerically
/// degenerate proposed model counts as a rejection.
inline MhResult mh_structure_apply(Rng& rng, const Particle& particle,
                                   const StructureProposal& prop, const Dataset& data,
                                   const PriorConfig& prior) {
  if (!prop.valid) return {particle, false, false, kNegInf};
  Particle proposed;
  try {
    proposed = make_particle(prop.new_expr, prop.new_params, data, prior);
  } catch (const NumericalError&) {
    return {particle, false, true, kNegInf};
  }
  const double log_ratio = (proposed.log_target() + prop.log_reverse) -
                           (particle.log_target() + prop.log_forward);
  const double u = rng.uniform();
  if (std::log(u) < log_ratio) return {std::move(proposed), true, false, log_ratio};
  return {particle, false, false, log_ratio};
}

/// One structure MH transition: propose, then accept/reject. Leaves the
/// posterior over (structure, parameters) invariant.
inline Particle mh_structure_step(Rng& rng, const Particle& particle, const Dataset& data,
                                  const PriorConfig& prior, const SamplerConfig& config) {
  const StructureProposal prop = propose_structure_move(rng, particle, prior, config);
  return mh_structure_apply(rng, particle, prop, data, prior).particle;
}

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo on the hyperparameters
// ---------------------------------------------------------------------------

struct HmcResult {
  Particle particle;
  bool accepted = false;
  bool divergent = false;
  double delta_h = 0.0;
};

/// One HMC transition on the unconstrained hyperparameters with the structure
/// held fixed. Identity mass matrix; the step size is jittered by +-20% per
/// transition. Point-mass coordinates (prior scale 0) are frozen: zero
/// momentum, zero gradient step. Non-finite energies reject immediately.
inline HmcResult hmc_transition(Rng& rng, const Particle& particle, const Dataset& data,
                                const PriorConfig& prior, const SamplerConfig& config) {
  const int steps = config.hmc.leapfrog_steps;
  if (steps == 0) return {particle, true, false, 0.0};

  const Eigen::Index dim = particle.params.values.size();
  const Vector mask = free_param_mask(particle.expr, prior);

  Vector momentum(dim);
  for (Eigen::Index i = 0; i < dim; ++i) momentum[i] = rng.normal();
  momentum = momentum.cwiseProduct(mask);
  const double eps = config.hmc.step_size * rng.uniform(0.8, 1.2);
  const double accept_u = rng.uniform();

  // Potential U = -(log marginal + log prior over params); structure prior is
  // constant here.
  struct Energies {
    double u;
    double lm;
    double lpp;
  };
  auto potential = [&](const HyperParams& p) -> std::optional<Energies> {
    try {
      const double lm = GpModel::fit(particle.expr, p, data).log_marginal();
      const double lpp = log_prior_params(particle.expr, p, prior);
      const double u = -(lm + lpp);
      if (!std::isfinite(u)) return std::nullopt;
      return Energies{u, lm, lpp};
    } catch (const NumericalError&) {
      return std::nullopt;
    }
  };
  auto grad_potential = [&](const HyperParams& p) -> std::optional<Vector> {
    try {
      const Vector g = GpModel::fit(particle.expr, p, data).grad_log_marginal() +
                       grad_log_prior_params(particle.expr, p, prior);
      if (!g.allFinite()) return std::nullopt;
      return Vector((-g).cwiseProduct(mask));
    } catch (const NumericalError&) {
      return std::nullopt;
    }
  };

  const double h0 =
      -(particle.log_marginal + particle.log_prior_params) + 0.5 * momentum.squaredNorm();

  HyperParams q = particle.params;
  Vector p = momentum;
  auto g = grad_potential(q);
  if (!g) return {particle, false, true, std::numeric_limits<double>::infinity()};

  p -= 0.5 * eps * (*g);
  for (int s = 0; s < steps; ++s) {
    q.values += eps * p.cwiseProduct(mask);
    if (!q.values.allFinite())
      return {particle, false, true, std::numeric_limits<double>::infinity()};
    g = grad_potential(q);
    if (!g) return {particle, false, true, std::numeric_limits<double>::infinity()};
    p -= (s + 1 == steps ? 0.5 : 1.0) * eps * (*g);
  }

  const auto e1 = potential(q);
  if (!e1) return {particle, false, true, std::numeric_limits<double>::infinity()};
  const double h1 = e1->u + 0.5 * p.squaredNorm();
  const double delta_h = h1 - h0;

  if (std::log(accept_u) < -delta_h) {
    Particle next = particle;
    next.params = std::move(q);
    next.log_marginal = e1->lm;
    next.log_prior_params = e1->lpp;
    return {std::move(next), true, false, delta_h};
  }
  return {particle, false, false, delta_h};
}

inline Particle hmc_step(Rng& rng, const Particle& particle, const Dataset& data,
                         const PriorConfig& prior, const SamplerConfig& config) {
  return hmc_transition(rng, particle, data, prior, config).particle;
}

// ---------------------------------------------------------------------------
// Population initialization and sweeps
// ---------------------------------------------------------------------------

inline constexpr int kInitRetriesPerSlot = 100;

/// M particles drawn from the joint prior with uniform weights. A slot whose
/// draw is numerically degenerate is redrawn (bounded retries).
inline Population init_population(Rng& rng, const SamplerConfig& config,
                                  const PriorConfig& prior, const Dataset& data) {
  config.validate();
  prior.validate();
  check_dataset(data);
  Population pop;
  pop.particles.reserve(static_cast<std::size_t>(config.particle_count));
  for (int j = 0; j < config.particle_count; ++j) {
    Rng slot_rng = rng.stream(static_cast<std::uint64_t>(j));
    bool filled = false;
    for (int attempt = 0; attempt < kInitRetriesPerSlot && !filled; ++attempt) {
      KernelExpr expr = sample_structure(slot_rng, prior);
      HyperParams params = sample_params(slot_rng, expr, prior);
      try {
        pop.particles.push_back(make_particle(std::move(expr), std::move(params), data, prior));
        filled = true;
      } catch (const NumericalError&) {
      }
    }
    if (!filled)
      throw NumericalError("init_population: slot " + std::to_string(j) +
                               " degenerate after " + std::to_string(kInitRetriesPerSlot) +
                               " redraws",
                           kJitterLadder.back());
  }
  pop.log_weights = Vector::Constant(config.particle_count,
                                     -std::log(static_cast<double>(config.particle_count)));
  return pop;
}

/// Per-sweep diagnostics.
struct SweepStats {
  int structure_accepts = 0;
  int structure_proposals = 0;
  int null_proposals = 0;
  int numerical_rejects = 0;
  int hmc_accepts = 0;
  int hmc_transitions = 0;
  int hmc_divergences = 0;
  bool resampled = false;
  double ess_before_resample_check = 0.0;
};

/// One full mutation pass: per particle, one structure move then the
/// configured number of HMC transitions. Randomness is derived from
/// (seed, sweep index, particle index), so the result does not depend on
/// evaluation order.
inline Population sweep(const Population& population, const Dataset& data,
                        const PriorConfig& prior, const SamplerConfig& config, int sweep_index,
                        SweepStats* stats = nullptr) {
  const int m = population.size();
  Population next = population;
  Vector increments = Vector::Zero(m);
  const Rng root(config.seed);
  SweepStats local;

  for (int j = 0; j < m; ++j) {
    Rng prng = root.stream(static_cast<std::uint64_t>(sweep_index) + 1,
                           static_cast<std::uint64_t>(j));
    Particle& particle = next.particles[static_cast<std::size_t>(j)];

    const StructureProposal prop = propose_structure_move(prng, particle, prior, config);
    ++local.structure_proposals;
    if (!prop.valid) ++local.null_proposals;

    if (config.mode == WeightMode::Mh) {
      MhResult res = mh_structure_apply(prng, particle, prop, data, prior);
      if (res.accepted) ++local.structure_accepts;
      if (res.numerical_failure) ++local.numerical_rejects;
      particle = std::move(res.particle);
    } else {
      // smc mode: apply the move unconditionally; the MH ratio becomes the
      // incremental importance weight. Null proposals contribute log 1 = 0;
      // numerically degenerate proposals keep the previous state.
      if (prop.valid) {
        bool applied = false;
        try {
          Particle proposed = make_particle(prop.new_expr, prop.new_params, data, prior);
          increments[j] = (proposed.log_target() + prop.log_reverse) -
                          (particle.log_target() + prop.log_forward);
          particle = std::move(proposed);
          applied = true;
          ++local.structure_accepts;
        } catch (const NumericalError&) {
          ++local.numerical_rejects;
        }
        (void)applied;
      }
    }

    for (int t = 0; t < config.hmc.transitions_per_sweep; ++t) {
      HmcResult res = hmc_transition(prng, particle, data, prior, config);
      ++local.hmc_transitions;
      if (res.accepted) ++local.hmc_accepts;
      if (res.divergent) ++local.hmc_divergences;
      particle = std::move(res.particle);
    }
  }

  if (config.mode == WeightMode::Smc) {
    next.log_weights += increments;
    local.ess_before_resample_check = ess(next.log_weights);
    if (local.ess_before_resample_check < config.ess_threshold_fraction * m) {
      Rng resample_rng = root.stream(static_cast<std::uint64_t>(sweep_index) + 1,
                                     static_cast<std::uint64_t>(m), 1);
      const std::vector<int> ancestry = systematic_resample(resample_rng, next.log_weights);
      std::vector<Particle> resampled;
      resampled.reserve(static_cast<std::size_t>(m));
      for (int idx : ancestry) resampled.push_back(next.particles[static_cast<std::size_t>(idx)]);
      next.particles = std::move(resampled);
      next.log_weights = Vector::Constant(m, -std::log(static_cast<double>(m)));
      local.resampled = true;
    }
  }

  if (stats) *stats = local;
  return next;
}

/// Full run: prior initialization followed by `sweep_count` sweeps. The
/// optional callback sees the population after every sweep (for pooling or
/// tracing).
inline Population run_sampler(
    const Dataset& data, const PriorConfig& prior, const SamplerConfig& config,
    const std::function<void(int, const Population&)>& per_sweep = nullptr) {
  const Rng root(config.seed);
  Rng init_rng = root.stream(0);
  Population pop = init_population(init_rng, config, prior, data);
  for (int s = 0; s < config.sweep_count; ++s) {
    pop = sweep(pop, data, prior, config, s);
    if (per_sweep) per_sweep(s, pop);
  }
  return pop;
}

// ---------------------------------------------------------------------------
// Predictive mixture
// ---------------------------------------------------------------------------

struct MixtureComponent {
  double weight = 0.0;
  double mean = 0.0;
  double variance = 0.0;
};

/// Weighted mixture of per-particle Gaussian predictives, one component per
/// particle at every query point. Component weights are the normalized
/// particle weights and are identical across query points.
struct PredictiveMixture {
  Vector query_xs;
  Vector weights;    // normalized, one per particle
  Matrix means;      // query x particle
  Matrix variances;  // query x particle

  std::vector<MixtureComponent> components(Eigen::Index query) const {
    std::vector<MixtureComponent> out(static_cast<std::size_t>(weights.size()));
    for (Eigen::Index i = 0; i < weights.size(); ++i)
      out[static_cast<std::size_t>(i)] = {weights[i], means(query, i), variances(query, i)};
    return out;
  }

  double mean_at(Eigen::Index query) const { return means.row(query).dot(weights); }
};

inline PredictiveMixture predictive_mixture(const Population& population, const Dataset& data,
                                            const Vector& x_star) {
  PredictiveMixture mix;
  mix.query_xs = x_star;
  mix.weights = normalized_weights(population.log_weights);
  const int m = population.size();
  mix.means.resize(x_star.size(), m);
  mix.variances.resize(x_star.size(), m);
  for (int j = 0; j < m; ++j) {
    const Particle& p = population.particles[static_cast<std::size_t>(j)];
    const auto preds = posterior_predictive(p.expr, p.params, data, x_star);
    for (Eigen::Index q = 0; q < x_star.size(); ++q) {
      mix.means(q, j) = preds[static_cast<std::size_t>(q)].mean;
      mix.variances(q, j) = preds[static_cast<std::size_t>(q)].variance;
    }
  }
  return mix;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * std::numbers::inv_sqrt2); }

inline double mixture_cdf(std::span<const MixtureComponent> components, double v) {
  double acc = 0.0;
  for (const auto& c : components)
    acc += c.weight * normal_cdf((v - c.mean) / std::sqrt(c.variance));
  return acc;
}

inline constexpr double kQuantileTolerance = 1e-8;

/// Value v with mixture CDF(v) = q, by bisection on
/// [min(mean - 8 sigma), max(mean + 8 sigma)].
inline double mixture_quantile(std::span<const MixtureComponent> components, double q) {
  if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("mixture_quantile: q outside (0, 1)");
  if (components.empty()) throw std::invalid_argument("mixture_quantile: no components");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& c : components) {
    const double sd = std::sqrt(c.variance);
    lo = std::min(lo, c.mean - 8.0 * sd);
    hi = std::max(hi, c.mean + 8.0 * sd);
  }
  // widen if q is extreme enough to fall outside the 8-sigma bracket
  double width = hi - lo;
  while (mixture_cdf(components, lo) > q) lo -= width;
  while (mixture_cdf(components, hi) < q) hi += width;
  while (hi - lo > kQuantileTolerance) {
    const double mid = 0.5 * (lo + hi);
    if (mixture_cdf(components, mid) < q)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace gpstruct
