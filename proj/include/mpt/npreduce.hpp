// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Executable knapsack -> memory-accuracy tradeoff reduction.
//
// A knapsack instance (w, p, W) becomes a training problem: the input is split
// into n scalars, branch i broadcasts x_i over a weight vector theta_i of
// size w_i, all branch outputs are summed, and the loss is 2^-k |f - y|.
// Training is one gradient step with learning rate 2^-l from zero weights and
// master weights kept in the high-precision format. Formats are chosen so that
// the loss seed 2^-k survives only in high precision; keeping branch i's
// weight gradient, its branch-output gradient and the sum's gradient in high
// precision then corresponds to packing item i.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpt/assign.hpp"
#include "mpt/engine.hpp"
#include "mpt/errors.hpp"
#include "mpt/fpnum.hpp"
#include "mpt/graph.hpp"

namespace mpt {

struct KnapsackInstance {
  std::vector<long> weights;
  std::vector<long> profits;
  long capacity = 0;

  std::size_t size() const noexcept { return weights.size(); }

  void validate() const {
    if (weights.empty() || weights.size() != profits.size()) {
      throw DomainError("knapsack needs n >= 1 items with one weight and profit each");
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] < 1 || profits[i] < 1) {
        throw DomainError("knapsack weights and profits must be positive");
      }
    }
    if (capacity < 0) throw DomainError("knapsack capacity must be non-negative");
  }
};

using Selection = std::vector<int>;

struct KnapsackSolution {
  Selection alpha;
  long profit = 0;
};

inline long selection_weight(const KnapsackInstance& inst, const Selection& alpha) {
  long total = 0;
  for (std::size_t i = 0; i < alpha.size(); ++i) total += alpha[i] * inst.weights[i];
  return total;
}

inline long selection_profit(const KnapsackInstance& inst, const Selection& alpha) {
  long total = 0;
  for (std::size_t i = 0; i < alpha.size(); ++i) total += alpha[i] * inst.profits[i];
  return total;
}

inline constexpr std::size_t kMaxKnapsackItems = 20;

/// Exhaustive search over all 2^n selections. Among maximizers the
/// lexicographically smallest selection wins.
inline KnapsackSolution knapsack_bruteforce(const KnapsackInstance& inst) {
  inst.validate();
  const std::size_t n = inst.size();
  if (n > kMaxKnapsackItems) {
    throw EnumerationRefused("knapsack brute force limited to " +
                             std::to_string(kMaxKnapsackItems) + " items");
  }
  KnapsackSolution best{Selection(n, 0), 0};
  Selection alpha(n);
  // Item 0 is the most significant bit, so masks ascend lexicographically.
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    for (std::size_t i = 0; i < n; ++i) alpha[i] = (mask >> (n - 1 - i)) & 1U;
    if (selection_weight(inst, alpha) > inst.capacity) continue;
    const long profit = selection_profit(inst, alpha);
    if (profit > best.profit) best = {alpha, profit};
  }
  return best;
}

struct FormatPair {
  FpFormat hi;
  FpFormat lo;
};

/// Quantities derived from (w, p, k, l) that the format conditions refer to.
struct ReductionTargets {
  double rel_err = 0.0;
  std::vector<double> sqrt_ratios;  // sqrt(p_i / w_i)
  std::vector<double> x;            // sqrt_ratios rounded to lo
  std::vector<double> seeds;        // 2^-k and 2^-k x_i
  std::vector<double> steps;        // 2^-(k+l) x_i
  double y = 0.0;
};

namespace detail {

inline const std::vector<FpFormat>& reduction_format_space() {
  static const std::vector<FpFormat> space = [] {
    std::vector<FpFormat> out;
    for (int e = 1; e <= 8; ++e) {
      for (int m = 0; m <= 23; ++m) {
        for (int b = -16; b <= 16; ++b) {
          const FpFormat f{e, m, b};
          if (f.is_valid()) out.push_back(f);
        }
      }
    }
    std::stable_sort(out.begin(), out.end(), [](const FpFormat& a, const FpFormat& b) {
      if (a.bitwidth() != b.bitwidth()) return a.bitwidth() < b.bitwidth();
      if (a.exp_bits != b.exp_bits) return a.exp_bits < b.exp_bits;
      if (std::abs(a.extra_bias) != std::abs(b.extra_bias)) {
        return std::abs(a.extra_bias) < std::abs(b.extra_bias);
      }
      return a.extra_bias < b.extra_bias;
    });
    return out;
  }();
  return space;
}

inline bool rounds_to_itself(const FpFormat& f, double s) {
  const RoundOutcome r = detail::round_unchecked(f, s);
  return !r.overflowed && r.value == s;
}

/// Input values are close to sqrt(p_i/w_i) in lo, and 1 (the loss seed) is
/// exact in lo.
inline bool lo_represents_inputs(const FpFormat& lo, const ReductionTargets& t) {
  if (!rounds_to_itself(lo, 1.0)) return false;
  for (double s : t.sqrt_ratios) {
    const RoundOutcome r = detail::round_unchecked(lo, s);
    if (r.overflowed || !(std::fabs(r.value - s) < std::fabs(s) * t.rel_err)) {
      return false;
    }
  }
  return true;
}

inline bool lo_flushes_seeds(const FpFormat& lo, int k, std::span<const double> x) {
  if (detail::round_unchecked(lo, std::ldexp(1.0, -k)).value != 0.0) return false;
  for (double xi : x) {
    if (detail::round_unchecked(lo, std::ldexp(xi, -k)).value != 0.0) return false;
  }
  return true;
}

inline ReductionTargets make_targets(const KnapsackInstance& inst, int k, int l,
                                     const FpFormat& lo) {
  ReductionTargets t;
  const auto n = static_cast<double>(inst.size());
  const auto max_p = static_cast<double>(
      *std::max_element(inst.profits.begin(), inst.profits.end()));
  t.rel_err = 1.0 / (6.0 * n * max_p);
  double weighted = 0.0;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const double s = std::sqrt(static_cast<double>(inst.profits[i]) /
                               static_cast<double>(inst.weights[i]));
    t.sqrt_ratios.push_back(s);
    const double xi = detail::round_unchecked(lo, s).value;
    t.x.push_back(xi);
    weighted += static_cast<double>(inst.weights[i]) * xi * xi;
  }
  t.seeds.push_back(std::ldexp(1.0, -k));
  for (double xi : t.x) t.seeds.push_back(std::ldexp(xi, -k));
  for (double xi : t.x) t.steps.push_back(std::ldexp(xi, -(k + l)));
  // y = -2^a with 2^a the smallest power of two above 2^-(k+l) sum w_i x_i^2.
  int exponent = 0;
  std::frexp(std::ldexp(weighted, -(k + l)), &exponent);
  t.y = -std::ldexp(1.0, exponent);
  return t;
}

inline bool hi_is_compatible(const FpFormat& hi, const FpFormat& lo,
                             const ReductionTargets& t) {
  if (hi.bitwidth() <= lo.bitwidth() || hi.exp_bits < lo.exp_bits ||
      hi.man_bits < lo.man_bits) {
    return false;
  }
  for (double s : t.seeds) {
    if (!rounds_to_itself(hi, s)) return false;
  }
  for (double s : t.steps) {
    if (!rounds_to_itself(hi, s)) return false;
  }
  for (double xi : t.x) {
    if (!rounds_to_itself(hi, xi)) return false;
  }
  return rounds_to_itself(hi, 1.0) && rounds_to_itself(hi, t.y);
}

}  // namespace detail

/// Every condition the construction relies on, checked with the rounding
/// functions themselves.
struct FormatConditions {
  bool widths_nested = false;     // e_hi >= e_lo and m_hi >= m_lo
  bool inputs_accurate = false;   // |rnd_lo(s) - s| < |s| err for s = sqrt(p/w)
  bool seeds_flush_lo = false;    // rnd_lo(s) = 0 for s in {2^-k, 2^-k x_i}
  bool steps_exact_hi = false;    // rnd_hi(s) = s for seeds and 2^-(k+l) x_i
  bool support_exact = false;     // 1 exact in both; x_i and y exact in hi

  bool all() const {
    return widths_nested && inputs_accurate && seeds_flush_lo && steps_exact_hi &&
           support_exact;
  }
};

inline FormatConditions check_format_conditions(const KnapsackInstance& inst, int k,
                                                int l, const FormatPair& f) {
  const ReductionTargets t = detail::make_targets(inst, k, l, f.lo);
  FormatConditions c;
  c.widths_nested = f.hi.exp_bits >= f.lo.exp_bits && f.hi.man_bits >= f.lo.man_bits;
  c.inputs_accurate = detail::lo_represents_inputs(f.lo, t);
  c.seeds_flush_lo = detail::lo_flushes_seeds(f.lo, k, t.x);
  c.steps_exact_hi = true;
  for (double s : t.seeds) c.steps_exact_hi &= detail::rounds_to_itself(f.hi, s);
  for (double s : t.steps) c.steps_exact_hi &= detail::rounds_to_itself(f.hi, s);
  c.support_exact = detail::rounds_to_itself(f.lo, 1.0) &&
                    detail::rounds_to_itself(f.hi, 1.0) &&
                    detail::rounds_to_itself(f.hi, t.y);
  for (double xi : t.x) c.support_exact &= detail::rounds_to_itself(f.hi, xi);
  return c;
}

/// Smallest-bitwidth (lo, then hi) formats satisfying every construction
/// condition for the given k and l, searched over e <= 8, m <= 23,
/// |b| <= 16. Returns nullopt when the space is exhausted.
inline std::optional<FormatPair> choose_formats(const KnapsackInstance& inst, int k,
                                                int l) {
  inst.validate();
  if (k < 1 || l < 1) throw DomainError("k and l must be >= 1");
  const auto& space = detail::reduction_format_space();
  for (const FpFormat& lo : space) {
    const ReductionTargets t = detail::make_targets(inst, k, l, lo);
    if (!detail::lo_represents_inputs(lo, t)) continue;
    if (!detail::lo_flushes_seeds(lo, k, t.x)) continue;
    for (const FpFormat& hi : space) {
      if (detail::hi_is_compatible(hi, lo, t)) return FormatPair{hi, lo};
    }
  }
  return std::nullopt;
}

struct ReductionParameters {
  int k = 0;
  int l = 0;
  FormatPair formats;
};

/// Default k and l: l = 1 and the smallest k for which formats exist.
inline std::optional<ReductionParameters> find_parameters(const KnapsackInstance& inst,
                                                          int max_k = 64) {
  inst.validate();
  const int l = 1;
  // Flushing the seeds to zero is monotone in k, so only the smallest k that
  // works for some lo format can be the first success.
  std::vector<int> ks;
  for (const FpFormat& lo : detail::reduction_format_space()) {
    const ReductionTargets t = detail::make_targets(inst, 1, l, lo);
    if (!detail::lo_represents_inputs(lo, t)) continue;
    for (int k = 1; k <= max_k; ++k) {
      if (detail::lo_flushes_seeds(lo, k, t.x)) {
        ks.push_back(k);
        break;
      }
    }
  }
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (int k : ks) {
    if (auto f = choose_formats(inst, k, l)) return ReductionParameters{k, l, *f};
  }
  return std::nullopt;
}

struct ReductionInstance {
  KnapsackInstance knapsack;
  int k = 0;
  int l = 0;
  FormatPair formats;
  std::vector<double> x;
  double y = 0.0;
  /// Lower bound on the low-precision ratio, max{0, 1 - (2W+1)/size(TS)}.
  double r = 0.0;
  /// The same bound as an element count: lrt(pi) >= r iff lo size >= this.
  std::size_t min_lo_size = 0;
  Graph graph;
  PrecisionCandidate candidate;

  std::size_t n() const noexcept { return knapsack.size(); }
  /// Activation of the sum f(x); its gradient gates every item.
  int sum_activation() const noexcept { return 2 * static_cast<int>(n()) + 1; }
  /// Output activation of branch i (1-based).
  int branch_activation(std::size_t i) const noexcept {
    return static_cast<int>(n() + i);
  }
};

/// The split/broadcast/sum network. Activations: x_0 input, x_1..x_n split
/// outputs, x_{n+i} branch outputs of size w_i, x_{2n+1} the sum, x_{2n+2}
/// the loss. theta_i belongs to branch i.
inline Graph make_reduction_graph(const KnapsackInstance& inst, int k) {
  inst.validate();
  const int n = static_cast<int>(inst.size());
  GraphBuilder b(0);
  const int input = b.input({n});

  OpNode split;
  split.kind = OpKind::split;
  split.inputs = {input};
  const std::vector<int> parts = b.add(split, std::vector<Shape>(n, Shape{1}));

  std::vector<int> branches;
  for (int i = 0; i < n; ++i) {
    OpNode mul;
    mul.kind = OpKind::scale;
    mul.has_params = true;
    mul.param = i + 1;
    mul.param_shape = {static_cast<int>(inst.weights[i])};
    mul.inputs = {parts[i]};
    branches.push_back(b.add(mul, {Shape{static_cast<int>(inst.weights[i])}}).front());
  }

  OpNode sum;
  sum.kind = OpKind::add;
  sum.inputs = branches;
  const int f = b.add(sum, {Shape{1}}).front();

  OpNode loss;
  loss.kind = OpKind::l1_loss;
  loss.factor = std::ldexp(1.0, -k);
  loss.inputs = {f};
  b.add(loss, {Shape{1}});
  return std::move(b).build();
}

inline ReductionInstance build_instance(const KnapsackInstance& inst, int k, int l,
                                        const FormatPair& formats) {
  inst.validate();
  ReductionInstance ri;
  ri.knapsack = inst;
  ri.k = k;
  ri.l = l;
  ri.formats = formats;
  const ReductionTargets t = detail::make_targets(inst, k, l, formats.lo);
  ri.x = t.x;
  ri.y = t.y;
  ri.graph = make_reduction_graph(inst, k);
  ri.candidate = make_candidate(ri.graph, formats.lo, formats.hi);
  const auto total = static_cast<long>(ri.graph.total_size());
  const long slack = 2 * inst.capacity + 1;
  ri.min_lo_size = total > slack ? static_cast<std::size_t>(total - slack) : 0;
  ri.r = static_cast<double>(ri.min_lo_size) / static_cast<double>(total);
  return ri;
}

inline ReductionInstance build_instance(const KnapsackInstance& inst, int k, int l) {
  const std::optional<FormatPair> f = choose_formats(inst, k, l);
  if (!f) {
    throw DomainError("no formats satisfy the construction for k=" + std::to_string(k) +
                      ", l=" + std::to_string(l));
  }
  return build_instance(inst, k, l, *f);
}

inline ReductionInstance build_instance(const KnapsackInstance& inst) {
  const std::optional<ReductionParameters> p = find_parameters(inst);
  if (!p) throw DomainError("no k, l and formats found for this instance");
  return build_instance(inst, p->k, p->l, p->formats);
}

/// 2^-k y + 2^-(2k+l) sum_i alpha_i w_i x_i^2.
inline double acc_closed_form(const ReductionInstance& ri, const Selection& alpha) {
  double sum = 0.0;
  for (std::size_t i = 0; i < ri.n(); ++i) {
    sum += alpha[i] * static_cast<double>(ri.knapsack.weights[i]) * ri.x[i] * ri.x[i];
  }
  return std::ldexp(ri.y, -ri.k) + std::ldexp(sum, -(2 * ri.k + ri.l));
}

struct SimulatedRun {
  double accuracy = 0.0;
  std::vector<bool> level_sensitive;
};

/// One epoch of training on the single example, then accuracy = -loss of the
/// trained weights evaluated without rounding.
inline SimulatedRun simulate_training(const ReductionInstance& ri,
                                      const PrecisionAssignment& pi,
                                      bool probe_levels = false) {
  Batch batch;
  batch.size = 1;
  batch.inputs = ri.x;
  batch.targets = {ri.y};
  Weights weights;
  for (int j : ri.graph.params()) {
    weights.emplace_back(ri.graph.meta(theta_(j)).size, 0.0);
  }
  StepOptions options;
  if (probe_levels) options.probe = &ri.candidate;
  StepResult step = forward_backward(ri.graph, pi, ri.candidate, batch, weights, 1.0,
                                     options);
  sgd_update(weights, step.grads, std::ldexp(1.0, -ri.l), ri.formats.hi);
  const StepResult eval = forward_only(ri.graph, {}, batch, weights);
  return {-eval.loss, std::move(step.level_sensitive)};
}

inline double simulated_accuracy(const ReductionInstance& ri,
                                 const PrecisionAssignment& pi) {
  return simulate_training(ri, pi).accuracy;
}

/// alpha_i = 1 iff dtheta_i, dx_{n+i} and dx_{2n+1} are all high precision.
inline Selection extract_selection(const ReductionInstance& ri,
                                   const PrecisionAssignment& pi) {
  const Graph& g = ri.graph;
  const bool sum_hi = pi.level(g, dx_(ri.sum_activation())) == Level::hi;
  Selection alpha(ri.n(), 0);
  for (std::size_t i = 1; i <= ri.n(); ++i) {
    alpha[i - 1] = sum_hi && pi.level(g, dtheta_(static_cast<int>(i))) == Level::hi &&
                   pi.level(g, dx_(ri.branch_activation(i))) == Level::hi;
  }
  return alpha;
}

/// Assignment whose tensor k (canonical order) is hi iff bit (T-1-k) of mask
/// is set, so ascending masks enumerate assignments lexicographically with
/// lo < hi.
inline PrecisionAssignment assignment_from_mask(const Graph& g, std::uint64_t mask) {
  const std::size_t t = g.tensor_count();
  PrecisionAssignment a = uniform_assignment(g, Level::lo);
  for (std::size_t k = 0; k < t; ++k) {
    if ((mask >> (t - 1 - k)) & 1U) a.level_of[k] = Level::hi;
  }
  return a;
}

struct TradeoffSolution {
  PrecisionAssignment best;
  std::uint64_t best_mask = 0;
  double accuracy = 0.0;
  bool feasible = false;
  /// Number of training simulations run.
  std::size_t simulations = 0;
};

inline constexpr std::size_t kMaxEnumeratedTensors = 18;

/// Simulates every assignment in Pi(C) and returns the most accurate one with
/// lrt >= r; ties go to the lexicographically smallest assignment.
inline TradeoffSolution solve_tradeoff_bruteforce(const ReductionInstance& ri) {
  const Graph& g = ri.graph;
  const std::size_t t = g.tensor_count();
  if (t > kMaxEnumeratedTensors) {
    throw EnumerationRefused("refusing to enumerate 2^" + std::to_string(t) +
                             " assignments (limit 2^" +
                             std::to_string(kMaxEnumeratedTensors) + ")");
  }
  TradeoffSolution sol;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << t); ++mask) {
    std::size_t lo_size = 0;
    for (std::size_t k = 0; k < t; ++k) {
      if (!((mask >> (t - 1 - k)) & 1U)) lo_size += g.tensors()[k].size;
    }
    if (lo_size < ri.min_lo_size) continue;
    const PrecisionAssignment pi = assignment_from_mask(g, mask);
    const double acc = simulated_accuracy(ri, pi);
    ++sol.simulations;
    if (!sol.feasible || acc > sol.accuracy) {
      sol.feasible = true;
      sol.accuracy = acc;
      sol.best = pi;
      sol.best_mask = mask;
    }
  }
  return sol;
}

/// A set of assignments that share every rounded value during training: all
/// assignments that agree with `rep` on the decided tensors. `rep` puts every
/// undecided tensor in lo, so it is the lexicographically smallest member and
/// has the largest low-precision size.
struct AssignmentClass {
  std::uint64_t rep_mask = 0;
  std::size_t lo_size = 0;
  double accuracy = 0.0;
};

/// Exhaustive partition of Pi(C) into classes of identical training runs.
///
/// A tensor whose rounding gives bit-identical values in lo and hi for the
/// values it actually receives can be flipped without changing any value
/// downstream, so its level is irrelevant for that run. The search branches
/// only on tensors whose level changes a rounded value.
inline std::vector<AssignmentClass> enumerate_assignment_classes(
    const ReductionInstance& ri, std::size_t* simulations = nullptr) {
  const Graph& g = ri.graph;
  const std::size_t t = g.tensor_count();
  if (t > 63) throw EnumerationRefused("too many tensors for a 64-bit mask");
  std::vector<AssignmentClass> classes;
  std::size_t sims = 0;

  std::function<void(std::uint64_t, std::uint64_t, const SimulatedRun*)> explore =
      [&](std::uint64_t decided, std::uint64_t hi_bits, const SimulatedRun* cached) {
        SimulatedRun run;
        if (cached != nullptr) {
          run = *cached;
        } else {
          run = simulate_training(ri, assignment_from_mask(g, hi_bits), true);
          ++sims;
        }
        for (std::size_t k = 0; k < t; ++k) {
          const std::uint64_t bit = std::uint64_t{1} << (t - 1 - k);
          if (!run.level_sensitive[k] || (decided & bit)) continue;
          explore(decided | bit, hi_bits, &run);
          explore(decided | bit, hi_bits | bit, nullptr);
          return;
        }
        std::size_t lo_size = 0;
        for (std::size_t k = 0; k < t; ++k) {
          if (!((hi_bits >> (t - 1 - k)) & 1U)) lo_size += g.tensors()[k].size;
        }
        classes.push_back({hi_bits, lo_size, run.accuracy});
      };
  explore(0, 0, nullptr);
  if (simulations != nullptr) *simulations = sims;
  return classes;
}

/// Best feasible assignment from a class partition, with the same tie-break
/// as solve_tradeoff_bruteforce.
inline TradeoffSolution best_feasible(const ReductionInstance& ri,
                                      std::span<const AssignmentClass> classes) {
  TradeoffSolution sol;
  for (const AssignmentClass& c : classes) {
    if (c.lo_size < ri.min_lo_size) continue;
    if (!sol.feasible || c.accuracy > sol.accuracy ||
        (c.accuracy == sol.accuracy && c.rep_mask < sol.best_mask)) {
      sol.feasible = true;
      sol.accuracy = c.accuracy;
      sol.best_mask = c.rep_mask;
    }
  }
  if (sol.feasible) sol.best = assignment_from_mask(ri.graph, sol.best_mask);
  return sol;
}

/// Exact optimum over all of Pi(C) without the 2^|TS| size limit.
inline TradeoffSolution solve_tradeoff_exhaustive(const ReductionInstance& ri) {
  std::size_t sims = 0;
  const auto classes = enumerate_assignment_classes(ri, &sims);
  TradeoffSolution sol = best_feasible(ri, classes);
  sol.simulations = sims;
  return sol;
}

struct ReductionVerdict {
  bool holds = false;
  /// Extracted selection fits in the knapsack.
  bool feasible = false;
  /// Extracted selection reaches the knapsack optimum.
  bool optimal = false;
  Selection alpha;
  long alpha_profit = 0;
  KnapsackSolution knapsack;
  TradeoffSolution tradeoff;
};

inline ReductionVerdict verify_reduction(const ReductionInstance& ri) {
  ReductionVerdict v;
  v.knapsack = knapsack_bruteforce(ri.knapsack);
  v.tradeoff = ri.graph.tensor_count() <= kMaxEnumeratedTensors
                   ? solve_tradeoff_bruteforce(ri)
                   : solve_tradeoff_exhaustive(ri);
  if (!v.tradeoff.feasible) return v;
  v.alpha = extract_selection(ri, v.tradeoff.best);
  v.alpha_profit = selection_profit(ri.knapsack, v.alpha);
  v.feasible = selection_weight(ri.knapsack, v.alpha) <= ri.knapsack.capacity;
  v.optimal = v.alpha_profit == v.knapsack.profit;
  v.holds = v.feasible && v.optimal;
  return v;
}

/// Solves both problems and checks that the tradeoff optimum converts into a
/// knapsack optimum.
inline ReductionVerdict verify_reduction(const KnapsackInstance& inst, int k, int l) {
  return verify_reduction(build_instance(inst, k, l));
}

inline ReductionVerdict verify_reduction(const KnapsackInstance& inst) {
  return verify_reduction(build_instance(inst));
}

}  // namespace mpt
