// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Two-level precision assignments over the tensor set of a graph: the
// candidate formats each tensor may take, the assignment schemes (uniform,
// operator-based, size-ordered group demotion) and the low-precision ratio.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/fpnum.hpp"
#include "mpt/graph.hpp"

namespace mpt {

enum class Level : std::uint8_t { lo, hi };

inline std::string_view to_string(Level level) {
  return level == Level::lo ? "lo" : "hi";
}

/// Candidate formats C(t, lo) and C(t, hi), aligned with Graph::tensors().
struct PrecisionCandidate {
  std::vector<FpFormat> lo_of;
  std::vector<FpFormat> hi_of;

  const FpFormat& format(std::size_t position, Level level) const {
    return level == Level::lo ? lo_of[position] : hi_of[position];
  }

  /// True when all lo formats share a bitwidth, all hi formats share one,
  /// and the lo bitwidth is strictly smaller.
  bool is_two_level() const {
    if (lo_of.empty() || lo_of.size() != hi_of.size()) return false;
    const int lo_bits = lo_of.front().bitwidth();
    const int hi_bits = hi_of.front().bitwidth();
    auto same = [](const std::vector<FpFormat>& v, int bits) {
      return std::all_of(v.begin(), v.end(), [bits](const FpFormat& f) {
        return f.bitwidth() == bits;
      });
    };
    return same(lo_of, lo_bits) && same(hi_of, hi_bits) && lo_bits < hi_bits;
  }
};

/// Same lo/hi pair for every tensor. Throws if it is not a valid candidate.
inline PrecisionCandidate make_candidate(const Graph& g, const FpFormat& lo,
                                         const FpFormat& hi) {
  require_valid(lo);
  require_valid(hi);
  PrecisionCandidate c{std::vector<FpFormat>(g.tensor_count(), lo),
                       std::vector<FpFormat>(g.tensor_count(), hi)};
  if (!c.is_two_level()) {
    throw DomainError("lo format " + lo.name() + " must be narrower than " +
                      hi.name());
  }
  return c;
}

/// fp32 at both levels. Not a two-level candidate; used for full-precision
/// baselines so that the same training loop can run them.
inline PrecisionCandidate fp32_candidate(const Graph& g) {
  return {std::vector<FpFormat>(g.tensor_count(), kFp32),
          std::vector<FpFormat>(g.tensor_count(), kFp32)};
}

inline constexpr FpFormat kHfp8Hi{6, 9, 0};
inline constexpr FpFormat kHfp8ForwardLo{4, 3, 4};
inline constexpr FpFormat kHfp8BackwardLo{5, 2, 0};

/// 16-bit fp(6,9,0) high precision everywhere; 8-bit fp(4,3,4) low precision
/// for forward tensors and fp(5,2,0) for backward tensors.
inline PrecisionCandidate candidate_hfp8(const Graph& g) {
  PrecisionCandidate c;
  for (const TensorMeta& t : g.tensors()) {
    c.lo_of.push_back(is_forward(t.id.kind) ? kHfp8ForwardLo : kHfp8BackwardLo);
    c.hi_of.push_back(kHfp8Hi);
  }
  return c;
}

/// Level per tensor, aligned with Graph::tensors(). Tensors in forced_hi are
/// pinned to hi.
struct PrecisionAssignment {
  std::vector<Level> level_of;
  std::vector<bool> forced_hi;

  Level level(const Graph& g, TensorId id) const {
    return level_of[g.position(id)];
  }
  bool is_forced(const Graph& g, TensorId id) const {
    return forced_hi[g.position(id)];
  }
  void set(const Graph& g, TensorId id, Level level) {
    const std::size_t k = g.position(id);
    level_of[k] = forced_hi[k] ? Level::hi : level;
  }

  friend bool operator==(const PrecisionAssignment&,
                         const PrecisionAssignment&) = default;
};

inline PrecisionAssignment uniform_assignment(const Graph& g, Level level,
                                              std::span<const TensorId> forced_hi = {}) {
  PrecisionAssignment a{std::vector<Level>(g.tensor_count(), level),
                        std::vector<bool>(g.tensor_count(), false)};
  for (TensorId id : forced_hi) {
    const std::size_t k = g.position(id);
    a.forced_hi[k] = true;
    a.level_of[k] = Level::hi;
  }
  return a;
}

/// All backward weight tensors dtheta_j.
inline std::vector<TensorId> backward_weight_tensors(const Graph& g) {
  std::vector<TensorId> out;
  for (int j : g.params()) out.push_back(dtheta_(j));
  return out;
}

/// Concrete formats of an assignment, aligned with Graph::tensors().
inline std::vector<FpFormat> resolve_formats(const PrecisionCandidate& c,
                                             const PrecisionAssignment& a) {
  std::vector<FpFormat> out(a.level_of.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = c.format(k, a.level_of[k]);
  return out;
}

inline std::size_t low_precision_size(const Graph& g, const PrecisionAssignment& a) {
  std::size_t lo = 0;
  for (std::size_t k = 0; k < g.tensor_count(); ++k) {
    if (a.level_of[k] == Level::lo) lo += g.tensors()[k].size;
  }
  return lo;
}

/// Fraction of tensor elements assigned the low-precision format.
inline double lrt(const Graph& g, const PrecisionAssignment& a) {
  if (a.level_of.size() != g.tensor_count()) {
    throw LookupError("assignment does not cover the tensor set");
  }
  return static_cast<double>(low_precision_size(g, a)) /
         static_cast<double>(g.total_size());
}

/// Every tensor lo except the forced ones.
inline PrecisionAssignment assign_uniform(const Graph& g,
                                          std::span<const TensorId> forced_hi = {}) {
  if (g.tensor_count() == 0) throw ConstructionError("empty graph");
  return uniform_assignment(g, Level::lo, forced_hi);
}

enum class OpVariant { op, op_prime };

/// Low precision on the inputs (op) or inputs and outputs (op_prime) of every
/// GEMM operator except the first and last one in operator order.
inline PrecisionAssignment assign_op_based(const Graph& g, OpVariant variant,
                                           std::span<const TensorId> forced_hi = {}) {
  PrecisionAssignment a = uniform_assignment(g, Level::hi, forced_hi);
  std::vector<const OpNode*> gemms;
  for (const OpNode& op : g.ops()) {
    if (op.is_gemm) gemms.push_back(&op);
  }
  for (std::size_t k = 1; k + 1 < gemms.size(); ++k) {
    const OpNode& op = *gemms[k];
    const int in = op.inputs.front();
    const int out = op.outputs.front();
    a.set(g, x_(in), Level::lo);
    a.set(g, theta_(op.param), Level::lo);
    a.set(g, dx_(out), Level::lo);
    if (variant == OpVariant::op_prime) {
      a.set(g, x_(out), Level::lo);
      a.set(g, dx_(in), Level::lo);
      a.set(g, dtheta_(op.param), Level::lo);
    }
  }
  return a;
}

struct DemotionOrder {
  enum class Kind { decreasing, increasing, random };
  Kind kind = Kind::decreasing;
  std::uint64_t seed = 0;

  static DemotionOrder decreasing() { return {Kind::decreasing, 0}; }
  static DemotionOrder increasing() { return {Kind::increasing, 0}; }
  static DemotionOrder random(std::uint64_t seed) { return {Kind::random, seed}; }
};

struct DemotionPlan {
  std::vector<TensorGroup> groups;
  /// Group indices in the order they would be demoted.
  std::vector<std::size_t> order;
  /// How many groups of `order` were demoted.
  std::size_t demoted = 0;
  PrecisionAssignment assignment;
};

/// Sequence in which groups are demoted. Equal-size groups keep their
/// operator order under both size orders.
inline std::vector<std::size_t> demotion_sequence(const std::vector<TensorGroup>& groups,
                                                  DemotionOrder order) {
  std::vector<std::size_t> seq(groups.size());
  std::iota(seq.begin(), seq.end(), std::size_t{0});
  switch (order.kind) {
    case DemotionOrder::Kind::decreasing:
      std::stable_sort(seq.begin(), seq.end(), [&](std::size_t a, std::size_t b) {
        return groups[a].total_size > groups[b].total_size;
      });
      break;
    case DemotionOrder::Kind::increasing:
      std::stable_sort(seq.begin(), seq.end(), [&](std::size_t a, std::size_t b) {
        return groups[a].total_size < groups[b].total_size;
      });
      break;
    case DemotionOrder::Kind::random: {
      std::mt19937_64 rng(order.seed);
      std::shuffle(seq.begin(), seq.end(), rng);
      break;
    }
  }
  return seq;
}

/// Start from all-hi and demote whole groups in the chosen order until the
/// low-precision ratio first reaches r.
inline DemotionPlan plan_demotion(const Graph& g, double r, DemotionOrder order,
                                  std::span<const TensorId> forced_hi = {}) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw DomainError("low-precision ratio bound must lie in [0, 1]");
  }
  DemotionPlan plan;
  plan.groups = group_tensors(g);
  plan.order = demotion_sequence(plan.groups, order);
  plan.assignment = uniform_assignment(g, Level::hi, forced_hi);
  const auto total = static_cast<double>(g.total_size());
  std::size_t lo_size = 0;
  for (std::size_t group : plan.order) {
    if (static_cast<double>(lo_size) / total >= r) break;
    for (TensorId id : plan.groups[group].members) {
      const std::size_t k = g.position(id);
      if (plan.assignment.forced_hi[k]) continue;
      plan.assignment.level_of[k] = Level::lo;
      lo_size += g.tensors()[k].size;
    }
    ++plan.demoted;
  }
  return plan;
}

inline PrecisionAssignment assign_ours(const Graph& g, double r,
                                       DemotionOrder order = DemotionOrder::decreasing(),
                                       std::span<const TensorId> forced_hi = {}) {
  return plan_demotion(g, r, order, forced_hi).assignment;
}

}  // namespace mpt
