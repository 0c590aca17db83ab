// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Independent oracles and generators shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mpt/engine.hpp"
#include "mpt/fpnum.hpp"
#include "mpt/graph.hpp"

namespace mpt::testing {

/// Nearest entry of an enumerated value table. On a tie the neighbour whose
/// position among the non-negative values is even wins; that position is
/// the magnitude part of the encoding. Beyond the table's ends the result
/// saturates.
inline double nearest_by_table(const std::vector<double>& table, double x) {
  const double mag = std::fabs(x);
  // Non-negative half of the table, ascending from 0.
  const auto pos = std::lower_bound(table.begin(), table.end(), 0.0);
  const double top = table.back();
  if (mag >= top) return std::copysign(top, x);
  const auto hi = std::upper_bound(pos, table.end(), mag);
  const auto lo = hi - 1;
  const double dlo = mag - *lo;
  const double dhi = *hi - mag;
  double pick;
  if (dlo < dhi) {
    pick = *lo;
  } else if (dhi < dlo) {
    pick = *hi;
  } else {
    const auto index = lo - pos;
    pick = index % 2 == 0 ? *lo : *hi;
  }
  return std::copysign(pick, x);
}

/// Random format with at most `max_bits` bits and a small extra bias.
inline FpFormat random_format(std::mt19937_64& rng, int max_bits = 12) {
  std::uniform_int_distribution<int> e_dist(1, 6);
  std::uniform_int_distribution<int> b_dist(-6, 6);
  while (true) {
    const int e = e_dist(rng);
    std::uniform_int_distribution<int> m_dist(0, std::max(0, max_bits - 1 - e));
    const FpFormat f{e, m_dist(rng), b_dist(rng)};
    if (f.bitwidth() <= max_bits && f.is_valid()) return f;
  }
}

/// Samples spanning the zero, subnormal, normal and saturating ranges, plus
/// exact table values and midpoints between neighbours.
inline std::vector<double> rounding_samples(const FpFormat& f, const std::vector<double>& table,
                                            std::mt19937_64& rng, std::size_t count) {
  std::vector<double> xs;
  const double max = f.max_magnitude();
  const double tiny = f.min_subnormal();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, table.size() - 2);
  std::bernoulli_distribution coin(0.5);
  while (xs.size() < count) {
    const std::size_t kind = xs.size() % 5;
    double x = 0.0;
    if (kind == 0) {
      x = (2.0 * unit(rng) - 1.0) * 1.5 * max;
    } else if (kind == 1) {
      // Log-uniform from well below the smallest subnormal to above max.
      const double lo = std::log2(tiny) - 3.0, hi = std::log2(max) + 3.0;
      x = std::exp2(lo + (hi - lo) * unit(rng));
    } else if (kind == 2) {
      const std::size_t k = pick(rng);
      x = 0.5 * (table[k] + table[k + 1]);
    } else if (kind == 3) {
      x = table[pick(rng)];
    } else {
      x = (2.0 * unit(rng) - 1.0) * 8.0 * f.min_normal();
    }
    xs.push_back(coin(rng) ? -x : x);
  }
  return xs;
}

/// A random chain model: either a dense stack on a flat input or a small
/// convnet on a [C,H,W] input.
struct RandomModel {
  std::vector<LayerSpec> layers;
  Shape input_shape;
  int classes = 2;
};

inline RandomModel random_model(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> small(1, 5);
  std::uniform_int_distribution<int> coin(0, 1);
  RandomModel m;
  m.classes = 2 + coin(rng);
  if (coin(rng) == 0) {
    m.input_shape = {small(rng) + 1};
    const int depth = small(rng);
    for (int d = 0; d < depth; ++d) {
      const int choice = std::uniform_int_distribution<int>(0, 3)(rng);
      if (choice == 0) m.layers.push_back(relu());
      else if (choice == 1) m.layers.push_back(scale(0.5 + coin(rng)));
      else m.layers.push_back(dense(small(rng) + 1));
    }
    m.layers.push_back(dense(m.classes));
  } else {
    const int side = 3 + coin(rng) * 2;
    m.input_shape = {coin(rng) + 1, side, side};
    const int convs = small(rng) % 3 + 1;
    for (int c = 0; c < convs; ++c) {
      const int k = coin(rng) == 0 ? 1 : 3;
      m.layers.push_back(conv2d(small(rng), k, 1, k / 2));
      if (coin(rng) == 1) m.layers.push_back(relu());
    }
    if (coin(rng) == 1) m.layers.push_back(global_avg_pool());
    m.layers.push_back(dense(m.classes));
  }
  return m;
}

inline Graph build_random_graph(std::mt19937_64& rng) {
  const RandomModel m = random_model(rng);
  return build_graph(m.layers, m.input_shape);
}

inline Batch random_batch(const Graph& g, std::size_t size, int classes, std::mt19937_64& rng,
                          const FpFormat& fmt = kFp32) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, classes - 1);
  Batch b;
  b.size = size;
  const std::size_t dim = g.meta(x_(g.input_activation())).size;
  for (std::size_t k = 0; k < size * dim; ++k) b.inputs.push_back(round_value(fmt, normal(rng)));
  for (std::size_t k = 0; k < size; ++k) b.targets.push_back(label(rng));
  return b;
}

/// Central differences of the unrounded mean loss with respect to every
/// weight element.
inline Weights finite_difference_grads(const Graph& g, const Batch& batch, Weights weights,
                                       double h = 1e-6) {
  Weights out;
  for (std::size_t s = 0; s < weights.size(); ++s) {
    std::vector<double> gs(weights[s].size());
    for (std::size_t k = 0; k < weights[s].size(); ++k) {
      const double orig = weights[s][k];
      weights[s][k] = orig + h;
      const double up = forward_only(g, {}, batch, weights).loss;
      weights[s][k] = orig - h;
      const double down = forward_only(g, {}, batch, weights).loss;
      weights[s][k] = orig;
      gs[k] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(gs));
  }
  return out;
}

/// max_k |a_k - b_k| / max_k |b_k| per tensor, maximized over tensors.
inline double max_relative_error(const Weights& got, const Weights& want) {
  double worst = 0.0;
  for (std::size_t s = 0; s < want.size(); ++s) {
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < want[s].size(); ++k) {
      num = std::max(num, std::fabs(got[s][k] - want[s][k]));
      den = std::max(den, std::fabs(want[s][k]));
    }
    if (den > 0.0) worst = std::max(worst, num / den);
    else worst = std::max(worst, num);
  }
  return worst;
}

inline Dataset easy_blobs(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.dim = 2;
  d.classes = 2;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (std::size_t k = 0; k < n; ++k) {
    const int label = static_cast<int>(k % 2);
    const double c = label == 0 ? -2.0 : 2.0;
    d.features.push_back(round_value(kFp32, c + noise(rng)));
    d.features.push_back(round_value(kFp32, c + noise(rng)));
    d.targets.push_back(label);
  }
  return d;
}

}  // namespace mpt::testing
