// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Simulated low-precision floating-point formats.
//
// A format fp(e, m, b) has a sign bit, e exponent bits, m mantissa bits and an
// extra exponent bias b on top of the usual 2^(e-1)-1. Every exponent code is
// finite: there are no Inf/NaN encodings, code 0 holds zero and subnormals,
// and values beyond the largest magnitude saturate. Values are carried in
// double precision and constrained to the representable set; no bit-level
// storage format is produced.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mpt/errors.hpp"

namespace mpt {

struct FpFormat {
  int exp_bits = 8;
  int man_bits = 23;
  int extra_bias = 0;

  constexpr int bitwidth() const noexcept { return 1 + exp_bits + man_bits; }
  constexpr int base_bias() const noexcept {
    return (1 << (exp_bits - 1)) - 1;
  }
  /// Unbiased exponent of the smallest normal binade (exponent code 1).
  constexpr int min_exponent() const noexcept {
    return 1 - base_bias() - extra_bias;
  }
  /// Unbiased exponent of the largest binade (all-ones exponent code).
  constexpr int max_exponent() const noexcept {
    return (1 << exp_bits) - 1 - base_bias() - extra_bias;
  }

  double max_magnitude() const noexcept {
    return std::ldexp(2.0 - std::ldexp(1.0, -man_bits), max_exponent());
  }
  double min_subnormal() const noexcept {
    return std::ldexp(1.0, min_exponent() - man_bits);
  }
  double min_normal() const noexcept {
    return std::ldexp(1.0, min_exponent());
  }

  /// Formats must be exactly representable with double arithmetic.
  bool is_valid() const noexcept {
    if (exp_bits < 1 || exp_bits > 11 || man_bits < 0 || man_bits > 52) {
      return false;
    }
    return max_exponent() <= 1023 && min_exponent() - man_bits >= -1074;
  }

  std::string name() const {
    return "fp(" + std::to_string(exp_bits) + "," + std::to_string(man_bits) +
           "," + std::to_string(extra_bias) + ")";
  }

  friend constexpr bool operator==(const FpFormat&, const FpFormat&) = default;
};

inline constexpr FpFormat kFp32{8, 23, 0};

inline void require_valid(const FpFormat& fmt) {
  if (!fmt.is_valid()) {
    throw DomainError("format " + fmt.name() +
                      " is not representable in double precision");
  }
}

struct RoundOutcome {
  double value = 0.0;
  bool overflowed = false;
  bool underflowed_to_zero = false;
};

namespace detail {

// Rounding without validity or finiteness checks; callers guarantee both.
inline RoundOutcome round_unchecked(const FpFormat& fmt, double x) noexcept {
  RoundOutcome out;
  const double mag = std::fabs(x);
  if (mag == 0.0) {
    out.value = x;
    return out;
  }
  const double max_mag = fmt.max_magnitude();
  if (mag > max_mag) {
    out.value = std::copysign(max_mag, x);
    out.overflowed = true;
    return out;
  }

  int exp2 = 0;
  std::frexp(mag, &exp2);  // mag = f * 2^exp2 with f in [0.5, 1)
  const int min_exp = fmt.min_exponent();
  const int binade = std::max(exp2 - 1, min_exp);
  const int quantum_exp = binade - fmt.man_bits;

  const double scaled = std::ldexp(mag, -quantum_exp);  // exact
  double units = std::floor(scaled);
  const double frac = scaled - units;
  if (frac > 0.5) {
    units += 1.0;
  } else if (frac == 0.5) {
    // Tie: keep the neighbour whose encoding is even. The magnitude code is
    // (binade - min_exp) * 2^m + units, so its parity depends on the exponent
    // code only when m == 0.
    auto code = static_cast<std::int64_t>(units);
    if (fmt.man_bits == 0) code += binade - min_exp;
    if (code % 2 != 0) units += 1.0;
  }

  double mag_out = std::ldexp(units, quantum_exp);
  if (mag_out > max_mag) mag_out = max_mag;  // unreachable for mag <= max_mag
  out.value = std::copysign(mag_out, x);
  out.underflowed_to_zero = (mag_out == 0.0);
  return out;
}

}  // namespace detail

/// Round to nearest representable value of `fmt`, ties to even encoding,
/// saturating at +-max_magnitude. Overflow is flagged only when the input
/// magnitude strictly exceeds max_magnitude.
inline RoundOutcome round(const FpFormat& fmt, double x) {
  require_valid(fmt);
  if (!std::isfinite(x)) {
    throw DomainError("cannot round a non-finite value to " + fmt.name());
  }
  return detail::round_unchecked(fmt, x);
}

inline double round_value(const FpFormat& fmt, double x) {
  return round(fmt, x).value;
}

inline bool is_representable(const FpFormat& fmt, double x) {
  const RoundOutcome r = round(fmt, x);
  return !r.overflowed && r.value == x;
}

struct OverflowStats {
  std::size_t overflow_count = 0;
  std::size_t element_count = 0;

  double ratio() const noexcept {
    return element_count == 0
               ? 0.0
               : static_cast<double>(overflow_count) /
                     static_cast<double>(element_count);
  }
};

struct RoundedTensor {
  std::vector<double> values;
  std::size_t overflow_count = 0;
  std::size_t element_count = 0;
};

/// Rounds every element in place and reports how many saturated.
inline OverflowStats round_in_place(const FpFormat& fmt, std::span<double> xs) {
  require_valid(fmt);
  OverflowStats stats;
  stats.element_count = xs.size();
  for (double& x : xs) {
    if (!std::isfinite(x)) {
      throw DomainError("cannot round a non-finite value to " + fmt.name());
    }
    const RoundOutcome r = detail::round_unchecked(fmt, x);
    x = r.value;
    stats.overflow_count += r.overflowed ? 1 : 0;
  }
  return stats;
}

inline RoundedTensor round_tensor(const FpFormat& fmt,
                                  std::span<const double> xs) {
  RoundedTensor out;
  out.values.assign(xs.begin(), xs.end());
  const OverflowStats stats = round_in_place(fmt, out.values);
  out.overflow_count = stats.overflow_count;
  out.element_count = stats.element_count;
  return out;
}

inline constexpr int kMaxEnumerationBits = 16;

/// Every representable value of a format of at most 16 bits, ascending, with
/// a single zero.
inline std::vector<double> enumerate_values(const FpFormat& fmt) {
  require_valid(fmt);
  if (fmt.bitwidth() > kMaxEnumerationBits) {
    throw EnumerationRefused("refusing to enumerate " + fmt.name() + " (" +
                             std::to_string(fmt.bitwidth()) + " bits > " +
                             std::to_string(kMaxEnumerationBits) + ")");
  }
  const int m = fmt.man_bits;
  const std::int64_t mantissas = std::int64_t{1} << m;
  const std::int64_t exponents = std::int64_t{1} << fmt.exp_bits;

  std::vector<double> magnitudes;
  magnitudes.reserve(static_cast<std::size_t>(mantissas * exponents));
  for (std::int64_t code = 0; code < exponents; ++code) {
    for (std::int64_t k = 0; k < mantissas; ++k) {
      if (code == 0) {
        magnitudes.push_back(
            std::ldexp(static_cast<double>(k), fmt.min_exponent() - m));
      } else {
        const int exponent = fmt.min_exponent() + static_cast<int>(code) - 1;
        magnitudes.push_back(
            std::ldexp(static_cast<double>(mantissas + k), exponent - m));
      }
    }
  }

  std::vector<double> values;
  values.reserve(2 * magnitudes.size() - 1);
  for (auto it = magnitudes.rbegin(); it != magnitudes.rend(); ++it) {
    if (*it != 0.0) values.push_back(-*it);
  }
  values.insert(values.end(), magnitudes.begin(), magnitudes.end());
  return values;
}

}  // namespace mpt
