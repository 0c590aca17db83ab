// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Seeded synthetic datasets, CSV ingestion and the fixed 80/20 split.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mpt/engine.hpp"
#include "mpt/errors.hpp"

namespace mpt {

struct DatasetSpec {
  enum class Kind { blobs, moons, csv };
  Kind kind = Kind::blobs;
  std::size_t n = 200;
  std::size_t dim = 2;
  int classes = 2;
  std::uint64_t seed = 0;
  double noise = 0.1;
  /// Spread of blob centers; points have unit variance around them.
  double center_box = 4.0;
  std::string path;
  /// Zero-based; negative counts from the end (-1 is the last column).
  int label_column = -1;
  bool header = false;
};

struct DatasetSplit {
  Dataset train;
  Dataset eval;
};

/// Isotropic Gaussian clusters with centers uniform in [-box, box]^d.
/// Labels cycle through the classes so that every class is populated.
inline Dataset make_blobs(std::size_t n, std::size_t dim, int classes, std::uint64_t seed,
                          double box = 4.0) {
  if (n == 0 || dim == 0) throw DomainError("blobs need n >= 1 and d >= 1");
  if (classes < 2) throw DomainError("blobs need at least 2 classes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> center(-box, box);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> centers(static_cast<std::size_t>(classes) * dim);
  for (double& c : centers) c = center(rng);
  Dataset d;
  d.dim = dim;
  d.classes = classes;
  for (std::size_t k = 0; k < n; ++k) {
    const auto label = static_cast<std::size_t>(k % static_cast<std::size_t>(classes));
    for (std::size_t j = 0; j < dim; ++j) {
      d.features.push_back(centers[label * dim + j] + unit(rng));
    }
    d.targets.push_back(static_cast<double>(label));
  }
  return d;
}

/// Two interleaving half circles with Gaussian noise; ceil(n/2) points on the
/// upper moon (class 0), the rest on the lower one.
inline Dataset make_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n < 2) throw DomainError("moons need n >= 2");
  if (!(noise >= 0.0)) throw DomainError("moons noise must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const std::size_t upper = (n + 1) / 2;
  const std::size_t lower = n - upper;
  Dataset d;
  d.dim = 2;
  d.classes = 2;
  auto angle = [](std::size_t k, std::size_t count) {
    return count <= 1 ? 0.0
                      : std::numbers::pi * static_cast<double>(k) /
                            static_cast<double>(count - 1);
  };
  for (std::size_t k = 0; k < upper; ++k) {
    const double t = angle(k, upper);
    d.features.push_back(std::cos(t) + noise * jitter(rng));
    d.features.push_back(std::sin(t) + noise * jitter(rng));
    d.targets.push_back(0.0);
  }
  for (std::size_t k = 0; k < lower; ++k) {
    const double t = angle(k, lower);
    d.features.push_back(1.0 - std::cos(t) + noise * jitter(rng));
    d.features.push_back(0.5 - std::sin(t) + noise * jitter(rng));
    d.targets.push_back(1.0);
  }
  return d;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Numeric CSV with one integer class label column. Blank lines are skipped.
inline Dataset parse_csv_dataset(std::istream& in, int label_column, bool header) {
  Dataset d;
  std::string line;
  int line_no = 0;
  std::size_t columns = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (header && line_no == 1) continue;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line);
    if (columns == 0) {
      if (fields.size() < 2) throw ParseError("need at least one feature and a label", line_no);
      columns = fields.size();
      const int lc = label_column < 0 ? static_cast<int>(columns) + label_column : label_column;
      if (lc < 0 || lc >= static_cast<int>(columns)) {
        throw ParseError("label column " + std::to_string(label_column) + " out of range",
                         line_no);
      }
      label_column = lc;
      d.dim = columns - 1;
    } else if (fields.size() != columns) {
      throw ParseError("expected " + std::to_string(columns) + " fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      double v = 0.0;
      if (!detail::parse_double(fields[c], v)) {
        throw ParseError("non-numeric value '" + std::string(detail::trim(fields[c])) +
                             "' in column " + std::to_string(c),
                         line_no);
      }
      if (static_cast<int>(c) == label_column) {
        if (v < 0.0 || v != std::floor(v) || v > 1e6) {
          throw ParseError("label must be a non-negative integer", line_no);
        }
        d.targets.push_back(v);
        max_label = std::max(max_label, static_cast<int>(v));
      } else {
        d.features.push_back(v);
      }
    }
  }
  if (d.targets.empty()) throw ParseError("no data rows", line_no);
  d.classes = std::max(2, max_label + 1);
  return d;
}

inline Dataset load_csv_dataset(const std::string& path, int label_column, bool header) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_csv_dataset(in, label_column, header);
}

/// Seeded shuffle, then the first floor(0.8 n) rows train and the rest
/// evaluate.
inline DatasetSplit split_dataset(const Dataset& all, std::uint64_t seed) {
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = all.size() * 4 / 5;
  DatasetSplit s;
  for (Dataset* part : {&s.train, &s.eval}) {
    part->dim = all.dim;
    part->classes = all.classes;
  }
  for (std::size_t k = 0; k < order.size(); ++k) {
    Dataset& part = k < n_train ? s.train : s.eval;
    const auto row = all.row(order[k]);
    part.features.insert(part.features.end(), row.begin(), row.end());
    part.targets.push_back(all.targets[order[k]]);
  }
  return s;
}

inline Dataset generate_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetSpec::Kind::blobs:
      return make_blobs(spec.n, spec.dim, spec.classes, spec.seed, spec.center_box);
    case DatasetSpec::Kind::moons:
      return make_moons(spec.n, spec.noise, spec.seed);
    case DatasetSpec::Kind::csv:
      return load_csv_dataset(spec.path, spec.label_column, spec.header);
  }
  throw DomainError("unknown dataset kind");
}

inline DatasetSplit load_dataset(const DatasetSpec& spec) {
  return split_dataset(generate_dataset(spec), spec.seed);
}

}  // namespace mpt
