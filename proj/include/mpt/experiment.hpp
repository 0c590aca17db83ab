// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment plumbing: flat key=value configs, assignment schemes, single
// runs, sweeps over r with repeats, and CSV/JSON reporting.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mpt/assign.hpp"
#include "mpt/data.hpp"
#include "mpt/engine.hpp"
#include "mpt/errors.hpp"
#include "mpt/fpnum.hpp"
#include "mpt/graph.hpp"

namespace mpt {

enum class SchemeKind { fp32, unif, op, op_prime, ours, ours_no_promo };

struct SchemeSpec {
  SchemeKind kind = SchemeKind::ours;
  double r = 0.0;
  DemotionOrder order = DemotionOrder::decreasing();
};

inline bool scheme_uses_r(SchemeKind kind) {
  return kind == SchemeKind::ours || kind == SchemeKind::ours_no_promo;
}

inline std::string scheme_label(const SchemeSpec& s) {
  switch (s.kind) {
    case SchemeKind::fp32: return "fp32";
    case SchemeKind::unif: return "unif";
    case SchemeKind::op: return "op";
    case SchemeKind::op_prime: return "op_prime";
    case SchemeKind::ours_no_promo: return "ours_no_promo";
    case SchemeKind::ours:
      switch (s.order.kind) {
        case DemotionOrder::Kind::decreasing: return "ours";
        case DemotionOrder::Kind::increasing: return "ours_increasing";
        case DemotionOrder::Kind::random: return "ours_random";
      }
  }
  return "?";
}

/// Accepts every label produced by scheme_label. The order seed of
/// ours_random is left at its default.
inline SchemeSpec parse_scheme(std::string_view label) {
  SchemeSpec s;
  if (label == "fp32") s.kind = SchemeKind::fp32;
  else if (label == "unif") s.kind = SchemeKind::unif;
  else if (label == "op") s.kind = SchemeKind::op;
  else if (label == "op_prime") s.kind = SchemeKind::op_prime;
  else if (label == "ours") s.kind = SchemeKind::ours;
  else if (label == "ours_no_promo") s.kind = SchemeKind::ours_no_promo;
  else if (label == "ours_increasing") s.order = DemotionOrder::increasing();
  else if (label == "ours_random") s.order = DemotionOrder::random(0);
  else throw ParseError("unknown scheme '" + std::string(label) + "'");
  return s;
}

struct CandidateSpec {
  FpFormat hi = kHfp8Hi;
  FpFormat lo_forward = kHfp8ForwardLo;
  FpFormat lo_backward = kHfp8BackwardLo;
};

inline PrecisionCandidate make_candidate(const Graph& g, const CandidateSpec& spec) {
  require_valid(spec.hi);
  require_valid(spec.lo_forward);
  require_valid(spec.lo_backward);
  PrecisionCandidate c;
  for (const TensorMeta& t : g.tensors()) {
    c.lo_of.push_back(is_forward(t.id.kind) ? spec.lo_forward : spec.lo_backward);
    c.hi_of.push_back(spec.hi);
  }
  if (!c.is_two_level()) {
    throw DomainError("candidate lo formats must share a bitwidth below that of hi");
  }
  return c;
}

struct ExperimentConfig {
  std::vector<LayerSpec> layers{dense(16), relu(), dense(16), relu(), dense(2)};
  /// Empty means a flat vector of the dataset dimension.
  Shape input_shape;
  DatasetSpec data;
  SchemeSpec scheme;
  CandidateSpec candidate;
  TrainConfig train;
  /// Unset: promotion on for ours only.
  std::optional<bool> promotion;
  bool force_dtheta_hi = true;
  std::string output_dir = "out";
  std::vector<std::string> sweep_schemes;
  std::vector<double> sweep_r{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  int repeats = 4;
};

// ---------------------------------------------------------------------------
// Config text

using ConfigMap = std::map<std::string, std::string>;

struct ConfigKey {
  std::string name;
  std::string help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"model.layers", "layer list, e.g. conv2d(4,3,1,1); relu; dense(3)"},
      {"model.input_shape", "input shape such as 1x4x4 (default: flat)"},
      {"data.kind", "blobs | moons | csv"},
      {"data.n", "number of generated examples"},
      {"data.dim", "blobs feature dimension"},
      {"data.classes", "blobs class count"},
      {"data.seed", "dataset seed (independent of the run seed)"},
      {"data.noise", "moons noise level"},
      {"data.center_box", "blobs center range"},
      {"data.path", "csv file path"},
      {"data.label_column", "csv label column, negative counts from the end"},
      {"data.header", "csv has a header line (true/false)"},
      {"scheme.kind", "fp32 | unif | op | op_prime | ours | ours_no_promo"},
      {"scheme.r", "lower bound on the low-precision ratio for ours"},
      {"scheme.order", "demotion order: decreasing | increasing | random"},
      {"scheme.order_seed", "seed of the random demotion order"},
      {"scheme.force_dtheta_hi", "keep weight gradients in hi (true/false)"},
      {"scheme.promotion", "auto | on | off"},
      {"candidate.hi", "hi format, e.g. fp(6,9,0)"},
      {"candidate.lo_forward", "lo format of forward tensors"},
      {"candidate.lo_backward", "lo format of backward tensors"},
      {"train.epochs", "number of epochs"},
      {"train.batch_size", "minibatch size"},
      {"train.learning_rate", "SGD learning rate"},
      {"train.theta", "promotion threshold on the overflow ratio"},
      {"train.loss_scaling", "dynamic loss scaling (true/false)"},
      {"train.loss_scale_init", "initial loss scale"},
      {"train.growth_factor", "loss scale growth factor"},
      {"train.backoff_factor", "loss scale back-off factor"},
      {"train.growth_interval", "clean steps before growth, as a fraction of an epoch"},
      {"train.seed", "base run seed"},
      {"train.master_format", "format of the master weights"},
      {"sweep.schemes", "comma-separated scheme labels (default: scheme.kind)"},
      {"sweep.r_values", "comma-separated r values (default: deciles)"},
      {"sweep.repeats", "runs per point"},
      {"output.dir", "output directory"},
  };
  return keys;
}

inline bool is_config_key(std::string_view key) {
  const auto& keys = config_keys();
  return std::any_of(keys.begin(), keys.end(),
                     [&](const ConfigKey& k) { return k.name == key; });
}

/// `key = value` per line; `#` starts a comment. Later lines override
/// earlier ones.
inline ConfigMap parse_config_text(std::istream& in) {
  ConfigMap out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) {
      view = view.substr(0, hash);
    }
    view = detail::trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected key = value", line_no);
    const std::string key(detail::trim(view.substr(0, eq)));
    if (!is_config_key(key)) throw ParseError("unknown key '" + key + "'", line_no);
    out[key] = std::string(detail::trim(view.substr(eq + 1)));
  }
  return out;
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  return parse_config_text(in);
}

namespace detail {

inline std::string config_error(const std::string& key, const std::string& value,
                                const std::string& what) {
  return key + " = '" + value + "': " + what;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::string_view s = trim(value);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  T out{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(config_error(key, value, "not a number"));
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ParseError(config_error(key, value, "not finite"));
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ParseError(config_error(key, value, "expected true or false"));
}

inline std::vector<std::string> split_list(std::string_view text, char sep) {
  std::vector<std::string> out;
  for (std::string_view part : split_fields(text, sep)) {
    part = trim(part);
    if (!part.empty()) out.emplace_back(part);
  }
  return out;
}

}  // namespace detail

/// Parses "fp(e,m,b)" or "fp32".
inline FpFormat parse_format(std::string_view text) {
  text = detail::trim(text);
  if (text == "fp32") return kFp32;
  if (text.size() < 5 || text.substr(0, 3) != "fp(" || text.back() != ')') {
    throw ParseError("format '" + std::string(text) + "' is not of the form fp(e,m,b)");
  }
  const auto parts = detail::split_list(text.substr(3, text.size() - 4), ',');
  if (parts.size() != 3) {
    throw ParseError("format '" + std::string(text) + "' needs three integers");
  }
  const FpFormat f{detail::parse_number<int>("format", parts[0]),
                   detail::parse_number<int>("format", parts[1]),
                   detail::parse_number<int>("format", parts[2])};
  require_valid(f);
  return f;
}

/// Parses "dense(8); relu; conv2d(4,3,1,1); gap; scale(0.5); softmax_ce".
inline std::vector<LayerSpec> parse_layers(std::string_view text) {
  std::vector<LayerSpec> layers;
  for (const std::string& item : detail::split_list(text, ';')) {
    std::string name = item;
    std::vector<std::string> args;
    if (const auto open = item.find('('); open != std::string::npos) {
      if (item.back() != ')') throw ParseError("layer '" + item + "': missing ')'");
      name = std::string(detail::trim(std::string_view(item).substr(0, open)));
      args = detail::split_list(
          std::string_view(item).substr(open + 1, item.size() - open - 2), ',');
    }
    auto int_arg = [&](std::size_t k) {
      return detail::parse_number<int>("layer " + item, args[k]);
    };
    auto want = [&](std::size_t lo, std::size_t hi) {
      if (args.size() < lo || args.size() > hi) {
        throw ParseError("layer '" + item + "': wrong number of arguments");
      }
    };
    if (name == "dense") {
      want(1, 1);
      layers.push_back(dense(int_arg(0)));
    } else if (name == "conv2d") {
      want(2, 4);
      layers.push_back(conv2d(int_arg(0), int_arg(1), args.size() > 2 ? int_arg(2) : 1,
                              args.size() > 3 ? int_arg(3) : 0));
    } else if (name == "relu") {
      want(0, 0);
      layers.push_back(relu());
    } else if (name == "gap" || name == "global_avg_pool") {
      want(0, 0);
      layers.push_back(global_avg_pool());
    } else if (name == "scale") {
      want(1, 1);
      layers.push_back(scale(detail::parse_number<double>("layer " + item, args[0])));
    } else if (name == "softmax_ce") {
      want(0, 0);
      layers.push_back(softmax_ce());
    } else {
      throw ParseError("unknown layer '" + name + "'");
    }
  }
  if (layers.empty()) throw ParseError("model.layers is empty");
  return layers;
}

/// Parses "1x4x4" or "16".
inline Shape parse_shape(std::string_view text) {
  Shape s;
  for (const std::string& d : detail::split_list(text, 'x')) {
    const int v = detail::parse_number<int>("model.input_shape", d);
    if (v < 1) throw ParseError("model.input_shape: dimensions must be >= 1");
    s.push_back(v);
  }
  return s;
}

/// Applies every key of `map` on top of `cfg`.
inline ExperimentConfig apply_config(ExperimentConfig cfg, const ConfigMap& map) {
  using detail::parse_bool;
  using detail::parse_number;
  for (const auto& [key, value] : map) {
    if (key == "model.layers") cfg.layers = parse_layers(value);
    else if (key == "model.input_shape") cfg.input_shape = value.empty() ? Shape{} : parse_shape(value);
    else if (key == "data.kind") {
      if (value == "blobs") cfg.data.kind = DatasetSpec::Kind::blobs;
      else if (value == "moons") cfg.data.kind = DatasetSpec::Kind::moons;
      else if (value == "csv") cfg.data.kind = DatasetSpec::Kind::csv;
      else throw ParseError(detail::config_error(key, value, "expected blobs, moons or csv"));
    }
    else if (key == "data.n") cfg.data.n = parse_number<std::size_t>(key, value);
    else if (key == "data.dim") cfg.data.dim = parse_number<std::size_t>(key, value);
    else if (key == "data.classes") cfg.data.classes = parse_number<int>(key, value);
    else if (key == "data.seed") cfg.data.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "data.noise") cfg.data.noise = parse_number<double>(key, value);
    else if (key == "data.center_box") cfg.data.center_box = parse_number<double>(key, value);
    else if (key == "data.path") cfg.data.path = value;
    else if (key == "data.label_column") cfg.data.label_column = parse_number<int>(key, value);
    else if (key == "data.header") cfg.data.header = parse_bool(key, value);
    else if (key == "scheme.kind") {
      const DemotionOrder order = cfg.scheme.order;
      const SchemeSpec parsed = parse_scheme(value);
      cfg.scheme.kind = parsed.kind;
      if (value == "ours_increasing" || value == "ours_random") {
        cfg.scheme.order.kind = parsed.order.kind;
      } else {
        cfg.scheme.order = order;
      }
    }
    else if (key == "scheme.r") cfg.scheme.r = parse_number<double>(key, value);
    else if (key == "scheme.order") {
      if (value == "decreasing") cfg.scheme.order.kind = DemotionOrder::Kind::decreasing;
      else if (value == "increasing") cfg.scheme.order.kind = DemotionOrder::Kind::increasing;
      else if (value == "random") cfg.scheme.order.kind = DemotionOrder::Kind::random;
      else throw ParseError(detail::config_error(key, value, "unknown order"));
    }
    else if (key == "scheme.order_seed") cfg.scheme.order.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "scheme.force_dtheta_hi") cfg.force_dtheta_hi = parse_bool(key, value);
    else if (key == "scheme.promotion") {
      if (value == "auto") cfg.promotion.reset();
      else cfg.promotion = parse_bool(key, value);
    }
    else if (key == "candidate.hi") cfg.candidate.hi = parse_format(value);
    else if (key == "candidate.lo_forward") cfg.candidate.lo_forward = parse_format(value);
    else if (key == "candidate.lo_backward") cfg.candidate.lo_backward = parse_format(value);
    else if (key == "train.epochs") cfg.train.epochs = parse_number<int>(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = parse_number<int>(key, value);
    else if (key == "train.learning_rate") cfg.train.learning_rate = parse_number<double>(key, value);
    else if (key == "train.theta") cfg.train.theta = parse_number<double>(key, value);
    else if (key == "train.loss_scaling") cfg.train.loss_scaling_enabled = parse_bool(key, value);
    else if (key == "train.loss_scale_init") cfg.train.loss_scale_init = parse_number<double>(key, value);
    else if (key == "train.growth_factor") cfg.train.growth_factor = parse_number<double>(key, value);
    else if (key == "train.backoff_factor") cfg.train.backoff_factor = parse_number<double>(key, value);
    else if (key == "train.growth_interval") cfg.train.growth_interval = parse_number<double>(key, value);
    else if (key == "train.seed") cfg.train.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "train.master_format") cfg.train.master_format = parse_format(value);
    else if (key == "sweep.schemes") {
      cfg.sweep_schemes = detail::split_list(value, ',');
      for (const auto& s : cfg.sweep_schemes) parse_scheme(s);
    }
    else if (key == "sweep.r_values") {
      cfg.sweep_r.clear();
      for (const auto& v : detail::split_list(value, ',')) {
        cfg.sweep_r.push_back(parse_number<double>(key, v));
      }
    }
    else if (key == "sweep.repeats") cfg.repeats = parse_number<int>(key, value);
    else if (key == "output.dir") cfg.output_dir = value;
    else throw ParseError("unknown key '" + key + "'");
  }
  return cfg;
}

inline ExperimentConfig config_from_map(const ConfigMap& map) {
  return apply_config(ExperimentConfig{}, map);
}

// ---------------------------------------------------------------------------
// Runs

struct TradeoffRow {
  std::string scheme;
  /// NaN for schemes without an r parameter.
  double r = std::numeric_limits<double>::quiet_NaN();
  int run_index = 0;
  std::uint64_t seed = 0;
  double mean_lrt = std::numeric_limits<double>::quiet_NaN();
  double best_eval_accuracy = std::numeric_limits<double>::quiet_NaN();
  bool flagged = false;
  /// Not serialized; filled for flagged rows.
  std::string error;
};

namespace detail {

inline bool same_double(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

}  // namespace detail

/// Equality of every serialized field.
inline bool same_row(const TradeoffRow& a, const TradeoffRow& b) {
  return a.scheme == b.scheme && detail::same_double(a.r, b.r) &&
         a.run_index == b.run_index && a.seed == b.seed &&
         detail::same_double(a.mean_lrt, b.mean_lrt) &&
         detail::same_double(a.best_eval_accuracy, b.best_eval_accuracy) &&
         a.flagged == b.flagged;
}

/// Orders by (scheme, r, run_index); a missing r sorts first.
inline bool row_before(const TradeoffRow& a, const TradeoffRow& b) {
  if (a.scheme != b.scheme) return a.scheme < b.scheme;
  const double ra = std::isnan(a.r) ? -1.0 : a.r;
  const double rb = std::isnan(b.r) ? -1.0 : b.r;
  if (ra != rb) return ra < rb;
  return a.run_index < b.run_index;
}

struct RunOutput {
  ExperimentConfig config;
  TradeoffRow row;
  PrecisionAssignment initial_assignment;
  TrainResult result;
};

inline Graph make_model(const ExperimentConfig& cfg, std::size_t input_dim) {
  const Shape shape = cfg.input_shape.empty()
                          ? Shape{static_cast<int>(input_dim)}
                          : cfg.input_shape;
  if (element_count(shape) != input_dim) {
    throw DomainError("model input shape has " + std::to_string(element_count(shape)) +
                      " elements but the data has " + std::to_string(input_dim) +
                      " features");
  }
  return build_graph(cfg.layers, shape);
}

inline PrecisionCandidate scheme_candidate(const Graph& g, const ExperimentConfig& cfg) {
  return cfg.scheme.kind == SchemeKind::fp32 ? fp32_candidate(g)
                                             : make_candidate(g, cfg.candidate);
}

inline PrecisionAssignment scheme_assignment(const Graph& g, const ExperimentConfig& cfg) {
  const std::vector<TensorId> forced =
      cfg.force_dtheta_hi ? backward_weight_tensors(g) : std::vector<TensorId>{};
  switch (cfg.scheme.kind) {
    case SchemeKind::fp32: return uniform_assignment(g, Level::hi);
    case SchemeKind::unif: return assign_uniform(g, forced);
    case SchemeKind::op: return assign_op_based(g, OpVariant::op, forced);
    case SchemeKind::op_prime: return assign_op_based(g, OpVariant::op_prime, forced);
    case SchemeKind::ours:
    case SchemeKind::ours_no_promo:
      return assign_ours(g, cfg.scheme.r, cfg.scheme.order, forced);
  }
  throw DomainError("unknown scheme");
}

/// Training settings of a scheme: fp32 runs without loss scaling, and
/// promotion defaults to on for ours only.
inline TrainConfig scheme_train_config(const ExperimentConfig& cfg, int run_index) {
  TrainConfig t = cfg.train;
  t.seed = cfg.train.seed + static_cast<std::uint64_t>(run_index);
  t.promotion_enabled = cfg.promotion.value_or(cfg.scheme.kind == SchemeKind::ours);
  if (cfg.scheme.kind == SchemeKind::fp32) t.loss_scaling_enabled = false;
  return t;
}

inline void validate_config(const ExperimentConfig& cfg) {
  if (scheme_uses_r(cfg.scheme.kind) && !(cfg.scheme.r >= 0.0 && cfg.scheme.r <= 1.0)) {
    throw DomainError("scheme.r must lie in [0, 1]");
  }
  if (cfg.repeats < 1) throw DomainError("sweep.repeats must be >= 1");
  cfg.train.validate();
}

/// Trains one configuration with run seed train.seed + run_index. `data`
/// may be supplied to avoid reloading it.
inline RunOutput run_single(const ExperimentConfig& cfg, int run_index = 0,
                            const DatasetSplit* data = nullptr) {
  validate_config(cfg);
  DatasetSplit loaded;
  if (data == nullptr) {
    loaded = load_dataset(cfg.data);
    data = &loaded;
  }
  const Graph g = make_model(cfg, data->train.dim);
  const std::size_t logits = g.meta(x_(g.ops().back().inputs.front())).size;
  if (static_cast<int>(logits) != data->train.classes) {
    throw DomainError("model has " + std::to_string(logits) + " outputs but the data has " +
                      std::to_string(data->train.classes) + " classes");
  }
  RunOutput out;
  out.config = cfg;
  out.initial_assignment = scheme_assignment(g, cfg);
  const TrainConfig tc = scheme_train_config(cfg, run_index);
  out.result = train(g, scheme_candidate(g, cfg), out.initial_assignment, tc, data->train,
                     data->eval);
  out.row.scheme = scheme_label(cfg.scheme);
  if (scheme_uses_r(cfg.scheme.kind)) out.row.r = cfg.scheme.r;
  out.row.run_index = run_index;
  out.row.seed = tc.seed;
  out.row.mean_lrt = out.result.mean_lrt;
  out.row.best_eval_accuracy = out.result.best_eval_accuracy;
  return out;
}

/// Every (scheme, r, repeat) point. Schemes without r run once per repeat.
inline std::vector<std::pair<SchemeSpec, int>> sweep_points(
    const ExperimentConfig& base, std::span<const std::string> schemes,
    std::span<const double> r_values, int repeats) {
  std::vector<std::pair<SchemeSpec, int>> points;
  for (const std::string& label : schemes) {
    SchemeSpec s = parse_scheme(label);
    if (s.order.kind == DemotionOrder::Kind::random) s.order.seed = base.scheme.order.seed;
    if (scheme_uses_r(s.kind)) {
      for (double r : r_values) {
        s.r = r;
        for (int k = 0; k < repeats; ++k) points.emplace_back(s, k);
      }
    } else {
      for (int k = 0; k < repeats; ++k) points.emplace_back(s, k);
    }
  }
  return points;
}

/// Runs every sweep point in turn. A failing point yields a flagged row with
/// NaN metrics and the sweep continues. Rows come back sorted.
inline std::vector<TradeoffRow> run_sweep(
    const ExperimentConfig& base, std::span<const std::string> schemes,
    std::span<const double> r_values, int repeats,
    const std::function<void(const RunOutput&)>& on_run = {}) {
  if (repeats < 1) throw DomainError("repeats must be >= 1");
  const DatasetSplit data = load_dataset(base.data);
  std::vector<TradeoffRow> rows;
  for (const auto& [scheme, repeat] : sweep_points(base, schemes, r_values, repeats)) {
    ExperimentConfig cfg = base;
    cfg.scheme = scheme;
    try {
      RunOutput out = run_single(cfg, repeat, &data);
      if (on_run) on_run(out);
      rows.push_back(out.row);
    } catch (const std::exception& e) {
      TradeoffRow row;
      row.scheme = scheme_label(scheme);
      if (scheme_uses_r(scheme.kind)) row.r = scheme.r;
      row.run_index = repeat;
      row.seed = base.train.seed + static_cast<std::uint64_t>(repeat);
      row.flagged = true;
      row.error = e.what();
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), row_before);
  return rows;
}

inline std::vector<TradeoffRow> run_sweep(const ExperimentConfig& base,
                                          const std::function<void(const RunOutput&)>& on_run = {}) {
  const std::vector<std::string> schemes =
      base.sweep_schemes.empty() ? std::vector<std::string>{scheme_label(base.scheme)}
                                 : base.sweep_schemes;
  return run_sweep(base, schemes, base.sweep_r, base.repeats, on_run);
}

/// Per (scheme, r) summary across repeats; flagged rows are counted but
/// excluded from the statistics.
struct AggregateRow {
  std::string scheme;
  double r = std::numeric_limits<double>::quiet_NaN();
  int runs = 0;
  int flagged = 0;
  double mean_lrt = std::numeric_limits<double>::quiet_NaN();
  double accuracy_mean = std::numeric_limits<double>::quiet_NaN();
  double accuracy_min = std::numeric_limits<double>::quiet_NaN();
  double accuracy_max = std::numeric_limits<double>::quiet_NaN();
};

inline std::vector<AggregateRow> aggregate(std::span<const TradeoffRow> rows) {
  std::vector<TradeoffRow> sorted(rows.begin(), rows.end());
  std::stable_sort(sorted.begin(), sorted.end(), row_before);
  std::vector<AggregateRow> out;
  for (std::size_t k = 0; k < sorted.size();) {
    AggregateRow agg;
    agg.scheme = sorted[k].scheme;
    agg.r = sorted[k].r;
    double lrt_sum = 0.0, acc_sum = 0.0;
    int ok = 0;
    std::size_t j = k;
    for (; j < sorted.size() && sorted[j].scheme == agg.scheme &&
           detail::same_double(sorted[j].r, agg.r);
         ++j) {
      ++agg.runs;
      if (sorted[j].flagged) {
        ++agg.flagged;
        continue;
      }
      const double acc = sorted[j].best_eval_accuracy;
      lrt_sum += sorted[j].mean_lrt;
      acc_sum += acc;
      agg.accuracy_min = ok == 0 ? acc : std::min(agg.accuracy_min, acc);
      agg.accuracy_max = ok == 0 ? acc : std::max(agg.accuracy_max, acc);
      ++ok;
    }
    if (ok > 0) {
      agg.mean_lrt = lrt_sum / ok;
      agg.accuracy_mean = acc_sum / ok;
    }
    out.push_back(agg);
    k = j;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

/// Shortest text that parses back to the same double; "nan" for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline constexpr std::string_view kTradeoffHeader =
    "scheme,r,run_index,seed,mean_lrt,best_eval_accuracy,flagged";

inline void write_tradeoff_row(std::ostream& os, const TradeoffRow& row) {
  os << row.scheme << ',' << format_double(row.r) << ',' << row.run_index << ','
     << row.seed << ',' << format_double(row.mean_lrt) << ','
     << format_double(row.best_eval_accuracy) << ',' << (row.flagged ? 1 : 0) << '\n';
}

inline void write_tradeoff_csv(std::ostream& os, std::span<const TradeoffRow> rows) {
  os << kTradeoffHeader << '\n';
  for (const TradeoffRow& row : rows) write_tradeoff_row(os, row);
}

inline std::vector<TradeoffRow> parse_tradeoff_csv(std::istream& in) {
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line) || detail::trim(line) != kTradeoffHeader) {
    throw ParseError("missing tradeoff header", 1);
  }
  ++line_no;
  std::vector<TradeoffRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_fields(detail::trim(line));
    if (f.size() != 7) throw ParseError("expected 7 fields", line_no);
    auto num = [&](std::string_view s, auto& out) {
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
      if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ParseError("bad number '" + std::string(s) + "'", line_no);
      }
    };
    TradeoffRow row;
    row.scheme = std::string(f[0]);
    num(f[1], row.r);
    num(f[2], row.run_index);
    num(f[3], row.seed);
    num(f[4], row.mean_lrt);
    num(f[5], row.best_eval_accuracy);
    int flagged = 0;
    num(f[6], flagged);
    if (flagged != 0 && flagged != 1) throw ParseError("flagged must be 0 or 1", line_no);
    row.flagged = flagged == 1;
    rows.push_back(row);
  }
  return rows;
}

inline void write_aggregate_csv(std::ostream& os, std::span<const AggregateRow> rows) {
  os << "scheme,r,runs,flagged,mean_lrt,accuracy_mean,accuracy_min,accuracy_max\n";
  for (const AggregateRow& a : rows) {
    os << a.scheme << ',' << format_double(a.r) << ',' << a.runs << ',' << a.flagged << ','
       << format_double(a.mean_lrt) << ',' << format_double(a.accuracy_mean) << ','
       << format_double(a.accuracy_min) << ',' << format_double(a.accuracy_max) << '\n';
  }
}

inline void write_epoch_csv(std::ostream& os, std::span<const EpochRecord> epochs) {
  os << "epoch,train_loss,eval_accuracy,eval_accuracy_fp32,lrt_now,loss_scale_end,"
        "promotions_this_epoch,skipped_steps\n";
  for (const EpochRecord& e : epochs) {
    os << e.epoch << ',' << format_double(e.train_loss) << ','
       << format_double(e.eval_accuracy) << ',' << format_double(e.eval_accuracy_fp32)
       << ',' << format_double(e.lrt_now) << ',' << format_double(e.loss_scale_end) << ','
       << e.promotions_this_epoch << ',' << e.skipped_steps << '\n';
  }
}

inline nlohmann::json run_summary_json(const RunOutput& run) {
  using nlohmann::json;
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j;
  j["scheme"] = run.row.scheme;
  j["r"] = num(run.row.r);
  j["run_index"] = run.row.run_index;
  j["seed"] = run.row.seed;
  j["mean_lrt"] = num(run.row.mean_lrt);
  j["best_eval_accuracy"] = num(run.row.best_eval_accuracy);
  j["epochs"] = run.result.epochs.size();
  j["final_eval_accuracy"] =
      run.result.epochs.empty() ? json(nullptr) : json(run.result.epochs.back().eval_accuracy);
  json promos = json::array();
  for (const Promotion& p : run.result.promotions) {
    promos.push_back({{"step", p.step}, {"tensor", p.tensor.name()}});
  }
  j["promotions"] = promos;
  return j;
}

/// File stem for one run, e.g. "ours_r0.3_run2".
inline std::string run_stem(const TradeoffRow& row) {
  std::string stem = row.scheme;
  if (!std::isnan(row.r)) stem += "_r" + format_double(row.r);
  return stem + "_run" + std::to_string(row.run_index);
}

/// Writes <dir>/<stem>_epochs.csv and <dir>/<stem>_summary.json.
inline void write_run_files(const std::filesystem::path& dir, const RunOutput& run) {
  std::filesystem::create_directories(dir);
  const std::string stem = run_stem(run.row);
  std::ofstream epochs(dir / (stem + "_epochs.csv"));
  write_epoch_csv(epochs, run.result.epochs);
  std::ofstream summary(dir / (stem + "_summary.json"));
  summary << run_summary_json(run).dump(2) << '\n';
  if (!epochs || !summary) throw Error("cannot write run files in " + dir.string());
}

}  // namespace mpt
