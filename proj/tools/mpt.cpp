// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: formats, assign, train, sweep, reduce.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpt/assign.hpp"
#include "mpt/experiment.hpp"
#include "mpt/fpnum.hpp"
#include "mpt/graph.hpp"
#include "mpt/npreduce.hpp"

namespace {

using mpt::format_double;

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flags;
};

mpt::ExperimentConfig resolve_config(const GlobalOptions& g) {
  mpt::ConfigMap map;
  if (!g.config_path.empty()) map = mpt::load_config_file(g.config_path);
  for (const auto& [key, opt] : g.flags) {
    if (opt->count() > 0) map[key] = g.flag_values.at(key);
  }
  if (g.seed) map["train.seed"] = std::to_string(*g.seed);
  if (g.out_dir) map["output.dir"] = *g.out_dir;
  return mpt::config_from_map(map);
}

std::string levels_string(const mpt::Graph& g, const mpt::PrecisionAssignment& a) {
  std::string s;
  for (std::size_t k = 0; k < g.tensor_count(); ++k) {
    if (!s.empty()) s += ' ';
    s += g.tensors()[k].id.name() + "=" + std::string(mpt::to_string(a.level_of[k]));
  }
  return s;
}

void print_format(const mpt::FpFormat& f) {
  std::cout << f.name() << '\n'
            << "  bitwidth        " << f.bitwidth() << '\n'
            << "  bias            " << f.base_bias() + f.extra_bias << '\n'
            << "  exponent range  [" << f.min_exponent() << ", " << f.max_exponent() << "]\n"
            << "  max magnitude   " << format_double(f.max_magnitude()) << '\n'
            << "  min normal      " << format_double(f.min_normal()) << '\n'
            << "  min subnormal   " << format_double(f.min_subnormal()) << '\n';
}

int cmd_formats(const std::vector<std::string>& names, std::optional<mpt::FpFormat> emb,
                const std::vector<double>& values, bool enumerate) {
  std::vector<mpt::FpFormat> formats;
  if (emb) {
    mpt::require_valid(*emb);
    formats.push_back(*emb);
  }
  for (const auto& n : names) formats.push_back(mpt::parse_format(n));
  if (formats.empty()) {
    formats = {mpt::kHfp8ForwardLo, mpt::kHfp8BackwardLo, mpt::kHfp8Hi, mpt::kFp32};
  }
  for (const auto& f : formats) {
    print_format(f);
    for (double x : values) {
      const mpt::RoundOutcome r = mpt::round(f, x);
      std::cout << "  round(" << format_double(x) << ") = " << format_double(r.value)
                << (r.overflowed ? "  [overflow]" : "")
                << (r.underflowed_to_zero ? "  [underflow]" : "") << '\n';
    }
    if (enumerate) {
      const auto all = mpt::enumerate_values(f);
      std::cout << "index,value\n";
      for (std::size_t k = 0; k < all.size(); ++k) {
        std::cout << k << ',' << format_double(all[k]) << '\n';
      }
    }
  }
  return 0;
}

int cmd_assign(const mpt::ExperimentConfig& cfg) {
  const mpt::DatasetSplit data = mpt::load_dataset(cfg.data);
  const mpt::Graph g = mpt::make_model(cfg, data.train.dim);
  const mpt::PrecisionAssignment a = mpt::scheme_assignment(g, cfg);
  const auto groups = mpt::group_tensors(g);
  std::cout << "tensor,kind,size,group,level,forced\n";
  for (std::size_t k = 0; k < g.tensor_count(); ++k) {
    const mpt::TensorMeta& t = g.tensors()[k];
    std::size_t group = 0;
    for (std::size_t q = 0; q < groups.size(); ++q) {
      for (const auto& id : groups[q].members) {
        if (id == t.id) group = q + 1;
      }
    }
    std::cout << t.id.name() << ',' << mpt::to_string(t.id.kind) << ',' << t.size << ','
              << group << ',' << mpt::to_string(a.level_of[k]) << ','
              << (a.forced_hi[k] ? 1 : 0) << '\n';
  }
  std::cout << "# scheme=" << mpt::scheme_label(cfg.scheme);
  if (mpt::scheme_uses_r(cfg.scheme.kind)) std::cout << " r=" << format_double(cfg.scheme.r);
  std::cout << " lrt=" << format_double(mpt::lrt(g, a)) << '\n';
  return 0;
}

void append_row(const std::filesystem::path& file, const mpt::TradeoffRow& row) {
  const bool fresh = !std::filesystem::exists(file);
  std::ofstream os(file, std::ios::app);
  if (fresh) os << mpt::kTradeoffHeader << '\n';
  mpt::write_tradeoff_row(os, row);
  if (!os) throw mpt::Error("cannot write " + file.string());
}

int cmd_train(const mpt::ExperimentConfig& cfg) {
  const mpt::RunOutput run = mpt::run_single(cfg);
  const std::filesystem::path dir = cfg.output_dir;
  mpt::write_run_files(dir, run);
  append_row(dir / "tradeoff.csv", run.row);
  std::cout << mpt::kTradeoffHeader << '\n';
  mpt::write_tradeoff_row(std::cout, run.row);
  return 0;
}

int cmd_sweep(const mpt::ExperimentConfig& cfg) {
  const std::filesystem::path dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  const auto rows = mpt::run_sweep(
      cfg, [&](const mpt::RunOutput& run) { mpt::write_run_files(dir, run); });
  {
    std::ofstream os(dir / "tradeoff.csv");
    mpt::write_tradeoff_csv(os, rows);
    std::ofstream agg(dir / "tradeoff_summary.csv");
    mpt::write_aggregate_csv(agg, mpt::aggregate(rows));
    if (!os || !agg) throw mpt::Error("cannot write tables in " + dir.string());
  }
  mpt::write_tradeoff_csv(std::cout, rows);
  for (const auto& row : rows) {
    if (row.flagged) {
      std::cerr << "flagged: " << mpt::run_stem(row) << ": " << row.error << '\n';
    }
  }
  return 0;
}

std::vector<long> parse_long_list(const std::string& name, const std::string& text) {
  std::vector<long> out;
  for (const auto& item : mpt::detail::split_list(text, ',')) {
    out.push_back(mpt::detail::parse_number<long>(name, item));
  }
  return out;
}

int cmd_reduce(const std::string& w, const std::string& p, long capacity,
               std::optional<int> k, std::optional<int> l) {
  mpt::KnapsackInstance inst{parse_long_list("--w", w), parse_long_list("--p", p), capacity};
  inst.validate();
  mpt::ReductionInstance ri;
  if (k || l) {
    ri = mpt::build_instance(inst, k.value_or(1), l.value_or(1));
  } else {
    ri = mpt::build_instance(inst);
  }
  const mpt::ReductionVerdict v = mpt::verify_reduction(ri);

  auto print_list = [](const auto& xs) {
    std::string s;
    for (const auto& x : xs) {
      if (!s.empty()) s += ',';
      if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>) {
        s += format_double(x);
      } else {
        s += std::to_string(x);
      }
    }
    return s;
  };
  std::cout << "k = " << ri.k << ", l = " << ri.l << '\n'
            << "fp_hi = " << ri.formats.hi.name() << ", fp_lo = " << ri.formats.lo.name()
            << '\n'
            << "x = " << print_list(ri.x) << '\n'
            << "y = " << format_double(ri.y) << '\n'
            << "size(TS) = " << ri.graph.total_size() << " over " << ri.graph.tensor_count()
            << " tensors\n"
            << "r = " << format_double(ri.r) << " (lo size >= " << ri.min_lo_size << ")\n"
            << "knapsack optimum: alpha = " << print_list(v.knapsack.alpha)
            << ", profit = " << v.knapsack.profit << '\n';
  if (!v.tradeoff.feasible) {
    std::cout << "tradeoff: no feasible assignment\n";
  } else {
    std::cout << "tradeoff optimum: acc = " << format_double(v.tradeoff.accuracy) << " ("
              << v.tradeoff.simulations << " simulations)\n"
              << "  " << levels_string(ri.graph, v.tradeoff.best) << '\n'
              << "extracted alpha = " << print_list(v.alpha) << ", profit = "
              << v.alpha_profit << ", weight = " << mpt::selection_weight(inst, v.alpha)
              << '\n';
  }
  std::cout << "verdict: " << (v.holds ? "holds" : "FAILS") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-level precision assignment for simulated low-precision training"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config_path, "key = value config file")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "base run seed (overrides train.seed)");
  app.add_option("--out", g.out_dir, "output directory (overrides output.dir)");
  for (const mpt::ConfigKey& key : mpt::config_keys()) {
    g.flags[key.name] =
        app.add_option("--" + key.name, g.flag_values[key.name], key.help)->group("Config keys");
  }

  auto* formats = app.add_subcommand("formats", "describe formats and round values");
  std::vector<std::string> format_names;
  std::vector<double> round_values;
  bool enumerate = false;
  formats->add_option("--format", format_names, "format such as fp(4,3,4); repeatable");
  int fmt_e = 0, fmt_m = 0, fmt_b = 0;
  auto* opt_e = formats->add_option("-e,--exp-bits", fmt_e, "exponent bits");
  formats->add_option("-m,--man-bits", fmt_m, "mantissa bits")->needs(opt_e);
  formats->add_option("-b,--extra-bias", fmt_b, "extra exponent bias")->needs(opt_e);
  formats->add_option("--round", round_values, "values to round");
  formats->add_flag("--enumerate", enumerate, "print every value as CSV (<= 16 bits)");

  auto* assign = app.add_subcommand("assign", "show tensors, groups and an assignment");
  auto* train = app.add_subcommand("train", "train one configuration");
  auto* sweep = app.add_subcommand("sweep", "sweep schemes over r and repeats");

  auto* reduce = app.add_subcommand("reduce", "knapsack reduction demo");
  std::string w_text, p_text;
  long capacity = 0;
  std::optional<int> k, l;
  reduce->add_option("--w", w_text, "item weights, comma-separated")->required();
  reduce->add_option("--p", p_text, "item profits, comma-separated")->required();
  reduce->add_option("--W", capacity, "capacity")->required();
  reduce->add_option("--k", k, "loss exponent (default: searched)");
  reduce->add_option("--l", l, "learning-rate exponent (default: 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*formats) {
      std::optional<mpt::FpFormat> emb;
      if (opt_e->count() > 0) emb = mpt::FpFormat{fmt_e, fmt_m, fmt_b};
      return cmd_formats(format_names, emb, round_values, enumerate);
    }
    if (*reduce) return cmd_reduce(w_text, p_text, capacity, k, l);
    const mpt::ExperimentConfig cfg = resolve_config(g);
    if (*assign) return cmd_assign(cfg);
    if (*train) return cmd_train(cfg);
    if (*sweep) return cmd_sweep(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
