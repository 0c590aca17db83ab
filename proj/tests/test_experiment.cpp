// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mpt/data.hpp"
#include "mpt/experiment.hpp"

namespace mpt {
namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.layers = {dense(8), relu(), dense(2)};
  cfg.data.kind = DatasetSpec::Kind::blobs;
  cfg.data.n = 60;
  cfg.data.seed = 4;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  cfg.train.seed = 10;
  return cfg;
}

TEST(Datasets, GeneratorsAreDeterministic) {
  EXPECT_EQ(make_blobs(50, 3, 3, 9).features, make_blobs(50, 3, 3, 9).features);
  EXPECT_NE(make_blobs(50, 3, 3, 9).features, make_blobs(50, 3, 3, 10).features);
  EXPECT_EQ(make_moons(40, 0.1, 2).features, make_moons(40, 0.1, 2).features);
  const Dataset b = make_blobs(9, 2, 3, 1);
  EXPECT_EQ(b.targets, (std::vector<double>{0, 1, 2, 0, 1, 2, 0, 1, 2}));
}

TEST(Datasets, MoonsSplitEightyTwenty) {
  DatasetSpec spec;
  spec.kind = DatasetSpec::Kind::moons;
  spec.n = 100;
  const DatasetSplit s = load_dataset(spec);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.eval.size(), 20u);
  EXPECT_EQ(s.train.dim, 2u);
  EXPECT_EQ(s.train.classes, 2);
}

TEST(Datasets, CsvParsing) {
  std::istringstream ok("a,b,label\n1.5,2,0\n-1,0.25,1\n");
  const Dataset d = parse_csv_dataset(ok, -1, true);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.dim, 2u);
  EXPECT_EQ(d.features, (std::vector<double>{1.5, 2, -1, 0.25}));
  EXPECT_EQ(d.classes, 2);

  std::istringstream first("0,1.0,2.0\n1,3.0,4.0\n");
  const Dataset f = parse_csv_dataset(first, 0, false);
  EXPECT_EQ(f.targets, (std::vector<double>{0, 1}));
  EXPECT_EQ(f.features, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Datasets, CsvErrorsNameTheLine) {
  std::istringstream bad("1,2,0\n1,oops,1\n");
  try {
    parse_csv_dataset(bad, -1, false);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  std::istringstream ragged("1,2,0\n1,1\n");
  EXPECT_THROW(parse_csv_dataset(ragged, -1, false), ParseError);
  EXPECT_THROW(load_csv_dataset("/nonexistent/file.csv", -1, false), Error);
}

TEST(Config, ParsesKeysAndComments) {
  std::istringstream in(
      "# comment\n"
      "model.layers = dense(4); relu; dense(3)\n"
      "scheme.kind = ours\n"
      "scheme.r = 0.3\n"
      "candidate.hi = fp(6,9,0)\n"
      "train.epochs = 7\n"
      "\n");
  const ExperimentConfig cfg = config_from_map(parse_config_text(in));
  EXPECT_EQ(cfg.layers.size(), 3u);
  EXPECT_EQ(cfg.scheme.kind, SchemeKind::ours);
  EXPECT_EQ(cfg.scheme.r, 0.3);
  EXPECT_EQ(cfg.candidate.hi, (FpFormat{6, 9, 0}));
  EXPECT_EQ(cfg.train.epochs, 7);
}

TEST(Config, Errors) {
  std::istringstream unknown("train.epochs = 3\nbogus.key = 1\n");
  try {
    parse_config_text(unknown);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  std::istringstream no_eq("train.epochs 3\n");
  EXPECT_THROW(parse_config_text(no_eq), ParseError);
  EXPECT_THROW(config_from_map({{"train.epochs", "three"}}), ParseError);
  EXPECT_THROW(parse_format("fp(4,3)"), ParseError);
  EXPECT_THROW(parse_layers("dense(4); wiggle"), ParseError);
  EXPECT_EQ(parse_format("fp32"), kFp32);
  EXPECT_EQ(parse_shape("1x4x4"), (Shape{1, 4, 4}));
}

TEST(Config, LaterMapsOverrideEarlierOnes) {
  const ExperimentConfig file = config_from_map({{"train.learning_rate", "0.2"}, {"train.epochs", "5"}});
  const ExperimentConfig flags = apply_config(file, {{"train.learning_rate", "0.01"}});
  EXPECT_EQ(flags.train.learning_rate, 0.01);
  EXPECT_EQ(flags.train.epochs, 5);
}

TEST(Config, EveryKeyIsKnown) {
  for (const ConfigKey& k : config_keys()) {
    EXPECT_TRUE(is_config_key(k.name));
    EXPECT_NE(k.name.find('.'), std::string::npos) << k.name;
  }
  EXPECT_FALSE(is_config_key("train.nothing"));
}

TEST(Schemes, LabelsRoundTrip) {
  for (const char* label : {"fp32", "unif", "op", "op_prime", "ours", "ours_no_promo",
                            "ours_increasing", "ours_random"}) {
    EXPECT_EQ(scheme_label(parse_scheme(label)), label);
  }
  EXPECT_THROW(parse_scheme("best"), ParseError);
}

TEST(RunSingle, Fp32AndOursEndpoints) {
  ExperimentConfig cfg = tiny_config();
  cfg.scheme = parse_scheme("fp32");
  const RunOutput fp32 = run_single(cfg);
  EXPECT_EQ(fp32.row.mean_lrt, 0.0);
  EXPECT_TRUE(std::isnan(fp32.row.r));
  EXPECT_EQ(fp32.row.seed, 10u);

  cfg.scheme = parse_scheme("ours");
  cfg.scheme.r = 1.0;
  const RunOutput ours = run_single(cfg, 2);
  EXPECT_GT(ours.row.mean_lrt, 0.0);
  EXPECT_LE(ours.row.mean_lrt, 1.0);
  EXPECT_EQ(ours.row.seed, 12u);
  EXPECT_EQ(ours.row.r, 1.0);
}

TEST(RunSingle, Deterministic) {
  ExperimentConfig cfg = tiny_config();
  cfg.scheme = parse_scheme("ours");
  cfg.scheme.r = 0.5;
  const RunOutput a = run_single(cfg, 1);
  const RunOutput b = run_single(cfg, 1);
  EXPECT_TRUE(same_row(a.row, b.row));
  EXPECT_EQ(a.result.epochs, b.result.epochs);
}

TEST(RunSingle, ShapeMismatchIsReported) {
  ExperimentConfig cfg = tiny_config();
  cfg.layers = {dense(3)};
  EXPECT_THROW(run_single(cfg), DomainError);
}

TEST(Sweep, RowCountAndOrder) {
  ExperimentConfig cfg = tiny_config();
  cfg.train.epochs = 1;
  const std::vector<std::string> schemes{"ours", "fp32"};
  const std::vector<double> rs{0.0, 0.5, 1.0};
  const auto rows = run_sweep(cfg, schemes, rs, 2);
  ASSERT_EQ(rows.size(), 3u * 2 + 2);
  EXPECT_TRUE(std::is_sorted(rows.begin(), rows.end(), row_before));
  EXPECT_EQ(rows.front().scheme, "fp32");
  for (const TradeoffRow& r : rows) EXPECT_FALSE(r.flagged) << r.error;
}

TEST(Sweep, FailingPointIsFlaggedAndOthersContinue) {
  ExperimentConfig cfg = tiny_config();
  cfg.train.epochs = 1;
  const std::vector<std::string> schemes{"ours"};
  const std::vector<double> rs{0.2, 1.5};
  const auto rows = run_sweep(cfg, schemes, rs, 1);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].flagged);
  EXPECT_TRUE(rows[1].flagged);
  EXPECT_TRUE(std::isnan(rows[1].best_eval_accuracy));
  EXPECT_FALSE(rows[1].error.empty());
}

TEST(TradeoffCsv, RoundTrip) {
  std::vector<TradeoffRow> rows(3);
  rows[0] = {"fp32", std::nan(""), 0, 7, 0.0, 0.8125, false, ""};
  rows[1] = {"ours", 0.1, 1, 8, 0.1234567890123, 1.0 / 3.0, false, ""};
  rows[2] = {"ours", 0.9, 0, 7, std::nan(""), std::nan(""), true, "boom"};
  std::ostringstream out;
  write_tradeoff_csv(out, rows);
  EXPECT_EQ(out.str().substr(0, kTradeoffHeader.size()), kTradeoffHeader);
  std::istringstream in(out.str());
  const auto back = parse_tradeoff_csv(in);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) EXPECT_TRUE(same_row(rows[k], back[k])) << k;
}

TEST(Aggregate, ExcludesFlaggedRows) {
  std::vector<TradeoffRow> rows(3);
  rows[0] = {"ours", 0.5, 0, 1, 0.5, 0.8, false, ""};
  rows[1] = {"ours", 0.5, 1, 2, 0.7, 0.6, false, ""};
  rows[2] = {"ours", 0.5, 2, 3, std::nan(""), std::nan(""), true, "x"};
  const auto agg = aggregate(rows);
  ASSERT_EQ(agg.size(), 1u);
  EXPECT_EQ(agg[0].runs, 3);
  EXPECT_EQ(agg[0].flagged, 1);
  EXPECT_DOUBLE_EQ(agg[0].accuracy_mean, 0.7);
  EXPECT_EQ(agg[0].accuracy_min, 0.6);
  EXPECT_EQ(agg[0].accuracy_max, 0.8);
}

}  // namespace
}  // namespace mpt
