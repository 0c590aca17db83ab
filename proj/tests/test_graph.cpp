// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "mpt/graph.hpp"
#include "support.hpp"

namespace mpt {
namespace {

Graph dense_example() {
  return build_graph({dense(8), relu(), dense(3), softmax_ce()}, {4});
}

std::set<TensorId> ids(const std::vector<TensorId>& v) { return {v.begin(), v.end()}; }

TEST(BuildGraph, DenseExampleCounts) {
  const Graph g = dense_example();
  EXPECT_EQ(g.op_count(), 4);
  EXPECT_EQ(g.model_op_count(), 3);
  EXPECT_EQ(g.tensor_count(), 14u);
  EXPECT_EQ(g.meta(theta_(1)).size, 32u);
  EXPECT_EQ(g.meta(theta_(3)).size, 24u);
  EXPECT_EQ(g.meta(x_(5)).size, 1u);
  EXPECT_EQ(g.total_size(), 2u * (4 + 8 + 8 + 3 + 1) + 2u * (32 + 24));
  EXPECT_TRUE(g.op(1).is_gemm);
  EXPECT_FALSE(g.op(2).is_gemm);
  EXPECT_EQ(g.ops().back().kind, OpKind::softmax_cross_entropy);
}

TEST(BuildGraph, AppendsTheLossWhenMissing) {
  const Graph g = build_graph({dense(3)}, {2});
  EXPECT_EQ(g.op_count(), 2);
  EXPECT_EQ(g.ops().back().kind, OpKind::softmax_cross_entropy);
}

TEST(BuildGraph, ConvShapeArithmetic) {
  const Graph g = build_graph({conv2d(2, 3, 1, 1), global_avg_pool(), dense(2)}, {1, 8, 8});
  EXPECT_EQ(g.meta(x_(2)).size, 128u);
  EXPECT_EQ(g.activation_shape(2), (Shape{2, 8, 8}));
  EXPECT_EQ(g.meta(theta_(1)).size, 18u);
  EXPECT_EQ(g.activation_shape(3), (Shape{2}));
  const Graph strided = build_graph({conv2d(3, 3, 2, 0), dense(2)}, {1, 7, 7});
  EXPECT_EQ(strided.activation_shape(2), (Shape{3, 3, 3}));
}

TEST(BuildGraph, Errors) {
  EXPECT_THROW(build_graph({}, {4}), ConstructionError);
  EXPECT_THROW(build_graph({dense(2)}, {}), ConstructionError);
  EXPECT_THROW(build_graph({conv2d(2, 3)}, {4}), ConstructionError);
  EXPECT_THROW(build_graph({conv2d(2, 5)}, {1, 3, 3}), ConstructionError);
  EXPECT_THROW(build_graph({dense(1)}, {4}), ConstructionError);  // one logit
  EXPECT_THROW(build_graph({softmax_ce(), dense(2)}, {4}), ConstructionError);
  EXPECT_THROW(build_graph({global_avg_pool()}, {4}), ConstructionError);
}

TEST(GraphBuilder, Contracts) {
  {
    GraphBuilder b;
    b.input({2});
    OpNode d;
    d.kind = OpKind::relu;
    d.inputs = {1};
    b.add(d, {{2}});
    EXPECT_THROW(std::move(b).build(), ConstructionError);  // no loss
  }
  {
    GraphBuilder b;
    const int in = b.input({2});
    OpNode loss;
    loss.kind = OpKind::softmax_cross_entropy;
    loss.inputs = {in};
    b.add(loss, {{1}});
    OpNode after;
    after.kind = OpKind::relu;
    after.inputs = {2};
    EXPECT_THROW(b.add(after, {{1}}), ConstructionError);
  }
  {
    GraphBuilder b;
    const int in = b.input({2});
    OpNode split;
    split.kind = OpKind::split;
    split.inputs = {in};
    const auto parts = b.add(split, {{1}, {1}});
    OpNode loss;
    loss.kind = OpKind::l1_loss;
    loss.inputs = {parts[0]};
    b.add(loss, {{1}});
    EXPECT_THROW(std::move(b).build(), ConstructionError);  // parts[1] unused
  }
}

TEST(Graph, TensorCountFormulaAndPairing) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const Graph g = testing::build_random_graph(rng);
    const std::size_t m = static_cast<std::size_t>(g.op_count());
    EXPECT_EQ(g.tensor_count(), 2 * (m + 1) + 2 * g.params().size());
    for (const TensorMeta& t : g.tensors()) {
      EXPECT_GE(t.size, 1u);
      EXPECT_EQ(g.meta(t.id.partner()).size, t.size);
    }
  }
}

TEST(Graph, LookupErrors) {
  const Graph g = dense_example();
  EXPECT_THROW(g.position(theta_(2)), LookupError);
  EXPECT_THROW(g.position(x_(9)), LookupError);
  const std::vector<TensorId> bad{dtheta_(2)};
  EXPECT_THROW(total_size(g, bad), LookupError);
}

TEST(TotalSize, Examples) {
  const Graph g = dense_example();
  EXPECT_EQ(total_size(g, std::vector<TensorId>{}), 0u);
  EXPECT_EQ(total_size(g, std::vector<TensorId>{theta_(1)}), 32u);
  std::vector<TensorId> all;
  for (const auto& t : g.tensors()) all.push_back(t.id);
  EXPECT_EQ(total_size(g, all), g.total_size());
  EXPECT_EQ(g.total_size(), 160u);
}

TEST(GroupTensors, TraceWithGemmsAtOneAndThree) {
  const auto groups = group_tensors(dense_example());
  ASSERT_EQ(groups.size(), 3u);
  EXPECT_EQ(ids(groups[0].members), (std::set<TensorId>{x_(1), dx_(1), theta_(1), dtheta_(1)}));
  EXPECT_EQ(ids(groups[1].members),
            (std::set<TensorId>{x_(2), dx_(2), x_(3), dx_(3), theta_(3), dtheta_(3)}));
  EXPECT_EQ(ids(groups[2].members), (std::set<TensorId>{x_(4), dx_(4), x_(5), dx_(5)}));
  EXPECT_EQ(groups[0].total_size, 4u + 4 + 32 + 32);
  EXPECT_EQ(groups[2].total_size, 3u + 3 + 1 + 1);
}

TEST(GroupTensors, NoGemmGivesOneGroup) {
  const Graph g = build_graph({relu(), scale(2.0)}, {3});
  const auto groups = group_tensors(g);
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(groups[0].members.size(), g.tensor_count());
  EXPECT_EQ(groups[0].total_size, g.total_size());
}

TEST(GroupTensors, PartitionProperties) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const Graph g = testing::build_random_graph(rng);
    const auto groups = group_tensors(g);
    std::multiset<TensorId> seen;
    std::size_t gemms = 0;
    for (const OpNode& op : g.ops()) gemms += op.is_gemm;
    EXPECT_EQ(groups.size(), gemms + 1);
    for (const TensorGroup& grp : groups) {
      std::size_t sum = 0;
      const std::set<TensorId> members = ids(grp.members);
      for (TensorId id : grp.members) {
        seen.insert(id);
        sum += g.meta(id).size;
        EXPECT_TRUE(members.contains(id.partner())) << id.name();
      }
      EXPECT_EQ(sum, grp.total_size);
    }
    EXPECT_EQ(seen.size(), g.tensor_count());
    for (const TensorMeta& tm : g.tensors()) EXPECT_EQ(seen.count(tm.id), 1u);
  }
}

TEST(TensorId, Names) {
  EXPECT_EQ(x_(3).name(), "x3");
  EXPECT_EQ(dx_(2).name(), "dx2");
  EXPECT_EQ(theta_(1).name(), "theta1");
  EXPECT_EQ(dtheta_(4).name(), "dtheta4");
  EXPECT_EQ(dx_(2).partner(), x_(2));
}

}  // namespace
}  // namespace mpt
