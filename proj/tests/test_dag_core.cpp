#include <algorithm>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "bgfn/dag_core.hpp"
#include "bgfn/hypergrid.hpp"
#include "bgfn/seq_env.hpp"
#include "test_support.hpp"

using namespace bgfn;

namespace {

std::size_t position(const std::vector<StateId>& order, StateId s) {
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), s) - order.begin());
}

void expect_topological(const DagEnvironment& env) {
  const auto order = enumerate_states(env);
  ASSERT_EQ(order.size(), env.num_states());
  ASSERT_EQ(std::set<StateId>(order.begin(), order.end()).size(), env.num_states());
  std::vector<std::size_t> pos(env.num_states());
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  for (StateId s = 0; s < env.num_states(); ++s) {
    for (const auto& e : env.children(s)) EXPECT_LT(pos[s], pos[e.child]);
  }
}

}  // namespace

TEST(MotivatingDag, Structure) {
  const auto env = build_motivating_dag();
  EXPECT_EQ(env.num_states(), 6u);
  std::size_t ones = 0;
  for (StateId x : env.terminal_states()) ones += env.reward(x) == 1.0;
  EXPECT_EQ(ones, 1u);
  EXPECT_EQ(env.reward(4), 1.0);
  for (StateId x : {1, 3, 5}) EXPECT_EQ(env.reward(x), 1e-3);
  EXPECT_EQ(env.children(2).size(), 2u);
  EXPECT_EQ(env.children(0).size(), 3u);
  const auto order = enumerate_states(env);
  EXPECT_EQ(order.size(), 6u);
  EXPECT_EQ(order.front(), kInitialState);
  EXPECT_TRUE(validate_env(env).empty());
}

TEST(DidacticDag, SmallRewardsAreRedOrGreen) {
  const auto env = build_didactic_dag(DidacticSize::small);
  EXPECT_EQ(env.num_states(), 14u);
  const auto terms = env.terminal_states();
  EXPECT_EQ(terms.size(), 6u);
  for (StateId x : terms) EXPECT_TRUE(env.reward(x) == 1.0 || env.reward(x) == 1e-3) << x;
  EXPECT_TRUE(validate_env(env).empty());
  expect_topological(env);
}

TEST(DidacticDag, LargeGroups) {
  using L = LargeDagLayout;
  const auto env = build_didactic_dag("large");
  EXPECT_EQ(env.num_states(), L::num_states);
  EXPECT_EQ(L::group1.size, 15u);
  EXPECT_EQ(env.children(L::s1).size(), 15u);
  for (StateId s = L::group1.first; s <= L::group1.last(); ++s) {
    const auto kids = env.children(s);
    EXPECT_EQ(kids.size(), 31u);
    EXPECT_TRUE(std::any_of(kids.begin(), kids.end(), [](const ChildEdge& e) { return e.child == L::s128; }));
    std::size_t into5 = 0;
    for (const auto& e : kids) into5 += (e.child >= L::group5.first && e.child <= L::group5.last());
    EXPECT_EQ(into5, 30u);
  }
  for (auto g : {L::group4, L::group5}) {
    for (StateId s = g.first; s <= g.last(); ++s) {
      EXPECT_TRUE(env.is_terminal(s));
      const double want = (s == g.first || s == g.last()) ? 1.0 : 1e-3;
      EXPECT_EQ(env.reward(s), want) << s;
    }
  }
  EXPECT_EQ(env.terminal_states().size(), L::group4.size + L::group5.size);
  EXPECT_TRUE(validate_env(env).empty());
  const auto order = enumerate_states(env);
  for (StateId s = L::group1.first; s <= L::group1.last(); ++s) EXPECT_LT(position(order, L::s1), position(order, s));
  expect_topological(env);
}

TEST(DidacticDag, RejectsUnknownSize) {
  EXPECT_THROW(build_didactic_dag("medium"), ConfigError);
}

TEST(EnumerateStates, Chain) {
  const auto env = fixtures::chain_dag(3);
  EXPECT_EQ(enumerate_states(env), (std::vector<StateId>{0, 1, 2}));
}

TEST(EnumerateStates, CycleAndCap) {
  const TabularDag cyc("cyc", 4, {{0, 1}, {1, 2}, {2, 1}, {2, 3}}, {{3, 1.0}});
  EXPECT_THROW(enumerate_states(cyc), CycleDetected);
  EXPECT_THROW(enumerate_states(build_motivating_dag(), 5), TooLarge);
}

TEST(EnumerateStates, EnvironmentsAreAcyclicAndConsistent) {
  expect_topological(HyperGrid(GridSpec{2, 8, 1e-6}));
  expect_topological(HyperGrid(GridSpec{3, 4, 1e-6}));
  SeqSpec spec;
  spec.length = 4;
  spec.motifs = builtin_motif_set(1);
  expect_topological(SequenceEnv(spec));
  EXPECT_TRUE(validate_env(HyperGrid(GridSpec{2, 8, 1e-6})).empty());
  EXPECT_TRUE(validate_env(SequenceEnv(spec)).empty());
}

TEST(ValidateEnv, ZeroRewardIsOneViolation) {
  fixtures::TamperedDag env(build_motivating_dag());
  env.reward_override[5] = 0.0;
  const auto v = validate_env(env);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::non_positive_reward);
  EXPECT_EQ(v[0].state, 5u);
  // the clamped reward used by training stays at the floor
  EXPECT_EQ(env.reward(5), kRewardFloor);
}

TEST(ValidateEnv, MissingParentIsOneViolation) {
  fixtures::TamperedDag env(build_motivating_dag());
  env.hidden_parents.push_back({5, 2});
  const auto v = validate_env(env);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::inconsistent_edge);
}

TEST(ValidateEnv, CycleAndUnreachable) {
  const TabularDag cyc("cyc", 4, {{0, 1}, {1, 2}, {2, 1}, {2, 3}}, {{3, 1.0}});
  auto v = validate_env(cyc);
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const Violation& x) { return x.kind == ViolationKind::cycle; }));
  const TabularDag orphan("orphan", 3, {{0, 1}}, {{1, 1.0}, {2, 1.0}});
  v = validate_env(orphan);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::unreachable);
  EXPECT_EQ(v[0].state, 2u);
}

TEST(Trajectory, FromActions) {
  const auto env = build_motivating_dag();
  const ActionId acts[] = {1, 1};
  const auto t = trajectory_from_actions(env, acts);
  EXPECT_EQ(t.states, (std::vector<StateId>{0, 2, 5}));
  EXPECT_EQ(t.reward, 1e-3);
  EXPECT_TRUE(is_complete(env, t));
  Trajectory partial = t;
  partial.states.pop_back();
  partial.actions.pop_back();
  partial.back_actions.pop_back();
  EXPECT_FALSE(is_complete(env, partial));
  const ActionId bad[] = {5};
  EXPECT_THROW(trajectory_from_actions(env, bad), InvalidEdge);
}

TEST(TabularJson, RoundTripAndErrors) {
  const auto env = build_didactic_dag(DidacticSize::small);
  const auto copy = tabular_dag_from_json(env.to_json());
  ASSERT_EQ(copy.num_states(), env.num_states());
  for (StateId s = 0; s < env.num_states(); ++s) {
    EXPECT_EQ(copy.children(s), env.children(s));
    EXPECT_EQ(copy.parents(s), env.parents(s));
    if (env.is_terminal(s)) {
      EXPECT_EQ(copy.reward(s), env.reward(s));
    }
  }
  EXPECT_THROW(tabular_dag_from_json(nlohmann::json{{"num_states", 2}, {"edges", {{0, 1}}}, {"colour", 1}}),
               ConfigError);
  EXPECT_THROW(tabular_dag_from_json(nlohmann::json{{"num_states", 2}, {"edges", {{0, 7}}}}), OutOfRange);
  EXPECT_THROW(tabular_dag_from_json(nlohmann::json{{"edges", {{0, 1}}}}), ConfigError);
  EXPECT_THROW(load_tabular_dag("/nonexistent/dag.json"), ConfigError);
}

TEST(TabularJson, LoadsFromFile) {
  const std::string path = ::testing::TempDir() + "diamond.json";
  std::ofstream(path) << R"({"name": "diamond", "num_states": 4,
                             "edges": [[0, 1], [0, 2], [1, 3], [2, 3]], "rewards": [[3, 2.5]]})";
  const auto env = load_tabular_dag(path);
  EXPECT_EQ(env.name(), "diamond");
  EXPECT_EQ(env.parents(3).size(), 2u);
  EXPECT_EQ(env.reward(3), 2.5);
  EXPECT_EQ(env.max_trajectory_length(), 2u);
  EXPECT_TRUE(validate_env(env).empty());
}

TEST(RewardFloor, Clamp) {
  EXPECT_EQ(clamp_reward(0.0), kRewardFloor);
  EXPECT_EQ(clamp_reward(-3.0), kRewardFloor);
  EXPECT_EQ(clamp_reward(std::nan("")), kRewardFloor);
  EXPECT_EQ(clamp_reward(0.25), 0.25);
}
