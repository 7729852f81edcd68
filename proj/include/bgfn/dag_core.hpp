#pragma once

// DAG environment abstraction shared by every environment and objective,
// together with the hand-built tabular DAGs used in the didactic experiments.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bgfn/errors.hpp"

namespace bgfn {

/// Index of a state inside an environment. State 0 is always the initial state s0.
using StateId = std::size_t;
/// Index into a state's fixed action menu.
using ActionId = std::size_t;

inline constexpr StateId kInitialState = 0;
inline constexpr double kRewardFloor = 1e-6;
inline constexpr std::size_t kDefaultEnumerationCap = 10'000'000;

/// Rewards are clamped up to the floor so log-space losses always have a finite target.
inline double clamp_reward(double r) {
  if (!(r >= kRewardFloor)) return kRewardFloor;  // also catches NaN
  return r;
}

/// Outgoing edge: taking `action` at the source state leads to `child`.
struct ChildEdge {
  ActionId action;
  StateId child;
  friend bool operator==(const ChildEdge&, const ChildEdge&) = default;
};

/// Incoming edge: `parent` reaches this state through forward `action`.
/// `back_action` is the edge's slot in the backward-policy menu of this state.
struct ParentEdge {
  StateId parent;
  ActionId action;
  ActionId back_action;
  friend bool operator==(const ParentEdge&, const ParentEdge&) = default;
};

/// Terminal states grouped into modes. `mode_of` maps a terminal state to its mode id.
struct ModeIndex {
  std::unordered_map<StateId, std::size_t> mode_of;
  std::size_t num_modes = 0;

  std::optional<std::size_t> find(StateId s) const {
    auto it = mode_of.find(s);
    if (it == mode_of.end()) return std::nullopt;
    return it->second;
  }
};

/// An enumerable DAG with a unique initial state, deterministic transitions
/// and strictly positive terminal rewards.
///
/// Implementations are immutable after construction; all queries are const
/// and may be called concurrently.
class DagEnvironment {
 public:
  virtual ~DagEnvironment() = default;

  virtual std::string name() const = 0;
  virtual std::size_t num_states() const = 0;
  virtual std::size_t num_actions() const = 0;
  virtual std::size_t num_backward_actions() const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual std::size_t max_trajectory_length() const = 0;

  /// Writes the feature vector of `s` into `out` (size feature_dim()).
  virtual void encode(StateId s, std::span<double> out) const = 0;
  virtual std::vector<ChildEdge> children(StateId s) const = 0;
  virtual std::vector<ParentEdge> parents(StateId s) const = 0;
  virtual bool is_terminal(StateId s) const = 0;
  /// Clamped terminal reward. Only meaningful for terminal states.
  virtual double reward(StateId s) const = 0;
  /// Reward as declared, before clamping. Used by validation.
  virtual double raw_reward(StateId s) const { return reward(s); }

  virtual std::string describe(StateId s) const { return "s" + std::to_string(s); }

  virtual std::vector<StateId> terminal_states() const {
    std::vector<StateId> out;
    for (StateId s = 0; s < num_states(); ++s) {
      if (is_terminal(s)) out.push_back(s);
    }
    return out;
  }

  /// Default mode definition: every terminal whose reward is at least half
  /// the maximum reward is its own mode.
  virtual ModeIndex mode_index() const {
    const auto terminals = terminal_states();
    double best = 0.0;
    for (StateId x : terminals) best = std::max(best, reward(x));
    ModeIndex idx;
    for (StateId x : terminals) {
      if (reward(x) >= 0.5 * best) idx.mode_of.emplace(x, idx.num_modes++);
    }
    return idx;
  }

  /// Validity mask over the forward action menu of `s`.
  std::vector<bool> forward_mask(StateId s) const {
    std::vector<bool> mask(num_actions(), false);
    for (const auto& e : children(s)) mask[e.action] = true;
    return mask;
  }

  /// Validity mask over the backward action menu of `s`.
  std::vector<bool> backward_mask(StateId s) const {
    std::vector<bool> mask(num_backward_actions(), false);
    for (const auto& e : parents(s)) mask[e.back_action] = true;
    return mask;
  }

  std::optional<StateId> child_via(StateId s, ActionId a) const {
    for (const auto& e : children(s)) {
      if (e.action == a) return e.child;
    }
    return std::nullopt;
  }
};

/// A complete rollout s0 -> ... -> terminal.
struct Trajectory {
  std::vector<StateId> states;
  std::vector<ActionId> actions;
  /// Backward-menu slot of each recorded edge, aligned with `actions`.
  std::vector<ActionId> back_actions;
  double reward = 0.0;
  /// Per-step forward log-probability under the sampling policy (may be empty).
  std::vector<double> log_probs;

  std::size_t length() const { return actions.size(); }
  StateId terminal() const { return states.back(); }
};

/// Backward slot of the edge (parent --action--> child), if the edge exists.
inline std::optional<ActionId> find_back_action(const DagEnvironment& env, StateId parent, ActionId action,
                                                StateId child) {
  for (const auto& e : env.parents(child)) {
    if (e.parent == parent && e.action == action) return e.back_action;
  }
  return std::nullopt;
}

/// True when `t` starts at s0, follows valid edges, ends at the first terminal
/// it meets and respects the environment's length bound.
inline bool is_complete(const DagEnvironment& env, const Trajectory& t) {
  if (t.states.empty() || t.states.front() != kInitialState) return false;
  if (t.actions.size() + 1 != t.states.size()) return false;
  if (!t.back_actions.empty() && t.back_actions.size() != t.actions.size()) return false;
  if (t.actions.size() > env.max_trajectory_length()) return false;
  for (std::size_t i = 0; i + 1 < t.states.size(); ++i) {
    if (env.is_terminal(t.states[i])) return false;
    auto c = env.child_via(t.states[i], t.actions[i]);
    if (!c || *c != t.states[i + 1]) return false;
  }
  return env.is_terminal(t.states.back());
}

/// Builds a trajectory from a sequence of actions starting at s0.
inline Trajectory trajectory_from_actions(const DagEnvironment& env, std::span<const ActionId> actions) {
  Trajectory t;
  t.states.push_back(kInitialState);
  for (ActionId a : actions) {
    const StateId s = t.states.back();
    auto c = env.child_via(s, a);
    if (!c) throw InvalidEdge("action " + std::to_string(a) + " is not valid at " + env.describe(s));
    t.actions.push_back(a);
    t.back_actions.push_back(*find_back_action(env, s, a, *c));
    t.states.push_back(*c);
  }
  if (env.is_terminal(t.states.back())) t.reward = env.reward(t.states.back());
  return t;
}

// ---------------------------------------------------------------------------
// Enumeration and validation

/// Topological order of all states (Kahn's algorithm, FIFO, ties broken by index).
inline std::vector<StateId> enumerate_states(const DagEnvironment& env,
                                             std::size_t cap = kDefaultEnumerationCap) {
  const std::size_t n = env.num_states();
  if (n > cap) {
    throw TooLarge(env.name() + " has " + std::to_string(n) + " states, cap is " + std::to_string(cap));
  }
  std::vector<std::size_t> indegree(n, 0);
  for (StateId s = 0; s < n; ++s) indegree[s] = env.parents(s).size();

  std::deque<StateId> ready;
  for (StateId s = 0; s < n; ++s) {
    if (indegree[s] == 0) ready.push_back(s);
  }
  std::vector<StateId> order;
  order.reserve(n);
  while (!ready.empty()) {
    const StateId s = ready.front();
    ready.pop_front();
    order.push_back(s);
    for (const auto& e : env.children(s)) {
      if (e.child >= n) continue;
      if (indegree[e.child] == 0) continue;  // inconsistent env; validate_env reports it
      if (--indegree[e.child] == 0) ready.push_back(e.child);
    }
  }
  if (order.size() != n) {
    throw CycleDetected(env.name() + ": " + std::to_string(n - order.size()) + " states lie on or behind a cycle");
  }
  return order;
}

enum class ViolationKind {
  cycle,
  inconsistent_edge,
  non_positive_reward,
  unreachable,
  initial_has_parents,
};

inline const char* to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::cycle: return "cycle";
    case ViolationKind::inconsistent_edge: return "inconsistent_edge";
    case ViolationKind::non_positive_reward: return "non_positive_reward";
    case ViolationKind::unreachable: return "unreachable";
    case ViolationKind::initial_has_parents: return "initial_has_parents";
  }
  return "unknown";
}

struct Violation {
  ViolationKind kind;
  StateId state;
  std::string message;
};

/// Checks acyclicity, parent/child consistency, reward positivity and
/// reachability from s0. Violations are returned, never thrown.
inline std::vector<Violation> validate_env(const DagEnvironment& env,
                                           std::size_t cap = kDefaultEnumerationCap) {
  std::vector<Violation> out;
  const std::size_t n = env.num_states();
  if (n > cap) throw TooLarge(env.name() + " is too large to validate");

  for (StateId s = 0; s < n; ++s) {
    const auto kids = env.children(s);
    for (const auto& e : kids) {
      if (e.child >= n) {
        out.push_back({ViolationKind::inconsistent_edge, s, env.describe(s) + " has a child outside the state range"});
        continue;
      }
      const auto ps = env.parents(e.child);
      const bool found = std::any_of(ps.begin(), ps.end(), [&](const ParentEdge& p) {
        return p.parent == s && p.action == e.action;
      });
      if (!found) {
        out.push_back({ViolationKind::inconsistent_edge, s,
                       env.describe(e.child) + " is a child of " + env.describe(s) + " but does not list it as parent"});
      }
    }
    for (const auto& p : env.parents(s)) {
      if (p.parent >= n) {
        out.push_back({ViolationKind::inconsistent_edge, s, env.describe(s) + " has a parent outside the state range"});
        continue;
      }
      const auto cs = env.children(p.parent);
      const bool found = std::any_of(cs.begin(), cs.end(), [&](const ChildEdge& c) {
        return c.child == s && c.action == p.action;
      });
      if (!found) {
        out.push_back({ViolationKind::inconsistent_edge, s,
                       env.describe(s) + " lists " + env.describe(p.parent) + " as parent but is not its child"});
      }
    }
    if (env.is_terminal(s)) {
      const double r = env.raw_reward(s);
      if (!(r > 0.0) || !std::isfinite(r)) {
        out.push_back({ViolationKind::non_positive_reward, s,
                       env.describe(s) + " has reward " + std::to_string(r)});
      }
    }
  }
  if (n > 0 && !env.parents(kInitialState).empty()) {
    out.push_back({ViolationKind::initial_has_parents, kInitialState, "the initial state has incoming edges"});
  }

  try {
    enumerate_states(env, cap);
  } catch (const CycleDetected& e) {
    out.push_back({ViolationKind::cycle, kInitialState, e.what()});
  }

  if (n > 0) {
    std::vector<bool> seen(n, false);
    std::vector<StateId> stack{kInitialState};
    seen[kInitialState] = true;
    while (!stack.empty()) {
      const StateId s = stack.back();
      stack.pop_back();
      for (const auto& e : env.children(s)) {
        if (e.child < n && !seen[e.child]) {
          seen[e.child] = true;
          stack.push_back(e.child);
        }
      }
    }
    for (StateId s = 0; s < n; ++s) {
      if (!seen[s]) out.push_back({ViolationKind::unreachable, s, env.describe(s) + " is not reachable from s0"});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tabular DAGs

/// Explicit adjacency-list DAG. Actions are positions in a state's child list,
/// backward slots are positions in its parent list, and features are one-hot
/// state indicators. States without children are terminal.
class TabularDag final : public DagEnvironment {
 public:
  TabularDag(std::string name, std::size_t num_states, const std::vector<std::pair<StateId, StateId>>& edges,
             const std::map<StateId, double>& rewards)
      : name_(std::move(name)), children_(num_states), parents_(num_states), raw_rewards_(num_states, 0.0) {
    if (num_states == 0) throw OutOfRange("a tabular DAG needs at least one state");
    for (const auto& [from, to] : edges) {
      if (from >= num_states || to >= num_states) {
        throw OutOfRange("edge (" + std::to_string(from) + ", " + std::to_string(to) + ") is out of range");
      }
      const ActionId a = children_[from].size();
      const ActionId b = parents_[to].size();
      children_[from].push_back({a, to});
      parents_[to].push_back({from, a, b});
    }
    for (const auto& [s, r] : rewards) {
      if (s >= num_states) throw OutOfRange("reward for unknown state " + std::to_string(s));
      raw_rewards_[s] = r;
    }
    for (const auto& c : children_) num_actions_ = std::max(num_actions_, c.size());
    for (const auto& p : parents_) num_back_ = std::max(num_back_, p.size());
    num_actions_ = std::max<std::size_t>(num_actions_, 1);
    num_back_ = std::max<std::size_t>(num_back_, 1);
    max_len_ = longest_path_or_bound();
  }

  std::string name() const override { return name_; }
  std::size_t num_states() const override { return children_.size(); }
  std::size_t num_actions() const override { return num_actions_; }
  std::size_t num_backward_actions() const override { return num_back_; }
  std::size_t feature_dim() const override { return children_.size(); }
  std::size_t max_trajectory_length() const override { return max_len_; }

  void encode(StateId s, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
    out[s] = 1.0;
  }
  std::vector<ChildEdge> children(StateId s) const override { return children_.at(s); }
  std::vector<ParentEdge> parents(StateId s) const override { return parents_.at(s); }
  bool is_terminal(StateId s) const override { return children_.at(s).empty(); }
  double reward(StateId s) const override { return clamp_reward(raw_rewards_.at(s)); }
  double raw_reward(StateId s) const override { return raw_rewards_.at(s); }

  nlohmann::json to_json() const {
    nlohmann::json edges = nlohmann::json::array();
    for (StateId s = 0; s < children_.size(); ++s) {
      for (const auto& e : children_[s]) edges.push_back({s, e.child});
    }
    nlohmann::json rewards = nlohmann::json::array();
    for (StateId s = 0; s < children_.size(); ++s) {
      if (is_terminal(s)) rewards.push_back({s, raw_rewards_[s]});
    }
    return {{"name", name_}, {"num_states", children_.size()}, {"edges", edges}, {"rewards", rewards}};
  }

 private:
  // Longest path from s0 if the graph is acyclic, otherwise the state count.
  std::size_t longest_path_or_bound() const {
    try {
      const auto order = enumerate_states(*this);
      std::vector<std::size_t> depth(children_.size(), 0);
      std::size_t best = 0;
      for (StateId s : order) {
        for (const auto& e : children_[s]) {
          depth[e.child] = std::max(depth[e.child], depth[s] + 1);
          best = std::max(best, depth[e.child]);
        }
      }
      return std::max<std::size_t>(best, 1);
    } catch (const CycleDetected&) {
      return children_.size();
    }
  }

  std::string name_;
  std::vector<std::vector<ChildEdge>> children_;
  std::vector<std::vector<ParentEdge>> parents_;
  std::vector<double> raw_rewards_;
  std::size_t num_actions_ = 0;
  std::size_t num_back_ = 0;
  std::size_t max_len_ = 1;
};

/// Parses the custom-DAG JSON schema:
///   {"name": "...", "num_states": N, "edges": [[from, to], ...], "rewards": [[state, reward], ...]}
inline TabularDag tabular_dag_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("DAG description must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "name" && key != "num_states" && key != "edges" && key != "rewards") {
      throw ConfigError("unknown key in DAG description: " + key);
    }
  }
  try {
    const std::string name = j.value("name", std::string("custom"));
    const auto n = j.at("num_states").get<std::size_t>();
    std::vector<std::pair<StateId, StateId>> edges;
    for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0).get<StateId>(), e.at(1).get<StateId>());
    std::map<StateId, double> rewards;
    if (j.contains("rewards")) {
      for (const auto& r : j.at("rewards")) rewards[r.at(0).get<StateId>()] = r.at(1).get<double>();
    }
    return TabularDag(name, n, edges, rewards);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed DAG description: ") + e.what());
  }
}

inline TabularDag load_tabular_dag(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return tabular_dag_from_json(j);
}

// ---------------------------------------------------------------------------
// Built-in didactic DAGs

/// s0 -> {s1, s2, s3}, s2 -> {s4, s5}; only s4 carries reward 1, the other
/// terminals carry 1e-3.
inline TabularDag build_motivating_dag() {
  return TabularDag("dag-motivating", 6, {{0, 1}, {0, 2}, {0, 3}, {2, 4}, {2, 5}},
                    {{1, 1e-3}, {3, 1e-3}, {4, 1.0}, {5, 1e-3}});
}

enum class DidacticSize { small, large };

inline DidacticSize parse_didactic_size(const std::string& tag) {
  if (tag == "small") return DidacticSize::small;
  if (tag == "large") return DidacticSize::large;
  throw ConfigError("unknown didactic DAG size: " + tag);
}

namespace detail {

struct StateRange {
  StateId first;
  std::size_t size;
  StateId last() const { return first + size - 1; }
};

inline void connect_all(std::vector<std::pair<StateId, StateId>>& edges, StateRange from, StateRange to) {
  for (StateId a = from.first; a < from.first + from.size; ++a) {
    for (StateId b = to.first; b < to.first + to.size; ++b) edges.emplace_back(a, b);
  }
}

inline void reward_ends(std::map<StateId, double>& rewards, StateRange g) {
  for (StateId s = g.first; s < g.first + g.size; ++s) rewards[s] = 1e-3;
  rewards[g.first] = 1.0;
  rewards[g.last()] = 1.0;
}

}  // namespace detail

/// Group layout of the large didactic DAG (state indices are contiguous per group).
struct LargeDagLayout {
  static constexpr detail::StateRange group1{3, 15};
  static constexpr detail::StateRange group2{18, 20};
  static constexpr detail::StateRange group3{38, 25};
  static constexpr detail::StateRange group4{63, 35};  // terminal
  static constexpr detail::StateRange group5{98, 30};  // terminal
  static constexpr StateId s1 = 1;
  static constexpr StateId s2 = 2;
  static constexpr StateId s128 = 128;
  static constexpr std::size_t num_states = 129;
};

/// Small: four layers, 14 states.
///   s0 -> s1 s2 s3
///   s1 -> s4 s5 | s2 -> s5 s6 | s3 -> s6 s7
///   s4 -> s8 s9 | s5 -> s9 s10 | s6 -> s10 s11 s12 | s7 -> s12 s13
///   R = 1 at s8 and s12, 1e-3 at s9 s10 s11 s13.
///
/// Large: see LargeDagLayout.
///   s0 -> s1 s2, s1 -> Group1, s2 -> Group2, Group1 -> Group5 and s128,
///   Group2 -> Group3, Group3 -> Group4 and s128, s128 -> Group4 and Group5.
///   Group4/Group5 are terminal; their first and last states have reward 1, the rest 1e-3.
inline TabularDag build_didactic_dag(DidacticSize size) {
  if (size == DidacticSize::small) {
    return TabularDag("dag-small", 14,
                      {{0, 1}, {0, 2}, {0, 3},
                       {1, 4}, {1, 5}, {2, 5}, {2, 6}, {3, 6}, {3, 7},
                       {4, 8}, {4, 9}, {5, 9}, {5, 10}, {6, 10}, {6, 11}, {6, 12}, {7, 12}, {7, 13}},
                      {{8, 1.0}, {9, 1e-3}, {10, 1e-3}, {11, 1e-3}, {12, 1.0}, {13, 1e-3}});
  }
  using L = LargeDagLayout;
  using detail::StateRange;
  std::vector<std::pair<StateId, StateId>> edges{{0, L::s1}, {0, L::s2}};
  detail::connect_all(edges, StateRange{L::s1, 1}, L::group1);
  detail::connect_all(edges, StateRange{L::s2, 1}, L::group2);
  detail::connect_all(edges, L::group1, L::group5);
  detail::connect_all(edges, L::group1, StateRange{L::s128, 1});
  detail::connect_all(edges, L::group2, L::group3);
  detail::connect_all(edges, L::group3, L::group4);
  detail::connect_all(edges, L::group3, StateRange{L::s128, 1});
  detail::connect_all(edges, StateRange{L::s128, 1}, L::group4);
  detail::connect_all(edges, StateRange{L::s128, 1}, L::group5);
  std::map<StateId, double> rewards;
  detail::reward_ends(rewards, L::group4);
  detail::reward_ends(rewards, L::group5);
  return TabularDag("dag-large", L::num_states, edges, rewards);
}

inline TabularDag build_didactic_dag(const std::string& size) { return build_didactic_dag(parse_didactic_size(size)); }

}  // namespace bgfn
