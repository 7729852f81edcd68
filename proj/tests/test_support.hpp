#pragma once

// Small fixtures shared by the unit tests.

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "bgfn/dag_core.hpp"
#include "bgfn/objectives.hpp"
#include "bgfn/tensor_nn.hpp"

namespace bgfn::fixtures {

/// Wraps a TabularDag and lets a test drop one side of an edge or override a
/// raw reward, to produce environments that violate the DagEnvironment contract.
class TamperedDag : public DagEnvironment {
 public:
  explicit TamperedDag(TabularDag base) : base_(std::move(base)) {}

  std::map<StateId, double> reward_override;
  /// (child, parent) pairs hidden from parents(child).
  std::vector<std::pair<StateId, StateId>> hidden_parents;

  std::string name() const override { return "tampered-" + base_.name(); }
  std::size_t num_states() const override { return base_.num_states(); }
  std::size_t num_actions() const override { return base_.num_actions(); }
  std::size_t num_backward_actions() const override { return base_.num_backward_actions(); }
  std::size_t feature_dim() const override { return base_.feature_dim(); }
  std::size_t max_trajectory_length() const override { return base_.max_trajectory_length(); }
  void encode(StateId s, std::span<double> out) const override { base_.encode(s, out); }
  std::vector<ChildEdge> children(StateId s) const override { return base_.children(s); }
  std::vector<ParentEdge> parents(StateId s) const override {
    std::vector<ParentEdge> out;
    for (const auto& p : base_.parents(s)) {
      bool hidden = false;
      for (const auto& [c, par] : hidden_parents) hidden = hidden || (c == s && par == p.parent);
      if (!hidden) out.push_back(p);
    }
    return out;
  }
  bool is_terminal(StateId s) const override { return base_.is_terminal(s); }
  double reward(StateId s) const override { return clamp_reward(raw_reward(s)); }
  double raw_reward(StateId s) const override {
    auto it = reward_override.find(s);
    return it != reward_override.end() ? it->second : base_.raw_reward(s);
  }

 private:
  TabularDag base_;
};

inline TabularDag chain_dag(std::size_t n) {
  std::vector<std::pair<StateId, StateId>> edges;
  for (StateId s = 0; s + 1 < n; ++s) edges.emplace_back(s, s + 1);
  return TabularDag("chain", n, edges, {{n - 1, 1.0}});
}

struct GradientCheck {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_excess = 0.0;  // largest |fd - g| - tolerance seen
  std::string worst;
};

/// Compares taped gradients with central differences (step 1e-5) for every
/// parameter entry. An entry passes when |fd - g| <= rel * max(|fd|, |g|) + abs.
inline GradientCheck check_gradients(nn::ParameterSet& params, const std::function<nn::Var(nn::Tape&)>& loss,
                                     double rel = 1e-4, double abs = 1e-6) {
  GradientCheck out;
  params.zero_grad();
  {
    nn::Tape tape(&params);
    tape.backward(loss(tape));
  }
  const double h = 1e-5;
  for (auto& p : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      p.value.data()[i] = orig + h;
      nn::Tape t1(&params);
      const double up = loss(t1).value()(0, 0);
      p.value.data()[i] = orig - h;
      nn::Tape t2(&params);
      const double down = loss(t2).value()(0, 0);
      p.value.data()[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double g = p.grad.data()[i];
      const double excess = std::fabs(fd - g) - (rel * std::max(std::fabs(fd), std::fabs(g)) + abs);
      ++out.checked;
      if (excess > 0.0) {
        ++out.failures;
        if (excess > out.worst_excess) {
          out.worst_excess = excess;
          out.worst = p.name + "[" + std::to_string(i) + "] fd " + std::to_string(fd) + " tape " + std::to_string(g);
        }
      }
    }
  }
  return out;
}

/// Exact flows built from a uniform backward policy: F(x) = R(x) at terminals,
/// F(s) = sum over child edges of F(c) / |parent edges of c|, and each edge
/// s -> c carries F(c) / |parent edges of c|.
struct PerfectFlows {
  std::vector<double> state;
  double edge(const DagEnvironment& env, StateId child) const {
    return state[child] / static_cast<double>(env.parents(child).size());
  }
};

inline PerfectFlows perfect_flows(const DagEnvironment& env) {
  PerfectFlows f;
  f.state.assign(env.num_states(), 0.0);
  const auto order = enumerate_states(env);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const StateId s = *it;
    if (env.is_terminal(s)) {
      f.state[s] = env.reward(s);
      continue;
    }
    for (const auto& c : env.children(s)) f.state[s] += f.edge(env, c.child);
  }
  return f;
}

/// Writes the perfect flows into a tabular model of any objective. P_B logits
/// are left at zero, which is the uniform backward policy.
inline void load_perfect_flows(GFlowNetModel& model) {
  const auto& env = model.env();
  const auto f = perfect_flows(env);
  const auto& l = model.layout();
  nn::Matrix& t = model.table();
  t.setZero();
  for (StateId s = 0; s < env.num_states(); ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    if (l.log_flow >= 0) t(r, l.log_flow) = std::log(f.state[s]);
    for (const auto& c : env.children(s)) {
      const double e = f.edge(env, c.child);
      const auto a = static_cast<Eigen::Index>(c.action);
      if (l.edge >= 0) t(r, l.edge + a) = std::log(e);
      if (l.forward >= 0) t(r, l.forward + a) = std::log(e / f.state[s]);
    }
  }
  if (model.log_z_index()) model.set_log_z(std::log(f.state[kInitialState]));
}

/// Largest per-item loss of a perfect-flow model over every state, edge or
/// enumerated trajectory of its environment.
inline double max_loss_everywhere(const GFlowNetModel& model, std::span<const Trajectory> all_trajectories) {
  const auto& env = model.env();
  double worst = 0.0;
  switch (model.objective()) {
    case Objective::fm:
    case Objective::bn:
      for (StateId s = 1; s < env.num_states(); ++s) {
        worst = std::max(worst, model.objective() == Objective::fm ? fm_loss(model, s) : bn_loss(model, s));
      }
      break;
    case Objective::db:
      for (StateId s = 0; s < env.num_states(); ++s) {
        for (const auto& c : env.children(s)) worst = std::max(worst, db_loss(model, make_transition(env, s, c.action)));
      }
      break;
    case Objective::tb:
      for (const auto& t : all_trajectories) worst = std::max(worst, tb_loss(model, t));
      break;
    case Objective::subtb:
      for (const auto& t : all_trajectories) worst = std::max(worst, subtb_loss(model, t));
      break;
  }
  return worst;
}

/// Every complete trajectory of a small DAG, by depth-first search.
inline std::vector<Trajectory> all_trajectories(const DagEnvironment& env) {
  std::vector<Trajectory> out;
  std::vector<ActionId> path;
  std::function<void(StateId)> walk = [&](StateId s) {
    if (env.is_terminal(s)) {
      out.push_back(trajectory_from_actions(env, path));
      return;
    }
    for (const auto& c : env.children(s)) {
      path.push_back(c.action);
      walk(c.child);
      path.pop_back();
    }
  };
  walk(kInitialState);
  return out;
}

/// One tabular Adam update on s0 -> s2 -> s5 of the motivating DAG, for FM
/// and BN started from flows that already balance at s2.
struct CreditPropagation {
  double fm_edge_s2_s4_before = 0.0, fm_edge_s2_s4_after = 0.0;
  double fm_edge_s2_s5_before = 0.0, fm_edge_s2_s5_after = 0.0;
  double bn_log_flow_s2_before = 0.0, bn_log_flow_s2_after = 0.0;
  double bn_alloc_s4_before = 0.0, bn_alloc_s4_after = 0.0;
  double bn_alloc_s5_before = 0.0, bn_alloc_s5_after = 0.0;
  bool fm_edge_bit_identical() const {
    return std::memcmp(&fm_edge_s2_s4_before, &fm_edge_s2_s4_after, sizeof(double)) == 0;
  }
};

inline CreditPropagation run_credit_propagation(double learning_rate = 0.01) {
  auto env = std::make_shared<TabularDag>(build_motivating_dag());
  const ActionId path[] = {1, 1};  // s0 -a1-> s2 -a1-> s5
  const std::vector<Trajectory> batch{trajectory_from_actions(*env, path)};
  CreditPropagation out;
  auto update = [&](GFlowNetModel& m) {
    nn::AdamState opt(m.parameters(), {.learning_rate = learning_rate});
    m.parameters().zero_grad();
    nn::Tape tape(&m.parameters());
    tape.backward(batch_loss(tape, m, batch));
    nn::adam_step(opt, m.parameters());
  };

  GFlowNetModel fm(env, {.objective = Objective::fm, .parameterization = Parameterization::tabular});
  {
    const auto e = fm.layout().edge;
    nn::Matrix& t = fm.table();
    t(0, e + 0) = std::log(1.0);
    t(0, e + 1) = std::log(2.0);
    t(0, e + 2) = std::log(1.0);
    t(2, e + 0) = std::log(1.0);
    t(2, e + 1) = std::log(1.0);
    out.fm_edge_s2_s4_before = t(2, e + 0);
    out.fm_edge_s2_s5_before = t(2, e + 1);
    update(fm);
    out.fm_edge_s2_s4_after = fm.table()(2, e + 0);
    out.fm_edge_s2_s5_after = fm.table()(2, e + 1);
  }

  GFlowNetModel bn(env, {.objective = Objective::bn, .parameterization = Parameterization::tabular});
  {
    const auto& l = bn.layout();
    nn::Matrix& t = bn.table();
    t(0, l.log_flow) = std::log(4.0);
    t(0, l.forward + 0) = std::log(0.25);
    t(0, l.forward + 1) = std::log(0.5);
    t(0, l.forward + 2) = std::log(0.25);
    t(2, l.log_flow) = std::log(2.0);
    auto alloc = [&bn](ActionId a) {
      const StateId s2[] = {2};
      return bn.forward_policy(s2)(0, static_cast<Eigen::Index>(a));
    };
    out.bn_log_flow_s2_before = bn.log_state_flow(2);
    out.bn_alloc_s4_before = alloc(0);
    out.bn_alloc_s5_before = alloc(1);
    update(bn);
    out.bn_log_flow_s2_after = bn.log_state_flow(2);
    out.bn_alloc_s4_after = alloc(0);
    out.bn_alloc_s5_after = alloc(1);
  }
  return out;
}

}  // namespace bgfn::fixtures
