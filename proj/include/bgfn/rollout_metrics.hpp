#pragma once

// Trajectory sampling with uniform exploration mixing, the exact
// terminal-distribution oracle, and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <queue>
#include <random>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "bgfn/dag_core.hpp"
#include "bgfn/tensor_nn.hpp"

namespace bgfn {

/// Maps a list of states to per-row action probabilities (num_actions columns).
using PolicyFn = std::function<nn::Matrix(std::span<const StateId>)>;

/// Uniform distribution over the valid actions of each state.
inline PolicyFn uniform_policy(const DagEnvironment& env) {
  return [&env](std::span<const StateId> states) {
    nn::Matrix out = nn::Matrix::Zero(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(env.num_actions()));
    for (std::size_t i = 0; i < states.size(); ++i) {
      const auto kids = env.children(states[i]);
      for (const auto& e : kids) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(e.action)) = 1.0 / static_cast<double>(kids.size());
    }
    return out;
  };
}

/// (1 - epsilon) * base + epsilon * Uniform(valid actions).
struct ExplorationPolicy {
  PolicyFn base;
  double epsilon = 0.0;

  nn::Matrix probabilities(const DagEnvironment& env, std::span<const StateId> states) const {
    nn::Matrix p = base ? base(states) : uniform_policy(env)(states);
    if (epsilon <= 0.0) return p;
    const nn::Matrix u = uniform_policy(env)(states);
    return (1.0 - epsilon) * p + epsilon * u;
  }
};

/// Draws `count` complete trajectories, advancing all rollouts in lock step so
/// the policy is queried once per step for the whole batch.
inline std::vector<Trajectory> sample_trajectories(const DagEnvironment& env, const ExplorationPolicy& policy,
                                                   std::size_t count, std::mt19937_64& rng) {
  std::vector<Trajectory> out(count);
  for (auto& t : out) t.states.push_back(kInitialState);
  std::vector<std::size_t> active(count);
  for (std::size_t i = 0; i < count; ++i) active[i] = i;
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  while (!active.empty()) {
    std::vector<StateId> current;
    current.reserve(active.size());
    for (std::size_t i : active) current.push_back(out[i].states.back());
    const nn::Matrix probs = policy.probabilities(env, current);
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < active.size(); ++k) {
      Trajectory& t = out[active[k]];
      const StateId s = current[k];
      const auto kids = env.children(s);
      double total = 0.0;
      for (const auto& e : kids) total += probs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(e.action));
      const double u = unif(rng) * total;
      double acc = 0.0;
      const ChildEdge* pick = nullptr;
      for (const auto& e : kids) {
        const double p = probs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(e.action));
        if (p <= 0.0) continue;
        acc += p;
        pick = &e;
        if (u < acc) break;
      }
      if (pick == nullptr) throw InvalidEdge("policy assigns no mass to any valid action at " + env.describe(s));
      const double p = probs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(pick->action));
      t.actions.push_back(pick->action);
      t.back_actions.push_back(*find_back_action(env, s, pick->action, pick->child));
      t.log_probs.push_back(std::log(p / total));
      t.states.push_back(pick->child);
      if (env.is_terminal(pick->child)) {
        t.reward = env.reward(pick->child);
      } else {
        still.push_back(active[k]);
      }
    }
    active = std::move(still);
  }
  return out;
}

inline std::vector<Trajectory> sample_trajectories(const DagEnvironment& env, const ExplorationPolicy& policy,
                                                   std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_trajectories(env, policy, count, rng);
}

/// Probability of each terminal state under some policy.
struct ExactDistribution {
  std::vector<StateId> terminals;
  std::vector<double> probs;

  double total() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }
  double prob(StateId x) const {
    auto it = std::lower_bound(terminals.begin(), terminals.end(), x);
    if (it == terminals.end() || *it != x) return 0.0;
    return probs[static_cast<std::size_t>(it - terminals.begin())];
  }
};

/// Target distribution R(x)/Z by enumeration; also returns Z.
inline ExactDistribution target_distribution(const DagEnvironment& env, double* partition = nullptr,
                                             std::size_t cap = kDefaultEnumerationCap) {
  if (env.num_states() > cap) throw TooLarge(env.name() + " is not enumerable");
  ExactDistribution d;
  d.terminals = env.terminal_states();
  std::sort(d.terminals.begin(), d.terminals.end());
  double z = 0.0;
  d.probs.reserve(d.terminals.size());
  for (StateId x : d.terminals) {
    d.probs.push_back(env.reward(x));
    z += d.probs.back();
  }
  for (double& p : d.probs) p /= z;
  if (partition != nullptr) *partition = z;
  return d;
}

/// mass(s0) = 1; mass(s') += mass(s) * policy(a|s) in topological order.
inline ExactDistribution exact_terminal_distribution(const DagEnvironment& env, const PolicyFn& policy,
                                                     std::size_t cap = kDefaultEnumerationCap,
                                                     std::size_t chunk = 4096) {
  const auto order = enumerate_states(env, cap);
  std::vector<double> mass(env.num_states(), 0.0);
  mass[kInitialState] = 1.0;
  for (std::size_t start = 0; start < order.size(); start += chunk) {
    const std::size_t stop = std::min(order.size(), start + chunk);
    std::vector<StateId> states;
    for (std::size_t i = start; i < stop; ++i) {
      if (!env.is_terminal(order[i])) states.push_back(order[i]);
    }
    const nn::Matrix probs = states.empty() ? nn::Matrix() : policy(states);
    std::size_t row = 0;
    for (std::size_t i = start; i < stop; ++i) {
      const StateId s = order[i];
      if (env.is_terminal(s)) continue;
      const double m = mass[s];
      if (m != 0.0) {
        for (const auto& e : env.children(s)) {
          mass[e.child] += m * probs(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(e.action));
        }
      }
      ++row;
    }
  }
  ExactDistribution d;
  d.terminals = env.terminal_states();
  std::sort(d.terminals.begin(), d.terminals.end());
  d.probs.reserve(d.terminals.size());
  for (StateId x : d.terminals) d.probs.push_back(mass[x]);
  return d;
}

/// Mean over terminals of |p(x) - pi(x)|. Both must list the same terminals.
inline double l1_error(const ExactDistribution& target, const ExactDistribution& model) {
  if (target.terminals != model.terminals) throw ShapeMismatch("distributions cover different terminal sets");
  double s = 0.0;
  for (std::size_t i = 0; i < target.probs.size(); ++i) s += std::abs(target.probs[i] - model.probs[i]);
  return s / static_cast<double>(target.probs.size());
}

inline double total_variation(const ExactDistribution& a, const ExactDistribution& b) {
  if (a.terminals != b.terminals) throw ShapeMismatch("distributions cover different terminal sets");
  double s = 0.0;
  for (std::size_t i = 0; i < a.probs.size(); ++i) s += std::abs(a.probs[i] - b.probs[i]);
  return 0.5 * s;
}

/// Visitation frequencies of `samples` over the terminal set of `support`.
inline ExactDistribution empirical_distribution(const ExactDistribution& support, std::span<const StateId> samples) {
  ExactDistribution d;
  d.terminals = support.terminals;
  d.probs.assign(d.terminals.size(), 0.0);
  if (samples.empty()) return d;
  const double w = 1.0 / static_cast<double>(samples.size());
  for (StateId x : samples) {
    auto it = std::lower_bound(d.terminals.begin(), d.terminals.end(), x);
    if (it != d.terminals.end() && *it == x) d.probs[static_cast<std::size_t>(it - d.terminals.begin())] += w;
  }
  return d;
}

inline std::vector<StateId> terminals_of(std::span<const Trajectory> batch) {
  std::vector<StateId> out;
  out.reserve(batch.size());
  for (const auto& t : batch) out.push_back(t.terminal());
  return out;
}

/// E_{R/Z}[R] over the enumerable terminal set.
inline double target_expected_reward(const DagEnvironment& env) {
  const auto p = target_distribution(env);
  double e = 0.0;
  for (std::size_t i = 0; i < p.terminals.size(); ++i) e += p.probs[i] * env.reward(p.terminals[i]);
  return e;
}

/// min(1, mean sample reward / E_{p*}[R]).
inline double accuracy(std::span<const double> sample_rewards, double target_mean) {
  if (sample_rewards.empty()) throw OutOfRange("accuracy needs at least one sample");
  double s = 0.0;
  for (double r : sample_rewards) s += r;
  return std::min(1.0, s / static_cast<double>(sample_rewards.size()) / target_mean);
}

inline double accuracy(std::span<const Trajectory> samples, double target_mean) {
  std::vector<double> r;
  for (const auto& t : samples) r.push_back(t.reward);
  return accuracy(r, target_mean);
}

/// min(1, E_pi[R] / E_{p*}[R]) for an exact model distribution.
inline double accuracy(const DagEnvironment& env, const ExactDistribution& model, double target_mean) {
  double e = 0.0;
  for (std::size_t i = 0; i < model.terminals.size(); ++i) e += model.probs[i] * env.reward(model.terminals[i]);
  return std::min(1.0, e / target_mean);
}

/// Discovered modes, cumulatively and within a ring buffer of recent samples.
class ModeTracker {
 public:
  explicit ModeTracker(ModeIndex index, std::size_t window = 1024)
      : index_(std::move(index)), window_(window), ring_(window, kNone), counts_(index_.num_modes, 0) {}

  void observe(StateId terminal) {
    const auto m = index_.find(terminal);
    const long id = m ? static_cast<long>(*m) : kNone;
    if (filled_ == window_) {
      const long old = ring_[head_];
      if (old != kNone && --counts_[static_cast<std::size_t>(old)] == 0) --windowed_;
    } else {
      ++filled_;
    }
    ring_[head_] = id;
    head_ = (head_ + 1) % window_;
    if (id != kNone) {
      if (counts_[static_cast<std::size_t>(id)]++ == 0) ++windowed_;
      discovered_.insert(static_cast<std::size_t>(id));
    }
  }

  void observe(std::span<const Trajectory> batch) {
    for (const auto& t : batch) observe(t.terminal());
  }

  std::size_t windowed() const { return windowed_; }
  std::size_t cumulative() const { return discovered_.size(); }
  std::size_t total_modes() const { return index_.num_modes; }
  std::size_t window() const { return window_; }

 private:
  static constexpr long kNone = -1;
  ModeIndex index_;
  std::size_t window_;
  std::vector<long> ring_;
  std::vector<std::size_t> counts_;
  std::size_t head_ = 0;
  std::size_t filled_ = 0;
  std::size_t windowed_ = 0;
  std::unordered_set<std::size_t> discovered_;
};

/// Mean of the K largest values (all values when fewer than K).
inline double top_k_rewards(std::span<const double> history, std::size_t k) {
  if (history.empty()) throw OutOfRange("top-K of an empty history");
  if (k == 0) throw OutOfRange("K must be positive");
  std::vector<double> v(history.begin(), history.end());
  const std::size_t n = std::min(k, v.size());
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n), v.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s / static_cast<double>(n);
}

/// Streaming version of top_k_rewards that keeps only the K best values.
class TopKTracker {
 public:
  explicit TopKTracker(std::size_t k) : k_(k) {
    if (k == 0) throw OutOfRange("K must be positive");
  }
  void observe(double r) {
    if (heap_.size() < k_) {
      heap_.push(r);
    } else if (r > heap_.top()) {
      heap_.pop();
      heap_.push(r);
    }
  }
  bool empty() const { return heap_.empty(); }
  double mean() const {
    auto copy = heap_;
    double s = 0.0;
    const auto n = copy.size();
    while (!copy.empty()) {
      s += copy.top();
      copy.pop();
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }

 private:
  std::size_t k_;
  std::priority_queue<double, std::vector<double>, std::greater<>> heap_;
};

/// Ring buffer of the most recent terminal states, for empirical L1.
class SampleWindow {
 public:
  explicit SampleWindow(std::size_t capacity) : capacity_(capacity) { buf_.reserve(std::min<std::size_t>(capacity, 1 << 16)); }
  void push(StateId x) {
    if (buf_.size() < capacity_) {
      buf_.push_back(x);
    } else {
      buf_[head_] = x;
      head_ = (head_ + 1) % capacity_;
    }
  }
  std::span<const StateId> samples() const { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<StateId> buf_;
};

}  // namespace bgfn
