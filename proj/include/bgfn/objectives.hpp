#pragma once

// Training objectives (FM, DB, TB, SubTB, BN) and their model
// parameterizations. Every loss is assembled on a tape from a handful of
// per-state head outputs so gradients come for free.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bgfn/dag_core.hpp"
#include "bgfn/tensor_nn.hpp"

namespace bgfn {

enum class Objective { fm, db, tb, subtb, bn };

inline Objective parse_objective(const std::string& s) {
  if (s == "fm") return Objective::fm;
  if (s == "db") return Objective::db;
  if (s == "tb") return Objective::tb;
  if (s == "subtb") return Objective::subtb;
  if (s == "bn") return Objective::bn;
  throw ConfigError("unknown objective: " + s + " (expected fm, db, tb, subtb or bn)");
}

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::fm: return "fm";
    case Objective::db: return "db";
    case Objective::tb: return "tb";
    case Objective::subtb: return "subtb";
    case Objective::bn: return "bn";
  }
  return "?";
}

inline constexpr Objective kAllObjectives[] = {Objective::fm, Objective::db, Objective::tb, Objective::subtb,
                                               Objective::bn};

enum class Parameterization { tabular, neural };

inline Parameterization parse_parameterization(const std::string& s) {
  if (s == "tabular") return Parameterization::tabular;
  if (s == "neural") return Parameterization::neural;
  throw ConfigError("unknown parameterization: " + s);
}

inline const char* to_string(Parameterization p) { return p == Parameterization::tabular ? "tabular" : "neural"; }

struct ModelConfig {
  Objective objective = Objective::bn;
  Parameterization parameterization = Parameterization::neural;
  std::vector<std::size_t> hidden = {256, 256};
  nn::Activation activation = nn::Activation::leaky_relu;
  /// Fix P_B to uniform over parents instead of learning it (db/tb/subtb).
  bool uniform_backward = false;
  std::uint64_t seed = 0;
};

/// Column layout of the head outputs; -1 marks an absent head.
struct HeadLayout {
  long log_flow = -1;  // 1 column: log F(s)
  long edge = -1;      // A columns: FM log edge flows
  long forward = -1;   // A columns: BN allocation logits / P_F logits
  long backward = -1;  // B columns: P_B logits
  std::size_t width = 0;
};

inline HeadLayout make_layout(Objective o, std::size_t actions, std::size_t back_actions) {
  HeadLayout l;
  auto take = [&l](long& slot, std::size_t n) {
    slot = static_cast<long>(l.width);
    l.width += n;
  };
  switch (o) {
    case Objective::fm: take(l.edge, actions); break;
    case Objective::bn: take(l.log_flow, 1); take(l.forward, actions); break;
    case Objective::db:
    case Objective::subtb: take(l.log_flow, 1); take(l.forward, actions); take(l.backward, back_actions); break;
    case Objective::tb: take(l.forward, actions); take(l.backward, back_actions); break;
  }
  return l;
}

/// Unique states of a batch with a row index per state.
class StateBatch {
 public:
  Eigen::Index add(StateId s) {
    auto [it, inserted] = rows_.try_emplace(s, static_cast<Eigen::Index>(states_.size()));
    if (inserted) states_.push_back(s);
    return it->second;
  }
  Eigen::Index row(StateId s) const { return rows_.at(s); }
  const std::vector<StateId>& states() const { return states_; }
  std::size_t size() const { return states_.size(); }

 private:
  std::vector<StateId> states_;
  std::unordered_map<StateId, Eigen::Index> rows_;
};

/// Taped head outputs for the rows of a StateBatch.
struct HeadOutputs {
  nn::Var log_flow;      // n x 1
  nn::Var log_edge;      // n x A, raw
  nn::Var log_forward;   // n x A, masked log-softmax (BN allocation or P_F)
  nn::Var log_backward;  // n x B, masked log-softmax (absent when P_B is uniform)
};

/// The five objective parameterizations behind one interface:
///  fm     edge-flow head                     log F(s->s') per action
///  bn     state-flow head + allocation head  log F(s), A(.|s)   (shared trunk)
///  db     state-flow + P_F + P_B heads
///  subtb  same heads as db
///  tb     P_F + P_B heads and a scalar log Z
/// Tabular models hold one free row of head outputs per state.
class GFlowNetModel {
 public:
  GFlowNetModel(std::shared_ptr<const DagEnvironment> env, ModelConfig config)
      : env_(std::move(env)), config_(std::move(config)) {
    layout_ = make_layout(config_.objective, env_->num_actions(), env_->num_backward_actions());
    std::mt19937_64 rng(config_.seed);
    if (config_.parameterization == Parameterization::tabular) {
      table_ = params_.add("table", nn::Matrix::Zero(static_cast<Eigen::Index>(env_->num_states()),
                                                    static_cast<Eigen::Index>(layout_.width)));
    } else {
      std::vector<std::size_t> widths{env_->feature_dim()};
      widths.insert(widths.end(), config_.hidden.begin(), config_.hidden.end());
      if (config_.hidden.empty()) {
        trunk_width_ = env_->feature_dim();
      } else {
        trunk_ = nn::DenseNet(params_, widths, config_.activation, config_.activation, rng, "trunk");
        trunk_width_ = config_.hidden.back();
      }
      auto head = [&](long slot, std::size_t n, const char* name) {
        if (slot < 0) return;
        heads_.push_back({slot, nn::DenseNet(params_, {trunk_width_, n}, nn::Activation::identity,
                                             nn::Activation::identity, rng, name)});
      };
      head(layout_.log_flow, 1, "flow_head");
      head(layout_.edge, env_->num_actions(), "edge_head");
      head(layout_.forward, env_->num_actions(), config_.objective == Objective::bn ? "allocation_head" : "pf_head");
      head(layout_.backward, env_->num_backward_actions(), "pb_head");
    }
    if (config_.objective == Objective::tb) log_z_ = params_.add("log_z", nn::Matrix::Zero(1, 1));
  }

  const DagEnvironment& env() const { return *env_; }
  std::shared_ptr<const DagEnvironment> env_ptr() const { return env_; }
  const ModelConfig& config() const { return config_; }
  Objective objective() const { return config_.objective; }
  const HeadLayout& layout() const { return layout_; }
  bool tabular() const { return config_.parameterization == Parameterization::tabular; }
  bool learns_backward() const { return layout_.backward >= 0 && !config_.uniform_backward; }

  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  /// Tabular head table (states x layout().width).
  nn::Matrix& table() { return params_[require_table()].value; }
  const nn::Matrix& table() const { return params_[require_table()].value; }

  double log_z() const { return params_[require_log_z()].value(0, 0); }
  void set_log_z(double v) { params_[require_log_z()].value(0, 0) = v; }
  std::optional<std::size_t> log_z_index() const { return log_z_; }

  nn::Matrix features(std::span<const StateId> states) const {
    nn::Matrix x(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(env_->feature_dim()));
    std::vector<double> buf(env_->feature_dim());
    for (std::size_t i = 0; i < states.size(); ++i) {
      env_->encode(states[i], buf);
      for (std::size_t j = 0; j < buf.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = buf[j];
    }
    return x;
  }

  /// Raw head outputs (states x width) without recording.
  nn::Matrix raw_outputs(std::span<const StateId> states) const {
    if (tabular()) {
      nn::Matrix out(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(layout_.width));
      for (std::size_t i = 0; i < states.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table().row(static_cast<Eigen::Index>(states[i]));
      return out;
    }
    const nn::Matrix x = features(states);
    const nn::Matrix h = config_.hidden.empty() ? x : trunk_.forward(params_, x);
    nn::Matrix out(h.rows(), static_cast<Eigen::Index>(layout_.width));
    for (const auto& head : heads_) {
      const nn::Matrix o = head.net.forward(params_, h);
      out.middleCols(head.slot, o.cols()) = o;
    }
    return out;
  }

  /// Raw head outputs recorded on `tape` (which must be bound to parameters()).
  nn::Var raw_outputs(nn::Tape& tape, std::span<const StateId> states) const {
    if (tape.parameters() != &params_) throw NoTape("tape is not bound to this model's parameters");
    if (tabular()) {
      std::vector<Eigen::Index> rows(states.begin(), states.end());
      return nn::gather_rows(tape.parameter(table_), std::move(rows));
    }
    nn::Var h = tape.constant(features(states));
    if (!config_.hidden.empty()) h = trunk_.forward(tape, h);
    std::vector<nn::Var> parts;
    // Heads are emitted in slot order so concatenation matches the layout.
    for (const auto& head : heads_) parts.push_back(head.net.forward(tape, h));
    if (parts.size() == 1) return parts.front();
    return hconcat(parts);
  }

  nn::Mask forward_mask(std::span<const StateId> states) const {
    nn::Mask m = nn::Mask::Constant(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(env_->num_actions()), false);
    for (std::size_t i = 0; i < states.size(); ++i) {
      for (const auto& e : env_->children(states[i])) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(e.action)) = true;
    }
    return m;
  }

  nn::Mask backward_mask(std::span<const StateId> states) const {
    nn::Mask m = nn::Mask::Constant(static_cast<Eigen::Index>(states.size()),
                                    static_cast<Eigen::Index>(env_->num_backward_actions()), false);
    for (std::size_t i = 0; i < states.size(); ++i) {
      for (const auto& e : env_->parents(states[i])) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(e.back_action)) = true;
    }
    return m;
  }

  HeadOutputs evaluate(nn::Tape& tape, const StateBatch& batch) const {
    const auto& states = batch.states();
    const nn::Var raw = raw_outputs(tape, states);
    HeadOutputs out;
    const auto a = static_cast<Eigen::Index>(env_->num_actions());
    const auto b = static_cast<Eigen::Index>(env_->num_backward_actions());
    if (layout_.log_flow >= 0) out.log_flow = nn::slice_cols(raw, layout_.log_flow, 1);
    if (layout_.edge >= 0) out.log_edge = nn::slice_cols(raw, layout_.edge, a);
    if (layout_.forward >= 0) {
      out.log_forward = nn::masked_log_softmax(nn::slice_cols(raw, layout_.forward, a), forward_mask(states));
    }
    if (learns_backward()) {
      out.log_backward = nn::masked_log_softmax(nn::slice_cols(raw, layout_.backward, b), backward_mask(states));
    }
    return out;
  }

  /// Forward sampling policy per state (rows sum to 1 over valid actions,
  /// all-zero rows for terminals). FM normalizes its edge flows, BN uses the
  /// allocation head, DB/TB/SubTB use P_F.
  nn::Matrix forward_policy(std::span<const StateId> states) const {
    const nn::Matrix raw = raw_outputs(states);
    const auto a = static_cast<Eigen::Index>(env_->num_actions());
    const long col = layout_.edge >= 0 ? layout_.edge : layout_.forward;
    const nn::Matrix logp = nn::masked_log_softmax_rows(raw.middleCols(col, a), forward_mask(states));
    return nn::exact_exp(logp);
  }

  /// P_B per state over the backward menu (uniform over parents when not learned).
  nn::Matrix backward_policy(std::span<const StateId> states) const {
    const auto b = static_cast<Eigen::Index>(env_->num_backward_actions());
    const nn::Mask mask = backward_mask(states);
    if (!learns_backward()) {
      nn::Matrix out = nn::Matrix::Zero(static_cast<Eigen::Index>(states.size()), b);
      for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double n = static_cast<double>(mask.row(r).count());
        for (Eigen::Index c = 0; c < b; ++c) {
          if (mask(r, c)) out(r, c) = 1.0 / n;
        }
      }
      return out;
    }
    const nn::Matrix raw = raw_outputs(states);
    return nn::exact_exp(nn::masked_log_softmax_rows(raw.middleCols(layout_.backward, b), mask));
  }

  /// log F(s) from the state-flow head (bn, db, subtb).
  double log_state_flow(StateId s) const {
    if (layout_.log_flow < 0) throw ConfigError(std::string(to_string(objective())) + " has no state-flow head");
    const StateId one[] = {s};
    return raw_outputs(one)(0, layout_.log_flow);
  }

 private:
  struct Head {
    long slot;
    nn::DenseNet net;
  };

  std::size_t require_table() const {
    if (!tabular()) throw ConfigError("model is not tabular");
    return table_;
  }
  std::size_t require_log_z() const {
    if (!log_z_) throw ConfigError("only trajectory balance has a log Z parameter");
    return *log_z_;
  }

  static nn::Var hconcat(const std::vector<nn::Var>& parts) {
    Eigen::Index cols = 0;
    for (const auto& p : parts) cols += p.cols();
    const Eigen::Index rows = parts.front().rows();
    nn::Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      out.middleCols(at, p.cols()) = p.value();
      at += p.cols();
    }
    return parts.front().tape()->record(std::move(out), parts, [parts](const nn::Matrix& g, nn::Tape& tape) {
      Eigen::Index at = 0;
      for (const auto& p : parts) {
        tape.accumulate(p, g.middleCols(at, p.cols()));
        at += p.cols();
      }
    });
  }

  std::shared_ptr<const DagEnvironment> env_;
  ModelConfig config_;
  HeadLayout layout_;
  nn::ParameterSet params_;
  std::size_t table_ = 0;
  nn::DenseNet trunk_;
  std::size_t trunk_width_ = 0;
  std::vector<Head> heads_;
  std::optional<std::size_t> log_z_;
};

// ---------------------------------------------------------------------------
// Loss assembly

/// One edge s --action--> s' with its backward slot.
struct Transition {
  StateId from;
  ActionId action;
  StateId to;
  ActionId back_action;
};

namespace detail {

/// Builds a residual vector r = S v + c over a concatenation of gathered
/// log-quantities, one row per loss term.
class ResidualBuilder {
 public:
  /// Registers a gathered entry of `source`; returns its position in v.
  Eigen::Index entry(int source, Eigen::Index row, Eigen::Index col) {
    auto& list = entries_[source];
    const auto key = std::make_pair(row, col);
    auto it = index_[source].find(key);
    if (it != index_[source].end()) return it->second;
    const Eigen::Index pos = static_cast<Eigen::Index>(list.size());
    list.push_back({row, col});
    index_[source].emplace(key, pos);
    return pos;
  }

  void begin_row() {
    offsets_.push_back(0.0);
  }
  void term(int source, Eigen::Index row, Eigen::Index col, double coeff) {
    terms_.push_back({static_cast<Eigen::Index>(offsets_.size()) - 1, source, entry(source, row, col), coeff});
  }
  void constant(double c) { offsets_.back() += c; }

  Eigen::Index rows() const { return static_cast<Eigen::Index>(offsets_.size()); }

  /// `sources[i]` is gathered with the entries registered under source i.
  nn::Var build(std::span<const nn::Var> sources) const {
    std::vector<nn::Var> parts;
    std::vector<Eigen::Index> base(sources.size(), 0);
    Eigen::Index total = 0;
    for (std::size_t s = 0; s < sources.size(); ++s) {
      base[s] = total;
      if (entries_[s].empty()) continue;
      parts.push_back(nn::gather(sources[s], entries_[s]));
      total += static_cast<Eigen::Index>(entries_[s].size());
    }
    nn::SparseRows coeffs(rows(), std::max<Eigen::Index>(total, 1));
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(terms_.size());
    for (const auto& t : terms_) trip.emplace_back(t.row, base[static_cast<std::size_t>(t.source)] + t.pos, t.coeff);
    coeffs.setFromTriplets(trip.begin(), trip.end());
    nn::Vector c = Eigen::Map<const nn::Vector>(offsets_.data(), rows());
    nn::Tape& tape = *sources.front().tape();
    nn::Var v = parts.empty() ? tape.constant(nn::Matrix::Zero(1, 1)) : nn::concat_rows(parts);
    return nn::affine(v, std::move(coeffs), std::move(c));
  }

 private:
  struct Term {
    Eigen::Index row;
    int source;
    Eigen::Index pos;
    double coeff;
  };
  struct PairHash {
    std::size_t operator()(const std::pair<Eigen::Index, Eigen::Index>& p) const {
      return std::hash<Eigen::Index>()(p.first) * 1000003u ^ std::hash<Eigen::Index>()(p.second);
    }
  };
  std::vector<nn::Entry> entries_[4];
  std::unordered_map<std::pair<Eigen::Index, Eigen::Index>, Eigen::Index, PairHash> index_[4];
  std::vector<double> offsets_;
  std::vector<Term> terms_;
};

inline void require_objective(const GFlowNetModel& m, std::initializer_list<Objective> allowed, const char* what) {
  for (Objective o : allowed) {
    if (m.objective() == o) return;
  }
  throw ConfigError(std::string(what) + " is not defined for a " + to_string(m.objective()) + " model");
}

inline void require_non_root(const DagEnvironment& env, StateId s) {
  if (s == kInitialState || env.parents(s).empty()) throw NoParents(env.describe(s) + " has no parents");
}

inline nn::Var mean_of_squares(const nn::Var& residuals) {
  const auto n = residuals.rows();
  return nn::weighted_square_sum(residuals, nn::Vector::Constant(n, 1.0 / static_cast<double>(n)));
}

}  // namespace detail

/// Per-state flow-matching residuals: log inflow - log outflow, or - log R at terminals.
inline nn::Var flow_matching_residuals(nn::Tape& tape, const GFlowNetModel& model, std::span<const StateId> states) {
  detail::require_objective(model, {Objective::fm}, "flow matching");
  const auto& env = model.env();
  StateBatch batch;
  for (StateId s : states) {
    detail::require_non_root(env, s);
    batch.add(s);
    for (const auto& p : env.parents(s)) batch.add(p.parent);
  }
  const HeadOutputs h = model.evaluate(tape, batch);
  std::vector<nn::Entry> in_entries;
  std::vector<Eigen::Index> in_offsets{0};
  std::vector<nn::Entry> out_entries;
  std::vector<Eigen::Index> out_offsets{0};
  nn::Vector log_r = nn::Vector::Zero(static_cast<Eigen::Index>(states.size()));
  std::vector<bool> terminal(states.size());
  for (std::size_t k = 0; k < states.size(); ++k) {
    const StateId s = states[k];
    for (const auto& p : env.parents(s)) in_entries.push_back({batch.row(p.parent), static_cast<Eigen::Index>(p.action)});
    in_offsets.push_back(static_cast<Eigen::Index>(in_entries.size()));
    terminal[k] = env.is_terminal(s);
    if (terminal[k]) {
      log_r(static_cast<Eigen::Index>(k)) = std::log(env.reward(s));
    } else {
      for (const auto& c : env.children(s)) out_entries.push_back({batch.row(s), static_cast<Eigen::Index>(c.action)});
    }
    out_offsets.push_back(static_cast<Eigen::Index>(out_entries.size()));
  }
  const nn::Var inflow = nn::segment_logsumexp(nn::gather(h.log_edge, in_entries), in_offsets);
  const auto n = static_cast<Eigen::Index>(states.size());
  // residual_k = inflow_k - outflow_k  (outflow segment empty at terminals, replaced by log R)
  std::vector<nn::Var> parts{inflow};
  Eigen::Index outflow_rows = 0;
  if (!out_entries.empty()) {
    // drop empty segments so every outflow row is finite
    std::vector<Eigen::Index> compact{0};
    for (std::size_t k = 0; k < states.size(); ++k) {
      if (!terminal[k]) compact.push_back(out_offsets[k + 1]);
    }
    parts.push_back(nn::segment_logsumexp(nn::gather(h.log_edge, out_entries), compact));
    outflow_rows = static_cast<Eigen::Index>(compact.size()) - 1;
  }
  const nn::Var v = nn::concat_rows(parts);
  nn::SparseRows coeffs(n, n + outflow_rows);
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::Index next = n;
  for (Eigen::Index k = 0; k < n; ++k) {
    trip.emplace_back(k, k, 1.0);
    if (!terminal[static_cast<std::size_t>(k)]) trip.emplace_back(k, next++, -1.0);
  }
  coeffs.setFromTriplets(trip.begin(), trip.end());
  return nn::affine(v, std::move(coeffs), -log_r);
}

/// Per-state BN residuals: log sum_parents F(s) A(s'|s) - log F(s'), or - log R at terminals.
inline nn::Var bifurcated_residuals(nn::Tape& tape, const GFlowNetModel& model, std::span<const StateId> states) {
  detail::require_objective(model, {Objective::bn}, "the bifurcated loss");
  const auto& env = model.env();
  StateBatch batch;
  for (StateId s : states) {
    detail::require_non_root(env, s);
    batch.add(s);
    for (const auto& p : env.parents(s)) batch.add(p.parent);
  }
  const HeadOutputs h = model.evaluate(tape, batch);
  // log F(parent) + log A(s'|parent) for every incoming edge, grouped per state.
  std::vector<nn::Entry> flow_entries;
  std::vector<nn::Entry> alloc_entries;
  std::vector<Eigen::Index> offsets{0};
  for (StateId s : states) {
    for (const auto& p : env.parents(s)) {
      flow_entries.push_back({batch.row(p.parent), 0});
      alloc_entries.push_back({batch.row(p.parent), static_cast<Eigen::Index>(p.action)});
    }
    offsets.push_back(static_cast<Eigen::Index>(flow_entries.size()));
  }
  const nn::Var edge_log_flow = nn::add(nn::gather(h.log_flow, flow_entries), nn::gather(h.log_forward, alloc_entries));
  const nn::Var inflow = nn::segment_logsumexp(edge_log_flow, offsets);

  detail::ResidualBuilder rb;
  // source 0: inflow vector, source 1: log F column
  for (std::size_t k = 0; k < states.size(); ++k) {
    const StateId s = states[k];
    rb.begin_row();
    rb.term(0, static_cast<Eigen::Index>(k), 0, 1.0);
    if (env.is_terminal(s)) {
      rb.constant(-std::log(env.reward(s)));
    } else {
      rb.term(1, batch.row(s), 0, -1.0);
    }
  }
  const nn::Var sources[] = {inflow, h.log_flow};
  return rb.build(sources);
}

/// Per-transition DB residuals: log F(s) P_F(s'|s) - log F(s') P_B(s|s'), with F(x) = R(x) at terminals.
inline nn::Var detailed_balance_residuals(nn::Tape& tape, const GFlowNetModel& model,
                                          std::span<const Transition> transitions) {
  detail::require_objective(model, {Objective::db}, "detailed balance");
  const auto& env = model.env();
  StateBatch batch;
  for (const auto& t : transitions) {
    const auto back = find_back_action(env, t.from, t.action, t.to);
    if (!back || *back != t.back_action) {
      throw InvalidEdge(env.describe(t.from) + " -> " + env.describe(t.to) + " is not an edge of " + env.name());
    }
    batch.add(t.from);
    batch.add(t.to);
  }
  const HeadOutputs h = model.evaluate(tape, batch);
  const nn::Mask bmask = model.backward_mask(batch.states());
  detail::ResidualBuilder rb;
  // sources: 0 log F, 1 log P_F, 2 log P_B
  for (const auto& t : transitions) {
    rb.begin_row();
    rb.term(0, batch.row(t.from), 0, 1.0);
    rb.term(1, batch.row(t.from), static_cast<Eigen::Index>(t.action), 1.0);
    if (env.is_terminal(t.to)) {
      rb.constant(-std::log(env.reward(t.to)));
    } else {
      rb.term(0, batch.row(t.to), 0, -1.0);
    }
    if (model.learns_backward()) {
      rb.term(2, batch.row(t.to), static_cast<Eigen::Index>(t.back_action), -1.0);
    } else {
      rb.constant(std::log(static_cast<double>(bmask.row(batch.row(t.to)).count())));
    }
  }
  std::vector<nn::Var> sources{h.log_flow, h.log_forward};
  sources.push_back(model.learns_backward() ? h.log_backward : h.log_flow);
  return rb.build(sources);
}

inline void require_complete(const DagEnvironment& env, const Trajectory& t) {
  if (!is_complete(env, t)) throw IncompleteTrajectory("trajectory does not run from s0 to a terminal state");
}

inline std::vector<ActionId> back_actions_of(const DagEnvironment& env, const Trajectory& t) {
  if (t.back_actions.size() == t.actions.size()) return t.back_actions;
  std::vector<ActionId> out;
  for (std::size_t i = 0; i < t.actions.size(); ++i) out.push_back(*find_back_action(env, t.states[i], t.actions[i], t.states[i + 1]));
  return out;
}

/// Per-trajectory TB residuals: log Z + sum log P_F - log R(x) - sum log P_B.
inline nn::Var trajectory_balance_residuals(nn::Tape& tape, const GFlowNetModel& model,
                                            std::span<const Trajectory> trajectories) {
  detail::require_objective(model, {Objective::tb}, "trajectory balance");
  const auto& env = model.env();
  StateBatch batch;
  for (const auto& t : trajectories) {
    require_complete(env, t);
    for (StateId s : t.states) batch.add(s);
  }
  const HeadOutputs h = model.evaluate(tape, batch);
  const nn::Mask bmask = model.backward_mask(batch.states());
  const nn::Var log_z = tape.parameter(*model.log_z_index());
  detail::ResidualBuilder rb;
  // sources: 0 log Z, 1 log P_F, 2 log P_B
  for (const auto& t : trajectories) {
    const auto back = back_actions_of(env, t);
    rb.begin_row();
    rb.term(0, 0, 0, 1.0);
    rb.constant(-std::log(env.reward(t.terminal())));
    for (std::size_t i = 0; i < t.actions.size(); ++i) {
      rb.term(1, batch.row(t.states[i]), static_cast<Eigen::Index>(t.actions[i]), 1.0);
      const Eigen::Index next = batch.row(t.states[i + 1]);
      if (model.learns_backward()) {
        rb.term(2, next, static_cast<Eigen::Index>(back[i]), -1.0);
      } else {
        rb.constant(std::log(static_cast<double>(bmask.row(next).count())));
      }
    }
  }
  std::vector<nn::Var> sources{log_z, h.log_forward};
  sources.push_back(model.learns_backward() ? h.log_backward : log_z);
  return rb.build(sources);
}

/// Normalized SubTB weights lambda^(j-i) / sum_{0<=i<j<=n} lambda^(j-i), row-major over (i, j).
inline std::vector<double> subtrajectory_weights(std::size_t n, double lambda) {
  std::vector<double> w;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j <= n; ++j) {
      w.push_back(std::pow(lambda, static_cast<double>(j - i)));
      total += w.back();
    }
  }
  for (double& x : w) x /= total;
  return w;
}

/// SubTB loss of each trajectory (column vector, one entry per trajectory):
/// sum_{i<j} w_ij (log F(s_i) + sum log P_F - log F(s_j) - sum log P_B)^2 with F(s_n) = R(x).
inline nn::Var subtrajectory_balance_losses(nn::Tape& tape, const GFlowNetModel& model,
                                            std::span<const Trajectory> trajectories, double lambda) {
  detail::require_objective(model, {Objective::subtb}, "sub-trajectory balance");
  if (!(lambda > 0.0)) throw ConfigError("SubTB lambda must be positive");
  const auto& env = model.env();
  StateBatch batch;
  for (const auto& t : trajectories) {
    require_complete(env, t);
    for (StateId s : t.states) batch.add(s);
  }
  const HeadOutputs h = model.evaluate(tape, batch);
  const nn::Mask bmask = model.backward_mask(batch.states());

  // Potentials u_t = log F(s_t) - sum_{k<t} (log P_F_k - log P_B_k); residual_ij = u_i - u_j.
  detail::ResidualBuilder rb;
  std::vector<std::size_t> first_row;
  for (const auto& t : trajectories) {
    const auto back = back_actions_of(env, t);
    first_row.push_back(static_cast<std::size_t>(rb.rows()));
    const std::size_t n = t.actions.size();
    for (std::size_t u = 0; u <= n; ++u) {
      rb.begin_row();
      if (u == n) {
        rb.constant(std::log(env.reward(t.terminal())));
      } else {
        rb.term(0, batch.row(t.states[u]), 0, 1.0);
      }
      for (std::size_t k = 0; k < u; ++k) {
        rb.term(1, batch.row(t.states[k]), static_cast<Eigen::Index>(t.actions[k]), -1.0);
        const Eigen::Index next = batch.row(t.states[k + 1]);
        if (model.learns_backward()) {
          rb.term(2, next, static_cast<Eigen::Index>(back[k]), 1.0);
        } else {
          rb.constant(-std::log(static_cast<double>(bmask.row(next).count())));
        }
      }
    }
  }
  std::vector<nn::Var> sources{h.log_flow, h.log_forward};
  sources.push_back(model.learns_backward() ? h.log_backward : h.log_flow);
  const nn::Var potentials = rb.build(sources);

  // Pairwise differences and per-trajectory weights.
  std::vector<Eigen::Triplet<double>> trip;
  std::vector<double> weights;
  Eigen::Index row = 0;
  std::vector<Eigen::Index> traj_end;
  for (std::size_t k = 0; k < trajectories.size(); ++k) {
    const std::size_t n = trajectories[k].actions.size();
    const auto w = subtrajectory_weights(n, lambda);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j <= n; ++j, ++idx, ++row) {
        trip.emplace_back(row, static_cast<Eigen::Index>(first_row[k] + i), 1.0);
        trip.emplace_back(row, static_cast<Eigen::Index>(first_row[k] + j), -1.0);
        weights.push_back(w[idx]);
      }
    }
    traj_end.push_back(row);
  }
  nn::SparseRows diff(row, potentials.rows());
  diff.setFromTriplets(trip.begin(), trip.end());
  const nn::Var residuals = nn::affine(potentials, std::move(diff), nn::Vector::Zero(row));
  // Weighted squares, then summed per trajectory.
  const nn::Vector wv = Eigen::Map<const nn::Vector>(weights.data(), static_cast<Eigen::Index>(weights.size()));
  nn::Matrix sq = residuals.value().array().square().matrix();
  nn::Matrix per_traj(static_cast<Eigen::Index>(trajectories.size()), 1);
  Eigen::Index start = 0;
  for (std::size_t k = 0; k < trajectories.size(); ++k) {
    per_traj(static_cast<Eigen::Index>(k), 0) =
        (wv.segment(start, traj_end[k] - start).array() * sq.col(0).segment(start, traj_end[k] - start).array()).sum();
    start = traj_end[k];
  }
  return tape.record(std::move(per_traj), {residuals}, [residuals, wv, traj_end](const nn::Matrix& g, nn::Tape& tp) {
    nn::Matrix d(residuals.rows(), 1);
    Eigen::Index start = 0;
    for (std::size_t k = 0; k < traj_end.size(); ++k) {
      for (Eigen::Index r = start; r < traj_end[k]; ++r) d(r, 0) = 2.0 * g(static_cast<Eigen::Index>(k), 0) * wv(r) * residuals.value()(r, 0);
      start = traj_end[k];
    }
    tp.accumulate(residuals, d);
  });
}

// ---------------------------------------------------------------------------
// Scalar losses of single states, edges and trajectories

namespace detail {
inline double squared_scalar(const nn::Var& r) {
  const double v = r.value()(0, 0);
  return v * v;
}
}  // namespace detail

inline double fm_loss(const GFlowNetModel& model, StateId s) {
  nn::ParameterSet& params = const_cast<nn::ParameterSet&>(model.parameters());
  nn::Tape tape(&params);
  const StateId one[] = {s};
  return detail::squared_scalar(flow_matching_residuals(tape, model, one));
}

inline double bn_loss(const GFlowNetModel& model, StateId s) {
  nn::ParameterSet& params = const_cast<nn::ParameterSet&>(model.parameters());
  nn::Tape tape(&params);
  const StateId one[] = {s};
  return detail::squared_scalar(bifurcated_residuals(tape, model, one));
}

inline double db_loss(const GFlowNetModel& model, const Transition& t) {
  nn::ParameterSet& params = const_cast<nn::ParameterSet&>(model.parameters());
  nn::Tape tape(&params);
  const Transition one[] = {t};
  return detail::squared_scalar(detailed_balance_residuals(tape, model, one));
}

/// Edge s --a--> child with its backward slot looked up in the environment.
inline Transition make_transition(const DagEnvironment& env, StateId s, ActionId a) {
  const auto child = env.child_via(s, a);
  if (!child) throw InvalidEdge("action " + std::to_string(a) + " is not valid at " + env.describe(s));
  return {s, a, *child, *find_back_action(env, s, a, *child)};
}

inline double tb_loss(const GFlowNetModel& model, const Trajectory& t) {
  nn::ParameterSet& params = const_cast<nn::ParameterSet&>(model.parameters());
  nn::Tape tape(&params);
  const Trajectory one[] = {t};
  return detail::squared_scalar(trajectory_balance_residuals(tape, model, one));
}

inline double subtb_loss(const GFlowNetModel& model, const Trajectory& t, double lambda = 0.9) {
  nn::ParameterSet& params = const_cast<nn::ParameterSet&>(model.parameters());
  nn::Tape tape(&params);
  const Trajectory one[] = {t};
  return subtrajectory_balance_losses(tape, model, one, lambda).value()(0, 0);
}

/// F(s -> child via a) = exp(log F(s)) * A(a|s); masked actions carry zero flow.
inline double bn_edge_flow(const GFlowNetModel& model, StateId s, ActionId a) {
  detail::require_objective(model, {Objective::bn}, "bn_edge_flow");
  if (a >= model.env().num_actions()) throw InvalidEdge("action " + std::to_string(a) + " is outside the action menu");
  const StateId one[] = {s};
  const nn::Matrix policy = model.forward_policy(one);
  return std::exp(model.log_state_flow(s)) * policy(0, static_cast<Eigen::Index>(a));
}

// ---------------------------------------------------------------------------
// Batch objective

struct LossOptions {
  double subtb_lambda = 0.9;
  /// Deduplicate visited states (fm, bn) or transitions (db) within a batch.
  bool dedup = false;
};

/// Non-root states visited by the batch (with repetition unless deduplicated).
inline std::vector<StateId> visited_states(std::span<const Trajectory> batch, bool dedup) {
  std::vector<StateId> out;
  std::unordered_map<StateId, bool> seen;
  for (const auto& t : batch) {
    for (std::size_t i = 1; i < t.states.size(); ++i) {
      if (dedup && !seen.emplace(t.states[i], true).second) continue;
      out.push_back(t.states[i]);
    }
  }
  return out;
}

inline std::vector<Transition> visited_transitions(const DagEnvironment& env, std::span<const Trajectory> batch,
                                                   bool dedup) {
  std::vector<Transition> out;
  struct Key {
    StateId s;
    ActionId a;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const { return std::hash<StateId>()(k.s) * 31u + k.a; }
  };
  std::unordered_map<Key, bool, KeyHash> seen;
  for (const auto& t : batch) {
    const auto back = back_actions_of(env, t);
    for (std::size_t i = 0; i < t.actions.size(); ++i) {
      if (dedup && !seen.emplace(Key{t.states[i], t.actions[i]}, true).second) continue;
      out.push_back({t.states[i], t.actions[i], t.states[i + 1], back[i]});
    }
  }
  return out;
}

/// Mean loss over the batch: per visited non-root state (fm, bn), per visited
/// transition (db), or per trajectory (tb, subtb).
inline nn::Var batch_loss(nn::Tape& tape, const GFlowNetModel& model, std::span<const Trajectory> batch,
                          const LossOptions& opts = {}) {
  if (batch.empty()) throw IncompleteTrajectory("empty batch");
  switch (model.objective()) {
    case Objective::fm: {
      const auto states = visited_states(batch, opts.dedup);
      return detail::mean_of_squares(flow_matching_residuals(tape, model, states));
    }
    case Objective::bn: {
      const auto states = visited_states(batch, opts.dedup);
      return detail::mean_of_squares(bifurcated_residuals(tape, model, states));
    }
    case Objective::db: {
      const auto transitions = visited_transitions(model.env(), batch, opts.dedup);
      return detail::mean_of_squares(detailed_balance_residuals(tape, model, transitions));
    }
    case Objective::tb:
      return detail::mean_of_squares(trajectory_balance_residuals(tape, model, batch));
    case Objective::subtb: {
      const nn::Var per = subtrajectory_balance_losses(tape, model, batch, opts.subtb_lambda);
      return nn::scale(nn::sum(per), 1.0 / static_cast<double>(batch.size()));
    }
  }
  throw ConfigError("unknown objective");
}

}  // namespace bgfn
