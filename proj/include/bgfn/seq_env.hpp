#pragma once

// Prepend/append sequence-construction DAG with a synthetic motif reward.
//
// A string of length k over a vocabulary of size V has index
//   offset(k) + sum_i w[i] * V^(k-1-i),  offset(k) = sum_{j<k} V^j,
// so the empty string is s0 and strings are ordered by length.
// Actions 0 .. V-1 prepend token c, actions V .. 2V-1 append token c-V.
// The backward slot of an edge is the forward action that created it.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bgfn/dag_core.hpp"

namespace bgfn {

using Sequence = std::vector<std::size_t>;

struct SeqSpec {
  std::size_t vocab_size = 4;
  std::size_t length = 8;
  double reward_exponent = 3.0;
  std::vector<Sequence> motifs;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (length < 1) throw ConfigError("sequence length must be >= 1");
    if (!(reward_exponent > 0.0)) throw ConfigError("reward exponent must be positive");
    if (motifs.empty()) throw ConfigError("at least one motif is required");
    for (const auto& m : motifs) {
      if (m.empty()) throw ConfigError("motifs must be non-empty");
      for (std::size_t c : m) {
        if (c >= vocab_size) throw ConfigError("motif token outside the vocabulary");
      }
    }
  }
};

inline constexpr const char* kNucleobases = "ACGU";

/// Parses a string over "ACGU" (vocabulary of four) into token ids.
inline Sequence parse_nucleotides(const std::string& s) {
  Sequence out;
  for (char ch : s) {
    const std::string alphabet = kNucleobases;
    const auto pos = alphabet.find(ch);
    if (pos == std::string::npos) throw ConfigError(std::string("not a nucleobase: ") + ch);
    out.push_back(pos);
  }
  return out;
}

inline std::string format_sequence(const Sequence& s, std::size_t vocab_size) {
  std::string out;
  for (std::size_t c : s) {
    if (vocab_size <= 4) {
      out.push_back(kNucleobases[c]);
    } else {
      if (!out.empty()) out.push_back('.');
      out += std::to_string(c);
    }
  }
  return out;
}

/// Built-in motif sets standing in for four binding targets (synthetic).
inline std::vector<Sequence> builtin_motif_set(int which) {
  switch (which) {
    case 1: return {parse_nucleotides("ACGUAC"), parse_nucleotides("GGCAUU")};
    case 2: return {parse_nucleotides("UUAGCG"), parse_nucleotides("CAGUCA")};
    case 3: return {parse_nucleotides("GCGCAU"), parse_nucleotides("AUUACG")};
    case 4: return {parse_nucleotides("CCAUGG"), parse_nucleotides("UGACUA")};
    default: throw ConfigError("motif set must be 1..4");
  }
}

/// Smallest Hamming distance between the shorter of (x, motif) and any
/// aligned window of the longer one.
inline std::size_t min_window_hamming(std::span<const std::size_t> x, std::span<const std::size_t> motif) {
  const auto& longer = x.size() >= motif.size() ? x : motif;
  const auto& shorter = x.size() >= motif.size() ? motif : x;
  std::size_t best = shorter.size();
  for (std::size_t off = 0; off + shorter.size() <= longer.size(); ++off) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < shorter.size(); ++i) d += (longer[off + i] != shorter[i]);
    best = std::min(best, d);
  }
  return best;
}

/// max over motifs and windows of exp(-hamming), raised to the reward exponent,
/// clamped to the reward floor.
inline double seq_reward(std::span<const std::size_t> x, const SeqSpec& spec) {
  if (x.size() != spec.length) {
    throw LengthMismatch("expected length " + std::to_string(spec.length) + ", got " + std::to_string(x.size()));
  }
  std::size_t best = std::numeric_limits<std::size_t>::max();
  for (const auto& m : spec.motifs) best = std::min(best, min_window_hamming(x, m));
  const double base = std::exp(-static_cast<double>(best));
  return clamp_reward(std::pow(base, spec.reward_exponent));
}

/// E_{p*}[R] with p* = R/Z, i.e. sum R^2 / sum R.
inline double expected_reward_under_target(std::span<const double> rewards) {
  double num = 0.0;
  double den = 0.0;
  for (double r : rewards) {
    num += r * r;
    den += r;
  }
  return num / den;
}

class SequenceEnv final : public DagEnvironment {
 public:
  explicit SequenceEnv(SeqSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    offsets_.resize(spec_.length + 2, 0);
    std::size_t power = 1;
    for (std::size_t k = 0; k <= spec_.length; ++k) {
      offsets_[k + 1] = offsets_[k] + power;
      power *= spec_.vocab_size;
    }
    powers_.resize(spec_.length + 1);
    powers_[0] = 1;
    for (std::size_t k = 1; k <= spec_.length; ++k) powers_[k] = powers_[k - 1] * spec_.vocab_size;
  }

  const SeqSpec& spec() const { return spec_; }

  std::string name() const override {
    return "seq(V=" + std::to_string(spec_.vocab_size) + ",L=" + std::to_string(spec_.length) + ")";
  }
  std::size_t num_states() const override { return offsets_[spec_.length + 1]; }
  std::size_t num_actions() const override { return 2 * spec_.vocab_size; }
  std::size_t num_backward_actions() const override { return 2 * spec_.vocab_size; }
  std::size_t feature_dim() const override { return spec_.length * spec_.vocab_size + 1; }
  std::size_t max_trajectory_length() const override { return spec_.length; }

  std::size_t length_of(StateId s) const {
    if (s >= num_states()) throw OutOfRange("state " + std::to_string(s) + " outside the sequence DAG");
    std::size_t k = 0;
    while (s >= offsets_[k + 1]) ++k;
    return k;
  }

  Sequence decode(StateId s) const {
    const std::size_t k = length_of(s);
    std::size_t code = s - offsets_[k];
    Sequence w(k);
    for (std::size_t i = k; i-- > 0;) {
      w[i] = code % spec_.vocab_size;
      code /= spec_.vocab_size;
    }
    return w;
  }

  StateId index_of(std::span<const std::size_t> w) const {
    if (w.size() > spec_.length) throw OutOfRange("sequence longer than the target length");
    std::size_t code = 0;
    for (std::size_t c : w) {
      if (c >= spec_.vocab_size) throw OutOfRange("token outside the vocabulary");
      code = code * spec_.vocab_size + c;
    }
    return offsets_[w.size()] + code;
  }

  bool is_terminal(StateId s) const override { return s >= offsets_[spec_.length]; }

  void encode(StateId s, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
    const Sequence w = decode(s);
    for (std::size_t i = 0; i < w.size(); ++i) out[i * spec_.vocab_size + w[i]] = 1.0;
    out[spec_.length * spec_.vocab_size] = static_cast<double>(w.size()) / static_cast<double>(spec_.length);
  }

  std::vector<ChildEdge> children(StateId s) const override {
    std::vector<ChildEdge> out;
    const std::size_t k = length_of(s);
    if (k >= spec_.length) return out;
    const std::size_t code = s - offsets_[k];
    const std::size_t v = spec_.vocab_size;
    out.reserve(2 * v);
    for (std::size_t c = 0; c < v; ++c) out.push_back({c, offsets_[k + 1] + c * powers_[k] + code});
    for (std::size_t c = 0; c < v; ++c) out.push_back({v + c, offsets_[k + 1] + code * v + c});
    return out;
  }

  std::vector<ParentEdge> parents(StateId s) const override {
    const std::size_t k = length_of(s);
    if (k == 0) return {};
    const std::size_t code = s - offsets_[k];
    const std::size_t v = spec_.vocab_size;
    const std::size_t first = code / powers_[k - 1];
    const std::size_t last = code % v;
    const StateId drop_first = offsets_[k - 1] + code % powers_[k - 1];
    const StateId drop_last = offsets_[k - 1] + code / v;
    return {{drop_first, first, first}, {drop_last, v + last, v + last}};
  }

  double reward(StateId s) const override {
    if (!is_terminal(s)) return kRewardFloor;
    return seq_reward(decode(s), spec_);
  }

  std::string describe(StateId s) const override {
    const auto w = decode(s);
    return w.empty() ? std::string("<empty>") : format_sequence(w, spec_.vocab_size);
  }

  std::vector<StateId> terminal_states() const override {
    std::vector<StateId> out(powers_[spec_.length]);
    std::iota(out.begin(), out.end(), offsets_[spec_.length]);
    return out;
  }

  /// Terminals with reward at least half the maximum, each its own mode.
  ModeIndex mode_index() const override {
    if (powers_[spec_.length] > kDefaultEnumerationCap) throw TooLarge(name() + " terminal set is not enumerable");
    return DagEnvironment::mode_index();
  }

 private:
  SeqSpec spec_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> powers_;
};

/// E_{p*}[R] over every terminal string, by exhaustive enumeration.
inline double seq_accuracy_target(const SeqSpec& spec, std::size_t cap = kDefaultEnumerationCap) {
  const SequenceEnv env(spec);
  const auto terminals_count = env.num_states() - env.index_of(Sequence(spec.length, 0));
  if (terminals_count > cap) throw TooLarge("too many terminal strings to enumerate");
  std::vector<double> rewards;
  rewards.reserve(terminals_count);
  for (StateId x : env.terminal_states()) rewards.push_back(env.reward(x));
  return expected_reward_under_target(rewards);
}

}  // namespace bgfn
