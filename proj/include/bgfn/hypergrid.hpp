#pragma once

// d-dimensional HyperGrid with the standard corner-mode reward.
//
// State layout: positions are indices 0 .. H^d - 1 in mixed radix
// (coordinate i has weight H^i), the terminal twin of position p is p + H^d.
// Actions 0 .. d-1 increment one coordinate, action d stops.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bgfn/dag_core.hpp"

namespace bgfn {

struct GridSpec {
  std::size_t dims = 2;
  std::size_t horizon = 16;
  double r0 = 1e-6;

  void validate() const {
    if (dims < 1) throw ConfigError("grid dims must be >= 1");
    if (horizon < 2) throw ConfigError("grid horizon must be >= 2");
    if (!(r0 > 0.0)) throw ConfigError("grid r0 must be positive");
  }

  std::size_t num_positions() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < dims; ++i) n *= horizon;
    return n;
  }
};

using GridCoords = std::vector<std::size_t>;

/// 0.5 * prod 1(0.25 < |x_i/H - 0.5|) + 2 * prod 1(0.3 < |x_i/H - 0.5| < 0.4) + r0.
inline double grid_reward(const GridCoords& coords, const GridSpec& spec) {
  if (coords.size() != spec.dims) throw OutOfRange("coordinate count does not match grid dims");
  const double h = static_cast<double>(spec.horizon);
  bool outer = true;
  bool band = true;
  for (std::size_t x : coords) {
    if (x >= spec.horizon) throw OutOfRange("coordinate " + std::to_string(x) + " outside [0, H-1]");
    const double dev = std::abs(static_cast<double>(x) / h - 0.5);
    outer = outer && (0.25 < dev);
    band = band && (0.3 < dev && dev < 0.4);
  }
  return 0.5 * (outer ? 1.0 : 0.0) + 2.0 * (band ? 1.0 : 0.0) + spec.r0;
}

inline std::size_t grid_position_index(const GridCoords& coords, const GridSpec& spec) {
  std::size_t idx = 0;
  std::size_t weight = 1;
  for (std::size_t i = 0; i < spec.dims; ++i) {
    idx += coords[i] * weight;
    weight *= spec.horizon;
  }
  return idx;
}

inline GridCoords grid_coords_of(std::size_t position, const GridSpec& spec) {
  GridCoords c(spec.dims);
  for (std::size_t i = 0; i < spec.dims; ++i) {
    c[i] = position % spec.horizon;
    position /= spec.horizon;
  }
  return c;
}

/// Connected components (under axis adjacency) of the high-reward band.
struct GridModes {
  std::vector<std::vector<std::size_t>> clusters;  // position indices per cluster
  std::vector<long> cluster_of;                     // per position, -1 outside the band

  std::size_t size() const { return clusters.size(); }
  bool contains(const GridCoords& c, const GridSpec& spec) const {
    return cluster_of[grid_position_index(c, spec)] >= 0;
  }
};

inline bool in_mode_band(const GridCoords& coords, const GridSpec& spec) {
  const double h = static_cast<double>(spec.horizon);
  for (std::size_t x : coords) {
    const double dev = std::abs(static_cast<double>(x) / h - 0.5);
    if (!(0.3 < dev && dev < 0.4)) return false;
  }
  return true;
}

inline GridModes grid_modes(const GridSpec& spec) {
  spec.validate();
  const std::size_t n = spec.num_positions();
  GridModes out;
  out.cluster_of.assign(n, -1);
  std::vector<bool> band(n);
  for (std::size_t p = 0; p < n; ++p) band[p] = in_mode_band(grid_coords_of(p, spec), spec);

  for (std::size_t p = 0; p < n; ++p) {
    if (!band[p] || out.cluster_of[p] >= 0) continue;
    const long id = static_cast<long>(out.clusters.size());
    out.clusters.emplace_back();
    std::vector<std::size_t> stack{p};
    out.cluster_of[p] = id;
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      out.clusters.back().push_back(q);
      const GridCoords c = grid_coords_of(q, spec);
      std::size_t weight = 1;
      for (std::size_t i = 0; i < spec.dims; ++i, weight *= spec.horizon) {
        if (c[i] > 0 && band[q - weight] && out.cluster_of[q - weight] < 0) {
          out.cluster_of[q - weight] = id;
          stack.push_back(q - weight);
        }
        if (c[i] + 1 < spec.horizon && band[q + weight] && out.cluster_of[q + weight] < 0) {
          out.cluster_of[q + weight] = id;
          stack.push_back(q + weight);
        }
      }
    }
  }
  return out;
}

class HyperGrid final : public DagEnvironment {
 public:
  explicit HyperGrid(GridSpec spec) : spec_(spec) {
    spec_.validate();
    positions_ = spec_.num_positions();
    weights_.resize(spec_.dims);
    std::size_t w = 1;
    for (std::size_t i = 0; i < spec_.dims; ++i, w *= spec_.horizon) weights_[i] = w;
  }

  const GridSpec& spec() const { return spec_; }
  std::size_t num_positions() const { return positions_; }
  ActionId stop_action() const { return spec_.dims; }

  std::string name() const override {
    return "hypergrid(d=" + std::to_string(spec_.dims) + ",H=" + std::to_string(spec_.horizon) + ")";
  }
  std::size_t num_states() const override { return 2 * positions_; }
  std::size_t num_actions() const override { return spec_.dims + 1; }
  std::size_t num_backward_actions() const override { return spec_.dims + 1; }
  std::size_t feature_dim() const override { return spec_.dims * spec_.horizon + 1; }
  std::size_t max_trajectory_length() const override { return spec_.dims * (spec_.horizon - 1) + 1; }

  bool is_terminal(StateId s) const override { return s >= positions_; }
  std::size_t position_of(StateId s) const { return is_terminal(s) ? s - positions_ : s; }
  StateId terminal_twin(std::size_t position) const { return position + positions_; }
  GridCoords coords(StateId s) const { return grid_coords_of(position_of(s), spec_); }

  void encode(StateId s, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
    std::size_t p = position_of(s);
    for (std::size_t i = 0; i < spec_.dims; ++i) {
      out[i * spec_.horizon + p % spec_.horizon] = 1.0;
      p /= spec_.horizon;
    }
    out[spec_.dims * spec_.horizon] = is_terminal(s) ? 1.0 : 0.0;
  }

  std::vector<ChildEdge> children(StateId s) const override {
    std::vector<ChildEdge> out;
    if (is_terminal(s)) return out;
    std::size_t p = s;
    for (std::size_t i = 0; i < spec_.dims; ++i) {
      if (p % spec_.horizon + 1 < spec_.horizon) out.push_back({i, s + weights_[i]});
      p /= spec_.horizon;
    }
    out.push_back({stop_action(), terminal_twin(s)});
    return out;
  }

  std::vector<ParentEdge> parents(StateId s) const override {
    if (is_terminal(s)) return {{position_of(s), stop_action(), stop_action()}};
    std::vector<ParentEdge> out;
    std::size_t p = s;
    for (std::size_t i = 0; i < spec_.dims; ++i) {
      if (p % spec_.horizon > 0) out.push_back({s - weights_[i], i, i});
      p /= spec_.horizon;
    }
    return out;
  }

  double reward(StateId s) const override { return clamp_reward(grid_reward(coords(s), spec_)); }

  std::string describe(StateId s) const override {
    std::string out = "(";
    const auto c = coords(s);
    for (std::size_t i = 0; i < c.size(); ++i) out += (i ? "," : "") + std::to_string(c[i]);
    return out + (is_terminal(s) ? ")T" : ")");
  }

  std::vector<StateId> terminal_states() const override {
    std::vector<StateId> out(positions_);
    for (std::size_t p = 0; p < positions_; ++p) out[p] = terminal_twin(p);
    return out;
  }

  /// Modes are the 2^d band clusters; a terminal twin belongs to the cluster of its position.
  ModeIndex mode_index() const override {
    const GridModes modes = grid_modes(spec_);
    ModeIndex idx;
    idx.num_modes = modes.size();
    for (std::size_t p = 0; p < positions_; ++p) {
      if (modes.cluster_of[p] >= 0) idx.mode_of.emplace(terminal_twin(p), static_cast<std::size_t>(modes.cluster_of[p]));
    }
    return idx;
  }

 private:
  GridSpec spec_;
  std::size_t positions_ = 0;
  std::vector<std::size_t> weights_;
};

}  // namespace bgfn
