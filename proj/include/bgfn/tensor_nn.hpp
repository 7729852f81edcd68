#pragma once

// Minimal dense-network kernel: a reverse-mode tape over matrix-valued nodes,
// feed-forward layers, masked log-softmax and the Adam update rule.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <nlohmann/json.hpp>

#include "bgfn/errors.hpp"

namespace bgfn::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
/// Row-per-sample validity mask; `true` marks a valid entry.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// ---------------------------------------------------------------------------
// Parameters

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Owns every trainable tensor of a model together with its gradient buffer.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value) {
    Matrix grad = Matrix::Zero(value.rows(), value.cols());
    params_.push_back({std::move(name), std::move(value), std::move(grad)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  bool grads_finite() const {
    for (const auto& p : params_) {
      if (!p.grad.allFinite()) return false;
    }
    return true;
  }

 private:
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records matrix operations in creation order and replays them backwards.
/// Parameter leaves accumulate their gradient into the bound ParameterSet.
class Tape {
 public:
  /// Receives the gradient of the node's output and pushes it to its inputs.
  using Backprop = std::function<void(const Matrix& out_grad, Tape& tape)>;

  explicit Tape(ParameterSet* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ParameterSet* parameters() const { return params_; }

  Var constant(Matrix value) { return push(std::move(value), false, nullptr, -1); }

  Var parameter(std::size_t index) {
    if (params_ == nullptr) throw NoTape("tape has no parameter set bound");
    return push((*params_)[index].value, true, nullptr, static_cast<long>(index));
  }

  /// Records an op node; `backprop` runs only when some input requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backprop) : nullptr, -1);
  }

  Var record(Matrix value, const std::vector<Var>& inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backprop) : nullptr, -1);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `delta` into the gradient of `v` (no-op for constants).
  template <typename Derived>
  void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// Back-propagates from a 1x1 node and accumulates parameter gradients.
  void backward(const Var& loss) {
    if (loss.tape() != this) throw NoTape("loss was not produced on this tape");
    const Matrix& lv = nodes_[loss.id()].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw ShapeMismatch("backward needs a scalar loss, got " + shape_of(lv));
    if (!nodes_[loss.id()].requires_grad) return;
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backprop) n.backprop(n.grad, *this);
      if (n.param >= 0) (*params_)[static_cast<std::size_t>(n.param)].grad += n.grad;
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backprop backprop;
    long param = -1;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop, long param) {
    nodes_.push_back({std::move(value), Matrix(), requires_grad, std::move(backprop), param});
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(const Var& v) const {
    if (v.tape() != this) throw NoTape("variable belongs to a different tape");
  }

  ParameterSet* params_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const {
  if (tape_ == nullptr) throw NoTape("variable is not attached to a tape");
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul " + shape_of(a.value()) + " * " + shape_of(b.value()));
  Tape& t = *a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](const Matrix& g, Tape& tape) {
    if (tape.requires_grad(a)) tape.accumulate(a, g * b.value().transpose());
    if (tape.requires_grad(b)) tape.accumulate(b, a.value().transpose() * g);
  });
}

/// x + bias, with a 1 x n bias broadcast over rows.
inline Var add_bias(const Var& x, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeMismatch("bias " + shape_of(bias.value()) + " for input " + shape_of(x.value()));
  }
  Tape& t = *x.tape();
  Matrix out = x.value();
  out.rowwise() += bias.value().row(0);
  return t.record(std::move(out), {x, bias}, [x, bias](const Matrix& g, Tape& tape) {
    tape.accumulate(x, g);
    if (tape.requires_grad(bias)) tape.accumulate(bias, g.colwise().sum());
  });
}

inline Var leaky_relu(const Var& x, double slope) {
  Tape& t = *x.tape();
  Matrix out = x.value().unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  return t.record(std::move(out), {x}, [x, slope](const Matrix& g, Tape& tape) {
    const Matrix d = x.value().unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
    tape.accumulate(x, g.cwiseProduct(d));
  });
}

inline Var relu(const Var& x) { return leaky_relu(x, 0.0); }

inline Var add(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch("add " + shape_of(a.value()) + " + " + shape_of(b.value()));
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g, Tape& tape) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch("sub " + shape_of(a.value()) + " - " + shape_of(b.value()));
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g, Tape& tape) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

inline Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ShapeMismatch("column slice out of range");
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  return x.tape()->record(x.value().middleCols(start, count), {x},
                          [x, start, count, rows, cols](const Matrix& g, Tape& tape) {
                            Matrix full = Matrix::Zero(rows, cols);
                            full.middleCols(start, count) = g;
                            tape.accumulate(x, full);
                          });
}

/// Selects rows of `x` (repetition allowed).
inline Var gather_rows(const Var& x, std::vector<Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw ShapeMismatch("row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(rows[i]);
  }
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  return x.tape()->record(std::move(out), {x}, [x, rows = std::move(rows), r, c](const Matrix& g, Tape& tape) {
    Matrix full = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < rows.size(); ++i) full.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    tape.accumulate(x, full);
  });
}

struct Entry {
  Eigen::Index row;
  Eigen::Index col;
};

/// Column vector of the selected entries.
inline Var gather(const Var& x, std::vector<Entry> entries) {
  Matrix out(static_cast<Eigen::Index>(entries.size()), 1);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.row < 0 || e.row >= x.rows() || e.col < 0 || e.col >= x.cols()) throw ShapeMismatch("gather index out of range");
    out(static_cast<Eigen::Index>(i), 0) = x.value()(e.row, e.col);
  }
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  return x.tape()->record(std::move(out), {x}, [x, entries = std::move(entries), r, c](const Matrix& g, Tape& tape) {
    Matrix full = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < entries.size(); ++i) full(entries[i].row, entries[i].col) += g(static_cast<Eigen::Index>(i), 0);
    tape.accumulate(x, full);
  });
}

/// Stacks column vectors.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    if (p.cols() != 1) throw ShapeMismatch("concat_rows expects column vectors");
    total += p.rows();
  }
  Matrix out(total, 1);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape()->record(std::move(out), parts, [parts](const Matrix& g, Tape& tape) {
    Eigen::Index at = 0;
    for (const Var& p : parts) {
      tape.accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

/// Log-sum-exp over consecutive segments of a column vector.
/// `offsets` has one more entry than there are segments; an empty segment yields -inf.
inline Var segment_logsumexp(const Var& v, std::vector<Eigen::Index> offsets) {
  if (v.cols() != 1) throw ShapeMismatch("segment_logsumexp expects a column vector");
  if (offsets.empty() || offsets.back() != v.rows()) throw ShapeMismatch("segment offsets do not cover the input");
  const Eigen::Index k = static_cast<Eigen::Index>(offsets.size()) - 1;
  const Matrix& x = v.value();
  Matrix out(k, 1);
  for (Eigen::Index s = 0; s < k; ++s) {
    const Eigen::Index lo = offsets[s];
    const Eigen::Index hi = offsets[s + 1];
    if (hi <= lo) {
      out(s, 0) = kNegInf;
      continue;
    }
    const double m = x.middleRows(lo, hi - lo).maxCoeff();
    if (!std::isfinite(m)) {
      out(s, 0) = m;
      continue;
    }
    out(s, 0) = m + std::log((x.middleRows(lo, hi - lo).array() - m).exp().sum());
  }
  Matrix result = out;
  return v.tape()->record(std::move(result), {v}, [v, offsets = std::move(offsets), out](const Matrix& g, Tape& tape) {
    const Matrix& x = v.value();
    Matrix d = Matrix::Zero(x.rows(), 1);
    for (Eigen::Index s = 0; s + 1 < static_cast<Eigen::Index>(offsets.size()); ++s) {
      if (!std::isfinite(out(s, 0))) continue;
      for (Eigen::Index i = offsets[s]; i < offsets[s + 1]; ++i) d(i, 0) = g(s, 0) * std::exp(x(i, 0) - out(s, 0));
    }
    tape.accumulate(v, d);
  });
}

/// S * v + c for a sparse coefficient matrix S and constant offsets c.
inline Var affine(const Var& v, SparseRows coeffs, Vector offsets) {
  if (v.cols() != 1 || coeffs.cols() != v.rows() || offsets.size() != coeffs.rows()) {
    throw ShapeMismatch("affine map does not match input " + shape_of(v.value()));
  }
  Matrix out = coeffs * v.value();
  out.col(0) += offsets;
  return v.tape()->record(std::move(out), {v}, [v, coeffs = std::move(coeffs)](const Matrix& g, Tape& tape) {
    tape.accumulate(v, Matrix(coeffs.transpose() * g));
  });
}

/// sum_k w_k * v_k^2 as a 1x1 node.
inline Var weighted_square_sum(const Var& v, Vector weights) {
  if (v.cols() != 1 || weights.size() != v.rows()) throw ShapeMismatch("weights do not match input");
  Matrix out(1, 1);
  out(0, 0) = (weights.array() * v.value().col(0).array().square()).sum();
  return v.tape()->record(std::move(out), {v}, [v, weights = std::move(weights)](const Matrix& g, Tape& tape) {
    Matrix d = 2.0 * g(0, 0) * (weights.array() * v.value().col(0).array()).matrix();
    tape.accumulate(v, d);
  });
}

inline Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  return x.tape()->record(std::move(out), {x}, [x, r, c](const Matrix& g, Tape& tape) {
    tape.accumulate(x, Matrix::Constant(r, c, g(0, 0)));
  });
}

inline Var scale(const Var& x, double factor) {
  return x.tape()->record(x.value() * factor, {x}, [x, factor](const Matrix& g, Tape& tape) {
    tape.accumulate(x, g * factor);
  });
}

/// Row-wise log-softmax over valid entries; invalid entries become -inf.
/// Rows without any valid entry are all -inf (terminal rows in a batch).
inline Matrix masked_log_softmax_rows(const Matrix& logits, const Mask& mask) {
  if (mask.rows() != logits.rows() || mask.cols() != logits.cols()) {
    throw ShapeMismatch("mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) + " for logits " +
                        shape_of(logits));
  }
  Matrix out = Matrix::Constant(logits.rows(), logits.cols(), kNegInf);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double m = kNegInf;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (mask(r, c)) m = std::max(m, logits(r, c));
    }
    if (m == kNegInf) continue;
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (mask(r, c)) z += std::exp(logits(r, c) - m);
    }
    const double lse = m + std::log(z);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (mask(r, c)) out(r, c) = logits(r, c) - lse;
    }
  }
  return out;
}

/// Elementwise std::exp. Eigen's packet exp clamps its input, which turns
/// exp(-inf) into a denormal instead of 0 on masked entries.
inline Matrix exact_exp(const Matrix& x) {
  return x.unaryExpr([](double v) { return std::exp(v); });
}

inline Var masked_log_softmax(const Var& logits, Mask mask) {
  Matrix out = masked_log_softmax_rows(logits.value(), mask);
  Matrix probs = exact_exp(out);
  return logits.tape()->record(std::move(out), {logits},
                               [logits, mask = std::move(mask), probs = std::move(probs)](const Matrix& g, Tape& tape) {
                                 Matrix gv = mask.cast<double>().matrix().cwiseProduct(g);
                                 const Vector row_sums = gv.rowwise().sum();
                                 Matrix d = gv - (probs.array().colwise() * row_sums.array()).matrix();
                                 tape.accumulate(logits, d);
                               });
}

/// Log-probabilities over the valid entries of a single logit vector.
inline std::vector<double> masked_log_softmax(std::span<const double> logits, const std::vector<bool>& valid) {
  if (logits.size() != valid.size()) throw ShapeMismatch("mask length does not match logits");
  Matrix l(1, static_cast<Eigen::Index>(logits.size()));
  Mask m(1, static_cast<Eigen::Index>(logits.size()));
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    l(0, static_cast<Eigen::Index>(i)) = logits[i];
    m(0, static_cast<Eigen::Index>(i)) = valid[i];
    any = any || valid[i];
  }
  if (!any) throw AllMasked("every entry is masked");
  const Matrix out = masked_log_softmax_rows(l, m);
  return std::vector<double>(out.data(), out.data() + out.size());
}

// ---------------------------------------------------------------------------
// Dense layers

enum class Activation { identity, relu, leaky_relu };

inline constexpr double kLeakySlope = 0.01;

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "leaky-relu" || s == "leaky_relu") return Activation::leaky_relu;
  if (s == "identity" || s == "linear") return Activation::identity;
  throw ConfigError("unknown activation: " + s);
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky-relu";
  }
  return "identity";
}

inline Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, kLeakySlope);
  }
  return x;
}

inline void activate_inplace(Matrix& x, Activation a) {
  switch (a) {
    case Activation::identity: return;
    case Activation::relu: x = x.cwiseMax(0.0); return;
    case Activation::leaky_relu: x = x.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; }); return;
  }
}

/// Weights and biases drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

struct DenseLayer {
  std::size_t weight;  // index into the ParameterSet, in x out
  std::size_t bias;    // 1 x out
  std::size_t in;
  std::size_t out;
  Activation activation;
};

/// Feed-forward stack. widths = {input, hidden..., output}; hidden layers use
/// `hidden` activation, the last layer uses `output`.
class DenseNet {
 public:
  DenseNet() = default;

  DenseNet(ParameterSet& params, const std::vector<std::size_t>& widths, Activation hidden, Activation output,
           std::mt19937_64& rng, const std::string& prefix = "net") {
    if (widths.size() < 2) throw ShapeMismatch("a dense net needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const auto in = widths[i];
      const auto out = widths[i + 1];
      if (in == 0 || out == 0) throw ShapeMismatch("layer widths must be positive");
      DenseLayer layer;
      layer.in = in;
      layer.out = out;
      layer.weight = params.add(prefix + "." + std::to_string(i) + ".weight",
                                uniform_init(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), in, rng));
      layer.bias = params.add(prefix + "." + std::to_string(i) + ".bias", uniform_init(1, static_cast<Eigen::Index>(out), in, rng));
      layer.activation = (i + 2 == widths.size()) ? output : hidden;
      layers_.push_back(layer);
    }
  }

  std::size_t input_width() const { return layers_.front().in; }
  std::size_t output_width() const { return layers_.back().out; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Var forward(Tape& tape, const Var& x) const {
    if (x.cols() != static_cast<Eigen::Index>(input_width())) {
      throw ShapeMismatch("input width " + std::to_string(x.cols()) + ", net expects " + std::to_string(input_width()));
    }
    Var h = x;
    for (const auto& layer : layers_) {
      h = add_bias(matmul(h, tape.parameter(layer.weight)), tape.parameter(layer.bias));
      h = activate(h, layer.activation);
    }
    return h;
  }

  Matrix forward(const ParameterSet& params, const Matrix& x) const {
    if (x.cols() != static_cast<Eigen::Index>(input_width())) {
      throw ShapeMismatch("input width " + std::to_string(x.cols()) + ", net expects " + std::to_string(input_width()));
    }
    Matrix h = x;
    for (const auto& layer : layers_) {
      Matrix next = h * params[layer.weight].value;
      next.rowwise() += params[layer.bias].value.row(0);
      activate_inplace(next, layer.activation);
      h = std::move(next);
    }
    return h;
  }

 private:
  std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators shaped like the parameters they track.
struct AdamState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  AdamState() = default;
  AdamState(const ParameterSet& params, AdamOptions opts) : options(opts) {
    for (const auto& p : params) {
      m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }
};

/// One bias-corrected Adam update of every parameter from its gradient buffer.
inline void adam_step(AdamState& state, ParameterSet& params) {
  if (state.m.size() != params.size()) throw ShapeMismatch("optimizer state tracks a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() || state.m[i].rows() != p.value.rows() ||
        state.m[i].cols() != p.value.cols()) {
      throw ShapeMismatch("shape mismatch for parameter " + p.name);
    }
  }
  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    state.m[i] = o.beta1 * state.m[i] + (1.0 - o.beta1) * p.grad;
    state.v[i] = o.beta2 * state.v[i] + (1.0 - o.beta2) * p.grad.cwiseProduct(p.grad);
    const auto m_hat = state.m[i].array() / c1;
    const auto v_hat = state.v[i].array() / c2;
    p.value.array() -= o.learning_rate * m_hat / (v_hat.sqrt() + o.eps);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// {"format": "bgfn-params", "version": 1, "parameters": [{"name", "rows", "cols", "data"}]}
/// with `data` in row-major order.
inline nlohmann::json parameters_to_json(const ParameterSet& params) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : params) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) data.push_back(p.value(r, c));
    }
    list.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"data", data}});
  }
  return {{"format", "bgfn-params"}, {"version", 1}, {"parameters", list}};
}

/// Loads values into an existing parameter set; names and shapes must match.
inline void parameters_from_json(ParameterSet& params, const nlohmann::json& j) {
  if (j.value("format", std::string()) != "bgfn-params") throw ConfigError("not a parameter checkpoint");
  const auto& list = j.at("parameters");
  if (list.size() != params.size()) throw ShapeMismatch("checkpoint holds a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = list[i];
    auto& p = params[i];
    const auto rows = e.at("rows").get<Eigen::Index>();
    const auto cols = e.at("cols").get<Eigen::Index>();
    if (e.at("name").get<std::string>() != p.name || rows != p.value.rows() || cols != p.value.cols()) {
      throw ShapeMismatch("checkpoint entry " + std::to_string(i) + " does not match parameter " + p.name);
    }
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ShapeMismatch("checkpoint data length mismatch");
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) p.value(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    }
  }
}

inline void save_parameters(const ParameterSet& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << parameters_to_json(params).dump() << "\n";
}

inline void load_parameters(ParameterSet& params, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  parameters_from_json(params, j);
}

}  // namespace bgfn::nn
