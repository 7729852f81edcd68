#pragma once

// Experiment runner: flat key-value configuration, presets, the training
// loop with periodic evaluation, sweeps and the convergence certificate.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bgfn/dag_core.hpp"
#include "bgfn/hypergrid.hpp"
#include "bgfn/objectives.hpp"
#include "bgfn/rollout_metrics.hpp"
#include "bgfn/seq_env.hpp"
#include "bgfn/tensor_nn.hpp"

namespace bgfn {

inline constexpr const char* kCsvSchema = "bgfn-metrics/1";
inline constexpr const char* kCsvHeader =
    "step,wall_ms,loss,l1_exact,l1_empirical,modes_windowed,modes_cumulative,accuracy,topk";

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  std::string preset = "custom";
  // environment
  std::string env = "grid";  // grid | seq | dag-small | dag-large | dag-motivating | file
  std::string env_file;
  std::size_t dims = 2;
  std::size_t horizon = 16;
  std::size_t length = 8;
  std::size_t vocab = 4;
  int motif_set = 1;
  double reward_exponent = 3.0;
  // model
  Objective objective = Objective::bn;
  Parameterization parameterization = Parameterization::neural;
  std::size_t hidden_layers = 2;
  std::size_t hidden_width = 256;
  nn::Activation activation = nn::Activation::leaky_relu;
  bool uniform_backward = false;
  // training
  double learning_rate = 1e-3;
  double log_z_learning_rate = 0.1;
  std::size_t batch_size = 16;
  std::size_t iterations = 20000;
  double epsilon = 0.0;
  double subtb_lambda = 0.9;
  bool dedup = false;
  // evaluation and output
  std::size_t eval_interval = 100;
  std::uint64_t seed = 0;
  std::size_t l1_window = 200000;
  std::size_t mode_window = 1024;
  std::size_t topk = 100;
  bool record_wall_time = false;
  std::string output;

  /// Applies one `key = value` assignment; unknown keys are rejected.
  void set(const std::string& key, const std::string& value) {
    auto as_size = [&](std::size_t& dst) { dst = parse_size(key, value); };
    auto as_double = [&](double& dst) { dst = parse_double(key, value); };
    auto as_bool = [&](bool& dst) {
      if (value == "true" || value == "1" || value == "yes") {
        dst = true;
      } else if (value == "false" || value == "0" || value == "no") {
        dst = false;
      } else {
        throw ConfigError(key + ": expected a boolean, got '" + value + "'");
      }
    };
    if (key == "preset") preset = value;
    else if (key == "env") env = value;
    else if (key == "env_file") env_file = value;
    else if (key == "dims") as_size(dims);
    else if (key == "horizon") as_size(horizon);
    else if (key == "length") as_size(length);
    else if (key == "vocab") as_size(vocab);
    else if (key == "motif_set") motif_set = static_cast<int>(parse_size(key, value));
    else if (key == "reward_exponent") as_double(reward_exponent);
    else if (key == "objective") objective = parse_objective(value);
    else if (key == "parameterization") parameterization = parse_parameterization(value);
    else if (key == "hidden_layers") hidden_layers = parse_size(key, value, true);
    else if (key == "hidden_width") as_size(hidden_width);
    else if (key == "activation") activation = nn::parse_activation(value);
    else if (key == "uniform_backward") as_bool(uniform_backward);
    else if (key == "learning_rate") as_double(learning_rate);
    else if (key == "log_z_learning_rate") as_double(log_z_learning_rate);
    else if (key == "batch_size") as_size(batch_size);
    else if (key == "iterations") iterations = parse_size(key, value, true);
    else if (key == "epsilon") epsilon = parse_double(key, value, true);
    else if (key == "subtb_lambda") as_double(subtb_lambda);
    else if (key == "dedup") as_bool(dedup);
    else if (key == "eval_interval") as_size(eval_interval);
    else if (key == "seed") seed = parse_size(key, value, true);
    else if (key == "l1_window") as_size(l1_window);
    else if (key == "mode_window") as_size(mode_window);
    else if (key == "topk") as_size(topk);
    else if (key == "record_wall_time") as_bool(record_wall_time);
    else if (key == "output") output = value;
    else throw ConfigError("unknown configuration key: " + key);
  }

  void validate() const {
    static const char* envs[] = {"grid", "seq", "dag-small", "dag-large", "dag-motivating", "file"};
    if (std::find(std::begin(envs), std::end(envs), env) == std::end(envs)) throw ConfigError("unknown env: " + env);
    if (env == "file" && env_file.empty()) throw ConfigError("env = file needs env_file");
    if (motif_set < 1 || motif_set > 4) throw ConfigError("motif_set must be 1..4");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    if (parameterization == Parameterization::neural && hidden_layers > 0 && hidden_width == 0) {
      throw ConfigError("hidden_width must be positive");
    }
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.objective = objective;
    m.parameterization = parameterization;
    m.hidden.assign(hidden_layers, hidden_width);
    m.activation = activation;
    m.uniform_backward = uniform_backward;
    m.seed = seed;
    return m;
  }

  std::string to_text() const {
    std::ostringstream o;
    o << std::setprecision(17);
    o << "preset = " << preset << "\n"
      << "env = " << env << "\n";
    if (!env_file.empty()) o << "env_file = " << env_file << "\n";
    o << "dims = " << dims << "\n"
      << "horizon = " << horizon << "\n"
      << "length = " << length << "\n"
      << "vocab = " << vocab << "\n"
      << "motif_set = " << motif_set << "\n"
      << "reward_exponent = " << reward_exponent << "\n"
      << "objective = " << to_string(objective) << "\n"
      << "parameterization = " << to_string(parameterization) << "\n"
      << "hidden_layers = " << hidden_layers << "\n"
      << "hidden_width = " << hidden_width << "\n"
      << "activation = " << nn::to_string(activation) << "\n"
      << "uniform_backward = " << (uniform_backward ? "true" : "false") << "\n"
      << "learning_rate = " << learning_rate << "\n"
      << "log_z_learning_rate = " << log_z_learning_rate << "\n"
      << "batch_size = " << batch_size << "\n"
      << "iterations = " << iterations << "\n"
      << "epsilon = " << epsilon << "\n"
      << "subtb_lambda = " << subtb_lambda << "\n"
      << "dedup = " << (dedup ? "true" : "false") << "\n"
      << "eval_interval = " << eval_interval << "\n"
      << "seed = " << seed << "\n"
      << "l1_window = " << l1_window << "\n"
      << "mode_window = " << mode_window << "\n"
      << "topk = " << topk << "\n"
      << "record_wall_time = " << (record_wall_time ? "true" : "false") << "\n";
    if (!output.empty()) o << "output = " << output << "\n";
    return o.str();
  }

 private:
  static std::size_t parse_size(const std::string& key, const std::string& v, bool allow_zero = false) {
    std::size_t pos = 0;
    long long x = 0;
    try {
      x = std::stoll(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    if (x < 0 || (x == 0 && !allow_zero)) throw ConfigError(key + " must be positive");
    return static_cast<std::size_t>(x);
  }

  static double parse_double(const std::string& key, const std::string& v, bool allow_zero = false) {
    std::size_t pos = 0;
    double x = 0;
    try {
      x = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(x)) throw ConfigError(key + ": expected a number, got '" + v + "'");
    if (x < 0.0 || (x == 0.0 && !allow_zero)) throw ConfigError(key + " must be positive");
    return x;
  }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline const std::vector<std::string>& preset_names();
inline ExperimentConfig preset(const std::string& name);

/// Applies every `key = value` line of `text` on top of `base`. `#` starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    // Naming a known preset loads its values; later lines override them.
    if (key == "preset" && std::find(preset_names().begin(), preset_names().end(), value) != preset_names().end()) {
      base = preset(value);
    } else {
      base.set(key, value);
    }
  }
  base.validate();
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"grid-small", "grid-medium", "grid-large", "dag-small", "dag-large",
                                              "seq-rna1",   "seq-rna2",    "seq-rna3",   "seq-rna4"};
  return names;
}

inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  if (name == "grid-small" || name == "grid-medium" || name == "grid-large") {
    c.env = "grid";
    c.dims = name == "grid-small" ? 2 : (name == "grid-medium" ? 3 : 4);
    c.horizon = 16;
    c.parameterization = Parameterization::neural;
    c.hidden_layers = 2;
    c.hidden_width = 256;
    c.activation = nn::Activation::leaky_relu;
    c.learning_rate = 1e-3;
    c.batch_size = 16;
    c.iterations = 20000;
    c.epsilon = 0.05;
    c.l1_window = 200000;
    return c;
  }
  if (name.rfind("seq-rna", 0) == 0 && name.size() == 8 && name[7] >= '1' && name[7] <= '4') {
    c.env = "seq";
    c.motif_set = name[7] - '0';
    c.vocab = 4;
    c.length = 8;
    c.reward_exponent = 3.0;
    c.parameterization = Parameterization::neural;
    c.hidden_layers = 2;
    c.hidden_width = 2048;
    c.activation = nn::Activation::relu;
    c.learning_rate = 1e-4;
    c.batch_size = 32;
    c.iterations = 5000;
    c.epsilon = 0.001;
    c.l1_window = 200000;
    return c;
  }
  if (name == "dag-small" || name == "dag-large") {
    c.env = name;
    c.parameterization = Parameterization::tabular;
    c.learning_rate = 0.01;
    c.batch_size = 16;
    c.iterations = 5000;
    c.epsilon = 0.05;
    c.eval_interval = 50;
    return c;
  }
  throw UnknownPreset("unknown preset: " + name);
}

inline std::shared_ptr<const DagEnvironment> make_environment(const ExperimentConfig& c) {
  if (c.env == "grid") return std::make_shared<HyperGrid>(GridSpec{c.dims, c.horizon, 1e-6});
  if (c.env == "seq") {
    SeqSpec s;
    s.vocab_size = c.vocab;
    s.length = c.length;
    s.reward_exponent = c.reward_exponent;
    s.motifs = builtin_motif_set(c.motif_set);
    return std::make_shared<SequenceEnv>(std::move(s));
  }
  if (c.env == "dag-small") return std::make_shared<TabularDag>(build_didactic_dag(DidacticSize::small));
  if (c.env == "dag-large") return std::make_shared<TabularDag>(build_didactic_dag(DidacticSize::large));
  if (c.env == "dag-motivating") return std::make_shared<TabularDag>(build_motivating_dag());
  if (c.env == "file") return std::make_shared<TabularDag>(load_tabular_dag(c.env_file));
  throw ConfigError("unknown env: " + c.env);
}

// ---------------------------------------------------------------------------
// Training

struct MetricRow {
  std::size_t step = 0;
  double wall_ms = 0.0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double l1_exact = std::numeric_limits<double>::quiet_NaN();
  double l1_empirical = std::numeric_limits<double>::quiet_NaN();
  std::size_t modes_windowed = 0;
  std::size_t modes_cumulative = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double topk = std::numeric_limits<double>::quiet_NaN();
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream o;
  o << std::setprecision(10) << v;
  return o.str();
}

inline std::string to_csv(const MetricRow& r) {
  std::ostringstream o;
  o << r.step << ',' << format_number(r.wall_ms) << ',' << format_number(r.loss) << ',' << format_number(r.l1_exact)
    << ',' << format_number(r.l1_empirical) << ',' << r.modes_windowed << ',' << r.modes_cumulative << ','
    << format_number(r.accuracy) << ',' << format_number(r.topk);
  return o.str();
}

/// One training run: sampling with exploration, objective loss, Adam update,
/// and metric evaluation on demand.
class Trainer {
 public:
  explicit Trainer(ExperimentConfig config) : Trainer(config, make_environment(config)) {}

  Trainer(ExperimentConfig config, std::shared_ptr<const DagEnvironment> env)
      : config_(std::move(config)),
        env_(std::move(env)),
        model_(env_, config_.model_config()),
        rng_(config_.seed * 0x9E3779B97F4A7C15ULL + 1),
        window_(config_.l1_window),
        topk_(config_.topk),
        started_(std::chrono::steady_clock::now()) {
    config_.validate();
    adam_ = nn::AdamState(model_.parameters(), {config_.learning_rate});
    lr_scale_.assign(model_.parameters().size(), 1.0);
    if (auto z = model_.log_z_index()) lr_scale_[*z] = config_.log_z_learning_rate / config_.learning_rate;
    enumerable_ = env_->num_states() <= kDefaultEnumerationCap;
    if (enumerable_) {
      target_ = target_distribution(*env_);
      target_mean_reward_ = target_expected_reward(*env_);
      modes_.emplace(env_->mode_index(), config_.mode_window);
    }
  }

  const ExperimentConfig& config() const { return config_; }
  const DagEnvironment& env() const { return *env_; }
  GFlowNetModel& model() { return model_; }
  const GFlowNetModel& model() const { return model_; }
  std::size_t steps_done() const { return steps_; }
  double last_loss() const { return last_loss_; }
  const std::optional<ModeTracker>& modes() const { return modes_; }

  PolicyFn policy() const {
    return [this](std::span<const StateId> states) { return model_.forward_policy(states); };
  }

  /// One update; returns the batch loss.
  double step() {
    const ExplorationPolicy explore{policy(), config_.epsilon};
    const auto batch = sample_trajectories(*env_, explore, config_.batch_size, rng_);
    for (const auto& t : batch) {
      window_.push(t.terminal());
      topk_.observe(t.reward);
      if (modes_) modes_->observe(t.terminal());
    }
    auto& params = model_.parameters();
    params.zero_grad();
    nn::Tape tape(&params);
    LossOptions opts;
    opts.subtb_lambda = config_.subtb_lambda;
    opts.dedup = config_.dedup;
    const nn::Var loss = batch_loss(tape, model_, batch, opts);
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value)) fail("loss is " + format_number(value));
    tape.backward(loss);
    if (!params.grads_finite()) fail("non-finite gradient");
    apply_update();
    ++steps_;
    last_loss_ = value;
    return value;
  }

  /// Exact distribution of the un-mixed sampling policy.
  ExactDistribution policy_distribution() const { return exact_terminal_distribution(*env_, policy()); }

  MetricRow evaluate() const {
    MetricRow r;
    r.step = steps_;
    if (config_.record_wall_time) {
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started_).count();
    }
    r.loss = last_loss_;
    if (enumerable_) {
      const auto pi = policy_distribution();
      r.l1_exact = l1_error(target_, pi);
      if (window_.size() > 0) r.l1_empirical = l1_error(target_, empirical_distribution(target_, window_.samples()));
      r.accuracy = accuracy(*env_, pi, target_mean_reward_);
      r.modes_windowed = modes_->windowed();
      r.modes_cumulative = modes_->cumulative();
    }
    if (!topk_.empty()) r.topk = topk_.mean();
    return r;
  }

 private:
  void apply_update() {
    // Adam is invariant to gradient scale, so a separate log Z rate is applied
    // by rescaling that parameter's displacement after the shared step.
    bool uniform = true;
    for (double s : lr_scale_) uniform = uniform && s == 1.0;
    if (uniform) {
      nn::adam_step(adam_, model_.parameters());
      return;
    }
    auto& params = model_.parameters();
    std::vector<nn::Matrix> before;
    before.reserve(params.size());
    for (const auto& p : params) before.push_back(p.value);
    nn::adam_step(adam_, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (lr_scale_[i] != 1.0) params[i].value = before[i] + lr_scale_[i] * (params[i].value - before[i]);
    }
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::ostringstream o;
    o << "step " << steps_ << ": " << what << " (objective " << to_string(config_.objective) << ", env "
      << env_->name() << ", seed " << config_.seed << ")";
    for (const auto& p : model_.parameters()) {
      if (!p.grad.allFinite() || !p.value.allFinite()) o << "; non-finite values in " << p.name;
    }
    if (!config_.output.empty()) {
      std::filesystem::create_directories(config_.output);
      nlohmann::json dump = nn::parameters_to_json(model_.parameters());
      dump["failed_step"] = steps_;
      dump["reason"] = what;
      std::ofstream(std::filesystem::path(config_.output) / "failure_state.json") << dump.dump() << "\n";
    }
    throw NonFiniteLoss(o.str());
  }

  ExperimentConfig config_;
  std::shared_ptr<const DagEnvironment> env_;
  GFlowNetModel model_;
  nn::AdamState adam_;
  std::vector<double> lr_scale_;
  std::mt19937_64 rng_;
  SampleWindow window_;
  TopKTracker topk_;
  std::optional<ModeTracker> modes_;
  bool enumerable_ = false;
  ExactDistribution target_;
  double target_mean_reward_ = 1.0;
  std::size_t steps_ = 0;
  double last_loss_ = std::numeric_limits<double>::quiet_NaN();
  std::chrono::steady_clock::time_point started_;
};

struct RunSummary {
  std::size_t steps = 0;
  double initial_l1 = std::numeric_limits<double>::quiet_NaN();
  double final_l1 = std::numeric_limits<double>::quiet_NaN();
  double best_l1 = std::numeric_limits<double>::quiet_NaN();
  std::size_t modes_cumulative = 0;
  std::size_t modes_windowed = 0;
  std::size_t total_modes = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double topk = std::numeric_limits<double>::quiet_NaN();
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

struct RunRecord {
  std::string config_text;
  ExperimentConfig config;
  std::vector<MetricRow> rows;
  RunSummary summary;
};

inline nlohmann::json to_json(const RunSummary& s) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"steps", s.steps},
          {"initial_l1_exact", num(s.initial_l1)},
          {"final_l1_exact", num(s.final_l1)},
          {"best_l1_exact", num(s.best_l1)},
          {"modes_cumulative", s.modes_cumulative},
          {"modes_windowed", s.modes_windowed},
          {"total_modes", s.total_modes},
          {"accuracy", num(s.accuracy)},
          {"topk", num(s.topk)},
          {"final_loss", num(s.final_loss)}};
}

inline RunSummary summarize(const std::vector<MetricRow>& rows, std::size_t total_modes) {
  RunSummary s;
  s.total_modes = total_modes;
  if (rows.empty()) return s;
  s.steps = rows.back().step;
  s.initial_l1 = rows.front().l1_exact;
  s.final_l1 = rows.back().l1_exact;
  s.best_l1 = rows.front().l1_exact;
  for (const auto& r : rows) {
    if (!std::isnan(r.l1_exact) && !(r.l1_exact >= s.best_l1)) s.best_l1 = r.l1_exact;
  }
  s.modes_cumulative = rows.back().modes_cumulative;
  s.modes_windowed = rows.back().modes_windowed;
  s.accuracy = rows.back().accuracy;
  s.topk = rows.back().topk;
  s.final_loss = rows.back().loss;
  return s;
}

/// Runs the full training loop. When `config.output` is set, writes
/// metrics.csv (incrementally), config.txt, summary.json and model.json there.
/// `on_row` observes each evaluation row as it is produced.
inline RunRecord run_experiment(const ExperimentConfig& config, const std::function<void(const MetricRow&)>& on_row = {}) {
  config.validate();
  RunRecord rec;
  rec.config = config;
  rec.config_text = config.to_text();
  Trainer trainer(config);

  std::ofstream csv;
  std::filesystem::path dir;
  if (!config.output.empty()) {
    dir = config.output;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.txt") << rec.config_text;
    csv.open(dir / "metrics.csv");
    csv << kCsvHeader << "\n";
  }
  auto emit = [&](const MetricRow& r) {
    rec.rows.push_back(r);
    if (csv.is_open()) csv << to_csv(r) << "\n" << std::flush;
    if (on_row) on_row(r);
  };

  emit(trainer.evaluate());
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    trainer.step();
    if (it % config.eval_interval == 0 || it == config.iterations) emit(trainer.evaluate());
  }
  const std::size_t total_modes = trainer.modes() ? trainer.modes()->total_modes() : 0;
  rec.summary = summarize(rec.rows, total_modes);

  if (!dir.empty()) {
    nlohmann::json j;
    j["csv_schema"] = kCsvSchema;
    j["preset"] = config.preset;
    j["objective"] = to_string(config.objective);
    j["seed"] = config.seed;
    j["env"] = trainer.env().name();
    j["summary"] = to_json(rec.summary);
    std::ofstream(dir / "summary.json") << j.dump(2) << "\n";
    nn::save_parameters(trainer.model().parameters(), (dir / "model.json").string());
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Sweeps

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd m;
  std::vector<double> v;
  for (double x : xs) {
    if (!std::isnan(x)) v.push_back(x);
  }
  m.count = v.size();
  if (v.empty()) {
    m.mean = m.std = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

struct SweepRun {
  Objective objective;
  std::uint64_t seed;
  std::optional<RunRecord> record;
  std::string error;
};

struct SweepRow {
  Objective objective;
  MeanStd final_l1;
  MeanStd best_l1;
  MeanStd modes;
  MeanStd accuracy;
  std::size_t failures = 0;
};

struct SweepResult {
  std::vector<SweepRun> runs;
  std::vector<SweepRow> table;
};

/// Cross product of objectives and seeds; a failing run is recorded, not fatal.
inline SweepResult sweep(const ExperimentConfig& base, std::span<const Objective> objectives,
                         std::span<const std::uint64_t> seeds,
                         const std::function<void(const SweepRun&)>& on_run = {}) {
  if (objectives.empty() || seeds.empty()) throw ConfigError("sweep needs at least one objective and one seed");
  SweepResult out;
  for (Objective o : objectives) {
    SweepRow row;
    row.objective = o;
    std::vector<double> fin, best, modes, acc;
    for (std::uint64_t seed : seeds) {
      ExperimentConfig c = base;
      c.objective = o;
      c.seed = seed;
      if (!base.output.empty()) {
        c.output = (std::filesystem::path(base.output) / (std::string(to_string(o)) + "_seed" + std::to_string(seed))).string();
      }
      SweepRun run{o, seed, std::nullopt, {}};
      try {
        run.record = run_experiment(c);
        fin.push_back(run.record->summary.final_l1);
        best.push_back(run.record->summary.best_l1);
        modes.push_back(static_cast<double>(run.record->summary.modes_cumulative));
        acc.push_back(run.record->summary.accuracy);
      } catch (const std::exception& e) {
        run.error = e.what();
        ++row.failures;
      }
      if (on_run) on_run(run);
      out.runs.push_back(std::move(run));
    }
    row.final_l1 = mean_std(fin);
    row.best_l1 = mean_std(best);
    row.modes = mean_std(modes);
    row.accuracy = mean_std(acc);
    out.table.push_back(row);
  }
  return out;
}

inline std::string format_table(const SweepResult& r) {
  std::ostringstream o;
  o << "objective,runs,failures,final_l1_mean,final_l1_std,best_l1_mean,best_l1_std,modes_mean,modes_std,"
       "accuracy_mean,accuracy_std\n";
  for (const auto& row : r.table) {
    o << to_string(row.objective) << ',' << row.final_l1.count << ',' << row.failures << ','
      << format_number(row.final_l1.mean) << ',' << format_number(row.final_l1.std) << ','
      << format_number(row.best_l1.mean) << ',' << format_number(row.best_l1.std) << ','
      << format_number(row.modes.mean) << ',' << format_number(row.modes.std) << ','
      << format_number(row.accuracy.mean) << ',' << format_number(row.accuracy.std) << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Convergence certificate

enum class CertificationStatus { pass, fail, did_not_converge };

inline const char* to_string(CertificationStatus s) {
  switch (s) {
    case CertificationStatus::pass: return "pass";
    case CertificationStatus::fail: return "fail";
    case CertificationStatus::did_not_converge: return "did_not_converge";
  }
  return "?";
}

struct CertificationOptions {
  double loss_tolerance = 1e-12;
  double tv_tolerance = 1e-5;
  std::size_t max_iterations = 200000;
  double learning_rate = 0.05;
};

struct CertificationReport {
  std::string env;
  CertificationStatus status = CertificationStatus::did_not_converge;
  std::size_t iterations = 0;
  double max_state_loss = std::numeric_limits<double>::quiet_NaN();
  double total_variation = std::numeric_limits<double>::quiet_NaN();
  bool passed() const { return status == CertificationStatus::pass; }
};

/// Largest per-state BN loss over every non-root state of the environment.
inline double max_state_bn_loss(const GFlowNetModel& model, std::span<const StateId> states) {
  nn::Tape tape(const_cast<nn::ParameterSet*>(&model.parameters()));
  const nn::Var r = bifurcated_residuals(tape, model, states);
  return r.value().array().square().maxCoeff();
}

/// Trains a tabular BN model on every non-root state at once until the largest
/// per-state loss is at most `loss_tolerance`, then compares the exact terminal
/// distribution of the allocation policy with R/Z.
inline CertificationReport certify_theorem(std::shared_ptr<const DagEnvironment> env, const CertificationOptions& opts = {}) {
  CertificationReport rep;
  rep.env = env->name();
  ModelConfig mc;
  mc.objective = Objective::bn;
  mc.parameterization = Parameterization::tabular;
  GFlowNetModel model(env, mc);

  std::vector<StateId> states;
  for (StateId s : enumerate_states(*env)) {
    if (!env->parents(s).empty()) states.push_back(s);
  }
  auto& params = model.parameters();
  nn::AdamState adam(params, {opts.learning_rate});
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (;;) {
    params.zero_grad();
    nn::Tape tape(&params);
    const nn::Var r = bifurcated_residuals(tape, model, states);
    rep.max_state_loss = r.value().array().square().maxCoeff();
    if (rep.max_state_loss <= opts.loss_tolerance) break;
    if (rep.iterations >= opts.max_iterations) {
      rep.status = CertificationStatus::did_not_converge;
      return rep;
    }
    const nn::Var loss = detail::mean_of_squares(r);
    tape.backward(loss);
    nn::adam_step(adam, params);
    ++rep.iterations;
    // Adam stalls at a noise floor set by its step size; shrink it on plateaus.
    if (rep.max_state_loss < 0.5 * best) {
      best = rep.max_state_loss;
      since_best = 0;
    } else if (++since_best >= 200) {
      adam.options.learning_rate *= 0.5;
      since_best = 0;
      best = rep.max_state_loss;
    }
  }
  const auto target = target_distribution(*env);
  const auto pi = exact_terminal_distribution(*env, [&model](std::span<const StateId> s) { return model.forward_policy(s); });
  rep.total_variation = total_variation(target, pi);
  rep.status = rep.total_variation <= opts.tv_tolerance ? CertificationStatus::pass : CertificationStatus::fail;
  return rep;
}

inline std::shared_ptr<const DagEnvironment> certification_env(const std::string& name) {
  if (name == "dag-motivating" || name == "motivating") return std::make_shared<TabularDag>(build_motivating_dag());
  if (name == "dag-small") return std::make_shared<TabularDag>(build_didactic_dag(DidacticSize::small));
  if (name == "dag-large") return std::make_shared<TabularDag>(build_didactic_dag(DidacticSize::large));
  if (name.ends_with(".json")) return std::make_shared<TabularDag>(load_tabular_dag(name));
  ExperimentConfig c;
  try {
    c = preset(name);
  } catch (const UnknownPreset&) {
    throw UnknownPreset("no enumerable environment named " + name);
  }
  return make_environment(c);
}

}  // namespace bgfn
