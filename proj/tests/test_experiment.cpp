#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "bgfn/experiment.hpp"

using namespace bgfn;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bgfn_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

ExperimentConfig quick_grid() {
  auto c = preset("grid-small");
  c.horizon = 4;
  c.hidden_width = 16;
  c.iterations = 20;
  c.eval_interval = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Presets

TEST(Presets, GridSmall) {
  const auto c = preset("grid-small");
  EXPECT_EQ(c.env, "grid");
  EXPECT_EQ(c.dims, 2u);
  EXPECT_EQ(c.horizon, 16u);
  EXPECT_EQ(c.hidden_layers, 2u);
  EXPECT_EQ(c.hidden_width, 256u);
  EXPECT_EQ(c.activation, nn::Activation::leaky_relu);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.iterations, 20000u);
  EXPECT_EQ(preset("grid-medium").dims, 3u);
  EXPECT_EQ(preset("grid-large").dims, 4u);
}

TEST(Presets, SeqRna) {
  const auto c = preset("seq-rna2");
  EXPECT_EQ(c.env, "seq");
  EXPECT_EQ(c.motif_set, 2);
  EXPECT_EQ(c.epsilon, 0.001);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.iterations, 5000u);
  EXPECT_EQ(c.hidden_width, 2048u);
  EXPECT_EQ(c.activation, nn::Activation::relu);
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.reward_exponent, 3.0);
  EXPECT_EQ(c.length, 8u);
}

TEST(Presets, DagIsTabular) {
  for (const char* name : {"dag-small", "dag-large"}) {
    const auto c = preset(name);
    EXPECT_EQ(c.parameterization, Parameterization::tabular);
    EXPECT_EQ(c.learning_rate, 0.01);
    EXPECT_EQ(c.iterations, 5000u);
  }
  EXPECT_EQ(make_environment(preset("dag-large"))->num_states(), 129u);
}

TEST(Presets, Unknown) {
  EXPECT_THROW(preset("grid-huge"), UnknownPreset);
  EXPECT_THROW(preset("seq-rna5"), UnknownPreset);
  for (const auto& n : preset_names()) EXPECT_NO_THROW(preset(n)) << n;
}

TEST(Presets, TextRoundTrip) {
  for (const auto& n : preset_names()) {
    const auto c = preset(n);
    const auto back = parse_config(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text()) << n;
  }
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, ParsesOverridesAndComments) {
  const auto c = parse_config("# quick run\nobjective = tb\n  horizon=8  \nepsilon = 0.25 # trailing\n\nuniform_backward = yes\n",
                              preset("grid-small"));
  EXPECT_EQ(c.objective, Objective::tb);
  EXPECT_EQ(c.horizon, 8u);
  EXPECT_EQ(c.epsilon, 0.25);
  EXPECT_TRUE(c.uniform_backward);
  EXPECT_EQ(c.dims, 2u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("horizn = 8"), ConfigError);
  EXPECT_THROW(parse_config("horizon 8"), ConfigError);
  EXPECT_THROW(parse_config("horizon = -3"), ConfigError);
  EXPECT_THROW(parse_config("horizon = 0"), ConfigError);
  EXPECT_THROW(parse_config("learning_rate = fast"), ConfigError);
  EXPECT_THROW(parse_config("objective = ppo"), ConfigError);
  EXPECT_THROW(parse_config("epsilon = 1.5"), ConfigError);
  EXPECT_THROW(parse_config("env = maze"), ConfigError);
  EXPECT_THROW(parse_config("env = file"), ConfigError);
  EXPECT_THROW(parse_config("dedup = maybe"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST(Config, ModelConfig) {
  auto c = preset("grid-small");
  c.hidden_layers = 3;
  c.hidden_width = 32;
  const auto m = c.model_config();
  EXPECT_EQ(m.hidden, (std::vector<std::size_t>{32, 32, 32}));
  EXPECT_EQ(m.objective, Objective::bn);
}

TEST(Config, SampleFileLoads) {
  const auto c = load_config(BGFN_SOURCE_DIR "/samples/grid_quick.cfg");
  EXPECT_EQ(c.horizon, 8u);
  EXPECT_EQ(c.iterations, 3000u);
  EXPECT_EQ(c.epsilon, 0.05);  // from the named preset
}

TEST(Config, PresetLineLoadsPreset) {
  const auto c = parse_config("preset = seq-rna3\nlength = 5\n");
  EXPECT_EQ(c.env, "seq");
  EXPECT_EQ(c.motif_set, 3);
  EXPECT_EQ(c.length, 5u);
  EXPECT_EQ(parse_config("preset = mine\n").preset, "mine");
}

// ---------------------------------------------------------------------------
// Runs

TEST(Run, ZeroIterationsGivesInitialRow) {
  auto c = quick_grid();
  c.iterations = 0;
  const auto rec = run_experiment(c);
  ASSERT_EQ(rec.rows.size(), 1u);
  EXPECT_EQ(rec.rows[0].step, 0u);
  EXPECT_TRUE(std::isnan(rec.rows[0].loss));
  EXPECT_GT(rec.rows[0].l1_exact, 0.0);
  EXPECT_EQ(rec.summary.steps, 0u);
}

TEST(Run, RowCadence) {
  auto c = quick_grid();
  c.horizon = 8;  // H = 4 is too small for any mode band
  c.iterations = 23;
  const auto rec = run_experiment(c);
  std::vector<std::size_t> steps;
  for (const auto& r : rec.rows) steps.push_back(r.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 5, 10, 15, 20, 23}));
  EXPECT_EQ(rec.summary.total_modes, 4u);
  EXPECT_EQ(rec.config_text, c.to_text());
}

TEST(Run, SameSeedSameBytes) {
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  for (Objective o : kAllObjectives) {
    auto c = quick_grid();
    c.objective = o;
    c.output = a.string();
    run_experiment(c);
    c.output = b.string();
    run_experiment(c);
    const auto csv = read_file(a / "metrics.csv");
    EXPECT_EQ(csv, read_file(b / "metrics.csv")) << to_string(o);
    EXPECT_EQ(read_file(a / "summary.json"), read_file(b / "summary.json"));
    EXPECT_EQ(read_file(a / "model.json"), read_file(b / "model.json"));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kCsvHeader);
  }
  auto c = quick_grid();
  c.output = b.string();
  c.seed = 1;
  run_experiment(c);
  EXPECT_NE(read_file(a / "metrics.csv"), read_file(b / "metrics.csv"));
}

TEST(Run, OutputFiles) {
  const auto dir = scratch("outputs");
  auto c = quick_grid();
  c.output = dir.string();
  const auto rec = run_experiment(c);
  EXPECT_EQ(read_file(dir / "config.txt"), c.to_text());
  const auto summary = nlohmann::json::parse(read_file(dir / "summary.json"));
  EXPECT_EQ(summary["csv_schema"], kCsvSchema);
  EXPECT_EQ(summary["summary"]["steps"], 20);
  EXPECT_EQ(summary["objective"], "bn");
  // checkpoint restores the final weights
  Trainer t(c);
  nn::load_parameters(t.model().parameters(), (dir / "model.json").string());
  EXPECT_NEAR(l1_error(target_distribution(t.env()), t.policy_distribution()), rec.summary.final_l1, 1e-15);
}

TEST(Run, SequencePresetAtDeskScale) {
  auto c = preset("seq-rna1");
  c.length = 4;
  c.hidden_width = 16;
  c.iterations = 10;
  c.eval_interval = 10;
  const auto rec = run_experiment(c);
  ASSERT_EQ(rec.rows.size(), 2u);
  EXPECT_GT(rec.rows.back().accuracy, 0.0);
  EXPECT_LE(rec.rows.back().accuracy, 1.0);
  EXPECT_FALSE(std::isnan(rec.rows.back().topk));
}

TEST(Run, TrainingReducesL1OnSmallDag) {
  auto c = preset("dag-small");
  c.iterations = 300;
  c.eval_interval = 300;
  const auto rec = run_experiment(c);
  EXPECT_LT(rec.summary.final_l1, 0.5 * rec.summary.initial_l1);
}

TEST(Run, LogZHasItsOwnRate) {
  auto c = preset("dag-small");
  c.objective = Objective::tb;
  c.learning_rate = 1e-3;
  c.log_z_learning_rate = 0.1;
  Trainer t(c);
  t.step();
  // Adam's first step moves every entry by about its rate.
  EXPECT_NEAR(std::fabs(t.model().log_z()), 0.1, 1e-6);
  EXPECT_LE(t.model().table().cwiseAbs().maxCoeff(), 1e-3 + 1e-9);
}

TEST(Run, NonFiniteLossStopsWithState) {
  const auto dir = scratch("nonfinite");
  auto c = preset("dag-small");
  c.objective = Objective::tb;
  c.learning_rate = 1e307;
  c.log_z_learning_rate = 1e307;
  c.output = dir.string();
  Trainer t(c);
  bool thrown = false;
  for (int i = 0; i < 5 && !thrown; ++i) {
    try {
      t.step();
    } catch (const NonFiniteLoss& e) {
      thrown = true;
      EXPECT_NE(std::string(e.what()).find("step "), std::string::npos);
    }
  }
  EXPECT_TRUE(thrown);
  EXPECT_TRUE(std::filesystem::exists(dir / "failure_state.json"));
}

TEST(Run, WallTimeOptIn) {
  auto c = quick_grid();
  c.iterations = 5;
  for (const auto& r : run_experiment(c).rows) EXPECT_EQ(r.wall_ms, 0.0);
  c.record_wall_time = true;
  EXPECT_GE(run_experiment(c).rows.back().wall_ms, 0.0);
}

TEST(Run, CsvFormatting) {
  MetricRow r;
  r.step = 7;
  r.loss = 0.5;
  r.modes_windowed = 2;
  r.modes_cumulative = 3;
  EXPECT_EQ(to_csv(r), "7,0,0.5,nan,nan,2,3,nan,nan");
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(Sweep, MeanStd) {
  const std::vector<double> xs{0.1, 0.3};
  const auto m = mean_std(xs);
  EXPECT_NEAR(m.mean, 0.2, 1e-15);
  EXPECT_NEAR(m.std, 0.1, 1e-15);
  const std::vector<double> one{0.7};
  EXPECT_EQ(mean_std(one).std, 0.0);
  const std::vector<double> with_nan{1.0, std::nan(""), 3.0};
  EXPECT_EQ(mean_std(with_nan).mean, 2.0);
  EXPECT_EQ(mean_std(with_nan).count, 2u);
}

TEST(Sweep, CrossProduct) {
  auto c = preset("dag-small");
  c.iterations = 5;
  c.eval_interval = 5;
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t seen = 0;
  const auto res = sweep(c, kAllObjectives, seeds, [&](const SweepRun&) { ++seen; });
  EXPECT_EQ(res.runs.size(), 25u);
  EXPECT_EQ(seen, 25u);
  ASSERT_EQ(res.table.size(), 5u);
  for (const auto& row : res.table) {
    EXPECT_EQ(row.failures, 0u);
    EXPECT_EQ(row.final_l1.count, 5u);
  }
  const auto table = format_table(res);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 6);
}

TEST(Sweep, ErrorsAreRecorded) {
  ExperimentConfig c;
  c.env = "file";
  c.env_file = "/nonexistent/dag.json";
  const Objective objs[] = {Objective::bn, Objective::fm};
  const std::vector<std::uint64_t> seeds{0, 1};
  const auto res = sweep(c, objs, seeds);
  ASSERT_EQ(res.runs.size(), 4u);
  for (const auto& r : res.runs) {
    EXPECT_FALSE(r.record.has_value());
    EXPECT_FALSE(r.error.empty());
  }
  EXPECT_EQ(res.table[0].failures, 2u);
  EXPECT_THROW(sweep(c, std::span<const Objective>{}, seeds), ConfigError);
}

TEST(Sweep, WritesPerRunDirectories) {
  const auto dir = scratch("sweep");
  auto c = preset("dag-small");
  c.iterations = 2;
  c.output = dir.string();
  const Objective objs[] = {Objective::db};
  const std::vector<std::uint64_t> seeds{3};
  sweep(c, objs, seeds);
  EXPECT_TRUE(std::filesystem::exists(dir / "db_seed3" / "metrics.csv"));
}

// ---------------------------------------------------------------------------
// Certification

TEST(Certify, MotivatingDag) {
  const auto rep = certify_theorem(certification_env("dag-motivating"));
  EXPECT_TRUE(rep.passed());
  EXPECT_LE(rep.max_state_loss, 1e-12);
  EXPECT_LE(rep.total_variation, 1e-5);
}

TEST(Certify, SmallDag) {
  const auto rep = certify_theorem(certification_env("dag-small"));
  EXPECT_TRUE(rep.passed());
  EXPECT_LE(rep.total_variation, 1e-5);
}

TEST(Certify, ZeroIterationsComparesImmediately) {
  CertificationOptions o;
  o.loss_tolerance = 1e9;
  o.max_iterations = 0;
  const auto rep = certify_theorem(certification_env("dag-small"), o);
  EXPECT_EQ(rep.iterations, 0u);
  EXPECT_EQ(rep.status, CertificationStatus::fail);
  EXPECT_GT(rep.total_variation, 1e-5);
}

TEST(Certify, IterationCapReportsResidual) {
  CertificationOptions o;
  o.max_iterations = 3;
  const auto rep = certify_theorem(certification_env("dag-small"), o);
  EXPECT_EQ(rep.status, CertificationStatus::did_not_converge);
  EXPECT_GT(rep.max_state_loss, 1e-12);
}

TEST(Certify, EnvironmentNames) {
  EXPECT_EQ(certification_env("dag-large")->num_states(), 129u);
  EXPECT_EQ(certification_env(BGFN_SOURCE_DIR "/samples/custom_dag.json")->num_states(), 6u);
  EXPECT_THROW(certification_env("nope"), UnknownPreset);
}

// ---------------------------------------------------------------------------
// Command line

#ifdef BGFN_CLI_PATH
namespace {
int run_cli(const std::string& args, std::string* out = nullptr) {
  const auto log = scratch("cli_out.txt");
  const int rc = std::system((std::string(BGFN_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1").c_str());
  if (out) *out = read_file(log);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
}  // namespace

TEST(Cli, ValidateEnv) {
  std::string out;
  EXPECT_EQ(run_cli("validate-env " BGFN_SOURCE_DIR "/samples/custom_dag.json", &out), 0) << out;
  EXPECT_NE(out.find("0 violations"), std::string::npos);
  EXPECT_EQ(run_cli("validate-env " BGFN_SOURCE_DIR "/samples/cyclic_dag.json", &out), 1) << out;
  EXPECT_NE(out.find("cycle"), std::string::npos);
  EXPECT_EQ(run_cli("validate-env /nonexistent.json", &out), 2);
}

TEST(Cli, CertifyAndPreset) {
  std::string out;
  EXPECT_EQ(run_cli("certify --env dag-motivating", &out), 0) << out;
  EXPECT_NE(out.find("status pass"), std::string::npos);
  EXPECT_EQ(run_cli("certify --env dag-small --max-iterations 2", &out), 2) << out;
  EXPECT_EQ(run_cli("preset seq-rna3", &out), 0);
  EXPECT_NE(out.find("motif_set = 3"), std::string::npos);
  EXPECT_EQ(run_cli("preset nope", &out), 2);
}

TEST(Cli, RunWithOverrides) {
  const auto dir = scratch("cli_run");
  std::string out;
  EXPECT_EQ(run_cli("run --preset grid-small --horizon 4 --set hidden_width=8 --iterations 10 --objective fm --pb uniform "
                    "--quiet --out " + dir.string(), &out), 0) << out;
  const auto cfg = read_file(dir / "config.txt");
  EXPECT_NE(cfg.find("objective = fm"), std::string::npos);
  EXPECT_NE(cfg.find("horizon = 4"), std::string::npos);
  EXPECT_NE(cfg.find("uniform_backward = true"), std::string::npos);
  EXPECT_EQ(run_cli("run --preset grid-small --set bogus=1", &out), 2);
}

TEST(Cli, Sweep) {
  const auto dir = scratch("cli_sweep");
  std::string out;
  EXPECT_EQ(run_cli("sweep --preset dag-small --iterations 3 --objectives bn,tb --seeds 0-1 --out " + dir.string(), &out), 0)
      << out;
  const auto table = read_file(dir / "table.csv");
  EXPECT_NE(table.find("bn,2,0,"), std::string::npos) << table;
  EXPECT_NE(table.find("tb,2,0,"), std::string::npos) << table;
}
#endif
