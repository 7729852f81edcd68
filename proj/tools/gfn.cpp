// gfn: experiment command line.
//
//   gfn run --preset grid-small --objective bn --seed 0 --out runs/
//   gfn sweep --preset dag-large --objectives bn,fm --seeds 0-4 --out sweeps/
//   gfn certify --env dag-small
//   gfn validate-env samples/custom_dag.json
//   gfn preset grid-small

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bgfn/experiment.hpp"

namespace {

struct Overrides {
  std::string preset;
  std::string config_file;
  std::string objective;
  std::vector<std::string> sets;
  std::optional<std::size_t> iterations, horizon, dims, length;
  std::optional<std::uint64_t> seed;
  std::string pb;
  std::string out;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--preset", o.preset, "grid-small|grid-medium|grid-large|dag-small|dag-large|seq-rna1..4");
  cmd->add_option("--config", o.config_file, "key = value file applied on top of the preset");
  cmd->add_option("--set", o.sets, "extra key=value assignment (repeatable)");
  cmd->add_option("--iterations", o.iterations);
  cmd->add_option("--horizon", o.horizon);
  cmd->add_option("--dims", o.dims);
  cmd->add_option("--length", o.length);
  cmd->add_option("--pb", o.pb, "backward policy: learned|uniform")->check(CLI::IsMember({"learned", "uniform"}));
  cmd->add_option("--out", o.out, "output directory");
}

bgfn::ExperimentConfig build_config(const Overrides& o) {
  bgfn::ExperimentConfig c = o.preset.empty() ? bgfn::ExperimentConfig{} : bgfn::preset(o.preset);
  if (!o.config_file.empty()) c = bgfn::load_config(o.config_file, c);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw bgfn::ConfigError("--set expects key=value, got " + kv);
    c.set(bgfn::trim(kv.substr(0, eq)), bgfn::trim(kv.substr(eq + 1)));
  }
  if (!o.objective.empty()) c.objective = bgfn::parse_objective(o.objective);
  if (o.iterations) c.iterations = *o.iterations;
  if (o.horizon) c.horizon = *o.horizon;
  if (o.dims) c.dims = *o.dims;
  if (o.length) c.length = *o.length;
  if (o.seed) c.seed = *o.seed;
  if (!o.pb.empty()) c.uniform_backward = o.pb == "uniform";
  if (!o.out.empty()) c.output = o.out;
  c.validate();
  return c;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.push_back(std::stoull(part));
    } else {
      const auto lo = std::stoull(part.substr(0, dash));
      const auto hi = std::stoull(part.substr(dash + 1));
      for (auto k = lo; k <= hi; ++k) out.push_back(k);
    }
  }
  return out;
}

std::vector<bgfn::Objective> parse_objectives(const std::string& s) {
  std::vector<bgfn::Objective> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(bgfn::parse_objective(bgfn::trim(part)));
  return out;
}

void print_row(const bgfn::MetricRow& r) { std::cout << bgfn::to_csv(r) << "\n" << std::flush; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bifurcated and standard GFlowNet experiments"};
  app.require_subcommand(1);

  Overrides run_opts;
  auto* run = app.add_subcommand("run", "train one model and write metrics");
  add_overrides(run, run_opts);
  run->add_option("--objective", run_opts.objective, "fm|db|tb|subtb|bn");
  run->add_option("--seed", run_opts.seed);
  bool quiet = false;
  run->add_flag("--quiet", quiet, "do not echo metric rows");

  Overrides sweep_opts;
  std::string sweep_objectives = "fm,db,tb,subtb,bn";
  std::string sweep_seeds = "0-4";
  auto* sw = app.add_subcommand("sweep", "objectives x seeds cross product with a mean/std table");
  add_overrides(sw, sweep_opts);
  sw->add_option("--objectives", sweep_objectives, "comma-separated objectives");
  sw->add_option("--seeds", sweep_seeds, "e.g. 0-4 or 0,2,7");

  std::string cert_env = "dag-small";
  bgfn::CertificationOptions cert;
  auto* cf = app.add_subcommand("certify", "drive tabular BN loss to zero and compare A's distribution with R/Z");
  cf->add_option("--env", cert_env, "dag-motivating|dag-small|dag-large|<file.json>|enumerable preset");
  cf->add_option("--tolerance", cert.loss_tolerance, "max per-state loss to reach");
  cf->add_option("--tv", cert.tv_tolerance, "total-variation pass threshold");
  cf->add_option("--max-iterations", cert.max_iterations);

  std::string env_path;
  auto* ve = app.add_subcommand("validate-env", "check a JSON DAG description");
  ve->add_option("file", env_path)->required();

  std::string preset_name;
  auto* pr = app.add_subcommand("preset", "print a preset as a config file");
  pr->add_option("name", preset_name)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto c = build_config(run_opts);
      if (!quiet) std::cout << bgfn::kCsvHeader << "\n";
      const auto rec = bgfn::run_experiment(c, quiet ? std::function<void(const bgfn::MetricRow&)>{} : print_row);
      std::cerr << bgfn::to_json(rec.summary).dump(2) << "\n";
      return 0;
    }
    if (*sw) {
      const auto c = build_config(sweep_opts);
      const auto objs = parse_objectives(sweep_objectives);
      const auto seeds = parse_seeds(sweep_seeds);
      const auto res = bgfn::sweep(c, objs, seeds, [](const bgfn::SweepRun& r) {
        std::cerr << bgfn::to_string(r.objective) << " seed " << r.seed << ": "
                  << (r.record ? "final l1 " + bgfn::format_number(r.record->summary.final_l1) : "error: " + r.error)
                  << "\n";
      });
      const std::string table = bgfn::format_table(res);
      std::cout << table;
      if (!c.output.empty()) std::ofstream(std::filesystem::path(c.output) / "table.csv") << table;
      return 0;
    }
    if (*cf) {
      const auto rep = bgfn::certify_theorem(bgfn::certification_env(cert_env), cert);
      std::printf("env %s\nstatus %s\niterations %zu\nmax_state_loss %.3e\ntotal_variation %.3e\n", rep.env.c_str(),
                  bgfn::to_string(rep.status), rep.iterations, rep.max_state_loss, rep.total_variation);
      if (rep.status == bgfn::CertificationStatus::did_not_converge) {
        throw bgfn::DidNotConverge("residual loss " + bgfn::format_number(rep.max_state_loss) + " after " +
                                   std::to_string(rep.iterations) + " iterations");
      }
      return rep.passed() ? 0 : 1;
    }
    if (*ve) {
      const auto env = bgfn::load_tabular_dag(env_path);
      const auto violations = bgfn::validate_env(env);
      for (const auto& v : violations) std::cout << bgfn::to_string(v.kind) << " at state " << v.state << ": " << v.message << "\n";
      std::cout << env.num_states() << " states, " << env.terminal_states().size() << " terminals, "
                << violations.size() << " violations\n";
      return violations.empty() ? 0 : 1;
    }
    if (*pr) {
      std::cout << bgfn::preset(preset_name).to_text();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "gfn: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
