// sumgp: command-line runner for the constrained multitask GP experiments.

#include "sumgp/sumgp.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace sumgp;

void print_summary(const Report &r) {
  std::printf("%s %s %s sigma=%g fd=%g  RMSE %s  |dC| %s  n=%d failed=%d  (%.1f s, config %s)\n", to_string(r.config.experiment).c_str(),
              to_string(r.config.model).c_str(), to_string(r.config.inference).c_str(), r.config.noise_sigma_n, r.config.drop_prob,
              format_pm(r.rmse).c_str(), format_pm(r.abs_dC).c_str(), r.rmse.n, r.failed, r.runtime_seconds, r.hash.c_str());
}

ProgressCallback progress_printer(int total) {
  auto done = std::make_shared<int>(0);
  return [done, total](const ReplicateResult &r) {
    ++*done;
    if (r.ok)
      std::fprintf(stderr, "[%d/%d] replicate %d: rmse %.3e |dC| %.3e (%.1f s)\n", *done, total, r.index, r.metrics.rmse, r.metrics.abs_dC,
                   r.seconds);
    else
      std::fprintf(stderr, "[%d/%d] replicate %d failed: %s\n", *done, total, r.index, r.error.c_str());
  };
}

int cmd_run(const std::string &config_path, std::optional<std::uint64_t> seed, const std::string &out, bool trace, int threads) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out_dir = out;
  if (trace) cfg.trace = true;
  if (threads > 0) cfg.threads = threads;
  if (cfg.trace) std::filesystem::create_directories(cfg.out_dir);
  const Report r = run_experiment(cfg, progress_printer(cfg.replicates));
  emit_outputs(r, cfg.out_dir);
  print_summary(r);
  std::printf("wrote %s\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_gen(const std::string &dataset, double noise, double drop, std::uint64_t seed, const std::string &out) {
  ExperimentConfig cfg = default_config(parse_experiment(dataset));
  if (cfg.experiment == ExperimentKind::DP) throw InputError("gen: use dp-ingest for pendulum data");
  if (noise >= 0.0) cfg.noise_sigma_n = noise;
  cfg.drop_prob = drop;
  cfg.dp_csv.clear();
  const Experiment e = generate_experiment(cfg, seed);
  write_dataset_csv(out, e.train);
  std::printf("%s: %ld points, %d tasks, %d mask redraws -> %s\n", e.name.c_str(), static_cast<long>(e.train.num_points()),
              e.train.num_tasks(), e.mask_redraws, out.c_str());
  return 0;
}

std::pair<long, long> parse_segment(const std::string &s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw InputError("segment must look like start:length");
  return {std::stol(s.substr(0, colon)), std::stol(s.substr(colon + 1))};
}

int cmd_dp_ingest(const std::string &csv, double frame_rate, double mass_ratio, const std::string &segment, const std::string &out) {
  PendulumParams p;
  p.frame_rate = frame_rate;
  p.mass_ratio = mass_ratio;
  const Experiment e = load_double_pendulum(csv, p, parse_segment(segment));
  write_dataset_csv(out, e.train);
  std::printf("%ld rows, energy estimate %.6g -> %s\n", static_cast<long>(e.train.num_points()), e.constraint.S(e.test_inputs.row(0).transpose())(0),
              out.c_str());
  return 0;
}

// "sigma=0.05,0.1;fd=0,0.2" -> {sigma: [0.05, 0.1], fd: [0, 0.2]}
std::map<std::string, std::vector<double>> parse_grid(const std::string &grid) {
  std::map<std::string, std::vector<double>> axes;
  std::stringstream ss(grid);
  for (std::string part; std::getline(ss, part, ';');) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw InputError("grid: expected name=v1,v2,... in '" + part + "'");
    const std::string name = part.substr(0, eq);
    if (name != "sigma" && name != "fd") throw InputError("grid: unknown axis '" + name + "' (use sigma, fd)");
    std::stringstream vs(part.substr(eq + 1));
    for (std::string v; std::getline(vs, v, ',');) axes[name].push_back(std::stod(v));
  }
  return axes;
}

int cmd_table(const std::string &experiment, const std::string &grid, const std::string &out, const std::vector<std::string> &models,
              int replicates, std::uint64_t seed, int threads) {
  const ExperimentKind kind = parse_experiment(experiment);
  auto axes = parse_grid(grid);
  if (axes["sigma"].empty()) axes["sigma"].push_back(default_config(kind).noise_sigma_n);
  if (axes["fd"].empty()) axes["fd"].push_back(0.0);
  std::ofstream csv(out);
  if (!csv) throw std::runtime_error("cannot write " + out);
  csv << "experiment,model,inference,sigma,fd,n,failed,rmse_mean,rmse_std,abs_dC_mean,abs_dC_std,config_hash\n";
  csv.precision(10);
  for (double sigma : axes["sigma"])
    for (double fd : axes["fd"])
      for (const auto &m : models) {
        ExperimentConfig cfg = default_config(kind, parse_model(m));
        cfg.noise_sigma_n = sigma;
        cfg.drop_prob = fd;
        cfg.replicates = replicates;
        cfg.seed = seed;
        cfg.threads = threads;
        cfg.figures = false;
        const Report r = run_experiment(cfg);
        print_summary(r);
        csv << to_string(kind) << ',' << m << ',' << to_string(cfg.inference) << ',' << sigma << ',' << fd << ',' << r.rmse.n << ','
            << r.failed << ',' << r.rmse.mean << ',' << r.rmse.std << ',' << r.abs_dC.mean << ',' << r.abs_dC.std << ',' << r.hash << '\n';
        csv.flush();
      }
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Multitask Gaussian processes with sum constraints"};
  app.require_subcommand(1);

  auto *run = app.add_subcommand("run", "Run an experiment from a config file");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool trace = false;
  int threads = 0;
  run->add_option("--config", config_path, "Config file (key = value)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Base seed; replicate k uses seed + k");
  run->add_option("--out", out_dir, "Output directory (overrides out_dir)");
  run->add_flag("--trace", trace, "Write per-iteration loss traces");
  run->add_option("--threads", threads, "Worker threads (0: hardware concurrency)");

  auto *gen = app.add_subcommand("gen", "Generate one synthetic training set as CSV");
  std::string dataset, gen_out;
  double noise = -1.0, drop = 0.0;
  std::uint64_t gen_seed = 1;
  gen->add_option("--dataset", dataset, "ho, dho, ff, logsin or triangle")->required();
  gen->add_option("--noise", noise, "Noise standard deviation (default: the experiment's)");
  gen->add_option("--drop", drop, "Probability of dropping each output component")->check(CLI::Range(0.0, 0.999));
  gen->add_option("--seed", gen_seed, "Seed");
  gen->add_option("--out", gen_out, "Output CSV")->required();

  auto *ingest = app.add_subcommand("dp-ingest", "Convert a pendulum marker CSV segment to a scaled dataset");
  std::string dp_csv, segment, dp_out;
  double frame_rate = 500.0, mass_ratio = 6.5;
  ingest->add_option("--csv", dp_csv, "Marker CSV")->required()->check(CLI::ExistingFile);
  ingest->add_option("--frame-rate", frame_rate, "Frames per second");
  ingest->add_option("--mass-ratio", mass_ratio, "Mass of the inner arm over the outer one");
  ingest->add_option("--segment", segment, "start:length in rows")->required();
  ingest->add_option("--out", dp_out, "Output CSV")->required();

  auto *table = app.add_subcommand("table", "Sweep noise and drop rates, one aggregate row per cell");
  std::string tab_experiment, grid, tab_out;
  std::vector<std::string> models{"constrained", "unconstrained"};
  int replicates = 50, tab_threads = 0;
  std::uint64_t tab_seed = 1;
  table->add_option("--experiment", tab_experiment, "ho, dho, ff, logsin or triangle")->required();
  table->add_option("--grid", grid, "e.g. \"sigma=0.05,0.1;fd=0,0.2\"");
  table->add_option("--out", tab_out, "Output CSV")->required();
  table->add_option("--models", models, "Models to compare");
  table->add_option("--replicates", replicates, "Replicates per cell");
  table->add_option("--seed", tab_seed, "Base seed");
  table->add_option("--threads", tab_threads, "Worker threads");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, seed, out_dir, trace, threads);
    if (*gen) return cmd_gen(dataset, noise, drop, gen_seed, gen_out);
    if (*ingest) return cmd_dp_ingest(dp_csv, frame_rate, mass_ratio, segment, dp_out);
    if (*table) return cmd_table(tab_experiment, grid, tab_out, models, replicates, tab_seed, tab_threads);
  } catch (const InputError &e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
