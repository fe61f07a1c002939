#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qfd/cli_metrics.hpp"
#include "qfd/langevin.hpp"
#include "qfd/schedule.hpp"
#include "qfd/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

void configure_logging() {
  const char* level = std::getenv("QFD_LOG");
  const std::string v = level ? level : "info";
  if (v == "error") spdlog::set_level(spdlog::level::err);
  else if (v == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
  if (v != "error" && v != "info" && v != "debug") spdlog::warn("QFD_LOG={} not recognised; using info", v);
  spdlog::set_pattern("[%l] %v");
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

qfd::RunConfig config_for_checkpoint(const fs::path& ckpt, const std::optional<fs::path>& config) {
  if (config) return qfd::parse_config(*config);
  const fs::path sibling = ckpt.parent_path() / "config.json";
  if (!fs::exists(sibling)) throw qfd::ConfigError("no --config given and " + sibling.string() + " does not exist");
  return qfd::parse_config(sibling);
}

int num_goals_of(const std::string& env) {
  if (env.rfind("multigoal", 0) != 0) throw qfd::ConfigError("env '" + env + "' is not a multigoal task");
  return std::stoi(env.substr(9));
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Diffusion policy with Q-gradient field training"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train one run and write its run directory");
  std::optional<std::string> config_path;
  qfd::ConfigOverrides ov;
  std::optional<std::string> out_dir;
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--env", ov.env, "environment name");
  train->add_option("--seed", ov.seed, "run seed");
  train->add_option("--steps", ov.steps, "environment steps after warm-up");
  train->add_option("--diffusion-steps", ov.diffusion_steps, "number of denoising steps T");
  train->add_option("--eta", ov.eta, "field loss weight");
  train->add_flag("--no-field-loss", ov.no_field_loss, "train with the Q-maximisation loss only");
  train->add_flag("--no-time-weight", ov.no_time_weight, "drop the time weight from the field target");
  train->add_flag("--distributional", ov.distributional, "Gaussian critic heads with NLL loss");
  train->add_option("--out", out_dir, "run directory");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint without exploration noise");
  std::string eval_ckpt;
  std::optional<std::string> eval_config;
  int eval_episodes = 10;
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--config", eval_config, "config (default: config.json next to the checkpoint)");
  eval->add_option("--episodes", eval_episodes, "episodes");
  eval->add_option("--seed", eval_seed, "evaluation seed");

  // plot
  auto* plot = app.add_subcommand("plot", "Learning curve SVG from one or more metrics files");
  std::vector<std::string> plot_inputs;
  std::string plot_out = "curves.svg";
  std::string plot_title = "TAR";
  plot->add_option("metrics", plot_inputs, "metrics.jsonl files")->required();
  plot->add_option("--out", plot_out, "output SVG");
  plot->add_option("--title", plot_title, "plot title");

  // fit-schedule
  auto* fit = app.add_subcommand("fit-schedule", "Alpha schedule and fitted time-weight curve");
  int fit_steps = 5;
  double fit_bmin = 0.1, fit_bmax = 10.0;
  fit->add_option("--steps", fit_steps, "diffusion steps T");
  fit->add_option("--b-min", fit_bmin, "schedule b_min");
  fit->add_option("--b-max", fit_bmax, "schedule b_max");

  // langevin-demo
  auto* lang = app.add_subcommand("langevin-demo", "Langevin samples against the quadrature density");
  std::string lang_energy = "doublewell";
  double lang_alpha = 0.25;
  int lang_samples = 100000;
  int lang_bins = 40;
  std::uint64_t lang_seed = 0;
  std::string lang_out = "langevin";
  lang->add_option("--energy", lang_energy, "doublewell or gaussian");
  lang->add_option("--alpha", lang_alpha, "temperature");
  lang->add_option("--samples", lang_samples, "number of chains");
  lang->add_option("--bins", lang_bins, "histogram bins");
  lang->add_option("--seed", lang_seed, "seed");
  lang->add_option("--out", lang_out, "output directory");

  // multigoal-report
  auto* mg = app.add_subcommand("multigoal-report", "Trajectory map and mode coverage for a multigoal checkpoint");
  std::string mg_ckpt;
  std::optional<std::string> mg_config;
  std::optional<int> mg_goals;
  int mg_traj = 100;
  std::uint64_t mg_seed = 0;
  std::string mg_out = "multigoal_report";
  mg->add_option("--checkpoint", mg_ckpt, "checkpoint file")->required();
  mg->add_option("--config", mg_config, "config (default: config.json next to the checkpoint)");
  mg->add_option("--goals", mg_goals, "number of goals (default: from the config env)");
  mg->add_option("--n-traj", mg_traj, "trajectories");
  mg->add_option("--seed", mg_seed, "seed");
  mg->add_option("--out", mg_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) {
      std::optional<fs::path> cp;
      if (config_path) cp = *config_path;
      const qfd::RunConfig config = qfd::parse_config(cp, ov);
      const fs::path dir = out_dir ? fs::path(*out_dir) : fs::path("runs") / (config.env + "-s" + std::to_string(config.seed));
      const qfd::TrainResult r = qfd::train(config, dir);
      std::cout << r.metrics.back().to_json_line() << "\n";
    } else if (*eval) {
      std::optional<fs::path> cp;
      if (eval_config) cp = *eval_config;
      const qfd::RunConfig config = config_for_checkpoint(eval_ckpt, cp);
      const qfd::Checkpoint ck = qfd::checkpoint_load(eval_ckpt);
      const qfd::DiffusionPolicy policy = qfd::policy_from_checkpoint(config, ck);
      const auto env = qfd::make_env(config.env);
      const qfd::EvalResult res = qfd::evaluate(policy, ck.params, *env, eval_episodes, eval_seed);
      nlohmann::ordered_json j;
      j["env"] = config.env;
      j["episodes"] = eval_episodes;
      j["tar_mean"] = res.tar_mean;
      j["tar_std"] = res.tar_std;
      std::cout << j.dump() << "\n";
    } else if (*plot) {
      std::vector<fs::path> inputs(plot_inputs.begin(), plot_inputs.end());
      write_file(plot_out, qfd::plot_curves(inputs, plot_title));
      spdlog::info("wrote {}", plot_out);
    } else if (*fit) {
      const qfd::DiffusionSchedule s(fit_steps, fit_bmin, fit_bmax);
      nlohmann::ordered_json j;
      j["steps"] = fit_steps;
      j["c"] = s.fit().c;
      j["d"] = s.fit().d;
      j["alphas"] = s.alphas();
      std::vector<double> w;
      for (int t = 1; t <= fit_steps; ++t) w.push_back(s.time_weight(t));
      j["time_weights"] = w;
      std::cout << j.dump() << "\n";
    } else if (*lang) {
      const qfd::LangevinDemo d = qfd::langevin_demo(lang_energy, lang_samples, lang_alpha, lang_seed, lang_bins);
      write_file(fs::path(lang_out) / (lang_energy + ".csv"), d.csv);
      write_file(fs::path(lang_out) / (lang_energy + ".svg"), d.svg);
      nlohmann::ordered_json j;
      j["energy"] = lang_energy;
      j["alpha"] = lang_alpha;
      j["samples"] = lang_samples;
      j["total_variation"] = d.tv;
      std::cout << j.dump() << "\n";
    } else if (*mg) {
      std::optional<fs::path> cp;
      if (mg_config) cp = *mg_config;
      const qfd::RunConfig config = config_for_checkpoint(mg_ckpt, cp);
      const int goals = mg_goals ? *mg_goals : num_goals_of(config.env);
      const qfd::MultigoalReport r = qfd::multigoal_report(mg_ckpt, config, goals, mg_traj, mg_seed);
      write_file(fs::path(mg_out) / "multigoal.svg", r.svg);
      write_file(fs::path(mg_out) / "multigoal.json", r.json);
      std::cout << r.json;
    }
  } catch (const qfd::ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const qfd::TrainingDiverged& e) {
    spdlog::error("{}", e.what());
    return kExitDiverged;
  } catch (const qfd::DivergenceError& e) {
    spdlog::error("{}", e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return kExitOk;
}
