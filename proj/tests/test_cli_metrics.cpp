#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "qfd/cli_metrics.hpp"
#include "test_support.hpp"

using namespace qfd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << text;
}

std::string config_error(const std::string& text) {
  try {
    parse_config_text(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

MetricsRow row(long step, double tar) {
  MetricsRow r;
  r.step = step;
  r.env = "bandit-doublewell";
  r.tar_mean = tar;
  return r;
}

void write_metrics(const fs::path& p, const std::vector<MetricsRow>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.to_json_line() + "\n";
  spit(p, text);
}

std::size_t count_of(const std::string& haystack, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) ++n;
  return n;
}

const char* small_config_json = R"({
  "env": "multigoal4",
  "total_steps": 40,
  "actor_hidden": [16, 16],
  "critic_hidden": [16, 16],
  "batch_size": 16,
  "warmup_steps": 50,
  "buffer_capacity": 500,
  "eval_every": 20,
  "eval_episodes": 2,
  "gmm_action_samples": 20,
  "entropy_mc_samples": 50
})";

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
  const char* cli = std::getenv("QFD_CLI");
  if (!cli) return {};
  const fs::path out = dir / "stdout.txt";
  const std::string cmd =
      "cd '" + dir.string() + "' && QFD_LOG=error '" + cli + "' " + args + " > '" + out.string() + "' 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

}  // namespace

TEST(ConfigParse, EmptyInputGivesDefaults) {
  const RunConfig defaults;
  for (const std::string text : {"", "  \n", "{}"}) {
    const RunConfig c = parse_config_text(text);
    EXPECT_EQ(config_to_json(c), config_to_json(defaults)) << "'" << text << "'";
  }
}

TEST(ConfigParse, ReadsKnownKeys) {
  const RunConfig c = parse_config_text(R"({"env": "multigoal6", "seed": 9, "eta": null, "actor_hidden": [8, 4],
                                            "time_weight": false, "lr_actor": 3e-4, "target_entropy": -0.5})");
  EXPECT_EQ(c.env, "multigoal6");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_FALSE(c.eta.has_value());
  EXPECT_EQ(c.actor_hidden, (std::vector<std::size_t>{8, 4}));
  EXPECT_FALSE(c.time_weight);
  EXPECT_EQ(c.lr_actor, 3e-4);
  EXPECT_EQ(c.target_entropy, -0.5);
}

TEST(ConfigParse, JsonRoundTrip) {
  RunConfig c;
  c.env = "pointmass";
  c.seed = 4;
  c.batch_size = 32;
  c.critic_hidden = {12};
  const std::string text = config_to_json(c);
  EXPECT_EQ(config_to_json(parse_config_text(text)), text);
}

TEST(ConfigParse, OverridesWin) {
  const fs::path dir = qfd::testing::scratch_dir("cfg_override");
  spit(dir / "c.json", R"({"env": "bandit-ring", "seed": 3, "eta": 0.5, "total_steps": 10})");
  ConfigOverrides o;
  o.seed = 11;
  o.eta = 2.0;
  o.no_time_weight = true;
  const RunConfig c = parse_config(dir / "c.json", o);
  EXPECT_EQ(c.env, "bandit-ring");
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.eta, 2.0);
  EXPECT_EQ(c.total_steps, 10);
  EXPECT_FALSE(c.time_weight);
  EXPECT_TRUE(c.field_loss);
  o.no_field_loss = true;
  o.steps = 5;
  o.diffusion_steps = 10;
  const RunConfig d = parse_config(dir / "c.json", o);
  EXPECT_FALSE(d.field_loss);
  EXPECT_EQ(d.total_steps, 5);
  EXPECT_EQ(d.diffusion_steps, 10);
}

TEST(ConfigParse, ErrorsNameTheProblem) {
  const std::string syntax = config_error("{\n  \"seed\": 1,\n  \"env\": ,\n}");
  EXPECT_NE(syntax.find("line 3"), std::string::npos) << syntax;
  EXPECT_NE(syntax.find("cfg.json"), std::string::npos) << syntax;

  const std::string unknown = config_error(R"({"sede": 1})");
  EXPECT_NE(unknown.find("'sede'"), std::string::npos) << unknown;

  const std::string type = config_error(R"({"batch_size": "big"})");
  EXPECT_NE(type.find("batch_size"), std::string::npos) << type;
  EXPECT_NE(type.find("integer"), std::string::npos) << type;

  const std::string nested = config_error(R"({"actor_hidden": [64, -1]})");
  EXPECT_NE(nested.find("actor_hidden[1]"), std::string::npos) << nested;

  EXPECT_FALSE(config_error(R"({"field_loss": 1})").empty());
  EXPECT_FALSE(config_error("[1, 2]").empty());
  EXPECT_FALSE(config_error(R"({"seed": 1.5})").empty());
}

TEST(ConfigParse, ValidationFailuresAreConfigErrors) {
  const fs::path dir = qfd::testing::scratch_dir("cfg_invalid");
  spit(dir / "bad.json", R"({"env": "cartpole"})");
  EXPECT_THROW(parse_config(dir / "bad.json"), ConfigError);
  spit(dir / "bad.json", R"({"rho": 0})");
  EXPECT_THROW(parse_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(parse_config(dir / "missing.json"), ConfigError);
  ConfigOverrides o;
  o.eta = -1.0;
  EXPECT_THROW(parse_config(std::nullopt, o), ConfigError);
}

TEST(Curves, MeanAndBand) {
  const std::vector<std::vector<MetricsRow>> runs = {
      {row(10, 1.0), row(20, 2.0), row(30, 5.0)},
      {row(10, 3.0), row(20, 2.0)},
      {row(10, 2.0), row(20, 2.0), row(30, 0.0)},
  };
  const CurveSummary s = summarize_curves(runs);
  ASSERT_EQ(s.steps, (std::vector<long>{10, 20}));
  EXPECT_EQ(s.runs, 3u);
  EXPECT_TRUE(s.has_band());
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  // Sample std 1 over three runs.
  EXPECT_NEAR(s.upper[0] - s.mean[0], 1.96 / std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(s.mean[0] - s.lower[0], 1.96 / std::sqrt(3.0), 1e-12);
  EXPECT_EQ(s.lower[1], s.upper[1]);

  const CurveSummary one = summarize_curves({runs[0]});
  EXPECT_FALSE(one.has_band());
  EXPECT_EQ(one.steps.size(), 3u);
  EXPECT_EQ(one.lower, one.mean);

  EXPECT_THROW(summarize_curves({}), std::invalid_argument);
  EXPECT_THROW(summarize_curves({runs[0], {}}), std::invalid_argument);
  EXPECT_THROW(summarize_curves({{row(1, 0.0)}, {row(2, 0.0)}}), std::invalid_argument);
}

TEST(Curves, SvgHasBandOnlyForSeveralRuns) {
  const fs::path dir = qfd::testing::scratch_dir("curves");
  write_metrics(dir / "a.jsonl", {row(10, 1.0), row(20, 2.0)});
  write_metrics(dir / "b.jsonl", {row(10, 3.0), row(20, 1.0)});
  const std::string both = plot_curves({dir / "a.jsonl", dir / "b.jsonl"}, "demo <title>");
  EXPECT_EQ(both.rfind("<svg", 0), 0u);
  EXPECT_EQ(count_of(both, "class=\"band\""), 1u);
  EXPECT_EQ(count_of(both, "class=\"mean\""), 1u);
  EXPECT_NE(both.find("demo &lt;title&gt;"), std::string::npos);
  const std::string single = plot_curves({dir / "a.jsonl"});
  EXPECT_EQ(count_of(single, "class=\"band\""), 0u);
}

TEST(Curves, EmptyOrBadMetricsAreErrors) {
  const fs::path dir = qfd::testing::scratch_dir("curves_bad");
  spit(dir / "empty.jsonl", "");
  EXPECT_THROW(plot_curves({dir / "empty.jsonl"}), std::invalid_argument);
  EXPECT_THROW(plot_curves({}), std::invalid_argument);
  spit(dir / "bad.jsonl", row(1, 0.0).to_json_line() + "\n{\"step\": 2}\n");
  try {
    read_metrics(dir / "bad.jsonl");
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_metrics(dir / "nope.jsonl"), std::runtime_error);
}

TEST(Curves, MetricsRoundTrip) {
  const fs::path dir = qfd::testing::scratch_dir("metrics_rt");
  MetricsRow r = row(5, -1.25);
  r.coverage = 2;
  r.uniformity = 0.25;
  r.wall_ms = 12.5;
  MetricsRow plain = row(10, 3.0);
  write_metrics(dir / "m.jsonl", {r, plain});
  const auto back = read_metrics(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].to_json_line(), r.to_json_line());
  EXPECT_EQ(back[1].to_json_line(), plain.to_json_line());
}

TEST(MultigoalReport, MarkersAndCoverageAgree) {
  RunConfig c;
  c.env = "multigoal6";
  c.actor_hidden = {16, 16};
  c.critic_hidden = {16, 16};
  Trainer t(c);
  const MultigoalReport r = multigoal_report(t.policy(), t.params(), 6, 12, 3);
  EXPECT_EQ(count_of(r.svg, "class=\"goal\""), 6u);
  EXPECT_EQ(count_of(r.svg, "class=\"traj\""), 12u);
  const auto j = nlohmann::json::parse(r.json);
  EXPECT_EQ(j["coverage"], r.coverage.coverage);
  EXPECT_EQ(j["counts"].get<std::vector<int>>(), r.coverage.counts);
  EXPECT_EQ(j["n_traj"], 12);
  const ModeCoverage direct = mode_coverage(r.rollouts.trajectories, 6);
  EXPECT_EQ(direct.counts, r.coverage.counts);
  const MultigoalReport again = multigoal_report(t.policy(), t.params(), 6, 12, 3);
  EXPECT_EQ(again.svg, r.svg);
}

TEST(MultigoalReport, CheckpointMustMatchConfig) {
  RunConfig c;
  c.env = "multigoal4";
  c.actor_hidden = {16, 16};
  c.critic_hidden = {16, 16};
  Trainer t(c);
  const fs::path dir = qfd::testing::scratch_dir("mg_ckpt");
  checkpoint_save(dir / "m.ckpt", t.checkpoint());
  const MultigoalReport r = multigoal_report(dir / "m.ckpt", c, 4, 5, 0);
  const MultigoalReport direct = multigoal_report(t.policy(), t.params(), 4, 5, 0);
  EXPECT_EQ(r.json, direct.json);
  RunConfig wider = c;
  wider.actor_hidden = {32, 16};
  EXPECT_THROW(multigoal_report(dir / "m.ckpt", wider, 4, 5, 0), CheckpointError);
}

TEST(LangevinDemo, OutputsAgree) {
  const LangevinDemo d = langevin_demo("doublewell", 20000, 0.25, 1, 20);
  EXPECT_EQ(d.hist.counts.size(), 20u);
  EXPECT_LT(d.tv, 0.1);
  EXPECT_EQ(count_of(d.csv, "\n"), 21u);
  EXPECT_EQ(d.csv.rfind("bin_center,empirical,reference\n", 0), 0u);
  EXPECT_EQ(d.svg.rfind("<svg", 0), 0u);
  EXPECT_THROW(langevin_demo("ring", 10, 0.25, 1), std::invalid_argument);
}

TEST(Cli, ExitCodesAndOutputs) {
  if (!std::getenv("QFD_CLI")) GTEST_SKIP() << "QFD_CLI not set";
  const fs::path dir = qfd::testing::scratch_dir("cli");
  spit(dir / "small.json", small_config_json);
  spit(dir / "broken.json", "{\n\"env\": \n");

  EXPECT_EQ(run_cli("", dir).code, 2);
  EXPECT_EQ(run_cli("train --bogus", dir).code, 2);
  EXPECT_EQ(run_cli("train --config broken.json", dir).code, 2);
  EXPECT_EQ(run_cli("train --config small.json --env cartpole", dir).code, 2);
  EXPECT_EQ(run_cli("train --config small.json --eta -1", dir).code, 2);

  const CliResult fit = run_cli("fit-schedule --steps 5", dir);
  ASSERT_EQ(fit.code, 0);
  const auto f = nlohmann::json::parse(fit.out);
  EXPECT_NEAR(f["c"].get<double>(), 0.396, 0.005);
  EXPECT_NEAR(f["d"].get<double>(), -1.802, 0.005);
  EXPECT_EQ(f["alphas"].size(), 5u);

  const CliResult tr = run_cli("train --config small.json --seed 2 --out run", dir);
  ASSERT_EQ(tr.code, 0);
  EXPECT_EQ(nlohmann::json::parse(tr.out)["step"], 40);
  for (const char* name : {"config.json", "metrics.jsonl", "final.ckpt", "report.json", "MANIFEST"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / name)) << name;
  }
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "run" / "config.json"))["seed"], 2);

  const CliResult ev = run_cli("eval --checkpoint run/final.ckpt --episodes 3", dir);
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(nlohmann::json::parse(ev.out)["episodes"], 3);
  EXPECT_EQ(run_cli("eval --checkpoint run/missing.ckpt", dir).code, 1);

  const CliResult mg = run_cli("multigoal-report --checkpoint run/final.ckpt --n-traj 8 --out mg", dir);
  ASSERT_EQ(mg.code, 0);
  EXPECT_EQ(count_of(slurp(dir / "mg" / "multigoal.svg"), "class=\"goal\""), 4u);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "mg" / "multigoal.json"))["n_traj"], 8);

  ASSERT_EQ(run_cli("plot run/metrics.jsonl --out curve.svg", dir).code, 0);
  EXPECT_EQ(slurp(dir / "curve.svg").rfind("<svg", 0), 0u);
  spit(dir / "empty.jsonl", "");
  EXPECT_EQ(run_cli("plot empty.jsonl", dir).code, 1);

  const CliResult lg = run_cli("langevin-demo --samples 2000 --bins 10 --out lang", dir);
  ASSERT_EQ(lg.code, 0);
  EXPECT_TRUE(fs::exists(dir / "lang" / "doublewell.csv"));
  EXPECT_TRUE(fs::exists(dir / "lang" / "doublewell.svg"));
}
