#include "qfd/cli_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace qfd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

std::string type_name(const json& v) { return v.type_name(); }

[[noreturn]] void type_error(const std::string& path, const std::string& expected, const json& v) {
  throw ConfigError("config key '" + path + "': expected " + expected + ", got " + type_name(v) + " (" + v.dump() + ")");
}

void read_value(const json& v, const std::string& path, std::string& out) {
  if (!v.is_string()) type_error(path, "string", v);
  out = v.get<std::string>();
}

void read_value(const json& v, const std::string& path, bool& out) {
  if (!v.is_boolean()) type_error(path, "boolean", v);
  out = v.get<bool>();
}

void read_value(const json& v, const std::string& path, double& out) {
  if (!v.is_number()) type_error(path, "number", v);
  out = v.get<double>();
}

template <class Int>
  requires std::is_integral_v<Int>
void read_value(const json& v, const std::string& path, Int& out) {
  if (!v.is_number_integer()) type_error(path, "integer", v);
  if constexpr (std::is_unsigned_v<Int>) {
    if (v.is_number_unsigned()) {
      out = static_cast<Int>(v.get<std::uint64_t>());
      return;
    }
    type_error(path, "non-negative integer", v);
  } else {
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<Int>::min() || x > std::numeric_limits<Int>::max()) {
      type_error(path, "integer in range", v);
    }
    out = static_cast<Int>(x);
  }
}

void read_value(const json& v, const std::string& path, std::optional<double>& out) {
  if (v.is_null()) {
    out.reset();
    return;
  }
  double x = 0.0;
  read_value(v, path, x);
  out = x;
}

void read_value(const json& v, const std::string& path, std::vector<std::size_t>& out) {
  if (!v.is_array()) type_error(path, "array of integers", v);
  out.clear();
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t w = 0;
    read_value(v[i], path + "[" + std::to_string(i) + "]", w);
    out.push_back(w);
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& source) {
  RunConfig config;
  if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) return config;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // byte offset -> line number
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw ConfigError(source + ": parse error at line " + std::to_string(line) + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(source + ": top level must be a JSON object, got " + type_name(j));
  std::set<std::string> known;
  visit_config_fields(config, [&](const char* key, auto& field) {
    known.insert(key);
    if (auto it = j.find(key); it != j.end()) read_value(*it, key, field);
  });
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(source + ": unknown config key '" + key + "'");
  }
  return config;
}

void apply_overrides(RunConfig& config, const ConfigOverrides& o) {
  if (o.env) config.env = *o.env;
  if (o.seed) config.seed = *o.seed;
  if (o.steps) config.total_steps = *o.steps;
  if (o.diffusion_steps) config.diffusion_steps = *o.diffusion_steps;
  if (o.eta) config.eta = *o.eta;
  if (o.no_field_loss) config.field_loss = false;
  if (o.no_time_weight) config.time_weight = false;
  if (o.distributional) config.distributional = true;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides) {
  RunConfig config;
  if (path) {
    std::ifstream f(*path);
    if (!f) throw ConfigError("cannot read config file " + path->string());
    std::stringstream ss;
    ss << f.rdbuf();
    config = parse_config_text(ss.str(), path->string());
  }
  apply_overrides(config, overrides);
  try {
    config.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return config;
}

// ---------------------------------------------------------------------------
// Curves

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read metrics file " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      MetricsRow r;
      r.step = j.at("step").get<long>();
      r.env = j.at("env").get<std::string>();
      r.tar_mean = j.at("tar_mean").get<double>();
      r.tar_std = j.at("tar_std").get<double>();
      r.loss_q = j.at("loss_q").get<double>();
      r.loss_g = j.at("loss_g").get<double>();
      r.loss_critic = j.at("loss_critic").get<double>();
      r.alpha = j.at("alpha").get<double>();
      r.entropy_est = j.at("entropy_est").get<double>();
      if (j.contains("coverage")) r.coverage = j["coverage"].get<int>();
      if (j.contains("uniformity")) r.uniformity = j["uniformity"].get<double>();
      if (j.contains("wall_ms") && !j["wall_ms"].is_null()) r.wall_ms = j["wall_ms"].get<double>();
      rows.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad metrics row: " + e.what());
    }
  }
  return rows;
}

CurveSummary summarize_curves(const std::vector<std::vector<MetricsRow>>& runs) {
  if (runs.empty()) throw std::invalid_argument("no metrics to summarise");
  for (const auto& r : runs) {
    if (r.empty()) throw std::invalid_argument("a metrics series is empty");
  }
  std::map<long, std::vector<double>> by_step;
  for (const auto& run : runs) {
    std::map<long, double> seen;
    for (const auto& row : run) seen[row.step] = row.tar_mean;
    for (const auto& [step, v] : seen) by_step[step].push_back(v);
  }
  CurveSummary s;
  s.runs = runs.size();
  for (const auto& [step, values] : by_step) {
    if (values.size() != runs.size()) continue;
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    double half = 0.0;
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - mean) * (v - mean);
      half = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    s.steps.push_back(step);
    s.mean.push_back(mean);
    s.lower.push_back(mean - half);
    s.upper.push_back(mean + half);
  }
  if (s.steps.empty()) throw std::invalid_argument("metrics series share no common step");
  return s;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

struct Frame {
  double x0, x1, y0, y1;
  double width = 640, height = 400, margin = 50;
  double px(double x) const { return margin + (x - x0) / (x1 - x0) * (width - 2 * margin); }
  double py(double y) const { return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin); }
};

std::string svg_open(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::string s;
  s += "<line x1=\"" + num(f.margin) + "\" y1=\"" + num(f.height - f.margin) + "\" x2=\"" + num(f.width - f.margin) +
       "\" y2=\"" + num(f.height - f.margin) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(f.margin) + "\" y1=\"" + num(f.margin) + "\" x2=\"" + num(f.margin) + "\" y2=\"" +
       num(f.height - f.margin) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + num(f.width / 2) + "\" y=\"" + num(f.margin / 2) + "\" text-anchor=\"middle\">" +
       xml_escape(title) + "</text>\n";
  s += "<text x=\"" + num(f.width / 2) + "\" y=\"" + num(f.height - 10) + "\" text-anchor=\"middle\">" +
       xml_escape(xlabel) + "</text>\n";
  s += "<text x=\"12\" y=\"" + num(f.height / 2) + "\" transform=\"rotate(-90 12 " + num(f.height / 2) +
       ")\" text-anchor=\"middle\">" + xml_escape(ylabel) + "</text>\n";
  s += "<text x=\"" + num(f.margin) + "\" y=\"" + num(f.height - f.margin + 16) + "\" text-anchor=\"middle\">" +
       num(f.x0) + "</text>\n";
  s += "<text x=\"" + num(f.width - f.margin) + "\" y=\"" + num(f.height - f.margin + 16) +
       "\" text-anchor=\"middle\">" + num(f.x1) + "</text>\n";
  s += "<text x=\"" + num(f.margin - 4) + "\" y=\"" + num(f.height - f.margin) + "\" text-anchor=\"end\">" +
       num(f.y0) + "</text>\n";
  s += "<text x=\"" + num(f.margin - 4) + "\" y=\"" + num(f.margin + 4) + "\" text-anchor=\"end\">" + num(f.y1) +
       "</text>\n";
  return s;
}

}  // namespace

std::string curves_svg(const CurveSummary& s, const std::string& title) {
  if (s.steps.empty()) throw std::invalid_argument("nothing to plot");
  Frame f;
  f.x0 = static_cast<double>(s.steps.front());
  f.x1 = static_cast<double>(s.steps.back());
  if (f.x1 <= f.x0) f.x1 = f.x0 + 1.0;
  f.y0 = *std::min_element(s.lower.begin(), s.lower.end());
  f.y1 = *std::max_element(s.upper.begin(), s.upper.end());
  if (f.y1 - f.y0 < 1e-9) {
    f.y0 -= 0.5;
    f.y1 += 0.5;
  }
  std::string out = svg_open(f.width, f.height);
  out += axes(f, title, "step", "TAR");
  if (s.has_band()) {
    std::string pts;
    for (std::size_t i = 0; i < s.steps.size(); ++i) {
      pts += num(f.px(static_cast<double>(s.steps[i]))) + "," + num(f.py(s.upper[i])) + " ";
    }
    for (std::size_t i = s.steps.size(); i-- > 0;) {
      pts += num(f.px(static_cast<double>(s.steps[i]))) + "," + num(f.py(s.lower[i])) + " ";
    }
    out += "<polygon class=\"band\" points=\"" + pts + "\" fill=\"steelblue\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
  }
  std::string pts;
  for (std::size_t i = 0; i < s.steps.size(); ++i) {
    pts += num(f.px(static_cast<double>(s.steps[i]))) + "," + num(f.py(s.mean[i])) + " ";
  }
  out += "<polyline class=\"mean\" points=\"" + pts + "\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n";
  out += "</svg>\n";
  return out;
}

std::string plot_curves(const std::vector<std::filesystem::path>& metrics_paths, const std::string& title) {
  if (metrics_paths.empty()) throw std::invalid_argument("plot needs at least one metrics file");
  std::vector<std::vector<MetricsRow>> runs;
  for (const auto& p : metrics_paths) {
    runs.push_back(read_metrics(p));
    if (runs.back().empty()) throw std::invalid_argument(p.string() + " holds no metrics rows");
  }
  return curves_svg(summarize_curves(runs), title);
}

// ---------------------------------------------------------------------------
// Multigoal

MultigoalReport multigoal_report(const DiffusionPolicy& policy, const ParamStore& params, int num_goals, int n_traj,
                                 std::uint64_t seed) {
  MultiGoalEnv env(num_goals);
  MultigoalReport r;
  r.rollouts = evaluate(policy, params, env, n_traj, seed);
  r.coverage = mode_coverage(r.rollouts.trajectories, num_goals);

  Frame f;
  f.width = 500;
  f.height = 500;
  f.margin = 20;
  f.x0 = f.y0 = -7.0;
  f.x1 = f.y1 = 7.0;
  std::string svg = svg_open(f.width, f.height);
  for (const auto& t : r.rollouts.trajectories) {
    std::string pts;
    for (const auto& s : t.states) pts += num(f.px(s(0))) + "," + num(f.py(s(1))) + " ";
    svg += "<polyline class=\"traj\" points=\"" + pts + "\" fill=\"none\" stroke=\"steelblue\" stroke-opacity=\"0.5\"/>\n";
  }
  for (const auto& g : env.goals()) {
    svg += "<circle class=\"goal\" cx=\"" + num(f.px(g(0))) + "\" cy=\"" + num(f.py(g(1))) +
           "\" r=\"6\" fill=\"red\"/>\n";
  }
  svg += "</svg>\n";
  r.svg = std::move(svg);

  nlohmann::ordered_json j;
  j["num_goals"] = num_goals;
  j["n_traj"] = n_traj;
  j["seed"] = seed;
  j["counts"] = r.coverage.counts;
  j["coverage"] = r.coverage.coverage;
  j["uniformity"] = r.coverage.uniformity;
  j["tar_mean"] = r.rollouts.tar_mean;
  j["tar_std"] = r.rollouts.tar_std;
  r.json = j.dump(2) + "\n";
  return r;
}

DiffusionPolicy policy_from_checkpoint(const RunConfig& config, const Checkpoint& ckpt) {
  const auto env = make_env(config.env);
  DiffusionPolicy p{ScoreNet(env->spec().state_dim, env->spec().action_dim, config.actor_hidden,
                             activation_from_string(config.actor_activation), config.time_embed_dim),
                    ckpt.schedule};
  const auto& spec = p.net.spec();
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::string w = weight_name(p.net.prefix(), l);
    if (!ckpt.params.contains(w)) throw CheckpointError("checkpoint has no '" + w + "'; config does not match");
    const auto& shape = ckpt.params.at(w).shape();
    if (shape.size() != 2 || shape[0] != spec.layer_widths[l] || shape[1] != spec.layer_widths[l + 1]) {
      throw CheckpointError("'" + w + "' has shape " + shape_str(shape) + " which does not match the config");
    }
  }
  return p;
}

MultigoalReport multigoal_report(const std::filesystem::path& checkpoint, const RunConfig& config, int num_goals,
                                 int n_traj, std::uint64_t seed) {
  const Checkpoint ck = checkpoint_load(checkpoint);
  const DiffusionPolicy policy = policy_from_checkpoint(config, ck);
  return multigoal_report(policy, ck.params, num_goals, n_traj, seed);
}

// ---------------------------------------------------------------------------
// Langevin demo

LangevinDemo langevin_demo(const std::string& energy_name, int n_samples, double alpha, std::uint64_t seed,
                           int bins) {
  const Energy e = energy_by_name(energy_name);
  if (e.dim != 1) throw std::invalid_argument("langevin-demo supports 1-D energies only; '" + energy_name + "' is " +
                                              std::to_string(e.dim) + "-D");
  LangevinConfig cfg;
  cfg.alpha = alpha;
  Rng rng = make_stream(seed, Stream::Langevin);
  const Mat samples = langevin_sample(e, cfg, n_samples, rng);
  constexpr double lo = -2.0, hi = 2.0;
  LangevinDemo d;
  d.hist = histogram(samples.col(0), lo, hi, bins);
  d.reference = bin_masses(e, alpha, lo, hi, bins, -4.0 * e.domain_bound, 4.0 * e.domain_bound);
  d.tv = total_variation(d.hist, d.reference);

  std::ostringstream csv;
  csv.precision(10);
  csv << "bin_center,empirical,reference\n";
  const double n = static_cast<double>(d.hist.total);
  double ymax = 0.0;
  for (std::size_t b = 0; b < d.hist.counts.size(); ++b) {
    const double emp = d.hist.counts[b] / n;
    const double ref = d.reference(static_cast<Eigen::Index>(b));
    csv << d.hist.center(b) << "," << emp << "," << ref << "\n";
    ymax = std::max({ymax, emp, ref});
  }
  d.csv = csv.str();

  Frame f;
  f.x0 = lo;
  f.x1 = hi;
  f.y0 = 0.0;
  f.y1 = ymax > 0.0 ? 1.1 * ymax : 1.0;
  std::string svg = svg_open(f.width, f.height);
  svg += axes(f, energy_name + " alpha=" + num(alpha) + " TV=" + num(d.tv), "action", "bin mass");
  const double w = d.hist.width();
  for (std::size_t b = 0; b < d.hist.counts.size(); ++b) {
    const double x = d.hist.lo + static_cast<double>(b) * w;
    const double emp = d.hist.counts[b] / n;
    svg += "<rect x=\"" + num(f.px(x)) + "\" y=\"" + num(f.py(emp)) + "\" width=\"" + num(f.px(x + w) - f.px(x)) +
           "\" height=\"" + num(f.py(0.0) - f.py(emp)) + "\" fill=\"steelblue\" fill-opacity=\"0.6\"/>\n";
  }
  std::string pts;
  for (std::size_t b = 0; b < d.hist.counts.size(); ++b) {
    pts += num(f.px(d.hist.center(b))) + "," + num(f.py(d.reference(static_cast<Eigen::Index>(b)))) + " ";
  }
  svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>\n</svg>\n";
  d.svg = std::move(svg);
  return d;
}

}  // namespace qfd
