#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qfd/critic.hpp"
#include "qfd/diffusion_policy.hpp"
#include "qfd/envs.hpp"
#include "qfd/ndmath.hpp"
#include "qfd/policy_opt.hpp"
#include "qfd/rng.hpp"
#include "qfd/schedule.hpp"

namespace qfd {

/// Every knob of a training run. Defaults follow the published
/// hyperparameters except for the desk-scale replay sizes.
struct RunConfig {
  std::string env = "bandit-doublewell";
  std::uint64_t seed = 0;
  long total_steps = 30000;  // environment steps after warm-up

  // diffusion policy
  int diffusion_steps = 5;
  double b_min = 0.1;
  double b_max = 10.0;
  std::vector<std::size_t> actor_hidden = {256, 256};
  std::string actor_activation = "mish";
  std::size_t time_embed_dim = 16;

  // critic
  std::vector<std::size_t> critic_hidden = {256, 256};
  std::string critic_activation = "gelu";
  bool distributional = false;

  // actor objective
  std::optional<double> eta;  // unset: per-environment default
  bool field_loss = true;
  bool time_weight = true;
  bool normalize_q_grad = true;

  // optimisation
  std::size_t batch_size = 256;
  double gamma = 0.99;
  double rho = 0.005;
  double lr_actor = 1e-4;
  double lr_critic = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int policy_delay = 2;
  double reward_scale = 0.2;

  // entropy regulator
  double noise_scale = 0.1;  // lambda
  double alpha_init = 1.0;
  double alpha_lr = 3e-2;
  long alpha_update_period = 10000;
  std::optional<double> target_entropy;  // unset: -dim(A)
  int gmm_components = 3;
  int gmm_action_samples = 200;
  int entropy_mc_samples = 1000;

  // replay
  std::size_t buffer_capacity = 100000;
  long warmup_steps = 2000;

  // reporting
  long eval_every = 5000;
  int eval_episodes = 10;
  bool log_wall_time = false;

  double resolved_eta() const;
  double resolved_target_entropy(std::size_t action_dim) const;
  void validate() const;
};

/// Calls f(key, member) for every serialised field, in file order. Shared by
/// the JSON writer and the config parser so the two cannot drift apart.
template <class Config, class F>
void visit_config_fields(Config& c, F&& f) {
  f("env", c.env);
  f("seed", c.seed);
  f("total_steps", c.total_steps);
  f("diffusion_steps", c.diffusion_steps);
  f("b_min", c.b_min);
  f("b_max", c.b_max);
  f("actor_hidden", c.actor_hidden);
  f("actor_activation", c.actor_activation);
  f("time_embed_dim", c.time_embed_dim);
  f("critic_hidden", c.critic_hidden);
  f("critic_activation", c.critic_activation);
  f("distributional", c.distributional);
  f("eta", c.eta);
  f("field_loss", c.field_loss);
  f("time_weight", c.time_weight);
  f("normalize_q_grad", c.normalize_q_grad);
  f("batch_size", c.batch_size);
  f("gamma", c.gamma);
  f("rho", c.rho);
  f("lr_actor", c.lr_actor);
  f("lr_critic", c.lr_critic);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("policy_delay", c.policy_delay);
  f("reward_scale", c.reward_scale);
  f("noise_scale", c.noise_scale);
  f("alpha_init", c.alpha_init);
  f("alpha_lr", c.alpha_lr);
  f("alpha_update_period", c.alpha_update_period);
  f("target_entropy", c.target_entropy);
  f("gmm_components", c.gmm_components);
  f("gmm_action_samples", c.gmm_action_samples);
  f("entropy_mc_samples", c.entropy_mc_samples);
  f("buffer_capacity", c.buffer_capacity);
  f("warmup_steps", c.warmup_steps);
  f("eval_every", c.eval_every);
  f("eval_episodes", c.eval_episodes);
  f("log_wall_time", c.log_wall_time);
}

/// Pretty JSON of the config with eta and target entropy resolved.
std::string config_to_json(const RunConfig& config);

/// Default field-loss weight: 1.0 for low-dimensional tasks, 0.01 above six
/// action dimensions.
double default_eta_for(const std::string& env_name);

struct Transition {
  Vec s;
  Vec a;
  double r = 0.0;
  Vec s2;
  bool done = false;
};

struct Batch {
  Mat s;
  Mat a;
  Mat r;     // [B, 1]
  Mat s2;
  Mat done;  // [B, 1]
  std::vector<std::size_t> indices;
};

/// Fixed-capacity ring buffer with FIFO eviction and uniform sampling.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t state_dim, std::size_t action_dim);

  void push(const Transition& t);
  Batch sample(std::size_t n, Rng& rng) const;
  Transition at(std::size_t i) const;

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t total_pushed() const { return pushed_; }

 private:
  std::size_t capacity_;
  std::size_t state_dim_;
  std::size_t action_dim_;
  Mat s_, a_, s2_;
  Vec r_, done_;
  std::size_t size_ = 0;
  std::size_t head_ = 0;
  std::size_t pushed_ = 0;
};

/// Fills the buffer with n transitions from uniform actions in [-1, 1],
/// restarting episodes as they end. Rewards are multiplied by `reward_scale`.
/// Returns the number of transitions pushed.
long warmup(Env& env, ReplayBuffer& buffer, long n, double reward_scale, Rng& env_rng, Rng& action_rng);

struct EvalResult {
  double tar_mean = 0.0;
  double tar_std = 0.0;
  std::vector<Trajectory> trajectories;
};

/// Noise-free rollouts of `n_episodes` environment copies stepped in lockstep
/// so the policy runs batched. Returns are unscaled.
EvalResult evaluate(const DiffusionPolicy& policy, const ParamStore& params, const Env& env, int n_episodes,
                    std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ParamStore params;
  EntropyState entropy;
  DiffusionSchedule schedule{5};
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// "DCR2" | u16 version | records | u32 CRC32 of everything before it.
/// Record: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 payload,
/// all little-endian.
void checkpoint_save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint checkpoint_load(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricsRow {
  long step = 0;
  std::string env;
  double tar_mean = 0.0;
  double tar_std = 0.0;
  double loss_q = 0.0;
  double loss_g = 0.0;
  double loss_critic = 0.0;
  double alpha = 0.0;
  double entropy_est = 0.0;
  std::optional<int> coverage;
  std::optional<double> uniformity;
  std::optional<double> wall_ms;

  std::string to_json_line() const;
};

/// Owns all training state for one run. `step()` performs one environment
/// step plus the updates that follow it.
class Trainer {
 public:
  explicit Trainer(RunConfig config);

  void warm_up();
  void step();
  EvalResult evaluate_now(int episodes);
  double estimate_entropy();
  MetricsRow metrics_row(const EvalResult& eval);

  const RunConfig& config() const { return config_; }
  const DiffusionPolicy& policy() const { return policy_; }
  const CriticPair& critic() const { return critic_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  const EntropyState& entropy() const { return entropy_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const Env& env() const { return *env_; }
  Checkpoint checkpoint() const;

  long env_steps() const { return env_steps_; }
  long critic_updates() const { return critic_updates_; }
  long actor_updates() const { return actor_updates_; }
  long episodes() const { return episodes_; }
  double last_loss_q() const { return last_loss_q_; }
  double last_loss_g() const { return last_loss_g_; }
  double last_loss_critic() const { return last_loss_critic_; }

 private:
  void update();

  RunConfig config_;
  std::unique_ptr<Env> env_;
  DiffusionPolicy policy_;
  CriticPair critic_;
  ParamStore params_;
  AdamMoments actor_moments_;
  AdamMoments critic_moments_;
  EntropyState entropy_;
  ReplayBuffer buffer_;
  FieldLossOptions field_options_;

  Rng env_rng_;
  Rng explore_rng_;
  Rng buffer_rng_;
  Rng tsample_rng_;
  Rng gmm_rng_;
  Rng update_rng_;

  Vec state_;
  long env_steps_ = 0;
  long critic_updates_ = 0;
  long actor_updates_ = 0;
  long episodes_ = 0;
  long evals_ = 0;
  double last_loss_q_ = 0.0;
  double last_loss_g_ = 0.0;
  double last_loss_critic_ = 0.0;
};

struct TrainResult {
  std::filesystem::path run_dir;
  std::vector<MetricsRow> metrics;
  EvalResult final_eval;
};

/// Full run: warm-up, training loop, periodic metrics, final checkpoint and
/// report. Writes config.json, metrics.jsonl, final.ckpt, report.json and
/// MANIFEST into `run_dir`.
TrainResult train(const RunConfig& config, const std::filesystem::path& run_dir);

}  // namespace qfd
