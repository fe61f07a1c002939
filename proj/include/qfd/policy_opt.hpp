#pragma once

#include <map>
#include <string>
#include <vector>

#include "qfd/critic.hpp"
#include "qfd/diffusion_policy.hpp"
#include "qfd/ndmath.hpp"
#include "qfd/rng.hpp"

namespace qfd {

// ---------------------------------------------------------------------------
// Actor losses

/// Knobs for the Q-gradient field target. `time_weight` and `normalize` are
/// the two ablation switches.
struct FieldLossOptions {
  bool time_weight = true;
  bool normalize = true;
  double eps = 1e-6;
};

struct LossValue {
  double value = 0.0;
  /// Gradients for the actor parameters only.
  Gradients grads;
};

/// mean over the batch of -min(Q1, Q2)(s, a0(theta)), differentiated through
/// every denoising step.
Var record_loss_q(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, Tape& tape,
                  const Mat& states, Rng& rng);
LossValue loss_q(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, const Mat& states,
                 Rng& rng);

/// Per-row regression targets w(t) * normalize(grad_a Q(s, a_t)).
Mat field_targets(const DiffusionPolicy& policy, const Critic& critic, const Mat& states, const Mat& a_t,
                  const std::vector<int>& steps, const FieldLossOptions& options);

/// Sampled inputs of one field-loss evaluation; kept for inspection.
struct FieldBatch {
  std::vector<int> steps;
  Mat a_t;
  Mat targets;
};

/// Draws t ~ U{1..T} per state from `t_rng`, a_t by partial sampling from
/// `chain_rng`, builds detached targets and records
/// mean_b ||target_b - S(s_b, a_t_b, t_b)||^2 on the tape.
Var record_loss_g(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, Tape& tape,
                  const Mat& states, Rng& t_rng, Rng& chain_rng, const FieldLossOptions& options,
                  FieldBatch* batch = nullptr);

/// The same loss for caller-supplied (t, a_t) pairs.
Var record_loss_g_at(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, Tape& tape,
                     const Mat& states, const Mat& a_t, const std::vector<int>& steps,
                     const FieldLossOptions& options);

LossValue loss_g(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, const Mat& states,
                 Rng& t_rng, Rng& chain_rng, const FieldLossOptions& options = {});

struct ActorLossReport {
  double loss_q = 0.0;
  double loss_g = 0.0;
  double combined = 0.0;
  double eta = 0.0;
  std::map<std::string, double> grad_norms;
};

struct ActorRngs {
  Rng& chain;
  Rng& steps;
};

/// Computes the actor objective and its gradient without applying it. With
/// eta == 0 the field loss is skipped entirely.
ActorLossReport actor_objective(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic,
                                const Mat& states, double eta, const FieldLossOptions& options, ActorRngs rngs,
                                Gradients* grads_out);

/// One Adam step on L_q + eta * L_g.
ActorLossReport combined_actor_step(const DiffusionPolicy& policy, ParamStore& params, const Critic& critic,
                                    const Mat& states, double eta, const FieldLossOptions& options,
                                    AdamMoments& moments, const AdamConfig& adam, ActorRngs rngs);

// ---------------------------------------------------------------------------
// GMM entropy regulator

struct GmmModel {
  Vec weights;    // [K]
  Mat means;      // [K, d]
  Mat variances;  // [K, d], diagonal

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
  Vec log_density(const Mat& x) const;
  Mat sample(int n, Rng& rng) const;
};

struct GmmFit {
  GmmModel model;
  /// Data log-likelihood (sum over points) before each M-step, plus the final value.
  std::vector<double> log_likelihood;
  int iterations = 0;
};

/// EM for a diagonal mixture with k-means++ seeding. Variances are clamped to
/// `variance_floor`. Identical data collapses to fewer components.
GmmFit fit_gmm(const Mat& actions, int components, int max_iters, double tol, Rng& rng,
               double variance_floor = 1e-6);

/// Monte Carlo entropy -(1/n) sum log p(x_i), x_i drawn from the model.
double gmm_entropy(const GmmModel& model, int n_mc, Rng& rng);

struct EntropyState {
  double alpha = 1.0;
  double target_entropy = -1.0;
  double last_estimate = 0.0;
  long update_period = 10000;
  double alpha_lr = 3e-2;
  double alpha_min = 1e-3;
  double alpha_max = 10.0;
};

/// alpha <- clamp(alpha - lr * (estimate - target), [alpha_min, alpha_max]).
void alpha_update(EntropyState& state, double estimate);

/// Applies alpha_update when `step` is a positive multiple of the update period.
bool alpha_update_at(EntropyState& state, double estimate, long step);

}  // namespace qfd
