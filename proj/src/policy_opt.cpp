#include "qfd/policy_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace qfd {

// ---------------------------------------------------------------------------
// Actor losses

Var record_loss_q(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, Tape& tape,
                  const Mat& states, Rng& rng) {
  TapedSample sample = sample_action_taped(policy, params, tape, states, rng, true);
  Var s = tape.constant(states);
  Var q = critic.record_min_q(tape, s, sample.a0);
  return tape.scale(tape.mean(q), -1.0);
}

namespace {

Gradients actor_only(Gradients g, const std::string& prefix) {
  for (auto it = g.params.begin(); it != g.params.end();) {
    if (it->first.compare(0, prefix.size() + 1, prefix + "/") != 0) {
      it = g.params.erase(it);
    } else {
      ++it;
    }
  }
  return g;
}

}  // namespace

LossValue loss_q(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, const Mat& states,
                 Rng& rng) {
  Tape tape;
  Var loss = record_loss_q(policy, params, critic, tape, states, rng);
  return {tape.scalar(loss), actor_only(tape.backward(loss), policy.net.prefix())};
}

Mat field_targets(const DiffusionPolicy& policy, const Critic& critic, const Mat& states, const Mat& a_t,
                  const std::vector<int>& steps, const FieldLossOptions& options) {
  if (steps.size() != static_cast<std::size_t>(states.rows())) throw MathError("one step index per row required");
  Mat g = q_grad(critic, states, a_t);
  if (options.normalize) g = normalize_grad(g, options.eps);
  if (options.time_weight) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      g.row(r) *= policy.schedule.time_weight(steps[static_cast<std::size_t>(r)]);
    }
  }
  if (!all_finite(g)) throw MathError("non-finite Q-gradient field target");
  return g;
}

Var record_loss_g_at(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, Tape& tape,
                     const Mat& states, const Mat& a_t, const std::vector<int>& steps,
                     const FieldLossOptions& options) {
  const Mat targets = field_targets(policy, critic, states, a_t, steps, options);
  Var s = tape.constant(states);
  Var a = tape.constant(a_t);
  Var score = policy.net.record(tape, params, s, a, policy.net.time_embedding(steps), true);
  Var diff = tape.sub(score, tape.constant(targets));
  return tape.mean(tape.row_sum(tape.square(diff)));
}

Var record_loss_g(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, Tape& tape,
                  const Mat& states, Rng& t_rng, Rng& chain_rng, const FieldLossOptions& options,
                  FieldBatch* batch) {
  std::uniform_int_distribution<int> pick(1, policy.steps());
  std::vector<int> steps(static_cast<std::size_t>(states.rows()));
  for (auto& t : steps) t = pick(t_rng);
  const Mat a_t = sample_partial(policy, params, states, steps, chain_rng);
  Var loss = record_loss_g_at(policy, params, critic, tape, states, a_t, steps, options);
  if (batch) {
    batch->steps = steps;
    batch->a_t = a_t;
    batch->targets = field_targets(policy, critic, states, a_t, steps, options);
  }
  return loss;
}

LossValue loss_g(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic, const Mat& states,
                 Rng& t_rng, Rng& chain_rng, const FieldLossOptions& options) {
  Tape tape;
  Var loss = record_loss_g(policy, params, critic, tape, states, t_rng, chain_rng, options);
  return {tape.scalar(loss), actor_only(tape.backward(loss), policy.net.prefix())};
}

ActorLossReport actor_objective(const DiffusionPolicy& policy, const ParamStore& params, const Critic& critic,
                                const Mat& states, double eta, const FieldLossOptions& options, ActorRngs rngs,
                                Gradients* grads_out) {
  if (eta < 0.0) throw MathError("eta must be >= 0");
  Tape tape;
  ActorLossReport report;
  report.eta = eta;
  Var lq = record_loss_q(policy, params, critic, tape, states, rngs.chain);
  report.loss_q = tape.scalar(lq);
  Var total = lq;
  if (eta > 0.0) {
    Var lg = record_loss_g(policy, params, critic, tape, states, rngs.steps, rngs.chain, options);
    report.loss_g = tape.scalar(lg);
    total = tape.add(lq, tape.scale(lg, eta));
  }
  report.combined = tape.scalar(total);
  Gradients grads = actor_only(tape.backward(total), policy.net.prefix());
  for (const auto& [name, g] : grads.params) report.grad_norms[name] = l2_norm(g);
  if (grads_out) *grads_out = std::move(grads);
  return report;
}

ActorLossReport combined_actor_step(const DiffusionPolicy& policy, ParamStore& params, const Critic& critic,
                                    const Mat& states, double eta, const FieldLossOptions& options,
                                    AdamMoments& moments, const AdamConfig& adam, ActorRngs rngs) {
  Gradients grads;
  ActorLossReport report = actor_objective(policy, params, critic, states, eta, options, rngs, &grads);
  adam_step(params, grads.params, moments, adam);
  return report;
}

// ---------------------------------------------------------------------------
// GMM

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // ln(2 pi)

/// [N, K] matrix of log w_k + log N(x_n; mu_k, var_k).
Mat weighted_log_densities(const GmmModel& m, const Mat& x) {
  const int K = m.components();
  Mat out(x.rows(), K);
  for (int k = 0; k < K; ++k) {
    const double logw = m.weights(k) > 0.0 ? std::log(m.weights(k)) : -std::numeric_limits<double>::infinity();
    const auto var = m.variances.row(k).array();
    const double log_norm = -0.5 * (m.dim() * kLog2Pi + var.log().sum());
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
      const double maha = ((x.row(n) - m.means.row(k)).array().square() / var).sum();
      out(n, k) = logw + log_norm - 0.5 * maha;
    }
  }
  return out;
}

Vec logsumexp_rows(const Mat& a) {
  Vec out(a.rows());
  for (Eigen::Index n = 0; n < a.rows(); ++n) {
    const double mx = a.row(n).maxCoeff();
    out(n) = mx + std::log((a.row(n).array() - mx).exp().sum());
  }
  return out;
}

}  // namespace

Vec GmmModel::log_density(const Mat& x) const { return logsumexp_rows(weighted_log_densities(*this, x)); }

Mat GmmModel::sample(int n, Rng& rng) const {
  std::discrete_distribution<int> pick(weights.data(), weights.data() + weights.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat out(n, dim());
  for (int i = 0; i < n; ++i) {
    const int k = pick(rng);
    for (int j = 0; j < dim(); ++j) out(i, j) = means(k, j) + std::sqrt(variances(k, j)) * normal(rng);
  }
  return out;
}

GmmFit fit_gmm(const Mat& actions, int components, int max_iters, double tol, Rng& rng, double variance_floor) {
  const Eigen::Index N = actions.rows();
  const Eigen::Index d = actions.cols();
  if (components < 1) throw MathError("GMM needs at least one component");
  if (N < components) {
    throw MathError("GMM with " + std::to_string(components) + " components needs at least that many points, got " +
                    std::to_string(N));
  }

  // k-means++ seeding
  std::vector<Eigen::Index> centers;
  std::uniform_int_distribution<Eigen::Index> first(0, N - 1);
  centers.push_back(first(rng));
  Vec dist2 = (actions.rowwise() - actions.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < components) {
    const double total = dist2.sum();
    if (!(total > 0.0)) break;
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    Eigen::Index chosen = N - 1;
    for (Eigen::Index i = 0; i < N; ++i) {
      r -= dist2(i);
      if (r <= 0.0 && dist2(i) > 0.0) {
        chosen = i;
        break;
      }
    }
    centers.push_back(chosen);
    dist2 = dist2.cwiseMin((actions.rowwise() - actions.row(chosen)).rowwise().squaredNorm());
  }

  const int K = static_cast<int>(centers.size());
  GmmFit fit;
  GmmModel& m = fit.model;
  m.weights = Vec::Constant(K, 1.0 / K);
  m.means.resize(K, d);
  for (int k = 0; k < K; ++k) m.means.row(k) = actions.row(centers[static_cast<std::size_t>(k)]);
  const Eigen::RowVectorXd mean = actions.colwise().mean();
  Eigen::RowVectorXd var = ((actions.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(N));
  var = var.cwiseMax(variance_floor);
  m.variances = var.replicate(K, 1);

  double prev = -std::numeric_limits<double>::infinity();
  bool converged = false;
  for (int it = 0; it < max_iters; ++it) {
    const Mat logp = weighted_log_densities(m, actions);
    const Vec lse = logsumexp_rows(logp);
    const double ll = lse.sum();
    fit.log_likelihood.push_back(ll);
    fit.iterations = it + 1;
    if (it > 0 && (ll - prev) <= tol * static_cast<double>(N)) {
      converged = true;
      break;
    }
    prev = ll;

    const Mat resp = (logp.colwise() - lse).array().exp().matrix();
    const Vec nk = resp.colwise().sum().transpose();
    for (int k = 0; k < K; ++k) {
      m.weights(k) = nk(k) / static_cast<double>(N);
      if (nk(k) < 1e-300) continue;
      const Eigen::RowVectorXd mu = (resp.col(k).transpose() * actions) / nk(k);
      const Mat centered = actions.rowwise() - mu;
      Eigen::RowVectorXd v = (resp.col(k).transpose() * centered.cwiseAbs2()) / nk(k);
      m.means.row(k) = mu;
      m.variances.row(k) = v.cwiseMax(variance_floor);
    }
  }
  if (!converged) {
    fit.log_likelihood.push_back(m.log_density(actions).sum());
  }
  return fit;
}

double gmm_entropy(const GmmModel& model, int n_mc, Rng& rng) {
  if (n_mc < 1) throw MathError("entropy estimate needs at least one sample");
  const Mat x = model.sample(n_mc, rng);
  return -model.log_density(x).mean();
}

void alpha_update(EntropyState& state, double estimate) {
  state.last_estimate = estimate;
  state.alpha = std::clamp(state.alpha - state.alpha_lr * (estimate - state.target_entropy), state.alpha_min,
                           state.alpha_max);
}

bool alpha_update_at(EntropyState& state, double estimate, long step) {
  if (step <= 0 || state.update_period <= 0 || step % state.update_period != 0) return false;
  alpha_update(state, estimate);
  return true;
}

}  // namespace qfd
