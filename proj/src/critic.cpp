#include "qfd/critic.hpp"

#include <cmath>
#include <numbers>

#include "qfd/diffusion_policy.hpp"

namespace qfd {

namespace {

Mat concat(const Mat& s, const Mat& a) {
  Mat x(s.rows(), s.cols() + a.cols());
  x << s, a;
  return x;
}

}  // namespace

CriticPair::CriticPair(std::size_t state_dim, std::size_t action_dim, std::vector<std::size_t> hidden,
                       Activation activation, bool distributional)
    : state_dim_(state_dim), action_dim_(action_dim), distributional_(distributional) {
  spec_.layer_widths.push_back(state_dim + action_dim);
  spec_.layer_widths.insert(spec_.layer_widths.end(), hidden.begin(), hidden.end());
  spec_.layer_widths.push_back(distributional ? 2 : 1);
  spec_.hidden_activation = activation;
  spec_.validate();
}

std::string CriticPair::prefix(CriticHead head) {
  switch (head) {
    case CriticHead::Q1: return "critic1";
    case CriticHead::Q2: return "critic2";
    case CriticHead::Target1: return "target1";
    case CriticHead::Target2: return "target2";
  }
  return "?";
}

void CriticPair::init(ParamStore& params, Rng& rng) const {
  mlp_init(spec_, prefix(CriticHead::Q1), params, rng);
  mlp_init(spec_, prefix(CriticHead::Q2), params, rng);
  for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
    for (auto [online, target] : {std::pair{CriticHead::Q1, CriticHead::Target1},
                                  std::pair{CriticHead::Q2, CriticHead::Target2}}) {
      params.set(weight_name(prefix(target), l), params.at(weight_name(prefix(online), l)));
      params.set(bias_name(prefix(target), l), params.at(bias_name(prefix(online), l)));
    }
  }
}

Mat CriticPair::forward(const ParamStore& params, CriticHead head, const Mat& states, const Mat& actions) const {
  if (static_cast<std::size_t>(states.cols()) != state_dim_ || static_cast<std::size_t>(actions.cols()) != action_dim_ ||
      states.rows() != actions.rows()) {
    throw MathError("critic expects states [B, " + std::to_string(state_dim_) + "] and actions [B, " +
                    std::to_string(action_dim_) + "], got " + shape_str(states) + " and " + shape_str(actions));
  }
  return mlp_forward(spec_, params, prefix(head), concat(states, actions));
}

Mat CriticPair::q(const ParamStore& params, CriticHead head, const Mat& states, const Mat& actions) const {
  Mat out = forward(params, head, states, actions);
  if (distributional_) return out.leftCols(1);
  return out;
}

Var CriticPair::record(Tape& tape, const ParamStore& params, CriticHead head, Var states, Var actions,
                       bool trainable) const {
  Var x = tape.concat_cols({states, actions});
  return mlp_forward(spec_, params, prefix(head), tape, x, trainable);
}

Var CriticPair::record_mean(Tape& tape, const ParamStore& params, CriticHead head, Var states, Var actions,
                            bool trainable) const {
  Var out = record(tape, params, head, states, actions, trainable);
  return distributional_ ? tape.slice_cols(out, 0, 1) : out;
}

std::vector<std::string> CriticPair::online_names(const ParamStore& params) const {
  auto a = params.names(prefix(CriticHead::Q1) + "/");
  auto b = params.names(prefix(CriticHead::Q2) + "/");
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Mat OnlineCritic::min_q(const Mat& states, const Mat& actions) const {
  return pair_.q(params_, CriticHead::Q1, states, actions)
      .cwiseMin(pair_.q(params_, CriticHead::Q2, states, actions));
}

Var OnlineCritic::record_min_q(Tape& tape, Var states, Var actions) const {
  Var q1 = pair_.record_mean(tape, params_, CriticHead::Q1, states, actions, false);
  Var q2 = pair_.record_mean(tape, params_, CriticHead::Q2, states, actions, false);
  return tape.min(q1, q2);
}

Mat td_target_from_values(const Mat& rewards, const Mat& dones, const Mat& q1_target, const Mat& q2_target,
                          double gamma) {
  const Mat not_done = (1.0 - dones.array()).matrix();
  Mat y = rewards + gamma * not_done.cwiseProduct(q1_target.cwiseMin(q2_target));
  if (!all_finite(y)) throw MathError("non-finite TD target");
  return y;
}

Mat td_target(const CriticPair& pair, const ParamStore& params, const DiffusionPolicy& policy, const Mat& rewards,
              const Mat& next_states, const Mat& dones, double gamma, Rng& rng) {
  const Mat next_actions = sample_action(policy, params, next_states, rng).a0;
  const Mat q1 = pair.q(params, CriticHead::Target1, next_states, next_actions);
  const Mat q2 = pair.q(params, CriticHead::Target2, next_states, next_actions);
  return td_target_from_values(rewards, dones, q1, q2, gamma);
}

Mat gaussian_nll(const Mat& mean, const Mat& stddev, const Mat& y) {
  if ((stddev.array() <= 0.0).any()) throw MathError("Gaussian NLL needs std > 0");
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  return (half_log_2pi + stddev.array().log() + (y - mean).array().square() / (2.0 * stddev.array().square()))
      .matrix();
}

CriticLoss critic_loss(const CriticPair& pair, const ParamStore& params, const Mat& states, const Mat& actions,
                       const Mat& targets) {
  if (targets.rows() != states.rows() || targets.cols() != 1) {
    throw MathError("critic targets must be [B, 1], got " + shape_str(targets));
  }
  Tape tape;
  Var s = tape.constant(states);
  Var a = tape.constant(actions);
  Var y = tape.constant(targets);
  CriticLoss out;
  Var losses[2];
  const CriticHead heads[2] = {CriticHead::Q1, CriticHead::Q2};
  for (int i = 0; i < 2; ++i) {
    Var head = pair.record(tape, params, heads[i], s, a, true);
    if (!pair.distributional()) {
      losses[i] = tape.mean(tape.square(tape.sub(head, y)));
    } else {
      Var mean = tape.slice_cols(head, 0, 1);
      Var sd = tape.add(tape.act(tape.slice_cols(head, 1, 1), Activation::Softplus),
                        tape.constant(Mat::Constant(states.rows(), 1, CriticPair::kStdFloor)));
      if ((tape.value(sd).array() <= 0.0).any()) throw MathError("critic produced std <= 0");
      Var quad = tape.div(tape.square(tape.sub(y, mean)), tape.scale(tape.square(sd), 2.0));
      Var nll = tape.add(tape.log(sd), quad);
      losses[i] = tape.add(tape.mean(nll), tape.constant(Mat::Constant(1, 1, 0.5 * std::log(2.0 * std::numbers::pi))));
    }
  }
  out.loss1 = tape.scalar(losses[0]);
  out.loss2 = tape.scalar(losses[1]);
  Var total = tape.add(losses[0], losses[1]);
  out.grads = tape.backward(total);
  return out;
}

void soft_update(const CriticPair& pair, ParamStore& params, double rho) {
  if (rho < 0.0 || rho > 1.0) throw MathError("soft update rate must lie in [0, 1]");
  for (auto [online, target] : {std::pair{CriticHead::Q1, CriticHead::Target1},
                                std::pair{CriticHead::Q2, CriticHead::Target2}}) {
    for (std::size_t l = 0; l < pair.spec().layer_count(); ++l) {
      for (const auto& name_of : {weight_name, bias_name}) {
        const Array& src = params.at(name_of(CriticPair::prefix(online), l));
        Array& dst = params.at(name_of(CriticPair::prefix(target), l));
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = rho * src[i] + (1.0 - rho) * dst[i];
      }
    }
  }
}

Mat q_grad(const Critic& critic, const Mat& states, const Mat& actions) {
  Tape tape;
  Var s = tape.constant(states);
  Var a = tape.input(actions);
  Var q = critic.record_min_q(tape, s, a);
  // Rows are independent, so the gradient of the batch sum is per-row exact.
  Gradients g = tape.backward(tape.sum(q));
  const Mat& out = g.input(a);
  if (!all_finite(out)) throw MathError("non-finite action gradient");
  return out;
}

Mat normalize_grad(const Mat& g, double eps) {
  Mat out = g;
  for (Eigen::Index r = 0; r < g.rows(); ++r) out.row(r) /= (g.row(r).norm() + eps);
  return out;
}

}  // namespace qfd
