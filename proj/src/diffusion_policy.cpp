#include "qfd/diffusion_policy.hpp"

#include <algorithm>
#include <cmath>

namespace qfd {

ScoreNet::ScoreNet(std::size_t state_dim, std::size_t action_dim, std::vector<std::size_t> hidden,
                   Activation activation, std::size_t embed_dim, std::string prefix)
    : state_dim_(state_dim), action_dim_(action_dim), embed_dim_(embed_dim), prefix_(std::move(prefix)) {
  if (embed_dim_ % 2 != 0) throw MathError("time embedding width must be even");
  spec_.layer_widths.push_back(state_dim_ + action_dim_ + embed_dim_);
  spec_.layer_widths.insert(spec_.layer_widths.end(), hidden.begin(), hidden.end());
  spec_.layer_widths.push_back(action_dim_);
  spec_.hidden_activation = activation;
  spec_.output_activation = Activation::Identity;
  spec_.validate();
}

void ScoreNet::init(ParamStore& params, Rng& rng) const { mlp_init(spec_, prefix_, params, rng); }

Mat ScoreNet::time_embedding(int t) const { return time_embedding(std::vector<int>{t}); }

Mat ScoreNet::time_embedding(const std::vector<int>& steps) const {
  const std::size_t half = embed_dim_ / 2;
  Mat out(static_cast<Eigen::Index>(steps.size()), static_cast<Eigen::Index>(embed_dim_));
  for (std::size_t r = 0; r < steps.size(); ++r) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      const double x = steps[r] * freq;
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = std::sin(x);
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(half + k)) = std::cos(x);
    }
  }
  return out;
}

namespace {

Mat concat(const Mat& s, const Mat& a, const Mat& e) {
  Mat x(s.rows(), s.cols() + a.cols() + e.cols());
  x << s, a, e;
  return x;
}

void check_shapes(const ScoreNet& net, const Mat& s, const Mat& a) {
  if (static_cast<std::size_t>(s.cols()) != net.state_dim() || static_cast<std::size_t>(a.cols()) != net.action_dim() ||
      s.rows() != a.rows()) {
    throw MathError("score net expects states [B, " + std::to_string(net.state_dim()) + "] and actions [B, " +
                    std::to_string(net.action_dim()) + "], got " + shape_str(s) + " and " + shape_str(a));
  }
}

}  // namespace

Mat ScoreNet::eval(const ParamStore& params, const Mat& states, const Mat& actions, int t) const {
  check_shapes(*this, states, actions);
  const Mat e = time_embedding(t).replicate(states.rows(), 1);
  return mlp_forward(spec_, params, prefix_, concat(states, actions, e));
}

Mat ScoreNet::eval(const ParamStore& params, const Mat& states, const Mat& actions,
                   const std::vector<int>& steps) const {
  check_shapes(*this, states, actions);
  if (steps.size() != static_cast<std::size_t>(states.rows())) throw MathError("one step index per row required");
  return mlp_forward(spec_, params, prefix_, concat(states, actions, time_embedding(steps)));
}

Var ScoreNet::record(Tape& tape, const ParamStore& params, Var states, Var actions, const Mat& embedding,
                     bool trainable) const {
  check_shapes(*this, tape.value(states), tape.value(actions));
  Var e = tape.constant(embedding.rows() == 1 ? Mat(embedding.replicate(tape.value(states).rows(), 1)) : embedding);
  Var x = tape.concat_cols({states, actions, e});
  return mlp_forward(spec_, params, prefix_, tape, x, trainable);
}

Mat denoise_update(const DiffusionSchedule& schedule, const Mat& a_t, const Mat& score, int t, const Mat& noise) {
  const double alpha = schedule.alpha(t);
  Mat next = (a_t + score * (1.0 - alpha)) * (1.0 / std::sqrt(alpha));
  if (noise.size() != 0) next += std::sqrt(1.0 - alpha) * noise;
  return next;
}

Mat denoise_step(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states, const Mat& a_t, int t,
                 const Mat& noise) {
  const Mat score = policy.net.eval(params, states, a_t, t);
  if (!all_finite(score)) throw MathError("non-finite score at diffusion step " + std::to_string(t));
  Mat next = denoise_update(policy.schedule, a_t, score, t, noise);
  if (!all_finite(next)) throw MathError("non-finite action at diffusion step " + std::to_string(t - 1));
  return next;
}

PolicySample sample_action(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states, Rng& rng,
                           bool record_chain) {
  const Eigen::Index batch = states.rows();
  const auto adim = static_cast<Eigen::Index>(policy.action_dim());
  PolicySample out;
  Mat a = randn(batch, adim, rng);
  out.noise_draws.push_back(a);
  if (record_chain) out.chain.push_back({policy.steps(), a});
  for (int t = policy.steps(); t >= 1; --t) {
    Mat z = randn(batch, adim, rng);
    a = denoise_step(policy, params, states, a, t, z);
    out.noise_draws.push_back(std::move(z));
    if (record_chain) out.chain.push_back({t - 1, a});
  }
  out.a0_raw = a;
  out.a0 = a.cwiseMax(-1.0).cwiseMin(1.0);
  return out;
}

TapedSample sample_action_taped(const DiffusionPolicy& policy, const ParamStore& params, Tape& tape,
                                const Mat& states, Rng& rng, bool trainable) {
  const Eigen::Index batch = states.rows();
  const auto adim = static_cast<Eigen::Index>(policy.action_dim());
  TapedSample out;
  Mat aT = randn(batch, adim, rng);
  out.sample.noise_draws.push_back(aT);
  Var s = tape.constant(states);
  Var a = tape.constant(aT);
  for (int t = policy.steps(); t >= 1; --t) {
    const double alpha = policy.schedule.alpha(t);
    Var score = policy.net.record(tape, params, s, a, policy.net.time_embedding(t), trainable);
    Var mean = tape.scale(tape.add(a, tape.scale(score, 1.0 - alpha)), 1.0 / std::sqrt(alpha));
    Mat z = randn(batch, adim, rng);
    a = tape.add(mean, tape.constant(std::sqrt(1.0 - alpha) * z));
    out.sample.noise_draws.push_back(std::move(z));
  }
  out.a0_raw = a;
  out.sample.a0_raw = tape.value(a);
  out.a0 = tape.clip(a, -1.0, 1.0);
  out.sample.a0 = tape.value(out.a0);
  return out;
}

Mat sample_partial(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states, int t_stop, Rng& rng) {
  return sample_partial(policy, params, states, std::vector<int>(static_cast<std::size_t>(states.rows()), t_stop), rng);
}

Mat sample_partial(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states,
                   const std::vector<int>& t_stop, Rng& rng) {
  const Eigen::Index batch = states.rows();
  if (t_stop.size() != static_cast<std::size_t>(batch)) throw MathError("one stop step per row required");
  const int T = policy.steps();
  int lowest = T;
  for (int t : t_stop) {
    if (t < 1 || t > T) throw ScheduleError("stop step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    lowest = std::min(lowest, t);
  }
  const auto adim = static_cast<Eigen::Index>(policy.action_dim());
  Mat a = randn(batch, adim, rng);
  Mat out(batch, adim);
  auto capture = [&](int t) {
    for (Eigen::Index r = 0; r < batch; ++r) {
      if (t_stop[static_cast<std::size_t>(r)] == t) out.row(r) = a.row(r);
    }
  };
  capture(T);
  for (int t = T; t > lowest; --t) {
    a = denoise_step(policy, params, states, a, t, randn(batch, adim, rng));
    capture(t - 1);
  }
  return out;
}

Mat exploration_noise(const Mat& a0, double alpha, double lambda, Rng& rng) {
  if (lambda < 0.0 || alpha <= 0.0) throw MathError("exploration noise needs lambda >= 0 and alpha > 0");
  if (lambda == 0.0) return a0;
  Mat out = a0 + (alpha * lambda) * randn(a0.rows(), a0.cols(), rng);
  return out.cwiseMax(-1.0).cwiseMin(1.0);
}

}  // namespace qfd
