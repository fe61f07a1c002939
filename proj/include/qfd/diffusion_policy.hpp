#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qfd/ndmath.hpp"
#include "qfd/rng.hpp"
#include "qfd/schedule.hpp"

namespace qfd {

/// Score network S(s, a_t, t): an MLP over [s, a_t, embed(t)] returning a
/// vector with the action's dimension.
class ScoreNet {
 public:
  ScoreNet(std::size_t state_dim, std::size_t action_dim, std::vector<std::size_t> hidden,
           Activation activation = Activation::Mish, std::size_t embed_dim = 16,
           std::string prefix = "actor");

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t embed_dim() const { return embed_dim_; }
  const MlpSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParamStore& params, Rng& rng) const;

  /// Sinusoidal embedding of the step index: [sin(t f_k), cos(t f_k)] with
  /// f_k = 10000^(-k / (E/2)).
  Mat time_embedding(int t) const;
  Mat time_embedding(const std::vector<int>& steps) const;

  Mat eval(const ParamStore& params, const Mat& states, const Mat& actions, int t) const;
  Mat eval(const ParamStore& params, const Mat& states, const Mat& actions, const std::vector<int>& steps) const;

  Var record(Tape& tape, const ParamStore& params, Var states, Var actions, const Mat& embedding,
             bool trainable = true) const;

 private:
  std::size_t state_dim_;
  std::size_t action_dim_;
  std::size_t embed_dim_;
  MlpSpec spec_;
  std::string prefix_;
};

struct DiffusionPolicy {
  ScoreNet net;
  DiffusionSchedule schedule;

  int steps() const { return schedule.steps(); }
  std::size_t action_dim() const { return net.action_dim(); }
};

struct ChainState {
  int t;
  Mat action;
};

struct PolicySample {
  /// Final actions, clipped to [-1, 1].
  Mat a0;
  /// Final actions before clipping.
  Mat a0_raw;
  /// (t, a_t) for t = T..0 when recorded; the t = 0 entry is unclipped.
  std::vector<ChainState> chain;
  /// a_T first, then the per-step noise for t = T..1.
  std::vector<Mat> noise_draws;
};

/// a_{t-1} = (a_t + (1 - alpha_t) S(s, a_t, t)) / sqrt(alpha_t) + sqrt(1 - alpha_t) z.
/// Pass an empty `noise` matrix for z = 0.
Mat denoise_step(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states, const Mat& a_t,
                 int t, const Mat& noise);

/// Same update computed from an explicit score value (used by tests and by
/// the taped chain so both share one formula).
Mat denoise_update(const DiffusionSchedule& schedule, const Mat& a_t, const Mat& score, int t, const Mat& noise);

PolicySample sample_action(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states, Rng& rng,
                           bool record_chain = false);

struct TapedSample {
  Var a0;
  /// Chain output before the final clip.
  Var a0_raw;
  PolicySample sample;
};

/// Full reverse chain recorded on `tape`. The noise draws enter as constants
/// so d a0 / d theta is the reparameterised gradient.
TapedSample sample_action_taped(const DiffusionPolicy& policy, const ParamStore& params, Tape& tape,
                                const Mat& states, Rng& rng, bool trainable = true);

/// Runs the chain from T down to `t_stop` and returns a_{t_stop}; no tape.
Mat sample_partial(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states, int t_stop,
                   Rng& rng);

/// Row-wise variant: row i stops at t_stop[i].
Mat sample_partial(const DiffusionPolicy& policy, const ParamStore& params, const Mat& states,
                   const std::vector<int>& t_stop, Rng& rng);

/// clip(a0 + alpha * lambda * eps, -1, 1).
Mat exploration_noise(const Mat& a0, double alpha, double lambda, Rng& rng);

}  // namespace qfd
