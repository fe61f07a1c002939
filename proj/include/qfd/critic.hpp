#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qfd/ndmath.hpp"
#include "qfd/rng.hpp"

namespace qfd {

struct DiffusionPolicy;

/// Anything that can report min-over-heads Q(s, a). Loss and guidance code is
/// written against this so analytic critics can stand in during tests.
class Critic {
 public:
  virtual ~Critic() = default;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  /// [B, 1] values; untaped.
  virtual Mat min_q(const Mat& states, const Mat& actions) const = 0;
  /// [B, 1] values recorded on `tape`. Critic parameters enter as constants.
  virtual Var record_min_q(Tape& tape, Var states, Var actions) const = 0;
};

enum class CriticHead { Q1, Q2, Target1, Target2 };

/// Twin Q networks plus soft-updated targets. Parameters live in an external
/// ParamStore under "critic1", "critic2", "target1", "target2".
///
/// In distributional mode each head outputs (mean, raw scale) and the scale is
/// mapped through softplus plus a floor, so the reported std is always > 0.
class CriticPair {
 public:
  static constexpr double kStdFloor = 1e-3;

  CriticPair(std::size_t state_dim, std::size_t action_dim, std::vector<std::size_t> hidden,
             Activation activation = Activation::GeLU, bool distributional = false);

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  bool distributional() const { return distributional_; }
  const MlpSpec& spec() const { return spec_; }
  static std::string prefix(CriticHead head);

  /// Initialises both online heads and copies them into the targets.
  void init(ParamStore& params, Rng& rng) const;

  /// Raw head output, [B, 1] or [B, 2] in distributional mode.
  Mat forward(const ParamStore& params, CriticHead head, const Mat& states, const Mat& actions) const;
  /// Mean value of a head, [B, 1].
  Mat q(const ParamStore& params, CriticHead head, const Mat& states, const Mat& actions) const;

  Var record(Tape& tape, const ParamStore& params, CriticHead head, Var states, Var actions,
             bool trainable) const;
  Var record_mean(Tape& tape, const ParamStore& params, CriticHead head, Var states, Var actions,
                  bool trainable) const;

  std::vector<std::string> online_names(const ParamStore& params) const;

 private:
  std::size_t state_dim_;
  std::size_t action_dim_;
  bool distributional_;
  MlpSpec spec_;
};

/// Binds a CriticPair to a parameter store; min over the two online heads,
/// ties resolved toward Q1.
class OnlineCritic final : public Critic {
 public:
  OnlineCritic(const CriticPair& pair, const ParamStore& params) : pair_(pair), params_(params) {}
  std::size_t state_dim() const override { return pair_.state_dim(); }
  std::size_t action_dim() const override { return pair_.action_dim(); }
  Mat min_q(const Mat& states, const Mat& actions) const override;
  Var record_min_q(Tape& tape, Var states, Var actions) const override;

 private:
  const CriticPair& pair_;
  const ParamStore& params_;
};

/// y = r + gamma (1 - done) min(Q1bar, Q2bar), all [B, 1].
Mat td_target_from_values(const Mat& rewards, const Mat& dones, const Mat& q1_target, const Mat& q2_target,
                          double gamma);

/// Full target: a' is sampled from the current policy at s' (no exploration
/// noise) and the target heads are evaluated there. No gradient flows into y.
Mat td_target(const CriticPair& pair, const ParamStore& params, const DiffusionPolicy& policy,
              const Mat& rewards, const Mat& next_states, const Mat& dones, double gamma, Rng& rng);

/// 0.5 ln(2 pi) + ln(std) + (y - mean)^2 / (2 std^2), elementwise.
Mat gaussian_nll(const Mat& mean, const Mat& stddev, const Mat& y);

struct CriticLoss {
  double loss1 = 0.0;
  double loss2 = 0.0;
  /// Gradients for critic1/* and critic2/* of loss1 + loss2.
  Gradients grads;
};

/// Mean squared Bellman error per head (Gaussian NLL in distributional mode).
CriticLoss critic_loss(const CriticPair& pair, const ParamStore& params, const Mat& states, const Mat& actions,
                       const Mat& targets);

/// target <- rho * online + (1 - rho) * target for both heads.
void soft_update(const CriticPair& pair, ParamStore& params, double rho);

/// Per-row gradient of min(Q1, Q2) with respect to the action, [B, dim(A)].
Mat q_grad(const Critic& critic, const Mat& states, const Mat& actions);

/// g / (||g|| + eps) applied to each row.
Mat normalize_grad(const Mat& g, double eps = 1e-6);

}  // namespace qfd
