#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qfd/ndmath.hpp"
#include "qfd/rng.hpp"

namespace qfd {

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvSpec {
  std::string name;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  int max_episode_steps = 1;
  /// No single step ever returns less than this.
  double reward_lower_bound = 0.0;
};

struct StepResult {
  Vec next_state;
  double reward = 0.0;
  /// Terminal transition (goal reached, bandit pulled).
  bool done = false;
  /// Horizon reached without a terminal transition.
  bool truncated = false;
  /// Index of the goal reached, when the environment has goals.
  std::optional<int> info;
};

/// Uniform reset/step contract. Actions are clipped to [-1, 1]^action_dim.
/// Stepping after `done` or `truncated` throws until the next reset.
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual Vec reset(Rng& rng) = 0;
  virtual StepResult step(const Vec& action) = 0;
  virtual std::unique_ptr<Env> clone() const = 0;

 protected:
  Vec checked_action(const Vec& action);
  void finish_step(StepResult& r);

  int steps_ = 0;
  bool episode_over_ = true;
};

/// Point on the plane chasing K goals on a circle of radius 5.
class MultiGoalEnv final : public Env {
 public:
  static constexpr double kGoalRadius = 5.0;
  static constexpr double kGoalTolerance = 1.0;
  static constexpr double kStepScale = 0.5;
  static constexpr double kDistanceCost = 0.1;
  static constexpr double kActionCost = 0.05;
  static constexpr double kGoalBonus = 10.0;
  static constexpr int kHorizon = 30;

  explicit MultiGoalEnv(int num_goals, double reset_jitter = 0.1);

  const EnvSpec& spec() const override { return spec_; }
  Vec reset(Rng& rng) override;
  /// Starts an episode from an explicit position.
  Vec reset_to(const Vec& position);
  StepResult step(const Vec& action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<MultiGoalEnv>(*this); }

  int num_goals() const { return static_cast<int>(goals_.size()); }
  const std::vector<Vec>& goals() const { return goals_; }
  int nearest_goal(const Vec& position) const;

 private:
  EnvSpec spec_;
  double jitter_;
  std::vector<Vec> goals_;
  Vec pos_;
};

enum class BanditEnergy { DoubleWell, Ring };

/// Single state, single step; reward is an analytic energy of the action.
class EnergyBandit final : public Env {
 public:
  explicit EnergyBandit(BanditEnergy energy);

  const EnvSpec& spec() const override { return spec_; }
  Vec reset(Rng& rng) override;
  StepResult step(const Vec& action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<EnergyBandit>(*this); }

  BanditEnergy energy() const { return energy_; }
  double energy_value(const Vec& action) const;
  static double double_well(double a) { return -(a * a - 1.0) * (a * a - 1.0); }
  static double ring(double x, double y);

 private:
  EnvSpec spec_;
  BanditEnergy energy_;
};

/// 2-D double integrator with a fixed target. State = (pos, vel, code).
class PointMassReacher final : public Env {
 public:
  static constexpr double kDt = 0.1;
  static constexpr double kMaxSpeed = 2.0;
  static constexpr double kActionCost = 0.01;
  static constexpr int kHorizon = 100;

  PointMassReacher();

  const EnvSpec& spec() const override { return spec_; }
  Vec reset(Rng& rng) override;
  Vec reset_to(const Vec& position, const Vec& velocity);
  StepResult step(const Vec& action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<PointMassReacher>(*this); }

  const Vec& target() const { return target_; }

 private:
  Vec state() const;

  EnvSpec spec_;
  Vec target_;
  Vec pos_;
  Vec vel_;
};

/// `multigoal4|5|6`, `bandit-doublewell`, `bandit-ring`, `pointmass`.
std::unique_ptr<Env> make_env(const std::string& name);
std::vector<std::string> env_names();

struct Trajectory {
  std::vector<Vec> states;
  std::vector<Vec> actions;
  std::vector<double> rewards;
  double episode_return = 0.0;
  bool done = false;
  std::optional<int> goal;
};

struct ModeCoverage {
  int coverage = 0;
  double uniformity = 0.0;
  std::vector<int> counts;
};

/// coverage = goals reached at least once; uniformity = min(count) / (N / K)
/// with N the number of trajectories.
ModeCoverage mode_coverage(const std::vector<Trajectory>& trajectories, int num_goals);

}  // namespace qfd
