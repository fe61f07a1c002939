#include "qfd/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qfd {

Vec Env::checked_action(const Vec& action) {
  if (episode_over_) throw EnvError(spec().name + ": step() called on a finished episode; call reset()");
  if (static_cast<std::size_t>(action.size()) != spec().action_dim) {
    throw EnvError(spec().name + ": action has " + std::to_string(action.size()) + " entries, expected " +
                   std::to_string(spec().action_dim));
  }
  if (!action.allFinite()) throw EnvError(spec().name + ": non-finite action");
  return action.cwiseMax(-1.0).cwiseMin(1.0);
}

void Env::finish_step(StepResult& r) {
  ++steps_;
  if (!r.done && steps_ >= spec().max_episode_steps) r.truncated = true;
  if (r.done || r.truncated) episode_over_ = true;
}

// ---------------------------------------------------------------------------
// Multi-goal

MultiGoalEnv::MultiGoalEnv(int num_goals, double reset_jitter) : jitter_(reset_jitter), pos_(Vec::Zero(2)) {
  if (num_goals < 1) throw EnvError("multigoal needs at least one goal");
  spec_.name = "multigoal" + std::to_string(num_goals);
  spec_.state_dim = 2;
  spec_.action_dim = 2;
  spec_.max_episode_steps = kHorizon;
  // Farthest reachable point: jitter margin of 1 plus full-speed travel.
  const double max_dist = kGoalRadius + 1.0 + kHorizon * kStepScale * std::sqrt(2.0);
  spec_.reward_lower_bound = -kDistanceCost * max_dist - kActionCost * 2.0;
  for (int k = 0; k < num_goals; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / num_goals;
    Vec g(2);
    g << kGoalRadius * std::cos(angle), kGoalRadius * std::sin(angle);
    goals_.push_back(g);
  }
}

Vec MultiGoalEnv::reset(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec p(2);
  p(0) = jitter_ * n(rng);
  p(1) = jitter_ * n(rng);
  return reset_to(p);
}

Vec MultiGoalEnv::reset_to(const Vec& position) {
  pos_ = position;
  steps_ = 0;
  episode_over_ = false;
  return pos_;
}

int MultiGoalEnv::nearest_goal(const Vec& position) const {
  int best = 0;
  double best_d = (position - goals_[0]).norm();
  for (int k = 1; k < num_goals(); ++k) {
    const double d = (position - goals_[static_cast<std::size_t>(k)]).norm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

StepResult MultiGoalEnv::step(const Vec& action) {
  const Vec a = checked_action(action);
  pos_ += kStepScale * a;
  const int g = nearest_goal(pos_);
  const double dist = (pos_ - goals_[static_cast<std::size_t>(g)]).norm();
  StepResult r;
  r.next_state = pos_;
  r.reward = -kDistanceCost * dist - kActionCost * a.squaredNorm();
  if (dist < kGoalTolerance) {
    r.reward += kGoalBonus;
    r.done = true;
    r.info = g;
  }
  finish_step(r);
  return r;
}

// ---------------------------------------------------------------------------
// Energy bandit

EnergyBandit::EnergyBandit(BanditEnergy energy) : energy_(energy) {
  spec_.state_dim = 1;
  spec_.max_episode_steps = 1;
  if (energy == BanditEnergy::DoubleWell) {
    spec_.name = "bandit-doublewell";
    spec_.action_dim = 1;
    spec_.reward_lower_bound = -1.0;
  } else {
    spec_.name = "bandit-ring";
    spec_.action_dim = 2;
    spec_.reward_lower_bound = -0.64;
  }
}

double EnergyBandit::ring(double x, double y) {
  const double r = std::hypot(x, y) - 0.8;
  return -r * r;
}

double EnergyBandit::energy_value(const Vec& a) const {
  return energy_ == BanditEnergy::DoubleWell ? double_well(a(0)) : ring(a(0), a(1));
}

Vec EnergyBandit::reset(Rng&) {
  steps_ = 0;
  episode_over_ = false;
  return Vec::Zero(1);
}

StepResult EnergyBandit::step(const Vec& action) {
  const Vec a = checked_action(action);
  StepResult r;
  r.next_state = Vec::Zero(1);
  r.reward = energy_value(a);
  r.done = true;
  finish_step(r);
  return r;
}

// ---------------------------------------------------------------------------
// Point-mass reacher

PointMassReacher::PointMassReacher() : target_(Vec::Constant(2, 0.5)), pos_(Vec::Zero(2)), vel_(Vec::Zero(2)) {
  spec_.name = "pointmass";
  spec_.state_dim = 5;
  spec_.action_dim = 2;
  spec_.max_episode_steps = kHorizon;
  // |pos| per axis stays within 1 + horizon * dt * max speed.
  const double reach = 1.0 + kHorizon * kDt * kMaxSpeed + 0.5;
  spec_.reward_lower_bound = -2.0 * reach * reach - kActionCost * 2.0;
}

Vec PointMassReacher::state() const {
  Vec s(5);
  s << pos_, vel_, 1.0;
  return s;
}

Vec PointMassReacher::reset(Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec p(2);
  p(0) = u(rng);
  p(1) = u(rng);
  return reset_to(p, Vec::Zero(2));
}

Vec PointMassReacher::reset_to(const Vec& position, const Vec& velocity) {
  pos_ = position;
  vel_ = velocity;
  steps_ = 0;
  episode_over_ = false;
  return state();
}

StepResult PointMassReacher::step(const Vec& action) {
  const Vec a = checked_action(action);
  vel_ = (vel_ + kDt * a).cwiseMax(-kMaxSpeed).cwiseMin(kMaxSpeed);
  pos_ += kDt * vel_;
  StepResult r;
  r.next_state = state();
  r.reward = -(pos_ - target_).squaredNorm() - kActionCost * a.squaredNorm();
  finish_step(r);
  return r;
}

// ---------------------------------------------------------------------------

std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "multigoal4") return std::make_unique<MultiGoalEnv>(4);
  if (name == "multigoal5") return std::make_unique<MultiGoalEnv>(5);
  if (name == "multigoal6") return std::make_unique<MultiGoalEnv>(6);
  if (name == "bandit-doublewell") return std::make_unique<EnergyBandit>(BanditEnergy::DoubleWell);
  if (name == "bandit-ring") return std::make_unique<EnergyBandit>(BanditEnergy::Ring);
  if (name == "pointmass") return std::make_unique<PointMassReacher>();
  throw EnvError("unknown environment '" + name + "'");
}

std::vector<std::string> env_names() {
  return {"multigoal4", "multigoal5", "multigoal6", "bandit-doublewell", "bandit-ring", "pointmass"};
}

ModeCoverage mode_coverage(const std::vector<Trajectory>& trajectories, int num_goals) {
  if (num_goals < 1) throw EnvError("mode coverage needs at least one goal");
  ModeCoverage out;
  out.counts.assign(static_cast<std::size_t>(num_goals), 0);
  for (const auto& t : trajectories) {
    if (t.done && t.goal && *t.goal >= 0 && *t.goal < num_goals) ++out.counts[static_cast<std::size_t>(*t.goal)];
  }
  out.coverage = static_cast<int>(std::count_if(out.counts.begin(), out.counts.end(), [](int c) { return c > 0; }));
  if (!trajectories.empty()) {
    const double share = static_cast<double>(trajectories.size()) / num_goals;
    out.uniformity = *std::min_element(out.counts.begin(), out.counts.end()) / share;
  }
  return out;
}

}  // namespace qfd
