#include "qfd/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qfd {

std::vector<double> vp_alpha_schedule(int steps, double b_min, double b_max) {
  if (steps < 1) throw ScheduleError("diffusion steps must be >= 1, got " + std::to_string(steps));
  if (!(b_min > 0.0) || !(b_max > b_min)) {
    throw ScheduleError("schedule endpoints need 0 < b_min < b_max, got b_min=" + std::to_string(b_min) +
                        " b_max=" + std::to_string(b_max));
  }
  const double T = steps;
  std::vector<double> alphas(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    alphas[static_cast<std::size_t>(t - 1)] =
        std::exp(-b_min / T - 0.5 * (b_max - b_min) * (2.0 * t - 1.0) / (T * T));
  }
  return alphas;
}

TimeWeightFit fit_time_weight(const std::vector<double>& alphas) {
  if (alphas.size() < 2) throw ScheduleError("time-weight fit needs at least 2 alphas");
  const std::size_t n = alphas.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = alphas[n - 1 - i];
    if (!(a > 0.0)) throw ScheduleError("time-weight fit needs positive alphas");
    const double x = static_cast<double>(i);
    const double y = std::log(a);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double nn = static_cast<double>(n);
  const double c = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
  const double d = (sy - c * sx) / nn;
  return {c, d};
}

DiffusionSchedule::DiffusionSchedule(int steps, double b_min, double b_max)
    : b_min_(b_min), b_max_(b_max), alphas_(vp_alpha_schedule(steps, b_min, b_max)) {
  alpha_bars_.resize(alphas_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < alphas_.size(); ++i) {
    prod *= alphas_[i];
    alpha_bars_[i] = prod;
  }
  // A single step has nothing to regress; w is the lone alpha.
  fit_ = alphas_.size() >= 2 ? fit_time_weight(alphas_) : TimeWeightFit{0.0, std::log(alphas_[0])};
}

DiffusionSchedule DiffusionSchedule::from_parts(double b_min, double b_max, std::vector<double> alphas,
                                                TimeWeightFit fit) {
  if (alphas.empty()) throw ScheduleError("schedule needs at least one alpha");
  DiffusionSchedule s;
  s.b_min_ = b_min;
  s.b_max_ = b_max;
  s.alphas_ = std::move(alphas);
  s.alpha_bars_.resize(s.alphas_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < s.alphas_.size(); ++i) {
    if (!(s.alphas_[i] > 0.0 && s.alphas_[i] < 1.0)) throw ScheduleError("stored alpha outside (0, 1)");
    prod *= s.alphas_[i];
    s.alpha_bars_[i] = prod;
  }
  s.fit_ = fit;
  return s;
}

void DiffusionSchedule::check_step(int t) const {
  if (t < 1 || t > steps()) {
    throw ScheduleError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

double DiffusionSchedule::alpha(int t) const {
  check_step(t);
  return alphas_[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::alpha_bar(int t) const {
  check_step(t);
  return alpha_bars_[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::time_weight(int t) const {
  check_step(t);
  return std::exp(fit_.c * (t - 1) + fit_.d);
}

double DiffusionSchedule::max_time_weight() const {
  return std::max(time_weight(1), time_weight(steps()));
}

}  // namespace qfd
