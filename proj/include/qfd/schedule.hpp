#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace qfd {

class ScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// alpha_t = exp(-b_min/T - (b_max - b_min)(2t - 1) / (2 T^2)) for t = 1..T.
std::vector<double> vp_alpha_schedule(int steps, double b_min = 0.1, double b_max = 10.0);

struct TimeWeightFit {
  double c = 0.0;
  double d = 0.0;
};

/// Least-squares fit of log(reversed alphas) against i = 0..T-1.
TimeWeightFit fit_time_weight(const std::vector<double>& alphas);

/// Variance-preserving schedule plus the fitted time-weight curve. Immutable
/// once built. Step indices are 1-based; t = T is the noisiest step and is
/// executed first when sampling.
class DiffusionSchedule {
 public:
  DiffusionSchedule(int steps, double b_min = 0.1, double b_max = 10.0);

  /// Rebuilds a schedule from stored parts (checkpoint restore).
  static DiffusionSchedule from_parts(double b_min, double b_max, std::vector<double> alphas,
                                      TimeWeightFit fit);

  int steps() const { return static_cast<int>(alphas_.size()); }
  double b_min() const { return b_min_; }
  double b_max() const { return b_max_; }

  double alpha(int t) const;
  double alpha_bar(int t) const;
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  const TimeWeightFit& fit() const { return fit_; }

  /// w(t) = exp(c (t - 1) + d); largest at t = T when c > 0.
  double time_weight(int t) const;
  double max_time_weight() const;

 private:
  DiffusionSchedule() = default;
  void check_step(int t) const;

  double b_min_ = 0.1;
  double b_max_ = 10.0;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  TimeWeightFit fit_;
};

}  // namespace qfd
