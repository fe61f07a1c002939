#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "qfd/ndmath.hpp"
#include "qfd/rng.hpp"

namespace qfd {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Analytic energy Q(a) evaluated row-wise on [N, d] batches.
struct Energy {
  std::string name;
  int dim = 1;
  std::function<Vec(const Mat&)> value;
  std::function<Mat(const Mat&)> grad;
  /// Typical extent of the support; chains beyond ten times this diverged.
  double domain_bound = 1.0;
};

/// Q(a) = -(a^2 - 1)^2
Energy double_well_energy();
/// Q(a) = -(||a|| - 0.8)^2
Energy ring_energy();
/// Q(a) = -||a||^2 / 2
Energy gaussian_energy();
/// `doublewell`, `ring` or `gaussian`.
Energy energy_by_name(const std::string& name);

struct LangevinConfig {
  int steps = 4000;
  double delta0 = 0.01;
  /// delta_final / delta0; steps decay geometrically in between.
  double final_ratio = 1e-2;
  double alpha = 1.0;
  double init_std = 0.5;

  double step_size(int k) const;
  void validate() const;
};

/// Runs n independent chains of
///   a <- a + (delta_k / (2 alpha)) grad Q(a) + sqrt(delta_k) eps
/// and returns their final states, [n, dim].
Mat langevin_sample(const Energy& energy, const LangevinConfig& config, int n_samples, Rng& rng);

/// Grid density exp(Q/alpha) / Z normalised with the trapezoid rule.
struct DensityTable1D {
  Vec grid;
  Vec density;
  /// Trapezoid mass of the density over [lo, hi] (grid points inside only).
  double mass(double lo, double hi) const;
  double integral() const;
};

struct DensityTable2D {
  Vec xs;
  Vec ys;
  Mat density;  // [xs, ys]
  double integral() const;
};

DensityTable1D boltzmann_quadrature(const Energy& energy, double alpha, double lo, double hi, int points);
DensityTable2D boltzmann_quadrature_2d(const Energy& energy, double alpha, double lo, double hi, int points);

struct Histogram1D {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<long> counts;
  long total = 0;
  long outside = 0;

  double width() const { return (hi - lo) / static_cast<double>(counts.size()); }
  double center(std::size_t bin) const { return lo + (static_cast<double>(bin) + 0.5) * width(); }
  Histogram1D& operator+=(const Histogram1D& other);
};

Histogram1D histogram(const Vec& samples, double lo, double hi, int bins);

/// Quadrature mass per histogram bin, integrated with a fine sub-grid.
Vec bin_masses(const Energy& energy, double alpha, double lo, double hi, int bins, double support_lo,
               double support_hi);

/// 0.5 * sum |empirical - reference| over bins (out-of-range samples count
/// toward the distance).
double total_variation(const Histogram1D& hist, const Vec& reference_masses);

}  // namespace qfd
