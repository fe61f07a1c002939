#include "qfd/langevin.hpp"

#include <cmath>

namespace qfd {

Energy double_well_energy() {
  Energy e;
  e.name = "doublewell";
  e.dim = 1;
  e.domain_bound = 1.0;
  e.value = [](const Mat& a) -> Vec {
    return (-(a.col(0).array().square() - 1.0).square()).matrix();
  };
  e.grad = [](const Mat& a) -> Mat {
    const auto x = a.col(0).array();
    Mat g(a.rows(), 1);
    g.col(0) = (-4.0 * x * (x.square() - 1.0)).matrix();
    return g;
  };
  return e;
}

Energy ring_energy() {
  Energy e;
  e.name = "ring";
  e.dim = 2;
  e.domain_bound = 1.0;
  e.value = [](const Mat& a) -> Vec { return (-(a.rowwise().norm().array() - 0.8).square()).matrix(); };
  e.grad = [](const Mat& a) -> Mat {
    Mat g(a.rows(), 2);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const double r = a.row(i).norm();
      g.row(i) = r > 0.0 ? Eigen::RowVector2d(a.row(i) * (-2.0 * (r - 0.8) / r)) : Eigen::RowVector2d::Zero();
    }
    return g;
  };
  return e;
}

Energy gaussian_energy() {
  Energy e;
  e.name = "gaussian";
  e.dim = 1;
  e.domain_bound = 3.0;
  e.value = [](const Mat& a) -> Vec { return (-0.5 * a.rowwise().squaredNorm().array()).matrix(); };
  e.grad = [](const Mat& a) -> Mat { return -a; };
  return e;
}

Energy energy_by_name(const std::string& name) {
  if (name == "doublewell") return double_well_energy();
  if (name == "ring") return ring_energy();
  if (name == "gaussian") return gaussian_energy();
  throw std::invalid_argument("unknown energy '" + name + "' (expected doublewell, ring or gaussian)");
}

double LangevinConfig::step_size(int k) const {
  if (steps <= 1) return delta0;
  return delta0 * std::pow(final_ratio, static_cast<double>(k) / static_cast<double>(steps - 1));
}

void LangevinConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("Langevin steps must be >= 1");
  if (!(delta0 > 0.0)) throw std::invalid_argument("Langevin delta0 must be > 0");
  if (!(final_ratio > 0.0 && final_ratio <= 1.0)) throw std::invalid_argument("Langevin final_ratio must lie in (0, 1]");
  if (!(alpha > 0.0)) throw std::invalid_argument("Langevin temperature must be > 0");
}

Mat langevin_sample(const Energy& energy, const LangevinConfig& config, int n_samples, Rng& rng) {
  config.validate();
  Mat a = config.init_std * randn(n_samples, energy.dim, rng);
  const double limit = 10.0 * energy.domain_bound;
  for (int k = 0; k < config.steps; ++k) {
    const double delta = config.step_size(k);
    a += (delta / (2.0 * config.alpha)) * energy.grad(a) + std::sqrt(delta) * randn(a.rows(), a.cols(), rng);
    if (!a.allFinite() || a.cwiseAbs().maxCoeff() > limit) {
      throw DivergenceError("Langevin chain left the domain (|a| > " + std::to_string(limit) + ") at step " +
                            std::to_string(k) + "; try a smaller delta0 than " + std::to_string(config.delta0));
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Quadrature

namespace {

double trapezoid(const Vec& x, const Vec& y) {
  double s = 0.0;
  for (Eigen::Index i = 1; i < x.size(); ++i) s += 0.5 * (y(i) + y(i - 1)) * (x(i) - x(i - 1));
  return s;
}

}  // namespace

double DensityTable1D::integral() const { return trapezoid(grid, density); }

double DensityTable1D::mass(double lo, double hi) const {
  double s = 0.0;
  for (Eigen::Index i = 1; i < grid.size(); ++i) {
    if (grid(i - 1) >= lo && grid(i) <= hi) s += 0.5 * (density(i) + density(i - 1)) * (grid(i) - grid(i - 1));
  }
  return s;
}

double DensityTable2D::integral() const {
  Vec inner(xs.size());
  for (Eigen::Index i = 0; i < xs.size(); ++i) inner(i) = trapezoid(ys, density.row(i).transpose());
  return trapezoid(xs, inner);
}

DensityTable1D boltzmann_quadrature(const Energy& energy, double alpha, double lo, double hi, int points) {
  if (energy.dim != 1) throw std::invalid_argument("1-D quadrature on a " + std::to_string(energy.dim) + "-D energy");
  if (points < 2 || !(hi > lo) || !(alpha > 0.0)) throw std::invalid_argument("bad quadrature grid");
  DensityTable1D t;
  t.grid = Vec::LinSpaced(points, lo, hi);
  Mat pts = t.grid;
  const Vec q = energy.value(pts) / alpha;
  const double shift = q.maxCoeff();
  t.density = (q.array() - shift).exp().matrix();
  t.density /= trapezoid(t.grid, t.density);
  return t;
}

DensityTable2D boltzmann_quadrature_2d(const Energy& energy, double alpha, double lo, double hi, int points) {
  if (energy.dim != 2) throw std::invalid_argument("2-D quadrature on a " + std::to_string(energy.dim) + "-D energy");
  if (points < 2 || !(hi > lo) || !(alpha > 0.0)) throw std::invalid_argument("bad quadrature grid");
  DensityTable2D t;
  t.xs = Vec::LinSpaced(points, lo, hi);
  t.ys = t.xs;
  Mat pts(static_cast<Eigen::Index>(points) * points, 2);
  for (int i = 0; i < points; ++i) {
    for (int j = 0; j < points; ++j) pts.row(static_cast<Eigen::Index>(i) * points + j) << t.xs(i), t.ys(j);
  }
  const Vec q = energy.value(pts) / alpha;
  const double shift = q.maxCoeff();
  t.density.resize(points, points);
  for (int i = 0; i < points; ++i) {
    for (int j = 0; j < points; ++j) t.density(i, j) = std::exp(q(static_cast<Eigen::Index>(i) * points + j) - shift);
  }
  t.density /= t.integral();
  return t;
}

Histogram1D& Histogram1D::operator+=(const Histogram1D& other) {
  if (other.counts.size() != counts.size() || other.lo != lo || other.hi != hi) {
    throw std::invalid_argument("histograms with different binning");
  }
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  total += other.total;
  outside += other.outside;
  return *this;
}

Histogram1D histogram(const Vec& samples, double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("bad histogram range");
  Histogram1D h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const double x = samples(i);
    ++h.total;
    if (x < lo || x >= hi) {
      ++h.outside;
      continue;
    }
    auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * bins);
    if (b >= h.counts.size()) b = h.counts.size() - 1;
    ++h.counts[b];
  }
  return h;
}

Vec bin_masses(const Energy& energy, double alpha, double lo, double hi, int bins, double support_lo,
               double support_hi) {
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("bad histogram range");
  constexpr int kSub = 64;
  // Normalise over the full support, then integrate each bin on its own grid
  // using the same shift and partition function.
  const Vec grid = Vec::LinSpaced(20001, support_lo, support_hi);
  const Vec grid_q = energy.value(Mat(grid)) / alpha;
  const double shift = grid_q.maxCoeff();
  const double z = trapezoid(grid, ((grid_q.array() - shift).exp()).matrix());
  const double w = (hi - lo) / bins;
  Vec out(bins);
  for (int b = 0; b < bins; ++b) {
    const Vec x = Vec::LinSpaced(kSub + 1, lo + b * w, lo + (b + 1) * w);
    const Vec q = energy.value(Mat(x)) / alpha;
    out(b) = trapezoid(x, ((q.array() - shift).exp() / z).matrix());
  }
  return out;
}

double total_variation(const Histogram1D& hist, const Vec& reference_masses) {
  if (static_cast<Eigen::Index>(hist.counts.size()) != reference_masses.size()) {
    throw std::invalid_argument("histogram and reference have different bin counts");
  }
  if (hist.total == 0) throw std::invalid_argument("empty histogram");
  double tv = 0.0;
  const double n = static_cast<double>(hist.total);
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    tv += std::abs(hist.counts[b] / n - reference_masses(static_cast<Eigen::Index>(b)));
  }
  const double ref_outside = std::max(0.0, 1.0 - reference_masses.sum());
  tv += std::abs(hist.outside / n - ref_outside);
  return 0.5 * tv;
}

}  // namespace qfd
