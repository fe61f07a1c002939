#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace qfd::testing {

double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("qfd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

Mat QuadraticCritic::min_q(const Mat&, const Mat& actions) const {
  return -(actions - broadcast(actions.rows())).rowwise().squaredNorm();
}

Var QuadraticCritic::record_min_q(Tape& tape, Var, Var actions) const {
  const Eigen::Index rows = tape.value(actions).rows();
  Var diff = tape.sub(actions, tape.constant(broadcast(rows)));
  return tape.scale(tape.row_sum(tape.square(diff)), -1.0);
}

Var ConstantCritic::record_min_q(Tape& tape, Var, Var actions) const {
  const Eigen::Index rows = tape.value(actions).rows();
  Var zero = tape.scale(tape.row_sum(actions), 0.0);
  return tape.add(zero, tape.constant(Mat::Constant(rows, 1, c_)));
}

}  // namespace qfd::testing
