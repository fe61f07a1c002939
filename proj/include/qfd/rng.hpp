#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "qfd/ndmath.hpp"

namespace qfd {

using Rng = std::mt19937_64;

/// Named sub-streams derived from the single run seed. Each consumer owns
/// exactly one stream so adding draws in one place never shifts another.
enum class Stream : std::uint32_t {
  Init = 1,        // network initialisation
  Env = 2,         // environment resets and dynamics
  Explore = 3,     // rollout action sampling and exploration noise
  Buffer = 4,      // replay minibatch indices
  TimeSample = 5,  // diffusion step draws for the field loss
  Gmm = 6,         // entropy estimation
  Langevin = 7,    // oracle sampler
  Update = 8,      // denoising noise drawn inside critic/actor updates
  Eval = 9,        // evaluation rollouts
};

std::string_view to_string(Stream s);

Rng make_stream(std::uint64_t seed, Stream stream, std::uint64_t sub = 0);

/// rows x cols matrix of independent N(0, 1) draws, filled row-major.
Mat randn(Eigen::Index rows, Eigen::Index cols, Rng& rng);

}  // namespace qfd
