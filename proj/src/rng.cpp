#include "qfd/rng.hpp"

namespace qfd {

std::string_view to_string(Stream s) {
  switch (s) {
    case Stream::Init: return "init";
    case Stream::Env: return "env";
    case Stream::Explore: return "explore";
    case Stream::Buffer: return "buffer";
    case Stream::TimeSample: return "t-sample";
    case Stream::Gmm: return "gmm";
    case Stream::Langevin: return "langevin";
    case Stream::Update: return "update";
    case Stream::Eval: return "eval";
  }
  return "?";
}

Rng make_stream(std::uint64_t seed, Stream stream, std::uint64_t sub) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(sub),
                    static_cast<std::uint32_t>(sub >> 32)};
  return Rng(seq);
}

Mat randn(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = n(rng);
  return out;
}

}  // namespace qfd
