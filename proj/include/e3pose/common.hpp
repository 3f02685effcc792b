#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace e3pose {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// All stochastic code draws from a seedable mt19937_64 so reruns are
// bit-identical given the same seed.
using Rng = std::mt19937_64;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptySelectionRule : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SolverDegeneracy : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateOutput : std::runtime_error {
  explicit DegenerateOutput(const std::string& msg, VecX raw = {})
      : std::runtime_error(msg), raw_output(std::move(raw)) {}
  VecX raw_output;
};

struct EmptyOccupancy : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AmbiguousProjection : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateBasis : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double uniform01(Rng& rng) {
  // Use the full 53-bit mantissa; std::uniform_real_distribution is not
  // guaranteed to produce identical streams across standard libraries.
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

}  // namespace e3pose
