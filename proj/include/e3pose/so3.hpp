#pragma once

// Real-representation machinery for O(3): rotations/reflections, real
// spherical harmonics, real Wigner-D matrices, parity rules, uniform
// rotation sampling and geodesic distances.
//
// Conventions (fixed here, referenced by everything downstream):
//   * Irrep components are ordered m = -l..l.
//   * Real spherical harmonics are orthonormal on the unit sphere and
//     Condon-Shortley-free: Y_1 is proportional to (y, z, x).
//   * Steerability: Y_l(R u) = D^l(R) Y_l(u) for proper rotations R.
//   * Under inversion an order-l, parity-p irrep acts as +1 (even) or
//     -1 (odd); the action of an improper g factors through the proper
//     rotation -g.

#include <cmath>
#include <complex>
#include <numbers>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "e3pose/common.hpp"

namespace e3pose {

enum class Parity { even, odd };

inline Parity parity_of_int(int n) { return (n % 2 == 0) ? Parity::even : Parity::odd; }

struct IrrepLabel {
  int order = 0;  // l >= 0
  Parity parity = Parity::even;

  int dimension() const { return 2 * order + 1; }
  bool operator==(const IrrepLabel&) const = default;
};

// Block-diagonal representation spec: ordered (multiplicity, label) blocks.
struct RepSpec {
  struct Block {
    int multiplicity = 1;
    IrrepLabel label;
  };
  std::vector<Block> blocks;

  int dimension() const {
    int d = 0;
    for (const auto& b : blocks) d += b.multiplicity * b.label.dimension();
    return d;
  }
};

namespace detail {

inline void check_orthonormal(const Mat3& m, double tol, const char* what) {
  const double err = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (err > tol) throw ValidationError(std::string(what) + ": matrix is not orthonormal");
}

}  // namespace detail

// Proper rotation. Stores the matrix; the quaternion view is used for
// sampling and interpolation.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation from_matrix(const Mat3& m) {
    detail::check_orthonormal(m, 1e-9, "Rotation");
    if (m.determinant() < 0.0) throw ValidationError("Rotation: determinant is -1");
    Rotation r;
    // Re-project through a quaternion so invariants hold to 1e-12 even for
    // inputs that are only 1e-9 orthonormal.
    Eigen::Quaterniond q(m);
    q.normalize();
    r.m_ = q.toRotationMatrix();
    return r;
  }

  static Rotation from_quaternion(const Eigen::Quaterniond& q_in) {
    Eigen::Quaterniond q = q_in.normalized();
    Rotation r;
    r.m_ = q.toRotationMatrix();
    return r;
  }

  static Rotation axis_angle(const Vec3& axis, double angle) {
    return from_quaternion(Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized())));
  }

  const Mat3& matrix() const { return m_; }
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(m_); }

  Rotation operator*(const Rotation& o) const {
    Rotation r;
    r.m_ = m_ * o.m_;
    return r;
  }
  Rotation inverse() const {
    Rotation r;
    r.m_ = m_.transpose();
    return r;
  }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

 private:
  Mat3 m_;
};

// Element of O(3): orthonormal matrix plus its determinant sign.
struct OrthogonalTransform {
  Mat3 matrix = Mat3::Identity();
  int parity_sign = 1;  // det(matrix), exactly +/-1

  static OrthogonalTransform from_matrix(const Mat3& m) {
    detail::check_orthonormal(m, 1e-9, "OrthogonalTransform");
    OrthogonalTransform g;
    g.matrix = m;
    g.parity_sign = (m.determinant() < 0.0) ? -1 : 1;
    return g;
  }
  static OrthogonalTransform from_rotation(const Rotation& r) {
    OrthogonalTransform g;
    g.matrix = r.matrix();
    g.parity_sign = 1;
    return g;
  }
  static OrthogonalTransform inversion() {
    OrthogonalTransform g;
    g.matrix = -Mat3::Identity();
    g.parity_sign = -1;
    return g;
  }

  bool proper() const { return parity_sign == 1; }
  // Rotation part: g itself if proper, -g if improper (det(-g) = +1).
  Mat3 rotation_part() const { return proper() ? matrix : Mat3(-matrix); }

  OrthogonalTransform operator*(const OrthogonalTransform& o) const {
    OrthogonalTransform g;
    g.matrix = matrix * o.matrix;
    g.parity_sign = parity_sign * o.parity_sign;
    return g;
  }
};

// ---------------------------------------------------------------------------
// Real spherical harmonics
// ---------------------------------------------------------------------------

// Y_j(u) for a unit vector u, components m = -j..j, orthonormal on S^2.
inline VecX real_spherical_harmonics(int j, const Vec3& u) {
  if (j < 0) throw ValidationError("real_spherical_harmonics: j < 0");
  if (std::abs(u.norm() - 1.0) > 1e-9)
    throw ValidationError("real_spherical_harmonics: u is not a unit vector");

  const double x = u.x(), y = u.y(), z = u.z();
  const double rho = std::sqrt(x * x + y * y);

  // Associated Legendre P_j^m(z) without the Condon-Shortley phase; the
  // (1 - z^2)^{m/2} factor is rho^m. plm[m] holds P_j^m.
  std::vector<double> plm(static_cast<size_t>(j) + 1, 0.0);
  for (int m = 0; m <= j; ++m) {
    double pm = 1.0;  // P_m^m = (2m-1)!! rho^m
    for (int k = 1; k <= m; ++k) pm *= (2.0 * k - 1.0) * rho;
    if (m == j) {
      plm[m] = pm;
      continue;
    }
    double p0 = pm;
    double p1 = z * (2.0 * m + 1.0) * pm;  // P_{m+1}^m
    for (int l = m + 2; l <= j; ++l) {
      const double pn = ((2.0 * l - 1.0) * z * p1 - (l + m - 1.0) * p0) / (l - m);
      p0 = p1;
      p1 = pn;
    }
    plm[m] = p1;
  }

  // cos(m phi), sin(m phi) scaled by rho^m are the real/imag parts of
  // (x + i y)^m; P_j^m above already carries the rho^m factor.
  std::vector<double> cosm(static_cast<size_t>(j) + 1, 1.0);
  std::vector<double> sinm(static_cast<size_t>(j) + 1, 0.0);
  if (rho > 0.0) {
    const double c = x / rho, s = y / rho;
    for (int m = 1; m <= j; ++m) {
      cosm[m] = cosm[m - 1] * c - sinm[m - 1] * s;
      sinm[m] = sinm[m - 1] * c + cosm[m - 1] * s;
    }
  }

  VecX out(2 * j + 1);
  auto lnfact = [](int n) { return std::lgamma(static_cast<double>(n) + 1.0); };
  const double pi = std::numbers::pi;
  for (int m = 0; m <= j; ++m) {
    const double norm =
        std::sqrt((2.0 * j + 1.0) / (4.0 * pi) * std::exp(lnfact(j - m) - lnfact(j + m)));
    if (m == 0) {
      out[j] = norm * plm[0];
    } else {
      const double base = std::numbers::sqrt2 * norm * plm[m];
      out[j + m] = base * cosm[m];
      out[j - m] = base * sinm[m];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Real Wigner-D matrices
// ---------------------------------------------------------------------------

namespace detail {

// Wigner small-d matrix d^l_{m'm}(beta), indices stored at [m'+l][m+l].
inline MatX wigner_small_d(int l, double beta) {
  const int n = 2 * l + 1;
  MatX d(n, n);
  const double cb = std::cos(beta / 2.0), sb = std::sin(beta / 2.0);
  auto lnfact = [](int k) { return std::lgamma(static_cast<double>(k) + 1.0); };
  for (int mp = -l; mp <= l; ++mp) {
    for (int m = -l; m <= l; ++m) {
      const int kmin = std::max(0, m - mp);
      const int kmax = std::min(l + m, l - mp);
      double sum = 0.0;
      const double lpref = 0.5 * (lnfact(l + mp) + lnfact(l - mp) + lnfact(l + m) + lnfact(l - m));
      for (int k = kmin; k <= kmax; ++k) {
        const double lden =
            lnfact(l + m - k) + lnfact(k) + lnfact(l - mp - k) + lnfact(k - m + mp);
        const int pc = 2 * l - 2 * k + m - mp;  // power of cos(beta/2)
        const int ps = 2 * k - m + mp;          // power of sin(beta/2)
        double term = std::exp(lpref - lden);
        term *= std::pow(cb, pc) * std::pow(sb, ps);
        if ((mp - m + k) % 2 != 0) term = -term;
        sum += term;
      }
      d(mp + l, m + l) = sum;
    }
  }
  return d;
}

// ZYZ Euler angles with R = Rz(alpha) Ry(beta) Rz(gamma).
inline void euler_zyz(const Mat3& r, double& alpha, double& beta, double& gamma) {
  const double c = std::clamp(r(2, 2), -1.0, 1.0);
  beta = std::acos(c);
  if (std::abs(c) > 1.0 - 1e-12) {
    // Gimbal-degenerate: fold everything into alpha. For beta = pi the top
    // 2x2 block is Rz(alpha) * diag(-1, 1), so flip the column we read.
    gamma = 0.0;
    alpha = (c > 0.0) ? std::atan2(r(1, 0), r(0, 0)) : std::atan2(-r(1, 0), -r(0, 0));
  } else {
    alpha = std::atan2(r(1, 2), r(0, 2));
    gamma = std::atan2(r(2, 1), -r(2, 0));
  }
}

// Unitary change of basis from complex (Condon-Shortley) to real harmonics.
inline Eigen::MatrixXcd real_from_complex_basis(int l) {
  const int n = 2 * l + 1;
  Eigen::MatrixXcd c = Eigen::MatrixXcd::Zero(n, n);
  const std::complex<double> i1(0.0, 1.0);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  c(l, l) = 1.0;
  for (int m = 1; m <= l; ++m) {
    const double cs = (m % 2 == 0) ? 1.0 : -1.0;  // (-1)^m
    c(l + m, l + m) = cs * inv_sqrt2;
    c(l + m, l - m) = inv_sqrt2;
    c(l - m, l + m) = -i1 * cs * inv_sqrt2;
    c(l - m, l - m) = i1 * inv_sqrt2;
  }
  return c;
}

}  // namespace detail

// Real Wigner-D matrix of order l for a proper rotation, satisfying
// Y_l(R u) = D^l(R) Y_l(u) and D^l(R1 R2) = D^l(R1) D^l(R2).
inline MatX wigner_d_real(int l, const Rotation& rot) {
  if (l == 0) return MatX::Ones(1, 1);
  const Mat3& r = rot.matrix();
  if (l == 1) {
    // Fast path: the (y, z, x) permutation of the rotation matrix itself.
    Mat3 p;
    p << r(1, 1), r(1, 2), r(1, 0),
         r(2, 1), r(2, 2), r(2, 0),
         r(0, 1), r(0, 2), r(0, 0);
    return p;
  }
  double alpha, beta, gamma;
  detail::euler_zyz(r, alpha, beta, gamma);
  const int n = 2 * l + 1;
  const MatX d = detail::wigner_small_d(l, beta);
  Eigen::MatrixXcd dc(n, n);
  const std::complex<double> i1(0.0, 1.0);
  for (int mp = -l; mp <= l; ++mp)
    for (int m = -l; m <= l; ++m)
      dc(mp + l, m + l) = std::exp(i1 * (alpha * mp)) * d(mp + l, m + l) *
                          std::exp(i1 * (gamma * m));
  const Eigen::MatrixXcd c = detail::real_from_complex_basis(l);
  return (c * dc * c.adjoint()).real();
}

// rho^{l,p}(g): the real irrep matrix of order l and parity p at g in O(3).
inline MatX irrep_matrix(const IrrepLabel& label, const OrthogonalTransform& g) {
  MatX d = wigner_d_real(label.order, Rotation::from_matrix(g.rotation_part()));
  if (!g.proper() && label.parity == Parity::odd) d = -d;
  return d;
}

// ---------------------------------------------------------------------------
// Sampling, distances, interpolation
// ---------------------------------------------------------------------------

// Uniform sample over SO(3) via uniform unit quaternions.
inline Rotation sample_rotation(Rng& rng) {
  std::normal_distribution<double> unused;  // avoid libstdc++/llvm divergence
  (void)unused;
  // Marsaglia-style: four Gaussians from Box-Muller on our own uniform stream.
  auto gauss = [&rng]() {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  };
  Eigen::Quaterniond q(gauss(), gauss(), gauss(), gauss());
  if (q.norm() < 1e-12) q = Eigen::Quaterniond::Identity();
  return Rotation::from_quaternion(q);
}

inline Vec3 sample_unit_vector(Rng& rng) {
  const double z = uniform_in(rng, -1.0, 1.0);
  const double phi = uniform_in(rng, 0.0, 2.0 * std::numbers::pi);
  const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
  return Vec3(rho * std::cos(phi), rho * std::sin(phi), z);
}

// arccos((trace(R1 R2^T) - 1) / 2), in [0, pi].
inline double geodesic_distance(const Rotation& r1, const Rotation& r2) {
  const double t = (r1.matrix() * r2.matrix().transpose()).trace();
  return std::acos(std::clamp(0.5 * (t - 1.0), -1.0, 1.0));
}

inline Rotation slerp(const Rotation& a, const Rotation& b, double t) {
  return Rotation::from_quaternion(a.quaternion().slerp(t, b.quaternion()));
}

// Machine-readable record of the numeric conventions this library commits
// to, so external checkers and the test suite compare against one source of
// truth instead of prose.
inline std::vector<std::pair<std::string, std::string>> conventions_table() {
  return {
      {"conventions_version", "1"},
      {"irrep_component_order", "m=-l..l"},
      {"order1_harmonic_components", "y,z,x"},
      {"harmonic_normalization", "unit_norm_per_order"},
      {"even_parity_inversion_sign", "+1"},
      {"odd_parity_inversion_sign", "-1"},
      {"pseudovector_label", "order=1,parity=even"},
      {"rotation_storage", "unit_quaternion"},
      {"radial_offsets_of_r_max", "0,0.25,0.5,0.75,1"},
      {"radial_scale_constant", "8.433573"},
      {"kernel_center_voxel", "j=0_only"},
  };
}

inline void write_conventions(std::ostream& out) {
  for (const auto& [k, v] : conventions_table()) out << k << '=' << v << '\n';
}

// The 48-element octahedral group (signed axis permutations); the first 24
// entries are the proper rotations.
inline std::vector<OrthogonalTransform> octahedral_group() {
  std::vector<OrthogonalTransform> proper, improper;
  const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (const auto& p : perms) {
    for (int signs = 0; signs < 8; ++signs) {
      Mat3 m = Mat3::Zero();
      for (int i = 0; i < 3; ++i) m(i, p[i]) = (signs >> i & 1) ? -1.0 : 1.0;
      auto g = OrthogonalTransform::from_matrix(m);
      (g.proper() ? proper : improper).push_back(g);
    }
  }
  proper.insert(proper.end(), improper.begin(), improper.end());
  return proper;
}

}  // namespace e3pose
