#pragma once

// Test-only oracles, independent of the implementation paths they check.

#include <vector>

#include "e3pose/common.hpp"
#include "e3pose/kernels.hpp"
#include "e3pose/so3.hpp"

namespace e3pose::oracle {

// Closed-form real spherical harmonics up to degree 2 (monomial formulas).
inline VecX harmonics_closed_form(int j, const Vec3& u) {
  const double pi = std::numbers::pi;
  const double x = u.x(), y = u.y(), z = u.z();
  VecX out(2 * j + 1);
  switch (j) {
    case 0:
      out << 0.5 * std::sqrt(1.0 / pi);
      break;
    case 1:
      out << std::sqrt(3.0 / (4.0 * pi)) * y, std::sqrt(3.0 / (4.0 * pi)) * z,
          std::sqrt(3.0 / (4.0 * pi)) * x;
      break;
    case 2:
      out << 0.5 * std::sqrt(15.0 / pi) * x * y, 0.5 * std::sqrt(15.0 / pi) * y * z,
          0.25 * std::sqrt(5.0 / pi) * (3.0 * z * z - 1.0), 0.5 * std::sqrt(15.0 / pi) * x * z,
          0.25 * std::sqrt(15.0 / pi) * (x * x - y * y);
      break;
    default:
      throw std::runtime_error("closed form only up to j = 2");
  }
  return out;
}

// Brute-force linear map of degree-j harmonics under a rotation: evaluate on
// a point set before/after and solve the least-squares change of basis.
inline MatX harmonic_rotation_by_pointsolve(int j, const Rotation& r, Rng& rng) {
  const int n = 2 * j + 1;
  const int npts = 6 * n;
  MatX before(npts, n), after(npts, n);
  for (int i = 0; i < npts; ++i) {
    const Vec3 u = sample_unit_vector(rng);
    before.row(i) = real_spherical_harmonics(j, u).transpose();
    after.row(i) = real_spherical_harmonics(j, r * u).transpose();
  }
  // after = before * D^T  =>  D = (before \ after)^T
  return before.colPivHouseholderQr().solve(after).transpose();
}

// Brute-force dimension of the space of equivariant angular kernels
// kappa: S^2 -> R^{dh x df} with angular degree <= max_degree, found by
// null-space solving of sampled equivariance constraints over O(3). Never
// consults the selection rule or the intertwiner solver.
inline int equivariant_angular_dimension(const IrrepLabel& f, const IrrepLabel& h,
                                         int max_degree, Rng& rng) {
  const int df = f.dimension(), dh = h.dimension();
  int ncoef = 0;
  for (int j = 0; j <= max_degree; ++j) ncoef += 2 * j + 1;
  const int nvars = dh * df * ncoef;

  auto eval_design = [&](const Vec3& u) {
    VecX y(ncoef);
    int at = 0;
    for (int j = 0; j <= max_degree; ++j) {
      y.segment(at, 2 * j + 1) = real_spherical_harmonics(j, u);
      at += 2 * j + 1;
    }
    return y;
  };

  std::vector<OrthogonalTransform> gs;
  for (int i = 0; i < 25; ++i) {
    const Rotation r = sample_rotation(rng);
    gs.push_back(OrthogonalTransform::from_rotation(r));
    gs.push_back(OrthogonalTransform::from_matrix(Mat3(-r.matrix())));
  }

  const int rows_per = dh * df;
  MatX system(static_cast<int>(gs.size()) * 3 * rows_per, nvars);
  int row = 0;
  for (const auto& g : gs) {
    const MatX p = e3pose::detail::kron(irrep_matrix(f, g), irrep_matrix(h, g));
    for (int s = 0; s < 3; ++s) {
      const Vec3 u = sample_unit_vector(rng);
      const VecX yu = eval_design(u);
      const VecX ygu = eval_design(g.matrix * u);
      // kappa(g u) - P(g) kappa(u) = 0; vars ordered (coef, entry).
      for (int c = 0; c < ncoef; ++c)
        system.block(row, c * rows_per, rows_per, rows_per) =
            ygu[c] * MatX::Identity(rows_per, rows_per) - yu[c] * p;
      row += rows_per;
    }
  }
  Eigen::BDCSVD<MatX> svd(system);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) < 1e-12) return nvars;  // unconstrained system
  int dim = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) < 1e-8 * sv(0)) ++dim;
  dim += nvars - static_cast<int>(sv.size());  // rank-deficient rows case
  return dim;
}

// Worst-case kernel equivariance residual over a group element that permutes
// the voxel grid exactly: max_x |rho_h(g) kappa(g^-1 x) rho_f(g)^T - kappa(x)|.
inline double kernel_equivariance_residual(const std::vector<MatX>& kernel, int support,
                                           const IrrepLabel& f, const IrrepLabel& h,
                                           const OrthogonalTransform& g) {
  const MatX rf = irrep_matrix(f, g), rh = irrep_matrix(h, g);
  const int hw = support / 2;
  double worst = 0.0;
  for (int dz = -hw; dz <= hw; ++dz)
    for (int dy = -hw; dy <= hw; ++dy)
      for (int dx = -hw; dx <= hw; ++dx) {
        const Vec3 x(dx, dy, dz);
        const Vec3 gx = g.matrix.transpose() * x;  // g^-1 x
        const int xi[3] = {static_cast<int>(std::lround(gx.x())),
                           static_cast<int>(std::lround(gx.y())),
                           static_cast<int>(std::lround(gx.z()))};
        const auto& k_gx =
            kernel[static_cast<size_t>(KernelBasis::voxel_index(support, xi[0], xi[1], xi[2]))];
        const auto& k_x =
            kernel[static_cast<size_t>(KernelBasis::voxel_index(support, dx, dy, dz))];
        worst = std::max(worst, (rh * k_gx * rf.transpose() - k_x).cwiseAbs().maxCoeff());
      }
  return worst;
}

}  // namespace e3pose::oracle
