#pragma once

// Voxel fields with typed channel blocks and the group action on them:
// channels mix by the block-diagonal representation, samples move by the
// inverse spatial map. Signed-permutation elements act grid-exactly on cubic
// grids; anything else goes through trilinear resampling.

#include <vector>

#include <Eigen/Dense>

#include "e3pose/common.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

// One multiplicity copy of an irrep inside a RepSpec, with its channel offset.
struct BlockRef {
  IrrepLabel label;
  int offset = 0;
};

inline std::vector<BlockRef> atomic_blocks(const RepSpec& rep) {
  std::vector<BlockRef> out;
  int at = 0;
  for (const auto& b : rep.blocks)
    for (int i = 0; i < b.multiplicity; ++i) {
      out.push_back({b.label, at});
      at += b.label.dimension();
    }
  return out;
}

// Block-diagonal representation matrix of a whole RepSpec.
inline MatX rep_matrix(const RepSpec& rep, const OrthogonalTransform& g) {
  const int d = rep.dimension();
  MatX m = MatX::Zero(d, d);
  for (const auto& b : atomic_blocks(rep)) {
    const int n = b.label.dimension();
    m.block(b.offset, b.offset, n, n) = irrep_matrix(b.label, g);
  }
  return m;
}

struct IrrepField {
  int nx = 0, ny = 0, nz = 0;
  double voxel_mm = 1.0;
  RepSpec rep;
  // channels x voxels; voxel column index = (z*ny + y)*nx + x, so x runs
  // contiguously along columns.
  MatX data;

  IrrepField() = default;
  IrrepField(int nx_, int ny_, int nz_, const RepSpec& rep_, double voxel_mm_ = 1.0)
      : nx(nx_), ny(ny_), nz(nz_), voxel_mm(voxel_mm_), rep(rep_) {
    if (nx <= 0 || ny <= 0 || nz <= 0) throw ValidationError("IrrepField: nonpositive dims");
    data = MatX::Zero(rep.dimension(), voxels());
  }

  int voxels() const { return nx * ny * nz; }
  int index(int x, int y, int z) const { return (z * ny + y) * nx + x; }
  bool in_range(int x, int y, int z) const {
    return x >= 0 && x < nx && y >= 0 && y < ny && z >= 0 && z < nz;
  }
  Vec3 center() const { return Vec3((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0); }

  void validate() const {
    if (data.rows() != rep.dimension() || data.cols() != voxels())
      throw ValidationError("IrrepField: data shape does not match rep/grid");
  }
};

namespace detail {

inline bool is_signed_permutation(const Mat3& m) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double a = std::abs(m(i, j));
      if (a > 1e-12 && std::abs(a - 1.0) > 1e-12) return false;
    }
  return true;
}

}  // namespace detail

// Grid-exact action: g must be a signed permutation (the octahedral group),
// shift an integer voxel translation. Rotation happens about the grid center.
// Source samples falling outside the grid read as zero.
inline IrrepField transform_field(const IrrepField& f, const OrthogonalTransform& g,
                                  const Eigen::Vector3i& shift = Eigen::Vector3i::Zero()) {
  f.validate();
  if (!detail::is_signed_permutation(g.matrix))
    throw ValidationError("transform_field: not a signed permutation; use the resampled variant");
  const bool rotates = (g.matrix - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-12;
  if (rotates && (f.nx != f.ny || f.ny != f.nz))
    throw ValidationError("transform_field: grid-exact rotation requires a cubic grid");

  IrrepField out(f.nx, f.ny, f.nz, f.rep, f.voxel_mm);
  const Mat3 ginv = g.matrix.transpose();
  const Vec3 c = f.center();
  const MatX rho = rep_matrix(f.rep, g);

  for (int z = 0; z < f.nz; ++z)
    for (int y = 0; y < f.ny; ++y)
      for (int x = 0; x < f.nx; ++x) {
        const Vec3 p(x - shift.x(), y - shift.y(), z - shift.z());
        const Vec3 q = ginv * (p - c) + c;
        const int qx = static_cast<int>(std::lround(q.x()));
        const int qy = static_cast<int>(std::lround(q.y()));
        const int qz = static_cast<int>(std::lround(q.z()));
        if ((q - Vec3(qx, qy, qz)).cwiseAbs().maxCoeff() > 1e-9)
          throw ValidationError("transform_field: transform does not land on the grid");
        if (f.in_range(qx, qy, qz))
          out.data.col(out.index(x, y, z)).noalias() = rho * f.data.col(f.index(qx, qy, qz));
      }
  return out;
}

// Approximate action for arbitrary rotations: trilinear resampling about the
// grid center, zero outside. shift is in voxels (may be fractional).
inline IrrepField transform_field_resampled(const IrrepField& f, const OrthogonalTransform& g,
                                            const Vec3& shift = Vec3::Zero()) {
  f.validate();
  IrrepField out(f.nx, f.ny, f.nz, f.rep, f.voxel_mm);
  const Mat3 ginv = g.matrix.transpose();
  const Vec3 c = f.center();
  const MatX rho = rep_matrix(f.rep, g);
  const int ch = f.rep.dimension();

  VecX sample(ch);
  for (int z = 0; z < f.nz; ++z)
    for (int y = 0; y < f.ny; ++y)
      for (int x = 0; x < f.nx; ++x) {
        const Vec3 q = ginv * (Vec3(x, y, z) - shift - c) + c;
        const int x0 = static_cast<int>(std::floor(q.x()));
        const int y0 = static_cast<int>(std::floor(q.y()));
        const int z0 = static_cast<int>(std::floor(q.z()));
        const double fx = q.x() - x0, fy = q.y() - y0, fz = q.z() - z0;
        sample.setZero();
        for (int dz = 0; dz <= 1; ++dz)
          for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
              if (!f.in_range(x0 + dx, y0 + dy, z0 + dz)) continue;
              const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
              sample += w * f.data.col(f.index(x0 + dx, y0 + dy, z0 + dz));
            }
        out.data.col(out.index(x, y, z)).noalias() = rho * sample;
      }
  return out;
}

}  // namespace e3pose
