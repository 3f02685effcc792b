#pragma once

// Rigid pose machinery downstream of the network output: the three-vector
// frame parametrization, nearest-rotation projection with the handedness fix,
// the symmetry-invariant loss and its adjoints, evaluation metrics, head
// ablation variants, and the N-fold symmetry parametrization.

#include <fstream>
#include <vector>

#include <Eigen/Dense>

#include "e3pose/common.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

// Predicted frame: e_x is a pseudovector (order 1, even parity), e_y and e_z
// are ordinary vectors (order 1, odd parity). Unit norm, not necessarily
// orthogonal.
struct PoseParametrization {
  Vec3 e_x = Vec3::UnitX();
  Vec3 e_y = Vec3::UnitY();
  Vec3 e_z = Vec3::UnitZ();

  static RepSpec rep() {
    RepSpec r;
    r.blocks.push_back({1, IrrepLabel{1, Parity::even}});
    r.blocks.push_back({2, IrrepLabel{1, Parity::odd}});
    return r;
  }

  // Channel layout matches rep(): pseudovector block then the two vector
  // blocks, each in the harmonic component order (y, z, x).
  VecX flatten() const {
    VecX v(9);
    v << e_x.y(), e_x.z(), e_x.x(), e_y.y(), e_y.z(), e_y.x(), e_z.y(), e_z.z(), e_z.x();
    return v;
  }
  static PoseParametrization from_flat(const VecX& v) {
    if (v.size() != 9) throw ValidationError("PoseParametrization: expected 9 components");
    PoseParametrization p;
    p.e_x = Vec3(v[2], v[0], v[1]);
    p.e_y = Vec3(v[5], v[3], v[4]);
    p.e_z = Vec3(v[8], v[6], v[7]);
    return p;
  }

  void validate_unit(double tol = 1e-6) const {
    for (const Vec3* v : {&e_x, &e_y, &e_z})
      if (std::abs(v->norm() - 1.0) > tol)
        throw ValidationError("PoseParametrization: component not unit norm");
  }
};

struct RigidPose {
  Rotation rotation;
  Vec3 translation_mm = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return rotation * x + translation_mm; }
};

struct SymmetryGroup {
  enum class Kind { trivial, reflection, n_fold };
  Kind kind = Kind::trivial;
  Vec3 axis = Vec3::UnitX();
  int n = 0;  // n_fold only, >= 2
};

// Binary occupancy on a voxel grid with a world affine (voxel -> mm).
struct OccupancyGrid {
  int nx = 0, ny = 0, nz = 0;
  double voxel_mm = 1.0;
  Eigen::Matrix4d world = Eigen::Matrix4d::Identity();
  std::vector<uint8_t> mask;

  int index(int x, int y, int z) const { return (z * ny + y) * nx + x; }
  bool at(int x, int y, int z) const { return mask[static_cast<size_t>(index(x, y, z))] != 0; }
  Vec3 voxel_to_world(const Vec3& v) const {
    return world.topLeftCorner<3, 3>() * v + world.topRightCorner<3, 1>();
  }
};

inline Vec3 com_translation(const OccupancyGrid& occ) {
  Vec3 sum = Vec3::Zero();
  long count = 0;
  for (int z = 0; z < occ.nz; ++z)
    for (int y = 0; y < occ.ny; ++y)
      for (int x = 0; x < occ.nx; ++x)
        if (occ.at(x, y, z)) {
          sum += occ.voxel_to_world(Vec3(x, y, z));
          ++count;
        }
  if (count == 0) throw EmptyOccupancy("com_translation: no occupied voxels");
  return sum / static_cast<double>(count);
}

// Boundary voxels of the occupancy (occupied with at least one empty
// 6-neighbor), in world mm. Used as the surface set for AAD.
inline std::vector<Vec3> surface_points(const OccupancyGrid& occ) {
  std::vector<Vec3> out;
  auto occupied = [&](int x, int y, int z) {
    return x >= 0 && x < occ.nx && y >= 0 && y < occ.ny && z >= 0 && z < occ.nz &&
           occ.at(x, y, z);
  };
  for (int z = 0; z < occ.nz; ++z)
    for (int y = 0; y < occ.ny; ++y)
      for (int x = 0; x < occ.nx; ++x) {
        if (!occ.at(x, y, z)) continue;
        if (!occupied(x - 1, y, z) || !occupied(x + 1, y, z) || !occupied(x, y - 1, z) ||
            !occupied(x, y + 1, z) || !occupied(x, y, z - 1) || !occupied(x, y, z + 1))
          out.push_back(occ.voxel_to_world(Vec3(x, y, z)));
      }
  return out;
}

// Nearest rotation (Frobenius) to the column basis [e_x e_y e_z]. If the
// orthogonal polar factor is a reflection, the e_x column sign is flipped and
// the projection recomputed, selecting the proper rotation.
inline Rotation project_to_rotation(const PoseParametrization& p) {
  Mat3 m;
  m.col(0) = p.e_x;
  m.col(1) = p.e_y;
  m.col(2) = p.e_z;
  auto polar = [](const Mat3& a) {
    Eigen::JacobiSVD<Mat3> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.singularValues()(1) <= 1e-8)
      throw AmbiguousProjection("project_to_rotation: rank below 2");
    return Mat3(svd.matrixU() * svd.matrixV().transpose());
  };
  Mat3 r = polar(m);
  if (r.determinant() < 0.0) {
    m.col(0) = -m.col(0);
    r = polar(m);
  }
  return Rotation::from_matrix(r);
}

// Frame loss with adjoints. The angle terms are evaluated through their
// algebraic identities: |sin t_x| = sqrt(1 - (e_x . gt_x)^2) which is even in
// e_x, and |sin(t/2)| = sqrt((1 - e . gt)/2) for the two ordinary vectors.
struct LossResult {
  double value = 0.0;
  Vec3 d_e_x = Vec3::Zero();
  Vec3 d_e_y = Vec3::Zero();
  Vec3 d_e_z = Vec3::Zero();
};

inline LossResult pose_loss(const PoseParametrization& pred, const PoseParametrization& gt,
                            double beta = 1.0) {
  pred.validate_unit();
  gt.validate_unit();
  LossResult out;

  const double cx = pred.e_x.dot(gt.e_x);
  const double sx = std::sqrt(std::max(0.0, 1.0 - cx * cx));
  out.value += sx;
  out.d_e_x = -cx / std::max(sx, 1e-12) * gt.e_x;

  auto half_sine = [&](const Vec3& e, const Vec3& g, Vec3& adj) {
    const double c = e.dot(g);
    const double s = std::sqrt(std::max(0.0, (1.0 - c) / 2.0));
    adj = -beta / (4.0 * std::max(s, 1e-12)) * g;
    return beta * s;
  };
  out.value += half_sine(pred.e_y, gt.e_y, out.d_e_y);
  out.value += half_sine(pred.e_z, gt.e_z, out.d_e_z);
  return out;
}

struct PoseMetrics {
  double rot_error_rad = 0.0;
  double aad_mm = 0.0;
  double trans_error_mm = 0.0;
};

inline PoseMetrics pose_metrics(const RigidPose& pred, const RigidPose& gt,
                                const std::vector<Vec3>& surface_mm) {
  if (surface_mm.empty()) throw ValidationError("pose_metrics: empty surface set");
  PoseMetrics m;
  m.rot_error_rad = geodesic_distance(pred.rotation, gt.rotation);
  m.trans_error_mm = (pred.translation_mm - gt.translation_mm).norm();
  double sum = 0.0;
  for (const auto& x : surface_mm) sum += (pred.apply(x) - gt.apply(x)).norm();
  m.aad_mm = sum / static_cast<double>(surface_mm.size());
  return m;
}

// --- Head ablation variants ---------------------------------------------

enum class AblationMode { no_pseudovector, two_vector };

// Variant loss where e_x is treated as an ordinary vector: the x term becomes
// |sin(t_x/2)|, which is not invariant under e_x -> -e_x.
inline LossResult pose_loss_no_pseudovector(const PoseParametrization& pred,
                                            const PoseParametrization& gt, double beta = 1.0) {
  pred.validate_unit();
  gt.validate_unit();
  LossResult out;
  auto half_sine = [](const Vec3& e, const Vec3& g, double w, Vec3& adj) {
    const double c = e.dot(g);
    const double s = std::sqrt(std::max(0.0, (1.0 - c) / 2.0));
    adj = -w / (4.0 * std::max(s, 1e-12)) * g;
    return w * s;
  };
  out.value += half_sine(pred.e_x, gt.e_x, 1.0, out.d_e_x);
  out.value += half_sine(pred.e_y, gt.e_y, beta, out.d_e_y);
  out.value += half_sine(pred.e_z, gt.e_z, beta, out.d_e_z);
  return out;
}

// Two-vector head completion: orthonormalize (e_y, e_z) and recover the x
// axis by cross product, so the columns are (e_y x e_z, e_y, e_z) when the
// inputs are already orthonormal.
inline Rotation complete_two_vector(const Vec3& e_y, const Vec3& e_z) {
  const Vec3 uy = e_y.normalized();
  Vec3 uz = e_z - e_z.dot(uy) * uy;
  if (e_y.norm() < 1e-12 || e_z.norm() < 1e-12 ||
      std::abs(e_y.normalized().dot(e_z.normalized())) > 1.0 - 1e-8)
    throw DegenerateBasis("complete_two_vector: y and z directions are parallel");
  uz.normalize();
  const Vec3 ux = uy.cross(uz);
  Mat3 r;
  r.col(0) = ux;
  r.col(1) = uy;
  r.col(2) = uz;
  return Rotation::from_matrix(r);
}

// --- N-fold symmetry parametrization --------------------------------------

// Any rotation taking the z axis onto the given unit axis.
inline Rotation rotation_z_to(const Vec3& axis) {
  const Vec3 a = axis.normalized();
  const Vec3 z = Vec3::UnitZ();
  const double c = std::clamp(z.dot(a), -1.0, 1.0);
  if (c > 1.0 - 1e-12) return Rotation();
  if (c < -1.0 + 1e-12) return Rotation::axis_angle(Vec3::UnitX(), std::numbers::pi);
  const Vec3 k = z.cross(a).normalized();
  return Rotation::axis_angle(k, std::acos(c));
}

// Pose parametrization for an object with an N-fold symmetry axis: two
// order-N Wigner-D columns (the +/-N components, which are invariant under
// rotations of 2 pi / N about the axis) plus the rotated axis itself.
// Layout: column m=-N (2N+1), column m=+N (2N+1), axis (3).
inline VecX nfold_param(const Rotation& r, int n, const Vec3& axis_canonical) {
  if (n < 2) throw ValidationError("nfold_param: N must be >= 2");
  if (std::abs(axis_canonical.norm() - 1.0) > 1e-9)
    throw ValidationError("nfold_param: axis must be unit norm");
  const Rotation a = rotation_z_to(axis_canonical);
  const MatX d = wigner_d_real(n, r * a);
  const int dim = 2 * n + 1;
  VecX h(2 * dim + 3);
  h.segment(0, dim) = d.col(0);        // m = -N
  h.segment(dim, dim) = d.col(dim - 1);  // m = +N
  h.segment(2 * dim, 3) = r * axis_canonical;
  return h;
}

// Residual of the defining invariance: rotating the object by 2 pi k / N
// about its (posed) symmetry axis must leave the parametrization unchanged.
// The representation acts as D^N on both columns and as a vector on the axis.
inline double nfold_invariance_residual(const Rotation& r, int n, const Vec3& axis_canonical) {
  const VecX h = nfold_param(r, n, axis_canonical);
  const Vec3 world_axis = r * axis_canonical;
  const int dim = 2 * n + 1;
  double worst = 0.0;
  for (int k = 1; k < n; ++k) {
    const Rotation g = Rotation::axis_angle(world_axis, 2.0 * std::numbers::pi * k / n);
    const MatX d = wigner_d_real(n, g);
    VecX gh(2 * dim + 3);
    gh.segment(0, dim) = d * h.segment(0, dim);
    gh.segment(dim, dim) = d * h.segment(dim, dim);
    gh.segment(2 * dim, 3) = g * Vec3(h.segment(2 * dim, 3));
    worst = std::max(worst, (gh - h).cwiseAbs().maxCoeff());
  }
  return worst;
}

// --- Pose file format ------------------------------------------------------

inline void write_pose_file(const std::string& path, const RigidPose& pose) {
  std::ofstream f(path);
  if (!f) throw FormatError("write_pose_file: cannot open " + path);
  f.precision(17);
  f << "# rigid pose: rotation rows then translation, millimeters\n";
  const Mat3& r = pose.rotation.matrix();
  for (int i = 0; i < 3; ++i) f << r(i, 0) << " " << r(i, 1) << " " << r(i, 2) << "\n";
  f << pose.translation_mm.x() << " " << pose.translation_mm.y() << " "
    << pose.translation_mm.z() << "\n";
  if (!f) throw FormatError("write_pose_file: write failed for " + path);
}

inline RigidPose read_pose_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("read_pose_file: cannot open " + path);
  std::string header;
  std::getline(f, header);
  if (header.rfind("# rigid pose:", 0) != 0)
    throw FormatError("read_pose_file: missing header line in " + path);
  Mat3 r;
  Vec3 t;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (!(f >> r(i, j))) throw FormatError("read_pose_file: truncated rotation in " + path);
  for (int i = 0; i < 3; ++i)
    if (!(f >> t(i))) throw FormatError("read_pose_file: truncated translation in " + path);
  RigidPose pose;
  pose.rotation = Rotation::from_matrix(r);
  pose.translation_mm = t;
  return pose;
}

}  // namespace e3pose
