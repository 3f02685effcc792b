#pragma once

// Slice-stack prescription study: plan a stack of parallel 2D imaging planes
// in the canonical head frame, drive them through a synthetic rigid motion
// trajectory with a pose estimator in the loop, and score the result with
// coverage gap, coverage irregularity, per-slice obliqueness, and per-slice
// center offset.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "e3pose/common.hpp"
#include "e3pose/pose.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

enum class StackOrientation { sagittal, coronal, axial };

inline const char* orientation_name(StackOrientation o) {
  switch (o) {
    case StackOrientation::sagittal: return "sagittal";
    case StackOrientation::coronal: return "coronal";
    default: return "axial";
  }
}

// World direction the stack advances along: sagittal left->right (+x),
// coronal posterior->anterior (+y), axial inferior->superior (+z).
inline Vec3 orientation_normal(StackOrientation o) {
  switch (o) {
    case StackOrientation::sagittal: return Vec3::UnitX();
    case StackOrientation::coronal: return Vec3::UnitY();
    default: return Vec3::UnitZ();
  }
}

// A slice plane is a rigid pose whose rotation's third column is the slice
// normal and whose translation is the slice center (mm, head frame).
struct SlicePlan {
  StackOrientation orientation = StackOrientation::axial;
  double pixel_mm = 1.0;
  double thickness_mm = 3.0;
  std::vector<RigidPose> targets;  // P_1..P_K, consecutive planes offset by
                                   // thickness along the shared normal

  int num_slices() const { return static_cast<int>(targets.size()); }
};

// K parallel planes centered on `center_mm`, spanning (K-1)*thickness
// symmetrically along the orientation axis.
inline SlicePlan make_slice_plan(StackOrientation orientation, int num_slices,
                                 const Vec3& center_mm = Vec3::Zero()) {
  if (num_slices < 23 || num_slices > 40)
    throw ValidationError("make_slice_plan: slice count must be in [23, 40]");
  SlicePlan plan;
  plan.orientation = orientation;
  Mat3 r;
  switch (orientation) {
    case StackOrientation::sagittal:
      r.col(0) = Vec3::UnitY();
      r.col(1) = Vec3::UnitZ();
      r.col(2) = Vec3::UnitX();
      break;
    case StackOrientation::coronal:
      r.col(0) = Vec3::UnitZ();
      r.col(1) = Vec3::UnitX();
      r.col(2) = Vec3::UnitY();
      break;
    default:
      r = Mat3::Identity();
      break;
  }
  const Vec3 n = orientation_normal(orientation);
  for (int k = 0; k < num_slices; ++k) {
    RigidPose p;
    p.rotation = Rotation::from_matrix(r);
    p.translation_mm = center_mm + (k - 0.5 * (num_slices - 1)) * plan.thickness_mm * n;
    plan.targets.push_back(p);
  }
  return plan;
}

inline RigidPose compose(const RigidPose& a, const RigidPose& b) {
  RigidPose out;
  out.rotation = Rotation::from_matrix(Mat3(a.rotation.matrix() * b.rotation.matrix()));
  out.translation_mm = a.rotation * b.translation_mm + a.translation_mm;
  return out;
}

inline RigidPose inverse(const RigidPose& a) {
  RigidPose out;
  out.rotation = a.rotation.inverse();
  out.translation_mm = -(out.rotation * a.translation_mm);
  return out;
}

// b expressed relative to a (a^{-1} composed with b). The rotation goes
// through quaternions so that identical poses cancel to the exact identity,
// letting a perfect estimator score exact zeros instead of acos noise.
inline RigidPose pose_delta(const RigidPose& a, const RigidPose& b) {
  RigidPose d;
  d.rotation = Rotation::from_quaternion(a.rotation.quaternion().conjugate() *
                                         b.rotation.quaternion());
  d.translation_mm = a.rotation.inverse() * (b.translation_mm - a.translation_mm);
  return d;
}

// Head poses T_0..T_{K-1} sampled at the slice repetition time (3 s).
struct MotionTrajectory {
  std::vector<RigidPose> poses;
  double dt_s = 3.0;
  uint64_t seed = 0;
};

// Per-step motion magnitudes. Keyframes are drawn every `keyframe_stride`
// steps and intermediate poses filled in by slerp on the rotation and linear
// interpolation on the translation, so the sequence is piecewise geodesic.
struct MotionProfile {
  double rot_deg_per_step = 5.0;    // [0, 15]
  double trans_mm_per_step = 2.0;   // [0, 10]
  int keyframe_stride = 4;
};

inline MotionTrajectory synth_trajectory(uint64_t seed, const MotionProfile& profile,
                                         int num_steps) {
  if (profile.rot_deg_per_step < 0.0 || profile.rot_deg_per_step > 15.0)
    throw ValidationError("synth_trajectory: per-step rotation must be in [0, 15] degrees");
  if (profile.trans_mm_per_step < 0.0 || profile.trans_mm_per_step > 10.0)
    throw ValidationError("synth_trajectory: per-step translation must be in [0, 10] mm");
  if (num_steps < 1 || profile.keyframe_stride < 1)
    throw ValidationError("synth_trajectory: step counts must be positive");

  Rng rng(seed);
  MotionTrajectory traj;
  traj.seed = seed;

  // Keyframes accumulate one step's magnitude per intervening step, so the
  // interpolated sequence moves by at most the profile magnitudes per step.
  std::vector<RigidPose> keys;
  RigidPose cur;  // identity start
  keys.push_back(cur);
  const int num_keys = (num_steps - 1 + profile.keyframe_stride - 1) / profile.keyframe_stride + 1;
  for (int i = 1; i < num_keys; ++i) {
    const double angle = profile.rot_deg_per_step * profile.keyframe_stride *
                         std::numbers::pi / 180.0;
    const Rotation delta = Rotation::axis_angle(sample_unit_vector(rng), angle);
    RigidPose next;
    next.rotation = Rotation::from_matrix(Mat3(delta.matrix() * cur.rotation.matrix()));
    next.translation_mm =
        cur.translation_mm +
        profile.trans_mm_per_step * profile.keyframe_stride * sample_unit_vector(rng);
    keys.push_back(next);
    cur = next;
  }

  for (int k = 0; k < num_steps; ++k) {
    const int seg = k / profile.keyframe_stride;
    const double t = static_cast<double>(k - seg * profile.keyframe_stride) /
                     profile.keyframe_stride;
    RigidPose p;
    if (seg + 1 < static_cast<int>(keys.size())) {
      p.rotation = slerp(keys[seg].rotation, keys[seg + 1].rotation, t);
      p.translation_mm =
          (1.0 - t) * keys[seg].translation_mm + t * keys[seg + 1].translation_mm;
    } else {
      p = keys[seg];
    }
    traj.poses.push_back(p);
  }
  return traj;
}

enum class Estimator { oracle, motion_blind, pose_fn };

// Custom estimator: given the slice index and the true pose at that step,
// return the pose estimate. Throwing marks the step as identity-fallback.
using PoseFn = std::function<RigidPose(int step, const RigidPose& true_pose)>;

struct Prescription {
  std::vector<RigidPose> planes;          // prescribed planes, world frame
  std::vector<RigidPose> estimates;       // T-hat_k actually used
  std::vector<uint8_t> fallback;          // 1 where the estimator threw
};

// Prescribed plane for slice k is the target plane carried by the pose
// estimate from the navigator preceding that slice.
inline Prescription prescribe(const SlicePlan& plan, const MotionTrajectory& traj,
                              Estimator estimator, const PoseFn& pose_fn = {}) {
  if (static_cast<int>(traj.poses.size()) < plan.num_slices())
    throw ValidationError("prescribe: trajectory shorter than the slice plan");
  if (estimator == Estimator::pose_fn && !pose_fn)
    throw ValidationError("prescribe: pose_fn estimator requires a callable");

  Prescription out;
  for (int k = 0; k < plan.num_slices(); ++k) {
    RigidPose est;
    uint8_t fell_back = 0;
    switch (estimator) {
      case Estimator::oracle: est = traj.poses[static_cast<size_t>(k)]; break;
      case Estimator::motion_blind: est = traj.poses.front(); break;
      case Estimator::pose_fn:
        try {
          est = pose_fn(k, traj.poses[static_cast<size_t>(k)]);
        } catch (const std::exception&) {
          est = RigidPose{};  // identity fallback, simulation continues
          fell_back = 1;
        }
        break;
    }
    out.estimates.push_back(est);
    out.fallback.push_back(fell_back);
    out.planes.push_back(compose(est, plan.targets[static_cast<size_t>(k)]));
  }
  return out;
}

// Slice point spread function along the normal: Gaussian with FWHM equal to
// the slice thickness.
inline double psf_sigma_mm(double thickness_mm) {
  return thickness_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
}

// Coverage response p_C on a 1 mm grid over the brain bounding box. Each
// slice contributes a unit-peak Gaussian of the signed distance to its plane.
struct CoverageGrid {
  Vec3 origin_mm = Vec3::Zero();
  int nx = 0, ny = 0, nz = 0;
  std::vector<double> p_c;      // nx*ny*nz, x fastest
  std::vector<uint8_t> brain;   // 1 where the voxel lies inside the brain

  int index(int x, int y, int z) const { return (z * ny + y) * nx + x; }
};

// Planes must already be expressed in the same frame as the occupancy (the
// canonical head frame). The caller maps world-frame prescriptions back with
// the true pose before scoring.
inline CoverageGrid coverage_field(const std::vector<RigidPose>& planes,
                                   const OccupancyGrid& occ, double thickness_mm = 3.0) {
  Vec3 lo(1e30, 1e30, 1e30), hi(-1e30, -1e30, -1e30);
  for (int z = 0; z < occ.nz; ++z)
    for (int y = 0; y < occ.ny; ++y)
      for (int x = 0; x < occ.nx; ++x)
        if (occ.at(x, y, z)) {
          const Vec3 p = occ.voxel_to_world(Vec3(x, y, z));
          lo = lo.cwiseMin(p);
          hi = hi.cwiseMax(p);
        }
  if (lo.x() > hi.x()) throw EmptyOccupancy("coverage_field: no occupied voxels");

  CoverageGrid grid;
  grid.origin_mm = lo - Vec3::Constant(1.0);
  grid.nx = static_cast<int>(std::ceil(hi.x() - lo.x())) + 3;
  grid.ny = static_cast<int>(std::ceil(hi.y() - lo.y())) + 3;
  grid.nz = static_cast<int>(std::ceil(hi.z() - lo.z())) + 3;
  grid.p_c.assign(static_cast<size_t>(grid.nx) * grid.ny * grid.nz, 0.0);
  grid.brain.assign(grid.p_c.size(), 0);

  const double sigma = psf_sigma_mm(thickness_mm);
  const Eigen::Matrix3d vox_to_world = occ.world.topLeftCorner<3, 3>();
  const Eigen::Matrix3d world_to_vox = vox_to_world.inverse();
  const Vec3 occ_shift = occ.world.topRightCorner<3, 1>();

  for (int z = 0; z < grid.nz; ++z)
    for (int y = 0; y < grid.ny; ++y)
      for (int x = 0; x < grid.nx; ++x) {
        const Vec3 p = grid.origin_mm + Vec3(x, y, z);
        const Vec3 v = world_to_vox * (p - occ_shift);
        const int vx = static_cast<int>(std::lround(v.x()));
        const int vy = static_cast<int>(std::lround(v.y()));
        const int vz = static_cast<int>(std::lround(v.z()));
        if (vx < 0 || vx >= occ.nx || vy < 0 || vy >= occ.ny || vz < 0 || vz >= occ.nz ||
            !occ.at(vx, vy, vz))
          continue;
        grid.brain[static_cast<size_t>(grid.index(x, y, z))] = 1;
        double sum = 0.0;
        for (const RigidPose& plane : planes) {
          const Vec3 n = plane.rotation.matrix().col(2);
          const double d = n.dot(p - plane.translation_mm);
          sum += std::exp(-0.5 * d * d / (sigma * sigma));
        }
        grid.p_c[static_cast<size_t>(grid.index(x, y, z))] = sum;
      }
  return grid;
}

struct CoverageMetrics {
  double gap = 0.0;           // fraction of brain voxels with p_C below epsilon
  double irregularity = 0.0;  // KL(p_C-normalized || uniform) over brain voxels
  std::vector<double> obliqueness_rad;
  std::vector<double> offset_mm;
  double mean_obliqueness_rad = 0.0;
  double mean_offset_mm = 0.0;
};

// A Gaussian never reaches zero, so "uncovered" means the response is below
// a small fraction of a single slice's peak.
inline constexpr double kCoverageEpsilon = 1e-6;

// Fraction of brain voxels whose coverage response is below epsilon.
inline double coverage_gap(const CoverageGrid& grid) {
  long brain_count = 0, uncovered = 0;
  for (size_t i = 0; i < grid.p_c.size(); ++i) {
    if (!grid.brain[i]) continue;
    ++brain_count;
    if (grid.p_c[i] < kCoverageEpsilon) ++uncovered;
  }
  if (brain_count == 0) throw EmptyOccupancy("coverage_gap: no brain voxels");
  return static_cast<double>(uncovered) / static_cast<double>(brain_count);
}

// KL divergence from the epsilon-floored, normalized coverage response to the
// uniform distribution over brain voxels. Zero iff the response is uniform.
inline double coverage_kl(const CoverageGrid& grid) {
  long brain_count = 0;
  double total = 0.0;
  for (size_t i = 0; i < grid.p_c.size(); ++i) {
    if (!grid.brain[i]) continue;
    ++brain_count;
    total += std::max(grid.p_c[i], kCoverageEpsilon);
  }
  if (brain_count == 0) throw EmptyOccupancy("coverage_kl: no brain voxels");
  double kl = 0.0;
  for (size_t i = 0; i < grid.p_c.size(); ++i) {
    if (!grid.brain[i]) continue;
    const double q = std::max(grid.p_c[i], kCoverageEpsilon) / total;
    kl += q * std::log(q * static_cast<double>(brain_count));
  }
  return std::max(kl, 0.0);
}

inline CoverageMetrics coverage(const SlicePlan& plan, const Prescription& presc,
                                const MotionTrajectory& traj, const OccupancyGrid& occ) {
  if (static_cast<int>(presc.planes.size()) != plan.num_slices())
    throw ValidationError("coverage: prescription and plan slice counts differ");

  // Score in the head frame at acquisition time: what slice the head actually
  // received is the prescribed world plane pulled back by the true pose.
  std::vector<RigidPose> relative;
  for (int k = 0; k < plan.num_slices(); ++k)
    relative.push_back(
        compose(inverse(traj.poses[static_cast<size_t>(k)]), presc.planes[static_cast<size_t>(k)]));

  CoverageMetrics m;
  for (int k = 0; k < plan.num_slices(); ++k) {
    const RigidPose& target = plan.targets[static_cast<size_t>(k)];
    // The slice received relative to its target is delta composed with the
    // target, where delta is the pose-estimate error at acquisition time; the
    // rotation error is conjugation-invariant so delta's angle is the
    // obliqueness directly.
    const RigidPose delta =
        pose_delta(traj.poses[static_cast<size_t>(k)], presc.estimates[static_cast<size_t>(k)]);
    m.obliqueness_rad.push_back(geodesic_distance(delta.rotation, Rotation()));
    m.offset_mm.push_back(
        (delta.rotation * target.translation_mm + delta.translation_mm - target.translation_mm)
            .norm());
    m.mean_obliqueness_rad += m.obliqueness_rad.back();
    m.mean_offset_mm += m.offset_mm.back();
  }
  m.mean_obliqueness_rad /= plan.num_slices();
  m.mean_offset_mm /= plan.num_slices();

  const CoverageGrid grid = coverage_field(relative, occ, plan.thickness_mm);
  m.gap = coverage_gap(grid);
  m.irregularity = coverage_kl(grid);
  return m;
}

// One line per simulated stack, for downstream plotting.
struct SimRecord {
  StackOrientation orientation = StackOrientation::axial;
  uint64_t seed = 0;
  std::string estimator;
  double gap = 0.0;
  double irregularity = 0.0;
  double mean_obliqueness_deg = 0.0;
  double mean_offset_mm = 0.0;
};

inline std::string format_record(const SimRecord& r) {
  std::ostringstream os;
  os.precision(10);
  os << orientation_name(r.orientation) << ' ' << r.seed << ' ' << r.estimator << ' ' << r.gap
     << ' ' << r.irregularity << ' ' << r.mean_obliqueness_deg << ' ' << r.mean_offset_mm;
  return os.str();
}

inline SimRecord simulate_stack(const OccupancyGrid& occ, StackOrientation orientation,
                                int num_slices, const MotionTrajectory& traj,
                                Estimator estimator, const PoseFn& pose_fn = {}) {
  const SlicePlan plan = make_slice_plan(orientation, num_slices, com_translation(occ));
  const Prescription presc = prescribe(plan, traj, estimator, pose_fn);
  const CoverageMetrics cm = coverage(plan, presc, traj, occ);
  SimRecord rec;
  rec.orientation = orientation;
  rec.seed = traj.seed;
  rec.estimator = estimator == Estimator::oracle        ? "oracle"
                  : estimator == Estimator::motion_blind ? "motion_blind"
                                                         : "pose_fn";
  rec.gap = cm.gap;
  rec.irregularity = cm.irregularity;
  rec.mean_obliqueness_deg = cm.mean_obliqueness_rad * 180.0 / std::numbers::pi;
  rec.mean_offset_mm = cm.mean_offset_mm;
  return rec;
}

}  // namespace e3pose
