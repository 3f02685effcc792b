#include <catch2/catch_amalgamated.hpp>

#include "e3pose/slicesim.hpp"
#include "e3pose/volume.hpp"

using namespace e3pose;

namespace {

OccupancyGrid test_brain() {
  PhantomConfig cfg;
  cfg.n = 24;
  cfg.voxel_mm = 3.0;
  return generate_phantom(42, cfg).occupancy;
}

MotionTrajectory constant_trajectory(int steps, const RigidPose& pose = {}) {
  MotionTrajectory t;
  t.poses.assign(static_cast<size_t>(steps), pose);
  return t;
}

}  // namespace

TEST_CASE("slice plan geometry") {
  SECTION("slice counts outside [23, 40] are rejected") {
    REQUIRE_THROWS_AS(make_slice_plan(StackOrientation::axial, 22), ValidationError);
    REQUIRE_THROWS_AS(make_slice_plan(StackOrientation::axial, 41), ValidationError);
  }

  for (auto o : {StackOrientation::sagittal, StackOrientation::coronal, StackOrientation::axial}) {
    const Vec3 center(5, -3, 12);
    const SlicePlan plan = make_slice_plan(o, 25, center);
    const Vec3 n = orientation_normal(o);
    REQUIRE(plan.num_slices() == 25);
    Vec3 sum = Vec3::Zero();
    for (int k = 0; k < 25; ++k) {
      const Mat3 r = plan.targets[static_cast<size_t>(k)].rotation.matrix();
      REQUIRE(std::abs(r.determinant() - 1.0) < 1e-12);
      REQUIRE((r.col(2) - n).norm() < 1e-12);  // shared normal
      if (k > 0) {
        const Vec3 step = plan.targets[static_cast<size_t>(k)].translation_mm -
                          plan.targets[static_cast<size_t>(k - 1)].translation_mm;
        REQUIRE((step - plan.thickness_mm * n).norm() < 1e-12);
      }
      sum += plan.targets[static_cast<size_t>(k)].translation_mm;
    }
    REQUIRE((sum / 25.0 - center).norm() < 1e-12);  // symmetric about the center
  }
}

TEST_CASE("trajectory synthesis") {
  SECTION("zero magnitude gives a constant trajectory") {
    MotionProfile p;
    p.rot_deg_per_step = 0.0;
    p.trans_mm_per_step = 0.0;
    const MotionTrajectory t = synth_trajectory(1, p, 30);
    REQUIRE(t.poses.size() == 30);
    for (const auto& pose : t.poses) {
      REQUIRE((pose.rotation.matrix() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
      REQUIRE(pose.translation_mm.norm() < 1e-12);
    }
  }

  SECTION("fixed seed reproduces the sequence") {
    const MotionTrajectory a = synth_trajectory(7, MotionProfile{}, 40);
    const MotionTrajectory b = synth_trajectory(7, MotionProfile{}, 40);
    for (size_t k = 0; k < a.poses.size(); ++k) {
      REQUIRE(a.poses[k].rotation.matrix() == b.poses[k].rotation.matrix());
      REQUIRE(a.poses[k].translation_mm == b.poses[k].translation_mm);
    }
  }

  SECTION("per-step motion stays within the profile magnitudes") {
    MotionProfile p;
    p.rot_deg_per_step = 8.0;
    p.trans_mm_per_step = 4.0;
    for (uint64_t seed : {1, 2, 3}) {
      const MotionTrajectory t = synth_trajectory(seed, p, 50);
      for (size_t k = 1; k < t.poses.size(); ++k) {
        const double dr = geodesic_distance(t.poses[k].rotation, t.poses[k - 1].rotation);
        REQUIRE(dr <= 8.0 * std::numbers::pi / 180.0 + 1e-9);
        REQUIRE((t.poses[k].translation_mm - t.poses[k - 1].translation_mm).norm() <= 4.0 + 1e-9);
      }
    }
  }

  SECTION("magnitudes outside the supported ranges are rejected") {
    MotionProfile p;
    p.rot_deg_per_step = 16.0;
    REQUIRE_THROWS_AS(synth_trajectory(0, p, 10), ValidationError);
    p.rot_deg_per_step = 5.0;
    p.trans_mm_per_step = 11.0;
    REQUIRE_THROWS_AS(synth_trajectory(0, p, 10), ValidationError);
  }

  SECTION("slerp midpoint of identity and a 90 degree z-rotation is 45 degrees") {
    const Rotation r90 = Rotation::axis_angle(Vec3::UnitZ(), 0.5 * std::numbers::pi);
    const Rotation mid = slerp(Rotation(), r90, 0.5);
    const Rotation r45 = Rotation::axis_angle(Vec3::UnitZ(), 0.25 * std::numbers::pi);
    REQUIRE((mid.matrix() - r45.matrix()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("prescription") {
  const SlicePlan plan = make_slice_plan(StackOrientation::axial, 24);

  SECTION("oracle applies the true pose to every target plane") {
    MotionProfile prof;
    const MotionTrajectory traj = synth_trajectory(3, prof, 24);
    const Prescription presc = prescribe(plan, traj, Estimator::oracle);
    for (int k = 0; k < 24; ++k) {
      const RigidPose expect =
          compose(traj.poses[static_cast<size_t>(k)], plan.targets[static_cast<size_t>(k)]);
      REQUIRE((presc.planes[static_cast<size_t>(k)].rotation.matrix() - expect.rotation.matrix())
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
      REQUIRE((presc.planes[static_cast<size_t>(k)].translation_mm - expect.translation_mm)
                  .norm() < 1e-12);
      REQUIRE(presc.fallback[static_cast<size_t>(k)] == 0);
    }
  }

  SECTION("motion-blind equals oracle on a constant trajectory") {
    RigidPose pose;
    pose.rotation = Rotation::axis_angle(Vec3(1, 1, 0).normalized(), 0.4);
    pose.translation_mm = Vec3(10, 0, -5);
    const MotionTrajectory traj = constant_trajectory(24, pose);
    const Prescription a = prescribe(plan, traj, Estimator::oracle);
    const Prescription b = prescribe(plan, traj, Estimator::motion_blind);
    for (int k = 0; k < 24; ++k) {
      REQUIRE((a.planes[static_cast<size_t>(k)].rotation.matrix() -
               b.planes[static_cast<size_t>(k)].rotation.matrix())
                  .cwiseAbs()
                  .maxCoeff() < 1e-15);
      REQUIRE((a.planes[static_cast<size_t>(k)].translation_mm -
               b.planes[static_cast<size_t>(k)].translation_mm)
                  .norm() < 1e-15);
    }
  }

  SECTION("estimator failures fall back to identity with a flag") {
    const MotionTrajectory traj = constant_trajectory(24);
    const Prescription presc =
        prescribe(plan, traj, Estimator::pose_fn, [](int k, const RigidPose& t) -> RigidPose {
          if (k == 5) throw std::runtime_error("estimator failure");
          return t;
        });
    for (int k = 0; k < 24; ++k) REQUIRE(presc.fallback[static_cast<size_t>(k)] == (k == 5));
    REQUIRE((presc.estimates[5].rotation.matrix() - Mat3::Identity()).cwiseAbs().maxCoeff() <
            1e-15);
  }

  SECTION("trajectory shorter than the plan is rejected") {
    REQUIRE_THROWS_AS(prescribe(plan, constant_trajectory(10), Estimator::oracle),
                      ValidationError);
  }
}

TEST_CASE("motion-blind obliqueness grows linearly under fixed-axis rotation") {
  const OccupancyGrid occ = test_brain();
  const Vec3 center = com_translation(occ);
  const SlicePlan plan = make_slice_plan(StackOrientation::coronal, 23, center);

  // 5 degrees per step about a fixed world axis, no translation.
  const Rotation delta = Rotation::axis_angle(Vec3(0, 1, 2).normalized(),
                                              5.0 * std::numbers::pi / 180.0);
  MotionTrajectory traj;
  RigidPose cur;
  for (int k = 0; k < 23; ++k) {
    traj.poses.push_back(cur);
    cur.rotation = Rotation::from_matrix(Mat3(delta.matrix() * cur.rotation.matrix()));
  }

  const Prescription presc = prescribe(plan, traj, Estimator::motion_blind);
  const CoverageMetrics m = coverage(plan, presc, traj, occ);
  for (int k = 0; k < 23; ++k) {
    const double expect = 5.0 * k * std::numbers::pi / 180.0;
    REQUIRE(m.obliqueness_rad[static_cast<size_t>(k)] == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("oracle prescription covers the brain with exact alignment") {
  const OccupancyGrid occ = test_brain();
  MotionProfile prof;
  prof.rot_deg_per_step = 6.0;
  prof.trans_mm_per_step = 3.0;
  const MotionTrajectory traj = synth_trajectory(11, prof, 30);
  const SlicePlan plan = make_slice_plan(StackOrientation::axial, 30, com_translation(occ));
  const Prescription presc = prescribe(plan, traj, Estimator::oracle);
  const CoverageMetrics m = coverage(plan, presc, traj, occ);
  for (double o : m.obliqueness_rad) REQUIRE(o < 1e-9);
  for (double d : m.offset_mm) REQUIRE(d < 1e-9);
  REQUIRE(m.gap == 0.0);
  REQUIRE(m.irregularity < 0.1);
}

TEST_CASE("removing the middle slice matches the brute-force gap") {
  const OccupancyGrid occ = test_brain();
  const Vec3 center = com_translation(occ);
  SlicePlan plan = make_slice_plan(StackOrientation::axial, 25, center);
  std::vector<RigidPose> pruned = plan.targets;
  pruned.erase(pruned.begin() + 12);

  const CoverageGrid grid = coverage_field(pruned, occ, plan.thickness_mm);
  const double gap = coverage_gap(grid);

  // Independent voxel loop with the same threshold.
  const double sigma = psf_sigma_mm(plan.thickness_mm);
  long brain_count = 0, uncovered = 0;
  for (int z = 0; z < grid.nz; ++z)
    for (int y = 0; y < grid.ny; ++y)
      for (int x = 0; x < grid.nx; ++x) {
        if (!grid.brain[static_cast<size_t>(grid.index(x, y, z))]) continue;
        ++brain_count;
        const Vec3 p = grid.origin_mm + Vec3(x, y, z);
        double sum = 0.0;
        for (const RigidPose& plane : pruned) {
          const double d = plane.rotation.matrix().col(2).dot(p - plane.translation_mm);
          sum += std::exp(-0.5 * d * d / (sigma * sigma));
        }
        if (sum < kCoverageEpsilon) ++uncovered;
      }
  REQUIRE(gap == Catch::Approx(static_cast<double>(uncovered) / brain_count).margin(1e-15));
}

TEST_CASE("coverage response is additive over disjoint slice subsets") {
  const OccupancyGrid occ = test_brain();
  const SlicePlan plan = make_slice_plan(StackOrientation::sagittal, 26, com_translation(occ));
  std::vector<RigidPose> first(plan.targets.begin(), plan.targets.begin() + 13);
  std::vector<RigidPose> second(plan.targets.begin() + 13, plan.targets.end());

  const CoverageGrid all = coverage_field(plan.targets, occ);
  const CoverageGrid a = coverage_field(first, occ);
  const CoverageGrid b = coverage_field(second, occ);
  REQUIRE(all.p_c.size() == a.p_c.size());
  for (size_t i = 0; i < all.p_c.size(); ++i)
    REQUIRE(all.p_c[i] == Catch::Approx(a.p_c[i] + b.p_c[i]).margin(1e-12));
}

TEST_CASE("gap and irregularity on handmade coverage grids") {
  CoverageGrid grid;
  grid.nx = grid.ny = grid.nz = 4;
  grid.p_c.assign(64, 0.25);
  grid.brain.assign(64, 0);
  for (int i = 0; i < 32; ++i) grid.brain[static_cast<size_t>(i)] = 1;

  SECTION("uniform response has zero divergence and zero gap") {
    REQUIRE(coverage_kl(grid) < 1e-12);
    REQUIRE(coverage_gap(grid) == 0.0);
  }

  SECTION("zero response means full gap, and divergence is nonnegative") {
    grid.p_c.assign(64, 0.0);
    REQUIRE(coverage_gap(grid) == 1.0);
    REQUIRE(coverage_kl(grid) < 1e-12);  // floored response is again uniform
    grid.p_c[0] = 1.0;
    REQUIRE(coverage_kl(grid) > 0.0);
  }
}

TEST_CASE("oracle gap never exceeds motion-blind gap") {
  const OccupancyGrid occ = test_brain();
  MotionProfile prof;
  prof.rot_deg_per_step = 7.0;
  prof.trans_mm_per_step = 3.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const MotionTrajectory traj = synth_trajectory(seed, prof, 28);
    const SimRecord adaptive =
        simulate_stack(occ, StackOrientation::axial, 28, traj, Estimator::oracle);
    const SimRecord blind =
        simulate_stack(occ, StackOrientation::axial, 28, traj, Estimator::motion_blind);
    REQUIRE(adaptive.gap <= blind.gap);
    REQUIRE(adaptive.mean_obliqueness_deg < 1e-9);
    REQUIRE(adaptive.mean_offset_mm < 1e-9);
  }
}

TEST_CASE("simulation records serialize one line per stack") {
  SimRecord r;
  r.orientation = StackOrientation::coronal;
  r.seed = 12;
  r.estimator = "oracle";
  r.gap = 0.125;
  const std::string line = format_record(r);
  REQUIRE(line.find("coronal 12 oracle 0.125") == 0);
  REQUIRE(line.find('\n') == std::string::npos);
}
