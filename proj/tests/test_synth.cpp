#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "e3pose/volume.hpp"

using namespace e3pose;

namespace {

OrthogonalTransform mirror_x() {
  Mat3 m = Mat3::Identity();
  m(0, 0) = -1.0;
  return OrthogonalTransform::from_matrix(m);
}

}  // namespace

TEST_CASE("phantom is exactly mirror symmetric at zero asymmetry") {
  PhantomConfig cfg;
  cfg.asymmetry_strength = 0.0;
  const Phantom ph = generate_phantom(7, cfg);
  const IrrepField mirrored = transform_field(ph.volume, mirror_x());
  REQUIRE(mirrored.data == ph.volume.data);

  // A nonzero asymmetry must actually break the symmetry.
  cfg.asymmetry_strength = 0.5;
  const Phantom asym = generate_phantom(7, cfg);
  const IrrepField m2 = transform_field(asym.volume, mirror_x());
  REQUIRE((m2.data - asym.volume.data).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("phantom generation is deterministic by seed") {
  const PhantomConfig cfg;
  const Phantom a = generate_phantom(11, cfg);
  const Phantom b = generate_phantom(11, cfg);
  REQUIRE(a.volume.data == b.volume.data);
  REQUIRE(a.occupancy.mask == b.occupancy.mask);
  REQUIRE(a.eye_left_mm == b.eye_left_mm);

  const Phantom c = generate_phantom(12, cfg);
  REQUIRE(a.volume.data != c.volume.data);
}

TEST_CASE("ground-truth frame follows the eye and CoM geometry") {
  const Phantom ph = generate_phantom(3, PhantomConfig{});
  const Mat3 r = ph.gt_pose.rotation.matrix();

  const Vec3 ex = (ph.eye_right_mm - ph.eye_left_mm).normalized();
  REQUIRE((r.col(0) - ex).norm() < 1e-12);

  const Vec3 com = com_translation(ph.occupancy);
  REQUIRE((ph.gt_pose.translation_mm - com).norm() < 1e-12);

  Vec3 u = 0.5 * (ph.eye_left_mm + ph.eye_right_mm) - com;
  u -= u.dot(ex) * ex;
  u.normalize();
  const double tilt = 25.0 * std::numbers::pi / 180.0;
  const Vec3 ey = Rotation::axis_angle(ex, tilt) * u;
  REQUIRE((r.col(1) - ey).norm() < 1e-12);
  REQUIRE(std::abs(std::acos(std::clamp(r.col(1).dot(u), -1.0, 1.0)) - tilt) < 1e-9);
  REQUIRE((r.col(2) - ex.cross(ey)).norm() < 1e-12);
  REQUIRE(std::abs(r.determinant() - 1.0) < 1e-12);
}

TEST_CASE("phantom config validation") {
  PhantomConfig cfg;
  cfg.n = 4;
  REQUIRE_THROWS_AS(generate_phantom(0, cfg), ValidationError);
  cfg.n = 32;
  cfg.voxel_mm = 1.0;
  REQUIRE_THROWS_AS(generate_phantom(0, cfg), ValidationError);
  cfg.voxel_mm = 3.0;
  cfg.asymmetry_strength = 2.0;
  REQUIRE_THROWS_AS(generate_phantom(0, cfg), ValidationError);
}

TEST_CASE("spin history attenuates on the plane and fades with distance") {
  const Phantom ph = generate_phantom(5, PhantomConfig{});
  ArtifactParams p;
  p.n_slice = Vec3::UnitZ();
  p.sigma_mm = 3.0;
  p.depth = 1.0;
  const int zc = 16;
  p.c_slice_mm = Vec3(0, 0, zc * ph.volume.voxel_mm);

  const IrrepField shaded = spin_history(ph.volume, p);
  for (int y = 0; y < ph.volume.ny; ++y)
    for (int x = 0; x < ph.volume.nx; ++x)
      REQUIRE(shaded.data(0, shaded.index(x, y, zc)) == 0.0);

  // 10 sigma away the multiplier is indistinguishable from 1.
  const int zf = zc + static_cast<int>(std::ceil(10.0 * p.sigma_mm / ph.volume.voxel_mm)) + 1;
  REQUIRE(zf < ph.volume.nz);
  for (int x = 0; x < ph.volume.nx; ++x)
    REQUIRE(std::abs(shaded.data(0, shaded.index(x, 16, zf)) -
                     ph.volume.data(0, ph.volume.index(x, 16, zf))) < 1e-10);

  p.sigma_mm = -1.0;
  REQUIRE_THROWS_AS(spin_history(ph.volume, p), ValidationError);
}

TEST_CASE("spin history commutes with mirroring under mirrored parameters") {
  PhantomConfig cfg;
  cfg.asymmetry_strength = 0.4;
  const Phantom ph = generate_phantom(9, cfg);
  const double vox = ph.volume.voxel_mm;
  const double wx = (ph.volume.nx - 1) * vox;  // world extent along x

  ArtifactParams p;
  p.n_slice = Vec3(0.48, 0.64, 0.6).normalized();
  p.sigma_mm = 4.0;
  p.c_slice_mm = Vec3(40.0, 50.0, 55.0);

  ArtifactParams q = p;
  q.n_slice.x() = -q.n_slice.x();
  q.c_slice_mm.x() = wx - q.c_slice_mm.x();

  const IrrepField a = transform_field(spin_history(ph.volume, p), mirror_x());
  const IrrepField b = spin_history(transform_field(ph.volume, mirror_x()), q);
  REQUIRE((a.data - b.data).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("disabled augmentation is the identity") {
  const Phantom ph = generate_phantom(2, PhantomConfig{});
  AugmentOptions opt;
  opt.rigid = opt.low_res = opt.bias = opt.gamma = opt.noise = opt.spin = false;
  const AugmentResult res = augment(ph, 31, AugmentProfile::regressor, opt);
  REQUIRE(res.volume.data == ph.volume.data);
  REQUIRE((res.gt_pose.rotation.matrix() - ph.gt_pose.rotation.matrix()).norm() == 0.0);
  REQUIRE(res.gt_pose.translation_mm == ph.gt_pose.translation_mm);
}

TEST_CASE("rotation-only augmentation keeps the pose bookkeeping consistent") {
  const Phantom ph = generate_phantom(6, PhantomConfig{});
  AugmentOptions opt;
  opt.low_res = opt.bias = opt.gamma = opt.noise = opt.spin = false;
  const AugmentResult res = augment(ph, 17, AugmentProfile::regressor, opt);

  const Mat3 want = res.record.rotation.matrix() * ph.gt_pose.rotation.matrix();
  REQUIRE((res.gt_pose.rotation.matrix() - want).norm() < 1e-10);

  // The regressor profile draws no translation or scale.
  REQUIRE(res.record.translation_mm == Vec3::Zero());
  REQUIRE(res.record.scale == 1.0);

  const int n = ph.volume.nx;
  const Vec3 c = Vec3::Constant((n - 1) / 2.0 * ph.volume.voxel_mm);
  const Vec3 t_want = res.record.rotation * (ph.gt_pose.translation_mm - c) + c;
  REQUIRE((res.gt_pose.translation_mm - t_want).norm() < 1e-10);
}

TEST_CASE("augmentation samples stay inside the documented ranges") {
  const Phantom ph = generate_phantom(8, PhantomConfig{});
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const AugmentResult r = augment(ph, seed, AugmentProfile::regressor);
    if (r.record.low_res_voxel_mm != 0.0) {
      REQUIRE(r.record.low_res_voxel_mm >= 3.0);
      REQUIRE(r.record.low_res_voxel_mm <= 7.5);
    }
    REQUIRE(std::log(r.record.gamma) >= -2.0);
    REQUIRE(std::log(r.record.gamma) <= 0.1);
    REQUIRE(r.record.noise_sigma == 0.0);
    for (double cfc : r.record.bias_coeffs) {
      REQUIRE(cfc >= 0.0);
      REQUIRE(cfc <= 0.5);
    }
    REQUIRE(r.record.spin_applied);
    REQUIRE(r.record.artifact.sigma_mm >= 2.3);
    REQUIRE(r.record.artifact.sigma_mm <= 4.6);
    REQUIRE(std::abs(r.record.artifact.n_slice.norm() - 1.0) < 1e-9);

    const AugmentResult s = augment(ph, seed, AugmentProfile::segmenter);
    REQUIRE(s.record.scale >= 0.5);
    REQUIRE(s.record.scale <= 1.3);
    REQUIRE(s.record.translation_mm.cwiseAbs().maxCoeff() <= 30.0);
    REQUIRE(std::log(s.record.gamma) >= -0.8);
    REQUIRE(std::log(s.record.gamma) <= 0.0);
    REQUIRE(s.record.noise_sigma <= 0.03);
    REQUIRE(s.record.artifact.sigma_mm >= 1.5);
    REQUIRE(s.record.artifact.sigma_mm <= 2.3);
  }
}

TEST_CASE("gamma stage matches the closed form on a constant volume") {
  RepSpec scalar;
  scalar.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  Phantom ph;
  ph.volume = IrrepField(8, 8, 8, scalar, 3.0);
  ph.volume.data.setConstant(0.25);
  ph.occupancy.nx = ph.occupancy.ny = ph.occupancy.nz = 8;
  ph.occupancy.voxel_mm = 3.0;
  ph.occupancy.mask.assign(512, 1);

  AugmentOptions opt;
  opt.rigid = opt.low_res = opt.bias = opt.noise = opt.spin = false;
  // Scan seeds for one with log(gamma) near -2 and check x -> x^gamma.
  for (uint64_t seed = 0; seed < 200; ++seed) {
    const AugmentResult r = augment(ph, seed, AugmentProfile::regressor, opt);
    const double want = std::pow(0.25, r.record.gamma);
    REQUIRE(std::abs(r.volume.data(0, 0) - want) < 1e-12);
  }
}

TEST_CASE("slice center sampling is uniform over brain voxels for the regressor") {
  PhantomConfig cfg;
  cfg.n = 16;
  const Phantom ph = generate_phantom(4, cfg);
  std::vector<int> occupied;
  for (size_t i = 0; i < ph.occupancy.mask.size(); ++i)
    if (ph.occupancy.mask[i]) occupied.push_back(static_cast<int>(i));
  const size_t k = occupied.size();
  REQUIRE(k > 50);

  std::map<int, long> counts;
  Rng rng(123);
  const long draws = 100000;
  for (long i = 0; i < draws; ++i) {
    const Vec3 c = sample_slice_center(ph.occupancy, AugmentProfile::regressor, rng);
    const Vec3 v = c / ph.occupancy.voxel_mm;
    counts[ph.occupancy.index(static_cast<int>(std::lround(v.x())),
                              static_cast<int>(std::lround(v.y())),
                              static_cast<int>(std::lround(v.z())))]++;
  }
  for (const auto& [idx, cnt] : counts) {
    (void)cnt;
    REQUIRE(ph.occupancy.mask[static_cast<size_t>(idx)] == 1);
  }
  const double expected = static_cast<double>(draws) / static_cast<double>(k);
  double chi2 = 0.0;
  for (int idx : occupied) {
    const double observed = static_cast<double>(counts.count(idx) ? counts[idx] : 0);
    chi2 += (observed - expected) * (observed - expected) / expected;
  }
  // Wilson-Hilferty critical value for p = 0.01 with k-1 degrees of freedom.
  const double dof = static_cast<double>(k - 1);
  const double crit = dof * std::pow(1.0 - 2.0 / (9.0 * dof) + 2.326 * std::sqrt(2.0 / (9.0 * dof)), 3);
  REQUIRE(chi2 < crit);
}

TEST_CASE("segmenter slice centers favor the brain boundary") {
  PhantomConfig cfg;
  cfg.n = 16;
  const Phantom ph = generate_phantom(4, cfg);
  const std::vector<int> dist = detail::boundary_steps(ph.occupancy);
  int max_depth = 0;
  for (size_t i = 0; i < ph.occupancy.mask.size(); ++i)
    if (ph.occupancy.mask[i]) max_depth = std::max(max_depth, dist[i]);
  REQUIRE(max_depth >= 3);

  Rng rng(9);
  long shallow = 0, deep = 0, n_shallow = 0, n_deep = 0;
  for (size_t i = 0; i < ph.occupancy.mask.size(); ++i) {
    if (!ph.occupancy.mask[i]) continue;
    (dist[i] == 1 ? n_shallow : n_deep)++;
  }
  for (int i = 0; i < 20000; ++i) {
    const Vec3 c = sample_slice_center(ph.occupancy, AugmentProfile::segmenter, rng);
    const Vec3 v = c / ph.occupancy.voxel_mm;
    const int idx = ph.occupancy.index(static_cast<int>(std::lround(v.x())),
                                       static_cast<int>(std::lround(v.y())),
                                       static_cast<int>(std::lround(v.z())));
    (dist[static_cast<size_t>(idx)] == 1 ? shallow : deep)++;
  }
  // Per-voxel rate must be higher at the boundary than in the interior.
  const double rate_shallow = static_cast<double>(shallow) / n_shallow;
  const double rate_deep = static_cast<double>(deep) / n_deep;
  REQUIRE(rate_shallow > 1.5 * rate_deep);
}

TEST_CASE("volume file round trip and error reporting") {
  const Phantom ph = generate_phantom(13, PhantomConfig{});
  Eigen::Matrix4d world = Eigen::Matrix4d::Identity() * ph.volume.voxel_mm;
  world(3, 3) = 1.0;
  world(0, 3) = 12.5;

  const std::string path = "/tmp/e3pose_test_volume.bin";
  write_volume(path, ph.volume, world);
  const VolumeFile vf = read_volume(path);
  REQUIRE(vf.field.nx == ph.volume.nx);
  REQUIRE(vf.field.voxel_mm == ph.volume.voxel_mm);
  REQUIRE(vf.field.data == ph.volume.data);
  REQUIRE(vf.world == world);

  // Truncate and expect an error naming the missing byte count.
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
  out.close();
  try {
    read_volume(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    REQUIRE(std::string(e.what()).find("100") != std::string::npos);
  }

  std::ofstream bad(path, std::ios::binary);
  bad.write("NOTAMAGIC", 9);
  bad.close();
  REQUIRE_THROWS_AS(read_volume(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("low resolution stage removes fine detail but keeps gross shape") {
  const Phantom ph = generate_phantom(21, PhantomConfig{});
  const IrrepField low = detail::simulate_low_res(ph.volume, 7.5);
  REQUIRE(low.nx == ph.volume.nx);
  // Gross intensity mass is similar, but the fields differ noticeably.
  const double m0 = ph.volume.data.sum(), m1 = low.data.sum();
  REQUIRE(std::abs(m0 - m1) / m0 < 0.2);
  REQUIRE((low.data - ph.volume.data).norm() / ph.volume.data.norm() > 0.05);
}
