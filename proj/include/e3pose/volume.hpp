#pragma once

// Synthetic head phantoms with ground-truth frames, the training-time
// augmentation stack (rigid, low resolution, bias field, gamma, noise,
// spin-history shading), and a small binary volume file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <string>
#include <vector>

#include "e3pose/common.hpp"
#include "e3pose/field.hpp"
#include "e3pose/pose.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

struct PhantomConfig {
  int n = 32;                       // cubic grid, at most 64
  double voxel_mm = 3.0;            // 2..6 mm
  double asymmetry_strength = 0.3;  // left-right asymmetry in [0,1]
};

struct Phantom {
  IrrepField volume;  // scalar intensities, zero background
  OccupancyGrid occupancy;
  Vec3 eye_left_mm = Vec3::Zero();
  Vec3 eye_right_mm = Vec3::Zero();
  RigidPose gt_pose;
  double asymmetry_strength = 0.0;
};

// Object frame from landmarks: x is the left-to-right eye direction, y is
// the CoM-to-eye-midpoint direction (projected off x) tilted by 25 degrees
// about x, z completes the right-handed basis.
inline Rotation frame_from_landmarks(const Vec3& brain_com, const Vec3& eye_left,
                                     const Vec3& eye_right) {
  Vec3 ex = eye_right - eye_left;
  if (ex.norm() < 1e-9) throw ValidationError("frame_from_landmarks: coincident eyes");
  ex.normalize();
  Vec3 u = 0.5 * (eye_left + eye_right) - brain_com;
  u -= u.dot(ex) * ex;
  if (u.norm() < 1e-9) throw ValidationError("frame_from_landmarks: eyes through the CoM");
  u.normalize();
  const double tilt = 25.0 * std::numbers::pi / 180.0;
  const Vec3 ey = Rotation::axis_angle(ex, tilt) * u;
  Mat3 m;
  m.col(0) = ex;
  m.col(1) = ey;
  m.col(2) = ex.cross(ey);
  return Rotation::from_matrix(m);
}

// Deterministic phantom: an ellipsoidal "brain" whose internal structures
// break front-back and top-bottom symmetry strongly; left-right symmetry is
// broken only by an extra blob scaled by asymmetry_strength. At strength 0
// every term is even in the signed x offset, so mirroring the grid about the
// x center plane reproduces the volume bitwise. Eyes sit in front of the
// brain and define the ground-truth frame together with the CoM.
inline Phantom generate_phantom(uint64_t seed, const PhantomConfig& cfg) {
  if (cfg.n < 8 || cfg.n > 64) throw ValidationError("generate_phantom: grid must be 8..64");
  if (cfg.voxel_mm < 2.0 || cfg.voxel_mm > 6.0)
    throw ValidationError("generate_phantom: voxel size must be 2..6 mm");
  if (cfg.asymmetry_strength < 0.0 || cfg.asymmetry_strength > 1.0)
    throw ValidationError("generate_phantom: asymmetry_strength must be in [0,1]");

  Rng rng(seed);
  auto jitter = [&](double lo, double hi) { return uniform_in(rng, lo, hi); };

  const int n = cfg.n;
  const double c = (n - 1) / 2.0;           // grid center, voxels
  const double half_mm = 0.5 * n * cfg.voxel_mm;

  // Brain semiaxes and structure placement, lightly jittered per seed. All
  // lengths in mm relative to the grid center.
  const double ax = half_mm * jitter(0.50, 0.58);
  const double ay = half_mm * jitter(0.62, 0.70);
  const double az = half_mm * jitter(0.55, 0.62);
  const double amp_front = jitter(0.40, 0.55);   // breaks posterior/anterior
  const double amp_top = jitter(0.30, 0.45);     // breaks inferior/superior
  const double amp_core = jitter(0.20, 0.30);    // central dark core
  const double amp_side = 0.35;                  // left-right, scaled below
  const double sig_struct = half_mm * jitter(0.16, 0.20);
  const double eye_amp = jitter(0.7, 0.9);
  const double eye_sig = half_mm * jitter(0.07, 0.09);

  const Vec3 p_front(0.0, 0.45 * ay, 0.0);
  const Vec3 p_top(0.0, 0.05 * ay, 0.50 * az);
  const Vec3 p_side(0.40 * ax, 0.10 * ay, 0.0);
  const Vec3 eye_r_mm(0.42 * ax, 1.05 * ay, 0.10 * az);
  const Vec3 eye_l_mm(-eye_r_mm.x(), eye_r_mm.y(), eye_r_mm.z());

  RepSpec scalar;
  scalar.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  Phantom out;
  out.asymmetry_strength = cfg.asymmetry_strength;
  out.volume = IrrepField(n, n, n, scalar, cfg.voxel_mm);
  out.occupancy.nx = out.occupancy.ny = out.occupancy.nz = n;
  out.occupancy.voxel_mm = cfg.voxel_mm;
  out.occupancy.world = Eigen::Matrix4d::Identity() * cfg.voxel_mm;
  out.occupancy.world(3, 3) = 1.0;
  out.occupancy.mask.assign(static_cast<size_t>(n) * n * n, 0);

  auto gauss = [](const Vec3& d, double sig) { return std::exp(-d.squaredNorm() / (2 * sig * sig)); };

  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const Vec3 d((x - c) * cfg.voxel_mm, (y - c) * cfg.voxel_mm, (z - c) * cfg.voxel_mm);
        const double q = d.x() * d.x() / (ax * ax) + d.y() * d.y() / (ay * ay) +
                         d.z() * d.z() / (az * az);
        double v = 0.0;
        if (q <= 1.0) {
          v = 1.0 - 0.5 * q;
          v += amp_front * gauss(d - p_front, sig_struct);
          v += amp_top * gauss(d - p_top, sig_struct);
          v -= amp_core * gauss(d, sig_struct);
          v += cfg.asymmetry_strength * amp_side * gauss(d - p_side, sig_struct);
          out.occupancy.mask[static_cast<size_t>(out.occupancy.index(x, y, z))] = 1;
        }
        // Eyes are outside the brain mask; the symmetric pair keeps the
        // intensity field exactly mirror-even at asymmetry 0.
        v += eye_amp * (gauss(d - eye_r_mm, eye_sig) + gauss(d - eye_l_mm, eye_sig));
        out.volume.data(0, out.volume.index(x, y, z)) = std::max(0.0, v);
      }

  const Vec3 center_mm(c * cfg.voxel_mm, c * cfg.voxel_mm, c * cfg.voxel_mm);
  out.eye_left_mm = center_mm + eye_l_mm;
  out.eye_right_mm = center_mm + eye_r_mm;
  const Vec3 com = com_translation(out.occupancy);
  out.gt_pose.rotation = frame_from_landmarks(com, out.eye_left_mm, out.eye_right_mm);
  out.gt_pose.translation_mm = com;
  return out;
}

// Spin-history shading: a multiplicative dark plane. The Gaussian is
// rescaled so its peak equals `depth`; a literal density in 1/mm would be
// invisibly weak for millimeter sigmas.
struct ArtifactParams {
  Vec3 c_slice_mm = Vec3::Zero();
  Vec3 n_slice = Vec3::UnitZ();
  double sigma_mm = 3.0;
  double depth = 1.0;  // peak attenuation in (0,1]
};

inline IrrepField spin_history(const IrrepField& f, const ArtifactParams& p) {
  if (p.sigma_mm <= 0.0) throw ValidationError("spin_history: sigma must be positive");
  if (std::abs(p.n_slice.norm() - 1.0) > 1e-6)
    throw ValidationError("spin_history: slice normal must be unit");
  if (p.depth <= 0.0 || p.depth > 1.0) throw ValidationError("spin_history: depth must be in (0,1]");
  IrrepField out = f;
  for (int z = 0; z < f.nz; ++z)
    for (int y = 0; y < f.ny; ++y)
      for (int x = 0; x < f.nx; ++x) {
        const Vec3 pos(x * f.voxel_mm, y * f.voxel_mm, z * f.voxel_mm);
        const double t = (pos - p.c_slice_mm).dot(p.n_slice);
        const double g = p.depth * std::exp(-t * t / (2 * p.sigma_mm * p.sigma_mm));
        out.data.col(out.index(x, y, z)) *= (1.0 - g);
      }
  return out;
}

enum class AugmentProfile { segmenter, regressor };

struct AugmentOptions {
  bool rigid = true;
  bool low_res = true;
  bool bias = true;
  bool gamma = true;
  bool noise = true;  // segmenter profile only; the regressor stack has none
  bool spin = true;
};

struct AugmentRecord {
  Rotation rotation;
  Vec3 translation_mm = Vec3::Zero();
  double scale = 1.0;
  double low_res_voxel_mm = 0.0;  // 0 when the low-resolution stage was skipped
  std::vector<double> bias_coeffs;
  double gamma = 1.0;
  double noise_sigma = 0.0;
  ArtifactParams artifact;
  bool spin_applied = false;
};

struct AugmentResult {
  IrrepField volume;
  RigidPose gt_pose;
  AugmentRecord record;
};

namespace detail {

inline double normal_sample(Rng& rng) {
  const double u1 = uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1 + 1e-300)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Trilinear lookup with zero padding, in voxel coordinates.
inline double sample_trilinear(const IrrepField& f, double x, double y, double z) {
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
            z0 = static_cast<int>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        if (!f.in_range(xi, yi, zi)) continue;
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        acc += w * f.data(0, f.index(xi, yi, zi));
      }
  return acc;
}

// Resample a scalar field under x -> scale*R*(x - center) + t + center,
// implemented by pulling back through the inverse map.
inline IrrepField apply_rigid_scalar(const IrrepField& f, const Rotation& r, const Vec3& t_mm,
                                     double scale) {
  IrrepField out(f.nx, f.ny, f.nz, f.rep, f.voxel_mm);
  const Vec3 c((f.nx - 1) / 2.0, (f.ny - 1) / 2.0, (f.nz - 1) / 2.0);
  const Mat3 inv = r.matrix().transpose() / scale;
  for (int z = 0; z < f.nz; ++z)
    for (int y = 0; y < f.ny; ++y)
      for (int x = 0; x < f.nx; ++x) {
        const Vec3 p = inv * ((Vec3(x, y, z) - c) * f.voxel_mm - t_mm) / f.voxel_mm + c;
        out.data(0, out.index(x, y, z)) = sample_trilinear(f, p.x(), p.y(), p.z());
      }
  return out;
}

// Simulated low resolution: average down to the coarse voxel size, then
// trilinearly upsample back to the original grid.
inline IrrepField simulate_low_res(const IrrepField& f, double coarse_mm) {
  const double factor = coarse_mm / f.voxel_mm;
  if (factor <= 1.0) return f;
  const int cn = std::max(2, static_cast<int>(std::ceil(f.nx / factor)));
  IrrepField coarse(cn, cn, cn, f.rep, coarse_mm);
  for (int z = 0; z < cn; ++z)
    for (int y = 0; y < cn; ++y)
      for (int x = 0; x < cn; ++x)
        coarse.data(0, coarse.index(x, y, z)) =
            sample_trilinear(f, x * factor, y * factor, z * factor);
  IrrepField out(f.nx, f.ny, f.nz, f.rep, f.voxel_mm);
  for (int z = 0; z < f.nz; ++z)
    for (int y = 0; y < f.ny; ++y)
      for (int x = 0; x < f.nx; ++x)
        out.data(0, out.index(x, y, z)) =
            sample_trilinear(coarse, x / factor, y / factor, z / factor);
  return out;
}

// Multiplicative bias field exp(sum c_ijk u^i v^j w^k), i+j+k in 1..3, on
// coordinates normalized to [-1,1].
inline void apply_bias(IrrepField& f, const std::vector<double>& coeffs) {
  size_t ci = 0;
  for (int z = 0; z < f.nz; ++z)
    for (int y = 0; y < f.ny; ++y)
      for (int x = 0; x < f.nx; ++x) {
        const double u = 2.0 * x / (f.nx - 1) - 1.0, v = 2.0 * y / (f.ny - 1) - 1.0,
                     w = 2.0 * z / (f.nz - 1) - 1.0;
        double e = 0.0;
        ci = 0;
        for (int i = 0; i <= 3; ++i)
          for (int j = 0; i + j <= 3; ++j)
            for (int k = 0; i + j + k <= 3; ++k) {
              if (i + j + k == 0) continue;
              e += coeffs[ci++] * std::pow(u, i) * std::pow(v, j) * std::pow(w, k);
            }
        f.data(0, f.index(x, y, z)) *= std::exp(e);
      }
}

constexpr int kNumBiasCoeffs = 19;  // monomials of total order 1..3

// Voxel steps to the nearest non-occupied 6-neighbor region (boundary
// voxels get 1), by breadth-first search from the boundary inward.
inline std::vector<int> boundary_steps(const OccupancyGrid& occ) {
  std::vector<int> dist(occ.mask.size(), -1);
  std::deque<int> queue;
  auto idx = [&](int x, int y, int z) { return occ.index(x, y, z); };
  for (int z = 0; z < occ.nz; ++z)
    for (int y = 0; y < occ.ny; ++y)
      for (int x = 0; x < occ.nx; ++x) {
        if (!occ.at(x, y, z)) continue;
        const bool edge = x == 0 || x == occ.nx - 1 || y == 0 || y == occ.ny - 1 || z == 0 ||
                          z == occ.nz - 1 || !occ.at(x - 1, y, z) || !occ.at(x + 1, y, z) ||
                          !occ.at(x, y - 1, z) || !occ.at(x, y + 1, z) || !occ.at(x, y, z - 1) ||
                          !occ.at(x, y, z + 1);
        if (edge) {
          dist[static_cast<size_t>(idx(x, y, z))] = 1;
          queue.push_back(idx(x, y, z));
        }
      }
  const int steps[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!queue.empty()) {
    const int cur = queue.front();
    queue.pop_front();
    const int z = cur / (occ.nx * occ.ny), y = (cur / occ.nx) % occ.ny, x = cur % occ.nx;
    for (const auto& s : steps) {
      const int xx = x + s[0], yy = y + s[1], zz = z + s[2];
      if (xx < 0 || yy < 0 || zz < 0 || xx >= occ.nx || yy >= occ.ny || zz >= occ.nz) continue;
      const size_t ni = static_cast<size_t>(idx(xx, yy, zz));
      if (!occ.at(xx, yy, zz) || dist[ni] >= 0) continue;
      dist[ni] = dist[static_cast<size_t>(cur)] + 1;
      queue.push_back(idx(xx, yy, zz));
    }
  }
  return dist;
}

}  // namespace detail

// Artifact-plane center sampling. The regressor profile draws uniformly
// over occupied voxels; the segmenter profile weights voxels inversely by
// their distance to the brain boundary (0.5 voxel floor).
inline Vec3 sample_slice_center(const OccupancyGrid& occ, AugmentProfile profile, Rng& rng) {
  std::vector<int> occupied;
  for (size_t i = 0; i < occ.mask.size(); ++i)
    if (occ.mask[i]) occupied.push_back(static_cast<int>(i));
  if (occupied.empty()) throw EmptyOccupancy("sample_slice_center: empty occupancy");

  size_t pick = 0;
  if (profile == AugmentProfile::regressor) {
    pick = static_cast<size_t>(rng() % occupied.size());
  } else {
    const std::vector<int> dist = detail::boundary_steps(occ);
    double total = 0.0;
    std::vector<double> w(occupied.size());
    for (size_t i = 0; i < occupied.size(); ++i) {
      w[i] = 1.0 / (dist[static_cast<size_t>(occupied[i])] - 1 + 0.5);
      total += w[i];
    }
    double u = uniform01(rng) * total;
    for (; pick + 1 < occupied.size(); ++pick) {
      u -= w[pick];
      if (u <= 0.0) break;
    }
  }
  const int i = occupied[pick];
  const int z = i / (occ.nx * occ.ny), y = (i / occ.nx) % occ.ny, x = i % occ.nx;
  return occ.voxel_to_world(Vec3(x, y, z));
}

// The augmentation stack in fixed order: rigid -> low resolution -> bias ->
// gamma -> noise -> spin history. Every sampled parameter is recorded so the
// ground-truth pose stays consistent with the augmented volume.
inline AugmentResult augment(const Phantom& ph, uint64_t seed, AugmentProfile profile,
                             const AugmentOptions& opt = {}) {
  Rng rng(seed);
  AugmentResult res;
  res.volume = ph.volume;
  res.gt_pose = ph.gt_pose;

  const int n = ph.volume.nx;
  const double vox = ph.volume.voxel_mm;
  const Vec3 center_mm((n - 1) / 2.0 * vox, (n - 1) / 2.0 * vox, (n - 1) / 2.0 * vox);

  if (opt.rigid) {
    const Rotation r = sample_rotation(rng);
    Vec3 t = Vec3::Zero();
    double scale = 1.0;
    if (profile == AugmentProfile::segmenter) {
      for (int i = 0; i < 3; ++i) t[i] = uniform_in(rng, -30.0, 30.0);
      scale = uniform_in(rng, 0.5, 1.3);
    }
    res.volume = detail::apply_rigid_scalar(res.volume, r, t, scale);
    res.record.rotation = r;
    res.record.translation_mm = t;
    res.record.scale = scale;
    res.gt_pose.rotation = Rotation::from_matrix(Mat3(r.matrix() * ph.gt_pose.rotation.matrix()));
    res.gt_pose.translation_mm =
        scale * (r * (ph.gt_pose.translation_mm - center_mm)) + center_mm + t;
  }

  if (opt.low_res) {
    const double p_apply = profile == AugmentProfile::regressor ? 0.9 : 0.75;
    const double lo = 3.0, hi = profile == AugmentProfile::regressor ? 7.5 : 8.0;
    if (uniform01(rng) < p_apply) {
      res.record.low_res_voxel_mm = uniform_in(rng, lo, hi);
      res.volume = detail::simulate_low_res(res.volume, res.record.low_res_voxel_mm);
    }
  }

  if (opt.bias) {
    res.record.bias_coeffs.resize(detail::kNumBiasCoeffs);
    for (double& cf : res.record.bias_coeffs) cf = uniform_in(rng, 0.0, 0.5);
    detail::apply_bias(res.volume, res.record.bias_coeffs);
  }

  if (opt.gamma) {
    const double lo = profile == AugmentProfile::regressor ? -2.0 : -0.8;
    const double hi = profile == AugmentProfile::regressor ? 0.1 : 0.0;
    res.record.gamma = std::exp(uniform_in(rng, lo, hi));
    // x -> x^gamma on intensities in [0,1]; rescale first only when values
    // exceed that range.
    const double peak = res.volume.data.maxCoeff();
    if (peak > 1.0) res.volume.data /= peak;
    res.volume.data = res.volume.data.array().max(0.0).pow(res.record.gamma);
  }

  if (opt.noise && profile == AugmentProfile::segmenter) {
    res.record.noise_sigma = uniform_in(rng, 0.0, 0.03);
    for (int i = 0; i < res.volume.data.cols(); ++i)
      res.volume.data(0, i) = std::max(
          0.0, res.volume.data(0, i) + res.record.noise_sigma * detail::normal_sample(rng));
  }

  if (opt.spin) {
    ArtifactParams ap;
    ap.n_slice = sample_unit_vector(rng);
    ap.sigma_mm = profile == AugmentProfile::regressor ? uniform_in(rng, 2.3, 4.6)
                                                       : uniform_in(rng, 1.5, 2.3);
    ap.c_slice_mm = sample_slice_center(ph.occupancy, profile, rng);
    res.record.artifact = ap;
    res.record.spin_applied = true;
    res.volume = spin_history(res.volume, ap);
  }
  return res;
}

// Volume file format: magic, dims, voxel size, world affine, dtype tag,
// little-endian float64 samples.
namespace detail {
constexpr char kVolumeMagic[8] = {'E', '3', 'P', 'V', 'O', 'L', '0', '1'};
}

struct VolumeFile {
  IrrepField field;  // scalar
  Eigen::Matrix4d world = Eigen::Matrix4d::Identity();
};

inline void write_volume(std::ostream& out, const IrrepField& f, const Eigen::Matrix4d& world) {
  if (f.rep.dimension() != 1)
    throw ValidationError("write_volume: only scalar volumes are supported");
  out.write(detail::kVolumeMagic, 8);
  const int32_t dims[3] = {f.nx, f.ny, f.nz};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(&f.voxel_mm), sizeof(double));
  double affine[16];
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) affine[4 * r + c] = world(r, c);
  out.write(reinterpret_cast<const char*>(affine), sizeof(affine));
  const uint8_t dtype = 0;  // float64
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  out.write(reinterpret_cast<const char*>(f.data.data()),
            static_cast<std::streamsize>(sizeof(double) * f.data.size()));
  if (!out) throw FormatError("write_volume: short write");
}

inline void write_volume(const std::string& path, const IrrepField& f,
                         const Eigen::Matrix4d& world) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_volume: cannot open " + path);
  write_volume(out, f, world);
}

inline VolumeFile read_volume(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kVolumeMagic, 8) != 0)
    throw FormatError("read_volume: bad magic at offset 0");
  int32_t dims[3];
  double voxel, affine[16];
  uint8_t dtype;
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  in.read(reinterpret_cast<char*>(&voxel), sizeof(double));
  in.read(reinterpret_cast<char*>(affine), sizeof(affine));
  in.read(reinterpret_cast<char*>(&dtype), 1);
  if (!in) throw FormatError("read_volume: truncated header");
  if (dtype != 0) throw FormatError("read_volume: unsupported dtype tag");
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw FormatError("read_volume: non-positive dimensions");
  VolumeFile vf;
  RepSpec scalar;
  scalar.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  vf.field = IrrepField(dims[0], dims[1], dims[2], scalar, voxel);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) vf.world(r, c) = affine[4 * r + c];
  const std::streamsize want = static_cast<std::streamsize>(sizeof(double) * vf.field.data.size());
  in.read(reinterpret_cast<char*>(vf.field.data.data()), want);
  if (in.gcount() != want)
    throw FormatError("read_volume: truncated data, missing " +
                      std::to_string(want - in.gcount()) + " bytes");
  return vf;
}

inline VolumeFile read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_volume: cannot open " + path);
  return read_volume(in);
}

}  // namespace e3pose
