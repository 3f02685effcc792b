#pragma once

// Steerable convolution kernel bases: compactly supported radial profiles
// times intertwined spherical harmonics. Basis tensors are precomputed once
// per (source label, target label, support, level) and cached by the network;
// the learnable degrees of freedom are the coefficients w_{jm} only.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <vector>

#include "e3pose/common.hpp"
#include "e3pose/intertwiner.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

// Five bumps centered at m in {0, r/4, r/2, 3r/4, r}, r = 2^(k-2) voxels.
// sus(t) = exp(-1/t) for t > 0, else 0; the quoted scale constant is kept
// as-is (its normalization role upstream is not documented).
struct RadialBasis {
  static constexpr int kNumOffsets = 5;
  static constexpr double kScale = 8.433573;

  int level = 2;
  double r_max = 1.0;

  explicit RadialBasis(int level_k = 2) : level(level_k), r_max(std::pow(2.0, level_k - 2)) {}

  static double sus(double t) { return t > 0.0 ? std::exp(-1.0 / t) : 0.0; }

  double offset(int i) const { return r_max * i / 4.0; }

  // phi_i(r), i = 0..4: bump centered at offset(i) with half-width r_max/4.
  Eigen::Matrix<double, 5, 1> eval(double r) const {
    if (r < 0.0) throw ValidationError("RadialBasis: negative radius");
    Eigen::Matrix<double, 5, 1> out;
    const double x = 4.0 * r / r_max;
    for (int i = 0; i < kNumOffsets; ++i)
      out[i] = kScale * sus(x - (i - 1)) * sus((i + 1) - x);
    return out;
  }
};

// One (j, m) steerable basis tensor sampled on the S^3 voxel support.
struct BasisTensor {
  int j = 0;
  int m_index = 0;                 // radial offset index, 0..4
  std::vector<MatX> values;        // S^3 entries, each (2l_h+1) x (2l_f+1)
};

struct KernelBasis {
  IrrepLabel source;  // (l_f, p_f)
  IrrepLabel target;  // (l_h, p_h)
  int support = 5;    // S, odd
  int level = 2;
  std::vector<int> selection;       // J
  std::vector<BasisTensor> tensors; // |J| * 5 entries, (j outer, m inner)
  bool empty_selection = false;     // legal zero map, flagged

  int num_coefficients() const { return static_cast<int>(tensors.size()); }

  static int voxel_index(int s, int dx, int dy, int dz) {
    const int h = s / 2;
    return ((dz + h) * s + (dy + h)) * s + (dx + h);
  }
};

inline KernelBasis build_kernel_basis(const IrrepLabel& source, const IrrepLabel& target,
                                      int support, int level) {
  if (support % 2 == 0) throw ValidationError("build_kernel_basis: support must be odd");
  KernelBasis basis;
  basis.source = source;
  basis.target = target;
  basis.support = support;
  basis.level = level;
  basis.selection = selection_set(source, target);
  if (basis.selection.empty()) {
    basis.empty_selection = true;
    return basis;
  }

  const RadialBasis radial(level);
  const int s = support, h = support / 2;
  const int dh = target.dimension(), df = source.dimension();

  for (int j : basis.selection) {
    const Intertwiner q = solve_intertwiner(source, target, j);
    // Per-voxel angular part Q_j Y_j(x/|x|); at the origin the direction is
    // undefined, so only j = 0 contributes there.
    std::vector<VecX> angular(static_cast<size_t>(s) * s * s);
    std::vector<double> radii(angular.size());
    for (int dz = -h; dz <= h; ++dz)
      for (int dy = -h; dy <= h; ++dy)
        for (int dx = -h; dx <= h; ++dx) {
          const int idx = KernelBasis::voxel_index(s, dx, dy, dz);
          const Vec3 x(dx, dy, dz);
          radii[idx] = x.norm();
          if (radii[idx] == 0.0) {
            angular[idx] = (j == 0) ? VecX(q.matrix * real_spherical_harmonics(0, Vec3(0, 0, 1)))
                                    : VecX(VecX::Zero(df * dh));
          } else {
            angular[idx] = q.matrix * real_spherical_harmonics(j, x / radii[idx]);
          }
        }
    for (int mi = 0; mi < RadialBasis::kNumOffsets; ++mi) {
      BasisTensor t;
      t.j = j;
      t.m_index = mi;
      t.values.resize(angular.size());
      for (size_t idx = 0; idx < angular.size(); ++idx) {
        const double phi = radial.eval(radii[idx])[mi];
        t.values[idx] = Eigen::Map<const MatX>(angular[idx].data(), dh, df) * phi;
      }
      basis.tensors.push_back(std::move(t));
    }
  }
  return basis;
}

// Linear combination of the basis tensors; returns S^3 kernel matrices.
inline std::vector<MatX> assemble_kernel(const KernelBasis& basis, const VecX& w) {
  if (w.size() != basis.num_coefficients())
    throw ValidationError("assemble_kernel: coefficient count mismatch");
  const int s = basis.support;
  std::vector<MatX> kernel(static_cast<size_t>(s) * s * s,
                           MatX::Zero(basis.target.dimension(), basis.source.dimension()));
  for (int c = 0; c < w.size(); ++c) {
    if (w[c] == 0.0) continue;
    const auto& t = basis.tensors[static_cast<size_t>(c)];
    for (size_t idx = 0; idx < kernel.size(); ++idx) kernel[idx] += w[c] * t.values[idx];
  }
  return kernel;
}

// Shared cache: bases depend only on (labels, support, level).
class KernelBasisCache {
 public:
  const KernelBasis& get(const IrrepLabel& source, const IrrepLabel& target, int support,
                         int level) {
    const Key key{source.order, source.parity == Parity::odd, target.order,
                  target.parity == Parity::odd, support, level};
    auto it = cache_.find(key);
    if (it == cache_.end())
      it = cache_.emplace(key, build_kernel_basis(source, target, support, level)).first;
    return it->second;
  }

 private:
  using Key = std::tuple<int, bool, int, bool, int, int>;
  std::map<Key, KernelBasis> cache_;
};

// Basis dump format: magic, uint32 version, labels, geometry, selection set,
// then per-tensor (j, m index, matrix sizes, little-endian float64 entries).
// Exists so an independent implementation can be compared tensor for tensor.
namespace detail {
constexpr char kBasisMagic[8] = {'E', '3', 'P', 'B', 'A', 'S', '0', '1'};
constexpr uint32_t kBasisVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("basis dump: truncated");
  return v;
}
}  // namespace detail

inline void write_kernel_basis(std::ostream& out, const KernelBasis& b) {
  out.write(detail::kBasisMagic, 8);
  detail::write_pod(out, detail::kBasisVersion);
  detail::write_pod(out, static_cast<int32_t>(b.source.order));
  detail::write_pod(out, static_cast<uint8_t>(b.source.parity == Parity::odd));
  detail::write_pod(out, static_cast<int32_t>(b.target.order));
  detail::write_pod(out, static_cast<uint8_t>(b.target.parity == Parity::odd));
  detail::write_pod(out, static_cast<int32_t>(b.support));
  detail::write_pod(out, static_cast<int32_t>(b.level));
  detail::write_pod(out, static_cast<uint32_t>(b.selection.size()));
  for (int j : b.selection) detail::write_pod(out, static_cast<int32_t>(j));
  detail::write_pod(out, static_cast<uint8_t>(b.empty_selection));
  detail::write_pod(out, static_cast<uint32_t>(b.tensors.size()));
  for (const BasisTensor& t : b.tensors) {
    detail::write_pod(out, static_cast<int32_t>(t.j));
    detail::write_pod(out, static_cast<int32_t>(t.m_index));
    detail::write_pod(out, static_cast<uint32_t>(t.values.size()));
    detail::write_pod(out, static_cast<uint32_t>(t.values.empty() ? 0 : t.values[0].rows()));
    detail::write_pod(out, static_cast<uint32_t>(t.values.empty() ? 0 : t.values[0].cols()));
    for (const MatX& m : t.values)
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!out) throw FormatError("basis dump: short write");
}

inline KernelBasis read_kernel_basis(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kBasisMagic, 8) != 0)
    throw FormatError("basis dump: bad magic");
  if (detail::read_pod<uint32_t>(in) != detail::kBasisVersion)
    throw FormatError("basis dump: unsupported version");
  KernelBasis b;
  b.source.order = detail::read_pod<int32_t>(in);
  b.source.parity = detail::read_pod<uint8_t>(in) ? Parity::odd : Parity::even;
  b.target.order = detail::read_pod<int32_t>(in);
  b.target.parity = detail::read_pod<uint8_t>(in) ? Parity::odd : Parity::even;
  b.support = detail::read_pod<int32_t>(in);
  b.level = detail::read_pod<int32_t>(in);
  const uint32_t num_j = detail::read_pod<uint32_t>(in);
  for (uint32_t i = 0; i < num_j; ++i) b.selection.push_back(detail::read_pod<int32_t>(in));
  b.empty_selection = detail::read_pod<uint8_t>(in) != 0;
  const uint32_t num_tensors = detail::read_pod<uint32_t>(in);
  for (uint32_t i = 0; i < num_tensors; ++i) {
    BasisTensor t;
    t.j = detail::read_pod<int32_t>(in);
    t.m_index = detail::read_pod<int32_t>(in);
    const uint32_t num_values = detail::read_pod<uint32_t>(in);
    const uint32_t rows = detail::read_pod<uint32_t>(in);
    const uint32_t cols = detail::read_pod<uint32_t>(in);
    for (uint32_t v = 0; v < num_values; ++v) {
      MatX m(rows, cols);
      in.read(reinterpret_cast<char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
      if (!in) throw FormatError("basis dump: truncated tensor data");
      t.values.push_back(std::move(m));
    }
    b.tensors.push_back(std::move(t));
  }
  return b;
}

}  // namespace e3pose
