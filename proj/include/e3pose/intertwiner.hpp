#pragma once

// Numerically solved intertwiners Q_j: the change of basis mapping the
// degree-j harmonic space into the tensor product of a source and target
// irrep. Solved as the joint null space of sampled commutation constraints
// rather than from Clebsch-Gordan tables.

#include <vector>

#include <Eigen/Dense>

#include "e3pose/common.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

struct Intertwiner {
  IrrepLabel source_f;
  IrrepLabel source_h;
  int target_j = 0;
  // (2l_h+1)(2l_f+1) x (2j+1), orthonormal columns. Column-major vec
  // convention: vec(K)[col * (2l_h+1) + row] for K in R^{(2l_h+1)x(2l_f+1)}.
  MatX matrix;
};

// Selection set: |l_f - l_h| <= j <= l_f + l_h, j even iff parities match.
inline std::vector<int> selection_set(const IrrepLabel& f, const IrrepLabel& h) {
  std::vector<int> out;
  const int lo = std::abs(f.order - h.order), hi = f.order + h.order;
  const int want = (f.parity == h.parity) ? 0 : 1;  // required j mod 2
  for (int j = lo; j <= hi; ++j)
    if (j % 2 == want) out.push_back(j);
  return out;
}

namespace detail {

inline MatX kron(const MatX& a, const MatX& b) {
  MatX out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace detail

// Solve (rho_f(g) (x) rho_h(g)) Q = Q D_j(g) over sampled rotations plus
// inversion; D_j carries the natural parity of degree-j harmonics.
inline Intertwiner solve_intertwiner(const IrrepLabel& f, const IrrepLabel& h, int j,
                                     int n_samples = 20) {
  const auto sel = selection_set(f, h);
  if (std::find(sel.begin(), sel.end(), j) == sel.end())
    throw EmptySelectionRule("solve_intertwiner: j outside the selection set");

  const int df = f.dimension(), dh = h.dimension(), dj = 2 * j + 1;
  const int nq = df * dh * dj;
  const IrrepLabel jl{j, parity_of_int(j)};

  std::vector<OrthogonalTransform> gs;
  Rng rng(0x51e77e);  // fixed internal seed; callers verify on fresh samples
  for (int i = 0; i < n_samples; ++i)
    gs.push_back(OrthogonalTransform::from_rotation(sample_rotation(rng)));
  gs.push_back(OrthogonalTransform::inversion());

  MatX system(static_cast<int>(gs.size()) * df * dh * dj, nq);
  const MatX eye_j = MatX::Identity(dj, dj);
  const MatX eye_fh = MatX::Identity(df * dh, df * dh);
  int row = 0;
  for (const auto& g : gs) {
    const MatX p = detail::kron(irrep_matrix(f, g), irrep_matrix(h, g));
    const MatX dj_g = irrep_matrix(jl, g);
    // vec(P Q) - vec(Q D_j) = (I (x) P - D_j^T (x) I) vec(Q)
    system.middleRows(row, df * dh * dj) =
        detail::kron(eye_j, p) - detail::kron(dj_g.transpose(), eye_fh);
    row += df * dh * dj;
  }

  Eigen::JacobiSVD<MatX> svd(system, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  // Absolute floor matters for the scalar-to-scalar case, where the whole
  // constraint system is identically zero.
  const double thresh = std::max(1e-8 * sv(0), 1e-12);
  int null_dim = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) < thresh) ++null_dim;
  if (null_dim != 1)
    throw SolverDegeneracy("solve_intertwiner: null space dimension " +
                           std::to_string(null_dim) + ", expected 1");

  Intertwiner q;
  q.source_f = f;
  q.source_h = h;
  q.target_j = j;
  q.matrix = Eigen::Map<const MatX>(svd.matrixV().col(nq - 1).data(), df * dh, dj);

  // By Schur's lemma Q^T Q is a multiple of the identity; rescale so the
  // columns are orthonormal.
  const MatX gram = q.matrix.transpose() * q.matrix;
  const double scale = gram.trace() / dj;
  if (scale < 1e-14) throw SolverDegeneracy("solve_intertwiner: vanishing solution");
  q.matrix /= std::sqrt(scale);
  if ((q.matrix.transpose() * q.matrix - eye_j).cwiseAbs().maxCoeff() > 1e-10)
    throw SolverDegeneracy("solve_intertwiner: columns not orthogonal after rescale");
  return q;
}

}  // namespace e3pose
