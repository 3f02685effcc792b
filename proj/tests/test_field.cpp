#include <catch2/catch_amalgamated.hpp>

#include "e3pose/field.hpp"

using namespace e3pose;

namespace {

RepSpec scalar_rep() {
  RepSpec r;
  r.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  return r;
}

RepSpec vector_rep() {
  RepSpec r;
  r.blocks.push_back({1, IrrepLabel{1, Parity::odd}});
  return r;
}

IrrepField random_field(int n, const RepSpec& rep, Rng& rng) {
  IrrepField f(n, n, n, rep);
  for (int c = 0; c < f.data.cols(); ++c)
    for (int r = 0; r < f.data.rows(); ++r) f.data(r, c) = uniform_in(rng, -1, 1);
  return f;
}

}  // namespace

TEST_CASE("identity transform is exact") {
  Rng rng(1);
  RepSpec rep;
  rep.blocks.push_back({2, IrrepLabel{0, Parity::even}});
  rep.blocks.push_back({1, IrrepLabel{1, Parity::odd}});
  const IrrepField f = random_field(6, rep, rng);
  const IrrepField g = transform_field(f, OrthogonalTransform());
  REQUIRE(g.data == f.data);
}

TEST_CASE("scalar field rotates by pure voxel permutation") {
  Rng rng(2);
  const IrrepField f = random_field(5, scalar_rep(), rng);
  // 90 degree rotation about z: (x,y,z) -> (-y,x,z).
  Mat3 m;
  m << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const IrrepField out = transform_field(f, OrthogonalTransform::from_matrix(m));
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        // Source voxel: inverse rotation about the center (2,2,2).
        const int sx = (y - 2) + 2, sy = -(x - 2) + 2, sz = z;
        REQUIRE(out.data(0, out.index(x, y, z)) == f.data(0, f.index(sx, sy, sz)));
      }
}

TEST_CASE("constant vector field flips under inversion") {
  IrrepField f(4, 4, 4, vector_rep());
  // Constant e_x in harmonic order (y, z, x).
  f.data.row(2).setConstant(1.0);
  const IrrepField out = transform_field(f, OrthogonalTransform::inversion());
  REQUIRE((out.data.row(2).array() == -1.0).all());
  REQUIRE((out.data.topRows(2).array() == 0.0).all());
}

TEST_CASE("grid-exact transform input validation") {
  Rng rng(3);
  const IrrepField cube = random_field(4, scalar_rep(), rng);
  REQUIRE_THROWS_AS(
      transform_field(cube, OrthogonalTransform::from_rotation(sample_rotation(rng))),
      ValidationError);

  IrrepField slab(4, 4, 6, scalar_rep());
  Mat3 swap_xz;
  swap_xz << 0, 0, 1, 0, -1, 0, 1, 0, 0;
  REQUIRE_THROWS_AS(transform_field(slab, OrthogonalTransform::from_matrix(swap_xz)),
                    ValidationError);
  // Translation-only stays legal on non-cubes.
  REQUIRE_NOTHROW(transform_field(slab, OrthogonalTransform(), Eigen::Vector3i(1, 0, 2)));
}

TEST_CASE("octahedral round trip and composition") {
  Rng rng(4);
  RepSpec rep;
  rep.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  rep.blocks.push_back({1, IrrepLabel{1, Parity::even}});
  rep.blocks.push_back({1, IrrepLabel{1, Parity::odd}});
  rep.blocks.push_back({1, IrrepLabel{2, Parity::odd}});
  const IrrepField f = random_field(4, rep, rng);
  const auto group = octahedral_group();
  for (size_t i = 0; i < group.size(); i += 7) {
    const auto& g = group[i];
    const auto ginv = OrthogonalTransform::from_matrix(Mat3(g.matrix.transpose()));
    const IrrepField back = transform_field(transform_field(f, g), ginv);
    REQUIRE((back.data - f.data).cwiseAbs().maxCoeff() < 1e-12);
  }
  // pi(g1 g2) = pi(g1) pi(g2) on a sampled pair.
  const auto& g1 = group[5];
  const auto& g2 = group[30];
  const IrrepField lhs = transform_field(f, g1 * g2);
  const IrrepField rhs = transform_field(transform_field(f, g2), g1);
  REQUIRE((lhs.data - rhs.data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("translation moves samples and zero-fills") {
  Rng rng(5);
  const IrrepField f = random_field(4, scalar_rep(), rng);
  const IrrepField out = transform_field(f, OrthogonalTransform(), Eigen::Vector3i(1, 0, 0));
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y) {
      REQUIRE(out.data(0, out.index(0, y, z)) == 0.0);
      for (int x = 1; x < 4; ++x)
        REQUIRE(out.data(0, out.index(x, y, z)) == f.data(0, f.index(x - 1, y, z)));
    }
}

TEST_CASE("resampled transform matches grid-exact on octahedral elements") {
  Rng rng(6);
  RepSpec rep;
  rep.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  rep.blocks.push_back({1, IrrepLabel{1, Parity::odd}});
  const IrrepField f = random_field(6, rep, rng);
  const auto group = octahedral_group();
  for (size_t i = 0; i < group.size(); i += 11) {
    const IrrepField exact = transform_field(f, group[i]);
    const IrrepField approx = transform_field_resampled(f, group[i]);
    REQUIRE((exact.data - approx.data).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rep_matrix is block diagonal and orthogonal") {
  Rng rng(7);
  RepSpec rep;
  rep.blocks.push_back({2, IrrepLabel{0, Parity::odd}});
  rep.blocks.push_back({1, IrrepLabel{2, Parity::even}});
  const auto g = OrthogonalTransform::from_rotation(sample_rotation(rng));
  const MatX m = rep_matrix(rep, g);
  REQUIRE(m.rows() == rep.dimension());
  REQUIRE((m * m.transpose() - MatX::Identity(m.rows(), m.rows())).cwiseAbs().maxCoeff() <
          1e-12);
  REQUIRE(m(0, 0) == Catch::Approx(m(1, 1)));
  REQUIRE(m(0, 1) == 0.0);
  REQUIRE(m.block(0, 2, 2, 5).cwiseAbs().maxCoeff() == 0.0);
}
