#pragma once

// The equivariant regressor: steerable convolutions over voxel grids, RMS
// instance normalization, gated nonlinearities, norm pooling, and a frame
// head (spatial mean + per-vector normalization). Forward records a tape;
// backward walks it in reverse and accumulates coefficient gradients.

#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "e3pose/common.hpp"
#include "e3pose/config.hpp"
#include "e3pose/field.hpp"
#include "e3pose/kernels.hpp"
#include "e3pose/pose.hpp"
#include "e3pose/so3.hpp"

namespace e3pose {

enum class HeadMode { pseudovector, no_pseudovector, two_vector };

struct LevelSpec {
  // Feature multiplicities indexed by [order][parity]: 0e,0o,1e,1o,2e,2o.
  int features[6] = {4, 4, 2, 2, 1, 1};
  int kernel = 5;
  int pool = 2;
};

struct NetworkSpec {
  std::vector<LevelSpec> levels;
  int head_kernel = 3;
  HeadMode head_mode = HeadMode::pseudovector;

  static NetworkSpec desk_default() {
    NetworkSpec s;
    s.levels.resize(2);
    for (auto& l : s.levels) {
      const int f[6] = {4, 4, 2, 2, 1, 1};
      std::copy(f, f + 6, l.features);
    }
    return s;
  }

  // The full-scale configuration quoted by the architecture description:
  // four levels starting at (8,4,2) per parity/order, doubling per level.
  static NetworkSpec full_scale() {
    NetworkSpec s;
    for (int k = 0; k < 4; ++k) {
      LevelSpec l;
      const int m = 1 << k;
      const int f[6] = {8 * m, 8 * m, 4 * m, 4 * m, 2 * m, 2 * m};
      std::copy(f, f + 6, l.features);
      s.levels.push_back(l);
    }
    return s;
  }
};

inline RepSpec rep_from_counts(const int counts[6]) {
  RepSpec rep;
  for (int l = 0; l <= 2; ++l)
    for (int p = 0; p < 2; ++p) {
      const int n = counts[2 * l + p];
      if (n > 0) rep.blocks.push_back({n, IrrepLabel{l, p == 0 ? Parity::even : Parity::odd}});
    }
  return rep;
}

inline RepSpec head_rep(HeadMode mode) {
  RepSpec rep;
  switch (mode) {
    case HeadMode::pseudovector:
      rep.blocks.push_back({1, IrrepLabel{1, Parity::even}});
      rep.blocks.push_back({2, IrrepLabel{1, Parity::odd}});
      break;
    case HeadMode::no_pseudovector:
      rep.blocks.push_back({3, IrrepLabel{1, Parity::odd}});
      break;
    case HeadMode::two_vector:
      rep.blocks.push_back({2, IrrepLabel{1, Parity::odd}});
      break;
  }
  return rep;
}

// Radial level giving r_max = support/2 for odd supports 3,5,7.
inline int radial_level_for_support(int s) { return (s + 1) / 2; }

namespace detail {

enum class LayerKind { conv, norm, gate, pool };

struct ConvPath {
  const KernelBasis* basis = nullptr;
  int src_offset = 0, tgt_offset = 0;  // channel offsets
  int w_offset = 0;                    // into the flat parameter vector
};

struct LayerDef {
  LayerKind kind = LayerKind::conv;
  RepSpec in_rep, out_rep;
  // conv only:
  int support = 0, level = 0;
  std::vector<ConvPath> paths;
  // gate only: number of gate scalars appended to in_rep past out_rep
  int n_gates = 0;
  // pool only:
  int stride = 0;
};

inline std::vector<MatX> assemble_layer_kernels(const LayerDef& layer, const VecX& params) {
  const int s = layer.support;
  const int nv = s * s * s;
  const int co = layer.out_rep.dimension(), ci = layer.in_rep.dimension();
  std::vector<MatX> k(static_cast<size_t>(nv), MatX::Zero(co, ci));
  for (const auto& p : layer.paths) {
    const auto& tensors = p.basis->tensors;
    const int dh = p.basis->target.dimension(), df = p.basis->source.dimension();
    for (int c = 0; c < p.basis->num_coefficients(); ++c) {
      const double w = params[p.w_offset + c];
      if (w == 0.0) continue;
      for (int v = 0; v < nv; ++v)
        k[static_cast<size_t>(v)].block(p.tgt_offset, p.src_offset, dh, df) +=
            w * tensors[static_cast<size_t>(c)].values[static_cast<size_t>(v)];
    }
  }
  return k;
}

// Dense cross-correlation with zero padding: out(p) = sum_d K[d] in(p + d).
inline IrrepField conv_forward(const IrrepField& in, const std::vector<MatX>& k,
                               const RepSpec& out_rep, int support) {
  IrrepField out(in.nx, in.ny, in.nz, out_rep, in.voxel_mm);
  const int h = support / 2;
  for (int dz = -h; dz <= h; ++dz)
    for (int dy = -h; dy <= h; ++dy)
      for (int dx = -h; dx <= h; ++dx) {
        const MatX& kd = k[static_cast<size_t>(KernelBasis::voxel_index(support, dx, dy, dz))];
        if (kd.cwiseAbs().maxCoeff() == 0.0) continue;
        const int x0 = std::max(0, -dx), x1 = std::min(in.nx, in.nx - dx);
        if (x1 <= x0) continue;
        for (int z = std::max(0, -dz); z < std::min(in.nz, in.nz - dz); ++z)
          for (int y = std::max(0, -dy); y < std::min(in.ny, in.ny - dy); ++y)
            out.data.middleCols(out.index(x0, y, z), x1 - x0).noalias() +=
                kd * in.data.middleCols(in.index(x0 + dx, y + dy, z + dz), x1 - x0);
      }
  return out;
}

inline IrrepField conv_backward_input(const IrrepField& g_out, const std::vector<MatX>& k,
                                      const RepSpec& in_rep, int support) {
  IrrepField g_in(g_out.nx, g_out.ny, g_out.nz, in_rep, g_out.voxel_mm);
  const int h = support / 2;
  for (int dz = -h; dz <= h; ++dz)
    for (int dy = -h; dy <= h; ++dy)
      for (int dx = -h; dx <= h; ++dx) {
        const MatX& kd = k[static_cast<size_t>(KernelBasis::voxel_index(support, dx, dy, dz))];
        if (kd.cwiseAbs().maxCoeff() == 0.0) continue;
        const int x0 = std::max(0, -dx), x1 = std::min(g_out.nx, g_out.nx - dx);
        if (x1 <= x0) continue;
        for (int z = std::max(0, -dz); z < std::min(g_out.nz, g_out.nz - dz); ++z)
          for (int y = std::max(0, -dy); y < std::min(g_out.ny, g_out.ny - dy); ++y)
            g_in.data.middleCols(g_in.index(x0 + dx, y + dy, z + dz), x1 - x0).noalias() +=
                kd.transpose() * g_out.data.middleCols(g_out.index(x0, y, z), x1 - x0);
      }
  return g_in;
}

inline void conv_backward_params(const LayerDef& layer, const IrrepField& in,
                                 const IrrepField& g_out, VecX& g_params) {
  const int s = layer.support, h = s / 2;
  const int nv = s * s * s;
  std::vector<MatX> gk(static_cast<size_t>(nv),
                       MatX::Zero(layer.out_rep.dimension(), layer.in_rep.dimension()));
  for (int dz = -h; dz <= h; ++dz)
    for (int dy = -h; dy <= h; ++dy)
      for (int dx = -h; dx <= h; ++dx) {
        MatX& gkd = gk[static_cast<size_t>(KernelBasis::voxel_index(s, dx, dy, dz))];
        const int x0 = std::max(0, -dx), x1 = std::min(in.nx, in.nx - dx);
        if (x1 <= x0) continue;
        for (int z = std::max(0, -dz); z < std::min(in.nz, in.nz - dz); ++z)
          for (int y = std::max(0, -dy); y < std::min(in.ny, in.ny - dy); ++y)
            gkd.noalias() +=
                g_out.data.middleCols(g_out.index(x0, y, z), x1 - x0) *
                in.data.middleCols(in.index(x0 + dx, y + dy, z + dz), x1 - x0).transpose();
      }
  for (const auto& p : layer.paths) {
    const int dh = p.basis->target.dimension(), df = p.basis->source.dimension();
    for (int c = 0; c < p.basis->num_coefficients(); ++c) {
      double acc = 0.0;
      const auto& vals = p.basis->tensors[static_cast<size_t>(c)].values;
      for (int v = 0; v < nv; ++v)
        acc += vals[static_cast<size_t>(v)]
                   .cwiseProduct(gk[static_cast<size_t>(v)].block(p.tgt_offset, p.src_offset,
                                                                  dh, df))
                   .sum();
      g_params[p.w_offset + c] += acc;
    }
  }
}

}  // namespace detail

namespace detail {

inline constexpr double kNormEps = 1e-5;

// RMS instance normalization per atomic block: divide by the root mean
// square over voxels and block components. No mean subtraction, so the
// zero background stays zero and translation equivariance is exact.
inline IrrepField norm_forward(const IrrepField& in, VecX* scales) {
    const auto blocks = atomic_blocks(in.rep);
    IrrepField out = in;
    VecX s(static_cast<int>(blocks.size()));
    for (size_t i = 0; i < blocks.size(); ++i) {
      const int n = blocks[i].label.dimension();
      const auto rows = in.data.middleRows(blocks[i].offset, n);
      s[static_cast<int>(i)] = std::sqrt(rows.squaredNorm() / rows.size() + kNormEps);
      out.data.middleRows(blocks[i].offset, n) = rows / s[static_cast<int>(i)];
    }
    if (scales) *scales = s;
    return out;
  }

inline IrrepField norm_backward(const IrrepField& in, const VecX& scales,
                                const IrrepField& g_out) {
    const auto blocks = atomic_blocks(in.rep);
    IrrepField g_in = in;
    for (size_t i = 0; i < blocks.size(); ++i) {
      const int n = blocks[i].label.dimension();
      const auto x = in.data.middleRows(blocks[i].offset, n);
      const auto gy = g_out.data.middleRows(blocks[i].offset, n);
      const double s = scales[static_cast<int>(i)];
      const double dot = gy.cwiseProduct(x).sum();
      g_in.data.middleRows(blocks[i].offset, n) =
          gy / s - x * (dot / (static_cast<double>(x.size()) * s * s * s));
    }
    return g_in;
  }

  // Even scalars -> ReLU, odd scalars -> tanh, higher-order blocks scaled by
  // the sigmoid of their dedicated gate scalar (appended after main channels).
inline IrrepField gate_forward(const IrrepField& in, const LayerDef& l) {
    IrrepField out(in.nx, in.ny, in.nz, l.out_rep, in.voxel_mm);
    const int gate0 = l.out_rep.dimension();
    int gi = 0;
    for (const auto& b : atomic_blocks(l.out_rep)) {
      const int n = b.label.dimension();
      if (b.label.order == 0) {
        if (b.label.parity == Parity::even)
          out.data.row(b.offset) = in.data.row(b.offset).cwiseMax(0.0);
        else
          out.data.row(b.offset) = in.data.row(b.offset).array().tanh();
      } else {
        const Eigen::Array<double, 1, Eigen::Dynamic> u = in.data.row(gate0 + gi).array();
        const Eigen::Array<double, 1, Eigen::Dynamic> sig = 1.0 / (1.0 + (-u).exp());
        out.data.middleRows(b.offset, n) =
            (in.data.middleRows(b.offset, n).array().rowwise() * sig).matrix();
        ++gi;
      }
    }
    return out;
  }

inline IrrepField gate_backward(const IrrepField& in, const LayerDef& l,
                                const IrrepField& g_out) {
    IrrepField g_in(in.nx, in.ny, in.nz, l.in_rep, in.voxel_mm);
    const int gate0 = l.out_rep.dimension();
    int gi = 0;
    for (const auto& b : atomic_blocks(l.out_rep)) {
      const int n = b.label.dimension();
      if (b.label.order == 0) {
        if (b.label.parity == Parity::even) {
          g_in.data.row(b.offset) =
              g_out.data.row(b.offset).cwiseProduct((in.data.row(b.offset).array() > 0.0)
                                                        .cast<double>()
                                                        .matrix());
        } else {
          const auto t = in.data.row(b.offset).array().tanh();
          g_in.data.row(b.offset) =
              (g_out.data.row(b.offset).array() * (1.0 - t * t)).matrix();
        }
      } else {
        const Eigen::Array<double, 1, Eigen::Dynamic> u = in.data.row(gate0 + gi).array();
        const Eigen::Array<double, 1, Eigen::Dynamic> sig = 1.0 / (1.0 + (-u).exp());
        const auto x = in.data.middleRows(b.offset, n);
        const auto gy = g_out.data.middleRows(b.offset, n);
        g_in.data.middleRows(b.offset, n) = (gy.array().rowwise() * sig).matrix();
        const Eigen::Array<double, 1, Eigen::Dynamic> dot =
            gy.cwiseProduct(x).colwise().sum().array();
        g_in.data.row(gate0 + gi) = (dot * sig * (1.0 - sig)).matrix();
        ++gi;
      }
    }
    return g_in;
  }

  // Non-overlapping window pooling: even scalars by max, odd scalars by
  // largest magnitude keeping sign, higher-order blocks by largest block
  // norm, selected atomically. Argmax source columns are recorded per block.
inline IrrepField pool_forward(const IrrepField& in, int stride, Eigen::MatrixXi* src) {
    if (in.nx % stride || in.ny % stride || in.nz % stride)
      throw ValidationError("Network: pool stride must divide the grid dims");
    const auto blocks = atomic_blocks(in.rep);
    IrrepField out(in.nx / stride, in.ny / stride, in.nz / stride, in.rep, in.voxel_mm * stride);
    src->resize(static_cast<int>(blocks.size()), out.voxels());
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int x = 0; x < out.nx; ++x) {
          const int oc = out.index(x, y, z);
          for (size_t bi = 0; bi < blocks.size(); ++bi) {
            const auto& b = blocks[bi];
            const int n = b.label.dimension();
            double best = -1.0;
            int best_col = -1;
            for (int dz = 0; dz < stride; ++dz)
              for (int dy = 0; dy < stride; ++dy)
                for (int dx = 0; dx < stride; ++dx) {
                  const int ic = in.index(x * stride + dx, y * stride + dy, z * stride + dz);
                  double score;
                  if (b.label.order == 0 && b.label.parity == Parity::even)
                    score = in.data(b.offset, ic);
                  else
                    score = in.data.col(ic).segment(b.offset, n).norm();
                  if (best_col < 0 || score > best) {
                    best = score;
                    best_col = ic;
                  }
                }
            out.data.col(oc).segment(b.offset, n) = in.data.col(best_col).segment(b.offset, n);
            (*src)(static_cast<int>(bi), oc) = best_col;
          }
        }
    return out;
  }

inline IrrepField pool_backward(const IrrepField& in, int stride, const Eigen::MatrixXi& src,
                                const IrrepField& g_out) {
    IrrepField g_in(in.nx, in.ny, in.nz, in.rep, in.voxel_mm);
    const auto blocks = atomic_blocks(in.rep);
    for (int oc = 0; oc < g_out.voxels(); ++oc)
      for (size_t bi = 0; bi < blocks.size(); ++bi) {
        const auto& b = blocks[bi];
        const int n = b.label.dimension();
        g_in.data.col(src(static_cast<int>(bi), oc)).segment(b.offset, n) +=
            g_out.data.col(oc).segment(b.offset, n);
      }
    return g_in;
  }

}  // namespace detail

struct Tape {
  std::vector<IrrepField> inputs;       // input field of each layer
  std::vector<VecX> norm_scale;         // per norm layer: scale per atomic block
  std::vector<Eigen::MatrixXi> pool_src;  // per pool layer: block x outvoxel source column
  IrrepField head_in;                   // input to the head convolution
  IrrepField head_out;                  // pre-mean head field
  VecX raw;                             // spatial mean, pre-normalization
};

class Network {
 public:
  explicit Network(const NetworkSpec& spec) : spec_(spec) {
    if (spec.levels.empty()) throw ValidationError("Network: at least one level required");
    RepSpec in_rep;
    in_rep.blocks.push_back({1, IrrepLabel{0, Parity::even}});
    int w_at = 0;
    for (const auto& lv : spec_.levels) {
      const RepSpec main = rep_from_counts(lv.features);
      if (main.dimension() == 0) throw ValidationError("Network: level with no features");
      // One even scalar gate per higher-order atomic block, appended after
      // the main channels.
      int n_gates = 0;
      for (const auto& b : atomic_blocks(main))
        if (b.label.order >= 1) ++n_gates;
      RepSpec full = main;
      if (n_gates > 0) full.blocks.push_back({n_gates, IrrepLabel{0, Parity::even}});

      layers_.push_back(make_conv(in_rep, full, lv.kernel, w_at));
      layers_.push_back({detail::LayerKind::norm, full, full});
      detail::LayerDef gate{detail::LayerKind::gate, full, main};
      gate.n_gates = n_gates;
      layers_.push_back(gate);
      detail::LayerDef pool{detail::LayerKind::pool, main, main};
      pool.stride = lv.pool;
      layers_.push_back(pool);
      in_rep = main;
    }
    head_ = make_conv(in_rep, head_rep(spec_.head_mode), spec_.head_kernel, w_at);
    num_params_ = w_at;
  }

  // Layer defs hold pointers into the basis cache; copying would dangle them.
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const NetworkSpec& spec() const { return spec_; }
  int num_parameters() const { return num_params_; }

  VecX init_parameters(uint64_t seed) const {
    Rng rng(seed);
    VecX w(num_params_);
    auto gauss = [&rng]() {
      const double u1 = std::max(uniform01(rng), 1e-300);
      const double u2 = uniform01(rng);
      return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    };
    auto fill = [&](const detail::LayerDef& l) {
      const double sigma = 1.0 / std::sqrt(static_cast<double>(l.in_rep.dimension()));
      for (const auto& p : l.paths)
        for (int c = 0; c < p.basis->num_coefficients(); ++c) w[p.w_offset + c] = sigma * gauss();
    };
    for (const auto& l : layers_)
      if (l.kind == detail::LayerKind::conv) fill(l);
    fill(head_);
    return w;
  }

  // Raw head output: spatial mean of the head convolution, pre-normalization.
  VecX forward_raw(const IrrepField& input, const VecX& params, Tape* tape = nullptr) const {
    input.validate();
    if (params.size() != num_params_)
      throw ValidationError("Network: parameter vector length mismatch");
    if (input.rep.dimension() != 1 || input.rep.blocks[0].label.order != 0)
      throw ValidationError("Network: input must be a single even scalar field");

    IrrepField cur = input;
    for (const auto& l : layers_) {
      if (tape) tape->inputs.push_back(cur);
      switch (l.kind) {
        case detail::LayerKind::conv: {
          const auto k = detail::assemble_layer_kernels(l, params);
          cur = detail::conv_forward(cur, k, l.out_rep, l.support);
          break;
        }
        case detail::LayerKind::norm: {
          VecX scales;
          cur = detail::norm_forward(cur, &scales);
          if (tape) tape->norm_scale.push_back(scales);
          break;
        }
        case detail::LayerKind::gate:
          cur = detail::gate_forward(cur, l);
          break;
        case detail::LayerKind::pool: {
          Eigen::MatrixXi src;
          cur = detail::pool_forward(cur, l.stride, &src);
          if (tape) tape->pool_src.push_back(src);
          break;
        }
      }
    }
    if (tape) tape->head_in = cur;
    const auto hk = detail::assemble_layer_kernels(head_, params);
    IrrepField out = detail::conv_forward(cur, hk, head_.out_rep, head_.support);
    VecX raw = out.data.rowwise().mean();
    if (tape) {
      tape->head_out = std::move(out);
      tape->raw = raw;
    }
    return raw;
  }

  // Normalized frame; throws DegenerateOutput when any pre-normalization
  // vector has norm below 1e-6.
  PoseParametrization forward(const IrrepField& input, const VecX& params) const {
    const VecX raw = forward_raw(input, params);
    return normalized_frame(raw);
  }

  PoseParametrization normalized_frame(const VecX& raw) const {
    const int nvec = static_cast<int>(raw.size()) / 3;
    std::vector<Vec3> vs;
    for (int i = 0; i < nvec; ++i) {
      // Harmonic component order (y, z, x) back to Cartesian.
      const Vec3 v(raw[3 * i + 2], raw[3 * i + 0], raw[3 * i + 1]);
      if (v.norm() < 1e-6)
        throw DegenerateOutput("Network: near-zero output vector before normalization", raw);
      vs.push_back(v.normalized());
    }
    PoseParametrization p;
    switch (spec_.head_mode) {
      case HeadMode::pseudovector:
      case HeadMode::no_pseudovector:
        p.e_x = vs[0];
        p.e_y = vs[1];
        p.e_z = vs[2];
        break;
      case HeadMode::two_vector: {
        const Rotation r = complete_two_vector(vs[0], vs[1]);
        p.e_x = r.matrix().col(0);
        p.e_y = r.matrix().col(1);
        p.e_z = r.matrix().col(2);
        break;
      }
    }
    return p;
  }

  // Adjoint of forward_raw: given dL/draw, returns dL/dparams.
  VecX backward(const Tape& tape, const VecX& params, const VecX& raw_adjoint) const {
    VecX g_params = VecX::Zero(num_params_);

    // Mean layer: every voxel shares the adjoint / V.
    IrrepField g_head(tape.head_out.nx, tape.head_out.ny, tape.head_out.nz, head_.out_rep,
                      tape.head_out.voxel_mm);
    g_head.data.colwise() = VecX(raw_adjoint / tape.head_out.voxels());

    const auto hk = detail::assemble_layer_kernels(head_, params);
    detail::conv_backward_params(head_, tape.head_in, g_head, g_params);
    IrrepField g = detail::conv_backward_input(g_head, hk, head_.in_rep, head_.support);
    check_finite(g, "head");

    int norm_i = static_cast<int>(tape.norm_scale.size());
    int pool_i = static_cast<int>(tape.pool_src.size());
    for (int li = static_cast<int>(layers_.size()) - 1; li >= 0; --li) {
      const auto& l = layers_[static_cast<size_t>(li)];
      const IrrepField& in = tape.inputs[static_cast<size_t>(li)];
      switch (l.kind) {
        case detail::LayerKind::conv: {
          const auto k = detail::assemble_layer_kernels(l, params);
          detail::conv_backward_params(l, in, g, g_params);
          g = detail::conv_backward_input(g, k, l.in_rep, l.support);
          break;
        }
        case detail::LayerKind::norm:
          g = detail::norm_backward(in, tape.norm_scale[static_cast<size_t>(--norm_i)], g);
          break;
        case detail::LayerKind::gate:
          g = detail::gate_backward(in, l, g);
          break;
        case detail::LayerKind::pool:
          g = detail::pool_backward(in, l.stride, tape.pool_src[static_cast<size_t>(--pool_i)], g);
          break;
      }
      check_finite(g, layer_name(l.kind, li));
    }
    if (!g_params.allFinite())
      throw ValidationError("Network: non-finite parameter gradient");
    return g_params;
  }

 private:
  static std::string layer_name(detail::LayerKind k, int i) {
    const char* n = k == detail::LayerKind::conv   ? "conv"
                    : k == detail::LayerKind::norm ? "norm"
                    : k == detail::LayerKind::gate ? "gate"
                                                   : "pool";
    return std::string(n) + "[" + std::to_string(i) + "]";
  }

  static void check_finite(const IrrepField& f, const std::string& where) {
    if (!f.data.allFinite())
      throw ValidationError("Network: non-finite gradient at layer " + where);
  }

  detail::LayerDef make_conv(const RepSpec& in_rep, const RepSpec& out_rep, int support,
                             int& w_at) {
    detail::LayerDef l;
    l.kind = detail::LayerKind::conv;
    l.in_rep = in_rep;
    l.out_rep = out_rep;
    l.support = support;
    l.level = radial_level_for_support(support);
    for (const auto& tgt : atomic_blocks(out_rep))
      for (const auto& src : atomic_blocks(in_rep)) {
        const KernelBasis& b = cache_.get(src.label, tgt.label, support, l.level);
        if (b.empty_selection) continue;
        detail::ConvPath p;
        p.basis = &b;
        p.src_offset = src.offset;
        p.tgt_offset = tgt.offset;
        p.w_offset = w_at;
        w_at += b.num_coefficients();
        l.paths.push_back(p);
      }
    return l;
  }

  NetworkSpec spec_;
  std::vector<detail::LayerDef> layers_;
  detail::LayerDef head_;
  KernelBasisCache cache_;
  int num_params_ = 0;
};


// --- NetworkSpec config text ------------------------------------------------

inline std::string spec_to_config(const NetworkSpec& s) {
  std::ostringstream o;
  o << "levels=" << s.levels.size() << "\n";
  for (size_t i = 0; i < s.levels.size(); ++i) {
    const auto& l = s.levels[i];
    o << "level" << (i + 1) << ".features=";
    for (int j = 0; j < 6; ++j) o << l.features[j] << (j == 5 ? "" : ",");
    o << "\nlevel" << (i + 1) << ".kernel=" << l.kernel;
    o << "\nlevel" << (i + 1) << ".pool=" << l.pool << "\n";
  }
  o << "head.kernel=" << s.head_kernel << "\n";
  o << "head.mode="
    << (s.head_mode == HeadMode::pseudovector      ? "pseudovector"
        : s.head_mode == HeadMode::no_pseudovector ? "no_pseudovector"
                                                   : "two_vector")
    << "\n";
  return o.str();
}

inline NetworkSpec spec_from_config(ConfigView& cfg) {
  NetworkSpec s;
  const long nlevels = cfg.get_int("levels", 2);
  if (nlevels < 1 || nlevels > 8) throw FormatError("config: levels out of range [1,8]");
  for (long i = 1; i <= nlevels; ++i) {
    const std::string prefix = "level" + std::to_string(i) + ".";
    LevelSpec l;
    if (cfg.has(prefix + "features")) {
      const auto f = cfg.get_int_list(prefix + "features");
      if (f.size() != 6)
        throw FormatError("config: " + prefix + "features needs 6 comma-separated counts");
      for (int j = 0; j < 6; ++j) l.features[j] = static_cast<int>(f[static_cast<size_t>(j)]);
    }
    l.kernel = static_cast<int>(cfg.get_int(prefix + "kernel", 5));
    l.pool = static_cast<int>(cfg.get_int(prefix + "pool", 2));
    if (l.kernel < 1 || l.kernel % 2 == 0) throw FormatError("config: kernel must be odd >= 1");
    if (l.pool < 1) throw FormatError("config: pool must be >= 1");
    s.levels.push_back(l);
  }
  s.head_kernel = static_cast<int>(cfg.get_int("head.kernel", 3));
  if (s.head_kernel < 1 || s.head_kernel % 2 == 0)
    throw FormatError("config: head.kernel must be odd >= 1");
  const std::string mode = cfg.get("head.mode", "pseudovector");
  if (mode == "pseudovector")
    s.head_mode = HeadMode::pseudovector;
  else if (mode == "no_pseudovector")
    s.head_mode = HeadMode::no_pseudovector;
  else if (mode == "two_vector")
    s.head_mode = HeadMode::two_vector;
  else
    throw FormatError("config: unknown head.mode " + mode);
  return s;
}

// --- Parameter checkpoint file ----------------------------------------------

inline uint64_t spec_hash(const NetworkSpec& s) {
  // FNV-1a over the canonical config text.
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : spec_to_config(s)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline void write_checkpoint(const std::string& path, const NetworkSpec& spec, const VecX& w,
                             uint64_t seed) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("write_checkpoint: cannot open " + path);
  const char magic[8] = {'E', '3', 'P', 'C', 'K', 'P', 'T', '1'};
  f.write(magic, 8);
  const uint64_t hash = spec_hash(spec);
  const uint64_t n = static_cast<uint64_t>(w.size());
  f.write(reinterpret_cast<const char*>(&hash), 8);
  f.write(reinterpret_cast<const char*>(&seed), 8);
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(8 * n));
  if (!f) throw FormatError("write_checkpoint: write failed for " + path);
}

inline VecX read_checkpoint(const std::string& path, const NetworkSpec& spec,
                            uint64_t* seed_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("read_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "E3PCKPT1", 8) != 0)
    throw FormatError("read_checkpoint: bad magic in " + path);
  uint64_t hash = 0, seed = 0, n = 0;
  f.read(reinterpret_cast<char*>(&hash), 8);
  f.read(reinterpret_cast<char*>(&seed), 8);
  f.read(reinterpret_cast<char*>(&n), 8);
  if (!f) throw FormatError("read_checkpoint: truncated header in " + path);
  if (hash != spec_hash(spec))
    throw FormatError("read_checkpoint: checkpoint does not match the network spec");
  VecX w(static_cast<int>(n));
  f.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(8 * n));
  if (!f) throw FormatError("read_checkpoint: truncated coefficients in " + path);
  if (seed_out) *seed_out = seed;
  return w;
}

// --- Toy trainer -------------------------------------------------------------

struct TrainSample {
  IrrepField volume;
  PoseParametrization gt;
};

struct TrainConfig {
  int steps = 2000;
  double learning_rate = 1e-2;  // plain SGD, batch size 1
  double beta = 1.0;
  uint64_t seed = 0;
  // The normalization adjoint scales like 1/|raw|, so early steps can be
  // huge; clipping plus stepped decay keeps batch-1 SGD from thrashing.
  double clip_norm = 5.0;
  int decay_every = 800;
  double decay_factor = 0.5;
};

// Adjoint of the per-vector normalization: dL/draw from dL/d(unit vectors).
inline VecX frame_loss_raw_adjoint(const VecX& raw, const LossResult& loss) {
  const int nvec = static_cast<int>(raw.size()) / 3;
  VecX g = VecX::Zero(raw.size());
  const Vec3* adj[3] = {&loss.d_e_x, &loss.d_e_y, &loss.d_e_z};
  for (int i = 0; i < nvec; ++i) {
    const Vec3 v(raw[3 * i + 2], raw[3 * i + 0], raw[3 * i + 1]);
    const double n = v.norm();
    const Vec3 u = v / n;
    const Vec3 gx = (*adj[i] - u.dot(*adj[i]) * u) / n;
    g[3 * i + 2] = gx.x();
    g[3 * i + 0] = gx.y();
    g[3 * i + 1] = gx.z();
  }
  return g;
}

struct TrainResult {
  VecX params;
  double initial_mean_loss = 0.0;
  double final_mean_loss = 0.0;
};

inline TrainResult train_toy(const Network& net, const std::vector<TrainSample>& data,
                             const TrainConfig& cfg) {
  if (data.empty()) throw ValidationError("train_toy: empty dataset");
  if (net.spec().head_mode != HeadMode::pseudovector)
    throw ValidationError("train_toy: only the pseudovector head is trainable here");
  Rng rng(cfg.seed);
  VecX w = net.init_parameters(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  auto mean_loss = [&](const VecX& params) {
    double total = 0.0;
    for (const auto& s : data) {
      try {
        const PoseParametrization p = net.forward(s.volume, params);
        total += pose_loss(p, s.gt, cfg.beta).value;
      } catch (const DegenerateOutput&) {
        total += 2.0 + 2.0 * cfg.beta;  // maximal loss stand-in
      }
    }
    return total / static_cast<double>(data.size());
  };

  TrainResult result;
  result.initial_mean_loss = mean_loss(w);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto& s = data[static_cast<size_t>(rng() % data.size())];
    Tape tape;
    const VecX raw = net.forward_raw(s.volume, w, &tape);
    PoseParametrization pred;
    try {
      pred = net.normalized_frame(raw);
    } catch (const DegenerateOutput&) {
      continue;  // no usable direction; skip the step
    }
    const LossResult loss = pose_loss(pred, s.gt, cfg.beta);
    const VecX raw_adj = frame_loss_raw_adjoint(raw, loss);
    VecX grad = net.backward(tape, w, raw_adj);
    const double gn = grad.norm();
    if (cfg.clip_norm > 0.0 && gn > cfg.clip_norm) grad *= cfg.clip_norm / gn;
    const double lr = cfg.learning_rate *
                      std::pow(cfg.decay_factor, cfg.decay_every > 0 ? step / cfg.decay_every : 0);
    w -= lr * grad;
  }
  result.final_mean_loss = mean_loss(w);
  result.params = w;
  return result;
}

}  // namespace e3pose
