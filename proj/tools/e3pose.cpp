// Single entry point for all workflows: phantom generation, augmentation,
// equivariance checking, toy training and evaluation, slice-stack simulation,
// and the scanner/server loop. Every stochastic subcommand takes an explicit
// seed and writes deterministic outputs; nothing is overwritten without
// --force.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "e3pose/config.hpp"
#include "e3pose/field.hpp"
#include "e3pose/net.hpp"
#include "e3pose/pose.hpp"
#include "e3pose/scanloop.hpp"
#include "e3pose/slicesim.hpp"
#include "e3pose/volume.hpp"

namespace fs = std::filesystem;
using namespace e3pose;

namespace {

// Output-file guard: directories are created, existing files are an error
// unless --force was given.
std::string out_path(const std::string& dir, const std::string& name, bool force) {
  fs::create_directories(dir);
  const fs::path p = fs::path(dir) / name;
  if (fs::exists(p) && !force)
    throw ValidationError("refusing to overwrite " + p.string() + " (use --force)");
  return p.string();
}

ConfigView load_config(const std::string& path) {
  if (path.empty()) throw ValidationError("this subcommand requires --config");
  return ConfigView(parse_config_file(path));
}

IrrepField occupancy_as_field(const OccupancyGrid& occ) {
  RepSpec scalar;
  scalar.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  IrrepField f(occ.nx, occ.ny, occ.nz, scalar, occ.voxel_mm);
  for (int i = 0; i < f.voxels(); ++i) f.data(0, i) = occ.mask[static_cast<size_t>(i)];
  return f;
}

PhantomConfig phantom_from_config(ConfigView& cfg) {
  PhantomConfig pc;
  pc.n = static_cast<int>(cfg.get_int("phantom.n", pc.n));
  pc.voxel_mm = cfg.get_double("phantom.voxel_mm", pc.voxel_mm);
  pc.asymmetry_strength = cfg.get_double("phantom.asymmetry", pc.asymmetry_strength);
  return pc;
}

PoseParametrization frame_of_rotation(const Rotation& r) {
  PoseParametrization p;
  p.e_x = r.matrix().col(0);
  p.e_y = r.matrix().col(1);
  p.e_z = r.matrix().col(2);
  return p;
}

// Shared by train and eval so both sides see the identical dataset: phantoms
// under rotation-only augmentation, ground truth rotated accordingly.
struct DataItem {
  TrainSample sample;
  Rotation gt_rotation;
};

std::vector<DataItem> make_rotation_dataset(uint64_t seed, int count, const PhantomConfig& pc) {
  std::vector<DataItem> out;
  Rng rng(seed ^ 0xa5a5a5a5a5a5a5a5ull);
  for (int i = 0; i < count; ++i) {
    const Phantom ph = generate_phantom(seed + static_cast<uint64_t>(i), pc);
    const Rotation r = sample_rotation(rng);
    DataItem item;
    item.sample.volume = detail::apply_rigid_scalar(ph.volume, r, Vec3::Zero(), 1.0);
    item.gt_rotation = Rotation::from_matrix(Mat3(r.matrix() * ph.gt_pose.rotation.matrix()));
    item.sample.gt = frame_of_rotation(item.gt_rotation);
    out.push_back(std::move(item));
  }
  return out;
}

StackOrientation orientation_from_string(const std::string& s) {
  if (s == "sagittal") return StackOrientation::sagittal;
  if (s == "coronal") return StackOrientation::coronal;
  if (s == "axial") return StackOrientation::axial;
  throw FormatError("unknown orientation " + s + " (sagittal|coronal|axial)");
}

// ---------------------------------------------------------------------------

int cmd_gen_phantom(const std::string& config, uint64_t seed, const std::string& out,
                    bool force) {
  ConfigView cfg =
      config.empty() ? ConfigView(std::map<std::string, std::string>{}) : load_config(config);
  const PhantomConfig pc = phantom_from_config(cfg);
  cfg.finish();
  const Phantom ph = generate_phantom(seed, pc);

  Eigen::Matrix4d world = Eigen::Matrix4d::Identity() * pc.voxel_mm;
  world(3, 3) = 1.0;
  write_volume(out_path(out, "phantom.vol", force), ph.volume, world);
  write_volume(out_path(out, "occupancy.vol", force), occupancy_as_field(ph.occupancy), world);
  write_pose_file(out_path(out, "gt.pose", force), ph.gt_pose);
  std::cout << "phantom " << pc.n << "^3 voxel " << pc.voxel_mm << " mm seed " << seed << "\n";
  return 0;
}

int cmd_augment(const std::string& config, uint64_t seed, const std::string& out, bool force) {
  ConfigView cfg = load_config(config);
  const PhantomConfig pc = phantom_from_config(cfg);
  const std::string profile_name = cfg.get("profile", "regressor");
  const AugmentProfile profile =
      profile_name == "segmenter" ? AugmentProfile::segmenter : AugmentProfile::regressor;
  if (profile_name != "segmenter" && profile_name != "regressor")
    throw FormatError("profile must be segmenter or regressor");
  AugmentOptions opt;
  opt.rigid = cfg.get_int("stage.rigid", 1) != 0;
  opt.low_res = cfg.get_int("stage.low_res", 1) != 0;
  opt.bias = cfg.get_int("stage.bias", 1) != 0;
  opt.gamma = cfg.get_int("stage.gamma", 1) != 0;
  opt.noise = cfg.get_int("stage.noise", 1) != 0;
  opt.spin = cfg.get_int("stage.spin", 1) != 0;
  cfg.finish();

  const Phantom ph = generate_phantom(seed, pc);
  const AugmentResult res = augment(ph, seed + 1, profile, opt);

  Eigen::Matrix4d world = Eigen::Matrix4d::Identity() * pc.voxel_mm;
  world(3, 3) = 1.0;
  write_volume(out_path(out, "augmented.vol", force), res.volume, world);
  RigidPose gt;
  gt.rotation = res.gt_pose.rotation;
  gt.translation_mm = res.gt_pose.translation_mm;
  write_pose_file(out_path(out, "gt.pose", force), gt);

  std::ofstream rec(out_path(out, "record.txt", force));
  rec.precision(17);
  rec << "profile=" << profile_name << "\n";
  rec << "scale=" << res.record.scale << "\n";
  rec << "low_res_voxel_mm=" << res.record.low_res_voxel_mm << "\n";
  rec << "gamma=" << res.record.gamma << "\n";
  rec << "noise_sigma=" << res.record.noise_sigma << "\n";
  rec << "spin_applied=" << (res.record.spin_applied ? 1 : 0) << "\n";
  rec << "spin_sigma_mm=" << res.record.artifact.sigma_mm << "\n";
  std::cout << "augmented seed " << seed << " profile " << profile_name << "\n";
  return 0;
}

// Layer-by-layer kernel-basis check under the full 48-element octahedral
// group, then an end-to-end network residual under grid-exact rotations.
int cmd_equiv_check(const std::string& config, uint64_t seed, const std::string& out, bool force,
                    bool inject_fault) {
  ConfigView cfg = load_config(config);
  const NetworkSpec spec = spec_from_config(cfg);
  const int grid = static_cast<int>(cfg.get_int("equiv.grid", 8));
  cfg.finish();

  std::ostringstream report;
  const auto group = octahedral_group();
  bool failed = false;

  // Basis tensors for every (source, target) pair the network configuration can use.
  KernelBasisCache cache;
  std::vector<IrrepLabel> labels;
  for (int l = 0; l <= 2; ++l)
    for (Parity p : {Parity::even, Parity::odd}) labels.push_back(IrrepLabel{l, p});
  bool fault_pending = inject_fault;
  for (size_t li = 0; li < spec.levels.size(); ++li) {
    const int support = spec.levels[li].kernel;
    const int level = radial_level_for_support(support);
    for (const IrrepLabel& f : labels)
      for (const IrrepLabel& h : labels) {
        const KernelBasis& basis = cache.get(f, h, support, level);
        for (const BasisTensor& t : basis.tensors) {
          std::vector<MatX> values = t.values;
          if (fault_pending && support >= 3) {
            // Corrupt one off-center voxel of the first tensor we visit.
            values[static_cast<size_t>(KernelBasis::voxel_index(support, 1, 0, 0))].array() +=
                0.37;
            fault_pending = false;
          }
          double worst = 0.0;
          for (const auto& g : group) {
            const MatX rf = irrep_matrix(f, g);
            const MatX rh = irrep_matrix(h, g);
            const Mat3 gm = g.matrix;
            const int hw = support / 2;
            for (int dz = -hw; dz <= hw; ++dz)
              for (int dy = -hw; dy <= hw; ++dy)
                for (int dx = -hw; dx <= hw; ++dx) {
                  const Vec3 src = gm.transpose() * Vec3(dx, dy, dz);
                  const int sx = static_cast<int>(std::lround(src.x()));
                  const int sy = static_cast<int>(std::lround(src.y()));
                  const int sz = static_cast<int>(std::lround(src.z()));
                  const MatX& kx =
                      values[static_cast<size_t>(KernelBasis::voxel_index(support, dx, dy, dz))];
                  const MatX& ks =
                      values[static_cast<size_t>(KernelBasis::voxel_index(support, sx, sy, sz))];
                  worst = std::max(worst, (rh * ks * rf.transpose() - kx).cwiseAbs().maxCoeff());
                }
          }
          std::ostringstream name;
          name << "level" << (li + 1) << " " << f.order
               << (f.parity == Parity::even ? "e" : "o") << "->" << h.order
               << (h.parity == Parity::even ? "e" : "o") << " j=" << t.j << " m=" << t.m_index;
          const bool ok = worst < 1e-10;
          if (!ok) failed = true;
          report << name.str() << " residual " << worst << (ok ? " PASS" : " FAIL") << "\n";
        }
      }
  }

  // End-to-end: grid-exact transforms commute with the whole network.
  const Network net(spec);
  const VecX params = net.init_parameters(seed);
  RepSpec scalar;
  scalar.blocks.push_back({1, IrrepLabel{0, Parity::even}});
  IrrepField input(grid, grid, grid, scalar, 3.0);
  Rng rng(seed + 1);
  for (int i = 0; i < input.voxels(); ++i) input.data(0, i) = uniform_in(rng, -1.0, 1.0);

  const VecX base = net.forward_raw(input, params);
  const RepSpec hrep = head_rep(spec.head_mode);
  double worst_proper = 0.0, worst_improper = 0.0;
  for (const auto& g : group) {
    const IrrepField fin = transform_field(input, g);
    const VecX got = net.forward_raw(fin, params);
    const VecX expect = rep_matrix(hrep, g) * base;
    const double rel = (got - expect).norm() / base.norm();
    (g.proper() ? worst_proper : worst_improper) = std::max(
        g.proper() ? worst_proper : worst_improper, rel);
  }
  report << "end-to-end proper max relative residual " << worst_proper << "\n";
  report << "end-to-end improper max relative residual " << worst_improper << "\n";
  if (worst_proper > 1e-6 || worst_improper > 1e-6) failed = true;

  std::cout << report.str();
  if (!out.empty()) {
    std::ofstream f(out_path(out, "report.txt", force));
    f << report.str();
  }
  return failed ? 1 : 0;
}

int cmd_train(const std::string& config, uint64_t seed, const std::string& out, bool force) {
  ConfigView cfg = load_config(config);
  const NetworkSpec spec = spec_from_config(cfg);
  const PhantomConfig pc = phantom_from_config(cfg);
  TrainConfig tc;
  tc.steps = static_cast<int>(cfg.get_int("train.steps", tc.steps));
  tc.learning_rate = cfg.get_double("train.lr", tc.learning_rate);
  tc.beta = cfg.get_double("train.beta", tc.beta);
  tc.clip_norm = cfg.get_double("train.clip", tc.clip_norm);
  tc.decay_every = static_cast<int>(cfg.get_int("train.decay_every", tc.decay_every));
  tc.decay_factor = cfg.get_double("train.decay_factor", tc.decay_factor);
  const int count = static_cast<int>(cfg.get_int("train.phantoms", 8));
  cfg.finish();
  tc.seed = seed;

  const auto data = make_rotation_dataset(seed, count, pc);
  std::vector<TrainSample> samples;
  for (const auto& d : data) samples.push_back(d.sample);

  const Network net(spec);
  const TrainResult res = train_toy(net, samples, tc);
  write_checkpoint(out_path(out, "checkpoint.bin", force), spec, res.params, seed);
  std::ofstream log(out_path(out, "train.txt", force));
  log.precision(17);
  log << "initial_mean_loss=" << res.initial_mean_loss << "\n";
  log << "final_mean_loss=" << res.final_mean_loss << "\n";
  std::cout << "train loss " << res.initial_mean_loss << " -> " << res.final_mean_loss << "\n";
  return 0;
}

int cmd_eval(const std::string& config, uint64_t seed, const std::string& out, bool force) {
  ConfigView cfg = load_config(config);
  const NetworkSpec spec = spec_from_config(cfg);
  const PhantomConfig pc = phantom_from_config(cfg);
  const int count = static_cast<int>(cfg.get_int("train.phantoms", 8));
  const std::string estimator = cfg.get("eval.estimator", "network");
  const std::string ckpt = cfg.get("eval.checkpoint", "");
  cfg.finish();
  if (estimator != "network" && estimator != "oracle")
    throw FormatError("eval.estimator must be network or oracle");
  if (estimator == "network" && ckpt.empty())
    throw ValidationError("eval.estimator=network requires eval.checkpoint");

  const auto data = make_rotation_dataset(seed, count, pc);
  std::unique_ptr<Network> net;
  VecX params;
  if (estimator == "network") {
    net = std::make_unique<Network>(spec);
    params = read_checkpoint(ckpt, spec);
  }

  std::ofstream rec(out_path(out, "metrics.txt", force));
  rec.precision(10);
  double total_deg = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    Rotation pred;
    if (estimator == "oracle") {
      pred = data[i].gt_rotation;
    } else {
      pred = project_to_rotation(net->forward(data[i].sample.volume, params));
    }
    const double err_deg =
        geodesic_distance(pred, data[i].gt_rotation) * 180.0 / std::numbers::pi;
    total_deg += err_deg;
    rec << i << " rot_error_deg " << err_deg << "\n";
  }
  const double mean_deg = total_deg / static_cast<double>(data.size());
  rec << "mean rot_error_deg " << mean_deg << "\n";
  std::cout << "mean rotation error " << mean_deg << " deg over " << data.size() << " samples\n";
  return 0;
}

int cmd_simulate_stacks(const std::string& config, uint64_t seed, const std::string& out,
                        bool force) {
  ConfigView cfg = load_config(config);
  const PhantomConfig pc = phantom_from_config(cfg);
  const int num_seeds = static_cast<int>(cfg.get_int("sim.seeds", 10));
  const int slices = static_cast<int>(cfg.get_int("sim.slices", 25));
  MotionProfile prof;
  prof.rot_deg_per_step = cfg.get_double("sim.rot_deg", 5.0);
  prof.trans_mm_per_step = cfg.get_double("sim.trans_mm", 2.0);
  cfg.finish();

  const OccupancyGrid occ = generate_phantom(seed, pc).occupancy;
  std::ofstream rec(out_path(out, "records.txt", force));
  rec.precision(10);
  for (int s = 0; s < num_seeds; ++s) {
    const MotionTrajectory traj = synth_trajectory(seed + static_cast<uint64_t>(s), prof, slices);
    for (StackOrientation o :
         {StackOrientation::sagittal, StackOrientation::coronal, StackOrientation::axial}) {
      // Both estimators side by side per line for direct comparison.
      const SimRecord a = simulate_stack(occ, o, slices, traj, Estimator::oracle);
      const SimRecord b = simulate_stack(occ, o, slices, traj, Estimator::motion_blind);
      rec << orientation_name(o) << ' ' << traj.seed << " oracle " << a.gap << ' '
          << a.irregularity << ' ' << a.mean_obliqueness_deg << ' ' << a.mean_offset_mm
          << " motion_blind " << b.gap << ' ' << b.irregularity << ' ' << b.mean_obliqueness_deg
          << ' ' << b.mean_offset_mm << "\n";
    }
  }
  std::cout << "simulated " << num_seeds << " seeds x 3 orientations, " << slices
            << " slices each\n";
  return 0;
}

int cmd_serve(const std::string& config, uint64_t seed, const std::string& out, bool force) {
  (void)out;
  (void)force;
  ConfigView cfg = load_config(config);
  const NetworkSpec spec = spec_from_config(cfg);
  const uint16_t port = static_cast<uint16_t>(cfg.get_int("serve.port", 38400));
  ServeOptions so;
  so.deadline_ms = cfg.get_double("serve.deadline_ms", so.deadline_ms);
  const int slices = static_cast<int>(cfg.get_int("plan.slices", 25));
  const StackOrientation orient = orientation_from_string(cfg.get("plan.orientation", "axial"));
  const std::string estimator_name = cfg.get("serve.estimator", "identity");
  const std::string ckpt = cfg.get("serve.checkpoint", "");
  cfg.finish();

  ServeEstimator est;
  std::shared_ptr<Network> net;
  VecX params;
  if (estimator_name == "identity") {
    est = [](uint32_t, const VolumeFile&) { return RigidPose{}; };
  } else if (estimator_name == "network") {
    if (ckpt.empty()) throw ValidationError("serve.estimator=network requires serve.checkpoint");
    net = std::make_shared<Network>(spec);
    params = read_checkpoint(ckpt, spec);
    est = [net, params](uint32_t, const VolumeFile& vf) {
      RigidPose pose;
      pose.rotation = project_to_rotation(net->forward(vf.field, params));
      // Translation from the intensity centroid relative to the grid center.
      Vec3 centroid = Vec3::Zero();
      double mass = 0.0;
      for (int z = 0; z < vf.field.nz; ++z)
        for (int y = 0; y < vf.field.ny; ++y)
          for (int x = 0; x < vf.field.nx; ++x) {
            const double v = std::max(vf.field.data(0, vf.field.index(x, y, z)), 0.0);
            centroid += v * Vec3(x, y, z);
            mass += v;
          }
      if (mass > 0.0)
        pose.translation_mm = (centroid / mass - vf.field.center()) * vf.field.voxel_mm +
                              vf.world.topRightCorner<3, 1>();
      return pose;
    };
  } else {
    throw FormatError("serve.estimator must be identity or network");
  }

  const SlicePlan plan = make_slice_plan(orient, slices);
  const int listen_fd = tcp_listen(port);
  std::cout << "listening on 127.0.0.1:" << port << "\n";
  const int fd = tcp_accept(listen_fd);
  const ServeStats stats = serve(fd, est, plan, so);
  ::close(fd);
  ::close(listen_fd);
  std::cout << "served " << stats.messages << " messages, " << stats.fallbacks << " fallbacks, "
            << stats.protocol_errors << " protocol errors (seed " << seed << ")\n";
  return 0;
}

int cmd_mock_scan(const std::string& config, uint64_t seed, const std::string& out, bool force) {
  ConfigView cfg = load_config(config);
  const PhantomConfig pc = phantom_from_config(cfg);
  const uint16_t port = static_cast<uint16_t>(cfg.get_int("scan.port", 38400));
  const int slices = static_cast<int>(cfg.get_int("plan.slices", 25));
  const StackOrientation orient = orientation_from_string(cfg.get("plan.orientation", "axial"));
  MotionProfile prof;
  prof.rot_deg_per_step = cfg.get_double("scan.rot_deg", 0.0);
  prof.trans_mm_per_step = cfg.get_double("scan.trans_mm", 0.0);
  ScanOptions sc;
  sc.navigator_voxel_mm = cfg.get_double("scan.voxel_mm", sc.navigator_voxel_mm);
  sc.deadline_ms = cfg.get_double("scan.deadline_ms", sc.deadline_ms);
  cfg.finish();

  const Phantom ph = generate_phantom(seed, pc);
  const MotionTrajectory traj = synth_trajectory(seed, prof, slices);
  const SlicePlan plan = make_slice_plan(orient, slices);
  const int fd = tcp_connect(port);
  std::vector<ScanRecord> log;
  try {
    mock_scanner(fd, ph, traj, plan, log, sc);
  } catch (...) {
    std::ofstream f(out_path(out, "scan_log.txt", force));
    for (const auto& r : log) f << format_record(r) << "\n";
    ::close(fd);
    throw;
  }
  ::close(fd);
  std::ofstream f(out_path(out, "scan_log.txt", force));
  for (const auto& r : log) f << format_record(r) << "\n";
  std::cout << "scanned " << log.size() << " slices\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equivariant pose estimation workflows"};
  app.require_subcommand(1);

  std::string config, out;
  uint64_t seed = 0;
  bool force = false, inject_fault = false;
  bool seed_given = false;
  app.add_option("--config", config, "key=value config file");
  app.add_option("--seed", seed, "rng seed (required for stochastic subcommands)")
      ->each([&](const std::string&) { seed_given = true; });
  app.add_option("--out", out, "output directory");
  app.add_flag("--force", force, "overwrite existing outputs");
  app.add_flag("--inject-fault", inject_fault, "corrupt one kernel tensor (test only)");

  auto* gen = app.add_subcommand("gen-phantom", "generate a synthetic head volume");
  auto* aug = app.add_subcommand("augment", "apply the training augmentation stack");
  auto* equiv = app.add_subcommand("equiv-check", "verify layer and network equivariance");
  auto* train = app.add_subcommand("train", "toy SGD training on synthetic phantoms");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic set");
  auto* sim = app.add_subcommand("simulate-stacks", "slice prescription simulation study");
  auto* serve_cmd = app.add_subcommand("serve", "pose server on a local TCP port");
  auto* scan = app.add_subcommand("mock-scan", "scanner simulator driving a pose server");
  for (auto* sub : {gen, aug, equiv, train, eval, sim, serve_cmd, scan}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    // Every subcommand draws random numbers somewhere; demand an explicit seed.
    if (!seed_given) throw ValidationError("missing required --seed");
    if (gen->parsed()) return cmd_gen_phantom(config, seed, out, force);
    if (aug->parsed()) return cmd_augment(config, seed, out, force);
    if (equiv->parsed()) return cmd_equiv_check(config, seed, out, force, inject_fault);
    if (train->parsed()) return cmd_train(config, seed, out, force);
    if (eval->parsed()) return cmd_eval(config, seed, out, force);
    if (sim->parsed()) return cmd_simulate_stacks(config, seed, out, force);
    if (serve_cmd->parsed()) return cmd_serve(config, seed, out, force);
    if (scan->parsed()) return cmd_mock_scan(config, seed, out, force);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
