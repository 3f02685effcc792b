#pragma once

// Interleaved acquisition loop over a local stream socket: a mock scanner
// sends one navigator volume per slice, the pose server replies with the next
// plane prescription and a field-of-view shift within a hard latency budget.
// Frames are length-prefixed binary; the protocol is strictly serial with one
// request in flight.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#include <arpa/inet.h>
#include <netinet/in.h>

#include "e3pose/common.hpp"
#include "e3pose/slicesim.hpp"
#include "e3pose/volume.hpp"

namespace e3pose {

inline constexpr uint8_t kProtocolVersion = 1;

enum class FrameType : uint8_t {
  navigator = 1,
  prescription = 2,
  protocol_error = 3,
  end_of_stream = 4,
};

// ---------------------------------------------------------------------------
// Frame transport: 4-byte little-endian length (type byte + payload), 1-byte
// type, payload.

namespace detail {

inline void write_exact(int fd, const void* buf, size_t len) {
  const char* p = static_cast<const char*>(buf);
  while (len > 0) {
    // MSG_NOSIGNAL turns a peer hangup into an error instead of SIGPIPE.
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n <= 0) throw TransportError("socket write failed");
    p += n;
    len -= static_cast<size_t>(n);
  }
}

inline void read_exact(int fd, void* buf, size_t len) {
  char* p = static_cast<char*>(buf);
  while (len > 0) {
    const ssize_t n = ::read(fd, p, len);
    if (n == 0) throw TransportError("connection closed mid-frame");
    if (n < 0) throw TransportError("socket read failed");
    p += n;
    len -= static_cast<size_t>(n);
  }
}

// Blocks until the fd is readable; used by the scanner to bound the wait for
// a reply.
inline void wait_readable(int fd, int timeout_ms) {
  pollfd pfd{fd, POLLIN, 0};
  const int r = ::poll(&pfd, 1, timeout_ms);
  if (r == 0) throw TransportError("timed out waiting for reply after " +
                                   std::to_string(timeout_ms) + " ms");
  if (r < 0) throw TransportError("poll failed");
}

template <typename T>
void append_pod(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T consume_pod(const std::string& in, size_t& off) {
  if (off + sizeof(T) > in.size()) throw FormatError("frame payload truncated");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

struct Frame {
  FrameType type = FrameType::end_of_stream;
  std::string payload;
};

inline void send_frame(int fd, FrameType type, const std::string& payload) {
  const uint32_t length = static_cast<uint32_t>(1 + payload.size());
  detail::write_exact(fd, &length, 4);
  const uint8_t t = static_cast<uint8_t>(type);
  detail::write_exact(fd, &t, 1);
  if (!payload.empty()) detail::write_exact(fd, payload.data(), payload.size());
}

inline Frame recv_frame(int fd) {
  uint32_t length = 0;
  detail::read_exact(fd, &length, 4);
  if (length < 1) throw FormatError("frame length must cover the type byte");
  Frame f;
  uint8_t t = 0;
  detail::read_exact(fd, &t, 1);
  f.type = static_cast<FrameType>(t);
  f.payload.resize(length - 1);
  if (length > 1) detail::read_exact(fd, f.payload.data(), length - 1);
  return f;
}

// ---------------------------------------------------------------------------
// Messages.

struct NavigatorMessage {
  uint32_t k = 0;
  double timestamp_s = 0.0;
  VolumeFile volume;
};

enum class PrescriptionStatus : uint8_t { ok = 0, fallback = 1 };

struct PrescriptionMessage {
  uint32_t k = 0;
  RigidPose plane;      // prescribed imaging plane, world frame
  Vec3 fov_shift_mm = Vec3::Zero();
  PrescriptionStatus status = PrescriptionStatus::ok;
  double compute_ms = 0.0;
};

inline std::string encode_navigator(const NavigatorMessage& m) {
  std::string out;
  detail::append_pod(out, kProtocolVersion);
  detail::append_pod(out, m.k);
  detail::append_pod(out, m.timestamp_s);
  std::ostringstream vol;
  write_volume(vol, m.volume.field, m.volume.world);
  out += vol.str();
  return out;
}

inline NavigatorMessage decode_navigator(const std::string& payload) {
  size_t off = 0;
  if (detail::consume_pod<uint8_t>(payload, off) != kProtocolVersion)
    throw FormatError("unsupported protocol version");
  NavigatorMessage m;
  m.k = detail::consume_pod<uint32_t>(payload, off);
  m.timestamp_s = detail::consume_pod<double>(payload, off);
  std::istringstream vol(payload.substr(off));
  m.volume = read_volume(vol);
  return m;
}

inline std::string encode_prescription(const PrescriptionMessage& m) {
  std::string out;
  detail::append_pod(out, kProtocolVersion);
  detail::append_pod(out, m.k);
  const Mat3 r = m.plane.rotation.matrix();
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) detail::append_pod(out, r(row, col));
  for (int i = 0; i < 3; ++i) detail::append_pod(out, m.plane.translation_mm[i]);
  for (int i = 0; i < 3; ++i) detail::append_pod(out, m.fov_shift_mm[i]);
  detail::append_pod(out, static_cast<uint8_t>(m.status));
  detail::append_pod(out, m.compute_ms);
  return out;
}

inline PrescriptionMessage decode_prescription(const std::string& payload) {
  size_t off = 0;
  if (detail::consume_pod<uint8_t>(payload, off) != kProtocolVersion)
    throw FormatError("unsupported protocol version");
  PrescriptionMessage m;
  m.k = detail::consume_pod<uint32_t>(payload, off);
  Mat3 r;
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) r(row, col) = detail::consume_pod<double>(payload, off);
  m.plane.rotation = Rotation::from_matrix(r);
  for (int i = 0; i < 3; ++i) m.plane.translation_mm[i] = detail::consume_pod<double>(payload, off);
  for (int i = 0; i < 3; ++i) m.fov_shift_mm[i] = detail::consume_pod<double>(payload, off);
  m.status = static_cast<PrescriptionStatus>(detail::consume_pod<uint8_t>(payload, off));
  m.compute_ms = detail::consume_pod<double>(payload, off);
  return m;
}

// ---------------------------------------------------------------------------
// Server.

// Pose estimate from one navigator volume. Throwing marks the step as a
// fallback; the server keeps running.
using ServeEstimator = std::function<RigidPose(uint32_t k, const VolumeFile&)>;

struct ServeOptions {
  double deadline_ms = 1000.0;  // estimates slower than this fall back
};

struct ServeStats {
  int messages = 0;
  int fallbacks = 0;
  int protocol_errors = 0;
};

// Processes navigator frames until an end-of-stream frame, replying to each
// with a prescription. Estimation failures and deadline misses reuse the
// previous pose estimate (identity before the first success). Estimates are
// stateless otherwise: a success after a fallback is used unchanged.
inline ServeStats serve(int fd, const ServeEstimator& estimator, const SlicePlan& plan,
                        const ServeOptions& opts = {}) {
  if (!estimator) throw ValidationError("serve: estimator required");
  ServeStats stats;
  RigidPose previous;  // identity until the first successful estimate
  int64_t last_k = -1;
  for (;;) {
    const Frame frame = recv_frame(fd);
    if (frame.type == FrameType::end_of_stream) return stats;
    if (frame.type != FrameType::navigator) {
      ++stats.protocol_errors;
      send_frame(fd, FrameType::protocol_error, "unexpected frame type");
      continue;
    }
    NavigatorMessage nav;
    try {
      nav = decode_navigator(frame.payload);
    } catch (const std::exception& e) {
      ++stats.protocol_errors;
      send_frame(fd, FrameType::protocol_error, std::string("bad navigator: ") + e.what());
      continue;
    }
    if (static_cast<int64_t>(nav.k) <= last_k ||
        nav.k >= static_cast<uint32_t>(plan.num_slices())) {
      ++stats.protocol_errors;
      send_frame(fd, FrameType::protocol_error, "sequence index out of order or out of plan");
      continue;
    }
    last_k = nav.k;

    PrescriptionMessage reply;
    reply.k = nav.k;
    const auto start = std::chrono::steady_clock::now();
    RigidPose estimate;
    bool ok = true;
    try {
      estimate = estimator(nav.k, nav.volume);
    } catch (const std::exception&) {
      ok = false;
    }
    reply.compute_ms = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - start)
                           .count();
    if (!ok || reply.compute_ms > opts.deadline_ms) {
      reply.status = PrescriptionStatus::fallback;
      estimate = previous;
      ++stats.fallbacks;
    } else {
      previous = estimate;
    }
    reply.plane = compose(estimate, plan.targets[nav.k]);
    reply.fov_shift_mm = estimate.translation_mm;
    send_frame(fd, FrameType::prescription, encode_prescription(reply));
    ++stats.messages;
  }
}

// ---------------------------------------------------------------------------
// Mock scanner.

struct ScanRecord {
  uint32_t k = 0;
  PrescriptionStatus status = PrescriptionStatus::ok;
  double compute_ms = 0.0;
  double obliqueness_deg = 0.0;
  double offset_mm = 0.0;
  double com_to_fov_mm = 0.0;  // distance from the moved brain CoM to the FOV center
};

struct ScanOptions {
  double navigator_voxel_mm = 5.0;  // resampled resolution, 4..6 mm
  double artifact_sigma_mm = 3.0;
  double deadline_ms = 1000.0;  // reply wait is bounded by twice this
};

inline std::string format_record(const ScanRecord& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.k << ' ' << (r.status == PrescriptionStatus::ok ? "ok" : "fallback") << ' '
     << r.compute_ms << ' ' << r.obliqueness_deg << ' ' << r.offset_mm << ' ' << r.com_to_fov_mm;
  return os.str();
}

// Streams one navigator per slice: the phantom is rendered at the true pose
// relative to the current FOV, degraded to navigator resolution, shaded with
// spin history along the previously prescribed plane, and sent. Each reply's
// FOV shift recenters the next render. Appends to `log` as it goes so a
// transport failure leaves the partial log intact, then rethrows.
inline void mock_scanner(int fd, const Phantom& phantom, const MotionTrajectory& traj,
                         const SlicePlan& plan, std::vector<ScanRecord>& log,
                         const ScanOptions& opts = {}) {
  if (opts.navigator_voxel_mm < 4.0 || opts.navigator_voxel_mm > 6.0)
    throw ValidationError("mock_scanner: navigator voxel size must be in [4, 6] mm");
  if (static_cast<int>(traj.poses.size()) < plan.num_slices())
    throw ValidationError("mock_scanner: trajectory shorter than the slice plan");

  const Vec3 grid_center_mm = 0.5 * (phantom.volume.nx - 1) * phantom.volume.voxel_mm *
                              Vec3::Ones();
  const Vec3 com0 = com_translation(phantom.occupancy);
  Vec3 fov_shift = Vec3::Zero();
  bool have_previous_plane = false;
  RigidPose previous_plane;

  for (int k = 0; k < plan.num_slices(); ++k) {
    const RigidPose& pose = traj.poses[static_cast<size_t>(k)];

    // Render in the shifted FOV: the head content moves by the pose, the
    // grid moves by the accumulated FOV shift.
    IrrepField nav = detail::apply_rigid_scalar(phantom.volume, pose.rotation,
                                                pose.translation_mm - fov_shift, 1.0);
    nav = detail::simulate_low_res(nav, opts.navigator_voxel_mm);
    if (have_previous_plane) {
      ArtifactParams ap;
      ap.c_slice_mm = previous_plane.translation_mm - fov_shift;
      ap.n_slice = previous_plane.rotation.matrix().col(2);
      ap.sigma_mm = opts.artifact_sigma_mm;
      nav = spin_history(nav, ap);
    }

    NavigatorMessage msg;
    msg.k = static_cast<uint32_t>(k);
    msg.timestamp_s = std::chrono::duration<double>(
                          std::chrono::steady_clock::now().time_since_epoch())
                          .count();
    msg.volume.field = nav;
    msg.volume.world = Eigen::Matrix4d::Identity() * phantom.volume.voxel_mm;
    msg.volume.world(3, 3) = 1.0;
    msg.volume.world.topRightCorner<3, 1>() = fov_shift;
    send_frame(fd, FrameType::navigator, encode_navigator(msg));

    detail::wait_readable(fd, static_cast<int>(2.0 * opts.deadline_ms));
    const Frame frame = recv_frame(fd);
    if (frame.type == FrameType::protocol_error)
      throw ProtocolError("server rejected navigator " + std::to_string(k) + ": " +
                          frame.payload);
    if (frame.type != FrameType::prescription)
      throw TransportError("unexpected frame type in reply");
    const PrescriptionMessage reply = decode_prescription(frame.payload);
    if (reply.k != static_cast<uint32_t>(k))
      throw ProtocolError("reply sequence index mismatch");

    // Score the prescription against the target in the head frame at
    // acquisition time, as in the offline simulation.
    const RigidPose relative = compose(inverse(pose), reply.plane);
    ScanRecord rec;
    rec.k = reply.k;
    rec.status = reply.status;
    rec.compute_ms = reply.compute_ms;
    rec.obliqueness_deg =
        geodesic_distance(relative.rotation, plan.targets[static_cast<size_t>(k)].rotation) *
        180.0 / std::numbers::pi;
    rec.offset_mm =
        (relative.translation_mm - plan.targets[static_cast<size_t>(k)].translation_mm).norm();
    // The head content rotates about the grid center, so the moved CoM is
    // R(com0 - c) + c + t.
    const Vec3 com_k = pose.rotation * (com0 - grid_center_mm) + grid_center_mm +
                       pose.translation_mm;
    rec.com_to_fov_mm = (com_k - (grid_center_mm + fov_shift)).norm();
    log.push_back(rec);

    previous_plane = reply.plane;
    have_previous_plane = true;
    fov_shift = reply.fov_shift_mm;
  }
  send_frame(fd, FrameType::end_of_stream, "");
}

// ---------------------------------------------------------------------------
// TCP plumbing for the CLI; tests use socketpair instead.

inline int tcp_listen(uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("socket() failed");
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 || ::listen(fd, 1) < 0) {
    ::close(fd);
    throw TransportError("cannot listen on port " + std::to_string(port));
  }
  return fd;
}

inline int tcp_accept(int listen_fd) {
  const int fd = ::accept(listen_fd, nullptr, nullptr);
  if (fd < 0) throw TransportError("accept() failed");
  return fd;
}

inline int tcp_connect(uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    ::close(fd);
    throw TransportError("cannot connect to port " + std::to_string(port));
  }
  return fd;
}

}  // namespace e3pose
