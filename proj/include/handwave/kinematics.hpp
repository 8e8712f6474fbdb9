#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "handwave/errors.hpp"

namespace handwave {

constexpr int kJointsPerHand = 16;
constexpr int kQuatValuesPerHand = 64;
constexpr int kHandParamDim = 67;   // 64 quaternion values + 3 translation
constexpr int kFrameDim = 134;      // both hands

using Vec3 = std::array<double, 3>;

// w-first quaternion. The canonical representative of the double cover has
// w >= 0, and if w == 0 the first nonzero of (x, y, z) is >= 0; every
// function here returns canonical quaternions so packed frames round-trip
// bitwise.
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  bool operator==(const Quat&) const = default;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

inline Quat canonicalize(Quat q) {
  bool flip = false;
  if (q.w < 0.0) {
    flip = true;
  } else if (q.w == 0.0) {
    if (q.x != 0.0)
      flip = q.x < 0.0;
    else if (q.y != 0.0)
      flip = q.y < 0.0;
    else
      flip = q.z < 0.0;
  }
  if (flip) return {-q.w, -q.x, -q.y, -q.z};
  return q;
}

inline Quat quat_mul(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

// Rotation of a point, q p q*. Assumes unit norm.
inline Vec3 quat_rotate(const Quat& q, const Vec3& p) {
  // t = 2 (v × p); p' = p + w t + v × t
  const double tx = 2.0 * (q.y * p[2] - q.z * p[1]);
  const double ty = 2.0 * (q.z * p[0] - q.x * p[2]);
  const double tz = 2.0 * (q.x * p[1] - q.y * p[0]);
  return {p[0] + q.w * tx + q.y * tz - q.z * ty,
          p[1] + q.w * ty + q.z * tx - q.x * tz,
          p[2] + q.w * tz + q.x * ty - q.y * tx};
}

inline Quat axis_angle_to_quaternion(const Vec3& aa) {
  const double theta2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
  const double theta = std::sqrt(theta2);
  // sin(theta/2)/theta, with its series below the point where the quotient
  // loses precision
  const double s = theta > 1e-8 ? std::sin(0.5 * theta) / theta : 0.5 - theta2 / 48.0;
  return canonicalize({std::cos(0.5 * theta), s * aa[0], s * aa[1], s * aa[2]});
}

inline Vec3 quaternion_to_axis_angle(Quat q) {
  const double n = q.norm();
  if (n < 1e-9) throw NumericError("quaternion_to_axis_angle: zero-norm quaternion");
  q = canonicalize({q.w / n, q.x / n, q.y / n, q.z / n});
  const double vn = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
  const double theta = 2.0 * std::atan2(vn, q.w);
  // near the identity, theta/vn tends to 2/w
  const double scale = vn > 1e-9 ? theta / vn : 2.0 / q.w;
  return {scale * q.x, scale * q.y, scale * q.z};
}

struct HandParams {
  std::array<Quat, kJointsPerHand> joint_rotations{};
  Vec3 translation{0.0, 0.0, 0.0};

  bool operator==(const HandParams&) const = default;
};

// Both hands of one animation frame. Packed layout: left quaternions (16 x 4,
// w-first), left translation, right quaternions, right translation.
struct HandPoseFrame {
  HandParams left;
  HandParams right;

  bool operator==(const HandPoseFrame&) const = default;
};

namespace detail {

inline void pack_hand(const HandParams& h, double* out) {
  for (int j = 0; j < kJointsPerHand; ++j) {
    const Quat& q = h.joint_rotations[static_cast<std::size_t>(j)];
    out[4 * j + 0] = q.w;
    out[4 * j + 1] = q.x;
    out[4 * j + 2] = q.y;
    out[4 * j + 3] = q.z;
  }
  out[64] = h.translation[0];
  out[65] = h.translation[1];
  out[66] = h.translation[2];
}

inline HandParams unpack_hand(const double* v, const char* side, std::vector<std::string>* warnings) {
  HandParams h;
  for (int j = 0; j < kJointsPerHand; ++j) {
    Quat q{v[4 * j + 0], v[4 * j + 1], v[4 * j + 2], v[4 * j + 3]};
    const double n = q.norm();
    if (n < 1e-6)
      throw FormatError(std::string("unpack_frame: zero-norm quaternion in ") + side +
                        " hand joint " + std::to_string(j));
    if (std::abs(n - 1.0) > 1e-9) {
      if (std::abs(n - 1.0) > 1e-3 && warnings)
        warnings->push_back(std::string("renormalized ") + side + " hand joint " +
                            std::to_string(j) + " quaternion with norm " + std::to_string(n));
      q = {q.w / n, q.x / n, q.y / n, q.z / n};
    }
    h.joint_rotations[static_cast<std::size_t>(j)] = canonicalize(q);
  }
  h.translation = {v[64], v[65], v[66]};
  return h;
}

}  // namespace detail

inline std::array<double, kFrameDim> pack_frame(const HandPoseFrame& f) {
  std::array<double, kFrameDim> out{};
  detail::pack_hand(f.left, out.data());
  detail::pack_hand(f.right, out.data() + kHandParamDim);
  return out;
}

inline HandPoseFrame unpack_frame(std::span<const double> v,
                                  std::vector<std::string>* warnings = nullptr) {
  if (v.size() != kFrameDim)
    throw FormatError("unpack_frame: expected 134 values, got " + std::to_string(v.size()));
  HandPoseFrame f;
  f.left = detail::unpack_hand(v.data(), "left", warnings);
  f.right = detail::unpack_hand(v.data() + kHandParamDim, "right", warnings);
  return f;
}

// 16-joint tree: wrist root plus 5 fingers of 3 joints each. Offsets are the
// bone rest vectors in the parent frame.
struct HandSkeleton {
  std::array<int, kJointsPerHand> parent{};
  std::array<Vec3, kJointsPerHand> offset{};

  void validate() const {
    if (parent[0] != -1) throw FormatError("HandSkeleton: joint 0 must be the root (parent -1)");
    for (int i = 1; i < kJointsPerHand; ++i) {
      if (parent[static_cast<std::size_t>(i)] < 0 || parent[static_cast<std::size_t>(i)] >= i)
        throw FormatError("HandSkeleton: joint " + std::to_string(i) +
                          " must have a lower-indexed parent, got " +
                          std::to_string(parent[static_cast<std::size_t>(i)]));
    }
  }

  // Synthetic rest pose: fingers fan out in the x-y plane at
  // {-40, -20, 0, 20, 40} degrees, bone lengths 0.09 / 0.035 / 0.025.
  static HandSkeleton default_template() {
    HandSkeleton s;
    s.parent[0] = -1;
    s.offset[0] = {0.0, 0.0, 0.0};
    const double lengths[3] = {0.09, 0.035, 0.025};
    for (int f = 0; f < 5; ++f) {
      const double phi = (static_cast<double>(f) - 2.0) * 20.0 * 3.14159265358979323846 / 180.0;
      const Vec3 dir{std::sin(phi), std::cos(phi), 0.0};
      for (int k = 0; k < 3; ++k) {
        const int j = 1 + 3 * f + k;
        s.parent[static_cast<std::size_t>(j)] = (k == 0) ? 0 : j - 1;
        s.offset[static_cast<std::size_t>(j)] = {lengths[k] * dir[0], lengths[k] * dir[1],
                                                 lengths[k] * dir[2]};
      }
    }
    return s;
  }
};

inline std::array<Vec3, kJointsPerHand> forward_kinematics(const HandParams& h,
                                                           const HandSkeleton& s) {
  std::array<Vec3, kJointsPerHand> pos;
  std::array<Quat, kJointsPerHand> global;
  pos[0] = h.translation;
  global[0] = h.joint_rotations[0];
  for (int i = 1; i < kJointsPerHand; ++i) {
    const int p = s.parent[static_cast<std::size_t>(i)];
    const Vec3& off = s.offset[static_cast<std::size_t>(i)];
    const Vec3 r = quat_rotate(global[static_cast<std::size_t>(p)], off);
    const Vec3& pp = pos[static_cast<std::size_t>(p)];
    pos[static_cast<std::size_t>(i)] = {pp[0] + r[0], pp[1] + r[1], pp[2] + r[2]};
    global[static_cast<std::size_t>(i)] = quat_mul(global[static_cast<std::size_t>(p)],
                                                   h.joint_rotations[static_cast<std::size_t>(i)]);
  }
  return pos;
}

inline std::pair<Vec3, Vec3> hand_position(const HandPoseFrame& f) {
  return {f.left.translation, f.right.translation};
}

// Skeleton template file: one "joint <index> <parent> <ox> <oy> <oz>" line
// per joint, '#' comments and blank lines allowed.
inline HandSkeleton load_skeleton(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open skeleton file: " + path);
  HandSkeleton s;
  std::array<bool, kJointsPerHand> seen{};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    int idx = 0, parent = 0;
    double ox = 0, oy = 0, oz = 0;
    ls >> tag >> idx >> parent >> ox >> oy >> oz;
    if (ls.fail() || tag != "joint")
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 'joint <index> <parent> <ox> <oy> <oz>'");
    if (idx < 0 || idx >= kJointsPerHand)
      throw FormatError(path + ":" + std::to_string(lineno) + ": joint index " +
                        std::to_string(idx) + " out of range");
    if (seen[static_cast<std::size_t>(idx)])
      throw FormatError(path + ":" + std::to_string(lineno) + ": duplicate joint " +
                        std::to_string(idx));
    seen[static_cast<std::size_t>(idx)] = true;
    s.parent[static_cast<std::size_t>(idx)] = parent;
    s.offset[static_cast<std::size_t>(idx)] = {ox, oy, oz};
  }
  for (int i = 0; i < kJointsPerHand; ++i)
    if (!seen[static_cast<std::size_t>(i)])
      throw FormatError(path + ": missing joint " + std::to_string(i));
  s.validate();
  return s;
}

inline void save_skeleton(const std::string& path, const HandSkeleton& s) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write skeleton file: " + path);
  out << "# hand skeleton template: joint <index> <parent> <ox> <oy> <oz>\n";
  for (int i = 0; i < kJointsPerHand; ++i) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "joint %d %d %.17g %.17g %.17g\n", i,
                  s.parent[static_cast<std::size_t>(i)], s.offset[static_cast<std::size_t>(i)][0],
                  s.offset[static_cast<std::size_t>(i)][1], s.offset[static_cast<std::size_t>(i)][2]);
    out << buf;
  }
  if (!out) throw IoError("failed writing skeleton file: " + path);
}

}  // namespace handwave
