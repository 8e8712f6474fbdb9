#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "handwave/data.hpp"
#include "handwave/errors.hpp"
#include "handwave/kinematics.hpp"
#include "handwave/schedule.hpp"
#include "handwave/tape.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

struct KeypointTrack {
  NdArray coords;                   // [frames, 2K], values in [0, 1]
  std::vector<std::uint8_t> valid;  // per frame

  int length() const { return coords.rank() == 2 ? coords.shape[0] : 0; }
  int keypoint_count() const { return coords.rank() == 2 ? coords.shape[1] / 2 : 0; }

  void validate() const {
    if (coords.rank() != 2 || coords.shape[1] < 2 || coords.shape[1] % 2 != 0)
      throw ContractError("KeypointTrack: coords must be [frames, 2K], got " +
                          NdArray::shape_str(coords.shape));
    if (valid.size() != static_cast<std::size_t>(coords.shape[0]))
      throw ContractError("KeypointTrack: validity length mismatch");
    for (std::uint8_t b : valid)
      if (b > 1) throw ContractError("KeypointTrack: validity bits must be 0 or 1");
  }
};

// Sliding median over time, per coordinate. Window indices are clamped to
// the track (edge replication); invalid frames drop out of every window they
// are replicated into. A window with no valid entries leaves the frame
// marked invalid, coordinates copied through.
inline KeypointTrack temporal_median_filter(const KeypointTrack& track, int kernel) {
  track.validate();
  if (kernel < 3 || kernel % 2 == 0)
    throw ConfigError("temporal_median_filter: kernel must be odd and >= 3, got " +
                      std::to_string(kernel));
  const int frames = track.length();
  const int cols = track.coords.shape[1];
  const int radius = kernel / 2;
  KeypointTrack out;
  out.coords = track.coords;
  out.valid = track.valid;
  std::vector<double> window;
  window.reserve(static_cast<std::size_t>(kernel));
  for (int f = 0; f < frames; ++f) {
    bool any_valid = false;
    for (int w = -radius; w <= radius; ++w) {
      const int g = std::clamp(f + w, 0, frames - 1);
      any_valid = any_valid || track.valid[static_cast<std::size_t>(g)] == 1;
    }
    if (!any_valid) {
      out.valid[static_cast<std::size_t>(f)] = 0;
      continue;
    }
    // A window with data fills the frame even if the frame itself had no
    // detection; output validity reflects the window, not the input bit.
    out.valid[static_cast<std::size_t>(f)] = 1;
    for (int c = 0; c < cols; ++c) {
      window.clear();
      for (int w = -radius; w <= radius; ++w) {
        const int g = std::clamp(f + w, 0, frames - 1);
        if (track.valid[static_cast<std::size_t>(g)] == 1)
          window.push_back(track.coords.at(g, c));
      }
      std::sort(window.begin(), window.end());
      const std::size_t n = window.size();
      const double med =
          (n % 2 == 1) ? window[n / 2] : 0.5 * (window[n / 2 - 1] + window[n / 2]);
      out.coords.at(f, c) = std::clamp(med, 0.0, 1.0);
    }
  }
  return out;
}

// Channel-major raster grid with values in [0, 1].
struct Heatmap {
  int channels = 0, height = 0, width = 0;
  NdArray data;  // [channels, height, width]

  Heatmap() = default;
  Heatmap(int c, int h, int w) : channels(c), height(h), width(w), data({c, h, w}) {
    if (c < 1 || h < 1 || w < 1)
      throw ContractError("Heatmap: dimensions must be positive");
  }

  double& at(int c, int y, int x) {
    return data.data[(static_cast<std::size_t>(c) * static_cast<std::size_t>(height) +
                      static_cast<std::size_t>(y)) *
                         static_cast<std::size_t>(width) +
                     static_cast<std::size_t>(x)];
  }
  double at(int c, int y, int x) const {
    return data.data[(static_cast<std::size_t>(c) * static_cast<std::size_t>(height) +
                      static_cast<std::size_t>(y)) *
                         static_cast<std::size_t>(width) +
                     static_cast<std::size_t>(x)];
  }

  // One channel as a matrix, for image previews.
  NdArray channel(int c) const {
    if (c < 0 || c >= channels) throw ContractError("Heatmap: channel out of range");
    NdArray m({height, width});
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) m.at(y, x) = at(c, y, x);
    return m;
  }

  // Stacked [channels*height, width] matrix for FEAT-format export.
  NdArray stacked() const { return NdArray({channels * height, width}, data.data); }
};

namespace detail {

inline int snap_pixel(double u, int extent) {
  const int i = static_cast<int>(std::floor(u * static_cast<double>(extent)));
  return std::clamp(i, 0, extent - 1);
}

}  // namespace detail

// One Gaussian blob per keypoint, peak exactly 1 at the keypoint's pixel.
// Coordinates are in [0, 1]^2 with x across the width. Invalid keypoints
// leave their channel zero.
inline Heatmap rasterize_keypoints(std::span<const double> kp_xy, int height, int width,
                                   double sigma_px,
                                   std::span<const std::uint8_t> joint_valid = {}) {
  if (kp_xy.size() < 2 || kp_xy.size() % 2 != 0)
    throw ContractError("rasterize_keypoints: need an even, nonempty coordinate list");
  if (height < 1 || width < 1) throw ContractError("rasterize_keypoints: empty grid");
  if (sigma_px <= 0.0) throw ContractError("rasterize_keypoints: sigma must be positive");
  const int joints = static_cast<int>(kp_xy.size() / 2);
  if (!joint_valid.empty() && joint_valid.size() != static_cast<std::size_t>(joints))
    throw ContractError("rasterize_keypoints: validity length mismatch");
  Heatmap h(joints, height, width);
  const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
  for (int j = 0; j < joints; ++j) {
    if (!joint_valid.empty() && joint_valid[static_cast<std::size_t>(j)] == 0) continue;
    const int cx = detail::snap_pixel(kp_xy[static_cast<std::size_t>(2 * j)], width);
    const int cy = detail::snap_pixel(kp_xy[static_cast<std::size_t>(2 * j + 1)], height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dx = static_cast<double>(x - cx), dy = static_cast<double>(y - cy);
        h.at(j, y, x) = std::exp(-(dx * dx + dy * dy) * inv);
      }
  }
  return h;
}

namespace detail {

// Soft line segment: full intensity within the core, linear falloff over one
// pixel. Composited with max so crossings stay in [0, 1].
inline void draw_segment(Heatmap& h, int c, double x0, double y0, double x1, double y1) {
  const double half_width = 0.6;
  const double lo_x = std::min(x0, x1) - half_width - 1.0;
  const double hi_x = std::max(x0, x1) + half_width + 1.0;
  const double lo_y = std::min(y0, y1) - half_width - 1.0;
  const double hi_y = std::max(y0, y1) + half_width + 1.0;
  const int px0 = std::max(0, static_cast<int>(std::floor(lo_x)));
  const int px1 = std::min(h.width - 1, static_cast<int>(std::ceil(hi_x)));
  const int py0 = std::max(0, static_cast<int>(std::floor(lo_y)));
  const int py1 = std::min(h.height - 1, static_cast<int>(std::ceil(hi_y)));
  const double vx = x1 - x0, vy = y1 - y0;
  const double len_sq = vx * vx + vy * vy;
  for (int y = py0; y <= py1; ++y)
    for (int x = px0; x <= px1; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double t = len_sq > 0.0 ? ((px - x0) * vx + (py - y0) * vy) / len_sq : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double dx = px - (x0 + t * vx), dy = py - (y0 + t * vy);
      const double dist = std::sqrt(dx * dx + dy * dy);
      const double v = std::clamp(1.0 + half_width - dist, 0.0, 1.0);
      if (v > h.at(c, y, x)) h.at(c, y, x) = v;
    }
}

}  // namespace detail

// Orthographic xy projection of the 16 forward-kinematics joints per hand,
// drawn as soft line segments along the skeleton bones. Coordinates are in
// [0, 1]^2 view units mapped to pixels; one channel per hand.
inline Heatmap rasterize_hands(const HandPoseFrame& frame, int height, int width,
                               bool left_valid = true, bool right_valid = true,
                               const HandSkeleton& skeleton = HandSkeleton::default_template()) {
  if (height < 1 || width < 1) throw ContractError("rasterize_hands: empty grid");
  Heatmap h(2, height, width);
  const HandParams* hands[2] = {&frame.left, &frame.right};
  const bool valid[2] = {left_valid, right_valid};
  for (int c = 0; c < 2; ++c) {
    if (!valid[c]) continue;
    const std::array<Vec3, kJointsPerHand> pos = forward_kinematics(*hands[c], skeleton);
    for (int j = 1; j < kJointsPerHand; ++j) {
      const int p = skeleton.parent[static_cast<std::size_t>(j)];
      detail::draw_segment(h, c, pos[static_cast<std::size_t>(p)][0] * width,
                           pos[static_cast<std::size_t>(p)][1] * height,
                           pos[static_cast<std::size_t>(j)][0] * width,
                           pos[static_cast<std::size_t>(j)][1] * height);
    }
  }
  return h;
}

// score * base_embedding per hand, summed. Scores outside [0, 1] are clamped
// and reported through the warning sink.
inline std::vector<double> confidence_embedding(double left_score, double right_score,
                                                std::span<const double> left_base,
                                                std::span<const double> right_base,
                                                std::vector<std::string>* warnings = nullptr) {
  if (left_base.size() != right_base.size() || left_base.empty())
    throw ContractError("confidence_embedding: base embeddings must share a nonzero size");
  auto clamp_score = [warnings](double s, const char* side) {
    if (s < 0.0 || s > 1.0) {
      if (warnings)
        warnings->push_back(std::string("confidence score for ") + side + " hand clamped from " +
                            std::to_string(s));
      return std::clamp(s, 0.0, 1.0);
    }
    return s;
  };
  const double ls = clamp_score(left_score, "left");
  const double rs = clamp_score(right_score, "right");
  std::vector<double> out(left_base.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = ls * left_base[i] + rs * right_base[i];
  return out;
}

// Root-mean-square gap between the reference heatmap and the predictor's
// heatmap of the one-step denoised latent. Differentiable through both the
// predictor and the x0 estimate, so noise-prediction gradients flow.
inline NodeId pose_discriminator_loss(Tape& tape, NodeId z_t, NodeId eps_hat, int t,
                                      const NoiseSchedule& sched, const Heatmap& gt,
                                      const std::function<NodeId(Tape&, NodeId)>& predictor) {
  if (!predictor) throw ContractError("pose_discriminator_loss: predictor is empty");
  const double ab = sched.alpha_bar_at(t);
  if (ab < 1e-12)
    throw NumericError("pose_discriminator_loss: alpha_bar too small to invert at t=" +
                       std::to_string(t));
  const NodeId scaled_eps = tape.scale(eps_hat, std::sqrt(1.0 - ab));
  const NodeId z0 = tape.scale(tape.sub(z_t, scaled_eps), 1.0 / std::sqrt(ab));
  const NodeId predicted = predictor(tape, z0);
  const NodeId target = tape.leaf(gt.data);
  return tape.sqrt_op(tape.mse(predicted, target));
}

// FEAT-format export: channels stacked down the rows.
inline void save_heatmap(const std::string& path, const Heatmap& h) {
  save_feat(path, h.stacked(), 0.0);
}

inline Heatmap load_heatmap(const std::string& path, int channels) {
  FeatFile f = load_feat(path);
  if (channels < 1 || f.mat.shape[0] % channels != 0)
    throw FormatError(path + ": row count " + std::to_string(f.mat.shape[0]) +
                      " is not a multiple of " + std::to_string(channels) + " channels");
  Heatmap h(channels, f.mat.shape[0] / channels, f.mat.shape[1]);
  h.data.data = f.mat.data;
  return h;
}

}  // namespace handwave
