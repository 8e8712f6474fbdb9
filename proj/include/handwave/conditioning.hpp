#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "handwave/data.hpp"
#include "handwave/errors.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

enum class Hand { kLeft, kRight };

// Soft bucket layout for the per-hand movement-amplitude signal. Activations
// use a triangular kernel, so the encoding is continuous and piecewise
// linear in the value.
struct BucketSpec {
  std::vector<double> centers;
  std::vector<double> radii;

  void validate() const {
    if (centers.empty() || centers.size() != radii.size())
      throw ConfigError("BucketSpec: centers and radii must be non-empty and equal length");
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (!(radii[i] > 0.0)) throw ConfigError("BucketSpec: radii must be positive");
      if (i && !(centers[i] > centers[i - 1]))
        throw ConfigError("BucketSpec: centers must be strictly ascending");
    }
    // no dead zone between adjacent buckets
    for (std::size_t i = 0; i + 1 < centers.size(); ++i) {
      if (!(centers[i + 1] - centers[i] < radii[i] + radii[i + 1]))
        throw ConfigError("BucketSpec: gap between centers " + std::to_string(i) + " and " +
                          std::to_string(i + 1) + " is not covered by their radii");
    }
  }

  // Geometric centers spanning the heavy-tailed variance range. Radius is
  // the gap to the previous center (the narrower neighbor gap): with the
  // wider next-gap radius, triangles of later buckets would reach across
  // several earlier centers and push the activation sum past 2.
  static BucketSpec default_spec(int count = 8, double lo = 1e-4, double hi = 1e-1) {
    if (count < 2) throw ConfigError("BucketSpec: need at least 2 buckets");
    if (!(lo > 0.0) || !(hi > lo)) throw ConfigError("BucketSpec: need 0 < lo < hi");
    BucketSpec s;
    const double ratio = std::pow(hi / lo, 1.0 / static_cast<double>(count - 1));
    for (int i = 0; i < count; ++i) s.centers.push_back(lo * std::pow(ratio, i));
    s.radii.push_back(s.centers[1] - s.centers[0]);
    for (int i = 1; i < count; ++i) s.radii.push_back(s.centers[i] - s.centers[i - 1]);
    s.validate();
    return s;
  }
};

// Triangular-kernel activations. Out-of-range values clamp to the nearest
// end center first, so encode(below-range) == encode(centers.front()).
inline std::vector<double> bucket_encode(double value, const BucketSpec& spec) {
  if (!(value >= 0.0)) throw ContractError("bucket_encode: value must be >= 0");
  const double v = std::min(std::max(value, spec.centers.front()), spec.centers.back());
  std::vector<double> act(spec.centers.size());
  for (std::size_t i = 0; i < act.size(); ++i)
    act[i] = std::max(0.0, 1.0 - std::abs(v - spec.centers[i]) / spec.radii[i]);
  return act;
}

// Movement amplitude: variance of the hand translation across its valid
// frames, averaged over the 3 axes. Population variance; invalid frames
// never contribute.
inline double amplitude_of(const MotionClip& clip, Hand hand) {
  const std::vector<std::uint8_t>& valid = hand == Hand::kLeft ? clip.left_valid : clip.right_valid;
  const int base = hand == Hand::kLeft ? kQuatValuesPerHand : kHandParamDim + kQuatValuesPerHand;
  int n = 0;
  std::array<double, 3> sum{}, sum2{};
  for (int f = 0; f < clip.length(); ++f) {
    if (!valid[static_cast<std::size_t>(f)]) continue;
    ++n;
    const double* row = clip.motion.row(static_cast<std::size_t>(f));
    for (int a = 0; a < 3; ++a) {
      sum[static_cast<std::size_t>(a)] += row[base + a];
      sum2[static_cast<std::size_t>(a)] += row[base + a] * row[base + a];
    }
  }
  if (n < 2)
    throw ContractError("amplitude_of: need at least 2 valid frames, have " + std::to_string(n));
  double amp = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double mean = sum[static_cast<std::size_t>(a)] / n;
    amp += sum2[static_cast<std::size_t>(a)] / n - mean * mean;
  }
  return std::max(0.0, amp / 3.0);
}

// The 7 offset values as fed to the learned projection: identity rotation
// maps to the zero vector (w is stored as w - 1), so a trivial offset
// contributes only the projection bias.
inline std::array<double, 7> offset_input(const std::array<double, 7>& root_offset) {
  std::array<double, 7> v = root_offset;
  v[3] -= 1.0;
  return v;
}

// Per-frame per-hand validity for the current region: annotated and within
// clip length; everything at and beyond the clip length is padding.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> derive_hand_masks(
    const MotionClip& clip, int capacity) {
  if (capacity < clip.length())
    throw ContractError("derive_hand_masks: capacity " + std::to_string(capacity) +
                        " below clip length " + std::to_string(clip.length()));
  std::vector<std::uint8_t> left(static_cast<std::size_t>(capacity), 0);
  std::vector<std::uint8_t> right(static_cast<std::size_t>(capacity), 0);
  for (int f = 0; f < clip.length(); ++f) {
    left[static_cast<std::size_t>(f)] = clip.left_valid[static_cast<std::size_t>(f)];
    right[static_cast<std::size_t>(f)] = clip.right_valid[static_cast<std::size_t>(f)];
  }
  return {std::move(left), std::move(right)};
}

// Reference context ingestion: a single-row FEAT file, or none for
// unconditional generation.
inline std::optional<std::vector<double>> reference_context(const std::string& path) {
  if (path.empty()) return std::nullopt;
  FeatFile f = load_feat(path);
  if (f.mat.shape[0] != 1)
    throw FormatError(path + ": reference context must be a single row, got " +
                      std::to_string(f.mat.shape[0]));
  return f.mat.data;
}

// Everything the denoiser is conditioned on for one clip.
struct ConditionBundle {
  NdArray audio;                            // [capacity, audio_dim]
  std::vector<std::uint8_t> audio_valid;    // capacity
  int style = 0;
  double left_amp = 0.0;
  double right_amp = 0.0;
  bool left_amp_defined = false;            // undefined amplitude falls back to bucket 0
  bool right_amp_defined = false;
  std::array<double, 7> root_offset{0, 0, 0, 1, 0, 0, 0};
  std::optional<std::vector<double>> ref;
  std::vector<std::uint8_t> left_mask;      // capacity, current region validity
  std::vector<std::uint8_t> right_mask;

  void validate(int capacity, int audio_dim, int style_count, int ref_dim) const {
    if (audio.rank() != 2 || audio.shape[0] != capacity || audio.shape[1] != audio_dim)
      throw ContractError("ConditionBundle: audio shape " + NdArray::shape_str(audio.shape) +
                          " vs expected [" + std::to_string(capacity) + "," +
                          std::to_string(audio_dim) + "]");
    if (static_cast<int>(audio_valid.size()) != capacity ||
        static_cast<int>(left_mask.size()) != capacity ||
        static_cast<int>(right_mask.size()) != capacity)
      throw ContractError("ConditionBundle: mask lengths must equal capacity");
    if (style < 0 || style >= style_count)
      throw ContractError("ConditionBundle: style id " + std::to_string(style) +
                          " out of range for " + std::to_string(style_count) + " styles");
    if (left_amp < 0.0 || right_amp < 0.0)
      throw ContractError("ConditionBundle: amplitudes must be >= 0");
    if (ref && static_cast<int>(ref->size()) != ref_dim)
      throw ContractError("ConditionBundle: ref dim " + std::to_string(ref->size()) +
                          " vs expected " + std::to_string(ref_dim));
  }
};

// Assembles the bundle for one dataset entry. Amplitudes come from the clip
// itself; a hand with fewer than 2 valid frames gets the bucket-0 fallback.
inline ConditionBundle build_condition(const DatasetEntry& e, int capacity) {
  ConditionBundle b;
  b.audio = e.audio;
  b.audio_valid = e.audio_valid;
  b.style = e.clip.style;
  b.root_offset = e.clip.root_offset;
  b.ref = e.ref;
  auto [left, right] = derive_hand_masks(e.clip, capacity);
  b.left_mask = std::move(left);
  b.right_mask = std::move(right);
  try {
    b.left_amp = amplitude_of(e.clip, Hand::kLeft);
    b.left_amp_defined = true;
  } catch (const ContractError&) {
    b.left_amp_defined = false;
  }
  try {
    b.right_amp = amplitude_of(e.clip, Hand::kRight);
    b.right_amp_defined = true;
  } catch (const ContractError&) {
    b.right_amp_defined = false;
  }
  return b;
}

}  // namespace handwave
