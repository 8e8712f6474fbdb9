#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "handwave/config.hpp"
#include "handwave/data.hpp"
#include "handwave/errors.hpp"
#include "handwave/kinematics.hpp"
#include "handwave/rng.hpp"

namespace handwave {

// Keypoint slots within the 13-joint upper-body set that mirror the hand root
// translations.
inline constexpr int kLeftWristKp = 6;
inline constexpr int kRightWristKp = 7;

struct SynthConfig {
  int chains = 4;
  int clips_per_chain = 2;
  int frames_per_clip = 30;
  int fps = 25;
  int keypoint_count = 13;
  int audio_rate_mult = 2;  // audio fps = mult * motion fps

  void validate() const {
    if (chains < 1 || clips_per_chain < 1) throw ConfigError("synth: need at least one clip");
    if (frames_per_clip < 4) throw ConfigError("synth: clips need at least 4 frames");
    if (fps < 1) throw ConfigError("synth: fps must be positive");
    if (keypoint_count <= kRightWristKp)
      throw ConfigError("synth: keypoint count must cover both wrist slots");
    if (audio_rate_mult < 1) throw ConfigError("synth: audio rate multiplier must be positive");
  }
};

// Same text shape as the run config: "key value" lines, '#' comments, every
// key defaulted, unknown keys rejected.
inline SynthConfig parse_synth_spec(const std::string& text) {
  SynthConfig sc;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t sp = line.find_first_of(" \t");
    if (sp == std::string::npos)
      throw ConfigError("synth spec line " + std::to_string(line_no) + ": key '" + line +
                        "' has no value");
    const std::string key = line.substr(0, sp);
    const std::string value = detail::trim(line.substr(sp + 1));
    if (value.empty())
      throw ConfigError("synth spec line " + std::to_string(line_no) + ": key '" + key +
                        "' has no value");
    const long long v = detail::parse_int(value, key);
    if (v < 0 || v > 1000000000)
      throw ConfigError("synth spec: key '" + key + "' out of range: " + value);
    const int n = static_cast<int>(v);
    if (key == "chains") sc.chains = n;
    else if (key == "clips_per_chain") sc.clips_per_chain = n;
    else if (key == "frames_per_clip") sc.frames_per_clip = n;
    else if (key == "fps") sc.fps = n;
    else if (key == "keypoint_count") sc.keypoint_count = n;
    else if (key == "audio_rate_mult") sc.audio_rate_mult = n;
    else
      throw ConfigError("synth spec line " + std::to_string(line_no) + ": unknown key '" + key +
                        "'");
  }
  sc.validate();
  return sc;
}

inline SynthConfig load_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open synth spec: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_synth_spec(buf.str());
}

struct SynthClipBundle {
  MotionClip clip;
  FeatFile audio;
  std::string style_name;
  std::string chain;
  int chain_index = 0;
};

namespace detail {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline HandParams synth_hand(double root_angle, const Vec3& translation) {
  HandParams h;
  h.joint_rotations[0] = axis_angle_to_quaternion({0.0, 0.0, root_angle});
  for (int j = 1; j < kJointsPerHand; ++j) {
    double curl = 0.2 + 0.02 * static_cast<double>((j - 1) % 3);
    h.joint_rotations[j] = axis_angle_to_quaternion({curl, 0.0, 0.0});
  }
  h.translation = translation;
  return h;
}

}  // namespace detail

// Phase-locked toy data: every trajectory is a sinusoid of the chain's phase,
// so the audio channels (sin, cos, envelope, style) fully determine the
// motion. Translation speed is proportional to |cos|, hence its minima land
// exactly on the |sin|^8 envelope peaks; that ties audio beats to motion
// beats by construction. Chains continue their phase across clips.
inline std::vector<SynthClipBundle> synth_dataset(const SynthConfig& sc, std::uint64_t seed) {
  sc.validate();
  Rng rng(seed);
  const std::array<const char*, 3> style_names = {"speaking", "singing", "dance"};
  const std::array<double, 3> style_freq = {1.2, 0.8, 1.8};
  const int frames = sc.frames_per_clip;
  const int arows = frames * sc.audio_rate_mult;
  const double afps = static_cast<double>(sc.fps * sc.audio_rate_mult);

  std::vector<SynthClipBundle> out;
  for (int c = 0; c < sc.chains; ++c) {
    const int style = c % 3;
    const double amp_l = 0.35 + 0.45 * rng.uniform();
    const double amp_r = 0.35 + 0.45 * rng.uniform();
    const double phase = 2.0 * M_PI * rng.uniform();
    const double freq = style_freq[static_cast<std::size_t>(style)] * (0.9 + 0.2 * rng.uniform());
    std::vector<std::array<double, 2>> kp_base(static_cast<std::size_t>(sc.keypoint_count));
    std::vector<std::array<double, 2>> kp_dir(static_cast<std::size_t>(sc.keypoint_count));
    for (int j = 0; j < sc.keypoint_count; ++j) {
      kp_base[static_cast<std::size_t>(j)] = {0.25 + 0.5 * rng.uniform(),
                                              0.25 + 0.5 * rng.uniform()};
      double ang = 2.0 * M_PI * rng.uniform();
      kp_dir[static_cast<std::size_t>(j)] = {0.18 * std::cos(ang), 0.18 * std::sin(ang)};
    }
    const Vec3 base_l = {-0.15, 0.05, 0.10};
    const Vec3 base_r = {0.15, -0.05, 0.10};

    for (int k = 0; k < sc.clips_per_chain; ++k) {
      SynthClipBundle b;
      b.style_name = style_names[static_cast<std::size_t>(style)];
      b.chain = "c" + std::to_string(c);
      b.chain_index = k;
      MotionClip& clip = b.clip;
      clip.fps = sc.fps;
      clip.style = style;
      clip.root_offset = {0.05 * static_cast<double>(c), 0.0, 0.0, 1.0, 0.0, 0.0, 0.0};
      clip.motion = NdArray({frames, kFrameDim});
      clip.keypoints = NdArray({frames, 2 * sc.keypoint_count});
      clip.left_valid.assign(static_cast<std::size_t>(frames), 1);
      clip.right_valid.assign(static_cast<std::size_t>(frames), 1);
      clip.kp_valid.assign(static_cast<std::size_t>(frames), 1);

      for (int f = 0; f < frames; ++f) {
        double tau = static_cast<double>(k * frames + f) / static_cast<double>(sc.fps);
        double theta = 2.0 * M_PI * freq * tau + phase;
        double s = std::sin(theta);
        HandPoseFrame pose;
        pose.left = detail::synth_hand(
            0.4 * amp_l * s,
            {base_l[0] + amp_l * s, base_l[1] + 0.6 * amp_l * s, base_l[2] + 0.3 * amp_l * s});
        pose.right = detail::synth_hand(
            -0.4 * amp_r * s,
            {base_r[0] - amp_r * s, base_r[1] + 0.5 * amp_r * s, base_r[2] - 0.4 * amp_r * s});
        std::array<double, kFrameDim> row = pack_frame(pose);
        for (int d = 0; d < kFrameDim; ++d) clip.motion.at(f, d) = row[static_cast<std::size_t>(d)];

        for (int j = 0; j < sc.keypoint_count; ++j) {
          std::size_t js = static_cast<std::size_t>(j);
          double u, v;
          if (j == kLeftWristKp) {
            u = 0.5 + 0.3 * pose.left.translation[0];
            v = 0.5 + 0.3 * pose.left.translation[1];
          } else if (j == kRightWristKp) {
            u = 0.5 + 0.3 * pose.right.translation[0];
            v = 0.5 + 0.3 * pose.right.translation[1];
          } else {
            u = kp_base[js][0] + kp_dir[js][0] * s;
            v = kp_base[js][1] + kp_dir[js][1] * s;
          }
          clip.keypoints.at(f, 2 * j) = detail::clamp01(u);
          clip.keypoints.at(f, 2 * j + 1) = detail::clamp01(v);
        }
      }

      b.audio.fps = afps;
      b.audio.mat = NdArray({arows, 4});
      for (int r = 0; r < arows; ++r) {
        double tau = static_cast<double>(k * arows + r) / afps;
        double theta = 2.0 * M_PI * freq * tau + phase;
        double s = std::sin(theta);
        b.audio.mat.at(r, 0) = s;
        b.audio.mat.at(r, 1) = std::cos(theta);
        b.audio.mat.at(r, 2) = std::pow(std::abs(s), 8.0);
        b.audio.mat.at(r, 3) = static_cast<double>(style) / 2.0;
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

// Writes clips, audio features, and the manifest; returns the manifest path.
inline std::string write_synth_dataset(const std::string& dir, const SynthConfig& sc,
                                       std::uint64_t seed) {
  std::vector<SynthClipBundle> bundles = synth_dataset(sc, seed);
  std::filesystem::create_directories(dir);
  std::string manifest_path = dir + "/manifest.txt";
  std::ofstream mf(manifest_path);
  if (!mf) throw IoError("cannot write manifest: " + manifest_path);
  mf << "fps " << sc.fps << "\n";
  mf << "style speaking\nstyle singing\nstyle dance\n";
  for (const SynthClipBundle& b : bundles) {
    std::string stem = b.chain + "_" + std::to_string(b.chain_index);
    save_clip(dir + "/" + stem + ".mclip", b.clip);
    save_feat(dir + "/" + stem + ".feat", b.audio.mat, b.audio.fps);
    mf << "clip " << stem << ".mclip " << stem << ".feat " << b.style_name << " " << b.chain
       << " " << b.chain_index << "\n";
  }
  if (!mf.good()) throw IoError("failed writing manifest: " + manifest_path);
  return manifest_path;
}

}  // namespace handwave
