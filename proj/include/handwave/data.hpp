#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "handwave/errors.hpp"
#include "handwave/kinematics.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

namespace detail {

// Little-endian primitive IO with byte-offset tracking for error messages.
class BinReader {
 public:
  BinReader(std::istream& in, std::string name) : in_(in), name_(std::move(name)) {}

  std::uint8_t u8(const char* what) {
    std::uint8_t b;
    read(&b, 1, what);
    return b;
  }
  std::uint16_t u16(const char* what) {
    std::uint8_t b[2];
    read(b, 2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    std::uint8_t b[4];
    read(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    static_assert(sizeof(float) == 4);
    std::memcpy(&f, &bits, 4);
    return f;
  }
  void magic(const char* expect, const char* what) {
    char got[5] = {0, 0, 0, 0, 0};
    const std::size_t at = offset_;
    read(got, 4, what);
    if (std::string(got, 4) != expect)
      throw FormatError(name_ + ": bad magic, expected '" + expect + "' got '" +
                            std::string(got, 4) + "'",
                        at);
  }
  std::size_t offset() const { return offset_; }

  void expect_eof(const char* what) {
    char c;
    in_.read(&c, 1);
    if (!in_.eof())
      throw FormatError(name_ + ": trailing bytes after " + what, offset_);
  }

 private:
  void read(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw FormatError(name_ + ": truncated reading " + what, offset_);
    offset_ += n;
  }

  std::istream& in_;
  std::string name_;
  std::size_t offset_ = 0;
};

class BinWriter {
 public:
  explicit BinWriter(std::ostream& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v & 0xff));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  void magic(const char* m) { out_.write(m, 4); }

 private:
  std::ostream& out_;
};

}  // namespace detail

// One motion clip: hand parameters, the upper-body keypoint block, and the
// per-frame annotation validity bits. Keypoints are (u, v) pairs in [0,1]
// image coordinates, zeros with kp_valid=0 when unannotated.
struct MotionClip {
  int fps = 25;
  NdArray motion;     // [length, 134]
  NdArray keypoints;  // [length, 2 * keypoint_count]
  std::vector<std::uint8_t> left_valid;
  std::vector<std::uint8_t> right_valid;
  std::vector<std::uint8_t> kp_valid;
  int style = 0;
  std::array<double, 7> root_offset{0, 0, 0, 1, 0, 0, 0};  // translation + w-first quaternion
  std::string ref_path;  // reference context FEAT file; empty = none

  int length() const { return motion.rank() == 2 ? motion.shape[0] : 0; }
  int keypoint_count() const { return keypoints.rank() == 2 ? keypoints.shape[1] / 2 : 0; }

  void validate() const {
    if (motion.rank() != 2 || motion.shape[1] != kFrameDim)
      throw ContractError("MotionClip: motion must be [frames," + std::to_string(kFrameDim) +
                          "], got " + NdArray::shape_str(motion.shape));
    const int n = length();
    if (keypoints.rank() != 2 || keypoints.shape[0] != n || keypoints.shape[1] % 2 != 0)
      throw ContractError("MotionClip: keypoints shape " + NdArray::shape_str(keypoints.shape) +
                          " does not match " + std::to_string(n) + " frames");
    if (static_cast<int>(left_valid.size()) != n || static_cast<int>(right_valid.size()) != n ||
        static_cast<int>(kp_valid.size()) != n)
      throw ContractError("MotionClip: validity bit lengths do not match frame count");
    if (fps <= 0) throw ContractError("MotionClip: fps must be positive");
    if (n < 1) throw ContractError("MotionClip: empty clip");
    if (!motion.all_finite() || !keypoints.all_finite())
      throw ContractError("MotionClip: non-finite values");
  }
};

// MCLIP binary clip file.
inline void save_clip(const std::string& path, const MotionClip& c) {
  c.validate();
  if (c.style < 0 || c.style > 0xffff) throw ContractError("save_clip: style id out of u16 range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write clip file: " + path);
  detail::BinWriter w(out);
  w.magic("MCLP");
  w.u16(1);  // version
  w.u16(static_cast<std::uint16_t>(c.fps));
  w.u32(static_cast<std::uint32_t>(c.length()));
  w.u16(static_cast<std::uint16_t>(kFrameDim));
  w.u16(static_cast<std::uint16_t>(c.keypoint_count()));
  w.u16(static_cast<std::uint16_t>(c.style));
  for (double v : c.root_offset) w.f32(static_cast<float>(v));
  const int kp_cols = 2 * c.keypoint_count();
  for (int f = 0; f < c.length(); ++f) {
    const double* m = c.motion.row(static_cast<std::size_t>(f));
    for (int j = 0; j < kFrameDim; ++j) w.f32(static_cast<float>(m[j]));
    const double* k = kp_cols ? c.keypoints.row(static_cast<std::size_t>(f)) : nullptr;
    for (int j = 0; j < kp_cols; ++j) w.f32(static_cast<float>(k[j]));
    w.u8(c.left_valid[static_cast<std::size_t>(f)]);
    w.u8(c.right_valid[static_cast<std::size_t>(f)]);
    w.u8(c.kp_valid[static_cast<std::size_t>(f)]);
  }
  if (!out) throw IoError("failed writing clip file: " + path);
}

// Loads an MCLIP file. Quaternion slots get their double-cover sign
// canonicalized; a norm off by more than 1e-3 is renormalized with a warning
// (f32 storage noise stays untouched, keeping save-load bitwise on payload).
// capacity > 0 rejects clips longer than the model can hold.
inline MotionClip load_clip(const std::string& path, int capacity = 0,
                            std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open clip file: " + path);
  detail::BinReader r(in, path);
  r.magic("MCLP", "header magic");
  const std::uint16_t version = r.u16("version");
  if (version != 1)
    throw FormatError(path + ": unsupported version " + std::to_string(version), r.offset() - 2);
  MotionClip c;
  c.fps = r.u16("fps");
  if (c.fps == 0) throw FormatError(path + ": fps must be nonzero", r.offset() - 2);
  const std::uint32_t frames = r.u32("frame_count");
  const std::uint16_t motion_dim = r.u16("motion_dim");
  if (motion_dim != kFrameDim)
    throw FormatError(path + ": motion_dim " + std::to_string(motion_dim) + " unsupported (need " +
                          std::to_string(kFrameDim) + ")",
                      r.offset() - 2);
  const std::uint16_t kp_count = r.u16("keypoint_count");
  c.style = r.u16("style");
  for (double& v : c.root_offset) v = r.f32("root offset");
  if (frames == 0) throw FormatError(path + ": zero frames", 8);
  if (capacity > 0 && frames > static_cast<std::uint32_t>(capacity))
    throw FormatError(path + ": clip has " + std::to_string(frames) +
                          " frames, beyond capacity " + std::to_string(capacity) +
                          "; clips must be pre-split",
                      8);
  const int n = static_cast<int>(frames);
  c.motion = NdArray({n, kFrameDim});
  c.keypoints = NdArray({n, 2 * kp_count});
  c.left_valid.resize(frames);
  c.right_valid.resize(frames);
  c.kp_valid.resize(frames);
  for (int f = 0; f < n; ++f) {
    double* m = c.motion.row(static_cast<std::size_t>(f));
    for (int j = 0; j < kFrameDim; ++j) m[j] = r.f32("motion values");
    double* k = kp_count ? c.keypoints.row(static_cast<std::size_t>(f)) : nullptr;
    for (int j = 0; j < 2 * kp_count; ++j) k[j] = r.f32("keypoint values");
    auto bit = [&](const char* what) {
      const std::uint8_t b = r.u8(what);
      if (b > 1)
        throw FormatError(path + ": validity byte must be 0 or 1, got " + std::to_string(b),
                          r.offset() - 1);
      return b;
    };
    c.left_valid[static_cast<std::size_t>(f)] = bit("left validity");
    c.right_valid[static_cast<std::size_t>(f)] = bit("right validity");
    c.kp_valid[static_cast<std::size_t>(f)] = bit("keypoint validity");
    // canonicalize each quaternion slot in place
    for (int hand = 0; hand < 2; ++hand) {
      double* base = m + hand * kHandParamDim;
      for (int j = 0; j < kJointsPerHand; ++j) {
        Quat q{base[4 * j], base[4 * j + 1], base[4 * j + 2], base[4 * j + 3]};
        const double norm = q.norm();
        if (norm < 1e-6)
          throw FormatError(path + ": zero-norm quaternion at frame " + std::to_string(f) +
                                (hand ? " right" : " left") + " joint " + std::to_string(j),
                            r.offset());
        if (std::abs(norm - 1.0) > 1e-3) {
          if (warnings)
            warnings->push_back(path + ": renormalized frame " + std::to_string(f) +
                                (hand ? " right" : " left") + " joint " + std::to_string(j) +
                                " quaternion with norm " + std::to_string(norm));
          q = {q.w / norm, q.x / norm, q.y / norm, q.z / norm};
        }
        q = canonicalize(q);
        base[4 * j] = q.w;
        base[4 * j + 1] = q.x;
        base[4 * j + 2] = q.y;
        base[4 * j + 3] = q.z;
      }
    }
  }
  r.expect_eof("frame data");
  if (!c.motion.all_finite() || !c.keypoints.all_finite())
    throw FormatError(path + ": non-finite values in payload", 0);
  return c;
}

// FEAT matrix file, shared by audio feature tracks and reference context
// vectors.
struct FeatFile {
  NdArray mat;  // [rows, cols]
  double fps = 0.0;
};

inline void save_feat(const std::string& path, const NdArray& mat, double fps) {
  if (mat.rank() != 2) throw ContractError("save_feat: matrix must be rank 2");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file: " + path);
  detail::BinWriter w(out);
  w.magic("FEAT");
  w.u32(static_cast<std::uint32_t>(mat.shape[0]));
  w.u32(static_cast<std::uint32_t>(mat.shape[1]));
  w.f32(static_cast<float>(fps));
  for (double v : mat.data) w.f32(static_cast<float>(v));
  if (!out) throw IoError("failed writing feature file: " + path);
}

inline FeatFile load_feat(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file: " + path);
  detail::BinReader r(in, path);
  r.magic("FEAT", "header magic");
  const std::uint32_t rows = r.u32("row count");
  const std::uint32_t cols = r.u32("column count");
  FeatFile f;
  f.fps = r.f32("fps");
  if (rows == 0 || cols == 0) throw FormatError(path + ": empty feature matrix", 4);
  f.mat = NdArray({static_cast<int>(rows), static_cast<int>(cols)});
  for (double& v : f.mat.data) v = r.f32("feature values");
  r.expect_eof("feature data");
  if (!f.mat.all_finite()) throw FormatError(path + ": non-finite feature values", 0);
  return f;
}

// Resamples a feature track to the motion frame clock by linear
// interpolation and zero-pads to capacity. The validity bit is 0 wherever
// the motion-frame time falls outside the track (no extrapolation).
inline std::pair<NdArray, std::vector<std::uint8_t>> align_audio(const FeatFile& track,
                                                                 int motion_fps, int capacity) {
  if (track.mat.rank() != 2 || track.mat.shape[0] < 1)
    throw ContractError("align_audio: empty track");
  if (track.fps <= 0.0) throw ContractError("align_audio: track fps must be positive");
  if (motion_fps <= 0 || capacity <= 0)
    throw ContractError("align_audio: motion fps and capacity must be positive");
  const int rows = track.mat.shape[0], cols = track.mat.shape[1];
  NdArray out({capacity, cols});
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(capacity), 0);
  for (int i = 0; i < capacity; ++i) {
    const double pos = static_cast<double>(i) * track.fps / static_cast<double>(motion_fps);
    if (pos > static_cast<double>(rows - 1)) break;  // past the track: stay zero/invalid
    valid[static_cast<std::size_t>(i)] = 1;
    const int j0 = static_cast<int>(pos);
    const double frac = pos - static_cast<double>(j0);
    const double* a = track.mat.row(static_cast<std::size_t>(j0));
    double* o = out.row(static_cast<std::size_t>(i));
    if (frac == 0.0) {
      for (int j = 0; j < cols; ++j) o[j] = a[j];
    } else {
      const double* b = track.mat.row(static_cast<std::size_t>(j0 + 1));
      for (int j = 0; j < cols; ++j) o[j] = (1.0 - frac) * a[j] + frac * b[j];
    }
  }
  return {std::move(out), std::move(valid)};
}

// One manifest entry, loaded and aligned.
struct DatasetEntry {
  MotionClip clip;
  NdArray audio;                     // [capacity, audio_dim]
  std::vector<std::uint8_t> audio_valid;
  std::string style_name;
  std::string chain;
  int chain_index = 0;
  int prev = -1;                     // index of the previous clip in its chain
  std::optional<std::vector<double>> ref;  // loaded reference context vector
};

struct Dataset {
  int fps = 25;
  int capacity = 0;
  int audio_dim = 0;
  std::vector<std::string> style_names;
  std::vector<DatasetEntry> entries;

  int style_id(const std::string& name) const {
    for (std::size_t i = 0; i < style_names.size(); ++i)
      if (style_names[i] == name) return static_cast<int>(i);
    return -1;
  }
};

// Manifest text format, one directive per line ('#' starts a comment):
//   fps <n>
//   style <name>            (order assigns ids 0, 1, ...)
//   clip <clip_path> <audio_path> <style_name> <chain> <chain_index> [ref=<feat_path>]
// Paths are relative to the manifest's directory. chain_index values within a
// chain must be contiguous from 0; clip i's previous clip is (chain, i-1).
inline Dataset load_dataset(const std::string& manifest_path, int capacity,
                            std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest: " + manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  Dataset ds;
  ds.capacity = capacity;
  bool fps_seen = false;
  struct PendingClip {
    std::string clip_path, audio_path, style, chain, ref_path;
    int chain_index;
    int lineno;
  };
  std::vector<PendingClip> pending;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string directive;
    if (!(ls >> directive)) continue;
    const std::string where = manifest_path + ":" + std::to_string(lineno);
    if (directive == "fps") {
      int v = 0;
      if (!(ls >> v) || v <= 0) throw FormatError(where + ": fps needs a positive integer");
      ds.fps = v;
      fps_seen = true;
    } else if (directive == "style") {
      std::string name;
      if (!(ls >> name)) throw FormatError(where + ": style needs a name");
      if (ds.style_id(name) >= 0) throw FormatError(where + ": duplicate style '" + name + "'");
      ds.style_names.push_back(name);
    } else if (directive == "clip") {
      PendingClip p;
      p.lineno = lineno;
      std::string idx;
      if (!(ls >> p.clip_path >> p.audio_path >> p.style >> p.chain >> idx))
        throw FormatError(where +
                          ": expected 'clip <clip> <audio> <style> <chain> <index> [ref=<path>]'");
      try {
        p.chain_index = std::stoi(idx);
      } catch (const std::exception&) {
        throw FormatError(where + ": chain index '" + idx + "' is not an integer");
      }
      if (p.chain_index < 0) throw FormatError(where + ": chain index must be >= 0");
      std::string extra;
      while (ls >> extra) {
        if (extra.rfind("ref=", 0) == 0)
          p.ref_path = extra.substr(4);
        else
          throw FormatError(where + ": unknown clip attribute '" + extra + "'");
      }
      pending.push_back(std::move(p));
    } else {
      throw FormatError(where + ": unknown directive '" + directive + "'");
    }
  }
  if (!fps_seen) throw FormatError(manifest_path + ": missing fps directive");
  if (ds.style_names.empty()) throw FormatError(manifest_path + ": no styles declared");
  if (pending.empty()) throw FormatError(manifest_path + ": no clips listed");

  for (const PendingClip& p : pending) {
    const std::string where = manifest_path + ":" + std::to_string(p.lineno);
    DatasetEntry e;
    const int sid = ds.style_id(p.style);
    if (sid < 0) throw FormatError(where + ": unknown style '" + p.style + "'");
    e.style_name = p.style;
    e.chain = p.chain;
    e.chain_index = p.chain_index;
    e.clip = load_clip((base / p.clip_path).string(), capacity, warnings);
    if (e.clip.style != sid)
      throw FormatError(where + ": manifest style '" + p.style + "' (id " + std::to_string(sid) +
                        ") but clip stores style id " + std::to_string(e.clip.style));
    if (e.clip.fps != ds.fps)
      throw FormatError(where + ": clip fps " + std::to_string(e.clip.fps) +
                        " does not match manifest fps " + std::to_string(ds.fps));
    FeatFile audio = load_feat((base / p.audio_path).string());
    if (ds.audio_dim == 0)
      ds.audio_dim = audio.mat.shape[1];
    else if (audio.mat.shape[1] != ds.audio_dim)
      throw FormatError(where + ": audio dim " + std::to_string(audio.mat.shape[1]) +
                        " differs from earlier tracks (" + std::to_string(ds.audio_dim) + ")");
    auto [aligned, avalid] = align_audio(audio, ds.fps, capacity);
    e.audio = std::move(aligned);
    e.audio_valid = std::move(avalid);
    if (!p.ref_path.empty()) {
      FeatFile rf = load_feat((base / p.ref_path).string());
      if (rf.mat.shape[0] != 1)
        throw FormatError(where + ": reference context file must hold a single row, got " +
                          std::to_string(rf.mat.shape[0]));
      e.ref = rf.mat.data;
      e.clip.ref_path = p.ref_path;
    }
    ds.entries.push_back(std::move(e));
  }

  // resolve chain predecessors and require contiguous indices
  std::map<std::string, std::map<int, int>> chains;
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    DatasetEntry& e = ds.entries[i];
    auto& chain = chains[e.chain];
    if (!chain.emplace(e.chain_index, static_cast<int>(i)).second)
      throw FormatError(manifest_path + ": duplicate chain position " + e.chain + "/" +
                        std::to_string(e.chain_index));
  }
  for (const auto& [name, chain] : chains) {
    int expect = 0;
    for (const auto& [idx, entry] : chain) {
      if (idx != expect)
        throw FormatError(manifest_path + ": chain '" + name + "' is missing position " +
                          std::to_string(expect));
      ++expect;
      if (idx > 0) ds.entries[static_cast<std::size_t>(entry)].prev = chain.at(idx - 1);
    }
  }
  return ds;
}

// Binary PGM (P5) grayscale image. Values are clamped to [0, 1] and scaled
// to the 8-bit range.
inline void save_pgm(const std::string& path, const NdArray& img) {
  if (img.rank() != 2 || img.shape[0] < 1 || img.shape[1] < 1)
    throw ContractError("save_pgm: need a [height, width] matrix, got " +
                        NdArray::shape_str(img.shape));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path);
  out << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
  for (double v : img.data) {
    const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!out.good()) throw IoError("failed writing image: " + path);
}

}  // namespace handwave
