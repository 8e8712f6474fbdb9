#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "handwave/data.hpp"
#include "handwave/rng.hpp"
#include "test_util.hpp"

namespace hw = handwave;
namespace fs = std::filesystem;

namespace {

void patch_byte(const std::string& path, std::size_t offset, char value) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  ASSERT_TRUE(f.good());
  f.seekp(static_cast<std::streamoff>(offset));
  f.put(value);
}

void truncate_file(const std::string& path, std::size_t keep) {
  fs::resize_file(path, keep);
}

}  // namespace

TEST(ClipFile, SaveLoadBitwiseRoundTrip) {
  const std::string dir = testutil::scratch_dir("clipio");
  const std::string path = dir + "/clip.mclip";
  hw::Rng rng(4);
  hw::MotionClip c = testutil::make_random_clip(rng, 12, 5, 3);
  c.left_valid[2] = 0;
  c.kp_valid[7] = 0;
  hw::save_clip(path, c);
  std::vector<std::string> warnings;
  hw::MotionClip back = hw::load_clip(path, 0, &warnings);
  EXPECT_TRUE(warnings.empty());
  EXPECT_EQ(back.fps, c.fps);
  EXPECT_EQ(back.style, c.style);
  EXPECT_EQ(back.length(), 12);
  EXPECT_EQ(back.keypoint_count(), 5);
  EXPECT_EQ(hw::max_abs_diff(back.motion, c.motion), 0.0);
  EXPECT_EQ(hw::max_abs_diff(back.keypoints, c.keypoints), 0.0);
  EXPECT_EQ(back.left_valid, c.left_valid);
  EXPECT_EQ(back.right_valid, c.right_valid);
  EXPECT_EQ(back.kp_valid, c.kp_valid);
  for (int a = 0; a < 7; ++a) EXPECT_EQ(back.root_offset[a], c.root_offset[a]);
  // a second save of the loaded clip produces the identical file
  const std::string path2 = dir + "/clip2.mclip";
  hw::save_clip(path2, back);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
}

TEST(ClipFile, TruncationNamesTheMissingSection) {
  const std::string dir = testutil::scratch_dir("clipio");
  const std::string path = dir + "/trunc.mclip";
  hw::Rng rng(5);
  hw::save_clip(path, testutil::make_random_clip(rng, 4, 2));
  const auto full = fs::file_size(path);

  truncate_file(path, 10);  // inside the fixed header
  try {
    hw::load_clip(path);
    FAIL() << "expected FormatError";
  } catch (const hw::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }

  hw::save_clip(path, testutil::make_random_clip(rng, 4, 2));
  truncate_file(path, full - 20);  // inside the last frame
  try {
    hw::load_clip(path);
    FAIL() << "expected FormatError";
  } catch (const hw::FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("truncated"), std::string::npos);
    EXPECT_NE(msg.find("byte offset"), std::string::npos);
  }
}

TEST(ClipFile, HeaderValidation) {
  const std::string dir = testutil::scratch_dir("clipio");
  const std::string path = dir + "/bad.mclip";
  hw::Rng rng(6);
  hw::save_clip(path, testutil::make_random_clip(rng, 4, 2));
  patch_byte(path, 0, 'X');  // magic
  EXPECT_THROW(hw::load_clip(path), hw::FormatError);

  hw::save_clip(path, testutil::make_random_clip(rng, 4, 2));
  patch_byte(path, 4, 9);  // version
  EXPECT_THROW(hw::load_clip(path), hw::FormatError);

  hw::save_clip(path, testutil::make_random_clip(rng, 4, 2));
  EXPECT_THROW(hw::load_clip(path, 3), hw::FormatError);  // capacity below frame count
  EXPECT_NO_THROW(hw::load_clip(path, 4));
  EXPECT_THROW(hw::load_clip(dir + "/nonexistent.mclip"), hw::IoError);
}

TEST(ClipFile, ValidityByteMustBeBoolean) {
  const std::string dir = testutil::scratch_dir("clipio");
  const std::string path = dir + "/validity.mclip";
  hw::Rng rng(7);
  hw::MotionClip c = testutil::make_random_clip(rng, 2, 2);
  hw::save_clip(path, c);
  // header: magic 4 + version 2 + fps 2 + frames 4 + mdim 2 + kp 2 + style 2
  //         + offset 28 = 46; frame payload: 134*4 + 4*4 + 3 bytes
  const std::size_t first_validity = 46 + 134 * 4 + 4 * 4;
  patch_byte(path, first_validity, 2);
  try {
    hw::load_clip(path);
    FAIL() << "expected FormatError";
  } catch (const hw::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("validity"), std::string::npos);
  }
}

TEST(ClipFile, QuaternionPolicies) {
  const std::string dir = testutil::scratch_dir("clipio");
  const std::string path = dir + "/quat.mclip";
  hw::Rng rng(8);

  // non-canonical sign is flipped on load
  hw::MotionClip c = testutil::make_random_clip(rng, 3, 1);
  double* m = c.motion.row(1);
  for (int k = 0; k < 4; ++k) m[8 + k] = -m[8 + k];  // left joint 2
  hw::save_clip(path, c);
  hw::MotionClip back = hw::load_clip(path);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(back.motion.row(1)[8 + k], -m[8 + k]);

  // norm drift beyond 1e-3 is renormalized with a warning
  c = testutil::make_random_clip(rng, 3, 1);
  m = c.motion.row(0);
  for (int k = 0; k < 4; ++k) m[k] = testutil::to_f32(m[k] * 1.5);
  hw::save_clip(path, c);
  std::vector<std::string> warnings;
  back = hw::load_clip(path, 0, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("renormalized"), std::string::npos);
  double n = 0;
  for (int k = 0; k < 4; ++k) n += back.motion.row(0)[k] * back.motion.row(0)[k];
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-7);

  // all-zero quaternion slot is a hard error
  c = testutil::make_random_clip(rng, 3, 1);
  m = c.motion.row(2);
  for (int k = 0; k < 4; ++k) m[4 + k] = 0.0;
  hw::save_clip(path, c);
  EXPECT_THROW(hw::load_clip(path), hw::FormatError);
}

TEST(FeatFile, RoundTripAndErrors) {
  const std::string dir = testutil::scratch_dir("featio");
  const std::string path = dir + "/track.feat";
  hw::Rng rng(9);
  hw::NdArray mat({6, 3});
  for (double& v : mat.data) v = testutil::to_f32(rng.normal());
  hw::save_feat(path, mat, 50.0);
  hw::FeatFile f = hw::load_feat(path);
  EXPECT_EQ(f.fps, 50.0);
  EXPECT_EQ(hw::max_abs_diff(f.mat, mat), 0.0);

  patch_byte(path, 1, 'x');
  EXPECT_THROW(hw::load_feat(path), hw::FormatError);

  hw::save_feat(path, mat, 50.0);
  truncate_file(path, 20);
  EXPECT_THROW(hw::load_feat(path), hw::FormatError);

  // trailing junk is rejected
  hw::save_feat(path, mat, 50.0);
  {
    std::ofstream app(path, std::ios::binary | std::ios::app);
    app.put('\0');
  }
  try {
    hw::load_feat(path);
    FAIL() << "expected FormatError";
  } catch (const hw::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("trailing"), std::string::npos);
  }
  EXPECT_THROW(hw::load_feat(dir + "/missing.feat"), hw::IoError);
}

TEST(AlignAudio, EqualClockIsIdentity) {
  hw::Rng rng(10);
  hw::FeatFile track;
  track.fps = 25.0;
  track.mat = hw::NdArray::randn({8, 3}, rng);
  auto [out, valid] = hw::align_audio(track, 25, 8);
  EXPECT_EQ(hw::max_abs_diff(out, track.mat), 0.0);
  for (auto v : valid) EXPECT_EQ(v, 1);
}

TEST(AlignAudio, DoubleRateTakesEverySecondRow) {
  hw::Rng rng(11);
  hw::FeatFile track;
  track.fps = 50.0;
  track.mat = hw::NdArray::randn({16, 2}, rng);
  auto [out, valid] = hw::align_audio(track, 25, 8);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(valid[i], 1);
    for (int j = 0; j < 2; ++j) ASSERT_EQ(out.at(i, j), track.mat.at(2 * i, j));
  }
}

TEST(AlignAudio, InterpolatesBetweenNodes) {
  hw::Rng rng(12);
  hw::FeatFile track;
  track.fps = 10.0;
  track.mat = hw::NdArray::randn({5, 2}, rng);
  auto [out, valid] = hw::align_audio(track, 25, 12);
  for (int i = 0; i < 12; ++i) {
    const double pos = i * 10.0 / 25.0;
    if (pos > 4.0) {
      EXPECT_EQ(valid[i], 0);
      for (int j = 0; j < 2; ++j) EXPECT_EQ(out.at(i, j), 0.0);
    } else {
      EXPECT_EQ(valid[i], 1);
      const int j0 = static_cast<int>(pos);
      const double frac = pos - j0;
      for (int j = 0; j < 2; ++j) {
        const double want = frac == 0.0
                                ? track.mat.at(j0, j)
                                : (1.0 - frac) * track.mat.at(j0, j) + frac * track.mat.at(j0 + 1, j);
        ASSERT_NEAR(out.at(i, j), want, 1e-15);
      }
    }
  }
}

TEST(AlignAudio, ShortTrackZeroPadsTail) {
  hw::FeatFile track;
  track.fps = 25.0;
  track.mat = hw::NdArray::full({3, 2}, 1.5);
  auto [out, valid] = hw::align_audio(track, 25, 6);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(valid[i], 1);
  for (int i = 3; i < 6; ++i) {
    EXPECT_EQ(valid[i], 0);
    EXPECT_EQ(out.at(i, 0), 0.0);
  }
}

namespace {

// Writes a small two-style dataset: one chain of two clips plus a loner
// carrying a reference vector.
struct ManifestFixture {
  std::string dir;
  std::string manifest;

  explicit ManifestFixture(const std::string& name, int audio_dim = 3) {
    dir = testutil::scratch_dir(name);
    hw::Rng rng(21);
    for (int i = 0; i < 3; ++i) {
      hw::MotionClip c = testutil::make_random_clip(rng, 6 + i, 2, i == 2 ? 1 : 0);
      hw::save_clip(dir + "/clip" + std::to_string(i) + ".mclip", c);
      hw::NdArray a({10, audio_dim});
      for (double& v : a.data) v = testutil::to_f32(rng.normal());
      hw::save_feat(dir + "/audio" + std::to_string(i) + ".feat", a, 25.0);
    }
    hw::NdArray ref({1, 4});
    for (double& v : ref.data) v = testutil::to_f32(rng.normal());
    hw::save_feat(dir + "/ref.feat", ref, 0.0);
    manifest = dir + "/data.manifest";
    write_manifest(
        "# test dataset\n"
        "fps 25\n"
        "style speaking\n"
        "style dance\n"
        "clip clip0.mclip audio0.feat speaking chainA 0\n"
        "clip clip1.mclip audio1.feat speaking chainA 1\n"
        "clip clip2.mclip audio2.feat dance solo 0 ref=ref.feat\n");
  }

  void write_manifest(const std::string& text) const {
    std::ofstream out(manifest);
    out << text;
  }
};

}  // namespace

TEST(Manifest, LoadsChainsStylesAndRefs) {
  ManifestFixture fx("manifest_ok");
  hw::Dataset ds = hw::load_dataset(fx.manifest, 16);
  ASSERT_EQ(ds.entries.size(), 3u);
  EXPECT_EQ(ds.fps, 25);
  EXPECT_EQ(ds.audio_dim, 3);
  EXPECT_EQ(ds.style_names, (std::vector<std::string>{"speaking", "dance"}));
  EXPECT_EQ(ds.entries[0].prev, -1);
  EXPECT_EQ(ds.entries[1].prev, 0);
  EXPECT_EQ(ds.entries[2].prev, -1);
  EXPECT_EQ(ds.entries[2].clip.style, 1);
  EXPECT_FALSE(ds.entries[0].ref.has_value());
  ASSERT_TRUE(ds.entries[2].ref.has_value());
  EXPECT_EQ(ds.entries[2].ref->size(), 4u);
  EXPECT_EQ(ds.entries[0].audio.shape, (std::vector<int>{16, 3}));
}

TEST(Manifest, RejectsBadInputs) {
  {
    ManifestFixture fx("manifest_badstyle");
    fx.write_manifest("fps 25\nstyle speaking\nclip clip0.mclip audio0.feat waltz c 0\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    ManifestFixture fx("manifest_gap");
    fx.write_manifest(
        "fps 25\nstyle speaking\nstyle dance\n"
        "clip clip0.mclip audio0.feat speaking chainA 0\n"
        "clip clip1.mclip audio1.feat speaking chainA 2\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    ManifestFixture fx("manifest_dup");
    fx.write_manifest(
        "fps 25\nstyle speaking\nstyle dance\n"
        "clip clip0.mclip audio0.feat speaking chainA 0\n"
        "clip clip1.mclip audio1.feat speaking chainA 0\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    ManifestFixture fx("manifest_nofps");
    fx.write_manifest("style speaking\nstyle dance\nclip clip0.mclip audio0.feat speaking c 0\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    ManifestFixture fx("manifest_directive");
    fx.write_manifest("fps 25\nstyle speaking\nstyle dance\nbanana x\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    // manifest style column disagrees with the style id stored in the clip
    ManifestFixture fx("manifest_stylemismatch");
    fx.write_manifest(
        "fps 25\nstyle speaking\nstyle dance\n"
        "clip clip2.mclip audio2.feat speaking c 0\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    // clip0 has style id 0 but fps mismatch via manifest fps
    ManifestFixture fx("manifest_fps");
    fx.write_manifest("fps 30\nstyle speaking\nstyle dance\nclip clip0.mclip audio0.feat speaking c 0\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    ManifestFixture fx("manifest_refrows");
    // point ref= at a multi-row feature file
    fx.write_manifest(
        "fps 25\nstyle speaking\nstyle dance\n"
        "clip clip0.mclip audio0.feat speaking c 0 ref=audio1.feat\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
  {
    ManifestFixture fx("manifest_attr");
    fx.write_manifest(
        "fps 25\nstyle speaking\nstyle dance\n"
        "clip clip0.mclip audio0.feat speaking c 0 wat=1\n");
    EXPECT_THROW(hw::load_dataset(fx.manifest, 16), hw::FormatError);
  }
}
