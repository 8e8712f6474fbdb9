#include "handwave/checkpoint.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"

namespace handwave {
namespace {

DiTConfig small_config() {
  DiTConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.motion_dim = kFrameDim + 6;
  cfg.audio_dim = 4;
  cfg.capacity = 8;
  cfg.history_len = 2;
  cfg.style_count = 2;
  cfg.bucket_count = 4;
  cfg.ref_dim = 2;
  cfg.validate();
  return cfg;
}

// One optimizer update with synthetic gradients, so moment buffers exist.
void fake_step(DiTModel& m, Adam& opt) {
  std::vector<NdArray*> params;
  std::vector<const NdArray*> grads;
  for (Param& p : m.params()) {
    params.push_back(&p.value);
    grads.push_back(&p.value);
  }
  opt.step(params, grads);
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TEST(Checkpoint, SaveLoadRestoreReproducesTheState) {
  const std::string dir = testutil::scratch_dir("ckpt_roundtrip");
  DiTModel m1 = DiTModel::build(small_config(), 3);
  Adam opt1{AdamConfig{}};
  fake_step(m1, opt1);
  Rng rng(9);
  for (int i = 0; i < 5; ++i) rng.uniform();

  const std::string path = dir + "/state.hwck";
  save_checkpoint(path, m1, opt1, 42, rng);

  LoadedCheckpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.step, 42u);
  EXPECT_TRUE(ck.config == small_config());

  DiTModel m2 = DiTModel::build(small_config(), 77);
  Adam opt2{AdamConfig{}};
  restore_checkpoint(ck, m2, opt2);
  ASSERT_EQ(m2.params().size(), m1.params().size());
  for (std::size_t i = 0; i < m1.params().size(); ++i) {
    EXPECT_EQ(m2.params()[i].name, m1.params()[i].name);
    EXPECT_EQ(m2.params()[i].value.data, m1.params()[i].value.data) << m1.params()[i].name;
  }
  EXPECT_EQ(opt2.step_count(), opt1.step_count());
  ASSERT_EQ(opt2.moment1().size(), opt1.moment1().size());
  for (std::size_t i = 0; i < opt1.moment1().size(); ++i) {
    EXPECT_EQ(opt2.moment1()[i].data, opt1.moment1()[i].data);
    EXPECT_EQ(opt2.moment2()[i].data, opt1.moment2()[i].data);
  }

  Rng restored(0);
  restored.deserialize(ck.rng_state);
  EXPECT_TRUE(restored == rng);
  EXPECT_EQ(restored.raw(), rng.raw());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const std::string dir = testutil::scratch_dir("ckpt_idempotent");
  DiTModel m1 = DiTModel::build(small_config(), 11);
  Adam opt1{AdamConfig{}};
  fake_step(m1, opt1);
  Rng rng(4);

  const std::string first = dir + "/a.hwck";
  save_checkpoint(first, m1, opt1, 7, rng);

  LoadedCheckpoint ck = load_checkpoint(first);
  DiTModel m2 = DiTModel::build(small_config(), 0);
  Adam opt2{AdamConfig{}};
  restore_checkpoint(ck, m2, opt2);
  Rng rng2(0);
  rng2.deserialize(ck.rng_state);

  const std::string second = dir + "/b.hwck";
  save_checkpoint(second, m2, opt2, ck.step, rng2);
  EXPECT_EQ(file_bytes(first), file_bytes(second));
}

TEST(Checkpoint, SavingQuantizesTheLiveState) {
  const std::string dir = testutil::scratch_dir("ckpt_quantize");
  DiTModel m = DiTModel::build(small_config(), 5);
  Adam opt{AdamConfig{}};
  m.params()[0].value.data[0] = 0.1;  // not representable in f32
  Rng rng(1);
  save_checkpoint(dir + "/q.hwck", m, opt, 1, rng);
  const double live = m.params()[0].value.data[0];
  EXPECT_EQ(live, static_cast<double>(static_cast<float>(0.1)));
  EXPECT_NE(live, 0.1);
}

TEST(Checkpoint, MismatchedConfigIsRejected) {
  const std::string dir = testutil::scratch_dir("ckpt_confmismatch");
  DiTModel m = DiTModel::build(small_config(), 2);
  Adam opt{AdamConfig{}};
  Rng rng(1);
  const std::string path = dir + "/c.hwck";
  save_checkpoint(path, m, opt, 1, rng);

  DiTConfig other = small_config();
  other.hidden = 32;
  DiTModel wide = DiTModel::build(other, 2);
  Adam opt2{AdamConfig{}};
  LoadedCheckpoint ck = load_checkpoint(path);
  EXPECT_THROW(restore_checkpoint(ck, wide, opt2), ConfigError);
}

TEST(Checkpoint, TamperedParameterTablesAreRejected) {
  const std::string dir = testutil::scratch_dir("ckpt_tamper");
  DiTModel m = DiTModel::build(small_config(), 2);
  Adam opt{AdamConfig{}};
  Rng rng(1);
  const std::string path = dir + "/t.hwck";
  save_checkpoint(path, m, opt, 1, rng);

  DiTModel target = DiTModel::build(small_config(), 0);
  Adam opt2{AdamConfig{}};
  {
    LoadedCheckpoint ck = load_checkpoint(path);
    ck.names[0] += "x";
    EXPECT_THROW(restore_checkpoint(ck, target, opt2), FormatError);
  }
  {
    LoadedCheckpoint ck = load_checkpoint(path);
    ck.names.pop_back();
    ck.values.pop_back();
    EXPECT_THROW(restore_checkpoint(ck, target, opt2), FormatError);
  }
  {
    LoadedCheckpoint ck = load_checkpoint(path);
    ck.values[0] = NdArray::zeros({1, 1});
    EXPECT_THROW(restore_checkpoint(ck, target, opt2), FormatError);
  }
}

TEST(Checkpoint, TruncatedFilesAreRejected) {
  const std::string dir = testutil::scratch_dir("ckpt_truncated");
  DiTModel m = DiTModel::build(small_config(), 2);
  Adam opt{AdamConfig{}};
  fake_step(m, opt);
  Rng rng(1);
  const std::string path = dir + "/full.hwck";
  save_checkpoint(path, m, opt, 1, rng);

  const std::string bytes = file_bytes(path);
  const std::string cut = dir + "/cut.hwck";
  {
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(load_checkpoint(cut), FormatError);
  EXPECT_THROW(load_checkpoint(dir + "/missing.hwck"), IoError);
}

TEST(Checkpoint, TrailingGarbageIsRejected) {
  const std::string dir = testutil::scratch_dir("ckpt_trailing");
  DiTModel m = DiTModel::build(small_config(), 2);
  Adam opt{AdamConfig{}};
  Rng rng(1);
  const std::string path = dir + "/g.hwck";
  save_checkpoint(path, m, opt, 1, rng);
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "extra";
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

}  // namespace
}  // namespace handwave
