#include "handwave/dit.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "handwave/rng.hpp"
#include "handwave/tape.hpp"
#include "handwave/tensor.hpp"
#include "oracles.hpp"

namespace handwave {
namespace {

DiTConfig small_cfg() {
  DiTConfig cfg;
  cfg.depth = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.motion_dim = 138;
  cfg.audio_dim = 8;
  cfg.capacity = 16;
  cfg.history_len = 4;
  cfg.style_count = 3;
  cfg.bucket_count = 4;
  cfg.ref_dim = 4;
  return cfg;
}

ConditionBundle make_bundle(const DiTConfig& cfg, Rng& rng, bool with_ref) {
  ConditionBundle b;
  b.audio = NdArray::randn({cfg.capacity, cfg.audio_dim}, rng, 0.5);
  b.audio_valid.assign(static_cast<std::size_t>(cfg.capacity), 1);
  for (int i = cfg.capacity - 4; i < cfg.capacity; ++i) {
    b.audio_valid[static_cast<std::size_t>(i)] = 0;
    for (int j = 0; j < cfg.audio_dim; ++j) b.audio.at(i, j) = 0.0;
  }
  b.style = 1 % cfg.style_count;
  b.left_amp = 0.01;
  b.left_amp_defined = true;
  b.right_amp_defined = false;
  b.root_offset = {0.1, -0.2, 0.3, 0.9, 0.1, 0.0, 0.1};
  if (with_ref) {
    std::vector<double> r(static_cast<std::size_t>(cfg.ref_dim));
    for (double& v : r) v = rng.normal();
    b.ref = std::move(r);
  }
  b.left_mask.assign(static_cast<std::size_t>(cfg.capacity), 1);
  b.right_mask.assign(static_cast<std::size_t>(cfg.capacity), 1);
  b.left_mask[2] = 0;
  b.right_mask[5] = 0;
  for (int i = cfg.capacity - 2; i < cfg.capacity; ++i) {
    b.left_mask[static_cast<std::size_t>(i)] = 0;
    b.right_mask[static_cast<std::size_t>(i)] = 0;
  }
  return b;
}

DenoiseRequest make_request(const DiTConfig& cfg) {
  DenoiseRequest req;
  req.t = 37;
  req.history_valid.assign(static_cast<std::size_t>(cfg.history_len), 1);
  req.history_left.assign(static_cast<std::size_t>(cfg.history_len), 1);
  req.history_right.assign(static_cast<std::size_t>(cfg.history_len), 1);
  if (cfg.history_len > 0) {
    req.history_valid[0] = 0;
    req.history_left[0] = 0;
    req.history_right[0] = 0;
  }
  req.frame_valid.assign(static_cast<std::size_t>(cfg.capacity), 1);
  req.frame_valid[static_cast<std::size_t>(cfg.capacity - 2)] = 0;
  req.frame_valid[static_cast<std::size_t>(cfg.capacity - 1)] = 0;
  return req;
}

std::vector<std::uint8_t> row_validity(const DiTConfig& cfg, const DenoiseRequest& req) {
  std::vector<std::uint8_t> rows;
  rows.insert(rows.end(), req.history_valid.begin(), req.history_valid.end());
  rows.insert(rows.end(), req.frame_valid.begin(), req.frame_valid.end());
  return rows;
}

void randomize_all(DiTModel& m, Rng& rng, double stddev) {
  for (Param& p : m.params())
    for (double& v : p.value.data) v = stddev * rng.normal();
}

NdArray run_denoise(const DiTModel& m, const NdArray& x, const DenoiseRequest& req,
                    const ConditionBundle& cond) {
  Tape tape;
  DiTModel::Binding b = m.bind(tape);
  return tape.value(m.denoise(tape, b, x, req, cond));
}

TEST(DiTConfig, ValidationRejectsBadShapes) {
  DiTConfig cfg = small_cfg();
  EXPECT_NO_THROW(cfg.validate());
  DiTConfig c1 = cfg;
  c1.hidden = 15;
  EXPECT_THROW(c1.validate(), ConfigError);
  DiTConfig c2 = cfg;
  c2.heads = 5;
  EXPECT_THROW(c2.validate(), ConfigError);
  DiTConfig c3 = cfg;
  c3.history_len = c3.capacity;
  EXPECT_THROW(c3.validate(), ConfigError);
  DiTConfig c4 = cfg;
  c4.depth = 0;
  EXPECT_THROW(c4.validate(), ConfigError);
}

TEST(DiT, TimestepEmbeddingEndpoints) {
  NdArray e0 = timestep_sinusoid(0, 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(e0.data[static_cast<std::size_t>(i)], 0.0);
    EXPECT_EQ(e0.data[static_cast<std::size_t>(4 + i)], 1.0);
  }
  NdArray e5 = timestep_sinusoid(5, 8);
  EXPECT_DOUBLE_EQ(e5.data[0], std::sin(5.0));
  EXPECT_DOUBLE_EQ(e5.data[4], std::cos(5.0));
  EXPECT_THROW(timestep_sinusoid(1, 7), ContractError);
}

TEST(DiT, ParameterCountMatchesLayerArithmetic) {
  DiTConfig cfg;
  cfg.depth = 2;
  cfg.hidden = 32;
  cfg.heads = 4;
  cfg.motion_dim = 134;
  cfg.audio_dim = 16;
  cfg.capacity = 64;
  cfg.history_len = 8;
  cfg.style_count = 5;
  cfg.bucket_count = 8;
  cfg.ref_dim = 4;
  DiTModel m = DiTModel::build(cfg, 1);

  const std::size_t h = 32, M = 134, A = 16, S = 5, B = 8, R = 4, P = 72, d = 2;
  std::size_t expected = 0;
  expected += M * h + h;                      // input projection
  expected += P * h;                          // positional table
  expected += 2 * (2 * h);                    // per-hand mask embeddings
  expected += 2 * (h * h + h);                // timestep MLP
  expected += S * h;                          // style table
  expected += 2 * (B * h);                    // per-hand amplitude tables
  expected += 7 * h + h;                      // root offset projection
  expected += R * h + h;                      // reference projection
  expected += A * h + h;                      // audio projection
  expected += (h * h + h) + (h * 6 * h + 6 * h);  // shared modulation MLP
  expected += d * 6 * h;                      // per-block modulation rows
  expected += d * (2 * (4 * h * h + 4 * h) + (h * 4 * h + 4 * h + 4 * h * h + h));
  expected += h + h + h * M + M;              // output head
  EXPECT_EQ(m.parameter_count(), expected);

  std::size_t by_sum = 0;
  for (const Param& p : m.params()) by_sum += p.value.numel();
  EXPECT_EQ(by_sum, m.parameter_count());
}

TEST(DiT, RegistrationOrderIsStable) {
  DiTConfig cfg = small_cfg();
  cfg.depth = 1;
  DiTModel m = DiTModel::build(cfg, 3);
  std::vector<std::string> expected = {
      "input.W", "input.b", "pos", "mask.left", "mask.right",
      "tmlp.W1", "tmlp.b1", "tmlp.W2", "tmlp.b2",
      "style.table", "amp.left", "amp.right",
      "offset.W", "offset.b", "ref.W", "ref.b", "audio.W", "audio.b",
      "adaln.W1", "adaln.b1", "adaln.W2", "adaln.b2", "adaln.block",
      "block0.attn.Wq", "block0.attn.bq", "block0.attn.Wk", "block0.attn.bk",
      "block0.attn.Wv", "block0.attn.bv", "block0.attn.Wo", "block0.attn.bo",
      "block0.cross.Wq", "block0.cross.bq", "block0.cross.Wk", "block0.cross.bk",
      "block0.cross.Wv", "block0.cross.bv", "block0.cross.Wo", "block0.cross.bo",
      "block0.mlp.W1", "block0.mlp.b1", "block0.mlp.W2", "block0.mlp.b2",
      "head.ln_g", "head.ln_b", "head.W", "head.b"};
  ASSERT_EQ(m.params().size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i)
    EXPECT_EQ(m.params()[i].name, expected[i]) << "at position " << i;
  EXPECT_THROW(m.param("no.such"), ContractError);
}

TEST(DiT, SameSeedGivesBitwiseIdenticalInit) {
  DiTConfig cfg = small_cfg();
  DiTModel a = DiTModel::build(cfg, 77);
  DiTModel b = DiTModel::build(cfg, 77);
  DiTModel c = DiTModel::build(cfg, 78);
  ASSERT_EQ(a.params().size(), b.params().size());
  bool any_differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(max_abs_diff(a.params()[i].value, b.params()[i].value), 0.0)
        << a.params()[i].name;
    if (max_abs_diff(a.params()[i].value, c.params()[i].value) > 0.0) any_differs = true;
  }
  EXPECT_TRUE(any_differs);
}

// Freshly built, every residual branch is gated or zero-projected shut and the
// output head's weight is zero, so the prediction is exactly the head bias.
TEST(DiT, OutputAtInitEqualsHeadBias) {
  DiTConfig cfg = small_cfg();
  DiTModel m = DiTModel::build(cfg, 11);
  NdArray& hb = m.param("head.b");
  Rng rng(5);
  for (double& v : hb.data) v = rng.normal();

  Rng xr(6);
  NdArray x = NdArray::randn({cfg.rows(), cfg.motion_dim}, xr, 1.0);
  ConditionBundle cond = make_bundle(cfg, xr, true);
  DenoiseRequest req = make_request(cfg);

  NdArray out = run_denoise(m, x, req, cond);
  ASSERT_EQ(out.shape, (std::vector<int>{cfg.rows(), cfg.motion_dim}));
  for (int r = 0; r < cfg.rows(); ++r)
    for (int j = 0; j < cfg.motion_dim; ++j)
      ASSERT_EQ(out.at(r, j), hb.data[static_cast<std::size_t>(j)])
          << "row " << r << " col " << j;

  NdArray again = run_denoise(m, x, req, cond);
  EXPECT_EQ(max_abs_diff(out, again), 0.0);
}

// Single block, single head, weights pinned so the whole forward pass can be
// recomputed here with plain loops.
TEST(DiT, MatchesHandComputedAttentionPath) {
  DiTConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 4;
  cfg.heads = 1;
  cfg.motion_dim = 4;
  cfg.audio_dim = 2;
  cfg.capacity = 2;
  cfg.history_len = 0;
  cfg.style_count = 1;
  cfg.bucket_count = 2;
  cfg.ref_dim = 1;
  DiTModel m = DiTModel::build(cfg, 9);

  auto set_zero = [&](const std::string& name) {
    for (double& v : m.param(name).data) v = 0.0;
  };
  auto set_identity = [&](const std::string& name) {
    NdArray& w = m.param(name);
    for (double& v : w.data) v = 0.0;
    for (int i = 0; i < w.shape[0]; ++i) w.at(i, i) = 1.0;
  };
  set_identity("input.W");
  set_zero("pos");
  set_zero("mask.left");
  set_zero("mask.right");
  set_zero("tmlp.W2");
  set_zero("style.table");
  set_zero("amp.left");
  set_zero("amp.right");
  // Gate the self-attention branch open; everything else stays shut.
  NdArray& ab2 = m.param("adaln.b2");
  for (int i = 8; i < 12; ++i) ab2.data[static_cast<std::size_t>(i)] = 1.0;
  set_zero("block0.attn.Wq");
  NdArray& bq = m.param("block0.attn.bq");
  bq.data = {2.0, 0.0, -1.0, 1.0};
  set_identity("block0.attn.Wk");
  set_identity("block0.attn.Wv");
  set_identity("block0.attn.Wo");
  set_identity("head.W");

  NdArray x({2, 4}, {1.0, -1.0, 2.0, 0.0, 3.0, 1.0, 0.0, -2.0});
  ConditionBundle cond;
  cond.audio = NdArray::zeros({2, 2});
  cond.audio_valid = {1, 1};
  cond.left_mask = {1, 1};
  cond.right_mask = {1, 1};
  DenoiseRequest req;
  req.t = 3;
  req.frame_valid = {1, 1};

  NdArray out = run_denoise(m, x, req, cond);

  auto ln_row = [](std::vector<double> v) {
    double mu = 0.0;
    for (double e : v) mu += e;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double e : v) var += (e - mu) * (e - mu);
    var /= static_cast<double>(v.size());
    double s = std::sqrt(var + 1e-5);
    for (double& e : v) e = (e - mu) / s;
    return v;
  };
  std::vector<std::vector<double>> rows = {{1, -1, 2, 0}, {3, 1, 0, -2}};
  std::vector<std::vector<double>> a = {ln_row(rows[0]), ln_row(rows[1])};
  std::vector<double> q = {2.0, 0.0, -1.0, 1.0};
  double s0 = 0.0, s1 = 0.0;
  for (int i = 0; i < 4; ++i) {
    s0 += q[static_cast<std::size_t>(i)] * a[0][static_cast<std::size_t>(i)];
    s1 += q[static_cast<std::size_t>(i)] * a[1][static_cast<std::size_t>(i)];
  }
  s0 /= 2.0;
  s1 /= 2.0;
  double mx = std::max(s0, s1);
  double w0 = std::exp(s0 - mx), w1 = std::exp(s1 - mx);
  double zden = w0 + w1;
  w0 /= zden;
  w1 /= zden;
  for (int r = 0; r < 2; ++r) {
    std::vector<double> tok(4);
    for (int i = 0; i < 4; ++i)
      tok[static_cast<std::size_t>(i)] =
          rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)] +
          w0 * a[0][static_cast<std::size_t>(i)] + w1 * a[1][static_cast<std::size_t>(i)];
    std::vector<double> expect = ln_row(tok);
    for (int i = 0; i < 4; ++i)
      ASSERT_NEAR(out.at(r, i), expect[static_cast<std::size_t>(i)], 1e-12)
          << "row " << r << " col " << i;
  }
}

// Garbage in padded motion rows and padded audio rows must neither throw nor
// change any output value relative to zero padding.
TEST(DiT, PaddingContentsCannotReachTheOutput) {
  DiTConfig cfg = small_cfg();
  DiTModel m = DiTModel::build(cfg, 21);
  Rng rng(22);
  randomize_all(m, rng, 0.1);

  ConditionBundle cond = make_bundle(cfg, rng, true);
  DenoiseRequest req = make_request(cfg);
  NdArray x = NdArray::randn({cfg.rows(), cfg.motion_dim}, rng, 1.0);

  NdArray clean = run_denoise(m, x, req, cond);
  ASSERT_TRUE(clean.all_finite());

  NdArray x_dirty = x;
  std::vector<std::uint8_t> rows = row_validity(cfg, req);
  double nan = std::numeric_limits<double>::quiet_NaN();
  for (int r = 0; r < cfg.rows(); ++r)
    if (!rows[static_cast<std::size_t>(r)])
      for (int j = 0; j < cfg.motion_dim; ++j) x_dirty.at(r, j) = nan;
  ConditionBundle cond_dirty = cond;
  for (int r = 0; r < cfg.capacity; ++r)
    if (!cond.audio_valid[static_cast<std::size_t>(r)])
      for (int j = 0; j < cfg.audio_dim; ++j) cond_dirty.audio.at(r, j) = nan;

  NdArray dirty = run_denoise(m, x_dirty, req, cond_dirty);
  EXPECT_EQ(max_abs_diff(clean, dirty), 0.0);
}

TEST(DiT, ValidAudioRowsInfluenceTheOutput) {
  DiTConfig cfg = small_cfg();
  DiTModel m = DiTModel::build(cfg, 31);
  Rng rng(32);
  randomize_all(m, rng, 0.1);
  ConditionBundle cond = make_bundle(cfg, rng, false);
  DenoiseRequest req = make_request(cfg);
  NdArray x = NdArray::randn({cfg.rows(), cfg.motion_dim}, rng, 1.0);

  NdArray base = run_denoise(m, x, req, cond);
  ConditionBundle moved = cond;
  moved.audio.at(3, 0) += 0.5;
  NdArray shifted = run_denoise(m, x, req, moved);
  EXPECT_GT(max_abs_diff(base, shifted), 0.0);
}

// With the trunk transparent and only the mask tables nonzero, each row's
// output is the normalized mask vector its bit selects.
TEST(DiT, HandMaskBitsSelectTheLearnedVectors) {
  DiTConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 4;
  cfg.heads = 1;
  cfg.motion_dim = 4;
  cfg.audio_dim = 2;
  cfg.capacity = 3;
  cfg.history_len = 1;
  cfg.style_count = 1;
  cfg.bucket_count = 2;
  cfg.ref_dim = 1;
  DiTModel m = DiTModel::build(cfg, 41);
  for (Param& p : m.params())
    if (p.name != "head.ln_g")
      for (double& v : p.value.data) v = 0.0;
  NdArray& ml = m.param("mask.left");
  ml.data = {0.5, -1.0, 2.0, 0.25,    // bit 0
             -2.0, 1.5, 0.0, 3.0};    // bit 1
  NdArray& hw = m.param("head.W");
  for (int i = 0; i < 4; ++i) hw.at(i, i) = 1.0;

  auto ln_row = [](std::vector<double> v) {
    double mu = 0.0;
    for (double e : v) mu += e;
    mu /= 4.0;
    double var = 0.0;
    for (double e : v) var += (e - mu) * (e - mu);
    var /= 4.0;
    double s = std::sqrt(var + 1e-5);
    for (double& e : v) e = (e - mu) / s;
    return v;
  };
  std::vector<double> row_for_bit0 = ln_row({0.5, -1.0, 2.0, 0.25});
  std::vector<double> row_for_bit1 = ln_row({-2.0, 1.5, 0.0, 3.0});

  ConditionBundle cond;
  cond.audio = NdArray::zeros({3, 2});
  cond.audio_valid = {1, 1, 1};
  cond.left_mask = {1, 0, 1};
  cond.right_mask = {0, 0, 0};
  DenoiseRequest req;
  req.t = 0;
  req.history_valid = {1};
  req.history_left = {0};
  req.history_right = {0};
  req.frame_valid = {1, 1, 1};

  NdArray out = run_denoise(m, NdArray::zeros({4, 4}), req, cond);
  std::vector<const std::vector<double>*> expect = {
      &row_for_bit0,  // history row, bit 0
      &row_for_bit1, &row_for_bit0, &row_for_bit1};
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < 4; ++j)
      ASSERT_NEAR(out.at(r, j), (*expect[static_cast<std::size_t>(r)])[static_cast<std::size_t>(j)], 1e-12)
          << "row " << r << " col " << j;

  // Flipping one current-region bit changes that row and only that row.
  ConditionBundle flipped = cond;
  flipped.left_mask[2] = 0;
  NdArray out2 = run_denoise(m, NdArray::zeros({4, 4}), req, flipped);
  for (int j = 0; j < 4; ++j) {
    ASSERT_NEAR(out2.at(3, j), row_for_bit0[static_cast<std::size_t>(j)], 1e-12);
    ASSERT_EQ(out2.at(0, j), out.at(0, j));
    ASSERT_EQ(out2.at(1, j), out.at(1, j));
    ASSERT_EQ(out2.at(2, j), out.at(2, j));
  }
}

double forward_loss(const DiTModel& m, const NdArray& x, const DenoiseRequest& req,
                    const ConditionBundle& cond, const NdArray& target) {
  Tape tape;
  DiTModel::Binding b = m.bind(tape);
  NodeId out = m.denoise(tape, b, x, req, cond);
  NodeId loss = tape.mse(out, tape.leaf(target));
  return tape.value(loss).data[0];
}

// End-to-end gradient check: every branch is live (all parameters randomized,
// amplitude buckets, reference row, partial masks) and a random sample of
// coordinates in every parameter tensor is compared against central
// differences.
TEST(DiT, GradientsMatchFiniteDifferences) {
  DiTConfig cfg = small_cfg();
  DiTModel m = DiTModel::build(cfg, 51);
  Rng rng(52);
  randomize_all(m, rng, 0.1);

  ConditionBundle cond = make_bundle(cfg, rng, true);
  DenoiseRequest req = make_request(cfg);
  NdArray x = NdArray::randn({cfg.rows(), cfg.motion_dim}, rng, 0.7);
  NdArray target = NdArray::randn({cfg.rows(), cfg.motion_dim}, rng, 0.7);

  Tape tape;
  DiTModel::Binding b = m.bind(tape);
  NodeId out = m.denoise(tape, b, x, req, cond);
  NodeId loss = tape.mse(out, tape.leaf(target));
  tape.backward(loss);

  const double h = 1e-4;
  Rng pick(53);
  for (std::size_t pi = 0; pi < m.params().size(); ++pi) {
    Param& p = m.params()[pi];
    const NdArray& g = tape.grad(b.ids[pi]);
    std::size_t coords = std::min<std::size_t>(4, p.value.numel());
    for (std::size_t c = 0; c < coords; ++c) {
      std::size_t idx = pick.uniform_int(p.value.numel());
      double saved = p.value.data[idx];
      p.value.data[idx] = saved + h;
      double lp = forward_loss(m, x, req, cond, target);
      p.value.data[idx] = saved - h;
      double lm = forward_loss(m, x, req, cond, target);
      p.value.data[idx] = saved;
      double fd = (lp - lm) / (2.0 * h);
      double an = g.data[idx];
      ASSERT_LT(oracle::rel_err(an, fd, 1e-6), 2e-4)
          << p.name << "[" << idx << "] analytic " << an << " fd " << fd;
    }
  }
}

}  // namespace
}  // namespace handwave
