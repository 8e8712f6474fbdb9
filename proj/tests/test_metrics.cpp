#include "handwave/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "handwave/rng.hpp"
#include "handwave/synth.hpp"

namespace handwave {
namespace {

NdArray random_motion(Rng& rng, int frames) {
  NdArray m({frames, kFrameDim});
  for (double& v : m.data) v = 0.05 * rng.normal();
  for (int f = 0; f < frames; ++f)
    for (int d : kTranslationDims) m.at(f, d) = 0.3 * rng.normal();
  return m;
}

// Motion whose translation speed dips to an exact zero at the given frames
// and is 1 everywhere else, so those frames are strict speed minima.
NdArray motion_with_speed_minima(int frames, const std::vector<int>& minima) {
  NdArray m({frames, kFrameDim});
  double x = 0.0;
  for (int f = 0; f < frames; ++f) {
    if (f > 0) {
      bool still = false;
      for (int z : minima) still = still || (f == z);
      x += still ? 0.0 : 1.0;
    }
    m.at(f, kTranslationDims[0]) = x;
  }
  return m;
}

NdArray audio_with_peaks(int rows, const std::vector<int>& peaks) {
  NdArray a({rows, 1});
  for (int p : peaks) a.at(p, 0) = 1.0;
  return a;
}

TEST(Diversity, ZeroForIdenticalAndClosedFormForUnitOffset) {
  Rng rng(1);
  NdArray a = random_motion(rng, 12);
  NdArray b = a;
  EXPECT_DOUBLE_EQ(diversity({a, b}), 0.0);

  for (int f = 0; f < 12; ++f)
    for (int d : kTranslationDims) b.at(f, d) += 1.0;
  EXPECT_NEAR(diversity({a, b}), 1.0, 1e-12);
}

TEST(Diversity, OrderAndGlobalTranslationInvariant) {
  Rng rng(2);
  NdArray a = random_motion(rng, 9);
  NdArray b = random_motion(rng, 9);
  NdArray c = random_motion(rng, 9);
  const double base = diversity({a, b, c});
  EXPECT_DOUBLE_EQ(diversity({c, a, b}), base);

  for (NdArray* m : {&a, &b, &c})
    for (int f = 0; f < 9; ++f)
      for (int d : kTranslationDims) m->at(f, d) += 7.25;
  EXPECT_NEAR(diversity({a, b, c}), base, 1e-12);

  EXPECT_THROW(diversity({a}), ContractError);
  EXPECT_THROW(diversity({a, random_motion(rng, 5)}), ContractError);
}

TEST(BeatAlign, PerfectAlignmentScoresOne) {
  NdArray audio = audio_with_peaks(50, {10, 20, 30, 40});
  NdArray motion = motion_with_speed_minima(50, {10, 20, 30, 40});
  EXPECT_NEAR(beat_align(audio, motion, 25.0), 1.0, 1e-12);
}

TEST(BeatAlign, UniformSigmaOffsetHitsTheClosedForm) {
  // At 10 fps one frame is exactly sigma = 0.1 s.
  NdArray audio = audio_with_peaks(40, {10, 20, 30});
  NdArray motion = motion_with_speed_minima(40, {11, 21, 31});
  EXPECT_NEAR(beat_align(audio, motion, 10.0), std::exp(-0.5), 1e-12);
}

TEST(BeatAlign, UndefinedWithoutBeats) {
  NdArray flat_audio({20, 2});
  NdArray beat_audio = audio_with_peaks(20, {7, 14});
  NdArray moving = motion_with_speed_minima(20, {7, 14});
  NdArray still({20, kFrameDim});
  EXPECT_THROW(beat_align(flat_audio, moving, 25.0), MetricUndefined);
  EXPECT_THROW(beat_align(beat_audio, still, 25.0), MetricUndefined);
}

TEST(BeatAlign, PhaseLockedSyntheticDataScoresHigh) {
  SynthConfig sc;
  std::vector<SynthClipBundle> data = synth_dataset(sc, 17);
  double acc = 0.0;
  for (const SynthClipBundle& b : data) {
    auto [aligned, valid] = align_audio(b.audio, sc.fps, b.clip.length());
    acc += beat_align(aligned, b.clip.motion, static_cast<double>(sc.fps));
  }
  EXPECT_GT(acc / static_cast<double>(data.size()), 0.9);
}

TEST(Pck, CountsHandsWithinDelta) {
  Rng rng(3);
  NdArray gt = random_motion(rng, 10);
  EXPECT_DOUBLE_EQ(pck(gt, gt, 0.1), 1.0);

  NdArray far = gt;
  for (int f = 0; f < 10; ++f)
    for (int d : kTranslationDims) far.at(f, d) += 0.2;
  EXPECT_DOUBLE_EQ(pck(far, gt, 0.1), 0.0);

  NdArray half = gt;
  for (int f = 0; f < 5; ++f)
    for (int d : kTranslationDims) half.at(f, d) += 0.2;
  EXPECT_DOUBLE_EQ(pck(half, gt, 0.1), 0.5);

  EXPECT_LE(pck(far, gt, 0.05), pck(far, gt, 0.4));
  EXPECT_THROW(pck(gt, random_motion(rng, 9), 0.1), ContractError);
}

TEST(ClipFeatures, MatchHandStatistics) {
  NdArray m({3, kFrameDim});
  // Left x translation 0, 3, 3; all other translations zero.
  m.at(1, kTranslationDims[0]) = 3.0;
  m.at(2, kTranslationDims[0]) = 3.0;
  std::vector<double> f = clip_motion_features(m);
  ASSERT_EQ(f.size(), 24u);
  EXPECT_NEAR(f[0], 2.0, 1e-12);                      // mean
  EXPECT_NEAR(f[6], std::sqrt(2.0), 1e-12);           // population std
  EXPECT_NEAR(f[12], 1.5, 1e-12);                     // mean delta (3, 0)
  EXPECT_NEAR(f[18], 1.5, 1e-12);                     // std of deltas
  for (std::size_t i : {1u, 7u, 13u, 19u}) EXPECT_DOUBLE_EQ(f[i], 0.0);
}

TEST(Fgd, OneDimensionalClosedForm) {
  GaussianSummary a{{0.0}, NdArray({1, 1}, {1.0})};
  GaussianSummary b{{1.0}, NdArray({1, 1}, {1.0})};
  EXPECT_NEAR(fgd_from_summaries(a, b), 1.0, 1e-9);

  GaussianSummary c{{0.0}, NdArray({1, 1}, {4.0})};
  EXPECT_NEAR(fgd_from_summaries(a, c), 1.0, 1e-9);
}

TEST(Fgd, DiagonalGaussiansMatchThePerAxisForm) {
  GaussianSummary a{{0.0, 0.0}, NdArray({2, 2}, {1.0, 0.0, 0.0, 4.0})};
  GaussianSummary b{{1.0, 2.0}, NdArray({2, 2}, {9.0, 0.0, 0.0, 1.0})};
  // Per axis: (mu1-mu2)^2 + (sigma1-sigma2)^2 summed = 5 + 4 + 1.
  EXPECT_NEAR(fgd_from_summaries(a, b), 10.0, 1e-9);
  EXPECT_THROW(fgd_from_summaries(a, GaussianSummary{{0.0}, NdArray({1, 1}, {-1.0})}),
               ContractError);
  GaussianSummary bad{{0.0, 0.0}, NdArray({2, 2}, {-1.0, 0.0, 0.0, 1.0})};
  EXPECT_THROW(fgd_from_summaries(a, bad), NumericError);
}

TEST(Fgd, SetDistanceIsSymmetricAndZeroOnItself) {
  Rng rng(4);
  std::vector<NdArray> a, b;
  for (int i = 0; i < 30; ++i) a.push_back(random_motion(rng, 16));
  for (int i = 0; i < 28; ++i) b.push_back(random_motion(rng, 16));
  EXPECT_LT(fgd(a, a), 1e-8);
  const double ab = fgd(a, b);
  EXPECT_GT(ab, 0.0);
  EXPECT_NEAR(fgd(b, a), ab, 1e-8);

  std::vector<NdArray> small(a.begin(), a.begin() + 10);
  EXPECT_THROW(fgd(small, b), MetricUndefined);
}

TEST(Hkv, VarianceArithmetic) {
  NdArray still({6, 4});
  EXPECT_DOUBLE_EQ(hkv({still}), 0.0);

  NdArray alt({4, 1});
  for (int f = 0; f < 4; ++f) alt.at(f, 0) = (f % 2 == 0) ? 1.0 : -1.0;
  EXPECT_DOUBLE_EQ(hkv({alt}), 1.0);

  for (int f = 0; f < 4; ++f) alt.at(f, 0) += 5.0;
  EXPECT_DOUBLE_EQ(hkv({alt}), 1.0);

  NdArray mixed({4, 2});
  for (int f = 0; f < 4; ++f) mixed.at(f, 0) = (f % 2 == 0) ? 1.0 : -1.0;
  EXPECT_DOUBLE_EQ(hkv({mixed}), 0.5);
  EXPECT_DOUBLE_EQ(hkv({alt, NdArray({4, 1})}), 0.5);
}

TEST(HandDistribution, StaticSampleFillsOneCell) {
  NdArray m({5, kFrameDim});
  for (int f = 0; f < 5; ++f) {
    m.at(f, kTranslationDims[0]) = 0.31;
    m.at(f, kTranslationDims[1]) = -0.12;
    m.at(f, kTranslationDims[3]) = 0.74;
    m.at(f, kTranslationDims[4]) = 0.40;
  }
  HandDistribution h = hand_distribution({m}, 8, {0.0, 1.0, -0.5, 0.5});
  int nonzero = 0;
  for (double v : h.left.data)
    if (v != 0.0) ++nonzero;
  EXPECT_EQ(nonzero, 1);
  EXPECT_DOUBLE_EQ(h.left.at(3, 2), 1.0);   // y=-0.12 -> row 3, x=0.31 -> col 2
  EXPECT_DOUBLE_EQ(h.right.at(7, 5), 1.0);  // y=0.40 -> row 7, x=0.74 -> col 5

  EXPECT_THROW(hand_distribution({m}, 4, {0.0, 1.0, 0.0, 1.0}), ConfigError);
}

TEST(HandDistribution, NormalizedAndUniformCoverage) {
  Rng rng(5);
  std::vector<NdArray> samples;
  for (int c = 0; c < 50; ++c) {
    NdArray m({2000, kFrameDim});
    for (int f = 0; f < 2000; ++f)
      for (int d : kTranslationDims) m.at(f, d) = rng.uniform();
    samples.push_back(std::move(m));
  }
  HandDistribution h = hand_distribution(samples, 8, {0.0, 1.0, 0.0, 1.0});
  double sum_l = 0.0, sum_r = 0.0, lo = 1.0, hi = 0.0;
  for (double v : h.left.data) {
    sum_l += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : h.right.data) sum_r += v;
  EXPECT_NEAR(sum_l, 1.0, 1e-12);
  EXPECT_NEAR(sum_r, 1.0, 1e-12);
  EXPECT_LT(hi / lo, 2.0);
}

TEST(HandDistribution, OutOfRangePositionsLandInBorderCells) {
  NdArray m({1, kFrameDim});
  m.at(0, kTranslationDims[0]) = -9.0;
  m.at(0, kTranslationDims[1]) = 9.0;
  HandDistribution h = hand_distribution({m}, 8, {0.0, 1.0, 0.0, 1.0});
  EXPECT_DOUBLE_EQ(h.left.at(7, 0), 1.0);
  double total = 0.0;
  for (double v : h.left.data) total += v;
  EXPECT_DOUBLE_EQ(total, 1.0);
}

TEST(HandDistribution, BoundsPadDegenerateAxes) {
  NdArray m({3, kFrameDim});
  for (int f = 0; f < 3; ++f) m.at(f, kTranslationDims[0]) = 0.5;
  std::array<double, 4> b = distribution_bounds({m});
  EXPECT_GT(b[1], b[0]);
  EXPECT_GT(b[3], b[2]);
  EXPECT_LE(b[0], 0.5);
  EXPECT_GE(b[1], 0.5);
}

TEST(MetricReport, EmitsEveryKeyAndMarksAbsent) {
  MetricReport r;
  r.div = 0.25;
  r.pck = 1.0;
  r.hkv = 0.125;
  r.generated_count = 8;
  r.reference_count = 8;
  r.audio_count = 4;
  std::istringstream in(r.to_text());
  std::vector<std::string> keys;
  std::string line;
  while (std::getline(in, line)) keys.push_back(line.substr(0, line.find('=')));
  std::vector<std::string> expected = {"div", "ba",  "pck",
                                       "fgd", "hkv", "generated_count",
                                       "reference_count", "audio_count"};
  EXPECT_EQ(keys, expected);
  EXPECT_NE(r.to_text().find("ba=absent"), std::string::npos);
  EXPECT_NE(r.to_text().find("fgd=absent"), std::string::npos);
  EXPECT_NE(r.to_text().find("div=0.25\n"), std::string::npos);
}

}  // namespace
}  // namespace handwave
