#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "handwave/data.hpp"
#include "handwave/errors.hpp"
#include "handwave/kinematics.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

// Columns of a packed motion row holding the two hand root translations.
inline constexpr std::array<int, 6> kTranslationDims = {
    kQuatValuesPerHand,     kQuatValuesPerHand + 1,     kQuatValuesPerHand + 2,
    kHandParamDim + kQuatValuesPerHand, kHandParamDim + kQuatValuesPerHand + 1,
    kHandParamDim + kQuatValuesPerHand + 2};

namespace detail {

inline void require_motion(const NdArray& m, const char* where) {
  if (m.rank() != 2 || m.shape[0] < 1 || m.shape[1] < kFrameDim)
    throw ContractError(std::string(where) + ": need a [frames, dim>=134] motion matrix, got " +
                        NdArray::shape_str(m.shape));
}

inline std::array<double, 6> translations(const NdArray& m, int f) {
  std::array<double, 6> t;
  for (std::size_t i = 0; i < 6; ++i) t[i] = m.at(f, kTranslationDims[i]);
  return t;
}

// Speed of the 6-dof hand translation vector between consecutive frames.
inline double translation_speed(const NdArray& m, int f) {
  double s = 0.0;
  for (int d : kTranslationDims) {
    const double diff = m.at(f, d) - m.at(f - 1, d);
    s += diff * diff;
  }
  return std::sqrt(s);
}

inline double nearest_rank_percentile(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  std::size_t rank = static_cast<std::size_t>(std::ceil(pct * static_cast<double>(n)));
  if (rank < 1) rank = 1;
  if (rank > n) rank = n;
  return v[rank - 1];
}

}  // namespace detail

// Mean pairwise distance between hand-translation trajectories, reduced to a
// per-coordinate RMS so the value does not grow with clip length.
inline double diversity(const std::vector<NdArray>& samples) {
  if (samples.size() < 2) throw ContractError("diversity: need at least 2 samples");
  const int frames = samples[0].shape[0];
  for (const NdArray& s : samples) {
    detail::require_motion(s, "diversity");
    if (s.shape[0] != frames) throw ContractError("diversity: samples must share their length");
  }
  double acc = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      double sq = 0.0;
      for (int f = 0; f < frames; ++f)
        for (int d : kTranslationDims) {
          const double diff = samples[i].at(f, d) - samples[j].at(f, d);
          sq += diff * diff;
        }
      acc += std::sqrt(sq / (static_cast<double>(frames) * 6.0));
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

// Audio beats: strict local maxima of the per-row feature energy above its
// 75th percentile. Motion beats: strict local minima of translation speed.
// Both tracks must already run at the same fps.
inline double beat_align(const NdArray& audio, const NdArray& motion, double fps,
                         double sigma = 0.1) {
  if (audio.rank() != 2 || audio.shape[0] < 3)
    throw ContractError("beat_align: need a [rows>=3, dim] audio matrix");
  detail::require_motion(motion, "beat_align");
  if (fps <= 0.0) throw ContractError("beat_align: fps must be positive");
  if (sigma <= 0.0) throw ContractError("beat_align: sigma must be positive");

  const int rows = audio.shape[0];
  std::vector<double> energy(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double e = 0.0;
    for (int j = 0; j < audio.shape[1]; ++j) e += audio.at(r, j) * audio.at(r, j);
    energy[static_cast<std::size_t>(r)] = e;
  }
  const double threshold = detail::nearest_rank_percentile(energy, 0.75);
  std::vector<double> audio_beats;
  for (int r = 1; r + 1 < rows; ++r) {
    const std::size_t i = static_cast<std::size_t>(r);
    if (energy[i] > energy[i - 1] && energy[i] > energy[i + 1] && energy[i] > threshold)
      audio_beats.push_back(static_cast<double>(r) / fps);
  }

  const int frames = motion.shape[0];
  std::vector<double> motion_beats;
  for (int f = 2; f + 1 < frames; ++f) {
    const double s = detail::translation_speed(motion, f);
    if (s < detail::translation_speed(motion, f - 1) &&
        s < detail::translation_speed(motion, f + 1))
      motion_beats.push_back(static_cast<double>(f) / fps);
  }

  if (audio_beats.empty()) throw MetricUndefined("beat_align: no audio beats detected");
  if (motion_beats.empty()) throw MetricUndefined("beat_align: no motion beats detected");

  double acc = 0.0;
  for (double tm : motion_beats) {
    double best = std::numeric_limits<double>::infinity();
    for (double tb : audio_beats) best = std::min(best, (tm - tb) * (tm - tb));
    acc += std::exp(-best / (2.0 * sigma * sigma));
  }
  return acc / static_cast<double>(motion_beats.size());
}

// Fraction of (frame, hand) pairs whose root translation lies within delta of
// the reference.
inline double pck(const NdArray& generated, const NdArray& reference, double delta = 0.1) {
  detail::require_motion(generated, "pck");
  detail::require_motion(reference, "pck");
  if (generated.shape[0] != reference.shape[0])
    throw ContractError("pck: length mismatch, " + std::to_string(generated.shape[0]) + " vs " +
                        std::to_string(reference.shape[0]));
  if (delta <= 0.0) throw ContractError("pck: delta must be positive");
  const int frames = generated.shape[0];
  int hits = 0;
  for (int f = 0; f < frames; ++f)
    for (int hand = 0; hand < 2; ++hand) {
      double sq = 0.0;
      for (int a = 0; a < 3; ++a) {
        const int d = kTranslationDims[static_cast<std::size_t>(3 * hand + a)];
        const double diff = generated.at(f, d) - reference.at(f, d);
        sq += diff * diff;
      }
      if (std::sqrt(sq) < delta) ++hits;
    }
  return static_cast<double>(hits) / (2.0 * static_cast<double>(frames));
}

inline constexpr int kClipFeatureDim = 24;

// Per-clip feature: mean and standard deviation of the 6-dof translation
// trajectory and of its per-frame deltas. Population statistics throughout.
inline std::vector<double> clip_motion_features(const NdArray& motion) {
  detail::require_motion(motion, "clip_motion_features");
  const int frames = motion.shape[0];
  if (frames < 2) throw ContractError("clip_motion_features: need at least 2 frames");
  std::vector<double> feat(kClipFeatureDim, 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    const int d = kTranslationDims[i];
    double mean = 0.0, mean_sq = 0.0;
    for (int f = 0; f < frames; ++f) {
      mean += motion.at(f, d);
      mean_sq += motion.at(f, d) * motion.at(f, d);
    }
    mean /= frames;
    mean_sq /= frames;
    feat[i] = mean;
    feat[6 + i] = std::sqrt(std::max(0.0, mean_sq - mean * mean));

    double dmean = 0.0, dmean_sq = 0.0;
    for (int f = 1; f < frames; ++f) {
      const double diff = motion.at(f, d) - motion.at(f - 1, d);
      dmean += diff;
      dmean_sq += diff * diff;
    }
    dmean /= (frames - 1);
    dmean_sq /= (frames - 1);
    feat[12 + i] = dmean;
    feat[18 + i] = std::sqrt(std::max(0.0, dmean_sq - dmean * dmean));
  }
  return feat;
}

struct GaussianSummary {
  std::vector<double> mean;
  NdArray cov;  // [d, d], symmetrized
};

inline GaussianSummary summarize_features(const std::vector<std::vector<double>>& feats) {
  if (feats.empty()) throw ContractError("summarize_features: empty feature set");
  const std::size_t d = feats[0].size();
  for (const std::vector<double>& f : feats)
    if (f.size() != d) throw ContractError("summarize_features: inconsistent feature dims");
  GaussianSummary g;
  g.mean.assign(d, 0.0);
  for (const std::vector<double>& f : feats)
    for (std::size_t i = 0; i < d; ++i) g.mean[i] += f[i];
  const double n = static_cast<double>(feats.size());
  for (double& m : g.mean) m /= n;
  g.cov = NdArray({static_cast<int>(d), static_cast<int>(d)});
  for (const std::vector<double>& f : feats)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        g.cov.at(static_cast<int>(i), static_cast<int>(j)) +=
            (f[i] - g.mean[i]) * (f[j] - g.mean[j]) / n;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      const double s = 0.5 * (g.cov.at(static_cast<int>(i), static_cast<int>(j)) +
                              g.cov.at(static_cast<int>(j), static_cast<int>(i)));
      g.cov.at(static_cast<int>(i), static_cast<int>(j)) = s;
      g.cov.at(static_cast<int>(j), static_cast<int>(i)) = s;
    }
  return g;
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const NdArray& m) {
  Eigen::MatrixXd out(m.shape[0], m.shape[1]);
  for (int i = 0; i < m.shape[0]; ++i)
    for (int j = 0; j < m.shape[1]; ++j) out(i, j) = m.at(i, j);
  return out;
}

// Square root of a symmetric PSD matrix. Eigenvalues below -1e-8 mean the
// input was not a covariance; smaller negatives are rounding and clamp to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* where) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw NumericError(std::string(where) + ": eigendecomposition did not converge");
  Eigen::VectorXd lam = es.eigenvalues();
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam(i) < -1e-8)
      throw NumericError(std::string(where) + ": eigenvalue " + std::to_string(lam(i)) +
                         " below PSD tolerance");
    lam(i) = std::sqrt(std::max(0.0, lam(i)));
  }
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Fréchet distance between Gaussians: |mu1-mu2|^2 + Tr(S1+S2-2(S1 S2)^{1/2}),
// with the cross term computed as sqrt(S1)^T S2 sqrt(S1) to stay symmetric.
inline double fgd_from_summaries(const GaussianSummary& a, const GaussianSummary& b) {
  const std::size_t d = a.mean.size();
  if (b.mean.size() != d || a.cov.shape[0] != static_cast<int>(d) ||
      b.cov.shape[0] != static_cast<int>(d))
    throw ContractError("fgd: summary dimensions disagree");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);

  const Eigen::MatrixXd sa = detail::to_eigen(a.cov);
  const Eigen::MatrixXd sb = detail::to_eigen(b.cov);
  const Eigen::MatrixXd root_a = detail::psd_sqrt(sa, "fgd");
  Eigen::MatrixXd cross = root_a * sb * root_a;
  cross = 0.5 * (cross + cross.transpose()).eval();
  const Eigen::MatrixXd root_cross = detail::psd_sqrt(cross, "fgd");
  const double value = mean_term + sa.trace() + sb.trace() - 2.0 * root_cross.trace();
  if (!std::isfinite(value)) throw NumericError("fgd: non-finite result");
  return std::max(0.0, value);
}

// Distribution distance between two sets of clips. Each set needs more
// feature vectors than the feature has dimensions for a usable covariance.
inline double fgd(const std::vector<NdArray>& set_a, const std::vector<NdArray>& set_b) {
  const std::size_t need = kClipFeatureDim + 1;
  if (set_a.size() < need || set_b.size() < need)
    throw MetricUndefined("fgd: needs at least " + std::to_string(need) +
                          " clips per set, got " + std::to_string(set_a.size()) + " and " +
                          std::to_string(set_b.size()));
  std::vector<std::vector<double>> fa, fb;
  fa.reserve(set_a.size());
  fb.reserve(set_b.size());
  for (const NdArray& m : set_a) fa.push_back(clip_motion_features(m));
  for (const NdArray& m : set_b) fb.push_back(clip_motion_features(m));
  return fgd_from_summaries(summarize_features(fa), summarize_features(fb));
}

// Mean per-coordinate population variance across time, averaged over
// sequences. Input rows are frames, columns are keypoint coordinates.
inline double hkv(const std::vector<NdArray>& sequences) {
  if (sequences.empty()) throw ContractError("hkv: empty sequence set");
  double acc = 0.0;
  for (const NdArray& s : sequences) {
    if (s.rank() != 2 || s.shape[0] < 1 || s.shape[1] < 1)
      throw ContractError("hkv: need [frames, coords] matrices, got " +
                          NdArray::shape_str(s.shape));
    const int frames = s.shape[0], coords = s.shape[1];
    double var_sum = 0.0;
    for (int c = 0; c < coords; ++c) {
      // Shifted one-pass variance: subtracting the first frame keeps a
      // motionless track at exactly zero and conditions the cancellation.
      const double shift = s.at(0, c);
      double mean = 0.0, mean_sq = 0.0;
      for (int f = 0; f < frames; ++f) {
        const double d = s.at(f, c) - shift;
        mean += d;
        mean_sq += d * d;
      }
      mean /= frames;
      mean_sq /= frames;
      var_sum += std::max(0.0, mean_sq - mean * mean);
    }
    acc += var_sum / static_cast<double>(coords);
  }
  return acc / static_cast<double>(sequences.size());
}

struct HandDistribution {
  int grid = 0;
  double lo_x = 0.0, hi_x = 1.0, lo_y = 0.0, hi_y = 1.0;
  NdArray left;   // [grid, grid], cells sum to 1
  NdArray right;
};

// Normalized 2-D histograms of the xy hand positions over all frames and
// samples. bounds = {lo_x, hi_x, lo_y, hi_y}; positions outside land in the
// border cells so mass is never dropped.
inline HandDistribution hand_distribution(const std::vector<NdArray>& samples, int grid,
                                          std::array<double, 4> bounds) {
  if (grid < 8) throw ConfigError("hand_distribution: grid resolution must be >= 8");
  if (samples.empty()) throw ContractError("hand_distribution: empty sample set");
  if (!(bounds[1] > bounds[0]) || !(bounds[3] > bounds[2]))
    throw ContractError("hand_distribution: bounds must have positive extent");
  HandDistribution h;
  h.grid = grid;
  h.lo_x = bounds[0];
  h.hi_x = bounds[1];
  h.lo_y = bounds[2];
  h.hi_y = bounds[3];
  h.left = NdArray({grid, grid});
  h.right = NdArray({grid, grid});
  auto bin = [grid](double v, double lo, double hi) {
    const double u = (v - lo) / (hi - lo);
    int i = static_cast<int>(std::floor(u * static_cast<double>(grid)));
    return std::clamp(i, 0, grid - 1);
  };
  double count = 0.0;
  for (const NdArray& m : samples) {
    detail::require_motion(m, "hand_distribution");
    for (int f = 0; f < m.shape[0]; ++f) {
      const std::array<double, 6> t = detail::translations(m, f);
      h.left.at(bin(t[1], h.lo_y, h.hi_y), bin(t[0], h.lo_x, h.hi_x)) += 1.0;
      h.right.at(bin(t[4], h.lo_y, h.hi_y), bin(t[3], h.lo_x, h.hi_x)) += 1.0;
      count += 1.0;
    }
  }
  for (double& v : h.left.data) v /= count;
  for (double& v : h.right.data) v /= count;
  return h;
}

// Bounds spanning every hand position in the samples, padded so a degenerate
// axis still has extent.
inline std::array<double, 4> distribution_bounds(const std::vector<NdArray>& samples) {
  if (samples.empty()) throw ContractError("distribution_bounds: empty sample set");
  double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x;
  double lo_y = lo_x, hi_y = -lo_x;
  for (const NdArray& m : samples) {
    detail::require_motion(m, "distribution_bounds");
    for (int f = 0; f < m.shape[0]; ++f) {
      const std::array<double, 6> t = detail::translations(m, f);
      for (int hand = 0; hand < 2; ++hand) {
        lo_x = std::min(lo_x, t[static_cast<std::size_t>(3 * hand)]);
        hi_x = std::max(hi_x, t[static_cast<std::size_t>(3 * hand)]);
        lo_y = std::min(lo_y, t[static_cast<std::size_t>(3 * hand + 1)]);
        hi_y = std::max(hi_y, t[static_cast<std::size_t>(3 * hand + 1)]);
      }
    }
  }
  if (hi_x - lo_x < 1e-9) {
    lo_x -= 0.5;
    hi_x += 0.5;
  }
  if (hi_y - lo_y < 1e-9) {
    lo_y -= 0.5;
    hi_y += 0.5;
  }
  return {lo_x, hi_x, lo_y, hi_y};
}

struct MetricReport {
  std::optional<double> div, ba, pck, fgd, hkv;
  int generated_count = 0;
  int reference_count = 0;
  int audio_count = 0;

  std::string to_text() const {
    auto line = [](const char* key, const std::optional<double>& v) {
      if (!v) return std::string(key) + "=absent\n";
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", *v);
      return std::string(key) + "=" + buf + "\n";
    };
    std::string out;
    out += line("div", div);
    out += line("ba", ba);
    out += line("pck", pck);
    out += line("fgd", fgd);
    out += line("hkv", hkv);
    out += "generated_count=" + std::to_string(generated_count) + "\n";
    out += "reference_count=" + std::to_string(reference_count) + "\n";
    out += "audio_count=" + std::to_string(audio_count) + "\n";
    return out;
  }
};

inline void write_matrix_csv(const std::string& path, const NdArray& m) {
  if (m.rank() != 2) throw ContractError("write_matrix_csv: need a rank-2 matrix");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  char buf[64];
  for (int i = 0; i < m.shape[0]; ++i) {
    for (int j = 0; j < m.shape[1]; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.at(i, j));
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
  if (!out.good()) throw IoError("failed writing " + path);
}

}  // namespace handwave
