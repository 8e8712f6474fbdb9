#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "handwave/adam.hpp"
#include "handwave/conditioning.hpp"
#include "handwave/data.hpp"
#include "handwave/dit.hpp"
#include "handwave/errors.hpp"
#include "handwave/rng.hpp"
#include "handwave/schedule.hpp"
#include "handwave/tape.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

namespace detail {

inline NdArray vstack2(const NdArray& a, const NdArray& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("vstack: incompatible shapes " + NdArray::shape_str(a.shape) +
                     " and " + NdArray::shape_str(b.shape));
  NdArray out({a.shape[0] + b.shape[0], a.shape[1]});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
  return out;
}

}  // namespace detail

// Supervision weights: a frame contributes nothing past the clip end, and
// each block (left hand, right hand, keypoints) only where its validity bit
// is set.
inline NdArray training_weights(const MotionClip& clip, int capacity, int motion_dim) {
  if (motion_dim != kFrameDim + 2 * clip.keypoint_count())
    throw ConfigError("training_weights: model motion dimension " +
                      std::to_string(motion_dim) + " does not match clip layout");
  NdArray w({capacity, motion_dim});
  int len = clip.length();
  if (len > capacity) throw ContractError("training_weights: clip longer than capacity");
  for (int i = 0; i < len; ++i) {
    double l = clip.left_valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    double r = clip.right_valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    double k = clip.kp_valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    for (int d = 0; d < kHandParamDim; ++d) w.at(i, d) = l;
    for (int d = kHandParamDim; d < kFrameDim; ++d) w.at(i, d) = r;
    for (int d = kFrameDim; d < motion_dim; ++d) w.at(i, d) = k;
  }
  return w;
}

// Clean frames from the tail of the previous clip, right-aligned against the
// generation window so the most recent frame sits next to the first generated
// one.
struct HistoryContext {
  NdArray rows;
  std::vector<std::uint8_t> valid;
  std::vector<std::uint8_t> left;
  std::vector<std::uint8_t> right;

  static HistoryContext none(const DiTConfig& cfg) {
    HistoryContext h;
    h.rows = NdArray::zeros({cfg.history_len, cfg.motion_dim});
    h.valid.assign(static_cast<std::size_t>(cfg.history_len), 0);
    h.left = h.valid;
    h.right = h.valid;
    return h;
  }

  static HistoryContext from_clip(const DiTConfig& cfg, const MotionClip& prev) {
    if (cfg.motion_dim != kFrameDim + 2 * prev.keypoint_count())
      throw ConfigError("history: model motion dimension does not match clip layout");
    HistoryContext h = none(cfg);
    int m = std::min(cfg.history_len, prev.length());
    for (int k = 0; k < m; ++k) {
      int row = cfg.history_len - m + k;
      int frame = prev.length() - m + k;
      for (int d = 0; d < kFrameDim; ++d) h.rows.at(row, d) = prev.motion.at(frame, d);
      for (int d = 0; d < 2 * prev.keypoint_count(); ++d)
        h.rows.at(row, kFrameDim + d) = prev.keypoints.at(frame, d);
      std::size_t r = static_cast<std::size_t>(row);
      std::size_t f = static_cast<std::size_t>(frame);
      h.valid[r] = 1;
      h.left[r] = prev.left_valid[f];
      h.right[r] = prev.right_valid[f];
    }
    return h;
  }
};

struct TrainItem {
  NdArray x0;          // [capacity, motion_dim], zero past the clip end
  NdArray weights;     // [capacity, motion_dim]
  double weight_sum = 0.0;
  HistoryContext history;
  ConditionBundle cond;
  DenoiseRequest req;  // t is filled per step
};

inline TrainItem make_train_item(const DiTConfig& cfg, const Dataset& ds, int index) {
  if (index < 0 || index >= static_cast<int>(ds.entries.size()))
    throw ContractError("make_train_item: entry index out of range");
  const DatasetEntry& e = ds.entries[static_cast<std::size_t>(index)];
  if (cfg.capacity != ds.capacity)
    throw ConfigError("make_train_item: model capacity " + std::to_string(cfg.capacity) +
                      " does not match dataset capacity " + std::to_string(ds.capacity));
  if (cfg.audio_dim != ds.audio_dim)
    throw ConfigError("make_train_item: model audio dimension does not match dataset");
  if (cfg.motion_dim != kFrameDim + 2 * e.clip.keypoint_count())
    throw ConfigError("make_train_item: model motion dimension does not match clip layout");
  if (e.clip.style >= cfg.style_count)
    throw ConfigError("make_train_item: style id exceeds the model's style count");

  TrainItem item;
  item.x0 = NdArray::zeros({cfg.capacity, cfg.motion_dim});
  int len = e.clip.length();
  for (int i = 0; i < len; ++i) {
    for (int d = 0; d < kFrameDim; ++d) item.x0.at(i, d) = e.clip.motion.at(i, d);
    for (int d = 0; d < 2 * e.clip.keypoint_count(); ++d)
      item.x0.at(i, kFrameDim + d) = e.clip.keypoints.at(i, d);
  }
  item.weights = training_weights(e.clip, cfg.capacity, cfg.motion_dim);
  for (double w : item.weights.data) item.weight_sum += w;
  if (!(item.weight_sum > 0.0))
    throw ContractError("make_train_item: clip has no supervised values");

  item.history = (e.prev >= 0)
                     ? HistoryContext::from_clip(cfg, ds.entries[static_cast<std::size_t>(e.prev)].clip)
                     : HistoryContext::none(cfg);
  item.cond = build_condition(e, cfg.capacity);
  item.req.t = 0;
  item.req.history_valid = item.history.valid;
  item.req.history_left = item.history.left;
  item.req.history_right = item.history.right;
  item.req.frame_valid.assign(static_cast<std::size_t>(cfg.capacity), 0);
  for (int i = 0; i < len; ++i) item.req.frame_valid[static_cast<std::size_t>(i)] = 1;
  return item;
}

// One diffusion step and noise draw per item; injectable so tests can pin
// both.
struct StepDraw {
  int t = 0;
  NdArray eps;  // [capacity, motion_dim]
};

inline std::vector<StepDraw> draw_steps(const DiTConfig& cfg, const NoiseSchedule& sched,
                                        std::size_t count, Rng& rng) {
  std::vector<StepDraw> draws(count);
  for (StepDraw& d : draws) {
    d.t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(sched.T)));
    d.eps = NdArray::randn({cfg.capacity, cfg.motion_dim}, rng, 1.0);
  }
  return draws;
}

// Noise-prediction loss, averaged over every supervised value in the batch.
inline NodeId training_loss(Tape& tape, const DiTModel& m, const DiTModel::Binding& b,
                            const NoiseSchedule& sched, const std::vector<TrainItem>& items,
                            const std::vector<StepDraw>& draws) {
  if (items.empty()) throw ContractError("training_loss: empty batch");
  if (items.size() != draws.size())
    throw ContractError("training_loss: one draw is needed per item");
  const DiTConfig& cfg = m.config();
  double total_weight = 0.0;
  for (const TrainItem& it : items) total_weight += it.weight_sum;
  if (!(total_weight > 0.0)) throw ContractError("training_loss: nothing to supervise");

  NodeId acc = -1;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const TrainItem& it = items[i];
    const StepDraw& d = draws[i];
    NdArray x_t = forward_noise(it.x0, d.t, d.eps, sched);
    NdArray input = detail::vstack2(it.history.rows, x_t);
    DenoiseRequest req = it.req;
    req.t = d.t;
    NodeId out = m.denoise(tape, b, input, req, it.cond);
    NodeId current = tape.slice_rows(out, cfg.history_len, cfg.history_len + cfg.capacity);
    NodeId li = tape.masked_mse(current, tape.leaf(d.eps), it.weights);
    NodeId scaled = tape.scale(li, it.weight_sum);
    acc = (acc < 0) ? scaled : tape.add(acc, scaled);
  }
  return tape.scale(acc, 1.0 / total_weight);
}

// Runs one optimizer update; returns the batch loss before the update.
inline double train_step(DiTModel& m, Adam& opt, const NoiseSchedule& sched,
                         const std::vector<TrainItem>& items, Rng& rng) {
  std::vector<StepDraw> draws = draw_steps(m.config(), sched, items.size(), rng);
  Tape tape;
  DiTModel::Binding b = m.bind(tape);
  NodeId loss = training_loss(tape, m, b, sched, items, draws);
  tape.backward(loss);
  std::vector<NdArray*> params;
  std::vector<const NdArray*> grads;
  params.reserve(m.params().size());
  grads.reserve(m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    params.push_back(&m.params()[i].value);
    grads.push_back(&tape.grad(b.ids[i]));
  }
  opt.step(params, grads);
  return tape.value(loss).data[0];
}

// Predicted clean frames are clamped to this envelope before the posterior
// mean is formed. Motion values live within it by construction (axis-angle
// components stay under pi, translations and keypoints are desk-normalized),
// so in-range predictions pass through untouched; what the clamp removes is
// the runaway feedback where an off-distribution state inflates the next
// prediction error and the chain diverges over the 1/sqrt(alpha) cascade.
inline constexpr double kSampleClamp = 4.0;

// Ancestral sampling over the generation window; history rows stay clean and
// padded rows are pinned to zero after every step. Each step predicts the
// clean clip, clamps it, and draws from the forward-process posterior around
// it, which equals the usual noise-form update whenever the clamp is
// inactive. Returns [length, motion_dim].
inline NdArray sample_clip(const DiTModel& m, const NoiseSchedule& sched,
                           const ConditionBundle& cond, const HistoryContext& hist,
                           int length, Rng& rng) {
  const DiTConfig& cfg = m.config();
  if (length < 1 || length > cfg.capacity)
    throw ContractError("sample_clip: length must be in [1, capacity]");
  if (hist.rows.shape != std::vector<int>{cfg.history_len, cfg.motion_dim} ||
      static_cast<int>(hist.valid.size()) != cfg.history_len)
    throw ContractError("sample_clip: history does not match the model layout");

  DenoiseRequest req;
  req.history_valid = hist.valid;
  req.history_left = hist.left;
  req.history_right = hist.right;
  req.frame_valid.assign(static_cast<std::size_t>(cfg.capacity), 0);
  for (int i = 0; i < length; ++i) req.frame_valid[static_cast<std::size_t>(i)] = 1;

  NdArray x = NdArray::randn({cfg.capacity, cfg.motion_dim}, rng, 1.0);
  auto zero_padding = [&] {
    for (int i = length; i < cfg.capacity; ++i)
      for (int d = 0; d < cfg.motion_dim; ++d) x.at(i, d) = 0.0;
  };
  zero_padding();

  for (int t = sched.T - 1; t >= 0; --t) {
    req.t = t;
    Tape tape;
    DiTModel::Binding b = m.bind(tape);
    NodeId out = m.denoise(tape, b, detail::vstack2(hist.rows, x), req, cond);
    NodeId cur = tape.slice_rows(out, cfg.history_len, cfg.history_len + cfg.capacity);
    const NdArray& eps_hat = tape.value(cur);

    double beta = sched.beta[static_cast<std::size_t>(t)];
    double alpha = sched.alpha[static_cast<std::size_t>(t)];
    double bar = sched.alpha_bar_at(t);
    double bar_prev = sched.alpha_bar_prev(t);
    double noise_scale = std::sqrt(1.0 - bar);
    double inv_root_bar = 1.0 / std::sqrt(bar);
    double x0_coef = std::sqrt(bar_prev) * beta / (1.0 - bar);
    double xt_coef = std::sqrt(alpha) * (1.0 - bar_prev) / (1.0 - bar);
    double sigma = sched.posterior_sigma(t);
    NdArray z = (t > 0) ? NdArray::randn({cfg.capacity, cfg.motion_dim}, rng, 1.0)
                        : NdArray::zeros({cfg.capacity, cfg.motion_dim});
    for (int i = 0; i < length; ++i)
      for (int d = 0; d < cfg.motion_dim; ++d) {
        double x0_hat = (x.at(i, d) - noise_scale * eps_hat.at(i, d)) * inv_root_bar;
        x0_hat = std::clamp(x0_hat, -kSampleClamp, kSampleClamp);
        x.at(i, d) = x0_coef * x0_hat + xt_coef * x.at(i, d) + sigma * z.at(i, d);
      }
    zero_padding();
  }

  NdArray result({length, cfg.motion_dim});
  for (int i = 0; i < length; ++i)
    for (int d = 0; d < cfg.motion_dim; ++d) result.at(i, d) = x.at(i, d);
  return result;
}

}  // namespace handwave
