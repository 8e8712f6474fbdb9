#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "handwave/errors.hpp"
#include "handwave/tape.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

// Forward-process schedule. alpha_bar[t] is the running product of
// (1 - beta) in double precision.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  void check_t(int t) const {
    if (t < 0 || t >= T)
      throw ContractError("NoiseSchedule: timestep " + std::to_string(t) +
                          " out of range [0," + std::to_string(T) + ")");
  }

  double alpha_bar_at(int t) const {
    check_t(t);
    return alpha_bar[static_cast<std::size_t>(t)];
  }

  // alpha_bar of the step before t, with the t=0 convention of 1.
  double alpha_bar_prev(int t) const {
    check_t(t);
    return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t) - 1];
  }

  // Posterior stddev sqrt(beta_tilde); zero at t=0, so the final ancestral
  // step is deterministic.
  double posterior_sigma(int t) const {
    check_t(t);
    if (t == 0) return 0.0;
    const double ab = alpha_bar[static_cast<std::size_t>(t)];
    const double ab_prev = alpha_bar[static_cast<std::size_t>(t) - 1];
    const double bt = beta[static_cast<std::size_t>(t)];
    return std::sqrt((1.0 - ab_prev) / (1.0 - ab) * bt);
  }
};

inline NoiseSchedule make_schedule(const std::string& kind, int T, double beta_start,
                                   double beta_end) {
  if (kind != "linear")
    throw ConfigError("make_schedule: unknown schedule kind '" + kind + "' (supported: linear)");
  if (T < 1) throw ConfigError("make_schedule: T must be >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1, got [" +
                      std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[static_cast<std::size_t>(t)] = b;
    s.alpha[static_cast<std::size_t>(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<std::size_t>(t)] = prod;
  }
  return s;
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline NdArray forward_noise(const NdArray& x0, int t, const NdArray& eps,
                             const NoiseSchedule& s) {
  if (!x0.same_shape(eps))
    throw ShapeError("forward_noise: x0 shape " + NdArray::shape_str(x0.shape) +
                     " vs eps shape " + NdArray::shape_str(eps.shape));
  const double ab = s.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  NdArray out(x0.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

// One-step inversion of forward_noise given a noise estimate.
inline NdArray predict_x0(const NdArray& z_t, const NdArray& eps_hat, int t,
                          const NoiseSchedule& s) {
  if (!z_t.same_shape(eps_hat))
    throw ShapeError("predict_x0: z_t shape " + NdArray::shape_str(z_t.shape) +
                     " vs eps_hat shape " + NdArray::shape_str(eps_hat.shape));
  const double ab = s.alpha_bar_at(t);
  if (ab < 1e-12)
    throw NumericError("predict_x0: alpha_bar at t=" + std::to_string(t) +
                       " is below 1e-12; inversion is ill-conditioned");
  const double b = std::sqrt(1.0 - ab), inv_a = 1.0 / std::sqrt(ab);
  NdArray out(z_t.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = (z_t.data[i] - b * eps_hat.data[i]) * inv_a;
  return out;
}

// Same inversion expressed in tape ops, for losses that differentiate
// through the latent prediction.
inline NodeId predict_x0(Tape& tape, NodeId z_t, NodeId eps_hat, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar_at(t);
  if (ab < 1e-12)
    throw NumericError("predict_x0: alpha_bar at t=" + std::to_string(t) +
                       " is below 1e-12; inversion is ill-conditioned");
  const double b = std::sqrt(1.0 - ab), inv_a = 1.0 / std::sqrt(ab);
  return tape.scale(tape.sub(z_t, tape.scale(eps_hat, b)), inv_a);
}

}  // namespace handwave
