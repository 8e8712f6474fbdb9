#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "handwave/errors.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are created on the first step and
// from then on the parameter list must keep the same shapes in the same order,
// since checkpoints serialize the buffers positionally.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(std::vector<NdArray*>& params, const std::vector<const NdArray*>& grads) {
    if (params.size() != grads.size())
      throw ContractError("Adam::step: " + std::to_string(params.size()) + " params vs " +
                          std::to_string(grads.size()) + " grads");
    if (m_.empty()) {
      for (const NdArray* p : params) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
      }
    }
    if (m_.size() != params.size())
      throw ContractError("Adam::step: parameter count changed after first step");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      NdArray& p = *params[i];
      const NdArray& g = *grads[i];
      if (!p.same_shape(g))
        throw ShapeError("Adam::step: grad shape " + NdArray::shape_str(g.shape) +
                         " does not match param " + NdArray::shape_str(p.shape));
      NdArray& m = m_[i];
      NdArray& v = v_[i];
      for (std::size_t j = 0; j < p.data.size(); ++j) {
        const double gj = g.data[j];
        m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * gj;
        v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m.data[j] / c1;
        const double vhat = v.data[j] / c2;
        p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return t_; }
  std::vector<NdArray>& moment1() { return m_; }
  std::vector<NdArray>& moment2() { return v_; }
  const std::vector<NdArray>& moment1() const { return m_; }
  const std::vector<NdArray>& moment2() const { return v_; }

  // Restores serialized state; shapes are validated on the next step().
  void restore(long t, std::vector<NdArray> m, std::vector<NdArray> v) {
    if (m.size() != v.size())
      throw ContractError("Adam::restore: moment buffer counts disagree");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<NdArray> m_;
  std::vector<NdArray> v_;
};

}  // namespace handwave
