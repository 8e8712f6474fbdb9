#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "handwave/errors.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

using NodeId = int;

namespace detail {

// Eigen drives the three GEMM shapes the tape needs; everything stays
// single-threaded, so results are reproducible run to run.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMat> mat_view(const NdArray& m) {
  return {m.data.data(), m.shape[0], m.shape[1]};
}

inline Eigen::Map<RowMat> mat_view(NdArray& m) {
  return {m.data.data(), m.shape[0], m.shape[1]};
}

// C[m,n] = A[m,k] * B[k,n]
inline void matmul_nn(NdArray& c, const NdArray& a, const NdArray& b) {
  mat_view(c).noalias() = mat_view(a) * mat_view(b);
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void matmul_acc_nt(NdArray& c, const NdArray& a, const NdArray& b) {
  mat_view(c).noalias() += mat_view(a) * mat_view(b).transpose();
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void matmul_acc_tn(NdArray& c, const NdArray& a, const NdArray& b) {
  mat_view(c).noalias() += mat_view(a).transpose() * mat_view(b);
}

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return cdf + x * pdf;
}

}  // namespace detail

// Reverse-mode tape. Every op appends one node whose id is its creation
// index, so ids are already in topological order and backward() is a single
// reverse sweep that visits each rule exactly once. Every op checks its
// output for non-finite values and throws instead of letting NaN/Inf flow
// on; select_rows is the one sanctioned entry point for data whose masked
// rows may hold garbage, since its output replaces those rows with zeros.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NodeId leaf(NdArray value) {
    nodes_.push_back(Node{std::move(value), nullptr, "leaf"});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  const NdArray& value(NodeId id) const { return nodes_[check_id(id)].value; }

  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward()'s loss w.r.t. node `id`.
  const NdArray& grad(NodeId id) const {
    if (grads_.size() != nodes_.size())
      throw ContractError("Tape::grad: backward() has not been run on this tape");
    return grads_[check_id(id)];
  }

  // Reverse sweep from a scalar loss. Resets all gradients first, so running
  // it twice over the same tape yields identical results.
  void backward(NodeId loss) {
    const Node& ln = nodes_[check_id(loss)];
    if (ln.value.numel() != 1)
      throw ContractError("Tape::backward: loss node must be scalar, got shape " +
                          NdArray::shape_str(ln.value.shape));
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const Node& n : nodes_) grads_.emplace_back(n.value.shape);
    grads_[static_cast<std::size_t>(loss)].data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, static_cast<NodeId>(i));
    }
  }

  // --- ops -----------------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    const NdArray& av = value(a);
    const NdArray& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
      throw ShapeError("matmul: inner dimensions disagree " + NdArray::shape_str(av.shape) +
                       " vs " + NdArray::shape_str(bv.shape));
    NdArray out({av.shape[0], bv.shape[1]});
    detail::matmul_nn(out, av, bv);
    return push("matmul", std::move(out), [a, b](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      detail::matmul_acc_nt(t.grads_[static_cast<std::size_t>(a)], g, t.value(b));
      detail::matmul_acc_tn(t.grads_[static_cast<std::size_t>(b)], t.value(a), g);
    });
  }

  NodeId add(NodeId a, NodeId b) {
    const NdArray& av = value(a);
    const NdArray& bv = value(b);
    require_same_shape(av, bv, "add");
    NdArray out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
    return push("add", std::move(out), [a, b](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      accumulate(t.grads_[static_cast<std::size_t>(a)], g, 1.0);
      accumulate(t.grads_[static_cast<std::size_t>(b)], g, 1.0);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    const NdArray& av = value(a);
    const NdArray& bv = value(b);
    require_same_shape(av, bv, "sub");
    NdArray out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
    return push("sub", std::move(out), [a, b](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      accumulate(t.grads_[static_cast<std::size_t>(a)], g, 1.0);
      accumulate(t.grads_[static_cast<std::size_t>(b)], g, -1.0);
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    const NdArray& av = value(a);
    const NdArray& bv = value(b);
    require_same_shape(av, bv, "mul");
    NdArray out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
    return push("mul", std::move(out), [a, b](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& ga = t.grads_[static_cast<std::size_t>(a)];
      NdArray& gb = t.grads_[static_cast<std::size_t>(b)];
      const NdArray& av2 = t.value(a);
      const NdArray& bv2 = t.value(b);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * bv2.data[i];
        gb.data[i] += g.data[i] * av2.data[i];
      }
    });
  }

  NodeId scale(NodeId a, double c) {
    const NdArray& av = value(a);
    NdArray out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * c;
    return push("scale", std::move(out), [a, c](Tape& t, NodeId self) {
      accumulate(t.grads_[static_cast<std::size_t>(a)], t.grads_[static_cast<std::size_t>(self)], c);
    });
  }

  NodeId add_scalar(NodeId a, double c) {
    const NdArray& av = value(a);
    NdArray out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + c;
    return push("add_scalar", std::move(out), [a](Tape& t, NodeId self) {
      accumulate(t.grads_[static_cast<std::size_t>(a)], t.grads_[static_cast<std::size_t>(self)], 1.0);
    });
  }

  // x[..., C] + v[C], the one sanctioned broadcast (bias add on the last dim).
  NodeId add_rowvec(NodeId x, NodeId v) {
    const NdArray& xv = value(x);
    const NdArray& vv = value(v);
    require_rowvec(xv, vv, "add_rowvec");
    NdArray out(xv.shape);
    const int c = xv.last_dim();
    const std::size_t rows = xv.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      for (int j = 0; j < c; ++j) orow[j] = xr[j] + vv.data[static_cast<std::size_t>(j)];
    }
    return push("add_rowvec", std::move(out), [x, v](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      NdArray& gv = t.grads_[static_cast<std::size_t>(v)];
      const int c = g.last_dim();
      const std::size_t rows = g.row_count();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.row(r);
        double* gxr = gx.row(r);
        for (int j = 0; j < c; ++j) {
          gxr[j] += gr[j];
          gv.data[static_cast<std::size_t>(j)] += gr[j];
        }
      }
    });
  }

  // x[..., C] * v[C]; multiplicative companion of add_rowvec, used by the
  // adaptive-norm scale and gate paths.
  NodeId mul_rowvec(NodeId x, NodeId v) {
    const NdArray& xv = value(x);
    const NdArray& vv = value(v);
    require_rowvec(xv, vv, "mul_rowvec");
    NdArray out(xv.shape);
    const int c = xv.last_dim();
    const std::size_t rows = xv.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      for (int j = 0; j < c; ++j) orow[j] = xr[j] * vv.data[static_cast<std::size_t>(j)];
    }
    return push("mul_rowvec", std::move(out), [x, v](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      NdArray& gv = t.grads_[static_cast<std::size_t>(v)];
      const NdArray& xv2 = t.value(x);
      const NdArray& vv2 = t.value(v);
      const int c = g.last_dim();
      const std::size_t rows = g.row_count();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.row(r);
        const double* xr = xv2.row(r);
        double* gxr = gx.row(r);
        for (int j = 0; j < c; ++j) {
          gxr[j] += gr[j] * vv2.data[static_cast<std::size_t>(j)];
          gv.data[static_cast<std::size_t>(j)] += gr[j] * xr[j];
        }
      }
    });
  }

  NodeId concat_lastdim(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
    const NdArray& first = value(parts[0]);
    std::vector<int> lead(first.shape.begin(), first.shape.end() - 1);
    int total = 0;
    for (NodeId p : parts) {
      const NdArray& pv = value(p);
      if (std::vector<int>(pv.shape.begin(), pv.shape.end() - 1) != lead)
        throw ShapeError("concat_lastdim: leading dimensions disagree, " +
                         NdArray::shape_str(first.shape) + " vs " + NdArray::shape_str(pv.shape));
      total += pv.last_dim();
    }
    std::vector<int> oshape = lead;
    oshape.push_back(total);
    NdArray out(oshape);
    const std::size_t rows = out.row_count();
    std::size_t off = 0;
    std::vector<int> widths;
    for (NodeId p : parts) {
      const NdArray& pv = value(p);
      const int w = pv.last_dim();
      widths.push_back(w);
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(pv.row(r), w, out.row(r) + off);
      off += static_cast<std::size_t>(w);
    }
    std::vector<NodeId> ps = parts;
    return push("concat_lastdim", std::move(out),
                [ps = std::move(ps), widths = std::move(widths)](Tape& t, NodeId self) {
                  const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
                  const std::size_t rows = g.row_count();
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ps.size(); ++k) {
                    NdArray& gp = t.grads_[static_cast<std::size_t>(ps[k])];
                    const int w = widths[k];
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* gr = g.row(r) + off;
                      double* gpr = gp.row(r);
                      for (int j = 0; j < w; ++j) gpr[j] += gr[j];
                    }
                    off += static_cast<std::size_t>(w);
                  }
                });
  }

  std::vector<NodeId> split_lastdim(NodeId x, const std::vector<int>& sizes) {
    // copied, not referenced: the pushes below may reallocate the node store
    const NdArray xv = value(x);
    int total = 0;
    for (int s : sizes) total += s;
    if (total != xv.last_dim())
      throw ShapeError("split_lastdim: sizes sum to " + std::to_string(total) +
                       " but last dim is " + std::to_string(xv.last_dim()));
    std::vector<int> lead(xv.shape.begin(), xv.shape.end() - 1);
    std::vector<NodeId> outs;
    const std::size_t rows = xv.row_count();
    int off = 0;
    for (int w : sizes) {
      std::vector<int> oshape = lead;
      oshape.push_back(w);
      NdArray part(oshape);
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(xv.row(r) + off, w, part.row(r));
      const int this_off = off;
      outs.push_back(push("split_lastdim", std::move(part), [x, this_off, w](Tape& t, NodeId self) {
        const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
        NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
        const std::size_t rows = g.row_count();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.row(r);
          double* gxr = gx.row(r) + this_off;
          for (int j = 0; j < w; ++j) gxr[j] += gr[j];
        }
      }));
      off += w;
    }
    return outs;
  }

  // Convenience: split the last dimension into `n` equal parts.
  std::vector<NodeId> split_lastdim_equal(NodeId x, int n) {
    const int c = value(x).last_dim();
    if (n <= 0 || c % n != 0)
      throw ShapeError("split_lastdim_equal: last dim " + std::to_string(c) +
                       " not divisible by " + std::to_string(n));
    return split_lastdim(x, std::vector<int>(static_cast<std::size_t>(n), c / n));
  }

  // Same data, new shape; numel must match.
  NodeId reshape(NodeId x, std::vector<int> shape) {
    const NdArray& xv = value(x);
    if (NdArray::numel_of(shape) != xv.numel())
      throw ShapeError("reshape: cannot view " + NdArray::shape_str(xv.shape) + " as " +
                       NdArray::shape_str(shape));
    NdArray out(std::move(shape), xv.data);
    return push("reshape", std::move(out), [x](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    });
  }

  NodeId transpose_last2(NodeId x) {
    const NdArray& xv = value(x);
    if (xv.rank() != 2)
      throw ShapeError("transpose_last2: expected rank 2, got " + NdArray::shape_str(xv.shape));
    const int r = xv.shape[0], c = xv.shape[1];
    NdArray out({c, r});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
    return push("transpose_last2", std::move(out), [x](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      const int r = gx.shape[0], c = gx.shape[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gx.at(i, j) += g.at(j, i);
    });
  }

  NodeId gelu(NodeId x) {
    const NdArray& xv = value(x);
    NdArray out(xv.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = detail::gelu_value(xv.data[i]);
    return push("gelu", std::move(out), [x](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      const NdArray& xv2 = t.value(x);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gx.data[i] += g.data[i] * detail::gelu_grad(xv2.data[i]);
    });
  }

  // Row selection from an embedding table. ids are data, not nodes.
  NodeId embedding_lookup(NodeId table, const std::vector<int>& ids) {
    const NdArray& tv = value(table);
    if (tv.rank() != 2)
      throw ShapeError("embedding_lookup: table must be rank 2, got " +
                       NdArray::shape_str(tv.shape));
    const int n = tv.shape[0], d = tv.shape[1];
    for (int id : ids)
      if (id < 0 || id >= n)
        throw ContractError("embedding_lookup: id " + std::to_string(id) +
                            " out of range for table with " + std::to_string(n) + " rows");
    NdArray out({static_cast<int>(ids.size()), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
      std::copy_n(tv.row(static_cast<std::size_t>(ids[r])), d, out.row(r));
    return push("embedding_lookup", std::move(out), [table, ids](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gt = t.grads_[static_cast<std::size_t>(table)];
      const int d = gt.shape[1];
      for (std::size_t r = 0; r < ids.size(); ++r) {
        const double* gr = g.row(r);
        double* tr = gt.row(static_cast<std::size_t>(ids[r]));
        for (int j = 0; j < d; ++j) tr[j] += gr[j];
      }
    });
  }

  NodeId sum(NodeId x) {
    const NdArray& xv = value(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    return push("sum", NdArray::scalar(s), [x](Tape& t, NodeId self) {
      const double g = t.grads_[static_cast<std::size_t>(self)].data[0];
      for (double& v : t.grads_[static_cast<std::size_t>(x)].data) v += g;
    });
  }

  NodeId mean(NodeId x) {
    const NdArray& xv = value(x);
    if (xv.numel() == 0) throw ContractError("mean: empty array");
    double s = 0.0;
    for (double v : xv.data) s += v;
    const double inv = 1.0 / static_cast<double>(xv.numel());
    return push("mean", NdArray::scalar(s * inv), [x, inv](Tape& t, NodeId self) {
      const double g = t.grads_[static_cast<std::size_t>(self)].data[0] * inv;
      for (double& v : t.grads_[static_cast<std::size_t>(x)].data) v += g;
    });
  }

  NodeId mse(NodeId a, NodeId b) {
    const NdArray& av = value(a);
    const NdArray& bv = value(b);
    require_same_shape(av, bv, "mse");
    if (av.numel() == 0) throw ContractError("mse: empty array");
    double s = 0.0;
    for (std::size_t i = 0; i < av.data.size(); ++i) {
      const double d = av.data[i] - bv.data[i];
      s += d * d;
    }
    const double inv = 1.0 / static_cast<double>(av.numel());
    return push("mse", NdArray::scalar(s * inv), [a, b, inv](Tape& t, NodeId self) {
      const double g = t.grads_[static_cast<std::size_t>(self)].data[0];
      NdArray& ga = t.grads_[static_cast<std::size_t>(a)];
      NdArray& gb = t.grads_[static_cast<std::size_t>(b)];
      const NdArray& av2 = t.value(a);
      const NdArray& bv2 = t.value(b);
      for (std::size_t i = 0; i < av2.data.size(); ++i) {
        const double d = 2.0 * inv * g * (av2.data[i] - bv2.data[i]);
        ga.data[i] += d;
        gb.data[i] -= d;
      }
    });
  }

  // Weighted mean of squared errors over entries with weight > 0. Entries
  // with zero weight are skipped outright (never multiplied), so their
  // content — including NaN — cannot reach the result.
  NodeId masked_mse(NodeId pred, NodeId target, const NdArray& w) {
    const NdArray& pv = value(pred);
    const NdArray& tv = value(target);
    require_same_shape(pv, tv, "masked_mse");
    if (!pv.same_shape(w))
      throw ShapeError("masked_mse: weight shape " + NdArray::shape_str(w.shape) +
                       " does not match " + NdArray::shape_str(pv.shape));
    double total_w = 0.0, s = 0.0;
    for (std::size_t i = 0; i < pv.data.size(); ++i) {
      if (w.data[i] > 0.0) {
        const double d = pv.data[i] - tv.data[i];
        s += w.data[i] * d * d;
        total_w += w.data[i];
      }
    }
    if (total_w <= 0.0) throw ContractError("masked_mse: all entries masked out");
    const double inv = 1.0 / total_w;
    return push("masked_mse", NdArray::scalar(s * inv), [pred, target, w, inv](Tape& t, NodeId self) {
      const double g = t.grads_[static_cast<std::size_t>(self)].data[0];
      NdArray& gp = t.grads_[static_cast<std::size_t>(pred)];
      NdArray& gt = t.grads_[static_cast<std::size_t>(target)];
      const NdArray& pv2 = t.value(pred);
      const NdArray& tv2 = t.value(target);
      for (std::size_t i = 0; i < pv2.data.size(); ++i) {
        if (w.data[i] > 0.0) {
          const double d = 2.0 * inv * g * w.data[i] * (pv2.data[i] - tv2.data[i]);
          gp.data[i] += d;
          gt.data[i] -= d;
        }
      }
    });
  }

  NodeId softmax_lastdim(NodeId x) {
    const NdArray& xv = value(x);
    if (xv.last_dim() < 1) throw ShapeError("softmax_lastdim: empty last dimension");
    NdArray out(xv.shape);
    const int c = xv.last_dim();
    const std::size_t rows = xv.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      double mx = xr[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (int j = 0; j < c; ++j) {
        orow[j] = std::exp(xr[j] - mx);
        s += orow[j];
      }
      const double inv = 1.0 / s;
      for (int j = 0; j < c; ++j) orow[j] *= inv;
    }
    return push("softmax_lastdim", std::move(out), [x](Tape& t, NodeId self) {
      softmax_backward(t, self, x, nullptr);
    });
  }

  // Softmax over the last dimension with a per-column validity mask: invalid
  // columns get weight exactly 0 and receive no gradient. Used for attention
  // over padded sequences.
  NodeId masked_softmax_lastdim(NodeId x, std::vector<std::uint8_t> col_valid) {
    const NdArray& xv = value(x);
    const int c = xv.last_dim();
    if (static_cast<int>(col_valid.size()) != c)
      throw ShapeError("masked_softmax_lastdim: mask length " + std::to_string(col_valid.size()) +
                       " vs last dim " + std::to_string(c));
    bool any = false;
    for (std::uint8_t b : col_valid) any |= (b != 0);
    if (!any) throw ContractError("masked_softmax_lastdim: no valid columns");
    NdArray out(xv.shape);
    const std::size_t rows = xv.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < c; ++j)
        if (col_valid[static_cast<std::size_t>(j)]) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (int j = 0; j < c; ++j) {
        if (col_valid[static_cast<std::size_t>(j)]) {
          orow[j] = std::exp(xr[j] - mx);
          s += orow[j];
        } else {
          orow[j] = 0.0;
        }
      }
      const double inv = 1.0 / s;
      for (int j = 0; j < c; ++j) orow[j] *= inv;
    }
    auto mask = std::make_shared<std::vector<std::uint8_t>>(std::move(col_valid));
    return push("masked_softmax_lastdim", std::move(out), [x, mask](Tape& t, NodeId self) {
      softmax_backward(t, self, x, mask.get());
    });
  }

  // Layer normalization over the last dimension. Pass gain < 0 / bias < 0 to
  // skip the affine part (plain normalization).
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5) {
    const NdArray& xv = value(x);
    const int c = xv.last_dim();
    if (c < 1) throw ShapeError("layer_norm: empty last dimension");
    const bool affine = gain >= 0;
    if (affine) {
      const NdArray& gv = value(gain);
      const NdArray& bv = value(bias);
      if (static_cast<int>(gv.numel()) != c || static_cast<int>(bv.numel()) != c)
        throw ShapeError("layer_norm: gain/bias length must match last dim " + std::to_string(c));
    }
    const std::size_t rows = xv.row_count();
    NdArray out(xv.shape);
    // normalized values and inverse stddev, stashed for the backward rule
    auto xhat = std::make_shared<NdArray>(xv.shape);
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv.row(r);
      double mu = 0.0;
      for (int j = 0; j < c; ++j) mu += xr[j];
      mu /= c;
      double var = 0.0;
      for (int j = 0; j < c; ++j) {
        const double d = xr[j] - mu;
        var += d * d;
      }
      var /= c;
      const double s = 1.0 / std::sqrt(var + eps);
      (*inv_std)[r] = s;
      double* hr = xhat->row(r);
      double* orow = out.row(r);
      for (int j = 0; j < c; ++j) {
        hr[j] = (xr[j] - mu) * s;
        orow[j] = hr[j];
      }
      if (affine) {
        const NdArray& gv = value(gain);
        const NdArray& bv = value(bias);
        for (int j = 0; j < c; ++j)
          orow[j] = orow[j] * gv.data[static_cast<std::size_t>(j)] +
                    bv.data[static_cast<std::size_t>(j)];
      }
    }
    return push("layer_norm", std::move(out),
                [x, gain, bias, xhat, inv_std, affine](Tape& t, NodeId self) {
                  const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
                  NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
                  const int c = g.last_dim();
                  const std::size_t rows = g.row_count();
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.row(r);
                    const double* hr = xhat->row(r);
                    double* gxr = gx.row(r);
                    const double s = (*inv_std)[r];
                    // h = dL/dxhat
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (int j = 0; j < c; ++j) {
                      const double h = affine
                          ? gr[j] * t.value(gain).data[static_cast<std::size_t>(j)]
                          : gr[j];
                      mean_h += h;
                      mean_hx += h * hr[j];
                    }
                    mean_h /= c;
                    mean_hx /= c;
                    for (int j = 0; j < c; ++j) {
                      const double h = affine
                          ? gr[j] * t.value(gain).data[static_cast<std::size_t>(j)]
                          : gr[j];
                      gxr[j] += s * (h - mean_h - hr[j] * mean_hx);
                    }
                    if (affine) {
                      NdArray& gg = t.grads_[static_cast<std::size_t>(gain)];
                      NdArray& gb = t.grads_[static_cast<std::size_t>(bias)];
                      for (int j = 0; j < c; ++j) {
                        gg.data[static_cast<std::size_t>(j)] += gr[j] * hr[j];
                        gb.data[static_cast<std::size_t>(j)] += gr[j];
                      }
                    }
                  }
                });
  }

  NodeId layer_norm_plain(NodeId x, double eps = 1e-5) { return layer_norm(x, -1, -1, eps); }

  // Row gate: output row r equals input row r where keep[r] != 0 and exactly
  // zero otherwise. Dropped rows are never read, so this is the entry gate
  // for buffers whose padding region may hold arbitrary garbage.
  NodeId select_rows(NodeId x, std::vector<std::uint8_t> keep) {
    const NdArray& xv = value(x);
    const std::size_t rows = xv.row_count();
    if (keep.size() != rows)
      throw ShapeError("select_rows: mask length " + std::to_string(keep.size()) + " vs " +
                       std::to_string(rows) + " rows");
    NdArray out(xv.shape);
    const int c = xv.last_dim();
    for (std::size_t r = 0; r < rows; ++r) {
      if (keep[r]) std::copy_n(xv.row(r), c, out.row(r));
    }
    auto mask = std::make_shared<std::vector<std::uint8_t>>(std::move(keep));
    return push("select_rows", std::move(out), [x, mask](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      const int c = g.last_dim();
      const std::size_t rows = g.row_count();
      for (std::size_t r = 0; r < rows; ++r) {
        if (!(*mask)[r]) continue;
        const double* gr = g.row(r);
        double* gxr = gx.row(r);
        for (int j = 0; j < c; ++j) gxr[j] += gr[j];
      }
    });
  }

  NodeId slice_rows(NodeId x, int begin, int end) {
    const NdArray& xv = value(x);
    const std::size_t rows = xv.row_count();
    if (begin < 0 || end < begin || static_cast<std::size_t>(end) > rows)
      throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") out of bounds for " + std::to_string(rows) + " rows");
    if (xv.rank() != 2) throw ShapeError("slice_rows: expected rank 2");
    const int c = xv.last_dim();
    NdArray out({end - begin, c});
    for (int r = begin; r < end; ++r)
      std::copy_n(xv.row(static_cast<std::size_t>(r)), c, out.row(static_cast<std::size_t>(r - begin)));
    return push("slice_rows", std::move(out), [x, begin](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      const int c = g.last_dim();
      const std::size_t rows = g.row_count();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.row(r);
        double* gxr = gx.row(r + static_cast<std::size_t>(begin));
        for (int j = 0; j < c; ++j) gxr[j] += gr[j];
      }
    });
  }

  // Elementwise square root. Inputs must be non-negative; the gradient is
  // clamped near zero to stay finite.
  NodeId sqrt_op(NodeId x) {
    const NdArray& xv = value(x);
    NdArray out(xv.shape);
    for (std::size_t i = 0; i < xv.data.size(); ++i) {
      if (xv.data[i] < 0.0)
        throw NumericError("sqrt_op: negative input " + std::to_string(xv.data[i]));
      out.data[i] = std::sqrt(xv.data[i]);
    }
    return push("sqrt_op", std::move(out), [x](Tape& t, NodeId self) {
      const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
      const NdArray& yv = t.value(self);
      NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gx.data[i] += g.data[i] * 0.5 / std::max(yv.data[i], 1e-12);
    });
  }

 private:
  struct Node {
    NdArray value;
    std::function<void(Tape&, NodeId)> backward;
    const char* op;
  };

  std::size_t check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw ContractError("Tape: node id " + std::to_string(id) + " out of range");
    return static_cast<std::size_t>(id);
  }

  NodeId push(const char* op, NdArray value, std::function<void(Tape&, NodeId)> bw) {
    for (double v : value.data) {
      if (!std::isfinite(v))
        throw NumericError(std::string(op) + ": non-finite value in output");
    }
    nodes_.push_back(Node{std::move(value), std::move(bw), op});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  static void require_same_shape(const NdArray& a, const NdArray& b, const char* op) {
    if (!a.same_shape(b))
      throw ShapeError(std::string(op) + ": shape mismatch " + NdArray::shape_str(a.shape) +
                       " vs " + NdArray::shape_str(b.shape));
  }

  static void require_rowvec(const NdArray& x, const NdArray& v, const char* op) {
    if (v.rank() != 1 || v.shape[0] != x.last_dim())
      throw ShapeError(std::string(op) + ": vector shape " + NdArray::shape_str(v.shape) +
                       " does not match last dim of " + NdArray::shape_str(x.shape));
  }

  static void accumulate(NdArray& dst, const NdArray& src, double c) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += c * src.data[i];
  }

  static void softmax_backward(Tape& t, NodeId self, NodeId x,
                               const std::vector<std::uint8_t>* mask) {
    const NdArray& g = t.grads_[static_cast<std::size_t>(self)];
    const NdArray& y = t.value(self);
    NdArray& gx = t.grads_[static_cast<std::size_t>(x)];
    const int c = y.last_dim();
    const std::size_t rows = y.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.row(r);
      const double* yr = y.row(r);
      double* gxr = gx.row(r);
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < c; ++j) {
        if (mask && !(*mask)[static_cast<std::size_t>(j)]) continue;
        gxr[j] += yr[j] * (gr[j] - dot);
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<NdArray> grads_;

  friend struct TapeTestPeer;
};

}  // namespace handwave
