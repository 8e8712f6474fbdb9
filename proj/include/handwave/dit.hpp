#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "handwave/conditioning.hpp"
#include "handwave/errors.hpp"
#include "handwave/rng.hpp"
#include "handwave/tape.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

struct DiTConfig {
  int depth = 4;
  int hidden = 64;
  int heads = 4;
  int motion_dim = kFrameDim;
  int audio_dim = 8;
  int capacity = 64;
  int history_len = 8;
  int style_count = 1;
  int bucket_count = 8;
  int ref_dim = 4;

  bool operator==(const DiTConfig&) const = default;

  void validate() const {
    if (depth < 1) throw ConfigError("model depth must be at least 1");
    if (hidden < 2 || hidden % 2 != 0)
      throw ConfigError("hidden width must be a positive even number");
    if (heads < 1 || hidden % heads != 0)
      throw ConfigError("hidden width must be divisible by the head count");
    if (motion_dim < 1) throw ConfigError("motion dimension must be positive");
    if (audio_dim < 1) throw ConfigError("audio dimension must be positive");
    if (capacity < 1) throw ConfigError("capacity must be positive");
    if (history_len < 0) throw ConfigError("history length must be non-negative");
    if (capacity < history_len + 1)
      throw ConfigError("capacity must exceed the history length");
    if (style_count < 1) throw ConfigError("style count must be positive");
    if (bucket_count < 2) throw ConfigError("bucket count must be at least 2");
    if (ref_dim < 1) throw ConfigError("reference feature dimension must be positive");
  }

  int rows() const { return history_len + capacity; }
};

// Half sines, half cosines over geometrically spaced frequencies; step 0 maps
// to zeros and ones exactly.
inline NdArray timestep_sinusoid(int t, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw ContractError("timestep embedding needs a positive even dimension");
  NdArray out({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                           static_cast<double>(half));
    double angle = static_cast<double>(t) * freq;
    out.data[static_cast<std::size_t>(i)] = std::sin(angle);
    out.data[static_cast<std::size_t>(half + i)] = std::cos(angle);
  }
  return out;
}

// Everything the denoiser needs beyond the conditioning bundle: the step,
// which history rows hold real frames, and which generation rows lie inside
// the clip. Hand bits for history rows come from the previous clip.
struct DenoiseRequest {
  int t = 0;
  std::vector<std::uint8_t> history_valid;
  std::vector<std::uint8_t> history_left;
  std::vector<std::uint8_t> history_right;
  std::vector<std::uint8_t> frame_valid;

  void validate(const DiTConfig& cfg) const {
    if (t < 0) throw ContractError("diffusion step must be non-negative");
    auto need = [](const std::vector<std::uint8_t>& bits, int n, const char* what) {
      if (static_cast<int>(bits.size()) != n)
        throw ContractError(std::string(what) + " bit vector has the wrong length");
      for (std::uint8_t b : bits)
        if (b > 1) throw ContractError(std::string(what) + " bits must be 0 or 1");
    };
    need(history_valid, cfg.history_len, "history validity");
    need(history_left, cfg.history_len, "history left-hand");
    need(history_right, cfg.history_len, "history right-hand");
    need(frame_valid, cfg.capacity, "frame validity");
    bool any = false;
    for (std::uint8_t b : frame_valid) any = any || b != 0;
    if (!any) throw ContractError("at least one generation row must be valid");
  }
};

struct Param {
  std::string name;
  NdArray value;
};

class DiTModel {
 public:
  struct Binding {
    std::vector<NodeId> ids;
  };

  static DiTModel build(const DiTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DiTModel m;
    m.cfg_ = cfg;
    m.buckets_ = BucketSpec::default_spec(cfg.bucket_count);
    Rng rng(seed);
    const int h = cfg.hidden;
    auto weight = [&](std::string name, int rows, int cols) {
      double std_dev = 1.0 / std::sqrt(static_cast<double>(rows));
      m.add(std::move(name), NdArray::randn({rows, cols}, rng, std_dev));
    };
    auto table = [&](std::string name, int rows, int cols) {
      m.add(std::move(name), NdArray::randn({rows, cols}, rng, 0.02));
    };
    auto zeros2 = [&](std::string name, int rows, int cols) {
      m.add(std::move(name), NdArray::zeros({rows, cols}));
    };
    auto bias = [&](std::string name, int n) {
      m.add(std::move(name), NdArray::zeros({n}));
    };

    weight("input.W", cfg.motion_dim, h);
    bias("input.b", h);
    table("pos", cfg.rows(), h);
    table("mask.left", 2, h);
    table("mask.right", 2, h);
    weight("tmlp.W1", h, h);
    bias("tmlp.b1", h);
    weight("tmlp.W2", h, h);
    bias("tmlp.b2", h);
    table("style.table", cfg.style_count, h);
    table("amp.left", cfg.bucket_count, h);
    table("amp.right", cfg.bucket_count, h);
    weight("offset.W", 7, h);
    bias("offset.b", h);
    weight("ref.W", cfg.ref_dim, h);
    bias("ref.b", h);
    weight("audio.W", cfg.audio_dim, h);
    bias("audio.b", h);
    weight("adaln.W1", h, h);
    bias("adaln.b1", h);
    zeros2("adaln.W2", h, 6 * h);
    bias("adaln.b2", 6 * h);
    zeros2("adaln.block", cfg.depth, 6 * h);
    for (int i = 0; i < cfg.depth; ++i) {
      std::string p = "block" + std::to_string(i) + ".";
      weight(p + "attn.Wq", h, h);
      bias(p + "attn.bq", h);
      weight(p + "attn.Wk", h, h);
      bias(p + "attn.bk", h);
      weight(p + "attn.Wv", h, h);
      bias(p + "attn.bv", h);
      // Gated branches keep live output projections: with both the gate and
      // the projection at zero, neither would ever receive gradient and the
      // branch could not open during training. The zero gate alone makes the
      // block an identity at init.
      weight(p + "attn.Wo", h, h);
      bias(p + "attn.bo", h);
      weight(p + "cross.Wq", h, h);
      bias(p + "cross.bq", h);
      weight(p + "cross.Wk", h, h);
      bias(p + "cross.bk", h);
      weight(p + "cross.Wv", h, h);
      bias(p + "cross.bv", h);
      zeros2(p + "cross.Wo", h, h);
      bias(p + "cross.bo", h);
      weight(p + "mlp.W1", h, 4 * h);
      bias(p + "mlp.b1", 4 * h);
      weight(p + "mlp.W2", 4 * h, h);
      bias(p + "mlp.b2", h);
    }
    m.add("head.ln_g", NdArray::full({h}, 1.0));
    bias("head.ln_b", h);
    zeros2("head.W", h, cfg.motion_dim);
    bias("head.b", cfg.motion_dim);
    return m;
  }

  const DiTConfig& config() const { return cfg_; }
  const BucketSpec& buckets() const { return buckets_; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  NdArray& param(const std::string& name) {
    return params_[index_of(name)].value;
  }
  const NdArray& param(const std::string& name) const {
    return params_[index_of(name)].value;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.value.numel();
    return n;
  }

  Binding bind(Tape& tape) const {
    Binding b;
    b.ids.reserve(params_.size());
    for (const Param& p : params_) b.ids.push_back(tape.leaf(p.value));
    return b;
  }

  NodeId node(const Binding& b, const std::string& name) const {
    return b.ids[index_of(name)];
  }

  // Predicts the noise residual for every row; callers mask out what they do
  // not need. x holds history rows first, then the generation window.
  NodeId denoise(Tape& tape, const Binding& b, const NdArray& x,
                 const DenoiseRequest& req, const ConditionBundle& cond) const {
    req.validate(cfg_);
    cond.validate(cfg_.capacity, cfg_.audio_dim, cfg_.style_count, cfg_.ref_dim);
    const int rows = cfg_.rows();
    const int h = cfg_.hidden;
    if (x.shape != std::vector<int>{rows, cfg_.motion_dim})
      throw ShapeError("denoiser input must be " +
                       NdArray::shape_str({rows, cfg_.motion_dim}) + ", got " +
                       NdArray::shape_str(x.shape));

    std::vector<std::uint8_t> row_valid(static_cast<std::size_t>(rows));
    std::vector<int> left_ids(static_cast<std::size_t>(rows));
    std::vector<int> right_ids(static_cast<std::size_t>(rows));
    for (int i = 0; i < cfg_.history_len; ++i) {
      row_valid[static_cast<std::size_t>(i)] = req.history_valid[static_cast<std::size_t>(i)];
      left_ids[static_cast<std::size_t>(i)] = req.history_left[static_cast<std::size_t>(i)];
      right_ids[static_cast<std::size_t>(i)] = req.history_right[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < cfg_.capacity; ++i) {
      std::size_t r = static_cast<std::size_t>(cfg_.history_len + i);
      row_valid[r] = req.frame_valid[static_cast<std::size_t>(i)];
      left_ids[r] = cond.left_mask[static_cast<std::size_t>(i)];
      right_ids[r] = cond.right_mask[static_cast<std::size_t>(i)];
    }

    // Invalid rows are zeroed before the first matmul so that garbage in
    // padding can never reach a finite-checked op.
    NodeId tok = tape.select_rows(tape.leaf(x), row_valid);
    tok = tape.add_rowvec(tape.matmul(tok, node(b, "input.W")), node(b, "input.b"));
    tok = tape.add(tok, node(b, "pos"));
    tok = tape.add(tok, tape.embedding_lookup(node(b, "mask.left"), left_ids));
    tok = tape.add(tok, tape.embedding_lookup(node(b, "mask.right"), right_ids));

    NodeId c = global_condition(tape, b, req, cond);

    NodeId audio = tape.select_rows(tape.leaf(cond.audio), cond.audio_valid);
    audio = tape.add_rowvec(tape.matmul(audio, node(b, "audio.W")), node(b, "audio.b"));

    NodeId shared = tape.add_rowvec(
        tape.matmul(tape.gelu(tape.add_rowvec(tape.matmul(c, node(b, "adaln.W1")),
                                              node(b, "adaln.b1"))),
                    node(b, "adaln.W2")),
        node(b, "adaln.b2"));

    for (int i = 0; i < cfg_.depth; ++i) {
      std::string p = "block" + std::to_string(i) + ".";
      NodeId mods = tape.add(shared, tape.embedding_lookup(node(b, "adaln.block"), {i}));
      std::vector<NodeId> parts = tape.split_lastdim_equal(mods, 6);
      auto vec = [&](int j) { return tape.reshape(parts[static_cast<std::size_t>(j)], {h}); };
      NodeId shift1 = vec(0), scale1 = vec(1), gate1 = vec(2);
      NodeId shift2 = vec(3), scale2 = vec(4), gate2 = vec(5);

      NodeId a = modulate(tape, tape.layer_norm_plain(tok), shift1, scale1);
      NodeId attn = attention(tape, b, p + "attn", a, a, row_valid);
      tok = tape.add(tok, tape.mul_rowvec(attn, gate1));

      NodeId q = tape.layer_norm_plain(tok);
      NodeId cross = attention(tape, b, p + "cross", q, audio, cond.audio_valid);
      tok = tape.add(tok, cross);

      NodeId m = modulate(tape, tape.layer_norm_plain(tok), shift2, scale2);
      m = tape.add_rowvec(tape.matmul(m, node(b, p + "mlp.W1")), node(b, p + "mlp.b1"));
      m = tape.add_rowvec(tape.matmul(tape.gelu(m), node(b, p + "mlp.W2")),
                          node(b, p + "mlp.b2"));
      tok = tape.add(tok, tape.mul_rowvec(m, gate2));
    }

    NodeId y = tape.layer_norm(tok, node(b, "head.ln_g"), node(b, "head.ln_b"));
    return tape.add_rowvec(tape.matmul(y, node(b, "head.W")), node(b, "head.b"));
  }

 private:
  NodeId modulate(Tape& tape, NodeId x, NodeId shift, NodeId scale) const {
    NodeId scaled = tape.mul_rowvec(x, tape.add_scalar(scale, 1.0));
    return tape.add_rowvec(scaled, shift);
  }

  // Multi-head scaled dot-product attention; key_valid masks out padded keys.
  NodeId attention(Tape& tape, const Binding& b, const std::string& prefix,
                   NodeId queries, NodeId keys,
                   const std::vector<std::uint8_t>& key_valid) const {
    const int dh = cfg_.hidden / cfg_.heads;
    NodeId q = tape.add_rowvec(tape.matmul(queries, node(b, prefix + ".Wq")),
                               node(b, prefix + ".bq"));
    NodeId k = tape.add_rowvec(tape.matmul(keys, node(b, prefix + ".Wk")),
                               node(b, prefix + ".bk"));
    NodeId v = tape.add_rowvec(tape.matmul(keys, node(b, prefix + ".Wv")),
                               node(b, prefix + ".bv"));
    std::vector<NodeId> qh = tape.split_lastdim_equal(q, cfg_.heads);
    std::vector<NodeId> kh = tape.split_lastdim_equal(k, cfg_.heads);
    std::vector<NodeId> vh = tape.split_lastdim_equal(v, cfg_.heads);
    std::vector<NodeId> heads_out;
    heads_out.reserve(static_cast<std::size_t>(cfg_.heads));
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      std::size_t s = static_cast<std::size_t>(hd);
      NodeId scores = tape.scale(tape.matmul(qh[s], tape.transpose_last2(kh[s])), inv_sqrt);
      NodeId w = tape.masked_softmax_lastdim(scores, key_valid);
      heads_out.push_back(tape.matmul(w, vh[s]));
    }
    NodeId merged = tape.concat_lastdim(heads_out);
    return tape.add_rowvec(tape.matmul(merged, node(b, prefix + ".Wo")),
                           node(b, prefix + ".bo"));
  }

  NodeId global_condition(Tape& tape, const Binding& b, const DenoiseRequest& req,
                          const ConditionBundle& cond) const {
    NodeId sin_leaf = tape.leaf(timestep_sinusoid(req.t, cfg_.hidden));
    NodeId c = tape.add_rowvec(
        tape.matmul(tape.gelu(tape.add_rowvec(tape.matmul(sin_leaf, node(b, "tmlp.W1")),
                                              node(b, "tmlp.b1"))),
                    node(b, "tmlp.W2")),
        node(b, "tmlp.b2"));
    c = tape.add(c, tape.embedding_lookup(node(b, "style.table"), {cond.style}));
    c = tape.add(c, amplitude_term(tape, b, "amp.left", cond.left_amp, cond.left_amp_defined));
    c = tape.add(c, amplitude_term(tape, b, "amp.right", cond.right_amp, cond.right_amp_defined));
    NdArray off({1, 7});
    std::array<double, 7> ov = offset_input(cond.root_offset);
    for (int i = 0; i < 7; ++i) off.data[static_cast<std::size_t>(i)] = ov[static_cast<std::size_t>(i)];
    c = tape.add(c, tape.add_rowvec(tape.matmul(tape.leaf(off), node(b, "offset.W")),
                                    node(b, "offset.b")));
    if (cond.ref.has_value()) {
      NdArray rf({1, cfg_.ref_dim}, *cond.ref);
      c = tape.add(c, tape.add_rowvec(tape.matmul(tape.leaf(rf), node(b, "ref.W")),
                                      node(b, "ref.b")));
    }
    return c;
  }

  // An undefined amplitude falls back to the first bucket so the term stays a
  // plain table row instead of vanishing.
  NodeId amplitude_term(Tape& tape, const Binding& b, const std::string& table,
                        double amp, bool defined) const {
    std::vector<double> act;
    if (defined) {
      act = bucket_encode(amp, buckets_);
    } else {
      act.assign(static_cast<std::size_t>(cfg_.bucket_count), 0.0);
      act[0] = 1.0;
    }
    NdArray row({1, cfg_.bucket_count}, std::move(act));
    return tape.matmul(tape.leaf(row), node(b, table));
  }

  void add(std::string name, NdArray value) {
    index_[name] = static_cast<int>(params_.size());
    params_.push_back(Param{std::move(name), std::move(value)});
  }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return static_cast<std::size_t>(it->second);
  }

  DiTConfig cfg_;
  BucketSpec buckets_;
  std::vector<Param> params_;
  std::map<std::string, int> index_;
};

}  // namespace handwave
