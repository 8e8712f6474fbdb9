#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "handwave/adam.hpp"
#include "handwave/data.hpp"
#include "handwave/dit.hpp"
#include "handwave/errors.hpp"
#include "handwave/rng.hpp"
#include "handwave/tensor.hpp"

namespace handwave {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Rounds every value to the nearest 32-bit float. Applied to the live
// training state at save time so that a run which continues in-process and a
// run resumed from the file hold bit-identical state from that step on.
inline void quantize_to_f32(NdArray& a) {
  for (double& v : a.data) v = static_cast<double>(static_cast<float>(v));
}

namespace detail {

inline void write_u64(BinWriter& w, std::uint64_t v) {
  w.u32(static_cast<std::uint32_t>(v & 0xffffffffull));
  w.u32(static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t read_u64(BinReader& r, const char* what) {
  const std::uint64_t lo = r.u32(what);
  const std::uint64_t hi = r.u32(what);
  return lo | (hi << 32);
}

inline void write_config(BinWriter& w, const DiTConfig& c) {
  for (int v : {c.depth, c.hidden, c.heads, c.motion_dim, c.audio_dim, c.capacity,
                c.history_len, c.style_count, c.bucket_count, c.ref_dim})
    w.u32(static_cast<std::uint32_t>(v));
}

inline DiTConfig read_config(BinReader& r) {
  DiTConfig c;
  int* fields[] = {&c.depth,       &c.hidden,      &c.heads,        &c.motion_dim,
                   &c.audio_dim,   &c.capacity,    &c.history_len,  &c.style_count,
                   &c.bucket_count, &c.ref_dim};
  for (int* f : fields) *f = static_cast<int>(r.u32("model config"));
  return c;
}

inline void write_array(BinWriter& w, const NdArray& a) {
  w.u8(static_cast<std::uint8_t>(a.rank()));
  for (int d : a.shape) w.u32(static_cast<std::uint32_t>(d));
  for (double v : a.data) w.f32(static_cast<float>(v));
}

inline NdArray read_array(BinReader& r, const char* what) {
  const int rank = r.u8(what);
  std::vector<int> shape;
  for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.u32(what)));
  NdArray a(shape);
  for (double& v : a.data) v = static_cast<double>(r.f32(what));
  return a;
}

}  // namespace detail

struct LoadedCheckpoint {
  DiTConfig config;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<std::string> names;
  std::vector<NdArray> values;
  long adam_step = 0;
  std::vector<NdArray> adam_m;  // empty when the optimizer never stepped
  std::vector<NdArray> adam_v;
};

// Writes model parameters and optimizer state as f32 and quantizes the live
// f64 state to the same values in place, so saving is the moment after which
// resumed and uninterrupted trajectories cannot diverge.
inline void save_checkpoint(const std::string& path, DiTModel& model, Adam& opt,
                            std::uint64_t step, const Rng& rng) {
  for (Param& p : model.params()) quantize_to_f32(p.value);
  for (NdArray& m : opt.moment1()) quantize_to_f32(m);
  for (NdArray& v : opt.moment2()) quantize_to_f32(v);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  detail::BinWriter w(out);
  w.magic("HWCK");
  w.u16(kCheckpointVersion);
  detail::write_config(w, model.config());
  detail::write_u64(w, step);
  const std::string rng_state = rng.serialize();
  w.u32(static_cast<std::uint32_t>(rng_state.size()));
  for (char c : rng_state) w.u8(static_cast<std::uint8_t>(c));

  const std::vector<Param>& params = model.params();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const Param& p : params) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    for (char c : p.name) w.u8(static_cast<std::uint8_t>(c));
    detail::write_array(w, p.value);
  }

  const bool has_opt = !opt.moment1().empty();
  w.u8(has_opt ? 1 : 0);
  if (has_opt) {
    if (opt.moment1().size() != params.size())
      throw ContractError("save_checkpoint: optimizer buffers do not match the parameters");
    detail::write_u64(w, static_cast<std::uint64_t>(opt.step_count()));
    for (const NdArray& m : opt.moment1()) detail::write_array(w, m);
    for (const NdArray& v : opt.moment2()) detail::write_array(w, v);
  }
  if (!out.good()) throw IoError("failed writing checkpoint: " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  detail::BinReader r(in, path);
  r.magic("HWCK", "header magic");
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  LoadedCheckpoint ck;
  ck.config = detail::read_config(r);
  ck.step = detail::read_u64(r, "step");
  const std::uint32_t rng_len = r.u32("rng state length");
  ck.rng_state.reserve(rng_len);
  for (std::uint32_t i = 0; i < rng_len; ++i)
    ck.rng_state.push_back(static_cast<char>(r.u8("rng state")));

  const std::uint32_t count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("parameter name length");
    std::string name;
    for (std::uint16_t j = 0; j < len; ++j)
      name.push_back(static_cast<char>(r.u8("parameter name")));
    ck.names.push_back(std::move(name));
    ck.values.push_back(detail::read_array(r, "parameter values"));
  }
  if (r.u8("optimizer flag") == 1) {
    ck.adam_step = static_cast<long>(detail::read_u64(r, "optimizer step"));
    for (std::uint32_t i = 0; i < count; ++i)
      ck.adam_m.push_back(detail::read_array(r, "optimizer moment1"));
    for (std::uint32_t i = 0; i < count; ++i)
      ck.adam_v.push_back(detail::read_array(r, "optimizer moment2"));
  }
  r.expect_eof("checkpoint data");
  return ck;
}

// Installs a loaded checkpoint into a model and optimizer built from the
// same configuration.
inline void restore_checkpoint(const LoadedCheckpoint& ck, DiTModel& model, Adam& opt) {
  if (!(model.config() == ck.config))
    throw ConfigError("restore_checkpoint: model configuration differs from the checkpoint");
  std::vector<Param>& params = model.params();
  if (params.size() != ck.names.size())
    throw FormatError("restore_checkpoint: checkpoint holds " + std::to_string(ck.names.size()) +
                      " parameters, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ck.names[i])
      throw FormatError("restore_checkpoint: parameter order mismatch at '" + ck.names[i] +
                        "', expected '" + params[i].name + "'");
    if (!params[i].value.same_shape(ck.values[i]))
      throw FormatError("restore_checkpoint: shape mismatch for '" + ck.names[i] + "'");
    params[i].value = ck.values[i];
  }
  if (!ck.adam_m.empty()) opt.restore(ck.adam_step, ck.adam_m, ck.adam_v);
}

}  // namespace handwave
