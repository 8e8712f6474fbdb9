#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "handwave/adam.hpp"
#include "handwave/dit.hpp"
#include "handwave/errors.hpp"
#include "handwave/kinematics.hpp"

namespace handwave {

// Full description of a run. The model's motion width is driven by the
// keypoint count, never set directly, so it can only match the dataset rule
// motion_dim = 134 + 2K.
struct RunConfig {
  int keypoint_count = 13;
  DiTConfig model;
  std::string schedule_kind = "linear";
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  AdamConfig optim;
  int train_steps = 400;
  int batch = 8;
  int checkpoint_every = 100;
  std::string manifest;
  std::string out_dir;
  std::uint64_t seed = 1234;

  RunConfig() { sync_motion_dim(); }

  void sync_motion_dim() { model.motion_dim = kFrameDim + 2 * keypoint_count; }

  void validate() const {
    if (keypoint_count < 0) throw ConfigError("config: model.keypoint_count must be >= 0");
    if (model.motion_dim != kFrameDim + 2 * keypoint_count)
      throw ConfigError("config: motion width out of sync with keypoint count");
    model.validate();
    if (schedule_steps < 1) throw ConfigError("config: schedule.steps must be >= 1");
    if (train_steps < 0) throw ConfigError("config: train.steps must be >= 0");
    if (batch < 1) throw ConfigError("config: train.batch must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("config: train.checkpoint_every must be >= 1");
    if (optim.lr <= 0.0) throw ConfigError("config: optim.lr must be positive");
  }

  bool operator==(const RunConfig& o) const {
    return keypoint_count == o.keypoint_count && model == o.model &&
           schedule_kind == o.schedule_kind && schedule_steps == o.schedule_steps &&
           beta_start == o.beta_start && beta_end == o.beta_end && optim.lr == o.optim.lr &&
           optim.beta1 == o.optim.beta1 && optim.beta2 == o.optim.beta2 &&
           optim.eps == o.optim.eps && train_steps == o.train_steps && batch == o.batch &&
           checkpoint_every == o.checkpoint_every && manifest == o.manifest &&
           out_dir == o.out_dir && seed == o.seed;
  }
};

namespace detail {

inline long long parse_int(const std::string& v, const std::string& key) {
  long long out = 0;
  const char* begin = v.data();
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || p != end)
    throw ConfigError("config: key '" + key + "' needs an integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  std::uint64_t out = 0;
  const char* begin = v.data();
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || p != end)
    throw ConfigError("config: key '" + key + "' needs an unsigned integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' needs a number, got '" + v + "'");
  }
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Text config: one "key value" pair per line, '#' starts a comment, every
// key defaulted, unknown keys rejected.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t sp = line.find_first_of(" \t");
    if (sp == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + line +
                        "' has no value");
    const std::string key = line.substr(0, sp);
    const std::string value = detail::trim(line.substr(sp + 1));
    if (value.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                        "' has no value");

    auto as_int = [&](int lo) {
      const long long v = detail::parse_int(value, key);
      if (v < lo || v > 1000000000)
        throw ConfigError("config: key '" + key + "' out of range: " + value);
      return static_cast<int>(v);
    };
    if (key == "model.keypoint_count") cfg.keypoint_count = as_int(0);
    else if (key == "model.depth") cfg.model.depth = as_int(1);
    else if (key == "model.hidden") cfg.model.hidden = as_int(1);
    else if (key == "model.heads") cfg.model.heads = as_int(1);
    else if (key == "model.audio_dim") cfg.model.audio_dim = as_int(1);
    else if (key == "model.capacity") cfg.model.capacity = as_int(1);
    else if (key == "model.history_len") cfg.model.history_len = as_int(0);
    else if (key == "model.style_count") cfg.model.style_count = as_int(1);
    else if (key == "model.bucket_count") cfg.model.bucket_count = as_int(2);
    else if (key == "model.ref_dim") cfg.model.ref_dim = as_int(1);
    else if (key == "schedule.kind") cfg.schedule_kind = value;
    else if (key == "schedule.steps") cfg.schedule_steps = as_int(1);
    else if (key == "schedule.beta_start") cfg.beta_start = detail::parse_double(value, key);
    else if (key == "schedule.beta_end") cfg.beta_end = detail::parse_double(value, key);
    else if (key == "optim.lr") cfg.optim.lr = detail::parse_double(value, key);
    else if (key == "optim.beta1") cfg.optim.beta1 = detail::parse_double(value, key);
    else if (key == "optim.beta2") cfg.optim.beta2 = detail::parse_double(value, key);
    else if (key == "optim.eps") cfg.optim.eps = detail::parse_double(value, key);
    else if (key == "train.steps") cfg.train_steps = as_int(0);
    else if (key == "train.batch") cfg.batch = as_int(1);
    else if (key == "train.checkpoint_every") cfg.checkpoint_every = as_int(1);
    else if (key == "data.manifest") cfg.manifest = value;
    else if (key == "run.out") cfg.out_dir = value;
    else if (key == "run.seed") cfg.seed = detail::parse_u64(value, key);
    else
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key +
                        "'");
  }
  cfg.sync_motion_dim();
  cfg.validate();
  return cfg;
}

inline std::string serialize_run_config(const RunConfig& cfg) {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string out;
  out += "model.keypoint_count " + std::to_string(cfg.keypoint_count) + "\n";
  out += "model.depth " + std::to_string(cfg.model.depth) + "\n";
  out += "model.hidden " + std::to_string(cfg.model.hidden) + "\n";
  out += "model.heads " + std::to_string(cfg.model.heads) + "\n";
  out += "model.audio_dim " + std::to_string(cfg.model.audio_dim) + "\n";
  out += "model.capacity " + std::to_string(cfg.model.capacity) + "\n";
  out += "model.history_len " + std::to_string(cfg.model.history_len) + "\n";
  out += "model.style_count " + std::to_string(cfg.model.style_count) + "\n";
  out += "model.bucket_count " + std::to_string(cfg.model.bucket_count) + "\n";
  out += "model.ref_dim " + std::to_string(cfg.model.ref_dim) + "\n";
  out += "schedule.kind " + cfg.schedule_kind + "\n";
  out += "schedule.steps " + std::to_string(cfg.schedule_steps) + "\n";
  out += "schedule.beta_start " + num(cfg.beta_start) + "\n";
  out += "schedule.beta_end " + num(cfg.beta_end) + "\n";
  out += "optim.lr " + num(cfg.optim.lr) + "\n";
  out += "optim.beta1 " + num(cfg.optim.beta1) + "\n";
  out += "optim.beta2 " + num(cfg.optim.beta2) + "\n";
  out += "optim.eps " + num(cfg.optim.eps) + "\n";
  out += "train.steps " + std::to_string(cfg.train_steps) + "\n";
  out += "train.batch " + std::to_string(cfg.batch) + "\n";
  out += "train.checkpoint_every " + std::to_string(cfg.checkpoint_every) + "\n";
  if (!cfg.manifest.empty()) out += "data.manifest " + cfg.manifest + "\n";
  if (!cfg.out_dir.empty()) out += "run.out " + cfg.out_dir + "\n";
  out += "run.seed " + std::to_string(cfg.seed) + "\n";
  return out;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace handwave
