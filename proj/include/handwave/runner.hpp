#pragma once

// End-to-end drivers behind the command-line tool: training with resumable
// checkpoints and append-safe logs, sampling from a checkpoint into clip
// files, metric evaluation over directories of clips, and conditioning-map
// preparation. Everything below works in terms of file paths so a driver
// run is reproducible from its arguments alone.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "handwave/checkpoint.hpp"
#include "handwave/conditioning.hpp"
#include "handwave/config.hpp"
#include "handwave/data.hpp"
#include "handwave/diffusion.hpp"
#include "handwave/errors.hpp"
#include "handwave/metrics.hpp"
#include "handwave/prep.hpp"
#include "handwave/rng.hpp"
#include "handwave/schedule.hpp"

namespace handwave {

namespace detail {

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Log files append on resume so one uninterrupted run and a
// checkpoint-resumed run produce the same row sequence.
inline std::ofstream open_log_csv(const std::string& path, bool resuming, const char* header) {
  const bool append = resuming && std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  if (!append) out << header << "\n";
  return out;
}

inline std::vector<std::string> sorted_files_with_extension(const std::string& dir,
                                                            const std::string& ext) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ext)
      out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

}  // namespace detail

inline std::string checkpoint_path(const std::string& out_dir, std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06llu.hwck", static_cast<unsigned long long>(step));
  return (std::filesystem::path(out_dir) / buf).string();
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
  std::uint64_t start_step = 0;
  std::uint64_t end_step = 0;
  double final_loss = 0.0;
  std::string last_checkpoint;
  std::string loss_csv;
};

// Runs (or resumes) a training job. The out directory receives config.txt,
// loss.csv, timing.csv and periodic checkpoints. Loss rows are written with
// full precision; timing lives in its own file so loss.csv stays byte
// comparable across runs of the same seed.
inline TrainOutcome run_training(const RunConfig& cfg, const std::string& resume_path = "") {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("training needs data.manifest");
  if (cfg.out_dir.empty()) throw ConfigError("training needs run.out");
  std::filesystem::create_directories(cfg.out_dir);

  Dataset ds = load_dataset(cfg.manifest, cfg.model.capacity);
  if (ds.entries.empty()) throw FormatError(cfg.manifest + ": manifest lists no clips");

  DiTModel model = DiTModel::build(cfg.model, cfg.seed);
  NoiseSchedule sched =
      make_schedule(cfg.schedule_kind, cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  Adam opt(cfg.optim);
  Rng rng(cfg.seed + 1);

  TrainOutcome outcome;
  if (!resume_path.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_path);
    restore_checkpoint(ck, model, opt);
    rng.deserialize(ck.rng_state);
    outcome.start_step = ck.step;
    outcome.last_checkpoint = resume_path;
  }

  {
    std::ofstream conf((std::filesystem::path(cfg.out_dir) / "config.txt").string());
    if (!conf) throw IoError("cannot write config.txt in " + cfg.out_dir);
    conf << serialize_run_config(cfg);
  }
  outcome.loss_csv = (std::filesystem::path(cfg.out_dir) / "loss.csv").string();
  std::ofstream loss_log =
      detail::open_log_csv(outcome.loss_csv, !resume_path.empty(), "step,loss");
  std::ofstream timing_log =
      detail::open_log_csv((std::filesystem::path(cfg.out_dir) / "timing.csv").string(),
                           !resume_path.empty(), "step,millis");

  const std::uint64_t total = static_cast<std::uint64_t>(cfg.train_steps);
  outcome.end_step = std::max(outcome.start_step, total);
  for (std::uint64_t step = outcome.start_step; step < total; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<TrainItem> items;
    items.reserve(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      const int idx = static_cast<int>(rng.uniform_int(ds.entries.size()));
      items.push_back(make_train_item(cfg.model, ds, idx));
    }
    const double loss = train_step(model, opt, sched, items, rng);
    if (!std::isfinite(loss))
      throw NumericError("training loss became non-finite at step " + std::to_string(step + 1));
    const auto t1 = std::chrono::steady_clock::now();
    const long long ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    loss_log << (step + 1) << "," << detail::format_g17(loss) << "\n";
    timing_log << (step + 1) << "," << ms << "\n";
    outcome.final_loss = loss;
    if ((step + 1) % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0 || step + 1 == total) {
      outcome.last_checkpoint = checkpoint_path(cfg.out_dir, step + 1);
      save_checkpoint(outcome.last_checkpoint, model, opt, step + 1, rng);
    }
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleArgs {
  std::string checkpoint;
  std::string audio;
  std::string out_dir;
  std::string history;    // optional clip whose tail seeds the first window
  std::string ref;        // optional single-row FEAT reference context
  int style = 0;
  double amplitude = -1.0;  // negative leaves the amplitude unspecified
  int count = 1;
  int length = 0;  // 0 derives the length from the aligned audio
  int fps = 25;
  bool chain = false;  // each clip becomes the next clip's history
  std::uint64_t seed = 1234;
  // Checkpoints carry no diffusion schedule, so sampling restates it.
  std::string schedule_kind = "linear";
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct SampleOutcome {
  std::vector<std::string> files;
  std::string log_path;
};

// Raw sampler output contains free-floating quaternion slots; files on disk
// promise canonical unit quaternions and keypoints inside the unit square.
inline MotionClip clip_from_sample(const NdArray& raw, int keypoints, int fps, int style) {
  const int len = raw.shape[0];
  MotionClip c;
  c.fps = fps;
  c.style = style;
  c.motion = NdArray({len, kFrameDim});
  c.keypoints = NdArray({len, 2 * keypoints});
  c.left_valid.assign(static_cast<std::size_t>(len), 1);
  c.right_valid = c.left_valid;
  c.kp_valid = c.left_valid;
  for (int f = 0; f < len; ++f) {
    for (int h = 0; h < 2; ++h) {
      const int base = h * kHandParamDim;
      for (int j = 0; j < kJointsPerHand; ++j) {
        const int q0 = base + 4 * j;
        Quat q{raw.at(f, q0), raw.at(f, q0 + 1), raw.at(f, q0 + 2), raw.at(f, q0 + 3)};
        const double n = q.norm();
        if (n < 1e-6) {
          q = Quat{1.0, 0.0, 0.0, 0.0};
        } else {
          q = canonicalize(Quat{q.w / n, q.x / n, q.y / n, q.z / n});
        }
        c.motion.at(f, q0) = q.w;
        c.motion.at(f, q0 + 1) = q.x;
        c.motion.at(f, q0 + 2) = q.y;
        c.motion.at(f, q0 + 3) = q.z;
      }
      for (int a = 0; a < 3; ++a) {
        const int d = base + kQuatValuesPerHand + a;
        c.motion.at(f, d) = raw.at(f, d);
      }
    }
    for (int d = 0; d < 2 * keypoints; ++d)
      c.keypoints.at(f, d) = std::clamp(raw.at(f, kFrameDim + d), 0.0, 1.0);
  }
  c.validate();
  return c;
}

inline SampleOutcome run_sampling(const SampleArgs& args) {
  if (args.checkpoint.empty()) throw ConfigError("sampling needs a checkpoint path");
  if (args.audio.empty()) throw ConfigError("sampling needs an audio feature file");
  if (args.out_dir.empty()) throw ConfigError("sampling needs an output directory");
  if (args.count < 1) throw ConfigError("sample count must be >= 1");
  if (args.fps < 1) throw ConfigError("sample fps must be >= 1");

  LoadedCheckpoint ck = load_checkpoint(args.checkpoint);
  DiTModel model = DiTModel::build(ck.config, 0);
  Adam scratch_opt{AdamConfig{}};
  restore_checkpoint(ck, model, scratch_opt);
  const DiTConfig& cfg = model.config();

  const int kp_cols = cfg.motion_dim - kFrameDim;
  if (kp_cols <= 0 || kp_cols % 2 != 0)
    throw FormatError(args.checkpoint + ": model motion width has no keypoint columns");
  const int keypoints = kp_cols / 2;
  if (args.style < 0 || args.style >= cfg.style_count)
    throw ConfigError("style id " + std::to_string(args.style) + " out of range for " +
                      std::to_string(cfg.style_count) + " styles");
  if (args.length < 0 || args.length > cfg.capacity)
    throw ConfigError("sample length must be in [0, " + std::to_string(cfg.capacity) + "]");

  NoiseSchedule sched =
      make_schedule(args.schedule_kind, args.schedule_steps, args.beta_start, args.beta_end);

  FeatFile track = load_feat(args.audio);
  auto [audio, audio_valid] = align_audio(track, args.fps, cfg.capacity);
  int valid_rows = 0;
  for (std::uint8_t v : audio_valid) valid_rows += v;
  const int length = args.length > 0 ? args.length : std::min(valid_rows, cfg.capacity);
  if (length < 1)
    throw FormatError(args.audio + ": audio track aligns to zero frames at " +
                      std::to_string(args.fps) + " fps");

  ConditionBundle cond;
  cond.audio = std::move(audio);
  cond.audio_valid = std::move(audio_valid);
  cond.style = args.style;
  if (args.amplitude >= 0.0) {
    cond.left_amp = args.amplitude;
    cond.right_amp = args.amplitude;
    cond.left_amp_defined = true;
    cond.right_amp_defined = true;
  }
  cond.ref = reference_context(args.ref);
  cond.left_mask.assign(static_cast<std::size_t>(cfg.capacity), 0);
  for (int i = 0; i < length; ++i) cond.left_mask[static_cast<std::size_t>(i)] = 1;
  cond.right_mask = cond.left_mask;
  cond.validate(cfg.capacity, cfg.audio_dim, cfg.style_count, cfg.ref_dim);

  HistoryContext hist = args.history.empty()
                            ? HistoryContext::none(cfg)
                            : HistoryContext::from_clip(cfg, load_clip(args.history));
  std::string hist_source = args.history.empty() ? "none" : args.history;

  // The run log records which amplitude bucket drove conditioning; an
  // unspecified amplitude falls back to bucket 0, matching the model.
  auto bucket_index = [&](double amp, bool defined) {
    if (!defined) return 0;
    const std::vector<double> act = bucket_encode(amp, model.buckets());
    return static_cast<int>(std::max_element(act.begin(), act.end()) - act.begin());
  };

  std::filesystem::create_directories(args.out_dir);
  Rng rng(args.seed);
  SampleOutcome outcome;
  outcome.log_path = (std::filesystem::path(args.out_dir) / "sample_log.txt").string();
  std::ofstream log(outcome.log_path);
  if (!log) throw IoError("cannot write " + outcome.log_path);

  // Output names start with the audio stem so eval can pair clips back to
  // their track by name alone.
  const std::string stem = detail::stem_of(args.audio);
  for (int i = 0; i < args.count; ++i) {
    NdArray raw = sample_clip(model, sched, cond, hist, length, rng);
    MotionClip clip = clip_from_sample(raw, keypoints, args.fps, args.style);
    char suffix[24];
    std::snprintf(suffix, sizeof(suffix), "_%03d.mclip", i);
    const std::string name = stem + suffix;
    const std::string path = (std::filesystem::path(args.out_dir) / name).string();
    save_clip(path, clip);
    log << name << " style=" << args.style << " history=" << hist_source
        << " left_bucket=" << bucket_index(cond.left_amp, cond.left_amp_defined)
        << " right_bucket=" << bucket_index(cond.right_amp, cond.right_amp_defined) << "\n";
    outcome.files.push_back(path);
    if (args.chain) {
      // The written file, not the in-memory array, seeds the next window, so
      // chained generation sees exactly what a later reader of the file sees.
      hist = HistoryContext::from_clip(cfg, load_clip(path));
      hist_source = name;
    }
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalArgs {
  std::string generated_dir;
  std::string reference_dir;  // optional; required for pck and fgd
  std::string audio_dir;
  std::string out_path;
  double sigma = 0.1;
  double delta = 0.1;
  int grid = 16;
};

namespace detail {

// Generated clips pair with the audio track whose stem prefixes theirs:
// either "<stem>.mclip" or "<stem>_<anything>.mclip". The longest matching
// stem wins so overlapping stems stay unambiguous.
inline int match_audio_stem(const std::string& clip_stem,
                            const std::vector<std::string>& audio_stems) {
  int best = -1;
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < audio_stems.size(); ++i) {
    const std::string& a = audio_stems[i];
    const bool hit = clip_stem == a || (clip_stem.size() > a.size() + 1 &&
                                        clip_stem.compare(0, a.size(), a) == 0 &&
                                        clip_stem[a.size()] == '_');
    if (hit && a.size() >= best_len) {
      best = static_cast<int>(i);
      best_len = a.size();
    }
  }
  return best;
}

inline NdArray head_rows(const NdArray& m, int rows) {
  NdArray out({rows, m.shape[1]});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < m.shape[1]; ++c) out.at(r, c) = m.at(r, c);
  return out;
}

}  // namespace detail

// Scores generated clips against their audio tracks and, when references are
// available, against reference clips. Metrics without a defined value are
// reported as absent rather than failing the run. Also writes per-hand
// position histograms next to the report.
inline MetricReport run_eval(const EvalArgs& args) {
  if (args.generated_dir.empty()) throw ConfigError("eval needs a generated clip directory");
  if (args.audio_dir.empty()) throw ConfigError("eval needs an audio directory");
  if (args.out_path.empty()) throw ConfigError("eval needs a report path");

  const std::vector<std::string> audio_files =
      detail::sorted_files_with_extension(args.audio_dir, ".feat");
  if (audio_files.empty()) throw FormatError(args.audio_dir + ": no .feat audio tracks");
  std::vector<std::string> audio_stems;
  audio_stems.reserve(audio_files.size());
  for (const std::string& f : audio_files) audio_stems.push_back(detail::stem_of(f));

  const std::vector<std::string> generated_files =
      detail::sorted_files_with_extension(args.generated_dir, ".mclip");
  if (generated_files.empty()) throw FormatError(args.generated_dir + ": no .mclip clips");

  // audio index -> clips generated for that track
  std::vector<std::vector<MotionClip>> by_audio(audio_files.size());
  std::vector<MotionClip> generated;
  for (const std::string& f : generated_files) {
    const int a = detail::match_audio_stem(detail::stem_of(f), audio_stems);
    if (a < 0)
      throw FormatError(f + ": no audio track named for this clip in " + args.audio_dir);
    MotionClip clip = load_clip(f);
    by_audio[static_cast<std::size_t>(a)].push_back(clip);
    generated.push_back(std::move(clip));
  }
  for (std::size_t a = 0; a < by_audio.size(); ++a) {
    if (by_audio[a].empty())
      throw FormatError(audio_files[a] + ": no generated clips for this audio track");
  }

  std::vector<MotionClip> references;
  if (!args.reference_dir.empty()) {
    for (const std::string& stem : audio_stems) {
      const std::string path =
          (std::filesystem::path(args.reference_dir) / (stem + ".mclip")).string();
      if (!std::filesystem::exists(path))
        throw FormatError(path + ": missing reference clip for audio track " + stem);
      references.push_back(load_clip(path));
    }
  }

  MetricReport report;
  report.generated_count = static_cast<int>(generated.size());
  report.reference_count = static_cast<int>(references.size());
  report.audio_count = static_cast<int>(audio_files.size());

  // Diversity: per audio track over its own samples, then averaged.
  {
    double sum = 0.0;
    int n = 0;
    for (const std::vector<MotionClip>& clips : by_audio) {
      if (clips.size() < 2) continue;
      std::vector<NdArray> motions;
      for (const MotionClip& c : clips) motions.push_back(c.motion);
      sum += diversity(motions);
      ++n;
    }
    if (n > 0) report.div = sum / n;
  }

  // Beat alignment: each clip against the valid prefix of its aligned audio.
  {
    double sum = 0.0;
    int n = 0;
    for (std::size_t a = 0; a < by_audio.size(); ++a) {
      FeatFile track = load_feat(audio_files[a]);
      for (const MotionClip& clip : by_audio[a]) {
        auto [mat, valid] = align_audio(track, clip.fps, clip.length());
        int rows = 0;
        for (std::uint8_t v : valid) rows += v;
        if (rows < 3) continue;
        try {
          sum += beat_align(detail::head_rows(mat, rows), clip.motion, clip.fps, args.sigma);
          ++n;
        } catch (const MetricUndefined&) {
        }
      }
    }
    if (n > 0) report.ba = sum / n;
  }

  if (!references.empty()) {
    // Keypoint accuracy over the frames both clips cover.
    double sum = 0.0;
    int n = 0;
    for (std::size_t a = 0; a < by_audio.size(); ++a) {
      const MotionClip& ref = references[a];
      for (const MotionClip& clip : by_audio[a]) {
        const int rows = std::min(clip.length(), ref.length());
        sum += pck(detail::head_rows(clip.motion, rows), detail::head_rows(ref.motion, rows),
                   args.delta);
        ++n;
      }
    }
    if (n > 0) report.pck = sum / n;

    try {
      std::vector<NdArray> gen_motion, ref_motion;
      for (const MotionClip& c : generated) gen_motion.push_back(c.motion);
      for (const MotionClip& c : references) ref_motion.push_back(c.motion);
      report.fgd = fgd(gen_motion, ref_motion);
    } catch (const MetricUndefined&) {
    }
  }

  {
    std::vector<NdArray> kp;
    for (const MotionClip& c : generated) kp.push_back(c.keypoints);
    report.hkv = hkv(kp);
  }

  // Histograms share bounds across generated and reference clips so the two
  // populations would land on the same grid.
  const std::filesystem::path out_parent = [&] {
    std::filesystem::path p = std::filesystem::path(args.out_path).parent_path();
    return p.empty() ? std::filesystem::path(".") : p;
  }();
  std::filesystem::create_directories(out_parent);
  {
    std::vector<NdArray> all;
    for (const MotionClip& c : generated) all.push_back(c.motion);
    for (const MotionClip& c : references) all.push_back(c.motion);
    const std::array<double, 4> bounds = distribution_bounds(all);
    std::vector<NdArray> gen_motion(all.begin(), all.begin() + generated.size());
    HandDistribution dist = hand_distribution(gen_motion, args.grid, bounds);
    write_matrix_csv((out_parent / "hand_left.csv").string(), dist.left);
    write_matrix_csv((out_parent / "hand_right.csv").string(), dist.right);
    auto to_image = [](NdArray cells) {
      double peak = 0.0;
      for (double v : cells.data) peak = std::max(peak, v);
      if (peak > 0.0)
        for (double& v : cells.data) v /= peak;
      return cells;
    };
    save_pgm((out_parent / "hand_left.pgm").string(), to_image(dist.left));
    save_pgm((out_parent / "hand_right.pgm").string(), to_image(dist.right));
  }

  {
    std::ofstream out(args.out_path);
    if (!out) throw IoError("cannot write " + args.out_path);
    out << report.to_text();
  }
  {
    std::ofstream out(args.out_path + ".csv");
    if (!out) throw IoError("cannot write " + args.out_path + ".csv");
    out << "metric,value\n";
    auto line = [&](const char* key, const std::optional<double>& v) {
      out << key << "," << (v ? detail::format_g17(*v) : "absent") << "\n";
    };
    line("div", report.div);
    line("ba", report.ba);
    line("pck", report.pck);
    line("fgd", report.fgd);
    line("hkv", report.hkv);
    out << "generated_count," << report.generated_count << "\n";
    out << "reference_count," << report.reference_count << "\n";
    out << "audio_count," << report.audio_count << "\n";
  }
  return report;
}

// ---------------------------------------------------------------------------
// Conditioning-map preparation

struct PrepArgs {
  std::string clips_dir;
  std::string out_dir;
  int kernel = 5;
  int height = 64;
  int width = 64;
  double sigma_px = 2.0;
};

struct PrepOutcome {
  int clips = 0;
  std::vector<std::string> files;
};

namespace detail {

// Upper bound on how far any joint can sit from the wrist, independent of
// joint rotations: the longest cumulative bone-length chain.
inline double skeleton_reach(const HandSkeleton& s) {
  std::array<double, kJointsPerHand> acc{};
  double reach = 0.0;
  for (int j = 0; j < kJointsPerHand; ++j) {
    const Vec3& o = s.offset[static_cast<std::size_t>(j)];
    const double len = std::sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
    const int p = s.parent[static_cast<std::size_t>(j)];
    acc[static_cast<std::size_t>(j)] = (p < 0 ? 0.0 : acc[static_cast<std::size_t>(p)]) + len;
    reach = std::max(reach, acc[static_cast<std::size_t>(j)]);
  }
  return reach;
}

// Similarity transform from clip world coordinates into the unit square the
// renderer expects. Uniform scale keeps hand proportions.
struct ViewFit {
  double scale = 1.0;
  double cx = 0.5;
  double cy = 0.5;
};

inline HandParams fit_hand(const HandParams& hand, const ViewFit& v) {
  HandParams out = hand;
  out.translation = {v.scale * (hand.translation[0] - v.cx) + 0.5,
                     v.scale * (hand.translation[1] - v.cy) + 0.5,
                     v.scale * hand.translation[2]};
  return out;
}

}  // namespace detail

// For every clip: median-filters the keypoint track (written as a FEAT
// matrix of u,v pairs plus a trailing validity column) and renders the first
// frame's keypoint blobs and hand silhouettes as stacked heatmaps with PGM
// previews. Full-sequence rendering is a loop over rasterize_* per frame.
inline PrepOutcome run_prep(const PrepArgs& args) {
  if (args.clips_dir.empty()) throw ConfigError("prep needs a clip directory");
  if (args.out_dir.empty()) throw ConfigError("prep needs an output directory");
  if (!(args.sigma_px > 0.0)) throw ConfigError("prep blob sigma must be positive");
  if (args.height < 1 || args.width < 1) throw ConfigError("prep raster size must be positive");

  const std::vector<std::string> clip_files =
      detail::sorted_files_with_extension(args.clips_dir, ".mclip");
  if (clip_files.empty()) throw FormatError(args.clips_dir + ": no .mclip clips");
  std::filesystem::create_directories(args.out_dir);

  std::vector<MotionClip> clips;
  clips.reserve(clip_files.size());
  for (const std::string& file : clip_files) clips.push_back(load_clip(file));

  // Clip files carry camera-free world coordinates; every clip in the run
  // shares one fitted view so renders stay comparable across clips.
  HandSkeleton skeleton = HandSkeleton::default_template();
  const double reach = detail::skeleton_reach(skeleton);
  detail::ViewFit view;
  {
    double lo_x = 0.0, hi_x = 1.0, lo_y = 0.0, hi_y = 1.0;
    bool any = false;
    for (const MotionClip& clip : clips) {
      for (int f = 0; f < clip.length(); ++f) {
        for (int h = 0; h < 2; ++h) {
          const std::vector<std::uint8_t>& valid = h == 0 ? clip.left_valid : clip.right_valid;
          if (!valid[static_cast<std::size_t>(f)]) continue;
          const int base = h * kHandParamDim + kQuatValuesPerHand;
          const double tx = clip.motion.at(f, base);
          const double ty = clip.motion.at(f, base + 1);
          if (!any) {
            lo_x = hi_x = tx;
            lo_y = hi_y = ty;
            any = true;
          }
          lo_x = std::min(lo_x, tx);
          hi_x = std::max(hi_x, tx);
          lo_y = std::min(lo_y, ty);
          hi_y = std::max(hi_y, ty);
        }
      }
    }
    lo_x -= reach;
    hi_x += reach;
    lo_y -= reach;
    hi_y += reach;
    const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
    view.scale = 0.9 / span;
    view.cx = 0.5 * (lo_x + hi_x);
    view.cy = 0.5 * (lo_y + hi_y);
  }
  for (Vec3& o : skeleton.offset)
    for (double& c : o) c *= view.scale;

  PrepOutcome outcome;
  const std::filesystem::path out(args.out_dir);
  for (std::size_t ci = 0; ci < clips.size(); ++ci) {
    const MotionClip& clip = clips[ci];
    const std::string stem = detail::stem_of(clip_files[ci]);

    KeypointTrack track;
    track.coords = clip.keypoints;
    track.valid = clip.kp_valid;
    const KeypointTrack filtered = temporal_median_filter(track, args.kernel);

    NdArray table({filtered.length(), 2 * filtered.keypoint_count() + 1});
    for (int f = 0; f < filtered.length(); ++f) {
      for (int d = 0; d < 2 * filtered.keypoint_count(); ++d)
        table.at(f, d) = filtered.coords.at(f, d);
      table.at(f, 2 * filtered.keypoint_count()) =
          filtered.valid[static_cast<std::size_t>(f)] ? 1.0 : 0.0;
    }
    const std::string filtered_path = (out / (stem + "_filtered.feat")).string();
    save_feat(filtered_path, table, clip.fps);
    outcome.files.push_back(filtered_path);

    const std::vector<std::uint8_t> joints(
        static_cast<std::size_t>(filtered.keypoint_count()),
        filtered.valid.empty() ? std::uint8_t{0} : filtered.valid[0]);
    const Heatmap kpmaps = rasterize_keypoints(
        std::span<const double>(filtered.coords.row(0), filtered.coords.shape[1]), args.height,
        args.width, args.sigma_px, joints);
    const std::string kp_path = (out / (stem + "_kpmaps.feat")).string();
    save_heatmap(kp_path, kpmaps);
    save_pgm((out / (stem + "_kpmaps.pgm")).string(), kpmaps.stacked());
    outcome.files.push_back(kp_path);

    HandPoseFrame pose = unpack_frame(std::span<const double>(clip.motion.row(0), kFrameDim));
    pose.left = detail::fit_hand(pose.left, view);
    pose.right = detail::fit_hand(pose.right, view);
    const Heatmap handmaps =
        rasterize_hands(pose, args.height, args.width, clip.left_valid[0] != 0,
                        clip.right_valid[0] != 0, skeleton);
    const std::string hand_path = (out / (stem + "_handmaps.feat")).string();
    save_heatmap(hand_path, handmaps);
    save_pgm((out / (stem + "_handmaps.pgm")).string(), handmaps.stacked());
    outcome.files.push_back(hand_path);

    ++outcome.clips;
  }
  return outcome;
}

}  // namespace handwave
