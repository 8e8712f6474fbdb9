// End-to-end tour of the pipeline through the runner layer: synthesize a
// dataset, train a small model, sample motion for one of its audio tracks,
// and score the samples. Everything lands under ./quickstart_out.

#include <cstdio>
#include <filesystem>

#include "handwave/config.hpp"
#include "handwave/metrics.hpp"
#include "handwave/runner.hpp"
#include "handwave/synth.hpp"

namespace hw = handwave;
namespace fs = std::filesystem;

int main() {
  const fs::path root = fs::path("quickstart_out");
  fs::create_directories(root);

  // Four audio-motion chains of two 30-frame clips each.
  hw::SynthConfig synth;
  synth.chains = 4;
  synth.clips_per_chain = 2;
  const std::string manifest = hw::write_synth_dataset((root / "data").string(), synth, 7);
  std::printf("dataset manifest: %s\n", manifest.c_str());

  // A deliberately small trunk keeps this demo to a few seconds. For real
  // sampling quality the hidden width should be at least the motion width
  // (here 160); see the training config notes in the README.
  hw::RunConfig cfg;
  cfg.model.depth = 1;
  cfg.model.hidden = 32;
  cfg.model.heads = 2;
  cfg.model.audio_dim = 4;
  cfg.model.capacity = 32;
  cfg.model.history_len = 4;
  cfg.model.style_count = 3;
  cfg.schedule_steps = 50;
  cfg.beta_start = 1e-3;
  cfg.beta_end = 0.1;
  cfg.train_steps = 200;
  cfg.batch = 4;
  cfg.checkpoint_every = 100;
  cfg.manifest = manifest;
  cfg.out_dir = (root / "run").string();
  cfg.seed = 11;
  cfg.validate();

  hw::TrainOutcome train = hw::run_training(cfg);
  std::printf("trained %llu steps, final loss %.4f\n",
              static_cast<unsigned long long>(train.end_step), train.final_loss);

  // Sample three clips for the first training track; names keep the audio
  // stem so evaluation can pair them back to it.
  hw::SampleArgs sample;
  sample.checkpoint = train.last_checkpoint;
  sample.audio = (root / "data" / "c0_0.feat").string();
  sample.out_dir = (root / "samples").string();
  sample.count = 3;
  sample.length = 30;
  sample.seed = 19;
  sample.schedule_kind = cfg.schedule_kind;
  sample.schedule_steps = cfg.schedule_steps;
  sample.beta_start = cfg.beta_start;
  sample.beta_end = cfg.beta_end;
  hw::SampleOutcome out = hw::run_sampling(sample);
  for (const std::string& f : out.files) std::printf("sampled %s\n", f.c_str());

  // Evaluate the samples against their audio track; the ground-truth clip
  // directory doubles as the reference set.
  fs::create_directories(root / "eval_audio");
  fs::copy_file(root / "data" / "c0_0.feat", root / "eval_audio" / "c0_0.feat",
                fs::copy_options::overwrite_existing);
  hw::EvalArgs eval;
  eval.generated_dir = sample.out_dir;
  eval.reference_dir = (root / "data").string();
  eval.audio_dir = (root / "eval_audio").string();
  eval.out_path = (root / "report.txt").string();
  hw::MetricReport report = hw::run_eval(eval);
  std::printf("%s", report.to_text().c_str());
  return 0;
}
