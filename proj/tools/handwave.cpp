// Command-line surface: dataset synthesis, training, sampling, evaluation,
// and conditioning-map preparation. Exit codes: 0 success, 2 configuration
// error, 3 data-format or I/O error, 4 numeric failure. HANDWAVE_VERBOSE=1
// adds timing chatter on stderr; all results go to stdout and --out.

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "handwave/runner.hpp"
#include "handwave/synth.hpp"

namespace {

int verbosity() {
  const char* v = std::getenv("HANDWAVE_VERBOSE");
  return v ? std::atoi(v) : 0;
}

struct SynthCmd {
  std::string spec;
  std::string out;
  std::uint64_t seed = 1234;
};

struct TrainCmd {
  std::string config;
  std::string resume;
};

struct EvalCmd {
  handwave::EvalArgs args;
};

struct PrepCmd {
  handwave::PrepArgs args;
  std::string raster = "64x64";
};

void parse_raster(const std::string& raster, handwave::PrepArgs& args) {
  const std::size_t x = raster.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= raster.size())
    throw handwave::ConfigError("--raster must look like 64x64, got '" + raster + "'");
  args.height = static_cast<int>(
      handwave::detail::parse_int(raster.substr(0, x), "raster height"));
  args.width = static_cast<int>(
      handwave::detail::parse_int(raster.substr(x + 1), "raster width"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"audio-conditioned hand-motion diffusion toolkit"};
  app.require_subcommand(1);

  SynthCmd synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  synth_cmd->add_option("--spec", synth.spec, "synth spec file (key value lines)");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");
  synth_cmd->add_option("--out", synth.out, "dataset directory")->required();

  TrainCmd train;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model from a run config");
  train_cmd->add_option("--config", train.config, "run config file")->required();
  train_cmd->add_option("--resume", train.resume, "checkpoint to resume from");

  handwave::SampleArgs sample;
  CLI::App* sample_cmd = app.add_subcommand("sample", "generate clips from a checkpoint");
  sample_cmd->add_option("--ckpt", sample.checkpoint, "model checkpoint")->required();
  sample_cmd->add_option("--audio", sample.audio, "audio feature file")->required();
  sample_cmd->add_option("--out", sample.out_dir, "output directory")->required();
  sample_cmd->add_option("--style", sample.style, "style id");
  sample_cmd->add_option("--amplitude", sample.amplitude,
                         "hand movement amplitude (omit to leave unspecified)");
  sample_cmd->add_option("--history", sample.history, "clip whose tail seeds the first window");
  sample_cmd->add_option("--ref", sample.ref, "single-row FEAT reference context");
  sample_cmd->add_option("--count", sample.count, "clips to generate");
  sample_cmd->add_option("--length", sample.length, "frames per clip (0 = from audio)");
  sample_cmd->add_option("--fps", sample.fps, "motion frame rate");
  sample_cmd->add_flag("--chain", sample.chain, "feed each clip's tail into the next clip");
  sample_cmd->add_option("--seed", sample.seed, "sampler seed");
  sample_cmd->add_option("--schedule-kind", sample.schedule_kind, "diffusion schedule kind");
  sample_cmd->add_option("--schedule-steps", sample.schedule_steps, "diffusion steps");
  sample_cmd->add_option("--beta-start", sample.beta_start, "first noise level");
  sample_cmd->add_option("--beta-end", sample.beta_end, "last noise level");

  EvalCmd eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score generated clips");
  eval_cmd->add_option("--generated", eval.args.generated_dir, "generated clip directory")
      ->required();
  eval_cmd->add_option("--reference", eval.args.reference_dir, "reference clip directory");
  eval_cmd->add_option("--audio", eval.args.audio_dir, "audio feature directory")->required();
  eval_cmd->add_option("--out", eval.args.out_path, "report file")->required();
  eval_cmd->add_option("--sigma", eval.args.sigma, "beat alignment tolerance, seconds");
  eval_cmd->add_option("--delta", eval.args.delta, "keypoint accuracy radius");
  eval_cmd->add_option("--grid", eval.args.grid, "histogram grid size");

  PrepCmd prep;
  CLI::App* prep_cmd = app.add_subcommand("prep", "prepare conditioning signals from clips");
  prep_cmd->add_option("--clips", prep.args.clips_dir, "clip directory")->required();
  prep_cmd->add_option("--filter-kernel", prep.args.kernel, "median filter window");
  prep_cmd->add_option("--raster", prep.raster, "map size as HxW");
  prep_cmd->add_option("--blob-sigma", prep.args.sigma_px, "keypoint blob width, pixels");
  prep_cmd->add_option("--out", prep.args.out_dir, "output directory")->required();

  const auto t0 = std::chrono::steady_clock::now();
  try {
    app.parse(argc, argv);

    if (synth_cmd->parsed()) {
      handwave::SynthConfig sc =
          synth.spec.empty() ? handwave::SynthConfig{} : handwave::load_synth_spec(synth.spec);
      std::cout << handwave::write_synth_dataset(synth.out, sc, synth.seed) << "\n";
    } else if (train_cmd->parsed()) {
      handwave::RunConfig cfg = handwave::load_run_config(train.config);
      handwave::TrainOutcome out = handwave::run_training(cfg, train.resume);
      std::cout << "steps " << out.end_step << "\n"
                << "final_loss " << handwave::detail::format_g17(out.final_loss) << "\n"
                << "checkpoint " << out.last_checkpoint << "\n";
    } else if (sample_cmd->parsed()) {
      handwave::SampleOutcome out = handwave::run_sampling(sample);
      for (const std::string& f : out.files) std::cout << f << "\n";
    } else if (eval_cmd->parsed()) {
      handwave::MetricReport report = handwave::run_eval(eval.args);
      std::cout << report.to_text();
    } else if (prep_cmd->parsed()) {
      parse_raster(prep.raster, prep.args);
      handwave::PrepOutcome out = handwave::run_prep(prep.args);
      std::cout << "clips " << out.clips << "\n";
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const handwave::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const handwave::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const handwave::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const handwave::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const handwave::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const handwave::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (verbosity() >= 1) {
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    std::cerr << "done in " << ms << " ms\n";
  }
  return 0;
}
