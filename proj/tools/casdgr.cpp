// casdgr command-line front end: synth, train, eval, infer, params.

#include "casdgr/commands.hpp"
#include "casdgr/image_io.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

using namespace casdgr;

namespace {

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string preset;
};

void add_shared(CLI::App* app, Shared& s) {
  app->add_option("--config", s.config, "JSON run config");
  app->add_option("--seed", s.seed, "Seed (overrides the config)");
  app->add_option("--preset", s.preset, "Base preset when no config is given")->check(CLI::IsMember({"desk", "full"}));
}

RunConfig resolve(const Shared& s) {
  RunConfig c = s.config.empty() ? RunConfig::from_preset(s.preset.empty() ? "desk" : s.preset) : load_config(s.config);
  if (!s.config.empty() && !s.preset.empty() && s.preset != c.preset) {
    throw ConfigError("--preset " + s.preset + " conflicts with preset '" + c.preset + "' in " + s.config);
  }
  if (s.seed) c.train.seed = *s.seed;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascade matting network with deformable graph refinement"};
  app.require_subcommand(1);

  // synth
  Shared synth_shared;
  std::string synth_out = "data";
  Index synth_count = 200, synth_size = 64, synth_bg = 8;
  auto* synth = app.add_subcommand("synth", "Generate a procedural (F, B, alpha) corpus");
  add_shared(synth, synth_shared);
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
  synth->add_option("--count", synth_count, "Number of samples")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--size", synth_size, "Image side in pixels")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--bg-per-fg", synth_bg, "Backgrounds per foreground")->capture_default_str()->check(CLI::PositiveNumber);

  // train
  Shared train_shared;
  std::string train_data, train_ckpt, train_resume, train_log;
  std::optional<int> train_epochs;
  std::int64_t train_steps = -1;
  auto* train = app.add_subcommand("train", "Train a model");
  add_shared(train, train_shared);
  train->add_option("--data", train_data, "Dataset directory (overrides the config)");
  train->add_option("--checkpoint", train_ckpt, "Checkpoint written after every epoch (overrides the config)");
  train->add_option("--resume", train_resume, "Resume from this checkpoint");
  train->add_option("--epochs", train_epochs, "Epoch count (overrides the config)");
  train->add_option("--max-steps", train_steps, "Stop after this many optimizer steps");
  train->add_option("--loss-log", train_log, "Per-step loss log (TSV)");

  // eval
  std::string eval_ckpt, eval_data, eval_split = "heldout", eval_json;
  bool eval_oracle = false;
  Shared eval_shared;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  add_shared(eval, eval_shared);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "heldout, train or all")->capture_default_str();
  eval->add_flag("--oracle", eval_oracle, "Score the ground truth against itself");
  eval->add_option("--json", eval_json, "Also write the report as JSON");

  // infer
  std::string infer_ckpt, infer_in, infer_out = "alpha.png", infer_dump;
  int infer_depth = 8;
  Shared infer_shared;
  auto* infer = app.add_subcommand("infer", "Predict an alpha matte for one image");
  add_shared(infer, infer_shared);
  infer->add_option("--checkpoint", infer_ckpt, "Checkpoint")->required();
  infer->add_option("--image", infer_in, "Input PNG")->required();
  infer->add_option("--out", infer_out, "Output PNG")->capture_default_str();
  infer->add_option("--dump-stages", infer_dump, "Directory for per-stage alpha PNGs");
  infer->add_option("--bit-depth", infer_depth, "8 or 16")->check(CLI::IsMember({8, 16}));

  // params
  Shared params_shared;
  bool params_ablate = false;
  auto* params = app.add_subcommand("params", "Parameter breakdown");
  add_shared(params, params_shared);
  params->add_flag("--ablate-dgr", params_ablate, "Also report the increment due to DGR");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const RunConfig c = resolve(synth_shared);
      cmd::SynthOptions o;
      o.out = synth_out;
      o.spec.count = synth_count;
      o.spec.size = synth_size;
      o.spec.bg_per_fg = synth_bg;
      o.spec.seed = c.train.seed;
      cmd::synth(o, std::cout);
    } else if (*train) {
      cmd::TrainOptions o;
      o.config = resolve(train_shared);
      if (!train_data.empty()) o.config.dataset = train_data;
      if (!train_ckpt.empty()) o.config.checkpoint = train_ckpt;
      if (train_epochs) o.config.train.epochs = *train_epochs;
      o.config.validate();
      if (o.config.dataset.empty()) throw ConfigError("no dataset: pass --data or set \"dataset\" in the config");
      o.dataset = o.config.dataset;
      o.checkpoint = o.config.checkpoint;
      if (!train_resume.empty()) o.resume = train_resume;
      if (!train_log.empty()) o.loss_log = train_log;
      o.max_steps = train_steps;
      const auto r = cmd::train(o, std::cout);
      std::cout << "trained " << r.epochs_completed << " epoch(s), " << r.steps.size() << " step(s) in " << r.seconds
                << " s\n";
    } else if (*eval) {
      cmd::EvalOptions o;
      o.checkpoint = eval_ckpt;
      o.dataset = eval_data;
      o.split = cmd::parse_split(eval_split);
      o.oracle = eval_oracle;
      if (!eval_json.empty()) o.json_out = eval_json;
      cmd::eval(o, std::cout);
    } else if (*infer) {
      cmd::InferOptions o;
      o.checkpoint = infer_ckpt;
      o.image = infer_in;
      o.out = infer_out;
      if (!infer_dump.empty()) o.dump_stages = infer_dump;
      o.bit_depth = infer_depth;
      cmd::infer(o, std::cout);
    } else if (*params) {
      cmd::params(resolve(params_shared).model, params_ablate, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
