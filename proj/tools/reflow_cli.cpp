// reflow: self-correcting flow-matched dynamic gaussian splatting at desk
// scale. Subcommands: synth, init, train, render, flow, eval.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <iostream>

#include "reflow/commands.hpp"

namespace {

using reflow::commands::Config;

// Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
int guarded(const std::function<std::string()>& fn) {
  try {
    std::cout << fn() << std::endl;
    return 0;
  } catch (const reflow::usage_error& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 1;
  } catch (const reflow::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return 2;
  } catch (const reflow::io_error& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}

void add_config_overrides(CLI::App* cmd, std::vector<std::string>& overrides,
                          std::string& config_path) {
  cmd->add_option("--config", config_path, "flat key = value config file");
  cmd->add_option("--set", overrides, "config override KEY=VALUE (repeatable)")
      ->expected(-1);
}

Config assemble_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  Config cfg;
  if (!config_path.empty()) cfg = Config::from_map(reflow::io::parse_key_values(config_path));
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw reflow::usage_error("--set expects KEY=VALUE, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reflow: dynamic-scene gaussian splatting with self-correcting flow matching"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene directory");
  std::string synth_spec_path, synth_preset = "moving-sphere", synth_out;
  int synth_frames = 0, synth_res = 0;
  std::uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec_path, "scene spec file (preset/frames/resolution/seed)");
  synth->add_option("--preset", synth_preset, "moving-sphere | two-body | static-only");
  synth->add_option("--frames", synth_frames, "frame count override");
  synth->add_option("--resolution", synth_res, "square resolution override");
  synth->add_option("--seed", synth_seed, "texture seed override");
  synth->add_option("--out", synth_out, "output scene directory")->required();

  // init
  auto* init = app.add_subcommand("init", "canonical-space construction from a scene directory");
  std::string init_scene, init_out, init_config;
  std::vector<std::string> init_overrides;
  init->add_option("--scene", init_scene, "scene directory")->required();
  init->add_option("--out", init_out, "output directory")->required();
  add_config_overrides(init, init_overrides, init_config);

  // train
  auto* train = app.add_subcommand("train", "optimize the splat model");
  std::string train_scene, train_init, train_out, train_config;
  std::vector<std::string> train_overrides;
  train->add_option("--scene", train_scene, "scene directory")->required();
  train->add_option("--init", train_init, "initialization directory (from init)")->required();
  train->add_option("--out", train_out, "output directory")->required();
  add_config_overrides(train, train_overrides, train_config);

  // render
  auto* render = app.add_subcommand("render", "render color/depth for a camera list");
  std::string render_ckpt, render_cams, render_out, render_times;
  int render_threads = 1;
  render->add_option("--checkpoint", render_ckpt, "model checkpoint")->required();
  render->add_option("--cameras", render_cams, "cameras.txt")->required();
  render->add_option("--out", render_out, "output directory")->required();
  render->add_option("--times", render_times, "comma-separated timestamps (novel times)");
  render->add_option("--threads", render_threads, "render threads");

  // flow
  auto* flow = app.add_subcommand("flow", "emit full/camera flow for a frame pair");
  std::string flow_ckpt, flow_scene, flow_out;
  int flow_a = 0, flow_b = 1, flow_threads = 1;
  flow->add_option("--checkpoint", flow_ckpt, "model checkpoint")->required();
  flow->add_option("--scene", flow_scene, "scene directory (cameras)")->required();
  flow->add_option("--frame-a", flow_a, "source frame index")->required();
  flow->add_option("--frame-b", flow_b, "target frame index")->required();
  flow->add_option("--out", flow_out, "output path prefix")->required();
  flow->add_option("--threads", flow_threads, "threads");

  // eval
  auto* eval = app.add_subcommand("eval", "held-out PSNR/SSIM and flow EPE");
  std::string eval_ckpt, eval_scene, eval_out;
  int eval_holdout = 8, eval_threads = 1;
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--scene", eval_scene, "scene directory")->required();
  eval->add_option("--out", eval_out, "output directory for eval.csv");
  eval->add_option("--holdout-every", eval_holdout, "held-out frame period");
  eval->add_option("--threads", eval_threads, "threads");

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    return guarded([&] {
      reflow::commands::SynthSpec spec;
      if (!synth_spec_path.empty()) spec = reflow::commands::SynthSpec::from_file(synth_spec_path);
      if (synth->count("--preset")) spec.preset = synth_preset;
      if (synth_frames > 0) spec.frames = synth_frames;
      if (synth_res > 0) spec.resolution = synth_res;
      if (synth_seed > 0) spec.seed = synth_seed;
      return reflow::commands::cmd_synth(spec, synth_out);
    });
  }
  if (init->parsed()) {
    return guarded([&] {
      Config cfg = assemble_config(init_config, init_overrides);
      return reflow::commands::cmd_init(init_scene, init_out, cfg);
    });
  }
  if (train->parsed()) {
    return guarded([&] {
      Config cfg = assemble_config(train_config, train_overrides);
      cfg.out = train_out;
      return reflow::commands::cmd_train(train_scene, train_init, cfg);
    });
  }
  if (render->parsed()) {
    return guarded([&] {
      return reflow::commands::cmd_render(render_ckpt, render_cams, render_out, render_times,
                                          render_threads);
    });
  }
  if (flow->parsed()) {
    return guarded([&] {
      return reflow::commands::cmd_flow(flow_ckpt, flow_scene, flow_a, flow_b, flow_out,
                                        flow_threads);
    });
  }
  if (eval->parsed()) {
    return guarded([&] {
      return reflow::commands::cmd_eval(eval_ckpt, eval_scene, eval_out, eval_holdout,
                                        eval_threads);
    });
  }
  return 1;
}
