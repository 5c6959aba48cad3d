#ifndef REFLOW_COMMANDS_HPP
#define REFLOW_COMMANDS_HPP

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "reflow/canonical.hpp"
#include "reflow/core.hpp"
#include "reflow/harness.hpp"
#include "reflow/io.hpp"
#include "reflow/optim.hpp"

namespace reflow::commands {

namespace fs = std::filesystem;
using geometry::Camera;
using geometry::Vec2;
using geometry::Vec3;

// ---------------------------------------------------------------------------
// Shared flat configuration (file values overridden by CLI flags).

struct Config {
  std::string scene;
  std::string init;
  std::string out;
  int steps = 7000;
  std::uint64_t seed = 1;
  int clip_len = 25;
  int stride = 1;
  std::string preset = "simple";  // loss-weight regime: simple | complex
  double lambda_ff = -1, lambda_cf = -1;          // < 0: take the preset value
  double lambda_mc = 1.0, lambda_cr = -1;         // lambda_cr < 0: 0.1 * lambda_mc
  double lambda_mc_cam = 1.0, lambda_cr_cam = -1;
  double lambda_dssim = 0.2;
  double lambda_tv = 1e-4;
  double lr_means = 1.6e-4, lr_planes = 1.6e-3, lr_decoders = 1.6e-3;
  double lr_rotations = 1e-3, lr_scales = 5e-3, lr_opacities = 5e-2, lr_colors = 2.5e-3;
  double warmup_frac = 0.1;
  int warmup_steps = -1;  // < 0: warmup_frac * steps
  int holdout_every = 8;
  int checkpoint_interval = 1000;
  int threads = 1;
  int resolution = 0;  // synth override; 0 keeps the scene preset value
  int align_iterations = 300;
  double oracle_noise = 0.0;
  int free_poses = 0;  // 1 = do not pin keyframe poses to dataset cameras

  static Config from_map(const std::map<std::string, std::string>& kv) {
    Config c;
    for (const auto& [key, value] : kv) c.set(key, value);
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    auto d = [&] { return std::stod(value); };
    auto i = [&] { return std::stoi(value); };
    if (key == "scene") scene = value;
    else if (key == "init") init = value;
    else if (key == "out") out = value;
    else if (key == "steps") steps = i();
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "clip_len") clip_len = i();
    else if (key == "stride") stride = i();
    else if (key == "preset") preset = value;
    else if (key == "lambda_ff") lambda_ff = d();
    else if (key == "lambda_cf") lambda_cf = d();
    else if (key == "lambda_mc") lambda_mc = d();
    else if (key == "lambda_cr") lambda_cr = d();
    else if (key == "lambda_mc_cam") lambda_mc_cam = d();
    else if (key == "lambda_cr_cam") lambda_cr_cam = d();
    else if (key == "lambda_dssim") lambda_dssim = d();
    else if (key == "lambda_tv") lambda_tv = d();
    else if (key == "lr_means") lr_means = d();
    else if (key == "lr_planes") lr_planes = d();
    else if (key == "lr_decoders") lr_decoders = d();
    else if (key == "lr_rotations") lr_rotations = d();
    else if (key == "lr_scales") lr_scales = d();
    else if (key == "lr_opacities") lr_opacities = d();
    else if (key == "lr_colors") lr_colors = d();
    else if (key == "warmup_frac") warmup_frac = d();
    else if (key == "warmup_steps") warmup_steps = i();
    else if (key == "holdout_every") holdout_every = i();
    else if (key == "checkpoint_interval") checkpoint_interval = i();
    else if (key == "threads") threads = i();
    else if (key == "resolution") resolution = i();
    else if (key == "align_iterations") align_iterations = i();
    else if (key == "oracle_noise") oracle_noise = d();
    else if (key == "free_poses") free_poses = i();
    else throw usage_error("unknown config key: " + key);
  }

  warploss::LossWeights loss_weights() const {
    warploss::LossWeights w = warploss::LossWeights::preset(preset);
    if (lambda_ff >= 0) w.lambda_ff = lambda_ff;
    if (lambda_cf >= 0) w.lambda_cf = lambda_cf;
    w.lambda_mc = lambda_mc;
    w.lambda_cr = lambda_cr >= 0 ? lambda_cr : 0.1 * lambda_mc;
    w.lambda_mc_cam = lambda_mc_cam;
    w.lambda_cr_cam = lambda_cr_cam >= 0 ? lambda_cr_cam : 0.1 * lambda_mc_cam;
    w.lambda_dssim = lambda_dssim;
    w.validate();
    return w;
  }

  optim::LearningRates learning_rates() const {
    optim::LearningRates lr;
    lr.means = lr_means;
    lr.planes = lr_planes;
    lr.decoders = lr_decoders;
    lr.rotations = lr_rotations;
    lr.scales = lr_scales;
    lr.opacities = lr_opacities;
    lr.colors = lr_colors;
    return lr;
  }

  int effective_warmup() const {
    return warmup_steps >= 0 ? warmup_steps
                             : static_cast<int>(warmup_frac * static_cast<double>(steps));
  }

  std::string echo() const {
    char buf[64];
    std::ostringstream ss;
    auto put = [&](const char* key, double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      ss << key << " = " << buf << "\n";
    };
    ss << "scene = " << scene << "\ninit = " << init << "\nout = " << out << "\nsteps = " << steps
       << "\nseed = " << seed << "\nclip_len = " << clip_len << "\nstride = " << stride
       << "\npreset = " << preset << "\n";
    put("lambda_ff", loss_weights().lambda_ff);
    put("lambda_cf", loss_weights().lambda_cf);
    put("lambda_mc", loss_weights().lambda_mc);
    put("lambda_cr", loss_weights().lambda_cr);
    put("lambda_mc_cam", loss_weights().lambda_mc_cam);
    put("lambda_cr_cam", loss_weights().lambda_cr_cam);
    put("lambda_dssim", lambda_dssim);
    put("lambda_tv", lambda_tv);
    put("lr_means", lr_means);
    put("lr_planes", lr_planes);
    put("lr_decoders", lr_decoders);
    put("lr_rotations", lr_rotations);
    put("lr_scales", lr_scales);
    put("lr_opacities", lr_opacities);
    put("lr_colors", lr_colors);
    ss << "warmup_steps = " << effective_warmup() << "\nholdout_every = " << holdout_every
       << "\ncheckpoint_interval = " << checkpoint_interval << "\n";
    return ss.str();
  }
};

// ---------------------------------------------------------------------------
// synth: generate a harness scene directory.

struct SynthSpec {
  std::string preset = "moving-sphere";
  int frames = 0;      // 0 keeps the preset default
  int resolution = 0;
  std::uint64_t seed = 0;

  static SynthSpec from_file(const std::string& path) {
    SynthSpec s;
    for (const auto& [key, value] : io::parse_key_values(path)) {
      if (key == "preset") s.preset = value;
      else if (key == "frames" || key == "n_frames") s.frames = std::stoi(value);
      else if (key == "resolution") s.resolution = std::stoi(value);
      else if (key == "seed") s.seed = std::stoull(value);
      else throw usage_error("unknown scene spec key: " + key);
    }
    return s;
  }

  harness::SceneSpec build() const {
    harness::SceneSpec spec = harness::SceneSpec::preset(preset);
    if (frames > 0) spec.n_frames = frames;
    if (resolution > 0) {
      spec.width = spec.height = resolution;
      spec.focal = spec.focal * resolution / 48.0;  // keep the field of view
    }
    if (seed > 0) spec.seed = seed;
    return spec;
  }
};

inline std::string cmd_synth(const SynthSpec& synth, const std::string& out_dir) {
  const harness::SceneSpec spec = synth.build();
  const harness::GroundTruth gt = harness::generate(spec);
  io::save_scene(out_dir, gt);
  std::ostringstream ss;
  ss << "OK cmd=synth preset=" << synth.preset << " frames=" << spec.n_frames << " res="
     << spec.width << "x" << spec.height << " out=" << out_dir;
  return ss.str();
}

// ---------------------------------------------------------------------------
// init: canonical-space construction.

struct InitResult {
  canonical::SeedSelection selection;
  canonical::AlignmentState state;
};

inline InitResult run_init(const io::SceneData& scene, const Config& cfg) {
  if (scene.depths.size() != scene.frames.size())
    throw usage_error("init: scene directory is missing depth maps");
  const int n = static_cast<int>(scene.frames.size());
  const int w = scene.frames[0].width, h = scene.frames[0].height;
  canonical::GroundTruthOracle oracle(scene.depths, scene.cameras, scene.masks, cfg.oracle_noise,
                                      0.7, cfg.seed);
  const auto plan = canonical::plan_clips(n, cfg.clip_len);
  canonical::CoarseInputs in;
  in.oracle = &oracle;
  in.dynamic_masks = &scene.masks;
  in.width = w;
  in.height = h;
  if (!cfg.free_poses) in.fixed_cameras = scene.cameras;
  canonical::AlignOptions opts;
  opts.iterations = cfg.align_iterations;

  InitResult res;
  const auto coarse = canonical::coarse_align(plan, in, opts);
  res.state = canonical::fine_align(plan, in, coarse, 0, opts);

  std::vector<std::vector<double>> conf;
  conf.reserve(n);
  for (int f = 0; f < n; ++f) conf.push_back(oracle.point_maps(f, f).c_aa);
  const auto [stat, dyn] = canonical::disentangle(res.state, scene.masks, scene.frames, conf);
  res.selection = canonical::select_reference_and_fuse(stat, dyn, scene.masks, scene.frames,
                                                       plan.keyframes);
  return res;
}

inline std::string cmd_init(const std::string& scene_dir, const std::string& out_dir,
                            const Config& cfg) {
  const io::SceneData scene = io::load_scene(scene_dir);
  const InitResult res = run_init(scene, cfg);

  fs::create_directories(out_dir);
  auto to_cloud = [](const canonical::LabeledCloud& cloud) {
    std::vector<io::CloudPoint> pts;
    pts.reserve(cloud.points.size());
    for (const auto& p : cloud.points)
      pts.push_back(io::CloudPoint{p.position, p.color, static_cast<std::uint8_t>(p.dynamic)});
    return pts;
  };
  io::write_ply((fs::path(out_dir) / "static_seed.ply").string(), to_cloud(res.selection.static_seed));
  io::write_ply((fs::path(out_dir) / "dynamic_seed.ply").string(),
                to_cloud(res.selection.dynamic_seed));

  // poses: one 3x4 row-major matrix per line
  {
    std::ofstream f((fs::path(out_dir) / "poses.txt").string());
    f.precision(17);
    for (size_t i = 0; i < res.state.poses.size(); ++i) {
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) f << res.state.poses[i].rotation(r, c) << " ";
        f << res.state.poses[i].translation[r] << (r == 2 ? "" : " ");
      }
      f << "\n";
    }
  }
  {
    std::ofstream f((fs::path(out_dir) / "report.txt").string());
    f.precision(17);
    f << "reference_frame = " << res.selection.reference_frame << "\n"
      << "voxel_size = " << res.selection.voxel_size << "\n"
      << "static_seeds = " << res.selection.static_seed.points.size() << "\n"
      << "dynamic_seeds = " << res.selection.dynamic_seed.points.size() << "\n"
      << "dynamic_empty_warning = " << (res.selection.dynamic_empty_warning ? 1 : 0) << "\n"
      << "focal = " << res.state.intrinsics[0].fx << "\n";
  }
  std::ostringstream ss;
  ss << "OK cmd=init frames=" << scene.frames.size()
     << " static_seeds=" << res.selection.static_seed.points.size()
     << " dynamic_seeds=" << res.selection.dynamic_seed.points.size()
     << " ref_frame=" << res.selection.reference_frame << " out=" << out_dir;
  return ss.str();
}

// ---------------------------------------------------------------------------
// train

inline pipeline::SeedCloud load_seed_cloud(const std::string& path) {
  pipeline::SeedCloud cloud;
  for (const auto& p : io::read_ply(path)) {
    cloud.points.push_back(p.position);
    cloud.colors.push_back(p.color);
  }
  return cloud;
}

inline optim::Dataset make_dataset(const io::SceneData& scene) {
  optim::Dataset data;
  data.frames = scene.frames;
  data.cameras = scene.cameras;
  data.masks = scene.masks;
  data.validate();
  return data;
}

inline pipeline::SplatModel build_model_from_init(const std::string& init_dir,
                                                  const io::SceneData& scene, const Config& cfg) {
  const auto report = io::parse_key_values((fs::path(init_dir) / "report.txt").string());
  const double voxel = std::stod(report.at("voxel_size"));
  pipeline::SeedCloud stat = load_seed_cloud((fs::path(init_dir) / "static_seed.ply").string());
  pipeline::SeedCloud dyn = load_seed_cloud((fs::path(init_dir) / "dynamic_seed.ply").string());
  pipeline::ModelConfig mc;
  mc.lambda_tv = cfg.lambda_tv;
  mc.background = scene.background;
  Rng rng(cfg.seed);
  return pipeline::build_model(stat, dyn, voxel, mc, rng);
}

inline std::string cmd_train(const std::string& scene_dir, const std::string& init_dir,
                             Config cfg) {
  cfg.scene = scene_dir;
  cfg.init = init_dir;
  const io::SceneData scene = io::load_scene(scene_dir);
  const optim::Dataset data = make_dataset(scene);
  pipeline::SplatModel model = build_model_from_init(init_dir, scene, cfg);

  fs::create_directories(cfg.out);
  optim::TrainConfig tc;
  tc.schedule.warmup_steps = cfg.effective_warmup();
  tc.schedule.total_steps = cfg.steps;
  tc.weights = cfg.loss_weights();
  tc.lrs = cfg.learning_rates();
  tc.seed = cfg.seed;
  tc.stride = cfg.stride;
  tc.holdout_every = cfg.holdout_every;
  tc.threads = cfg.threads;

  const std::string echo = cfg.echo();
  io::CsvWriter csv((fs::path(cfg.out) / "metrics.csv").string(),
                    "step,L_baseline,L_mc,L_cr,L_mc_cam,L_cr_cam,total");
  const std::string ckpt_path = (fs::path(cfg.out) / "model.ckpt").string();
  double last_total = 0.0;
  optim::train(model, data, tc, [&](const optim::StepInfo& info) {
    csv.row({static_cast<double>(info.step), info.terms.baseline, info.terms.mc, info.terms.cr,
             info.terms.mc_cam, info.terms.cr_cam, info.terms.total});
    last_total = info.terms.total;
    if (cfg.checkpoint_interval > 0 && (info.step + 1) % cfg.checkpoint_interval == 0 &&
        info.step + 1 < tc.schedule.total_steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "model_%06d.ckpt", info.step + 1);
      io::save_checkpoint((fs::path(cfg.out) / name).string(), model, info.step + 1, echo);
    }
  });
  io::save_checkpoint(ckpt_path, model, cfg.steps, echo);
  csv.flush();

  std::ostringstream ss;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", last_total);
  ss << "OK cmd=train steps=" << cfg.steps << " gaussians=" << model.n_total()
     << " final_loss=" << buf << " checkpoint=" << ckpt_path;
  return ss.str();
}

// ---------------------------------------------------------------------------
// render

inline std::string cmd_render(const std::string& ckpt_path, const std::string& cameras_path,
                              const std::string& out_dir, const std::string& times_csv,
                              int threads) {
  const io::Checkpoint ck = io::load_checkpoint(ckpt_path);
  std::vector<Camera> cams = io::read_cameras(cameras_path);
  if (!times_csv.empty()) {
    std::vector<double> times;
    std::stringstream ss(times_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) times.push_back(std::stod(tok));
    if (times.size() != cams.size())
      throw usage_error("render: --times count must match the camera count");
    for (size_t i = 0; i < cams.size(); ++i) {
      if (!(times[i] >= 0.0 && times[i] <= 1.0)) throw usage_error("render: time outside [0,1]");
      cams[i].timestamp = times[i];
    }
  }
  fs::create_directories(fs::path(out_dir) / "render");
  fs::create_directories(fs::path(out_dir) / "depth");
  for (size_t i = 0; i < cams.size(); ++i) {
    const auto out = pipeline::render_view(ck.model, cams[i], threads);
    warploss::Image img(out.width, out.height);
    img.data.assign(out.color.begin(), out.color.end());
    io::write_png_rgb((fs::path(out_dir) / "render" / (io::frame_name(static_cast<int>(i)) + ".png")).string(),
                      img);
    io::write_pfm((fs::path(out_dir) / "depth" / (io::frame_name(static_cast<int>(i)) + ".pfm")).string(),
                  out.depth);
  }
  std::ostringstream ss;
  ss << "OK cmd=render views=" << cams.size() << " out=" << out_dir;
  return ss.str();
}

// ---------------------------------------------------------------------------
// flow

inline std::string cmd_flow(const std::string& ckpt_path, const std::string& scene_dir, int frame_a,
                            int frame_b, const std::string& out_prefix, int threads) {
  const io::Checkpoint ck = io::load_checkpoint(ckpt_path);
  const io::SceneData scene = io::load_scene(scene_dir);
  const int n = static_cast<int>(scene.cameras.size());
  if (frame_a < 0 || frame_b < 0 || frame_a >= n || frame_b >= n)
    throw usage_error("flow: frame indices out of range");
  const auto res =
      pipeline::scene_flow(ck.model, scene.cameras[frame_a], scene.cameras[frame_b], threads);
  fs::create_directories(fs::path(out_prefix).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(out_prefix).parent_path());
  io::write_flo(out_prefix + "_full.flo", res.full);
  io::write_flo(out_prefix + "_cam.flo", res.cam);
  double max_full = 0.0, max_cam = 0.0;
  io::write_png_rgb(out_prefix + "_full.png", io::flow_to_color(res.full, &max_full));
  io::write_png_rgb(out_prefix + "_cam.png", io::flow_to_color(res.cam, &max_cam));
  std::ostringstream ss;
  char b1[32], b2[32];
  std::snprintf(b1, sizeof(b1), "%.4g", max_full);
  std::snprintf(b2, sizeof(b2), "%.4g", max_cam);
  ss << "OK cmd=flow pair=" << frame_a << "," << frame_b << " max_full_px=" << b1
     << " max_cam_px=" << b2 << " out=" << out_prefix << "_{full,cam}.{flo,png}";
  return ss.str();
}

// ---------------------------------------------------------------------------
// eval

struct EvalResult {
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  double psnr_static_mean = 0.0;
  double epe_full_dynamic = -1.0;
  double epe_full_static = -1.0;
  double epe_cam_static = -1.0;
  std::vector<int> holdout;
  std::vector<double> psnr_per_frame;
  std::vector<double> ssim_per_frame;
};

inline EvalResult run_eval(const pipeline::SplatModel& model, const io::SceneData& scene,
                           int holdout_every, int threads) {
  EvalResult res;
  const int n = static_cast<int>(scene.frames.size());
  res.holdout = optim::holdout_frames(n, holdout_every);
  if (res.holdout.empty()) throw usage_error("eval: hold-out set is empty");

  double psnr_acc = 0, ssim_acc = 0, psnr_static_acc = 0;
  for (int f : res.holdout) {
    const auto out = pipeline::render_view(model, scene.cameras[f], threads);
    warploss::Image img(out.width, out.height);
    img.data.assign(out.color.begin(), out.color.end());
    const double p = harness::psnr(img, scene.frames[f]);
    const double s = harness::ssim(img, scene.frames[f]);
    res.psnr_per_frame.push_back(p);
    res.ssim_per_frame.push_back(s);
    psnr_acc += p;
    ssim_acc += s;
    warploss::Mask static_mask(out.width, out.height, 1);
    for (size_t i = 0; i < static_mask.data.size(); ++i)
      static_mask.data[i] = scene.masks[f].data[i] ? 0 : 1;
    psnr_static_acc += harness::psnr_masked(img, scene.frames[f], static_mask);
  }
  res.psnr_mean = psnr_acc / res.holdout.size();
  res.ssim_mean = ssim_acc / res.holdout.size();
  res.psnr_static_mean = psnr_static_acc / res.holdout.size();

  // Flow accuracy against the stored analytic flow on adjacent pairs.
  if (!scene.flows.empty()) {
    double dyn_acc = 0, stat_acc = 0, cam_acc = 0;
    int dyn_n = 0, stat_n = 0, cam_n = 0;
    for (size_t i = 0; i + 1 < scene.frames.size() && i < scene.flows.size(); ++i) {
      const auto sf = pipeline::scene_flow(model, scene.cameras[i], scene.cameras[i + 1], threads);
      warploss::Mask dyn_mask = scene.masks[i];
      warploss::Mask stat_mask(dyn_mask.width, dyn_mask.height, 0);
      for (size_t p = 0; p < stat_mask.data.size(); ++p)
        stat_mask.data[p] = dyn_mask.data[p] ? 0 : 1;
      try {
        dyn_acc += harness::endpoint_error(sf.full, scene.flows[i], dyn_mask);
        ++dyn_n;
      } catch (const numerical_error&) {
      }
      try {
        stat_acc += harness::endpoint_error(sf.full, scene.flows[i], stat_mask);
        ++stat_n;
      } catch (const numerical_error&) {
      }
      try {
        cam_acc += harness::endpoint_error(sf.cam, scene.flows[i], stat_mask);
        ++cam_n;
      } catch (const numerical_error&) {
      }
    }
    if (dyn_n) res.epe_full_dynamic = dyn_acc / dyn_n;
    if (stat_n) res.epe_full_static = stat_acc / stat_n;
    if (cam_n) res.epe_cam_static = cam_acc / cam_n;
  }
  return res;
}

inline std::string cmd_eval(const std::string& ckpt_path, const std::string& scene_dir,
                            const std::string& out_dir, int holdout_every, int threads) {
  const io::Checkpoint ck = io::load_checkpoint(ckpt_path);
  const io::SceneData scene = io::load_scene(scene_dir);
  const EvalResult res = run_eval(ck.model, scene, holdout_every, threads);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    io::CsvWriter csv((fs::path(out_dir) / "eval.csv").string(), "frame,psnr,ssim");
    for (size_t i = 0; i < res.holdout.size(); ++i)
      csv.row({static_cast<double>(res.holdout[i]), res.psnr_per_frame[i], res.ssim_per_frame[i]});
  }
  std::ostringstream ss;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "psnr=%.4f ssim=%.4f psnr_static=%.4f epe_full_dyn=%.4f epe_full_stat=%.4f "
                "epe_cam_stat=%.4f",
                res.psnr_mean, res.ssim_mean, res.psnr_static_mean, res.epe_full_dynamic,
                res.epe_full_static, res.epe_cam_static);
  ss << "OK cmd=eval holdout=" << res.holdout.size() << " " << buf;
  return ss.str();
}

}  // namespace reflow::commands

#endif  // REFLOW_COMMANDS_HPP
