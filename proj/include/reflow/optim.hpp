#ifndef REFLOW_OPTIM_HPP
#define REFLOW_OPTIM_HPP

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "reflow/adam.hpp"
#include "reflow/core.hpp"
#include "reflow/pipeline.hpp"

namespace reflow::optim {

using pipeline::ModelGrads;
using pipeline::PairInputs;
using pipeline::PairTape;
using pipeline::Phase;
using pipeline::SplatModel;

// Per-group learning rates (4DGS-style defaults).
struct LearningRates {
  double means = 1.6e-4;
  double planes = 1.6e-3;
  double decoders = 1.6e-3;
  double rotations = 1e-3;
  double scales = 5e-3;
  double opacities = 5e-2;
  double colors = 2.5e-3;
};

struct ParamSpan {
  double* param = nullptr;
  double* grad = nullptr;
  size_t size = 0;
  bool is_dynamic_decoder = false;
};

struct ParamGroup {
  std::string name;
  double lr = 0.0;
  std::vector<ParamSpan> spans;

  size_t total() const {
    size_t n = 0;
    for (const auto& s : spans) n += s.size;
    return n;
  }
};

// Non-owning view binding every learnable scalar to exactly one named group.
struct ParamSet {
  std::vector<ParamGroup> groups;

  static ParamSet bind(SplatModel& m, ModelGrads& g, const LearningRates& lr) {
    ParamSet ps;
    auto one = [](std::vector<double>& p, std::vector<double>& gr, bool dyn_dec = false) {
      return ParamSpan{p.data(), gr.data(), p.size(), dyn_dec};
    };
    ps.groups.push_back({"gaussian_means", lr.means, {one(m.means, g.means)}});
    ps.groups.push_back({"gaussian_rotations", lr.rotations, {one(m.rotations, g.rotations)}});
    ps.groups.push_back({"gaussian_scales", lr.scales, {one(m.scales, g.scales)}});
    ps.groups.push_back({"gaussian_opacities", lr.opacities, {one(m.opacities, g.opacities)}});
    ps.groups.push_back({"gaussian_colors", lr.colors, {one(m.colors, g.colors)}});
    ParamGroup spatial{"spatial_planes", lr.planes, {}};
    for (int i = 0; i < 3; ++i) spatial.spans.push_back(one(m.field.spatial[i].data, g.field.spatial[i]));
    ps.groups.push_back(std::move(spatial));
    ParamGroup temporal{"temporal_planes", lr.planes, {}};
    for (size_t i = 0; i < m.field.temporal.size(); ++i)
      temporal.spans.push_back(one(m.field.temporal[i].data, g.field.temporal[i]));
    ps.groups.push_back(std::move(temporal));
    ps.groups.push_back({"decoder_weights",
                         lr.decoders,
                         {one(m.field.static_decoder.weights, g.field.static_decoder),
                          one(m.field.dynamic_decoder.weights, g.field.dynamic_decoder, true)}});
    return ps;
  }
};

// Two-phase schedule: the coarse warm-up freezes the dynamic deformation
// surface (temporal planes + dynamic decoder) and skips full-flow terms.
struct Schedule {
  int warmup_steps = 700;
  int total_steps = 7000;
  std::set<std::string> frozen_in_coarse = {"temporal_planes", "dynamic_decoder"};

  void validate() const {
    if (!(warmup_steps >= 0 && warmup_steps < total_steps))
      throw usage_error("schedule: warmup_steps must be < total_steps");
  }
  Phase phase_at(int step) const { return step < warmup_steps ? Phase::Coarse : Phase::Fine; }
  bool frozen(const std::string& group, bool dynamic_decoder_span, Phase phase) const {
    if (phase == Phase::Fine) return false;
    if (frozen_in_coarse.count(group)) return true;
    return dynamic_decoder_span && frozen_in_coarse.count("dynamic_decoder") > 0;
  }
};

class Optimizer {
 public:
  Optimizer(ParamSet params, AdamParams hyper = {}) : params_(std::move(params)), hyper_(hyper) {
    states_.reserve(params_.groups.size());
    for (const auto& g : params_.groups) states_.emplace_back(g.total());
  }

  // Frozen spans keep parameters and moments bit-identical.
  void step(const Schedule& schedule, Phase phase) {
    ++step_count_;
    for (size_t gi = 0; gi < params_.groups.size(); ++gi) {
      ParamGroup& g = params_.groups[gi];
      AdamState& st = states_[gi];
      size_t off = 0;
      for (const auto& span : g.spans) {
        if (!schedule.frozen(g.name, span.is_dynamic_decoder, phase))
          adam_step_span(span.param, span.grad, st.m.data() + off, st.v.data() + off, span.size,
                         g.lr, step_count_, hyper_);
        off += span.size;
      }
      if (g.name == "gaussian_rotations") renormalize_quaternions(g);
    }
  }

  int step_count() const { return step_count_; }

 private:
  static void renormalize_quaternions(ParamGroup& g) {
    for (auto& span : g.spans)
      for (size_t i = 0; i + 3 < span.size; i += 4) {
        double* q = span.param + i;
        const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        if (n > 1e-12)
          for (int a = 0; a < 4; ++a) q[a] /= n;
      }
  }

  ParamSet params_;
  AdamParams hyper_;
  std::vector<AdamState> states_;
  int step_count_ = 0;
};

// Full reverse-mode gradient of the pair loss; rejects non-finite gradients
// naming the offending group.
inline warploss::LossBreakdown pair_gradient(const SplatModel& model, const PairInputs& inputs,
                                             const warploss::LossWeights& weights, Phase phase,
                                             ModelGrads& grads, int threads = 1,
                                             PairTape* tape_out = nullptr) {
  PairTape local_tape;
  PairTape& tape = tape_out ? *tape_out : local_tape;
  const warploss::LossBreakdown terms =
      pipeline::forward_pair(model, inputs, weights, phase, tape, threads);
  pipeline::backward_pair(model, inputs, weights, tape, grads);

  auto check = [](const std::vector<double>& v, const char* name) {
    for (double x : v)
      if (!std::isfinite(x))
        throw numerical_error(std::string("non-finite gradient in group ") + name);
  };
  check(grads.means, "gaussian_means");
  check(grads.rotations, "gaussian_rotations");
  check(grads.scales, "gaussian_scales");
  check(grads.opacities, "gaussian_opacities");
  check(grads.colors, "gaussian_colors");
  for (const auto& p : grads.field.spatial) check(p, "spatial_planes");
  for (const auto& p : grads.field.temporal) check(p, "temporal_planes");
  check(grads.field.static_decoder, "decoder_weights");
  check(grads.field.dynamic_decoder, "decoder_weights");
  return terms;
}

// ---------------------------------------------------------------------------
// Training loop.

struct Dataset {
  std::vector<warploss::Image> frames;
  std::vector<geometry::Camera> cameras;
  std::vector<warploss::Mask> masks;  // per-frame dynamic masks

  void validate() const {
    if (frames.empty() || frames.size() != cameras.size() || frames.size() != masks.size())
      throw usage_error("dataset: frames, cameras, and masks must align");
  }
};

struct TrainConfig {
  Schedule schedule;
  warploss::LossWeights weights;
  LearningRates lrs;
  std::uint64_t seed = 1;
  int stride = 1;           // pairs skip this many training frames
  int holdout_every = 8;    // frame i held out iff i % holdout_every == 0; 0 disables
  int threads = 1;
};

inline std::vector<int> training_frames(int n_frames, int holdout_every) {
  std::vector<int> idx;
  for (int i = 0; i < n_frames; ++i)
    if (holdout_every <= 0 || i % holdout_every != 0) idx.push_back(i);
  return idx;
}

inline std::vector<int> holdout_frames(int n_frames, int holdout_every) {
  std::vector<int> idx;
  for (int i = 0; i < n_frames; ++i)
    if (holdout_every > 0 && i % holdout_every == 0) idx.push_back(i);
  return idx;
}

struct StepInfo {
  int step = 0;
  Phase phase = Phase::Coarse;
  int frame1 = 0, frame2 = 0;
  warploss::LossBreakdown terms;
};

// Optimizes the model in place; cb(StepInfo) runs after every step (metrics,
// checkpoints). Sampling, initialization, and updates all draw from one
// seeded generator, so identical configs produce bit-identical runs.
inline void train(SplatModel& model, const Dataset& data, const TrainConfig& cfg,
                  const std::function<void(const StepInfo&)>& cb = {}) {
  data.validate();
  cfg.schedule.validate();
  cfg.weights.validate();
  const std::vector<int> train_idx = training_frames(static_cast<int>(data.frames.size()),
                                                     cfg.holdout_every);
  if (static_cast<int>(train_idx.size()) < cfg.stride + 1)
    throw usage_error("train: not enough training frames for the pair stride");
  std::vector<std::pair<int, int>> pairs;
  for (size_t k = 0; k + cfg.stride < train_idx.size(); ++k)
    pairs.emplace_back(train_idx[k], train_idx[k + cfg.stride]);

  Rng rng(cfg.seed ^ 0x7261696e5f726eULL);
  ModelGrads grads(model);
  Optimizer opt(ParamSet::bind(model, grads, cfg.lrs));

  for (int step = 0; step < cfg.schedule.total_steps; ++step) {
    const Phase phase = cfg.schedule.phase_at(step);
    const auto& [f1, f2] = pairs[rng.uniform_int(static_cast<int>(pairs.size()))];
    PairInputs inputs;
    inputs.image1 = &data.frames[f1];
    inputs.image2 = &data.frames[f2];
    inputs.dynamic_mask1 = &data.masks[f1];
    inputs.cam1 = data.cameras[f1];
    inputs.cam2 = data.cameras[f2];

    grads.zero();
    StepInfo info;
    info.step = step;
    info.phase = phase;
    info.frame1 = f1;
    info.frame2 = f2;
    info.terms = pair_gradient(model, inputs, cfg.weights, phase, grads, cfg.threads);
    opt.step(cfg.schedule, phase);
    if (cb) cb(info);
  }
}

}  // namespace reflow::optim

#endif  // REFLOW_OPTIM_HPP
