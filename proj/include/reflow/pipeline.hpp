#ifndef REFLOW_PIPELINE_HPP
#define REFLOW_PIPELINE_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/field.hpp"
#include "reflow/flowrender.hpp"
#include "reflow/geometry.hpp"
#include "reflow/splat.hpp"
#include "reflow/warploss.hpp"

namespace reflow::pipeline {

using geometry::Camera;
using geometry::Vec2;
using geometry::Vec3;
using Eigen::Vector4d;
using flowrender::FlowField;
using splat::ActivatedGaussian;
using warploss::Image;
using warploss::Mask;

// The learnable scene: static gaussians are seed positions decoded through
// the tri-plane field; dynamic gaussians carry canonical attributes deformed
// by the space-time planes.
struct SplatModel {
  int n_static = 0;
  int n_dynamic = 0;
  std::vector<double> means;      // (n_static + n_dynamic) x 3, statics first
  std::vector<double> rotations;  // n_dynamic x 4, w x y z
  std::vector<double> scales;     // n_dynamic x 3, log
  std::vector<double> opacities;  // n_dynamic, logit
  std::vector<double> colors;     // n_dynamic x 3, logit
  field::FeatureField field;
  double lambda_tv = 1e-4;
  Vec3 background = Vec3::Zero();

  int n_total() const { return n_static + n_dynamic; }

  Vec3 static_pos(int i) const { return Vec3(means[3 * i], means[3 * i + 1], means[3 * i + 2]); }
  Vec3 dyn_mu(int i) const {
    const int b = 3 * (n_static + i);
    return Vec3(means[b], means[b + 1], means[b + 2]);
  }
  Vector4d dyn_quat(int i) const {
    return Vector4d(rotations[4 * i], rotations[4 * i + 1], rotations[4 * i + 2], rotations[4 * i + 3]);
  }
  Vec3 dyn_log_scale(int i) const {
    return Vec3(scales[3 * i], scales[3 * i + 1], scales[3 * i + 2]);
  }
  Vec3 dyn_color_logit(int i) const {
    return Vec3(colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]);
  }

  std::vector<Vec3> static_positions() const {
    std::vector<Vec3> out(n_static);
    for (int i = 0; i < n_static; ++i) out[i] = static_pos(i);
    return out;
  }
  std::vector<Vec3> dynamic_means() const {
    std::vector<Vec3> out(n_dynamic);
    for (int i = 0; i < n_dynamic; ++i) out[i] = dyn_mu(i);
    return out;
  }
};

struct ModelGrads {
  std::vector<double> means, rotations, scales, opacities, colors;
  field::FieldGrads field;

  explicit ModelGrads(const SplatModel& m)
      : means(m.means.size(), 0.0),
        rotations(m.rotations.size(), 0.0),
        scales(m.scales.size(), 0.0),
        opacities(m.opacities.size(), 0.0),
        colors(m.colors.size(), 0.0),
        field(m.field) {}

  void zero() {
    auto z = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
    z(means);
    z(rotations);
    z(scales);
    z(opacities);
    z(colors);
    for (auto& p : field.spatial) z(p);
    for (auto& p : field.temporal) z(p);
    z(field.static_decoder);
    z(field.dynamic_decoder);
  }
};

// Seed clouds produced by canonical-space construction.
struct SeedCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  // rgb in [0, 1]
};

struct ModelConfig {
  int plane_res = 64;
  int t_res = 32;
  int channels = 16;
  int hidden = 64;
  double init_opacity = 0.1;
  double lambda_tv = 1e-4;
  Vec3 background = Vec3::Zero();
};

inline SplatModel build_model(const SeedCloud& static_seed, const SeedCloud& dynamic_seed,
                              double seed_spacing, const ModelConfig& cfg, Rng& rng) {
  if (static_seed.points.empty()) throw usage_error("build_model: empty static seed cloud");
  SplatModel m;
  m.n_static = static_cast<int>(static_seed.points.size());
  m.n_dynamic = static_cast<int>(dynamic_seed.points.size());
  m.lambda_tv = cfg.lambda_tv;
  m.background = cfg.background;

  std::vector<Vec3> all = static_seed.points;
  all.insert(all.end(), dynamic_seed.points.begin(), dynamic_seed.points.end());
  m.field = field::FeatureField::make(cfg.plane_res, cfg.t_res, cfg.channels, cfg.hidden,
                                      m.n_dynamic > 0, field::bounds_from_points(all), rng);
  m.field.static_log_scale_offset = std::log(std::max(seed_spacing, 1e-6));
  m.field.static_opacity_offset = logit(cfg.init_opacity);

  m.means.resize(static_cast<size_t>(m.n_total()) * 3);
  for (int i = 0; i < m.n_static; ++i)
    for (int a = 0; a < 3; ++a) m.means[3 * i + a] = static_seed.points[i][a];
  for (int i = 0; i < m.n_dynamic; ++i)
    for (int a = 0; a < 3; ++a) m.means[3 * (m.n_static + i) + a] = dynamic_seed.points[i][a];

  m.rotations.assign(static_cast<size_t>(m.n_dynamic) * 4, 0.0);
  for (int i = 0; i < m.n_dynamic; ++i) m.rotations[4 * i] = 1.0;
  m.scales.assign(static_cast<size_t>(m.n_dynamic) * 3, std::log(std::max(seed_spacing, 1e-6)));
  m.opacities.assign(m.n_dynamic, logit(cfg.init_opacity));
  m.colors.resize(static_cast<size_t>(m.n_dynamic) * 3);
  for (int i = 0; i < m.n_dynamic; ++i)
    for (int a = 0; a < 3; ++a)
      m.colors[3 * i + a] = logit(std::min(0.999, std::max(1e-3, dynamic_seed.colors[i][a])));
  return m;
}

enum class Phase { Coarse, Fine };

struct PairInputs {
  const Image* image1 = nullptr;
  const Image* image2 = nullptr;
  const Mask* dynamic_mask1 = nullptr;  // 1 = dynamic at t1; null means all static
  Camera cam1, cam2;
};

struct DynState {
  field::DynamicBatch batch;
  std::vector<Vector4d> raw_quat;  // canonical + delta, pre-normalization
};

struct PairTape {
  field::StaticBatch stat;
  DynState dyn1, dyn2;
  std::vector<ActivatedGaussian> act1, act2;
  splat::ProjectedBatch proj1, proj2;
  splat::RasterResult raster1, raster2;
  std::vector<double> payload1, payload2;
  Image render1, render2;
  GridD depth1;  // alpha-normalized
  FlowField f_full, f_cam;
  warploss::WarpResult warp_full, warp_cam;
  Mask cam_mask;
  bool ff_active = false, cf_active = false, cam_empty = false;
};

namespace detail {

// Activated attributes of the dynamic gaussians at one timestamp.
inline void activate_dynamic(const SplatModel& m, double t, DynState& state,
                             std::vector<ActivatedGaussian>& out) {
  if (m.n_dynamic == 0) return;
  state.batch = field::decode_dynamic_batch(m.dynamic_means(), t, m.field);
  state.raw_quat.resize(m.n_dynamic);
  for (int i = 0; i < m.n_dynamic; ++i) {
    ActivatedGaussian g;
    g.mean = m.dyn_mu(i) + state.batch.deltas.d_mu[i];
    state.raw_quat[i] = m.dyn_quat(i) + state.batch.deltas.d_q[i];
    g.quat = field::normalize_quat(state.raw_quat[i]);
    g.scale = m.dyn_log_scale(i).array().exp();
    g.opacity = sigmoid(m.opacities[i]);
    const Vec3 cl = m.dyn_color_logit(i);
    for (int a = 0; a < 3; ++a) g.color[a] = sigmoid(cl[a]);
    out.push_back(g);
  }
}

inline std::vector<double> make_payload(const std::vector<ActivatedGaussian>& act,
                                        const splat::ProjectedBatch& proj) {
  std::vector<double> payload(act.size() * 4);
  for (size_t i = 0; i < act.size(); ++i) {
    payload[i * 4 + 0] = act[i].color.x();
    payload[i * 4 + 1] = act[i].color.y();
    payload[i * 4 + 2] = act[i].color.z();
    payload[i * 4 + 3] = proj.g2d[i].depth;
  }
  return payload;
}

inline Image composite_image(const splat::RasterResult& raster, const Vec3& background) {
  Image img(raster.width, raster.height);
  for (size_t pix = 0; pix < raster.alpha.data.size(); ++pix) {
    const double a = raster.alpha.data[pix];
    for (int c = 0; c < 3; ++c)
      img.data[pix * 3 + c] = clamp01(raster.payload[pix * 4 + c] + (1.0 - a) * background[c]);
  }
  return img;
}

inline GridD normalized_depth(const splat::RasterResult& raster) {
  GridD depth(raster.width, raster.height, 0.0);
  for (size_t pix = 0; pix < raster.alpha.data.size(); ++pix) {
    const double a = raster.alpha.data[pix];
    if (a > splat::kMinAlphaDepth) depth.data[pix] = raster.payload[pix * 4 + 3] / a;
  }
  return depth;
}

}  // namespace detail

// Renders the model at an arbitrary camera/timestamp (evaluation surface).
inline splat::RenderOutput render_view(const SplatModel& m, const Camera& camera, int threads = 1) {
  std::vector<ActivatedGaussian> act;
  act.reserve(m.n_total());
  const field::StaticBatch stat = field::decode_static_batch(m.static_positions(), m.field);
  for (int i = 0; i < m.n_static; ++i) {
    ActivatedGaussian g;
    g.mean = stat.attribs[i].mean;
    g.quat = stat.attribs[i].quat;
    g.scale = stat.attribs[i].scale;
    g.opacity = stat.attribs[i].opacity;
    g.color = stat.attribs[i].color;
    act.push_back(g);
  }
  DynState dyn;
  detail::activate_dynamic(m, camera.timestamp, dyn, act);
  return splat::render(act, camera, nullptr, m.background, threads);
}

// Forward pass over one frame pair. Always renders both frames; flow
// branches are synthesized only when their loss weights are active.
inline warploss::LossBreakdown forward_pair(const SplatModel& m, const PairInputs& in,
                                            const warploss::LossWeights& w, Phase phase,
                                            PairTape& tape, int threads = 1) {
  const double t1 = in.cam1.timestamp, t2 = in.cam2.timestamp;
  tape.ff_active = phase == Phase::Fine && w.lambda_ff > 0.0 &&
                   (w.lambda_mc > 0.0 || w.lambda_cr > 0.0);
  tape.cf_active = w.lambda_cf > 0.0 && (w.lambda_mc_cam > 0.0 || w.lambda_cr_cam > 0.0);

  tape.stat = field::decode_static_batch(m.static_positions(), m.field);
  tape.act1.clear();
  tape.act2.clear();
  tape.act1.reserve(m.n_total());
  tape.act2.reserve(m.n_total());
  for (int i = 0; i < m.n_static; ++i) {
    ActivatedGaussian g;
    g.mean = tape.stat.attribs[i].mean;
    g.quat = tape.stat.attribs[i].quat;
    g.scale = tape.stat.attribs[i].scale;
    g.opacity = tape.stat.attribs[i].opacity;
    g.color = tape.stat.attribs[i].color;
    tape.act1.push_back(g);
    tape.act2.push_back(g);
  }
  detail::activate_dynamic(m, t1, tape.dyn1, tape.act1);
  detail::activate_dynamic(m, t2, tape.dyn2, tape.act2);

  tape.proj1 = splat::project_gaussians(tape.act1, in.cam1);
  tape.proj2 = splat::project_gaussians(tape.act2, in.cam2);
  tape.payload1 = detail::make_payload(tape.act1, tape.proj1);
  tape.payload2 = detail::make_payload(tape.act2, tape.proj2);
  const auto& k1 = in.cam1.intrinsics;
  const auto& k2 = in.cam2.intrinsics;
  tape.raster1 = splat::rasterize(tape.proj1.g2d, tape.proj1.visible, tape.payload1, 4, k1.width,
                                  k1.height, threads);
  tape.raster2 = splat::rasterize(tape.proj2.g2d, tape.proj2.visible, tape.payload2, 4, k2.width,
                                  k2.height, threads);
  tape.render1 = detail::composite_image(tape.raster1, m.background);
  tape.render2 = detail::composite_image(tape.raster2, m.background);

  warploss::LossBreakdown terms;
  const Mask full1 = warploss::full_mask(k1.width, k1.height);
  terms.baseline = 0.5 * warploss::photometric(tape.render1, *in.image1, full1, w.lambda_dssim) +
                   0.5 * warploss::photometric(tape.render2, *in.image2,
                                               warploss::full_mask(k2.width, k2.height), w.lambda_dssim) +
                   m.lambda_tv * field::temporal_smoothness(m.field);

  if (tape.ff_active) {
    tape.f_full = flowrender::full_flow(tape.proj1.g2d, tape.proj2.g2d, tape.proj2.visible,
                                        tape.raster1, threads);
    tape.warp_full = warploss::warp(*in.image2, tape.f_full);
    terms.mc = warploss::photometric(*in.image1, tape.warp_full.image, tape.warp_full.coverage,
                                     w.lambda_dssim);
    terms.cr = warploss::photometric(tape.render1, tape.warp_full.image, tape.warp_full.coverage,
                                     w.lambda_dssim);
  }
  if (tape.cf_active) {
    tape.depth1 = detail::normalized_depth(tape.raster1);
    tape.f_cam = flowrender::camera_flow(tape.depth1, in.cam1, in.cam2, threads);
    tape.warp_cam = warploss::warp(*in.image2, tape.f_cam);
    tape.cam_mask = tape.warp_cam.coverage;
    if (in.dynamic_mask1) {
      for (size_t p = 0; p < tape.cam_mask.data.size(); ++p)
        if (in.dynamic_mask1->data[p]) tape.cam_mask.data[p] = 0;
    }
    if (warploss::mask_count(tape.cam_mask) == 0) {
      tape.cam_empty = true;
      terms.cam_warning = true;
    } else {
      terms.mc_cam = warploss::photometric(*in.image1, tape.warp_cam.image, tape.cam_mask,
                                           w.lambda_dssim);
      terms.cr_cam = warploss::photometric(tape.render1, tape.warp_cam.image, tape.cam_mask,
                                           w.lambda_dssim);
    }
  }
  warploss::assemble_total(terms, w);
  return terms;
}

// Reverse-mode gradients of assemble_total(forward_pair(...)). Truncation
// decisions (visibility, compositing stop, warp coverage) are locally
// constant, everything else is exact.
inline void backward_pair(const SplatModel& m, const PairInputs& in, const warploss::LossWeights& w,
                          const PairTape& tape, ModelGrads& grads) {
  const auto& k1 = in.cam1.intrinsics;
  const auto& k2 = in.cam2.intrinsics;
  const size_t npix1 = static_cast<size_t>(k1.width) * k1.height;
  const size_t npix2 = static_cast<size_t>(k2.width) * k2.height;
  const int n = m.n_total();

  std::vector<double> d_render1(npix1 * 3, 0.0), d_render2(npix2 * 3, 0.0);
  std::vector<double> scratch(std::max(npix1, npix2) * 3);

  const Mask full1 = warploss::full_mask(k1.width, k1.height);
  const Mask full2 = warploss::full_mask(k2.width, k2.height);
  std::fill(scratch.begin(), scratch.end(), 0.0);
  warploss::photometric_backward(tape.render1, *in.image1, full1, w.lambda_dssim, 0.5, d_render1,
                                 scratch);
  std::fill(scratch.begin(), scratch.end(), 0.0);
  warploss::photometric_backward(tape.render2, *in.image2, full2, w.lambda_dssim, 0.5, d_render2,
                                 scratch);

  std::vector<splat::Gaussian2DGrad> d_g2d1(n), d_g2d2(n);
  std::vector<double> d_entry_w(tape.raster1.entries.weight.size(), 0.0);
  GridD d_alpha1(k1.width, k1.height, 0.0), d_alpha2(k2.width, k2.height, 0.0);
  std::vector<double> d_payload_img1(npix1 * 4, 0.0), d_payload_img2(npix2 * 4, 0.0);

  if (tape.ff_active) {
    const double c_mc = w.lambda_ff * w.lambda_mc;
    const double c_cr = w.lambda_ff * w.lambda_cr;
    std::vector<double> d_warped(npix1 * 3, 0.0);
    if (c_mc > 0.0) {
      std::fill(scratch.begin(), scratch.end(), 0.0);
      warploss::photometric_backward(*in.image1, tape.warp_full.image, tape.warp_full.coverage,
                                     w.lambda_dssim, c_mc, scratch, d_warped);
    }
    if (c_cr > 0.0)
      warploss::photometric_backward(tape.render1, tape.warp_full.image, tape.warp_full.coverage,
                                     w.lambda_dssim, c_cr, d_render1, d_warped);
    GridD d_du(k1.width, k1.height, 0.0), d_dv(k1.width, k1.height, 0.0);
    warploss::warp_backward(*in.image2, tape.f_full, tape.warp_full.coverage, d_warped, d_du, d_dv);
    flowrender::full_flow_backward(tape.proj1.g2d, tape.proj2.g2d, tape.proj2.visible, tape.raster1,
                                   tape.f_full, d_du, d_dv, d_g2d1, d_g2d2, d_entry_w);
  }

  if (tape.cf_active && !tape.cam_empty) {
    const double c_mc = w.lambda_cf * w.lambda_mc_cam;
    const double c_cr = w.lambda_cf * w.lambda_cr_cam;
    std::vector<double> d_warped(npix1 * 3, 0.0);
    if (c_mc > 0.0) {
      std::fill(scratch.begin(), scratch.end(), 0.0);
      warploss::photometric_backward(*in.image1, tape.warp_cam.image, tape.cam_mask, w.lambda_dssim,
                                     c_mc, scratch, d_warped);
    }
    if (c_cr > 0.0)
      warploss::photometric_backward(tape.render1, tape.warp_cam.image, tape.cam_mask, w.lambda_dssim,
                                     c_cr, d_render1, d_warped);
    GridD d_du(k1.width, k1.height, 0.0), d_dv(k1.width, k1.height, 0.0);
    warploss::warp_backward(*in.image2, tape.f_cam, tape.warp_cam.coverage, d_warped, d_du, d_dv);
    GridD d_depth(k1.width, k1.height, 0.0);
    flowrender::camera_flow_backward(tape.depth1, in.cam1, in.cam2, tape.f_cam, d_du, d_dv, d_depth);
    // depth = S_z / alpha on covered pixels
    for (size_t pix = 0; pix < npix1; ++pix) {
      const double g = d_depth.data[pix];
      if (g == 0.0) continue;
      const double a = tape.raster1.alpha.data[pix];
      if (a <= splat::kMinAlphaDepth) continue;
      d_payload_img1[pix * 4 + 3] += g / a;
      d_alpha1.data[pix] -= g * tape.depth1.data[pix] / a;
    }
  }

  // Background compositing: color = payload_rgb + (1 - alpha) bg. The [0,1]
  // clamp never binds (sub-probability weights, colors in (0,1)).
  for (size_t pix = 0; pix < npix1; ++pix)
    for (int c = 0; c < 3; ++c) {
      const double g = d_render1[pix * 3 + c];
      d_payload_img1[pix * 4 + c] += g;
      d_alpha1.data[pix] -= g * m.background[c];
    }
  for (size_t pix = 0; pix < npix2; ++pix)
    for (int c = 0; c < 3; ++c) {
      const double g = d_render2[pix * 3 + c];
      d_payload_img2[pix * 4 + c] += g;
      d_alpha2.data[pix] -= g * m.background[c];
    }

  std::vector<double> d_payload1(static_cast<size_t>(n) * 4, 0.0);
  std::vector<double> d_payload2(static_cast<size_t>(n) * 4, 0.0);
  splat::rasterize_backward(tape.proj1.g2d, tape.payload1, 4, tape.raster1, d_payload_img1,
                            d_alpha1.data, d_entry_w, d_g2d1, d_payload1);
  splat::rasterize_backward(tape.proj2.g2d, tape.payload2, 4, tape.raster2, d_payload_img2,
                            d_alpha2.data, {}, d_g2d2, d_payload2);
  for (int i = 0; i < n; ++i) {
    d_g2d1[i].d_depth += d_payload1[i * 4 + 3];
    d_g2d2[i].d_depth += d_payload2[i * 4 + 3];
  }

  std::vector<splat::ActivatedGrad> d_act1(n), d_act2(n);
  splat::project_gaussians_backward(tape.act1, in.cam1, tape.proj1, d_g2d1, d_act1);
  splat::project_gaussians_backward(tape.act2, in.cam2, tape.proj2, d_g2d2, d_act2);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      d_act1[i].d_color[c] += d_payload1[i * 4 + c];
      d_act2[i].d_color[c] += d_payload2[i * 4 + c];
    }

  // Static gaussians appear identically in both frames.
  if (m.n_static > 0) {
    field::StaticAttribGrads sg(m.n_static);
    for (int i = 0; i < m.n_static; ++i) {
      sg.d_mean[i] = d_act1[i].d_mean + d_act2[i].d_mean;
      sg.d_quat[i] = d_act1[i].d_quat + d_act2[i].d_quat;
      sg.d_scale[i] = d_act1[i].d_scale + d_act2[i].d_scale;
      sg.d_opacity[i] = d_act1[i].d_opacity + d_act2[i].d_opacity;
      sg.d_color[i] = d_act1[i].d_color + d_act2[i].d_color;
    }
    std::vector<Vec3> d_pos(m.n_static, Vec3::Zero());
    field::decode_static_backward(m.field, tape.stat, sg, grads.field, d_pos);
    for (int i = 0; i < m.n_static; ++i)
      for (int a = 0; a < 3; ++a) grads.means[3 * i + a] += d_pos[i][a];
  }

  if (m.n_dynamic > 0) {
    std::vector<Vec3> d_dmu1(m.n_dynamic), d_dmu2(m.n_dynamic);
    std::vector<Vector4d> d_dq1(m.n_dynamic), d_dq2(m.n_dynamic);
    std::vector<Vec3> d_mu_canon(m.n_dynamic, Vec3::Zero());
    for (int j = 0; j < m.n_dynamic; ++j) {
      const int i = m.n_static + j;
      d_dmu1[j] = d_act1[i].d_mean;
      d_dmu2[j] = d_act2[i].d_mean;
      d_mu_canon[j] += d_act1[i].d_mean + d_act2[i].d_mean;
      d_dq1[j] = field::normalize_quat_backward(tape.dyn1.raw_quat[j], d_act1[i].d_quat);
      d_dq2[j] = field::normalize_quat_backward(tape.dyn2.raw_quat[j], d_act2[i].d_quat);
      for (int a = 0; a < 4; ++a) grads.rotations[4 * j + a] += d_dq1[j][a] + d_dq2[j][a];
      const Vec3 scale = tape.act1[i].scale;  // time-invariant
      for (int a = 0; a < 3; ++a)
        grads.scales[3 * j + a] += (d_act1[i].d_scale[a] + d_act2[i].d_scale[a]) * scale[a];
      const double op = tape.act1[i].opacity;
      grads.opacities[j] += (d_act1[i].d_opacity + d_act2[i].d_opacity) * op * (1.0 - op);
      for (int a = 0; a < 3; ++a) {
        const double cv = tape.act1[i].color[a];
        grads.colors[3 * j + a] +=
            (d_act1[i].d_color[a] + d_act2[i].d_color[a]) * cv * (1.0 - cv);
      }
    }
    field::decode_dynamic_backward(m.field, tape.dyn1.batch, d_dmu1, d_dq1, grads.field, d_mu_canon);
    field::decode_dynamic_backward(m.field, tape.dyn2.batch, d_dmu2, d_dq2, grads.field, d_mu_canon);
    for (int j = 0; j < m.n_dynamic; ++j)
      for (int a = 0; a < 3; ++a) grads.means[3 * (m.n_static + j) + a] += d_mu_canon[j][a];
  }

  field::temporal_smoothness_backward(m.field, m.lambda_tv, grads.field);
}

// Synthesizes both flow fields plus the t1 render for a camera/time pair
// (the FlowRender / CamFlowRender surface).
struct SceneFlowResult {
  FlowField full;
  FlowField cam;
  splat::RenderOutput render1;
};

inline SceneFlowResult scene_flow(const SplatModel& m, const Camera& cam1, const Camera& cam2,
                                  int threads = 1) {
  if (cam1.timestamp == cam2.timestamp &&
      (cam1.pose.rotation - cam2.pose.rotation).norm() < 1e-15 &&
      (cam1.pose.translation - cam2.pose.translation).norm() < 1e-15)
    throw usage_error("scene_flow: cameras must differ in time or pose");
  std::vector<ActivatedGaussian> act1, act2;
  const field::StaticBatch stat = field::decode_static_batch(m.static_positions(), m.field);
  for (int i = 0; i < m.n_static; ++i) {
    ActivatedGaussian g;
    g.mean = stat.attribs[i].mean;
    g.quat = stat.attribs[i].quat;
    g.scale = stat.attribs[i].scale;
    g.opacity = stat.attribs[i].opacity;
    g.color = stat.attribs[i].color;
    act1.push_back(g);
    act2.push_back(g);
  }
  DynState dyn1, dyn2;
  detail::activate_dynamic(m, cam1.timestamp, dyn1, act1);
  detail::activate_dynamic(m, cam2.timestamp, dyn2, act2);

  SceneFlowResult res;
  splat::RenderTape tape;
  res.render1 = splat::render(act1, cam1, &tape, m.background, threads);
  const auto proj2 = splat::project_gaussians(act2, cam2);
  res.full = flowrender::full_flow(tape.projected.g2d, proj2.g2d, proj2.visible, tape.raster, threads);
  res.cam = flowrender::camera_flow(res.render1.depth, cam1, cam2, threads);
  return res;
}

}  // namespace reflow::pipeline

#endif  // REFLOW_PIPELINE_HPP
