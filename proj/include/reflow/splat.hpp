#ifndef REFLOW_SPLAT_HPP
#define REFLOW_SPLAT_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/geometry.hpp"

namespace reflow::splat {

using geometry::Camera;
using geometry::Mat2;
using geometry::Mat3;
using geometry::Vec2;
using geometry::Vec3;
using Eigen::Vector4d;

constexpr double kNearPlane = 0.01;
constexpr double kDilation = 0.3;          // low-pass covariance floor, px^2
constexpr double kAlphaClamp = 0.99;
constexpr double kAlphaSkip = 1.0 / 255.0;
constexpr double kStopTransmittance = 1e-4;
constexpr double kBBoxSigma = 3.5;         // covers the 1/255 cutoff at alpha 0.99
constexpr double kMinAlphaDepth = 1e-3;    // depth valid where alpha exceeds this

// Stored (pre-activation) Gaussian primitive.
struct Gaussian3D {
  Vec3 mean = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vector4d rotation_q = Vector4d(1, 0, 0, 0);  // w, x, y, z
  double opacity_logit = 0.0;
  Vec3 color_coeffs = Vec3::Zero();  // degree-0 coefficients, decoded via sigmoid
  bool is_dynamic = false;
};

// Activated attributes, the common currency between the field decoders and
// the renderer.
struct ActivatedGaussian {
  Vec3 mean = Vec3::Zero();
  Vector4d quat = Vector4d(1, 0, 0, 0);  // unit norm
  Vec3 scale = Vec3::Ones();
  double opacity = 0.5;
  Vec3 color = Vec3::Constant(0.5);
};

inline ActivatedGaussian activate(const Gaussian3D& g) {
  ActivatedGaussian a;
  a.mean = g.mean;
  const double n = g.rotation_q.norm();
  if (n < 1e-12) throw numerical_error("gaussian quaternion has zero norm");
  a.quat = g.rotation_q / n;
  a.scale = g.log_scale.array().exp();
  a.opacity = sigmoid(g.opacity_logit);
  for (int k = 0; k < 3; ++k) a.color[k] = sigmoid(g.color_coeffs[k]);
  return a;
}

inline Mat3 quat_to_mat(const Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// d(sum(G .* R))/dq for the rotation above.
inline Vector4d quat_to_mat_backward(const Vector4d& q, const Mat3& g) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vector4d d;
  d[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  d[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
              w * g(2, 1) - 2 * x * g(2, 2));
  d[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
              z * g(2, 1) - 2 * y * g(2, 2));
  d[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
              x * g(2, 0) + y * g(2, 1));
  return d;
}

// Screen-space Gaussian; symmetric covariance stored as (xx, xy, yy).
struct Gaussian2D {
  Vec2 mean2d = Vec2::Zero();
  double cxx = 0, cxy = 0, cyy = 0;
  double depth = 0;
  double alpha_base = 0;  // in (0, 1)
};

struct ProjTape {
  Vec3 cam_pos = Vec3::Zero();
  Mat3 sigma3 = Mat3::Zero();
  Mat3 rot = Mat3::Identity();
  Eigen::Matrix<double, 2, 3> m = Eigen::Matrix<double, 2, 3>::Zero();  // J * W
};

struct ProjectedBatch {
  std::vector<Gaussian2D> g2d;
  std::vector<std::uint8_t> visible;
  std::vector<ProjTape> tape;
};

// EWA projection: cov2d = J W Sigma3 W' J' + dilation, Sigma3 = R S^2 R'.
inline ProjectedBatch project_gaussians(const std::vector<ActivatedGaussian>& gaussians,
                                        const Camera& camera) {
  const int n = static_cast<int>(gaussians.size());
  ProjectedBatch out;
  out.g2d.resize(n);
  out.visible.assign(n, 0);
  out.tape.resize(n);
  const auto& k = camera.intrinsics;
  const Mat3 w_rot = camera.pose.rotation;
  for (int i = 0; i < n; ++i) {
    const ActivatedGaussian& g = gaussians[i];
    const Vec3 pc = camera.pose.apply(g.mean);
    ProjTape& tp = out.tape[i];
    tp.cam_pos = pc;
    Gaussian2D& o = out.g2d[i];
    o.depth = pc.z();
    o.alpha_base = g.opacity;
    if (pc.z() <= kNearPlane) continue;  // invisible; skipped, not an error
    const double inv_z = 1.0 / pc.z();
    o.mean2d = Vec2(k.fx * pc.x() * inv_z + k.cx, k.fy * pc.y() * inv_z + k.cy);
    const Mat3 rot = quat_to_mat(g.quat);
    const Mat3 sigma3 =
        rot * Eigen::DiagonalMatrix<double, 3>(g.scale.array().square().matrix()) * rot.transpose();
    Eigen::Matrix<double, 2, 3> jac;
    jac << k.fx * inv_z, 0, -k.fx * pc.x() * inv_z * inv_z,
        0, k.fy * inv_z, -k.fy * pc.y() * inv_z * inv_z;
    const Eigen::Matrix<double, 2, 3> m = jac * w_rot;
    const Mat2 cov = m * sigma3 * m.transpose();
    o.cxx = cov(0, 0) + kDilation;
    o.cxy = 0.5 * (cov(0, 1) + cov(1, 0));
    o.cyy = cov(1, 1) + kDilation;
    tp.sigma3 = sigma3;
    tp.rot = rot;
    tp.m = m;
    out.visible[i] = 1;
  }
  return out;
}

struct Gaussian2DGrad {
  Vec2 d_mean2d = Vec2::Zero();
  double d_cxx = 0, d_cxy = 0, d_cyy = 0;  // d_cxy is the total off-diagonal gradient
  double d_depth = 0;
  double d_alpha_base = 0;
};

struct ActivatedGrad {
  Vec3 d_mean = Vec3::Zero();
  Vector4d d_quat = Vector4d::Zero();
  Vec3 d_scale = Vec3::Zero();
  double d_opacity = 0;
  Vec3 d_color = Vec3::Zero();
};

inline void project_gaussians_backward(const std::vector<ActivatedGaussian>& gaussians,
                                       const Camera& camera, const ProjectedBatch& batch,
                                       const std::vector<Gaussian2DGrad>& grads,
                                       std::vector<ActivatedGrad>& out) {
  const int n = static_cast<int>(gaussians.size());
  const auto& k = camera.intrinsics;
  const Mat3 w_rot = camera.pose.rotation;
  for (int i = 0; i < n; ++i) {
    if (!batch.visible[i]) continue;
    const Gaussian2DGrad& g = grads[i];
    const ProjTape& tp = batch.tape[i];
    const ActivatedGaussian& ag = gaussians[i];
    const double X = tp.cam_pos.x(), Y = tp.cam_pos.y(), Z = tp.cam_pos.z();
    const double inv_z = 1.0 / Z;
    ActivatedGrad& o = out[i];

    o.d_opacity += g.d_alpha_base;

    Mat2 g_cov;
    g_cov << g.d_cxx, 0.5 * g.d_cxy, 0.5 * g.d_cxy, g.d_cyy;

    const Mat3 d_sigma3 = tp.m.transpose() * g_cov * tp.m;
    const Eigen::Matrix<double, 2, 3> d_m = 2.0 * g_cov * tp.m * tp.sigma3;
    const Eigen::Matrix<double, 2, 3> d_jac = d_m * w_rot.transpose();

    // Sigma3 = R diag(s^2) R'
    const Mat3 d_rot = 2.0 * d_sigma3 * tp.rot *
                       Eigen::DiagonalMatrix<double, 3>(ag.scale.array().square().matrix());
    const Mat3 rtgr = tp.rot.transpose() * d_sigma3 * tp.rot;
    for (int a = 0; a < 3; ++a) o.d_scale[a] += 2.0 * ag.scale[a] * rtgr(a, a);
    o.d_quat += quat_to_mat_backward(ag.quat, d_rot);

    // Jacobian entries J00 = fx/Z, J02 = -fx X/Z^2, J11 = fy/Z, J12 = -fy Y/Z^2.
    Vec3 d_cam = Vec3::Zero();
    d_cam.x() += d_jac(0, 2) * (-k.fx * inv_z * inv_z);
    d_cam.y() += d_jac(1, 2) * (-k.fy * inv_z * inv_z);
    d_cam.z() += d_jac(0, 0) * (-k.fx * inv_z * inv_z) + d_jac(1, 1) * (-k.fy * inv_z * inv_z) +
                 d_jac(0, 2) * (2.0 * k.fx * X * inv_z * inv_z * inv_z) +
                 d_jac(1, 2) * (2.0 * k.fy * Y * inv_z * inv_z * inv_z);

    d_cam.x() += g.d_mean2d.x() * k.fx * inv_z;
    d_cam.y() += g.d_mean2d.y() * k.fy * inv_z;
    d_cam.z() += -g.d_mean2d.x() * k.fx * X * inv_z * inv_z - g.d_mean2d.y() * k.fy * Y * inv_z * inv_z;
    d_cam.z() += g.d_depth;

    o.d_mean += w_rot.transpose() * d_cam;
  }
}

// Flattened per-pixel blend lists; entries for pixel p live in
// [offset[p], offset[p+1]) in front-to-back order.
struct RasterEntries {
  std::vector<int> offset;       // width*height + 1
  std::vector<int> index;        // gaussian index
  std::vector<double> weight;    // w_i = alpha_i * transmittance
};

struct RasterResult {
  int width = 0, height = 0, payload_dim = 0;
  std::vector<double> payload;  // (y * width + x) * payload_dim + c
  GridD alpha;
  RasterEntries entries;
};

struct InvCov {
  double ixx, ixy, iyy;
  int x0, x1, y0, y1;  // inclusive pixel bbox
};

inline std::vector<int> depth_sorted_indices(const std::vector<Gaussian2D>& g2d,
                                             const std::vector<std::uint8_t>& visible) {
  std::vector<int> order;
  order.reserve(g2d.size());
  for (int i = 0; i < static_cast<int>(g2d.size()); ++i)
    if (visible[i]) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (g2d[a].depth != g2d[b].depth) return g2d[a].depth < g2d[b].depth;
    return a < b;
  });
  return order;
}

inline InvCov invert_cov(const Gaussian2D& g, int width, int height) {
  const double det = g.cxx * g.cyy - g.cxy * g.cxy;
  if (!(g.cxx > 0.0) || !(g.cyy > 0.0) || !(det > 1e-12))
    throw numerical_error("rasterize: non-positive-definite 2D covariance");
  InvCov ic;
  const double inv_det = 1.0 / det;
  ic.ixx = g.cyy * inv_det;
  ic.ixy = -g.cxy * inv_det;
  ic.iyy = g.cxx * inv_det;
  const double lam_max =
      0.5 * (g.cxx + g.cyy) + std::sqrt(0.25 * (g.cxx - g.cyy) * (g.cxx - g.cyy) + g.cxy * g.cxy);
  const double r = kBBoxSigma * std::sqrt(lam_max);
  ic.x0 = std::max(0, static_cast<int>(std::ceil(g.mean2d.x() - r)));
  ic.x1 = std::min(width - 1, static_cast<int>(std::floor(g.mean2d.x() + r)));
  ic.y0 = std::max(0, static_cast<int>(std::ceil(g.mean2d.y() - r)));
  ic.y1 = std::min(height - 1, static_cast<int>(std::floor(g.mean2d.y() + r)));
  return ic;
}

// Front-to-back alpha compositing of arbitrary payload channels. The result
// is independent of the thread count: each pixel is composited sequentially
// and rows are written disjointly.
inline RasterResult rasterize(const std::vector<Gaussian2D>& g2d,
                              const std::vector<std::uint8_t>& visible,
                              const std::vector<double>& payload, int payload_dim, int width,
                              int height, int threads = 1) {
  RasterResult res;
  res.width = width;
  res.height = height;
  res.payload_dim = payload_dim;
  res.payload.assign(static_cast<size_t>(width) * height * payload_dim, 0.0);
  res.alpha = GridD(width, height, 0.0);

  const std::vector<int> order = depth_sorted_indices(g2d, visible);
  std::vector<InvCov> ic(order.size());
  for (size_t oi = 0; oi < order.size(); ++oi) ic[oi] = invert_cov(g2d[order[oi]], width, height);

  // Row buckets preserve the global front-to-back order.
  std::vector<std::vector<int>> rows(height);
  for (size_t oi = 0; oi < order.size(); ++oi)
    for (int y = ic[oi].y0; y <= ic[oi].y1; ++y) rows[y].push_back(static_cast<int>(oi));

  std::vector<std::vector<std::pair<int, double>>> pixel_entries(static_cast<size_t>(width) * height);

  parallel_for(height, threads, [&](int y_begin, int y_end) {
    for (int y = y_begin; y < y_end; ++y) {
      for (int x = 0; x < width; ++x) {
        const size_t pix = static_cast<size_t>(y) * width + x;
        double transmittance = 1.0;
        double* pay = res.payload.data() + pix * payload_dim;
        auto& plist = pixel_entries[pix];
        for (int oi : rows[y]) {
          const InvCov& c = ic[oi];
          if (x < c.x0 || x > c.x1) continue;
          const int gi = order[oi];
          const Gaussian2D& g = g2d[gi];
          const double dx = x - g.mean2d.x();
          const double dy = y - g.mean2d.y();
          const double maha = c.ixx * dx * dx + 2.0 * c.ixy * dx * dy + c.iyy * dy * dy;
          double alpha = g.alpha_base * std::exp(-0.5 * maha);
          alpha = std::min(alpha, kAlphaClamp);
          if (alpha < kAlphaSkip) continue;
          const double w = alpha * transmittance;
          for (int p = 0; p < payload_dim; ++p) pay[p] += w * payload[static_cast<size_t>(gi) * payload_dim + p];
          plist.emplace_back(gi, w);
          transmittance *= (1.0 - alpha);
          if (transmittance < kStopTransmittance) break;
        }
        res.alpha.data[pix] = 1.0 - transmittance;
      }
    }
  });

  res.entries.offset.resize(static_cast<size_t>(width) * height + 1);
  res.entries.offset[0] = 0;
  size_t total = 0;
  for (size_t p = 0; p < pixel_entries.size(); ++p) {
    total += pixel_entries[p].size();
    res.entries.offset[p + 1] = static_cast<int>(total);
  }
  res.entries.index.resize(total);
  res.entries.weight.resize(total);
  size_t at = 0;
  for (const auto& plist : pixel_entries)
    for (const auto& [gi, w] : plist) {
      res.entries.index[at] = gi;
      res.entries.weight[at] = w;
      ++at;
    }
  return res;
}

// Backward through the compositing chain. d_payload_img / d_alpha_img follow
// the forward layout; d_entry_weight (optional, aligned with entries) injects
// gradients that arrived through the exposed per-pixel weights (flow render).
// Truncation decisions (skip, clamp, early stop) are locally constant.
inline void rasterize_backward(const std::vector<Gaussian2D>& g2d, const std::vector<double>& payload,
                               int payload_dim, const RasterResult& res,
                               const std::vector<double>& d_payload_img,
                               const std::vector<double>& d_alpha_img,
                               const std::vector<double>& d_entry_weight,
                               std::vector<Gaussian2DGrad>& d_g2d, std::vector<double>& d_payload) {
  const int width = res.width, height = res.height;
  std::vector<double> dldw;      // per-entry dL/dw for the current pixel
  std::vector<double> alphas;    // reconstructed alpha chain
  std::vector<double> transmit;  // transmittance before each entry
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const size_t pix = static_cast<size_t>(y) * width + x;
      const int e0 = res.entries.offset[pix];
      const int e1 = res.entries.offset[pix + 1];
      if (e0 == e1) continue;
      const int count = e1 - e0;
      dldw.assign(count, 0.0);
      alphas.assign(count, 0.0);
      transmit.assign(count, 0.0);
      const double* dp = d_payload_img.empty() ? nullptr : d_payload_img.data() + pix * payload_dim;
      const double d_alpha_pix = d_alpha_img.empty() ? 0.0 : d_alpha_img[pix];

      double t = 1.0;
      for (int e = 0; e < count; ++e) {
        const int gi = res.entries.index[e0 + e];
        const Gaussian2D& g = g2d[gi];
        const double dx = x - g.mean2d.x();
        const double dy = y - g.mean2d.y();
        const double det = g.cxx * g.cyy - g.cxy * g.cxy;
        const double inv_det = 1.0 / det;
        const double ixx = g.cyy * inv_det, ixy = -g.cxy * inv_det, iyy = g.cxx * inv_det;
        const double maha = ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy;
        const double alpha = std::min(g.alpha_base * std::exp(-0.5 * maha), kAlphaClamp);
        alphas[e] = alpha;
        transmit[e] = t;
        t *= (1.0 - alpha);

        double dw = d_alpha_pix;
        if (dp)
          for (int p = 0; p < payload_dim; ++p) dw += dp[p] * payload[static_cast<size_t>(gi) * payload_dim + p];
        if (!d_entry_weight.empty()) dw += d_entry_weight[e0 + e];
        dldw[e] = dw;
        if (dp) {
          const double w = res.entries.weight[e0 + e];
          for (int p = 0; p < payload_dim; ++p) d_payload[static_cast<size_t>(gi) * payload_dim + p] += w * dp[p];
        }
      }

      double suffix = 0.0;  // sum_{j>i} w_j dL/dw_j
      for (int e = count - 1; e >= 0; --e) {
        const int gi = res.entries.index[e0 + e];
        const double w = res.entries.weight[e0 + e];
        const double alpha = alphas[e];
        const double d_alpha = transmit[e] * dldw[e] - suffix / (1.0 - alpha);
        suffix += w * dldw[e];
        if (alpha >= kAlphaClamp) continue;  // clamped: locally constant
        const Gaussian2D& g = g2d[gi];
        const double dx = x - g.mean2d.x();
        const double dy = y - g.mean2d.y();
        const double det = g.cxx * g.cyy - g.cxy * g.cxy;
        const double inv_det = 1.0 / det;
        const double ixx = g.cyy * inv_det, ixy = -g.cxy * inv_det, iyy = g.cxx * inv_det;
        const double expv = std::exp(-0.5 * (ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy));
        Gaussian2DGrad& og = d_g2d[gi];
        og.d_alpha_base += expv * d_alpha;
        const double g_maha = -0.5 * g.alpha_base * expv * d_alpha;
        const double sx = ixx * dx + ixy * dy;  // (Sigma^-1 r)
        const double sy = ixy * dx + iyy * dy;
        og.d_mean2d.x() += -2.0 * g_maha * sx;
        og.d_mean2d.y() += -2.0 * g_maha * sy;
        // d maha / d Sigma^-1 = r r'; chain to Sigma via -S^-1 (r r') S^-1.
        og.d_cxx += -g_maha * sx * sx;
        og.d_cxy += -2.0 * g_maha * sx * sy;
        og.d_cyy += -g_maha * sy * sy;
      }
    }
  }
}

// Full rendered frame: color, alpha-normalized depth, accumulated alpha, and
// the per-pixel blend weights.
struct RenderOutput {
  int width = 0, height = 0;
  std::vector<double> color;  // (y * w + x) * 3 + c, in [0, 1]
  GridD depth;                // alpha-weighted mean depth; 0 where empty
  GridD alpha;
  RasterEntries weights;

  bool depth_valid(int x, int y) const { return alpha.at(x, y) > kMinAlphaDepth; }
};

struct RenderTape {
  ProjectedBatch projected;
  RasterResult raster;
  std::vector<double> payload;  // N x 4: r, g, b, z
};

inline RenderOutput render(const std::vector<ActivatedGaussian>& gaussians, const Camera& camera,
                           RenderTape* tape_out = nullptr, const Vec3& background = Vec3::Zero(),
                           int threads = 1) {
  const int w = camera.intrinsics.width, h = camera.intrinsics.height;
  ProjectedBatch batch = project_gaussians(gaussians, camera);
  std::vector<double> payload(gaussians.size() * 4);
  for (size_t i = 0; i < gaussians.size(); ++i) {
    payload[i * 4 + 0] = gaussians[i].color.x();
    payload[i * 4 + 1] = gaussians[i].color.y();
    payload[i * 4 + 2] = gaussians[i].color.z();
    payload[i * 4 + 3] = batch.g2d[i].depth;
  }
  RasterResult raster = rasterize(batch.g2d, batch.visible, payload, 4, w, h, threads);

  RenderOutput out;
  out.width = w;
  out.height = h;
  out.color.resize(static_cast<size_t>(w) * h * 3);
  out.depth = GridD(w, h, 0.0);
  out.alpha = raster.alpha;
  for (size_t pix = 0; pix < static_cast<size_t>(w) * h; ++pix) {
    const double a = raster.alpha.data[pix];
    for (int c = 0; c < 3; ++c)
      out.color[pix * 3 + c] = raster.payload[pix * 4 + c] + (1.0 - a) * background[c];
    if (a > kMinAlphaDepth) out.depth.data[pix] = raster.payload[pix * 4 + 3] / a;
  }
  out.weights = raster.entries;
  if (tape_out) {
    tape_out->projected = std::move(batch);
    tape_out->raster = std::move(raster);
    tape_out->payload = std::move(payload);
  }
  return out;
}

inline RenderOutput render_color(const std::vector<Gaussian3D>& gaussians, const Camera& camera,
                                 const Vec3& background = Vec3::Zero(), int threads = 1) {
  std::vector<ActivatedGaussian> act(gaussians.size());
  for (size_t i = 0; i < gaussians.size(); ++i) act[i] = activate(gaussians[i]);
  return render(act, camera, nullptr, background, threads);
}

inline GridD render_depth(const std::vector<Gaussian3D>& gaussians, const Camera& camera,
                          int threads = 1) {
  return render_color(gaussians, camera, Vec3::Zero(), threads).depth;
}

}  // namespace reflow::splat

#endif  // REFLOW_SPLAT_HPP
