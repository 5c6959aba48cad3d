#ifndef REFLOW_FLOWRENDER_HPP
#define REFLOW_FLOWRENDER_HPP

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/geometry.hpp"
#include "reflow/splat.hpp"

namespace reflow::flowrender {

using geometry::Camera;
using geometry::Mat2;
using geometry::Vec2;
using geometry::Vec3;
using splat::Gaussian2D;
using splat::Gaussian2DGrad;
using splat::RasterResult;

constexpr double kMinFlowAlpha = 1e-3;
constexpr double kCovDetGuard = 1e-12;

// Per-pixel displacement map on the source frame's grid (t1 -> t2).
// Invalid pixels carry (0, 0).
struct FlowField {
  int width = 0, height = 0;
  GridD du, dv;
  GridU8 valid;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), du(w, h, 0.0), dv(w, h, 0.0), valid(w, h, 0) {}
};

namespace detail {

struct GaussTransform {
  Mat2 a = Mat2::Identity();   // Sigma_t2 * Sigma_t1^-1
  Mat2 inv1 = Mat2::Identity();
  Vec2 mu1 = Vec2::Zero(), mu2 = Vec2::Zero();
  bool ok = false;
};

inline Mat2 cov_mat(const Gaussian2D& g) {
  Mat2 m;
  m << g.cxx, g.cxy, g.cxy, g.cyy;
  return m;
}

inline Mat2 cov_inv(const Gaussian2D& g) {
  const double det = g.cxx * g.cyy - g.cxy * g.cxy;
  if (det < kCovDetGuard) throw numerical_error("full_flow: singular source covariance");
  Mat2 m;
  m << g.cyy / det, -g.cxy / det, -g.cxy / det, g.cxx / det;
  return m;
}

}  // namespace detail

// F_full(x) = sum_i w_i (Sigma_{i,t2} Sigma_{i,t1}^-1 (x - mu_{i,t1}) + mu_{i,t2} - x),
// with blend weights reused from the t1 rasterization pass. Pixels with
// accumulated alpha below 1e-3, or visibly backed by a gaussian that left the
// t2 frustum, are marked invalid.
inline FlowField full_flow(const std::vector<Gaussian2D>& g2d_t1,
                           const std::vector<Gaussian2D>& g2d_t2,
                           const std::vector<std::uint8_t>& visible_t2, const RasterResult& raster_t1,
                           int threads = 1) {
  if (g2d_t1.size() != g2d_t2.size())
    throw usage_error("full_flow: gaussian lists are not index-aligned");
  const int w = raster_t1.width, h = raster_t1.height;
  FlowField flow(w, h);

  std::vector<detail::GaussTransform> tr(g2d_t1.size());
  std::vector<bool> used(g2d_t1.size(), false);
  for (size_t e = 0; e < raster_t1.entries.index.size(); ++e) used[raster_t1.entries.index[e]] = true;
  for (size_t i = 0; i < g2d_t1.size(); ++i) {
    if (!used[i] || !visible_t2[i]) continue;
    detail::GaussTransform& t = tr[i];
    t.inv1 = detail::cov_inv(g2d_t1[i]);
    t.a = detail::cov_mat(g2d_t2[i]) * t.inv1;
    t.mu1 = g2d_t1[i].mean2d;
    t.mu2 = g2d_t2[i].mean2d;
    t.ok = true;
  }

  parallel_for(h, threads, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t pix = static_cast<size_t>(y) * w + x;
        if (raster_t1.alpha.data[pix] < kMinFlowAlpha) continue;
        const int e0 = raster_t1.entries.offset[pix];
        const int e1 = raster_t1.entries.offset[pix + 1];
        Vec2 acc = Vec2::Zero();
        double bad_weight = 0.0;
        const Vec2 px(static_cast<double>(x), static_cast<double>(y));
        for (int e = e0; e < e1; ++e) {
          const int gi = raster_t1.entries.index[e];
          const double wgt = raster_t1.entries.weight[e];
          const detail::GaussTransform& t = tr[gi];
          if (!t.ok) {
            bad_weight += wgt;
            continue;
          }
          acc += wgt * (t.a * (px - t.mu1) + t.mu2 - px);
        }
        if (bad_weight > kMinFlowAlpha) continue;  // unreliable: contributor left the t2 view
        flow.du.data[pix] = acc.x();
        flow.dv.data[pix] = acc.y();
        flow.valid.data[pix] = 1;
      }
  });
  return flow;
}

// Backward of full_flow. d_du/d_dv follow the flow grid; gradients flow into
// both projected states and into the blend weights (d_entry_weight aligns
// with raster_t1.entries for rasterize_backward).
inline void full_flow_backward(const std::vector<Gaussian2D>& g2d_t1,
                               const std::vector<Gaussian2D>& g2d_t2,
                               const std::vector<std::uint8_t>& visible_t2,
                               const RasterResult& raster_t1, const FlowField& flow,
                               const GridD& d_du, const GridD& d_dv,
                               std::vector<Gaussian2DGrad>& d_g2d_t1,
                               std::vector<Gaussian2DGrad>& d_g2d_t2,
                               std::vector<double>& d_entry_weight) {
  const int w = raster_t1.width, h = raster_t1.height;
  std::vector<detail::GaussTransform> tr(g2d_t1.size());
  std::vector<Mat2> d_a(g2d_t1.size(), Mat2::Zero());
  std::vector<bool> used(g2d_t1.size(), false);
  for (size_t e = 0; e < raster_t1.entries.index.size(); ++e) used[raster_t1.entries.index[e]] = true;
  for (size_t i = 0; i < g2d_t1.size(); ++i) {
    if (!used[i] || !visible_t2[i]) continue;
    tr[i].inv1 = detail::cov_inv(g2d_t1[i]);
    tr[i].a = detail::cov_mat(g2d_t2[i]) * tr[i].inv1;
    tr[i].mu1 = g2d_t1[i].mean2d;
    tr[i].mu2 = g2d_t2[i].mean2d;
    tr[i].ok = true;
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t pix = static_cast<size_t>(y) * w + x;
      if (!flow.valid.data[pix]) continue;
      const Vec2 g(d_du.data[pix], d_dv.data[pix]);
      if (g.x() == 0.0 && g.y() == 0.0) continue;
      const Vec2 px(static_cast<double>(x), static_cast<double>(y));
      const int e0 = raster_t1.entries.offset[pix];
      const int e1 = raster_t1.entries.offset[pix + 1];
      for (int e = e0; e < e1; ++e) {
        const int gi = raster_t1.entries.index[e];
        const detail::GaussTransform& t = tr[gi];
        if (!t.ok) continue;
        const double wgt = raster_t1.entries.weight[e];
        const Vec2 r = px - t.mu1;
        const Vec2 f = t.a * r + t.mu2 - px;
        d_entry_weight[e] += g.dot(f);
        const Vec2 wg = wgt * g;
        d_g2d_t2[gi].d_mean2d += wg;
        d_g2d_t1[gi].d_mean2d -= t.a.transpose() * wg;
        d_a[gi] += wg * r.transpose();
      }
    }

  for (size_t i = 0; i < g2d_t1.size(); ++i) {
    if (!tr[i].ok || d_a[i].isZero(0.0)) continue;
    const Mat2 ga = d_a[i];
    const Mat2 d_cov2 = ga * tr[i].inv1;  // Sigma1^-1 symmetric
    const Mat2 d_inv1 = detail::cov_mat(g2d_t2[i]).transpose() * ga;
    const Mat2 d_cov1 = -tr[i].inv1 * d_inv1 * tr[i].inv1;
    d_g2d_t2[i].d_cxx += d_cov2(0, 0);
    d_g2d_t2[i].d_cxy += d_cov2(0, 1) + d_cov2(1, 0);
    d_g2d_t2[i].d_cyy += d_cov2(1, 1);
    d_g2d_t1[i].d_cxx += d_cov1(0, 0);
    d_g2d_t1[i].d_cxy += d_cov1(0, 1) + d_cov1(1, 0);
    d_g2d_t1[i].d_cyy += d_cov1(1, 1);
  }
}

// F_cam(p) = proj(K2 T2 T1^-1 K1^-1 (D1(p) p~)) - p. Pixels without depth
// (D <= 0) or whose world point lands behind cam2 are invalid.
inline FlowField camera_flow(const GridD& depth1, const Camera& cam1, const Camera& cam2,
                             int threads = 1) {
  const int w = depth1.width, h = depth1.height;
  FlowField flow(w, h);
  const auto& k1 = cam1.intrinsics;
  const auto& k2 = cam2.intrinsics;
  const geometry::Mat3 r_rel = cam2.pose.rotation * cam1.pose.rotation.transpose();
  const Vec3 t_rel = cam2.pose.translation - r_rel * cam1.pose.translation;
  parallel_for(h, threads, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t pix = static_cast<size_t>(y) * w + x;
        const double d = depth1.data[pix];
        if (!(d > 0.0)) continue;
        const Vec3 dir((x - k1.cx) / k1.fx, (y - k1.cy) / k1.fy, 1.0);
        const Vec3 pc2 = r_rel * (d * dir) + t_rel;
        if (pc2.z() <= splat::kNearPlane) continue;
        const double u = k2.fx * pc2.x() / pc2.z() + k2.cx;
        const double v = k2.fy * pc2.y() / pc2.z() + k2.cy;
        flow.du.data[pix] = u - x;
        flow.dv.data[pix] = v - y;
        flow.valid.data[pix] = 1;
      }
  });
  return flow;
}

// Backward to the source depth map (the camera poses are not optimized).
inline void camera_flow_backward(const GridD& depth1, const Camera& cam1, const Camera& cam2,
                                 const FlowField& flow, const GridD& d_du, const GridD& d_dv,
                                 GridD& d_depth1) {
  const int w = depth1.width, h = depth1.height;
  const auto& k1 = cam1.intrinsics;
  const auto& k2 = cam2.intrinsics;
  const geometry::Mat3 r_rel = cam2.pose.rotation * cam1.pose.rotation.transpose();
  const Vec3 t_rel = cam2.pose.translation - r_rel * cam1.pose.translation;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t pix = static_cast<size_t>(y) * w + x;
      if (!flow.valid.data[pix]) continue;
      const double gx = d_du.data[pix], gy = d_dv.data[pix];
      if (gx == 0.0 && gy == 0.0) continue;
      const double d = depth1.data[pix];
      const Vec3 dir((x - k1.cx) / k1.fx, (y - k1.cy) / k1.fy, 1.0);
      const Vec3 pc2 = r_rel * (d * dir) + t_rel;
      const Vec3 dpc2_dd = r_rel * dir;
      const double inv_z = 1.0 / pc2.z();
      const double du_dd = k2.fx * (dpc2_dd.x() * inv_z - pc2.x() * dpc2_dd.z() * inv_z * inv_z);
      const double dv_dd = k2.fy * (dpc2_dd.y() * inv_z - pc2.y() * dpc2_dd.z() * inv_z * inv_z);
      d_depth1.data[pix] += gx * du_dd + gy * dv_dd;
    }
}

}  // namespace reflow::flowrender

#endif  // REFLOW_FLOWRENDER_HPP
