#ifndef REFLOW_WARPLOSS_HPP
#define REFLOW_WARPLOSS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/flowrender.hpp"

namespace reflow::warploss {

using flowrender::FlowField;

struct Image {
  int width = 0, height = 0;
  std::vector<double> data;  // (y * width + x) * 3 + c

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<size_t>(w) * h * 3, clamp01(fill)) {}

  static Image from_raw(int w, int h, std::vector<double> raw) {
    if (raw.size() != static_cast<size_t>(w) * h * 3) throw usage_error("image: raw size mismatch");
    Image img;
    img.width = w;
    img.height = h;
    for (auto& v : raw) v = clamp01(v);
    img.data = std::move(raw);
    return img;
  }

  double& at(int x, int y, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

struct LossWeights {
  double lambda_mc = 1.0;
  double lambda_cr = 0.1;       // 0.1x the motion-consistency weight
  double lambda_mc_cam = 1.0;
  double lambda_cr_cam = 0.1;
  double lambda_ff = 5.0;
  double lambda_cf = 0.3;
  double lambda_dssim = 0.2;

  void validate() const {
    for (double v : {lambda_mc, lambda_cr, lambda_mc_cam, lambda_cr_cam, lambda_ff, lambda_cf, lambda_dssim})
      if (!(v >= 0.0)) throw usage_error("loss weights must be nonnegative");
  }

  // Appendix-style presets: stronger constraints for simple motion, softer
  // for complex scenes.
  static LossWeights preset(const std::string& name) {
    LossWeights w;
    if (name == "simple") {
      w.lambda_ff = 5.0;
      w.lambda_cf = 0.3;
    } else if (name == "complex") {
      w.lambda_ff = 1.0;
      w.lambda_cf = 0.1;
    } else {
      throw usage_error("unknown preset: " + name);
    }
    return w;
  }
};

using Mask = GridU8;

inline Mask full_mask(int w, int h) { return Mask(w, h, 1); }

inline size_t mask_count(const Mask& m) {
  size_t n = 0;
  for (auto v : m.data) n += (v != 0);
  return n;
}

struct WarpResult {
  Image image;
  Mask coverage;
};

// Backward-sampling warp: out(x) = bilinear(target, x + flow(x)). Samples
// outside the image or on invalid flow leave the pixel uncovered.
inline WarpResult warp(const Image& target, const FlowField& flow) {
  if (target.width != flow.width || target.height != flow.height)
    throw usage_error("warp: flow grid does not match the image");
  const int w = target.width, h = target.height;
  WarpResult res{Image(w, h, 0.0), Mask(w, h, 0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t pix = static_cast<size_t>(y) * w + x;
      if (!flow.valid.data[pix]) continue;
      const double sx = x + flow.du.data[pix];
      const double sy = y + flow.dv.data[pix];
      if (!(sx >= 0.0 && sx <= w - 1.0 && sy >= 0.0 && sy <= h - 1.0)) continue;
      const int x0 = std::min(static_cast<int>(sx), w - 2);
      const int y0 = std::min(static_cast<int>(sy), h - 2);
      const double fx = sx - x0;
      const double fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        const double v00 = target.at(x0, y0, c), v10 = target.at(x0 + 1, y0, c);
        const double v01 = target.at(x0, y0 + 1, c), v11 = target.at(x0 + 1, y0 + 1, c);
        res.image.at(x, y, c) = (1 - fx) * ((1 - fy) * v00 + fy * v01) + fx * ((1 - fy) * v10 + fy * v11);
      }
      res.coverage.data[pix] = 1;
    }
  return res;
}

// Gradient of the warped image w.r.t. the flow (the target frame is data).
inline void warp_backward(const Image& target, const FlowField& flow, const Mask& coverage,
                          const std::vector<double>& d_out, GridD& d_du, GridD& d_dv) {
  const int w = target.width, h = target.height;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t pix = static_cast<size_t>(y) * w + x;
      if (!coverage.data[pix]) continue;
      const double sx = x + flow.du.data[pix];
      const double sy = y + flow.dv.data[pix];
      const int x0 = std::min(static_cast<int>(sx), w - 2);
      const int y0 = std::min(static_cast<int>(sy), h - 2);
      const double fx = sx - x0;
      const double fy = sy - y0;
      double gx = 0.0, gy = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double g = d_out[pix * 3 + c];
        if (g == 0.0) continue;
        const double v00 = target.at(x0, y0, c), v10 = target.at(x0 + 1, y0, c);
        const double v01 = target.at(x0, y0 + 1, c), v11 = target.at(x0 + 1, y0 + 1, c);
        gx += g * ((v10 - v00) * (1 - fy) + (v11 - v01) * fy);
        gy += g * ((v01 - v00) * (1 - fx) + (v11 - v10) * fx);
      }
      d_du.data[pix] += gx;
      d_dv.data[pix] += gy;
    }
}

namespace detail {

constexpr int kSsimRadius = 5;  // 11x11 window
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::vector<double>& ssim_kernel() {
  static const std::vector<double> kern = [] {
    std::vector<double> k(2 * kSsimRadius + 1);
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
      k[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
      sum += k[i + kSsimRadius];
    }
    for (auto& v : k) v /= sum;
    return k;
  }();
  return kern;
}

// Mask-weighted separable Gaussian window: pixels outside the evaluation
// mask carry zero weight, so windowed statistics never read them (this also
// covers the image border). F(u)(x) = conv(K, m u)(x) / conv(K, m)(x).
struct Filter2D {
  int width, height;
  std::vector<double> mask;  // 0/1
  std::vector<double> norm;  // conv(K, mask), > 0 at masked pixels

  Filter2D(int w, int h, const Mask& m) : width(w), height(h) {
    mask.resize(static_cast<size_t>(w) * h);
    for (size_t p = 0; p < mask.size(); ++p) mask[p] = m.data[p] ? 1.0 : 0.0;
    norm = convolve(mask);
  }

  // Plain zero-padded separable convolution with the SSIM kernel.
  std::vector<double> convolve(const std::vector<double>& src) const {
    const auto& kern = ssim_kernel();
    std::vector<double> tmp(src.size(), 0.0), dst(src.size(), 0.0);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double acc = 0.0;
        for (int k = -kSsimRadius; k <= kSsimRadius; ++k) {
          const int xx = x + k;
          if (xx < 0 || xx >= width) continue;
          acc += kern[k + kSsimRadius] * src[static_cast<size_t>(y) * width + xx];
        }
        tmp[static_cast<size_t>(y) * width + x] = acc;
      }
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double acc = 0.0;
        for (int k = -kSsimRadius; k <= kSsimRadius; ++k) {
          const int yy = y + k;
          if (yy < 0 || yy >= height) continue;
          acc += kern[k + kSsimRadius] * tmp[static_cast<size_t>(yy) * width + x];
        }
        dst[static_cast<size_t>(y) * width + x] = acc;
      }
    return dst;
  }

  std::vector<double> apply(const std::vector<double>& src) const {
    std::vector<double> masked(src.size());
    for (size_t p = 0; p < src.size(); ++p) masked[p] = src[p] * mask[p];
    std::vector<double> out = convolve(masked);
    for (size_t p = 0; p < out.size(); ++p) out[p] = norm[p] > 1e-12 ? out[p] / norm[p] : 0.0;
    return out;
  }

  // Exact transpose of apply: (F' g)(y) = m(y) conv(K, g / norm)(y).
  std::vector<double> adjoint(const std::vector<double>& g) const {
    std::vector<double> scaled(g.size());
    for (size_t p = 0; p < g.size(); ++p) scaled[p] = norm[p] > 1e-12 ? g[p] / norm[p] : 0.0;
    std::vector<double> out = convolve(scaled);
    for (size_t p = 0; p < out.size(); ++p) out[p] *= mask[p];
    return out;
  }
};

inline std::vector<double> channel(const Image& img, int c) {
  std::vector<double> out(static_cast<size_t>(img.width) * img.height);
  for (size_t p = 0; p < out.size(); ++p) out[p] = img.data[p * 3 + c];
  return out;
}

}  // namespace detail

// Mean SSIM over masked pixels (channels averaged), 11x11 Gaussian window,
// sigma 1.5, C1 = 0.01^2, C2 = 0.03^2.
inline double ssim(const Image& a, const Image& b, const Mask& mask) {
  if (a.width != b.width || a.height != b.height) throw usage_error("ssim: size mismatch");
  const size_t n_mask = mask_count(mask);
  if (n_mask == 0) throw numerical_error("ssim: empty mask support");
  detail::Filter2D filt(a.width, a.height, mask);
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const auto ac = detail::channel(a, c);
    const auto bc = detail::channel(b, c);
    std::vector<double> a2(ac.size()), b2(ac.size()), ab(ac.size());
    for (size_t p = 0; p < ac.size(); ++p) {
      a2[p] = ac[p] * ac[p];
      b2[p] = bc[p] * bc[p];
      ab[p] = ac[p] * bc[p];
    }
    const auto mu_a = filt.apply(ac);
    const auto mu_b = filt.apply(bc);
    const auto fa2 = filt.apply(a2);
    const auto fb2 = filt.apply(b2);
    const auto fab = filt.apply(ab);
    for (size_t p = 0; p < ac.size(); ++p) {
      if (!mask.data[p]) continue;
      const double va = fa2[p] - mu_a[p] * mu_a[p];
      const double vb = fb2[p] - mu_b[p] * mu_b[p];
      const double vab = fab[p] - mu_a[p] * mu_b[p];
      const double n1 = 2.0 * mu_a[p] * mu_b[p] + detail::kSsimC1;
      const double n2 = 2.0 * vab + detail::kSsimC2;
      const double d1 = mu_a[p] * mu_a[p] + mu_b[p] * mu_b[p] + detail::kSsimC1;
      const double d2 = va + vb + detail::kSsimC2;
      total += (n1 * n2) / (d1 * d2);
    }
  }
  return total / (3.0 * static_cast<double>(n_mask));
}

// (1 - lambda_dssim) L1 + lambda_dssim (1 - SSIM), on masked pixels.
inline double photometric(const Image& a, const Image& b, const Mask& mask,
                          double lambda_dssim = 0.2) {
  if (a.width != b.width || a.height != b.height) throw usage_error("photometric: size mismatch");
  const size_t n_mask = mask_count(mask);
  if (n_mask == 0) throw numerical_error("photometric: empty mask support");
  double l1 = 0.0;
  for (size_t p = 0; p < mask.data.size(); ++p) {
    if (!mask.data[p]) continue;
    for (int c = 0; c < 3; ++c) l1 += std::abs(a.data[p * 3 + c] - b.data[p * 3 + c]);
  }
  l1 /= (3.0 * static_cast<double>(n_mask));
  const double s = ssim(a, b, mask);
  return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s);
}

// Gradient of photometric w.r.t. both images, scaled by d_value.
inline void photometric_backward(const Image& a, const Image& b, const Mask& mask,
                                 double lambda_dssim, double d_value, std::vector<double>& d_a,
                                 std::vector<double>& d_b) {
  const size_t n_mask = mask_count(mask);
  if (n_mask == 0) throw numerical_error("photometric: empty mask support");
  const double l1_scale = d_value * (1.0 - lambda_dssim) / (3.0 * static_cast<double>(n_mask));
  for (size_t p = 0; p < mask.data.size(); ++p) {
    if (!mask.data[p]) continue;
    for (int c = 0; c < 3; ++c) {
      const double diff = a.data[p * 3 + c] - b.data[p * 3 + c];
      const double s = (diff > 0.0) ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      d_a[p * 3 + c] += l1_scale * s;
      d_b[p * 3 + c] -= l1_scale * s;
    }
  }

  // d/d images of -lambda * mean(SSIM).
  const double g_s = -d_value * lambda_dssim / (3.0 * static_cast<double>(n_mask));
  detail::Filter2D filt(a.width, a.height, mask);
  const size_t n_pix = static_cast<size_t>(a.width) * a.height;
  for (int c = 0; c < 3; ++c) {
    const auto ac = detail::channel(a, c);
    const auto bc = detail::channel(b, c);
    std::vector<double> a2(n_pix), b2(n_pix), ab(n_pix);
    for (size_t p = 0; p < n_pix; ++p) {
      a2[p] = ac[p] * ac[p];
      b2[p] = bc[p] * bc[p];
      ab[p] = ac[p] * bc[p];
    }
    const auto mu_a = filt.apply(ac);
    const auto mu_b = filt.apply(bc);
    const auto fa2 = filt.apply(a2);
    const auto fb2 = filt.apply(b2);
    const auto fab = filt.apply(ab);
    std::vector<double> g_mu_a(n_pix, 0.0), g_mu_b(n_pix, 0.0);
    std::vector<double> g_fa2(n_pix, 0.0), g_fb2(n_pix, 0.0), g_fab(n_pix, 0.0);
    for (size_t p = 0; p < n_pix; ++p) {
      if (!mask.data[p]) continue;
      const double va = fa2[p] - mu_a[p] * mu_a[p];
      const double vb = fb2[p] - mu_b[p] * mu_b[p];
      const double vab = fab[p] - mu_a[p] * mu_b[p];
      const double n1 = 2.0 * mu_a[p] * mu_b[p] + detail::kSsimC1;
      const double n2 = 2.0 * vab + detail::kSsimC2;
      const double d1 = mu_a[p] * mu_a[p] + mu_b[p] * mu_b[p] + detail::kSsimC1;
      const double d2 = va + vb + detail::kSsimC2;
      const double s = (n1 * n2) / (d1 * d2);
      const double ds_dmua = (2.0 * mu_b[p] * n2) / (d1 * d2) - s * (2.0 * mu_a[p]) / d1;
      const double ds_dmub = (2.0 * mu_a[p] * n2) / (d1 * d2) - s * (2.0 * mu_b[p]) / d1;
      const double ds_dvab = 2.0 * n1 / (d1 * d2);
      const double ds_dv = -s / d2;  // both va and vb
      // variance terms: va = F(a^2) - mu_a^2, vab = F(ab) - mu_a mu_b
      g_fa2[p] = g_s * ds_dv;
      g_fb2[p] = g_s * ds_dv;
      g_fab[p] = g_s * ds_dvab;
      g_mu_a[p] = g_s * (ds_dmua - 2.0 * mu_a[p] * ds_dv - mu_b[p] * ds_dvab);
      g_mu_b[p] = g_s * (ds_dmub - 2.0 * mu_b[p] * ds_dv - mu_a[p] * ds_dvab);
    }
    const auto ta = filt.adjoint(g_mu_a);
    const auto tb = filt.adjoint(g_mu_b);
    const auto ta2 = filt.adjoint(g_fa2);
    const auto tb2 = filt.adjoint(g_fb2);
    const auto tab = filt.adjoint(g_fab);
    for (size_t p = 0; p < n_pix; ++p) {
      d_a[p * 3 + c] += ta[p] + 2.0 * ac[p] * ta2[p] + bc[p] * tab[p];
      d_b[p * 3 + c] += tb[p] + 2.0 * bc[p] * tb2[p] + ac[p] * tab[p];
    }
  }
}

struct FlowLossResult {
  double mc = 0.0;
  double cr = 0.0;
  Mask mask;          // pixels the losses were evaluated on
  WarpResult warped;  // warp(I2, flow)
  bool empty_support = false;
};

// L_mc = photo(I1, warp(I2, F)), L_cr = photo(render1, warp(I2, F)).
inline FlowLossResult full_flow_losses(const Image& i1, const Image& i2, const Image& render1,
                                       const FlowField& flow, double lambda_dssim) {
  FlowLossResult res;
  res.warped = warp(i2, flow);
  res.mask = res.warped.coverage;
  res.mc = photometric(i1, res.warped.image, res.mask, lambda_dssim);
  res.cr = photometric(render1, res.warped.image, res.mask, lambda_dssim);
  return res;
}

// Camera-flow variants restricted to static pixels; a fully dynamic frame
// yields zero losses with the warning flag set.
inline FlowLossResult camera_flow_losses(const Image& i1, const Image& i2, const Image& render1,
                                         const FlowField& flow, const Mask& static_mask,
                                         double lambda_dssim) {
  FlowLossResult res;
  res.warped = warp(i2, flow);
  res.mask = res.warped.coverage;
  for (size_t p = 0; p < res.mask.data.size(); ++p)
    res.mask.data[p] = res.mask.data[p] && static_mask.data[p];
  if (mask_count(res.mask) == 0) {
    res.empty_support = true;
    return res;
  }
  res.mc = photometric(i1, res.warped.image, res.mask, lambda_dssim);
  res.cr = photometric(render1, res.warped.image, res.mask, lambda_dssim);
  return res;
}

struct LossBreakdown {
  double baseline = 0.0;  // photometric render term + plane smoothness
  double mc = 0.0, cr = 0.0;
  double mc_cam = 0.0, cr_cam = 0.0;
  double total = 0.0;
  bool cam_warning = false;
};

inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw numerical_error(std::string("total_loss: non-finite term ") + term);
}

// total = baseline + lambda_ff (lambda_mc L_mc + lambda_cr L_cr)
//       + lambda_cf (lambda_mc_cam L_mc_cam + lambda_cr_cam L_cr_cam)
inline double assemble_total(LossBreakdown& terms, const LossWeights& w) {
  check_finite(terms.baseline, "L_baseline");
  check_finite(terms.mc, "L_mc");
  check_finite(terms.cr, "L_cr");
  check_finite(terms.mc_cam, "L_mc_cam");
  check_finite(terms.cr_cam, "L_cr_cam");
  terms.total = terms.baseline + w.lambda_ff * (w.lambda_mc * terms.mc + w.lambda_cr * terms.cr) +
                w.lambda_cf * (w.lambda_mc_cam * terms.mc_cam + w.lambda_cr_cam * terms.cr_cam);
  check_finite(terms.total, "total");
  return terms.total;
}

}  // namespace reflow::warploss

#endif  // REFLOW_WARPLOSS_HPP
