#ifndef REFLOW_CANONICAL_HPP
#define REFLOW_CANONICAL_HPP

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "reflow/adam.hpp"
#include "reflow/core.hpp"
#include "reflow/geometry.hpp"
#include "reflow/warploss.hpp"

namespace reflow::canonical {

using geometry::Camera;
using geometry::Intrinsics;
using geometry::Mat3;
using geometry::Pose;
using geometry::Vec2;
using geometry::Vec3;
using geometry::Vec6;
using warploss::Image;
using warploss::Mask;

// ---------------------------------------------------------------------------
// Oracle interface: the geometry-foundation-model stand-in.

struct PointMapPair {
  int width = 0, height = 0;
  std::vector<Vec3> x_aa;      // frame a's points in a's camera coordinates
  std::vector<Vec3> x_ab;      // frame b's points in a's camera coordinates
  std::vector<double> c_aa, c_ab;  // confidences in [0, 1]
};

class PointMapOracle {
 public:
  virtual ~PointMapOracle() = default;
  virtual PointMapPair point_maps(int frame_a, int frame_b) const = 0;
  virtual int n_frames() const = 0;
};

// Analytic oracle over ground-truth depths and cameras, with configurable
// relative depth noise and confidence degradation on dynamic pixels.
// Deterministic per (seed, a, b) regardless of call order.
class GroundTruthOracle : public PointMapOracle {
 public:
  GroundTruthOracle(const std::vector<GridD>& depths, const std::vector<Camera>& cameras,
                    const std::vector<Mask>& dynamic_masks, double depth_noise = 0.0,
                    double dynamic_confidence = 0.7, std::uint64_t seed = 1)
      : depths_(depths),
        cameras_(cameras),
        masks_(dynamic_masks),
        noise_(depth_noise),
        dyn_conf_(dynamic_confidence),
        seed_(seed) {
    if (depths_.size() != cameras_.size() || masks_.size() != cameras_.size())
      throw usage_error("oracle: depths, cameras, masks must align");
  }

  int n_frames() const override { return static_cast<int>(cameras_.size()); }

  PointMapPair point_maps(int a, int b) const override {
    const GridD& da = depths_.at(a);
    PointMapPair out;
    out.width = da.width;
    out.height = da.height;
    const size_t n = da.data.size();
    out.x_aa.assign(n, Vec3::Zero());
    out.x_ab.assign(n, Vec3::Zero());
    out.c_aa.assign(n, 0.0);
    out.c_ab.assign(n, 0.0);

    std::uint64_t mix = seed_;
    mix ^= splitmix64(mix) + 0x9e37ULL * (static_cast<std::uint64_t>(a) * 1315423911ULL +
                                          static_cast<std::uint64_t>(b) + 1);
    Rng rng(mix);

    fill_map(a, rng, cameras_[a], out.x_aa, out.c_aa, /*to_frame_a=*/a);
    fill_map(b, rng, cameras_[a], out.x_ab, out.c_ab, /*to_frame_a=*/a);
    return out;
  }

 private:
  void fill_map(int src, Rng& rng, const Camera& anchor_cam, std::vector<Vec3>& pts,
                std::vector<double>& conf, int anchor_frame) const {
    (void)anchor_frame;
    const GridD& depth = depths_[src];
    const Camera& cam = cameras_[src];
    for (int y = 0; y < depth.height; ++y)
      for (int x = 0; x < depth.width; ++x) {
        const size_t p = static_cast<size_t>(y) * depth.width + x;
        const double d = depth.data[p];
        const double noise = noise_ > 0.0 ? noise_ * rng.normal() : 0.0;
        if (!(d > 0.0)) continue;
        const double dn = d * (1.0 + noise);
        if (!(dn > 0.0)) continue;
        const Vec3 world = geometry::back_project(Vec2(x, y), dn, cam);
        pts[p] = anchor_cam.pose.apply(world);  // expressed in frame a's camera coords
        conf[p] = masks_[src].data[p] ? dyn_conf_ : 1.0;
      }
  }

  const std::vector<GridD>& depths_;
  const std::vector<Camera>& cameras_;
  const std::vector<Mask>& masks_;
  double noise_;
  double dyn_conf_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Clip planning.

struct ClipPlan {
  std::vector<std::pair<int, int>> clips;       // [begin, end)
  std::vector<int> keyframes;                   // clip heads
  std::vector<std::pair<int, int>> graph_edges; // indices into keyframes
};

inline ClipPlan plan_clips(int n_frames, int clip_len) {
  if (n_frames < 1) throw usage_error("plan_clips: need at least one frame");
  if (clip_len < 2) throw usage_error("plan_clips: clip_len must be >= 2");
  ClipPlan plan;
  for (int begin = 0; begin < n_frames; begin += clip_len) {
    const int end = std::min(n_frames, begin + clip_len);
    plan.clips.emplace_back(begin, end);
    plan.keyframes.push_back(begin);
  }
  const int k = static_cast<int>(plan.keyframes.size());
  if (k <= 12) {
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j) plan.graph_edges.emplace_back(i, j);
  } else {
    for (int i = 0; i + 1 < k; ++i) plan.graph_edges.emplace_back(i, i + 1);
    for (int i = 0; i + 3 < k; ++i) plan.graph_edges.emplace_back(i, i + 3);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Alignment state and objective.

struct AlignmentState {
  std::vector<Pose> poses;
  std::vector<Intrinsics> intrinsics;
  std::vector<GridD> depths;
  std::vector<std::uint8_t> fixed;   // pose held フィクスト by the optimizer
  std::vector<std::uint8_t> solved;  // filled by some alignment stage
};

struct AlignOptions {
  double consistency_weight = 1.0;
  double smoothness_weight = 0.01;
  double confidence_threshold = 0.5;  // cloud extraction
  int iterations = 400;
  double lr_pose = 2e-3;
  double lr_log_depth = 5e-3;
  double lr_log_focal = 1e-3;
  int target_samples = 1024;  // per map, pixel-strided
  double fixed_sigma = 0.0;   // > 0 pins the per-pair scale (tests)
  double depth_noise = 0.0;          // forwarded to harness oracles by callers
};

namespace detail {

struct SampleBlock {
  int map_frame = -1;  // whose depth/pose parameterize the target points
  std::vector<Vec2> px;
  std::vector<Vec3> x_hat;  // oracle points in the anchor frame's coords
  std::vector<double> weight;
  std::vector<double> base_depth;
};

struct PairData {
  int frame_a = -1, frame_b = -1;
  SampleBlock own, cross;  // X_aa and X_ab samples
};

inline int auto_stride(int width, int height, int target) {
  const double total = static_cast<double>(width) * height;
  int stride = static_cast<int>(std::floor(std::sqrt(std::max(1.0, total / target))));
  return std::max(1, stride);
}

}  // namespace detail

// Shared solver for the coarse and fine stages: first-order (Adam) descent on
// local se3 pose increments, per-frame log-depth scales, and one shared
// log-focal. The per-pair scale sigma is the closed-form least-squares value,
// treated as locally constant in gradients.
class AlignSolver {
 public:
  AlignSolver(std::vector<int> frames, const AlignmentState& init, double focal,
              const Vec2& principal, int width, int height, const AlignOptions& opts)
      : frames_(std::move(frames)),
        opts_(opts),
        focal0_(focal),
        pp_(principal),
        width_(width),
        height_(height) {
    local_.resize(frames_.size());
    for (size_t i = 0; i < frames_.size(); ++i) {
      local_[i] = i;
      frame_index_[frames_[i]] = static_cast<int>(i);
      poses_.push_back(init.poses[frames_[i]]);
      base_depth_.push_back(init.depths[frames_[i]]);
    }
    log_scale_.assign(frames_.size(), 0.0);
    fixed_pose_.assign(frames_.size(), 0);
    fixed_scale_.assign(frames_.size(), 0);
  }

  void fix_pose(int frame) { fixed_pose_[frame_index_.at(frame)] = 1; }
  void fix_scale(int frame) { fixed_scale_[frame_index_.at(frame)] = 1; }
  void fix_focal() { fixed_focal_ = true; }

  void add_pair(int a, int b, const PointMapPair& maps, const Mask* mask_a, const Mask* mask_b) {
    detail::PairData pd;
    pd.frame_a = a;
    pd.frame_b = b;
    const int stride = detail::auto_stride(maps.width, maps.height, opts_.target_samples);
    fill_block(pd.own, a, maps.x_aa, maps.c_aa, mask_a, maps.width, maps.height, stride, a);
    fill_block(pd.cross, b, maps.x_ab, maps.c_ab, mask_b, maps.width, maps.height, stride, a);
    pairs_.push_back(std::move(pd));
  }

  double focal() const { return focal0_ * std::exp(log_focal_); }

  // Consistency objective over all pairs at the current state.
  double consistency() const {
    double total = 0.0;
    for (const auto& pd : pairs_) total += pair_loss(pd, nullptr);
    return total;
  }

  double smoothness() const {
    double total = 0.0;
    for (size_t i = 0; i + 2 < poses_.size(); ++i) {
      const Vec6 v1 = geometry::se3_log(geometry::compose(geometry::invert(poses_[i]), poses_[i + 1]));
      const Vec6 v2 =
          geometry::se3_log(geometry::compose(geometry::invert(poses_[i + 1]), poses_[i + 2]));
      total += (v1 - v2).squaredNorm();
    }
    return total;
  }

  double objective() const { return consistency() + opts_.smoothness_weight * smoothness(); }

  void optimize(int iterations) {
    if (pairs_.empty()) return;
    const size_t nf = frames_.size();
    const size_t dim = 6 * nf + nf + 1;
    std::vector<double> grad(dim, 0.0), params(dim, 0.0);
    optim::AdamState state(dim);
    const double initial = objective();
    for (int it = 0; it < iterations; ++it) {
      // Adam is scale-free, so the L1 objective needs a decaying step size to
      // settle instead of jittering at lr around the optimum.
      lr_decay_ = std::exp(-5.0 * static_cast<double>(it) / std::max(1, iterations));
      std::fill(grad.begin(), grad.end(), 0.0);
      gradient(grad);
      // one Adam step; pose slots are local increments folded afterwards
      std::fill(params.begin(), params.end(), 0.0);
      for (size_t i = 0; i < nf; ++i) params[6 * nf + i] = log_scale_[i];
      params[7 * nf] = log_focal_;
      step_adam(params, grad, state, it + 1);
      for (size_t i = 0; i < nf; ++i) {
        if (!fixed_pose_[i]) {
          Vec6 delta;
          for (int j = 0; j < 6; ++j) delta[j] = params[6 * i + j];
          poses_[i] = geometry::compose(geometry::se3_exp(delta), poses_[i]);
        }
        if (!fixed_scale_[i]) log_scale_[i] = params[6 * nf + i];
      }
      if (!fixed_focal_) log_focal_ = params[7 * nf];
    }
    // Adam wanders before the decay settles it, so divergence is judged on
    // the final state; the floor keeps near-zero noiseless inits from
    // tripping the ratio on numerical dust.
    double weight_scale = 0.0;
    for (const auto& pd : pairs_) {
      for (double w : pd.own.weight) weight_scale += w;
      for (double w : pd.cross.weight) weight_scale += w;
    }
    const double final_loss = objective();
    if (final_loss > 10.0 * std::max(initial, 1e-4 * weight_scale))
      throw numerical_error("alignment diverged (loss grew 10x over initial)");
  }

  // Writes the solved slice back into the global state.
  void commit(AlignmentState& state) const {
    for (size_t i = 0; i < frames_.size(); ++i) {
      const int f = frames_[i];
      state.poses[f] = poses_[i];
      state.intrinsics[f] =
          Intrinsics::make(focal(), focal(), pp_.x(), pp_.y(), width_, height_);
      state.depths[f] = base_depth_[i];
      const double s = std::exp(log_scale_[i]);
      for (auto& d : state.depths[f].data) d *= s;
      state.solved[f] = 1;
    }
  }

  const Pose& pose_of(int frame) const { return poses_[frame_index_.at(frame)]; }
  void set_pose(int frame, const Pose& p) { poses_[frame_index_.at(frame)] = p; }
  double& log_scale_ref(int frame) { return log_scale_[frame_index_.at(frame)]; }
  double& log_focal_ref() { return log_focal_; }

  // Parameter layout: [6 pose-increment slots per frame | per-frame log depth
  // scale | shared log focal].
  void gradient(std::vector<double>& grad) const {
    for (const auto& pd : pairs_) pair_loss(pd, &grad);
    // smoothness via central differences on the pose increments (cheap)
    if (opts_.smoothness_weight > 0.0 && poses_.size() >= 3) {
      const double h = 1e-6;
      AlignSolver* self = const_cast<AlignSolver*>(this);
      for (size_t i = 0; i < poses_.size(); ++i) {
        if (fixed_pose_[i]) continue;
        const Pose saved = poses_[i];
        for (int j = 0; j < 6; ++j) {
          Vec6 delta = Vec6::Zero();
          delta[j] = h;
          self->poses_[i] = geometry::compose(geometry::se3_exp(delta), saved);
          const double up = smoothness();
          delta[j] = -h;
          self->poses_[i] = geometry::compose(geometry::se3_exp(delta), saved);
          const double dn = smoothness();
          self->poses_[i] = saved;
          grad[6 * i + j] += opts_.smoothness_weight * (up - dn) / (2.0 * h);
        }
      }
    }
  }

 private:
  void step_adam(std::vector<double>& params, const std::vector<double>& grad,
                 optim::AdamState& st, int step_index) {
    const size_t nf = frames_.size();
    for (size_t i = 0; i < nf; ++i)
      if (!fixed_pose_[i])
        optim::adam_step_span(params.data() + 6 * i, grad.data() + 6 * i, st.m.data() + 6 * i,
                              st.v.data() + 6 * i, 6, lr_decay_ * opts_.lr_pose, step_index);
    for (size_t i = 0; i < nf; ++i)
      if (!fixed_scale_[i])
        optim::adam_step_span(params.data() + 6 * nf + i, grad.data() + 6 * nf + i,
                              st.m.data() + 6 * nf + i, st.v.data() + 6 * nf + i, 1,
                              lr_decay_ * opts_.lr_log_depth, step_index);
    if (!fixed_focal_)
      optim::adam_step_span(params.data() + 7 * nf, grad.data() + 7 * nf, st.m.data() + 7 * nf,
                            st.v.data() + 7 * nf, 1, lr_decay_ * opts_.lr_log_focal, step_index);
  }

  void fill_block(detail::SampleBlock& block, int map_frame, const std::vector<Vec3>& pts,
                  const std::vector<double>& conf, const Mask* mask, int w, int h, int stride,
                  int anchor) const {
    (void)anchor;
    block.map_frame = map_frame;
    for (int y = 0; y < h; y += stride)
      for (int x = 0; x < w; x += stride) {
        const size_t p = static_cast<size_t>(y) * w + x;
        if (!(conf[p] > 0.0)) continue;
        double weight = conf[p];
        if (mask && mask->data[p]) weight = 0.0;  // dynamic exclusion
        if (weight <= 0.0) continue;
        const GridD& d0 = base_depth_[frame_index_.at(map_frame)];
        if (!(d0.data[p] > 0.0)) continue;
        block.px.emplace_back(x, y);
        block.x_hat.push_back(pts[p]);
        block.weight.push_back(weight);
        block.base_depth.push_back(d0.data[p]);
      }
  }

  // World point of a sample under the current parameters.
  Vec3 sample_world(const detail::SampleBlock& block, size_t k) const {
    const int li = frame_index_.at(block.map_frame);
    const double f = focal();
    const double d = std::exp(log_scale_[li]) * block.base_depth[k];
    const Vec3 dir((block.px[k].x() - pp_.x()) / f, (block.px[k].y() - pp_.y()) / f, 1.0);
    return poses_[li].apply_inverse(d * dir);
  }

  double block_terms(const detail::PairData& pd, const detail::SampleBlock& block, int anchor_local,
                     double sigma, std::vector<double>* grad) const {
    const Pose& pose_a = poses_[anchor_local];
    const int li = frame_index_.at(block.map_frame);
    const Pose& pose_m = poses_[li];
    const double f = focal();
    const double scale_m = std::exp(log_scale_[li]);
    const size_t nf = frames_.size();
    double loss = 0.0;
    for (size_t k = 0; k < block.px.size(); ++k) {
      const Vec3 a_pt = pose_a.apply_inverse(block.x_hat[k]);
      const double d = scale_m * block.base_depth[k];
      const Vec3 dir((block.px[k].x() - pp_.x()) / f, (block.px[k].y() - pp_.y()) / f, 1.0);
      const Vec3 y = d * dir;
      const Vec3 b_pt = pose_m.apply_inverse(y);
      const Vec3 r = sigma * a_pt - b_pt;
      const double w = block.weight[k] * opts_.consistency_weight;
      loss += w * r.cwiseAbs().sum();
      if (!grad) continue;
      Vec3 s(r.x() > 0 ? w : (r.x() < 0 ? -w : 0.0), r.y() > 0 ? w : (r.y() < 0 ? -w : 0.0),
             r.z() > 0 ? w : (r.z() < 0 ? -w : 0.0));
      // Local increment T <- exp(delta) T gives d(T^-1 z)/d(omega, v) =
      // [R'[z]x | -R']; the A term carries +sigma, the B term enters with -1.
      if (!fixed_pose_[anchor_local]) {
        const Vec3 rs = pose_a.rotation * s;
        const Vec3 g_omega = sigma * (geometry::skew(block.x_hat[k]).transpose() * rs);
        const Vec3 g_v = -sigma * rs;
        for (int j = 0; j < 3; ++j) {
          (*grad)[6 * anchor_local + j] += g_omega[j];
          (*grad)[6 * anchor_local + 3 + j] += g_v[j];
        }
      }
      if (!fixed_pose_[li]) {
        const Vec3 rs = pose_m.rotation * s;
        const Vec3 g_omega = -(geometry::skew(y).transpose() * rs);
        const Vec3 g_v = rs;
        for (int j = 0; j < 3; ++j) {
          (*grad)[6 * li + j] += g_omega[j];
          (*grad)[6 * li + 3 + j] += g_v[j];
        }
      }
      if (!fixed_scale_[li]) {
        const Vec3 db_ds = pose_m.rotation.transpose() * y;  // log-depth chain
        (*grad)[6 * nf + li] += -s.dot(db_ds);
      }
      if (!fixed_focal_) {
        const Vec3 ddir_dlf(-(block.px[k].x() - pp_.x()) / f, -(block.px[k].y() - pp_.y()) / f, 0.0);
        const Vec3 db_dlf = pose_m.rotation.transpose() * (d * ddir_dlf);
        (*grad)[7 * nf] += -s.dot(db_dlf);
      }
    }
    return loss;
  }

  double pair_loss(const detail::PairData& pd, std::vector<double>* grad) const {
    const int anchor_local = frame_index_.at(pd.frame_a);
    // closed-form least-squares scale over both maps, detached in gradients
    double num = 0.0, den = 0.0;
    for (const auto* block : {&pd.own, &pd.cross}) {
      const Pose& pose_a = poses_[anchor_local];
      for (size_t k = 0; k < block->px.size(); ++k) {
        const Vec3 a_pt = pose_a.apply_inverse(block->x_hat[k]);
        const Vec3 b_pt = sample_world(*block, k);
        num += block->weight[k] * a_pt.dot(b_pt);
        den += block->weight[k] * a_pt.squaredNorm();
      }
    }
    const double sigma = opts_.fixed_sigma > 0.0
                             ? opts_.fixed_sigma
                             : (den > 1e-12 ? std::min(10.0, std::max(0.1, num / den)) : 1.0);
    double loss = 0.0;
    loss += block_terms(pd, pd.own, anchor_local, sigma, grad);
    loss += block_terms(pd, pd.cross, anchor_local, sigma, grad);
    return loss;
  }

  std::vector<int> frames_;
  std::vector<int> local_;
  std::map<int, int> frame_index_;
  AlignOptions opts_;
  double focal0_;
  Vec2 pp_;
  int width_, height_;
  std::vector<Pose> poses_;
  std::vector<GridD> base_depth_;
  std::vector<double> log_scale_;
  std::vector<std::uint8_t> fixed_pose_, fixed_scale_;
  bool fixed_focal_ = false;
  double log_focal_ = 0.0;
  double lr_decay_ = 1.0;
  std::vector<detail::PairData> pairs_;
};

// Dense single-pair alignment loss (the testable op surface; the solver uses
// strided samples of the same residuals).
inline double align_loss(const PointMapPair& maps, const AlignmentState& state, int frame_a,
                         int frame_b, const Mask* mask_a, const Mask* mask_b,
                         const AlignOptions& opts = {}) {
  AlignOptions dense = opts;
  dense.target_samples = maps.width * maps.height;
  std::vector<int> frames = {frame_a};
  if (frame_b != frame_a) frames.push_back(frame_b);
  const auto& k = state.intrinsics[frame_a];
  AlignSolver solver(frames, state, k.fx, Vec2(k.cx, k.cy), maps.width, maps.height, dense);
  solver.add_pair(frame_a, frame_b, maps, mask_a, mask_b);
  return solver.consistency();
}

// ---------------------------------------------------------------------------
// Initialization helpers.

// Least-squares focal from a self point map: u - cx = f X/Z, v - cy = f Y/Z.
inline double estimate_focal(const PointMapPair& self_map, const Vec2& principal) {
  double num = 0.0, den = 0.0;
  for (int y = 0; y < self_map.height; ++y)
    for (int x = 0; x < self_map.width; ++x) {
      const size_t p = static_cast<size_t>(y) * self_map.width + x;
      if (!(self_map.c_aa[p] > 0.0)) continue;
      const Vec3& pt = self_map.x_aa[p];
      if (pt.z() < 1e-9) continue;
      const double xn = pt.x() / pt.z(), yn = pt.y() / pt.z();
      num += (x - principal.x()) * xn + (y - principal.y()) * yn;
      den += xn * xn + yn * yn;
    }
  if (den < 1e-12) throw numerical_error("estimate_focal: degenerate point map");
  return num / den;
}

// Weighted Kabsch: finds R, t with R*src + t ~ dst.
inline Pose procrustes(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                       const std::vector<double>& w) {
  double wsum = 0.0;
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    wsum += w[i];
    cs += w[i] * src[i];
    cd += w[i] * dst[i];
  }
  if (wsum < 1e-12) throw numerical_error("procrustes: empty support");
  cs /= wsum;
  cd /= wsum;
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < src.size(); ++i) h += w[i] * (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 rot = svd.matrixV() * d * svd.matrixU().transpose();
  return Pose{rot, cd - rot * cs};
}

struct CoarseInputs {
  const PointMapOracle* oracle = nullptr;
  const std::vector<Mask>* dynamic_masks = nullptr;  // may be null
  int width = 0, height = 0;
  // Fixed camera parameters (the COLMAP-style prior): when set, keyframe
  // poses and intrinsics stay bit-exact and only depths optimize.
  std::optional<std::vector<Camera>> fixed_cameras;
};

namespace detail {

inline const Mask* mask_of(const std::vector<Mask>* masks, int frame) {
  return masks ? &(*masks)[frame] : nullptr;
}

inline GridD depth_from_self_map(const PointMapPair& self_map) {
  GridD depth(self_map.width, self_map.height, 0.0);
  for (size_t p = 0; p < self_map.x_aa.size(); ++p)
    if (self_map.c_aa[p] > 0.0) depth.data[p] = self_map.x_aa[p].z();
  return depth;
}

}  // namespace detail

// Coarse keyframe alignment over the connectivity graph.
inline AlignmentState coarse_align(const ClipPlan& plan, const CoarseInputs& in,
                                   const AlignOptions& opts = {}) {
  if (!in.oracle) throw usage_error("coarse_align: oracle required");
  const int n = in.oracle->n_frames();
  AlignmentState state;
  state.poses.assign(n, Pose{});
  state.intrinsics.assign(
      n, Intrinsics::make(std::max(in.width, in.height) * 1.0, std::max(in.width, in.height) * 1.0,
                          0.5 * (in.width - 1), 0.5 * (in.height - 1), in.width, in.height));
  state.depths.assign(n, GridD(in.width, in.height, 0.0));
  state.fixed.assign(n, 0);
  state.solved.assign(n, 0);

  const Vec2 pp(0.5 * (in.width - 1), 0.5 * (in.height - 1));
  const bool fixed_mode = in.fixed_cameras.has_value();

  // Per-keyframe self maps give the initial depths (and the focal estimate).
  std::map<int, PointMapPair> self_maps;
  for (int kf : plan.keyframes) self_maps[kf] = in.oracle->point_maps(kf, kf);

  double focal;
  if (fixed_mode) {
    focal = (*in.fixed_cameras)[plan.keyframes[0]].intrinsics.fx;
  } else {
    focal = estimate_focal(self_maps[plan.keyframes[0]], pp);
    if (!(focal > 1.0)) throw numerical_error("coarse_align: focal estimate failed");
  }

  for (int kf : plan.keyframes) {
    state.depths[kf] = detail::depth_from_self_map(self_maps[kf]);
    state.intrinsics[kf] = Intrinsics::make(focal, focal, pp.x(), pp.y(), in.width, in.height);
    if (fixed_mode) {
      state.poses[kf] = (*in.fixed_cameras)[kf].pose;
      state.intrinsics[kf] = (*in.fixed_cameras)[kf].intrinsics;
      state.fixed[kf] = 1;
    }
    state.solved[kf] = 1;
  }

  if (plan.keyframes.size() == 1) return state;  // nothing to align

  // Pose chain initialization by weighted Procrustes along consecutive
  // keyframes (free mode only; the anchor keyframe stays at identity).
  if (!fixed_mode) {
    for (size_t i = 1; i < plan.keyframes.size(); ++i) {
      const int prev = plan.keyframes[i - 1];
      const int cur = plan.keyframes[i];
      const PointMapPair fwd = in.oracle->point_maps(prev, cur);   // X_prev,cur in prev coords
      const PointMapPair self = in.oracle->point_maps(cur, cur);   // X_cur,cur in cur coords
      std::vector<Vec3> src, dst;
      std::vector<double> w;
      const Mask* mcur = detail::mask_of(in.dynamic_masks, cur);
      const int stride = detail::auto_stride(in.width, in.height, 2000);
      for (int y = 0; y < in.height; y += stride)
        for (int x = 0; x < in.width; x += stride) {
          const size_t p = static_cast<size_t>(y) * in.width + x;
          if (!(fwd.c_ab[p] > 0.0) || !(self.c_aa[p] > 0.0)) continue;
          if (mcur && mcur->data[p]) continue;
          src.push_back(self.x_aa[p]);  // cur cam coords
          dst.push_back(fwd.x_ab[p]);   // prev cam coords
          w.push_back(fwd.c_ab[p] * self.c_aa[p]);
        }
      // R src + t = dst maps cam_cur -> cam_prev, i.e. M = T_prev T_cur^-1.
      const Pose m = procrustes(src, dst, w);
      state.poses[cur] = geometry::compose(geometry::invert(m), state.poses[prev]);
    }
  }

  AlignSolver solver(plan.keyframes, state, focal, pp, in.width, in.height, opts);
  for (const auto& [ia, ib] : plan.graph_edges) {
    const int a = plan.keyframes[ia];
    const int b = plan.keyframes[ib];
    solver.add_pair(a, b, in.oracle->point_maps(a, b), detail::mask_of(in.dynamic_masks, a),
                    detail::mask_of(in.dynamic_masks, b));
  }
  if (fixed_mode) {
    for (int kf : plan.keyframes) solver.fix_pose(kf);
    solver.fix_focal();
  } else {
    solver.fix_pose(plan.keyframes[0]);   // gauge anchor
    solver.fix_scale(plan.keyframes[0]);  // scale gauge
  }
  solver.optimize(opts.iterations);
  solver.commit(state);
  if (fixed_mode)
    for (int kf : plan.keyframes) {
      state.poses[kf] = (*in.fixed_cameras)[kf].pose;  // bit-exact freeze contract
      state.intrinsics[kf] = (*in.fixed_cameras)[kf].intrinsics;
    }
  return state;
}

// Fine intra-clip alignment anchored at the (already solved) keyframes.
inline AlignmentState fine_align(const ClipPlan& plan, const CoarseInputs& in,
                                 const AlignmentState& coarse, int delta = 0,
                                 const AlignOptions& opts = {}) {
  if (!in.oracle) throw usage_error("fine_align: oracle required");
  AlignmentState state = coarse;
  const int n = in.oracle->n_frames();
  const Vec2 pp(0.5 * (in.width - 1), 0.5 * (in.height - 1));

  for (size_t ci = 0; ci < plan.clips.size(); ++ci) {
    const auto [begin, end] = plan.clips[ci];
    if (end - begin <= 1) continue;  // keyframe-only clip: no-op
    const int kf = plan.keyframes[ci];
    const int next_kf = ci + 1 < plan.keyframes.size() ? plan.keyframes[ci + 1] : -1;
    const int window = delta > 0 ? delta : (end - begin);

    std::vector<int> frames;
    for (int f = begin; f < end; ++f) frames.push_back(f);

    // Initialize intermediates on the se3 geodesic between adjacent
    // keyframes; the trailing clip extrapolates the last keyframe pair, and a
    // single-keyframe sequence falls back to Procrustes chaining.
    const int prev_kf = ci > 0 ? plan.keyframes[ci - 1] : -1;
    for (int f = begin + 1; f < end; ++f) {
      if (next_kf >= 0) {
        const double s = static_cast<double>(f - kf) / (next_kf - kf);
        state.poses[f] = geometry::se3_interpolate(state.poses[kf], coarse.poses[next_kf], s);
      } else if (prev_kf >= 0) {
        const double s = static_cast<double>(f - kf) / (kf - prev_kf);
        state.poses[f] = geometry::se3_interpolate(coarse.poses[prev_kf], state.poses[kf], 1.0 + s);
      } else {
        // chain pairwise Procrustes estimates from the clip head
        const PointMapPair fwd = in.oracle->point_maps(f - 1, f);
        const PointMapPair self = in.oracle->point_maps(f, f);
        std::vector<Vec3> src, dst;
        std::vector<double> w;
        const Mask* mf = detail::mask_of(in.dynamic_masks, f);
        const int stride = detail::auto_stride(in.width, in.height, 2000);
        for (int y = 0; y < in.height; y += stride)
          for (int x = 0; x < in.width; x += stride) {
            const size_t p = static_cast<size_t>(y) * in.width + x;
            if (!(fwd.c_ab[p] > 0.0) || !(self.c_aa[p] > 0.0)) continue;
            if (mf && mf->data[p]) continue;
            src.push_back(self.x_aa[p]);
            dst.push_back(fwd.x_ab[p]);
            w.push_back(fwd.c_ab[p] * self.c_aa[p]);
          }
        const Pose m = procrustes(src, dst, w);  // cam_f -> cam_{f-1}
        state.poses[f] = geometry::compose(geometry::invert(m), state.poses[f - 1]);
      }
      const PointMapPair self = in.oracle->point_maps(f, f);
      state.depths[f] = detail::depth_from_self_map(self);
      state.intrinsics[f] = state.intrinsics[kf];
      state.solved[f] = 1;
    }

    AlignSolver solver(frames, state, state.intrinsics[kf].fx, pp, in.width, in.height, opts);
    for (int i = begin; i < end; ++i)
      for (int j = i + 1; j < end && j - i <= window; ++j)
        solver.add_pair(i, j, in.oracle->point_maps(i, j), detail::mask_of(in.dynamic_masks, i),
                        detail::mask_of(in.dynamic_masks, j));
    solver.fix_pose(kf);
    solver.fix_scale(kf);
    solver.fix_focal();
    solver.optimize(opts.iterations);
    const Pose kf_pose = state.poses[kf];
    const GridD kf_depth = state.depths[kf];
    solver.commit(state);
    state.poses[kf] = kf_pose;  // keyframe parameters stay bit-exact
    state.depths[kf] = kf_depth;
  }
  return state;
}

// ---------------------------------------------------------------------------
// Disentanglement and seed selection.

struct LabeledPoint {
  Vec3 position = Vec3::Zero();
  Vec3 color = Vec3::Constant(0.5);
  int frame = 0;
  bool dynamic = false;
};

struct LabeledCloud {
  std::vector<LabeledPoint> points;
};

// Back-projects every confident pixel of every frame and splits by the
// dynamic masks.
inline std::pair<LabeledCloud, LabeledCloud> disentangle(
    const AlignmentState& state, const std::vector<Mask>& masks, const std::vector<Image>& frames,
    const std::vector<std::vector<double>>& confidences, double conf_threshold = 0.5) {
  LabeledCloud stat, dyn;
  for (size_t f = 0; f < frames.size(); ++f) {
    if (!state.solved[f]) continue;
    const Camera cam{state.intrinsics[f], state.poses[f],
                     frames.size() > 1 ? static_cast<double>(f) / (frames.size() - 1) : 0.0};
    const Image& img = frames[f];
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const size_t p = static_cast<size_t>(y) * img.width + x;
        if (!(confidences[f][p] > conf_threshold)) continue;
        const double d = state.depths[f].data[p];
        if (!(d > 0.0)) continue;
        LabeledPoint pt;
        pt.position = geometry::back_project(Vec2(x, y), d, cam);
        pt.color = Vec3(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
        pt.frame = static_cast<int>(f);
        pt.dynamic = masks[f].data[p] != 0;
        (pt.dynamic ? dyn : stat).points.push_back(pt);
      }
  }
  return {std::move(stat), std::move(dyn)};
}

struct SeedSelection {
  int reference_frame = 0;
  bool dynamic_empty_warning = false;
  double voxel_size = 0.0;
  LabeledCloud static_seed;
  LabeledCloud dynamic_seed;
};

namespace detail {

inline double mask_entropy(const Image& img, const Mask& mask) {
  std::unordered_map<int, int> hist;
  int total = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (!mask.at(x, y)) continue;
      const int r = std::min(15, static_cast<int>(img.at(x, y, 0) * 16.0));
      const int g = std::min(15, static_cast<int>(img.at(x, y, 1) * 16.0));
      const int b = std::min(15, static_cast<int>(img.at(x, y, 2) * 16.0));
      ++hist[(r << 8) | (g << 4) | b];
      ++total;
    }
  if (total == 0) return 0.0;
  double h = 0.0;
  for (const auto& [bin, count] : hist) {
    const double p = static_cast<double>(count) / total;
    h -= p * std::log2(p);
  }
  return h;
}

}  // namespace detail

// Reference frame maximizes normalized mask coverage plus normalized color
// entropy (ties -> earliest); static seeds fuse the reference and keyframe
// clouds through a voxel grid of scene_diameter / 256.
inline SeedSelection select_reference_and_fuse(const LabeledCloud& p_stat, const LabeledCloud& p_dyn,
                                               const std::vector<Mask>& masks,
                                               const std::vector<Image>& frames,
                                               const std::vector<int>& keyframes) {
  if (p_stat.points.empty()) throw usage_error("select_reference_and_fuse: empty static cloud");
  SeedSelection sel;

  std::vector<size_t> mask_counts(frames.size(), 0);
  size_t max_count = 0;
  for (size_t f = 0; f < frames.size(); ++f) {
    mask_counts[f] = warploss::mask_count(masks[f]);
    max_count = std::max(max_count, mask_counts[f]);
  }
  if (max_count == 0 || p_dyn.points.empty()) {
    sel.dynamic_empty_warning = true;
    sel.reference_frame = 0;
  } else {
    double best = -1.0;
    for (size_t f = 0; f < frames.size(); ++f) {
      if (mask_counts[f] == 0) continue;
      const double score = static_cast<double>(mask_counts[f]) / static_cast<double>(max_count) +
                           detail::mask_entropy(frames[f], masks[f]) / 12.0;
      if (score > best + 1e-12) {
        best = score;
        sel.reference_frame = static_cast<int>(f);
      }
    }
  }

  Vec3 lo = p_stat.points.front().position, hi = lo;
  for (const auto& p : p_stat.points) {
    lo = lo.cwiseMin(p.position);
    hi = hi.cwiseMax(p.position);
  }
  sel.voxel_size = std::max(1e-9, (hi - lo).norm() / 256.0);

  std::unordered_set<int> keep(keyframes.begin(), keyframes.end());
  keep.insert(sel.reference_frame);
  std::unordered_set<std::uint64_t> occupied;
  for (const auto& p : p_stat.points) {
    if (!keep.count(p.frame)) continue;
    const auto vi = [&](double v, double l) {
      return static_cast<std::uint64_t>(std::floor((v - l) / sel.voxel_size)) & 0x1FFFFF;
    };
    const std::uint64_t key =
        vi(p.position.x(), lo.x()) | (vi(p.position.y(), lo.y()) << 21) |
        (vi(p.position.z(), lo.z()) << 42);
    if (occupied.insert(key).second) sel.static_seed.points.push_back(p);
  }
  for (const auto& p : p_dyn.points)
    if (p.frame == sel.reference_frame) sel.dynamic_seed.points.push_back(p);
  return sel;
}

}  // namespace reflow::canonical

#endif  // REFLOW_CANONICAL_HPP
