#include "reflow/canonical.hpp"

#include <gtest/gtest.h>

#include "reflow/harness.hpp"
#include "test_util.hpp"

using namespace reflow;
using namespace reflow::canonical;
using geometry::Camera;
using geometry::Pose;
using geometry::Vec2;
using geometry::Vec3;
using test_util::rel_err;

namespace {

struct SceneFixture {
  harness::GroundTruth gt;
  std::unique_ptr<GroundTruthOracle> oracle;

  explicit SceneFixture(int n_frames = 12, int res = 32, double noise = 0.0,
                        const std::string& preset = "moving-sphere") {
    auto spec = harness::SceneSpec::preset(preset);
    spec.n_frames = n_frames;
    spec.width = spec.height = res;
    gt = harness::generate(spec);
    oracle = std::make_unique<GroundTruthOracle>(gt.depths, gt.cameras, gt.masks, noise, 0.7, 5);
  }

  AlignmentState ground_truth_state() const {
    AlignmentState st;
    const int n = static_cast<int>(gt.cameras.size());
    st.poses.resize(n);
    st.intrinsics.resize(n, gt.cameras[0].intrinsics);
    st.depths = gt.depths;
    st.fixed.assign(n, 0);
    st.solved.assign(n, 1);
    for (int i = 0; i < n; ++i) {
      st.poses[i] = gt.cameras[i].pose;
      st.intrinsics[i] = gt.cameras[i].intrinsics;
    }
    return st;
  }
};

struct PoseErrors {
  double max_rot_deg = 0.0;
  double max_trans = 0.0;
};

// Pose recovery error up to the global gauge anchored at frame `anchor`:
// compares relative transforms cam_anchor -> cam_i.
PoseErrors pose_errors(const std::vector<Pose>& got, const std::vector<Camera>& want,
                       const std::vector<int>& frames, int anchor) {
  PoseErrors err;
  const Pose got0_inv = geometry::invert(got[anchor]);
  const Pose want0_inv = geometry::invert(want[anchor].pose);
  for (int f : frames) {
    const Pose rel_got = geometry::compose(got[f], got0_inv);
    const Pose rel_want = geometry::compose(want[f].pose, want0_inv);
    err.max_rot_deg = std::max(
        err.max_rot_deg,
        geometry::rotation_angle_deg(rel_got.rotation * rel_want.rotation.transpose()));
    err.max_trans = std::max(err.max_trans, (rel_got.translation - rel_want.translation).norm());
  }
  return err;
}

double scene_diameter(const harness::GroundTruth& gt) {
  Vec3 lo = Vec3::Constant(1e30), hi = -Vec3::Constant(1e30);
  for (size_t f = 0; f < gt.depths.size(); ++f)
    for (int y = 0; y < gt.depths[f].height; y += 4)
      for (int x = 0; x < gt.depths[f].width; x += 4) {
        const double d = gt.depths[f].at(x, y);
        if (!(d > 0)) continue;
        const Vec3 p = geometry::back_project(Vec2(x, y), d, gt.cameras[f]);
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
  return (hi - lo).norm();
}

}  // namespace

TEST(Canonical, PlanClipsSixtyFrames) {
  const auto plan = plan_clips(60, 25);
  ASSERT_EQ(plan.clips.size(), 3u);
  EXPECT_EQ(plan.clips[0], std::make_pair(0, 25));
  EXPECT_EQ(plan.clips[1], std::make_pair(25, 50));
  EXPECT_EQ(plan.clips[2], std::make_pair(50, 60));
  EXPECT_EQ(plan.keyframes, (std::vector<int>{0, 25, 50}));
  EXPECT_EQ(plan.graph_edges.size(), 3u);  // complete graph on 3
}

TEST(Canonical, PlanClipsShortSequence) {
  const auto plan = plan_clips(10, 25);
  ASSERT_EQ(plan.clips.size(), 1u);
  EXPECT_EQ(plan.keyframes, (std::vector<int>{0}));
  EXPECT_TRUE(plan.graph_edges.empty());
}

TEST(Canonical, PlanClips192Frames) {
  const auto plan = plan_clips(192, 25);
  EXPECT_EQ(plan.clips.size(), 8u);
  EXPECT_EQ(plan.keyframes.size(), 8u);
  EXPECT_EQ(plan.graph_edges.size(), 28u);  // complete graph on 8
}

TEST(Canonical, PlanClipsChainPlusLongRange) {
  const auto plan = plan_clips(400, 25);  // 16 keyframes > 12
  EXPECT_EQ(plan.keyframes.size(), 16u);
  EXPECT_EQ(plan.graph_edges.size(), 15u + 13u);  // chain + every-3rd long edge
}

TEST(Canonical, PlanClipsValidation) {
  EXPECT_THROW(plan_clips(10, 1), usage_error);
  EXPECT_THROW(plan_clips(0, 25), usage_error);
}

TEST(Canonical, OracleSelfPairIdentity) {
  SceneFixture fx(4);
  const auto maps = fx.oracle->point_maps(2, 2);
  for (size_t p = 0; p < maps.x_aa.size(); ++p) {
    ASSERT_EQ(maps.c_aa[p] > 0, maps.c_ab[p] > 0);
    if (maps.c_aa[p] > 0) ASSERT_LT((maps.x_aa[p] - maps.x_ab[p]).norm(), 1e-12);
  }
}

TEST(Canonical, OracleMatchesAnalyticGeometry) {
  SceneFixture fx(6);
  const auto maps = fx.oracle->point_maps(1, 4);
  const auto& spec = fx.gt.spec;
  for (int y = 0; y < spec.height; y += 3)
    for (int x = 0; x < spec.width; x += 3) {
      const size_t p = static_cast<size_t>(y) * spec.width + x;
      if (!(maps.c_ab[p] > 0)) continue;
      // Independent: ray-cast frame 4 and express the hit in frame 1's coords.
      const auto hit = harness::cast_ray(spec, fx.gt.cameras[4], Vec2(x, y), spec.timestamp(4));
      ASSERT_TRUE(hit.has_value());
      const Vec3 want = fx.gt.cameras[1].pose.apply(hit->point);
      EXPECT_LT((maps.x_ab[p] - want).norm(), 1e-9);
    }
}

TEST(Canonical, OracleNoiseStatistics) {
  SceneFixture fx(4, 48, 0.01);
  double sum = 0.0, sum2 = 0.0;
  size_t n = 0;
  for (int b = 0; b < 3; ++b) {
    const auto noisy = fx.oracle->point_maps(0, b);
    for (size_t p = 0; p < noisy.x_aa.size(); ++p) {
      if (!(noisy.c_aa[p] > 0)) continue;
      const double d_true = fx.gt.depths[0].data[p];
      const double rel = (noisy.x_aa[p].z() - d_true) / d_true;
      sum += rel;
      sum2 += rel * rel;
      ++n;
    }
  }
  ASSERT_GT(n, 5000u);
  const double mean = sum / n;
  const double std = std::sqrt(sum2 / n - mean * mean);
  EXPECT_LT(std::abs(std - 0.01) / 0.01, 0.10);
}

TEST(Canonical, AlignLossZeroAtGroundTruth) {
  SceneFixture fx(8);
  const auto state = fx.ground_truth_state();
  const auto maps = fx.oracle->point_maps(1, 5);
  const double loss =
      align_loss(maps, state, 1, 5, &fx.gt.masks[1], &fx.gt.masks[5]);
  EXPECT_LT(loss, 1e-9);
}

TEST(Canonical, AlignLossIncreasesUnderPerturbation) {
  SceneFixture fx(8);
  auto state = fx.ground_truth_state();
  const auto maps = fx.oracle->point_maps(1, 5);
  const double base = align_loss(maps, state, 1, 5, &fx.gt.masks[1], &fx.gt.masks[5]);
  geometry::Vec6 xi = geometry::Vec6::Zero();
  xi[1] = 0.02;
  xi[3] = 0.05;
  state.poses[5] = geometry::compose(geometry::se3_exp(xi), state.poses[5]);
  const double perturbed = align_loss(maps, state, 1, 5, &fx.gt.masks[1], &fx.gt.masks[5]);
  EXPECT_GT(perturbed, base + 1.0);
}

TEST(Canonical, AlignLossFullyDynamicMasksGiveZero) {
  SceneFixture fx(6);
  const auto state = fx.ground_truth_state();
  auto state_bad = state;
  geometry::Vec6 xi = geometry::Vec6::Zero();
  xi[4] = 0.3;
  state_bad.poses[3] = geometry::compose(geometry::se3_exp(xi), state_bad.poses[3]);
  const auto maps = fx.oracle->point_maps(0, 3);
  Mask all_dyn(fx.gt.spec.width, fx.gt.spec.height, 1);
  EXPECT_EQ(align_loss(maps, state_bad, 0, 3, &all_dyn, &all_dyn), 0.0);
}

TEST(Canonical, SolverGradientMatchesFiniteDifferences) {
  SceneFixture fx(8);
  const auto state = fx.ground_truth_state();
  AlignOptions opts;
  opts.smoothness_weight = 0.0;   // analytic part only
  opts.fixed_sigma = 1.0;         // the closed-form scale is detached by design
  opts.target_samples = 200;
  std::vector<int> frames = {0, 3, 6};
  const auto& k = state.intrinsics[0];
  AlignSolver solver(frames, state, k.fx, Vec2(k.cx, k.cy), fx.gt.spec.width, fx.gt.spec.height,
                     opts);
  solver.add_pair(0, 3, fx.oracle->point_maps(0, 3), &fx.gt.masks[0], &fx.gt.masks[3]);
  solver.add_pair(3, 6, fx.oracle->point_maps(3, 6), &fx.gt.masks[3], &fx.gt.masks[6]);
  // move off the ground truth so the L1 loss is smooth (no residuals at 0)
  Rng rng(3);
  for (int f : frames) {
    geometry::Vec6 xi;
    for (int j = 0; j < 6; ++j) xi[j] = 0.05 * rng.normal();
    solver.set_pose(f, geometry::compose(geometry::se3_exp(xi), solver.pose_of(f)));
    solver.log_scale_ref(f) = 0.05 * rng.normal();
  }
  solver.log_focal_ref() = 0.01;

  std::vector<double> grad(6 * 3 + 3 + 1, 0.0);
  solver.gradient(grad);

  const double h = 1e-7;
  for (int fi = 0; fi < 3; ++fi) {
    for (int j = 0; j < 6; ++j) {
      const Pose saved = solver.pose_of(frames[fi]);
      geometry::Vec6 delta = geometry::Vec6::Zero();
      delta[j] = h;
      solver.set_pose(frames[fi], geometry::compose(geometry::se3_exp(delta), saved));
      const double up = solver.consistency();
      delta[j] = -h;
      solver.set_pose(frames[fi], geometry::compose(geometry::se3_exp(delta), saved));
      const double dn = solver.consistency();
      solver.set_pose(frames[fi], saved);
      const double fd = (up - dn) / (2 * h);
      EXPECT_LT(rel_err(grad[6 * fi + j], fd, 1e-6), 2e-3) << "pose slot " << fi << "," << j;
    }
    double& s = solver.log_scale_ref(frames[fi]);
    const double saved = s;
    s = saved + h;
    const double up = solver.consistency();
    s = saved - h;
    const double dn = solver.consistency();
    s = saved;
    EXPECT_LT(rel_err(grad[18 + fi], (up - dn) / (2 * h), 1e-6), 2e-3) << "scale slot " << fi;
  }
  double& lf = solver.log_focal_ref();
  const double saved = lf;
  lf = saved + h;
  const double up = solver.consistency();
  lf = saved - h;
  const double dn = solver.consistency();
  lf = saved;
  EXPECT_LT(rel_err(grad[21], (up - dn) / (2 * h), 1e-6), 2e-3) << "focal slot";
}

TEST(Canonical, CoarseAlignRecoversPosesFreeMode) {
  SceneFixture fx(40, 32);
  const auto plan = plan_clips(40, 10);  // 4 keyframes
  CoarseInputs in;
  in.oracle = fx.oracle.get();
  in.dynamic_masks = &fx.gt.masks;
  in.width = fx.gt.spec.width;
  in.height = fx.gt.spec.height;
  AlignOptions opts;
  opts.iterations = 250;
  const auto state = coarse_align(plan, in, opts);
  const auto err = pose_errors(state.poses, fx.gt.cameras, plan.keyframes, plan.keyframes[0]);
  const double diam = scene_diameter(fx.gt);
  EXPECT_LT(err.max_rot_deg, 0.5);
  EXPECT_LT(err.max_trans, 0.01 * diam);
  // focal recovered too
  EXPECT_LT(std::abs(state.intrinsics[0].fx - fx.gt.spec.focal) / fx.gt.spec.focal, 0.02);
}

TEST(Canonical, CoarseAlignSingleKeyframeIsIdentity) {
  SceneFixture fx(6);
  const auto plan = plan_clips(6, 25);
  CoarseInputs in;
  in.oracle = fx.oracle.get();
  in.width = fx.gt.spec.width;
  in.height = fx.gt.spec.height;
  const auto state = coarse_align(plan, in);
  EXPECT_LT((state.poses[0].rotation - geometry::Mat3::Identity()).norm(), 1e-15);
  EXPECT_TRUE(state.solved[0]);
}

TEST(Canonical, CoarseAlignFixedPosesBitExact) {
  SceneFixture fx(30, 24);
  const auto plan = plan_clips(30, 10);
  CoarseInputs in;
  in.oracle = fx.oracle.get();
  in.dynamic_masks = &fx.gt.masks;
  in.width = fx.gt.spec.width;
  in.height = fx.gt.spec.height;
  in.fixed_cameras = fx.gt.cameras;
  AlignOptions opts;
  opts.iterations = 60;
  const auto state = coarse_align(plan, in, opts);
  for (int kf : plan.keyframes) {
    ASSERT_TRUE(state.fixed[kf]);
    ASSERT_EQ(state.poses[kf].rotation, fx.gt.cameras[kf].pose.rotation);
    ASSERT_EQ(state.poses[kf].translation, fx.gt.cameras[kf].pose.translation);
    ASSERT_EQ(state.intrinsics[kf].fx, fx.gt.cameras[kf].intrinsics.fx);
  }
}

TEST(Canonical, FineAlignRecoversAllFrames) {
  SceneFixture fx(24, 32);
  const auto plan = plan_clips(24, 8);
  CoarseInputs in;
  in.oracle = fx.oracle.get();
  in.dynamic_masks = &fx.gt.masks;
  in.width = fx.gt.spec.width;
  in.height = fx.gt.spec.height;
  AlignOptions opts;
  opts.iterations = 250;
  const auto coarse = coarse_align(plan, in, opts);
  AlignOptions fine_opts;
  fine_opts.iterations = 200;
  const auto state = fine_align(plan, in, coarse, 0, fine_opts);
  std::vector<int> all;
  for (int i = 0; i < 24; ++i) {
    EXPECT_TRUE(state.solved[i]);
    all.push_back(i);
  }
  const auto err = pose_errors(state.poses, fx.gt.cameras, all, 0);
  const double diam = scene_diameter(fx.gt);
  EXPECT_LT(err.max_rot_deg, 0.5);
  EXPECT_LT(err.max_trans, 0.01 * diam);
}

TEST(Canonical, FineAlignKeyframeOnlyClipIsNoOp) {
  SceneFixture fx(9, 24);
  const auto plan = plan_clips(9, 8);  // clips (0..8), (8..9): second is keyframe-only
  CoarseInputs in;
  in.oracle = fx.oracle.get();
  in.dynamic_masks = &fx.gt.masks;
  in.width = fx.gt.spec.width;
  in.height = fx.gt.spec.height;
  AlignOptions opts;
  opts.iterations = 100;
  const auto coarse = coarse_align(plan, in, opts);
  const auto state = fine_align(plan, in, coarse, 0, opts);
  ASSERT_EQ(state.poses[8].rotation, coarse.poses[8].rotation);
  ASSERT_EQ(state.poses[8].translation, coarse.poses[8].translation);
}

TEST(Canonical, FineAlignDegradesGracefullyUnderNoise) {
  SceneFixture fx(24, 32, 0.01);
  const auto plan = plan_clips(24, 8);
  CoarseInputs in;
  in.oracle = fx.oracle.get();
  in.dynamic_masks = &fx.gt.masks;
  in.width = fx.gt.spec.width;
  in.height = fx.gt.spec.height;
  AlignOptions opts;
  opts.iterations = 250;
  const auto coarse = coarse_align(plan, in, opts);
  AlignOptions fine_opts;
  fine_opts.iterations = 200;
  const auto state = fine_align(plan, in, coarse, 0, fine_opts);
  std::vector<int> all;
  for (int i = 0; i < 24; ++i) all.push_back(i);
  // median error bound: collect per-frame errors
  std::vector<double> rot_errs, trans_errs;
  const Pose got0_inv = geometry::invert(state.poses[0]);
  const Pose want0_inv = geometry::invert(fx.gt.cameras[0].pose);
  for (int f : all) {
    const Pose rel_got = geometry::compose(state.poses[f], got0_inv);
    const Pose rel_want = geometry::compose(fx.gt.cameras[f].pose, want0_inv);
    rot_errs.push_back(
        geometry::rotation_angle_deg(rel_got.rotation * rel_want.rotation.transpose()));
    trans_errs.push_back((rel_got.translation - rel_want.translation).norm());
  }
  std::sort(rot_errs.begin(), rot_errs.end());
  std::sort(trans_errs.begin(), trans_errs.end());
  const double diam = scene_diameter(fx.gt);
  EXPECT_LT(rot_errs[rot_errs.size() / 2], 2.0);
  EXPECT_LT(trans_errs[trans_errs.size() / 2], 0.03 * diam);
}

TEST(Canonical, DisentangleAllStaticGivesEmptyDynamic) {
  SceneFixture fx(4, 24, 0.0, "static-only");
  const auto state = fx.ground_truth_state();
  std::vector<std::vector<double>> conf;
  for (size_t f = 0; f < fx.gt.frames.size(); ++f)
    conf.push_back(fx.oracle->point_maps(static_cast<int>(f), static_cast<int>(f)).c_aa);
  const auto [stat, dyn] = disentangle(state, fx.gt.masks, fx.gt.frames, conf);
  EXPECT_TRUE(dyn.points.empty());
  EXPECT_GT(stat.points.size(), 1000u);
}

TEST(Canonical, DisentangleCheckerboardSplitsExactly) {
  SceneFixture fx(2, 16, 0.0, "static-only");
  const auto state = fx.ground_truth_state();
  std::vector<Mask> masks;
  std::vector<std::vector<double>> conf;
  size_t want_dyn = 0, want_stat = 0;
  for (size_t f = 0; f < fx.gt.frames.size(); ++f) {
    Mask cb(16, 16, 0);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) cb.at(x, y) = (x + y) % 2;
    masks.push_back(cb);
    conf.push_back(std::vector<double>(256, 1.0));
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        if (!(state.depths[f].at(x, y) > 0)) continue;
        (cb.at(x, y) ? want_dyn : want_stat) += 1;
      }
  }
  const auto [stat, dyn] = disentangle(state, masks, fx.gt.frames, conf);
  EXPECT_EQ(dyn.points.size(), want_dyn);
  EXPECT_EQ(stat.points.size(), want_stat);
}

TEST(Canonical, DisentangledDynamicPointsInsideTrueVolume) {
  SceneFixture fx(10, 32);
  const auto state = fx.ground_truth_state();
  std::vector<std::vector<double>> conf;
  for (size_t f = 0; f < fx.gt.frames.size(); ++f)
    conf.push_back(fx.oracle->point_maps(static_cast<int>(f), static_cast<int>(f)).c_aa);
  const auto [stat, dyn] = disentangle(state, fx.gt.masks, fx.gt.frames, conf);
  ASSERT_GT(dyn.points.size(), 100u);
  const auto& ball = fx.gt.spec.primitives[1];
  size_t inside = 0;
  for (const auto& p : dyn.points) {
    const double t = fx.gt.spec.timestamp(p.frame);
    if ((p.position - ball.center_at(t)).norm() <= 1.1 * ball.radius) ++inside;
  }
  EXPECT_GE(static_cast<double>(inside) / dyn.points.size(), 0.95);
}

TEST(Canonical, DisentangleReprojectionConsistency) {
  SceneFixture fx(6, 24);
  const auto state = fx.ground_truth_state();
  std::vector<std::vector<double>> conf;
  for (size_t f = 0; f < fx.gt.frames.size(); ++f)
    conf.push_back(fx.oracle->point_maps(static_cast<int>(f), static_cast<int>(f)).c_aa);
  const auto [stat, dyn] = disentangle(state, fx.gt.masks, fx.gt.frames, conf);
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto& p = stat.points[rng.uniform_int(static_cast<int>(stat.points.size()))];
    const Camera cam{state.intrinsics[p.frame], state.poses[p.frame], 0.0};
    const auto proj = geometry::project(p.position, cam);
    EXPECT_LT(std::abs(proj.pixel.x() - std::round(proj.pixel.x())), 0.5);
    EXPECT_LT(std::abs(proj.pixel.y() - std::round(proj.pixel.y())), 0.5);
  }
}

TEST(Canonical, SelectReferenceDominanceAndTies) {
  // Three synthetic frames with hand-built masks/colors.
  std::vector<warploss::Image> frames(3, warploss::Image(8, 8, 0.5));
  std::vector<Mask> masks(3, Mask(8, 8, 0));
  Rng rng(5);
  for (int f = 0; f < 3; ++f)
    for (auto& v : frames[f].data) v = rng.uniform(0, 1);
  // frame 1 has strictly larger mask than 0 and 2
  for (int x = 0; x < 4; ++x) masks[0].at(x, 0) = 1;
  for (int x = 0; x < 8; ++x) {
    masks[1].at(x, 0) = masks[1].at(x, 1) = 1;
  }
  for (int x = 0; x < 4; ++x) masks[2].at(x, 0) = 1;

  LabeledCloud stat, dyn;
  for (int f = 0; f < 3; ++f)
    for (int i = 0; i < 20; ++i) {
      LabeledPoint p;
      p.position = Vec3(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1));
      p.frame = f;
      p.dynamic = i < 5;
      (p.dynamic ? dyn : stat).points.push_back(p);
    }
  const auto sel = select_reference_and_fuse(stat, dyn, masks, frames, {0});
  EXPECT_EQ(sel.reference_frame, 1);
  for (const auto& p : sel.dynamic_seed.points) EXPECT_EQ(p.frame, 1);

  // identical masks and identical images: tie resolves to frame 0
  std::vector<Mask> tie_masks(3, masks[1]);
  std::vector<warploss::Image> tie_frames(3, frames[0]);
  const auto tie = select_reference_and_fuse(stat, dyn, tie_masks, tie_frames, {0});
  EXPECT_EQ(tie.reference_frame, 0);
}

TEST(Canonical, VoxelFusionDeduplicates) {
  std::vector<warploss::Image> frames(2, warploss::Image(4, 4, 0.5));
  std::vector<Mask> masks(2, Mask(4, 4, 0));
  masks[0].at(0, 0) = 1;
  LabeledCloud stat, dyn;
  // two nearly coincident points from different frames: one voxel, one kept
  for (int f = 0; f < 2; ++f) {
    LabeledPoint p;
    p.position = Vec3(0.50001 + 1e-6 * f, 0.5, 0.5);
    p.frame = f;
    stat.points.push_back(p);
  }
  LabeledPoint far;
  far.position = Vec3(5, 5, 5);
  far.frame = 0;
  stat.points.push_back(far);
  LabeledPoint d;
  d.frame = 0;
  d.dynamic = true;
  dyn.points.push_back(d);
  const auto sel = select_reference_and_fuse(stat, dyn, masks, frames, {0, 1});
  EXPECT_EQ(sel.static_seed.points.size(), 2u);  // dedup within one voxel
}

TEST(Canonical, EmptyDynamicCloudWarns) {
  std::vector<warploss::Image> frames(2, warploss::Image(4, 4, 0.5));
  std::vector<Mask> masks(2, Mask(4, 4, 0));
  LabeledCloud stat;
  LabeledPoint p;
  p.position = Vec3(1, 2, 3);
  stat.points.push_back(p);
  const auto sel = select_reference_and_fuse(stat, LabeledCloud{}, masks, frames, {0});
  EXPECT_TRUE(sel.dynamic_empty_warning);
  EXPECT_TRUE(sel.dynamic_seed.points.empty());
}
