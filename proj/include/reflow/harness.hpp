#ifndef REFLOW_HARNESS_HPP
#define REFLOW_HARNESS_HPP

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/flowrender.hpp"
#include "reflow/geometry.hpp"
#include "reflow/warploss.hpp"

namespace reflow::harness {

using flowrender::FlowField;
using geometry::Camera;
using geometry::Intrinsics;
using geometry::Mat3;
using geometry::Pose;
using geometry::Vec2;
using geometry::Vec3;
using warploss::Image;
using warploss::Mask;

// ---------------------------------------------------------------------------
// Procedural value noise (lattice hash + smoothstep), the texture source for
// every primitive. Flat textures would make the warping losses degenerate.

namespace detail {

inline double hash_to_unit(std::uint64_t h) {
  std::uint64_t s = h;
  return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

inline double lattice(int ix, int iy, int iz, std::uint64_t seed) {
  std::uint64_t h = seed;
  h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(ix)) * 0x9E3779B185EBCA87ULL;
  h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(iy)) * 0xC2B2AE3D27D4EB4FULL;
  h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(iz)) * 0x165667B19E3779F9ULL;
  return hash_to_unit(h);
}

inline double smoothstep(double f) { return f * f * (3.0 - 2.0 * f); }

inline double value_noise(const Vec3& p, std::uint64_t seed) {
  const int ix = static_cast<int>(std::floor(p.x()));
  const int iy = static_cast<int>(std::floor(p.y()));
  const int iz = static_cast<int>(std::floor(p.z()));
  const double fx = smoothstep(p.x() - ix);
  const double fy = smoothstep(p.y() - iy);
  const double fz = smoothstep(p.z() - iz);
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
      }
  return acc;
}

inline double fractal_noise(const Vec3& p, double freq, std::uint64_t seed) {
  const double n0 = value_noise(p * freq, seed);
  const double n1 = value_noise(p * (2.0 * freq), seed ^ 0xabcdef12345ULL);
  return (n0 + 0.5 * n1) / 1.5;
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Rigid trajectory c(t) = base + linear t + quad t^2 + sin_amp * sin(2 pi sin_freq t + phase).
struct Trajectory {
  Vec3 linear = Vec3::Zero();
  Vec3 quad = Vec3::Zero();
  Vec3 sin_amp = Vec3::Zero();
  Vec3 sin_freq = Vec3::Zero();
  Vec3 sin_phase = Vec3::Zero();

  Vec3 offset_at(double t) const {
    Vec3 o = linear * t + quad * t * t;
    for (int a = 0; a < 3; ++a)
      o[a] += sin_amp[a] * std::sin(2.0 * M_PI * sin_freq[a] * t + sin_phase[a]);
    return o;
  }
};

struct Primitive {
  enum class Type { Sphere, Rect };
  Type type = Type::Sphere;
  Vec3 center = Vec3::Zero();  // position at t = 0
  double radius = 1.0;         // sphere
  Vec3 u_axis = Vec3(1, 0, 0), v_axis = Vec3(0, 1, 0);  // rect basis
  double half_u = 1.0, half_v = 1.0;
  bool dynamic = false;
  Trajectory motion;
  // texture
  Vec3 base_color = Vec3::Constant(0.5);
  Vec3 color_amp = Vec3::Constant(0.3);
  double noise_freq = 2.0;
  std::uint64_t tex_seed = 1;

  Vec3 center_at(double t) const { return dynamic ? center + motion.offset_at(t) : center; }

  Vec3 color_at(const Vec3& world_point, double t) const {
    // Texture anchored to the primitive frame so it rides along rigidly.
    const Vec3 local = world_point - (dynamic ? motion.offset_at(t) : Vec3::Zero());
    Vec3 c;
    for (int ch = 0; ch < 3; ++ch) {
      const double n =
          detail::fractal_noise(local + Vec3(7.1 * ch, -3.3 * ch, 1.7 * ch), noise_freq,
                                tex_seed + 0x51ULL * static_cast<std::uint64_t>(ch));
      c[ch] = clamp01(base_color[ch] + color_amp[ch] * (2.0 * n - 1.0));
    }
    return c;
  }
};

// Orbit-plus-dolly camera path looking at a fixed target.
struct CameraPathSpec {
  Vec3 target = Vec3::Zero();
  double orbit_radius = 4.0;
  double orbit_elev = 0.3;
  double theta0 = -0.15;
  double theta1 = 0.15;
  Vec3 dolly = Vec3::Zero();  // extra linear translation over [0, 1]

  Vec3 position_at(double t) const {
    const double th = theta0 + (theta1 - theta0) * t;
    return target + Vec3(orbit_radius * std::sin(th), orbit_elev, orbit_radius * std::cos(th)) +
           dolly * t;
  }
};

inline Pose look_at(const Vec3& position, const Vec3& target, const Vec3& up = Vec3(0, 1, 0)) {
  const Vec3 fwd = (target - position).normalized();
  Vec3 right = fwd.cross(up);
  if (right.norm() < 1e-9) right = Vec3(1, 0, 0);
  right.normalize();
  const Vec3 down = fwd.cross(right);
  Mat3 rot;
  rot.row(0) = right.transpose();
  rot.row(1) = down.transpose();
  rot.row(2) = fwd.transpose();
  return Pose{rot, -(rot * position)};
}

struct SceneSpec {
  std::vector<Primitive> primitives;
  CameraPathSpec path;
  int n_frames = 24;
  int width = 48, height = 48;
  double focal = 58.0;  // pixels, fx = fy
  Vec3 background = Vec3::Constant(0.08);
  std::uint64_t seed = 7;

  void validate() const {
    if (n_frames < 1) throw usage_error("scene: n_frames must be >= 1");
    if (width < 8 || height < 8) throw usage_error("scene: resolution too small");
    bool any_static = false;
    for (const auto& p : primitives) any_static |= !p.dynamic;
    if (!any_static) throw usage_error("scene: at least one static primitive required");
  }

  double timestamp(int frame) const {
    return n_frames > 1 ? static_cast<double>(frame) / (n_frames - 1) : 0.0;
  }

  Camera camera_at(int frame) const {
    const double t = timestamp(frame);
    const Intrinsics k = Intrinsics::make(focal, focal, 0.5 * (width - 1), 0.5 * (height - 1), width, height);
    return Camera{k, look_at(path.position_at(t), path.target), t};
  }

  static SceneSpec preset(const std::string& name);
};

struct RayHit {
  double depth = 0.0;  // camera-frame z
  int prim = -1;
  Vec3 point = Vec3::Zero();
};

// First intersection along the ray through an arbitrary (possibly fractional)
// pixel location.
inline std::optional<RayHit> cast_ray(const SceneSpec& spec, const Camera& cam, const Vec2& pixel,
                                      double t) {
  const auto& k = cam.intrinsics;
  const Vec3 dir_cam((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
  const Mat3 rt = cam.pose.rotation.transpose();
  const Vec3 origin = -(rt * cam.pose.translation);
  const Vec3 dir = rt * dir_cam;

  RayHit best;
  best.depth = 1e30;
  for (int pi = 0; pi < static_cast<int>(spec.primitives.size()); ++pi) {
    const Primitive& prim = spec.primitives[pi];
    const Vec3 c = prim.center_at(t);
    double s = -1.0;
    if (prim.type == Primitive::Type::Sphere) {
      const Vec3 oc = origin - c;
      const double a = dir.dot(dir);
      const double b = 2.0 * oc.dot(dir);
      const double cc = oc.dot(oc) - prim.radius * prim.radius;
      const double disc = b * b - 4.0 * a * cc;
      if (disc < 0.0) continue;
      s = (-b - std::sqrt(disc)) / (2.0 * a);
    } else {
      const Vec3 n = prim.u_axis.cross(prim.v_axis).normalized();
      const double denom = dir.dot(n);
      if (std::abs(denom) < 1e-12) continue;
      s = (c - origin).dot(n) / denom;
      if (s > 0.0) {
        const Vec3 x = origin + s * dir - c;
        if (std::abs(x.dot(prim.u_axis)) > prim.half_u || std::abs(x.dot(prim.v_axis)) > prim.half_v)
          continue;
      }
    }
    if (s > splat::kNearPlane && s < best.depth) {
      best.depth = s;
      best.prim = pi;
      best.point = origin + s * dir;
    }
  }
  if (best.prim < 0) return std::nullopt;
  return best;
}

struct GroundTruth {
  SceneSpec spec;
  std::vector<Image> frames;
  std::vector<GridD> depths;        // camera-frame z; 0 where no geometry
  std::vector<Mask> masks;          // 1 = dynamic
  std::vector<Camera> cameras;
  std::vector<FlowField> flows;     // adjacent pairs i -> i+1
};

// Analytic flow between two arbitrary frames: each hit surface point is
// transported rigidly with its primitive and reprojected; pixels whose
// transported point is occluded (or behind the target camera) are invalid.
inline FlowField analytic_flow(const SceneSpec& spec, int frame_a, int frame_b) {
  const Camera cam_a = spec.camera_at(frame_a);
  const Camera cam_b = spec.camera_at(frame_b);
  const double ta = spec.timestamp(frame_a);
  const double tb = spec.timestamp(frame_b);
  FlowField flow(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const auto hit = cast_ray(spec, cam_a, Vec2(x, y), ta);
      if (!hit) continue;
      const Primitive& prim = spec.primitives[hit->prim];
      const Vec3 moved =
          prim.dynamic ? Vec3(hit->point + prim.motion.offset_at(tb) - prim.motion.offset_at(ta))
                       : hit->point;
      const Vec3 pc2 = cam_b.pose.apply(moved);
      if (pc2.z() <= splat::kNearPlane) continue;
      const auto proj = geometry::project(moved, cam_b);
      // Occlusion: the transported point must be the front surface at t_b.
      if (proj.pixel.x() >= 0 && proj.pixel.x() <= spec.width - 1 && proj.pixel.y() >= 0 &&
          proj.pixel.y() <= spec.height - 1) {
        const auto hit_b = cast_ray(spec, cam_b, proj.pixel, tb);
        if (!hit_b || (hit_b->point - moved).norm() > 1e-6 * (1.0 + hit_b->depth)) continue;
      }
      const size_t pix = static_cast<size_t>(y) * spec.width + x;
      flow.du.data[pix] = proj.pixel.x() - x;
      flow.dv.data[pix] = proj.pixel.y() - y;
      flow.valid.data[pix] = 1;
    }
  return flow;
}

inline GroundTruth generate(const SceneSpec& spec) {
  spec.validate();
  GroundTruth gt;
  gt.spec = spec;
  gt.frames.reserve(spec.n_frames);
  for (int f = 0; f < spec.n_frames; ++f) {
    const double t = spec.timestamp(f);
    const Camera cam = spec.camera_at(f);
    const Mat3 rt = cam.pose.rotation.transpose();
    const Vec3 origin = -(rt * cam.pose.translation);
    for (const auto& prim : spec.primitives)
      if (prim.type == Primitive::Type::Sphere &&
          (origin - prim.center_at(t)).norm() <= prim.radius)
        throw usage_error("scene generation: camera inside a primitive at frame " + std::to_string(f));

    Image img(spec.width, spec.height);
    GridD depth(spec.width, spec.height, 0.0);
    Mask mask(spec.width, spec.height, 0);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const auto hit = cast_ray(spec, cam, Vec2(x, y), t);
        if (!hit) {
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = clamp01(spec.background[c]);
          continue;
        }
        const Primitive& prim = spec.primitives[hit->prim];
        const Vec3 color = prim.color_at(hit->point, t);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
        depth.at(x, y) = hit->depth;
        mask.at(x, y) = prim.dynamic ? 1 : 0;
      }
    gt.frames.push_back(std::move(img));
    gt.depths.push_back(std::move(depth));
    gt.masks.push_back(std::move(mask));
    gt.cameras.push_back(cam);
  }
  for (int f = 0; f + 1 < spec.n_frames; ++f) gt.flows.push_back(analytic_flow(spec, f, f + 1));
  return gt;
}

// ---------------------------------------------------------------------------
// Metrics.

inline double mse(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw usage_error("mse: size mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

inline double psnr_from_mse(double m) { return m < 1e-10 ? 100.0 : 10.0 * std::log10(1.0 / m); }

inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

inline double psnr_masked(const Image& a, const Image& b, const Mask& mask) {
  double acc = 0.0;
  size_t n = 0;
  for (size_t p = 0; p < mask.data.size(); ++p) {
    if (!mask.data[p]) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = a.data[p * 3 + c] - b.data[p * 3 + c];
      acc += d * d;
    }
    ++n;
  }
  if (n == 0) throw numerical_error("psnr_masked: empty mask support");
  return psnr_from_mse(acc / static_cast<double>(3 * n));
}

inline double ssim(const Image& a, const Image& b) {
  return warploss::ssim(a, b, warploss::full_mask(a.width, a.height));
}

// Mean Euclidean error over pixels that are masked and valid in both fields.
inline double endpoint_error(const FlowField& flow, const FlowField& gt_flow, const Mask& mask) {
  if (flow.width != gt_flow.width || flow.height != gt_flow.height)
    throw usage_error("endpoint_error: size mismatch");
  double acc = 0.0;
  size_t n = 0;
  for (size_t p = 0; p < mask.data.size(); ++p) {
    if (!mask.data[p] || !flow.valid.data[p] || !gt_flow.valid.data[p]) continue;
    const double du = flow.du.data[p] - gt_flow.du.data[p];
    const double dv = flow.dv.data[p] - gt_flow.dv.data[p];
    acc += std::sqrt(du * du + dv * dv);
    ++n;
  }
  if (n == 0) throw numerical_error("endpoint_error: empty support");
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Presets: the Fig-3(a) decomposition cases at desk scale.

inline SceneSpec SceneSpec::preset(const std::string& name) {
  SceneSpec spec;
  spec.width = 48;
  spec.height = 48;
  spec.focal = 58.0;
  spec.n_frames = 24;
  spec.seed = 7;

  Primitive wall;
  wall.type = Primitive::Type::Rect;
  wall.center = Vec3(0, 0, 0);
  wall.u_axis = Vec3(1, 0, 0);
  wall.v_axis = Vec3(0, 1, 0);
  wall.half_u = 4.0;
  wall.half_v = 4.0;
  wall.base_color = Vec3(0.45, 0.47, 0.52);
  wall.color_amp = Vec3(0.28, 0.26, 0.24);
  wall.noise_freq = 2.2;
  wall.tex_seed = 11;

  spec.path.target = Vec3(0, 0, 0.4);
  spec.path.orbit_radius = 3.8;
  spec.path.orbit_elev = 0.25;
  spec.path.theta0 = -0.14;
  spec.path.theta1 = 0.14;

  auto sphere = [](const Vec3& at, double r, std::uint64_t tex) {
    Primitive s;
    s.type = Primitive::Type::Sphere;
    s.center = at;
    s.radius = r;
    s.base_color = Vec3(0.52, 0.44, 0.42);
    s.color_amp = Vec3(0.26, 0.24, 0.22);
    s.noise_freq = 4.5;
    s.tex_seed = tex;
    return s;
  };

  if (name == "moving-sphere") {
    spec.primitives.push_back(wall);
    Primitive ball = sphere(Vec3(-0.55, -0.15, 0.85), 0.38, 23);
    ball.dynamic = true;
    ball.motion.linear = Vec3(1.1, 0.3, 0.0);
    ball.motion.sin_amp = Vec3(0.0, 0.12, 0.0);
    ball.motion.sin_freq = Vec3(0.0, 1.0, 0.0);
    spec.primitives.push_back(ball);
  } else if (name == "two-body") {
    spec.primitives.push_back(wall);
    Primitive a = sphere(Vec3(-0.7, 0.25, 0.9), 0.32, 31);
    a.dynamic = true;
    a.motion.linear = Vec3(1.3, -0.35, 0.0);
    Primitive b = sphere(Vec3(0.7, -0.3, 0.6), 0.3, 37);
    b.dynamic = true;
    b.motion.linear = Vec3(-1.2, 0.45, 0.0);
    b.base_color = Vec3(0.42, 0.48, 0.5);
    spec.primitives.push_back(a);
    spec.primitives.push_back(b);
  } else if (name == "static-only") {
    spec.primitives.push_back(wall);
    Primitive bump = sphere(Vec3(0.35, 0.1, 0.7), 0.4, 41);
    spec.primitives.push_back(bump);
  } else {
    throw usage_error("unknown scene preset: " + name);
  }
  spec.validate();
  return spec;
}

}  // namespace reflow::harness

#endif  // REFLOW_HARNESS_HPP
