#ifndef REFLOW_GEOMETRY_HPP
#define REFLOW_GEOMETRY_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "reflow/core.hpp"

namespace reflow::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

// Pixel convention: pixel centers at integer coordinates, origin top-left,
// u rightward, v downward.
struct Intrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  static Intrinsics make(double fx, double fy, double cx, double cy, int w, int h) {
    if (!(fx > 0.0) || !(fy > 0.0)) throw usage_error("intrinsics: focal lengths must be positive");
    if (!(cx >= 0.0 && cx < w) || !(cy >= 0.0 && cy < h))
      throw usage_error("intrinsics: principal point must lie inside the image");
    return Intrinsics{fx, fy, cx, cy, w, h};
  }
};

// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose make(const Mat3& rot, const Vec3& trans) {
    const double ortho = (rot.transpose() * rot - Mat3::Identity()).norm();
    if (ortho > 1e-9) throw usage_error("pose: rotation not orthonormal (|R'R - I| = " + std::to_string(ortho) + ")");
    if (std::abs(rot.determinant() - 1.0) > 1e-9) throw usage_error("pose: det(R) != 1");
    return Pose{rot, trans};
  }

  Vec3 apply(const Vec3& world) const { return rotation * world + translation; }
  Vec3 apply_inverse(const Vec3& cam) const { return rotation.transpose() * (cam - translation); }
};

inline Pose compose(const Pose& a, const Pose& b) {
  // (a ∘ b)(x) = a(b(x))
  return Pose{a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose invert(const Pose& a) {
  return Pose{a.rotation.transpose(), -(a.rotation.transpose() * a.translation)};
}

struct Camera {
  Intrinsics intrinsics;
  Pose pose;
  double timestamp = 0.0;

  static Camera make(const Intrinsics& k, const Pose& t, double timestamp) {
    if (!(timestamp >= 0.0 && timestamp <= 1.0)) throw usage_error("camera: timestamp outside [0,1]");
    return Camera{k, t, timestamp};
  }
};

constexpr double kDegenerateZ = 1e-12;

struct Projection {
  Vec2 pixel;
  double depth;  // camera-frame z; may be <= 0, visibility is the caller's call
};

inline Projection project(const Vec3& point, const Camera& camera) {
  const Vec3 pc = camera.pose.apply(point);
  if (std::abs(pc.z()) < kDegenerateZ) throw numerical_error("project: point on the camera plane (z ~ 0)");
  const auto& k = camera.intrinsics;
  return Projection{Vec2(k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy), pc.z()};
}

inline Vec3 back_project(const Vec2& pixel, double depth, const Camera& camera) {
  if (!(depth > 0.0)) throw numerical_error("back_project: depth must be positive");
  const auto& k = camera.intrinsics;
  const Vec3 cam(depth * (pixel.x() - k.cx) / k.fx, depth * (pixel.y() - k.cy) / k.fy, depth);
  return camera.pose.apply_inverse(cam);
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rodrigues exponential.
inline Mat3 so3_exp(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 k = skew(omega);
  double a, b;
  if (theta < 1e-8) {
    a = 1.0 - theta * theta / 6.0;
    b = 0.5 - theta * theta / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Mat3::Identity() + a * k + b * k * k;
}

inline Vec3 so3_log(const Mat3& rot) {
  const double cos_theta = std::min(1.0, std::max(-1.0, (rot.trace() - 1.0) * 0.5));
  const double theta = std::acos(cos_theta);
  if (theta >= M_PI - 1e-6) throw numerical_error("so3_log: rotation angle near pi (cut locus)");
  Vec3 w(rot(2, 1) - rot(1, 2), rot(0, 2) - rot(2, 0), rot(1, 0) - rot(0, 1));
  if (theta < 1e-8) return 0.5 * w * (1.0 + theta * theta / 6.0);
  return w * (theta / (2.0 * std::sin(theta)));
}

// Twist layout: [omega | v], exp = [R, V v].
inline Pose se3_exp(const Vec6& xi) {
  const Vec3 omega = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const double theta = omega.norm();
  const Mat3 k = skew(omega);
  double b, c;
  if (theta < 1e-8) {
    b = 0.5 - theta * theta / 24.0;
    c = 1.0 / 6.0 - theta * theta / 120.0;
  } else {
    b = (1.0 - std::cos(theta)) / (theta * theta);
    c = (theta - std::sin(theta)) / (theta * theta * theta);
  }
  const Mat3 V = Mat3::Identity() + b * k + c * k * k;
  return Pose{so3_exp(omega), V * v};
}

inline Vec6 se3_log(const Pose& pose) {
  const Vec3 omega = so3_log(pose.rotation);
  const double theta = omega.norm();
  const Mat3 k = skew(omega);
  Mat3 v_inv;
  if (theta < 1e-8) {
    v_inv = Mat3::Identity() - 0.5 * k + (1.0 / 12.0) * k * k;
  } else {
    const double half = 0.5 * theta;
    const double cot = half / std::tan(half);
    v_inv = Mat3::Identity() - 0.5 * k + ((1.0 - cot) / (theta * theta)) * k * k;
  }
  Vec6 xi;
  xi.head<3>() = omega;
  xi.tail<3>() = v_inv * pose.translation;
  return xi;
}

// Geodesic interpolation from a to b: exp(s * log(b a^-1)) ∘ a.
inline Pose se3_interpolate(const Pose& a, const Pose& b, double s) {
  const Vec6 xi = se3_log(compose(b, invert(a)));
  return compose(se3_exp(s * xi), a);
}

inline double rotation_angle_deg(const Mat3& rot) {
  const double c = std::min(1.0, std::max(-1.0, (rot.trace() - 1.0) * 0.5));
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace reflow::geometry

#endif  // REFLOW_GEOMETRY_HPP
