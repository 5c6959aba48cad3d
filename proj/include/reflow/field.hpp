#ifndef REFLOW_FIELD_HPP
#define REFLOW_FIELD_HPP

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/geometry.hpp"

namespace reflow::field {

using geometry::Vec3;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class AxisPair { XY, XZ, YZ, XT, YT, ZT };

inline const char* axis_pair_name(AxisPair p) {
  switch (p) {
    case AxisPair::XY: return "xy";
    case AxisPair::XZ: return "xz";
    case AxisPair::YZ: return "yz";
    case AxisPair::XT: return "xt";
    case AxisPair::YT: return "yt";
    case AxisPair::ZT: return "zt";
  }
  return "?";
}

// Single-resolution learnable grid. Queries use normalized (u, v) in [0,1]^2,
// clamped at the border; node (i, j) sits at (i/(res_u-1), j/(res_v-1)).
struct FeaturePlane {
  int res_u = 0, res_v = 0, channels = 0;
  AxisPair axis_pair = AxisPair::XY;
  std::vector<double> data;  // (i * res_v + j) * channels + c

  FeaturePlane() = default;
  FeaturePlane(int ru, int rv, int c, AxisPair ap)
      : res_u(ru), res_v(rv), channels(c), axis_pair(ap), data(static_cast<size_t>(ru) * rv * c, 0.0) {}

  double* node(int i, int j) { return data.data() + (static_cast<size_t>(i) * res_v + j) * channels; }
  const double* node(int i, int j) const {
    return data.data() + (static_cast<size_t>(i) * res_v + j) * channels;
  }
  size_t param_count() const { return data.size(); }
};

struct BilinearStencil {
  int i0, j0, i1, j1;
  double w00, w01, w10, w11;
  double gu, gv;          // clamped grid coordinates
  double du_scale, dv_scale;  // d(grid coord)/d(normalized coord), 0 if clamped
};

inline BilinearStencil make_stencil(const FeaturePlane& plane, double u, double v) {
  BilinearStencil s;
  const double uc = clamp01(u);
  const double vc = clamp01(v);
  s.gu = uc * (plane.res_u - 1);
  s.gv = vc * (plane.res_v - 1);
  s.i0 = std::min(plane.res_u - 2, static_cast<int>(s.gu));
  s.j0 = std::min(plane.res_v - 2, static_cast<int>(s.gv));
  s.i0 = std::max(0, s.i0);
  s.j0 = std::max(0, s.j0);
  s.i1 = std::min(plane.res_u - 1, s.i0 + 1);
  s.j1 = std::min(plane.res_v - 1, s.j0 + 1);
  const double fu = s.gu - s.i0;
  const double fv = s.gv - s.j0;
  s.w00 = (1 - fu) * (1 - fv);
  s.w01 = (1 - fu) * fv;
  s.w10 = fu * (1 - fv);
  s.w11 = fu * fv;
  s.du_scale = (u > 0.0 && u < 1.0) ? static_cast<double>(plane.res_u - 1) : 0.0;
  s.dv_scale = (v > 0.0 && v < 1.0) ? static_cast<double>(plane.res_v - 1) : 0.0;
  return s;
}

// Bilinear blend of the 4 surrounding nodes; out must hold plane.channels values.
inline void interp(const FeaturePlane& plane, double u, double v, double* out) {
  const BilinearStencil s = make_stencil(plane, u, v);
  const double* n00 = plane.node(s.i0, s.j0);
  const double* n01 = plane.node(s.i0, s.j1);
  const double* n10 = plane.node(s.i1, s.j0);
  const double* n11 = plane.node(s.i1, s.j1);
  for (int c = 0; c < plane.channels; ++c)
    out[c] = s.w00 * n00[c] + s.w01 * n01[c] + s.w10 * n10[c] + s.w11 * n11[c];
}

inline VectorXd interp(const FeaturePlane& plane, double u, double v) {
  VectorXd out(plane.channels);
  interp(plane, u, v, out.data());
  return out;
}

// Accumulates plane gradients and returns (dL/du, dL/dv) for the query point.
inline void interp_backward(const FeaturePlane& plane, double u, double v, const double* d_out,
                            std::vector<double>& plane_grad, double& d_u, double& d_v) {
  const BilinearStencil s = make_stencil(plane, u, v);
  const double fu = s.gu - s.i0;
  const double fv = s.gv - s.j0;
  double* g00 = plane_grad.data() + (static_cast<size_t>(s.i0) * plane.res_v + s.j0) * plane.channels;
  double* g01 = plane_grad.data() + (static_cast<size_t>(s.i0) * plane.res_v + s.j1) * plane.channels;
  double* g10 = plane_grad.data() + (static_cast<size_t>(s.i1) * plane.res_v + s.j0) * plane.channels;
  double* g11 = plane_grad.data() + (static_cast<size_t>(s.i1) * plane.res_v + s.j1) * plane.channels;
  const double* n00 = plane.node(s.i0, s.j0);
  const double* n01 = plane.node(s.i0, s.j1);
  const double* n10 = plane.node(s.i1, s.j0);
  const double* n11 = plane.node(s.i1, s.j1);
  double gu_acc = 0.0, gv_acc = 0.0;
  for (int c = 0; c < plane.channels; ++c) {
    const double g = d_out[c];
    g00[c] += s.w00 * g;
    g01[c] += s.w01 * g;
    g10[c] += s.w10 * g;
    g11[c] += s.w11 * g;
    gu_acc += g * ((n10[c] - n00[c]) * (1 - fv) + (n11[c] - n01[c]) * fv);
    gv_acc += g * ((n01[c] - n00[c]) * (1 - fu) + (n11[c] - n10[c]) * fu);
  }
  d_u = gu_acc * s.du_scale;
  d_v = gv_acc * s.dv_scale;
}

enum class Activation { Tanh, Identity };

// Fully connected stack; the nonlinearity sits between layers, never after
// the last one. Weights are packed per layer as row-major W then b.
struct Decoder {
  std::vector<int> dims;  // e.g. {48, 64, 64, 14}
  Activation activation = Activation::Tanh;
  std::vector<double> weights;

  Decoder() = default;
  Decoder(std::vector<int> d, Activation act = Activation::Tanh) : dims(std::move(d)), activation(act) {
    weights.assign(param_count(), 0.0);
  }

  int n_layers() const { return static_cast<int>(dims.size()) - 1; }
  int in_dim() const { return dims.front(); }
  int out_dim() const { return dims.back(); }

  size_t layer_offset(int layer) const {
    size_t off = 0;
    for (int l = 0; l < layer; ++l) off += static_cast<size_t>(dims[l + 1]) * dims[l] + dims[l + 1];
    return off;
  }
  size_t param_count() const { return layer_offset(n_layers()); }

  Eigen::Map<const RowMat> weight(int layer) const {
    return Eigen::Map<const RowMat>(weights.data() + layer_offset(layer), dims[layer + 1], dims[layer]);
  }
  Eigen::Map<const Eigen::VectorXd> bias(int layer) const {
    return Eigen::Map<const Eigen::VectorXd>(
        weights.data() + layer_offset(layer) + static_cast<size_t>(dims[layer + 1]) * dims[layer],
        dims[layer + 1]);
  }

  // Xavier-uniform hidden layers, zero final layer so every delta head starts
  // exactly at zero.
  void init(Rng& rng) {
    std::fill(weights.begin(), weights.end(), 0.0);
    for (int l = 0; l + 1 < n_layers(); ++l) {
      const double a = std::sqrt(6.0 / (dims[l] + dims[l + 1]));
      double* w = weights.data() + layer_offset(l);
      const size_t n = static_cast<size_t>(dims[l + 1]) * dims[l];
      for (size_t i = 0; i < n; ++i) w[i] = rng.uniform(-a, a);
    }
  }
};

struct DecoderTape {
  std::vector<MatrixXd> acts;  // acts[0] = input (N x in), acts[l>0] = post-activation
  MatrixXd out;                // N x out_dim, pre-head
};

inline void decoder_forward(const Decoder& dec, const RowMat& input, DecoderTape& tape) {
  const int n_layers = dec.n_layers();
  tape.acts.assign(1, MatrixXd(input));
  MatrixXd cur = input;
  for (int l = 0; l < n_layers; ++l) {
    MatrixXd z = cur * dec.weight(l).transpose();
    z.rowwise() += dec.bias(l).transpose();
    if (l + 1 < n_layers && dec.activation == Activation::Tanh) z = z.array().tanh();
    if (l + 1 < n_layers) tape.acts.push_back(z);
    cur = std::move(z);
  }
  tape.out = std::move(cur);
}

// d_out is N x out_dim. Accumulates packed weight grads and returns the input
// gradient (N x in_dim).
inline MatrixXd decoder_backward(const Decoder& dec, const DecoderTape& tape, const MatrixXd& d_out,
                                 std::vector<double>& weight_grad) {
  const int n_layers = dec.n_layers();
  MatrixXd g = d_out;
  for (int l = n_layers - 1; l >= 0; --l) {
    const MatrixXd& input = tape.acts[l];
    Eigen::Map<RowMat> dw(weight_grad.data() + dec.layer_offset(l), dec.dims[l + 1], dec.dims[l]);
    Eigen::Map<Eigen::VectorXd> db(
        weight_grad.data() + dec.layer_offset(l) + static_cast<size_t>(dec.dims[l + 1]) * dec.dims[l],
        dec.dims[l + 1]);
    dw += g.transpose() * input;
    db += g.colwise().sum().transpose();
    if (l == 0) return g * dec.weight(0);
    g = g * dec.weight(l);
    if (dec.activation == Activation::Tanh) {
      const MatrixXd& act = tape.acts[l];
      g = g.array() * (1.0 - act.array().square());
    }
  }
  return g;  // unreachable for n_layers >= 1
}

// Static decoder head layout: [dmu 3 | dq 4 | s 3 | sigma 1 | c 3].
constexpr int kStaticHeadDim = 14;
// Dynamic decoder head layout: [dmu 3 | dq 4].
constexpr int kDynamicHeadDim = 7;

struct Bounds {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Ones();

  Vec3 extent() const { return max - min; }
  Vec3 normalize(const Vec3& p) const {
    const Vec3 e = extent();
    return Vec3((p.x() - min.x()) / e.x(), (p.y() - min.y()) / e.y(), (p.z() - min.z()) / e.z());
  }
  double diameter() const { return extent().norm(); }
  void validate() const {
    if (!(extent().minCoeff() > 0.0)) throw usage_error("bounds: degenerate extent");
  }
};

// Computes an axis-aligned box around points, padded 5% per side.
inline Bounds bounds_from_points(const std::vector<Vec3>& points) {
  if (points.empty()) throw usage_error("bounds_from_points: empty point set");
  Vec3 lo = points.front(), hi = points.front();
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  Vec3 pad = 0.05 * (hi - lo);
  const double min_pad = 1e-6 + 0.05 * (hi - lo).norm();
  for (int a = 0; a < 3; ++a)
    if (pad[a] <= 0.0) pad[a] = (min_pad > 0 ? min_pad : 1e-3);
  return Bounds{lo - pad, hi + pad};
}

// Tri-plane static field plus optional space-time planes, with the two
// decoders and the fixed activation offsets for the static heads.
struct FeatureField {
  std::array<FeaturePlane, 3> spatial;          // xy, xz, yz
  std::vector<FeaturePlane> temporal;           // empty, or xt, yt, zt
  Bounds bounds;
  Decoder static_decoder;                       // in = 3C, out = 14
  Decoder dynamic_decoder;                      // in = 6C, out = 7
  double static_log_scale_offset = 0.0;         // s = exp(head + offset)
  double static_opacity_offset = logit(0.1);    // sigma = sigmoid(head + offset)

  bool has_temporal() const { return !temporal.empty(); }
  int channels() const { return spatial[0].channels; }

  static FeatureField make(int spatial_res, int temporal_res, int channels, int hidden, bool with_temporal,
                           const Bounds& bounds, Rng& rng) {
    bounds.validate();
    FeatureField f;
    f.bounds = bounds;
    f.spatial = {FeaturePlane(spatial_res, spatial_res, channels, AxisPair::XY),
                 FeaturePlane(spatial_res, spatial_res, channels, AxisPair::XZ),
                 FeaturePlane(spatial_res, spatial_res, channels, AxisPair::YZ)};
    if (with_temporal) {
      f.temporal = {FeaturePlane(spatial_res, temporal_res, channels, AxisPair::XT),
                    FeaturePlane(spatial_res, temporal_res, channels, AxisPair::YT),
                    FeaturePlane(spatial_res, temporal_res, channels, AxisPair::ZT)};
    }
    for (auto& plane : f.spatial)
      for (auto& x : plane.data) x = 0.01 * rng.normal();
    for (auto& plane : f.temporal)
      for (auto& x : plane.data) x = 0.01 * rng.normal();
    f.static_decoder = Decoder({3 * channels, hidden, hidden, kStaticHeadDim});
    f.static_decoder.init(rng);
    f.dynamic_decoder = Decoder({6 * channels, hidden, hidden, kDynamicHeadDim});
    f.dynamic_decoder.init(rng);
    return f;
  }

  // (u, v) query coordinates for a plane given normalized position and time.
  static void plane_coords(AxisPair ap, const Vec3& n, double t, double& u, double& v) {
    switch (ap) {
      case AxisPair::XY: u = n.x(); v = n.y(); return;
      case AxisPair::XZ: u = n.x(); v = n.z(); return;
      case AxisPair::YZ: u = n.y(); v = n.z(); return;
      case AxisPair::XT: u = n.x(); v = t; return;
      case AxisPair::YT: u = n.y(); v = t; return;
      case AxisPair::ZT: u = n.z(); v = t; return;
    }
  }

  // Maps a (du, dv) gradient back onto the normalized-position gradient.
  static void accumulate_coord_grad(AxisPair ap, double du, double dv, Vec3& d_n) {
    switch (ap) {
      case AxisPair::XY: d_n.x() += du; d_n.y() += dv; return;
      case AxisPair::XZ: d_n.x() += du; d_n.z() += dv; return;
      case AxisPair::YZ: d_n.y() += du; d_n.z() += dv; return;
      case AxisPair::XT: d_n.x() += du; return;
      case AxisPair::YT: d_n.y() += du; return;
      case AxisPair::ZT: d_n.z() += du; return;
    }
  }
};

struct StaticAttribs {
  Vec3 mean;
  Eigen::Vector4d quat;  // normalized, w first
  Vec3 scale;            // activated (exp)
  double opacity = 0.0;  // activated (sigmoid)
  Vec3 color;            // activated (sigmoid)
};

struct StaticDecodeTape {
  RowMat feats;              // N x 3C
  DecoderTape mlp;
  MatrixXd raw_quat;         // N x 4 pre-normalization (identity + dq)
  std::vector<Vec3> queries;     // original positions
  std::vector<Vec3> normalized;  // bounds-normalized positions
};

struct StaticBatch {
  std::vector<StaticAttribs> attribs;
  StaticDecodeTape tape;
};

inline Eigen::Vector4d normalize_quat(const Eigen::Vector4d& q) {
  const double n = q.norm();
  if (n < 1e-12) throw numerical_error("quaternion normalization: zero norm");
  return q / n;
}

inline Eigen::Vector4d normalize_quat_backward(const Eigen::Vector4d& raw, const Eigen::Vector4d& g) {
  const double n = raw.norm();
  const Eigen::Vector4d qn = raw / n;
  return (g - qn * qn.dot(g)) / n;
}

// Decodes static Gaussian attributes for a batch of seed positions; spatial
// planes only, independent of time.
inline StaticBatch decode_static_batch(const std::vector<Vec3>& positions, const FeatureField& field) {
  const int n = static_cast<int>(positions.size());
  const int c = field.channels();
  StaticBatch batch;
  batch.tape.queries = positions;
  batch.tape.normalized.resize(n);
  batch.tape.feats.resize(n, 3 * c);
  for (int i = 0; i < n; ++i) {
    const Vec3 nn = field.bounds.normalize(positions[i]);
    batch.tape.normalized[i] = nn;
    for (int pl = 0; pl < 3; ++pl) {
      double u, v;
      FeatureField::plane_coords(field.spatial[pl].axis_pair, nn, 0.0, u, v);
      interp(field.spatial[pl], u, v, batch.tape.feats.row(i).data() + pl * c);
    }
  }
  decoder_forward(field.static_decoder, batch.tape.feats, batch.tape.mlp);
  const MatrixXd& out = batch.tape.mlp.out;
  batch.tape.raw_quat.resize(n, 4);
  batch.attribs.resize(n);
  for (int i = 0; i < n; ++i) {
    StaticAttribs& a = batch.attribs[i];
    a.mean = positions[i] + Vec3(out(i, 0), out(i, 1), out(i, 2));
    Eigen::Vector4d rq(1.0 + out(i, 3), out(i, 4), out(i, 5), out(i, 6));
    batch.tape.raw_quat.row(i) = rq.transpose();
    a.quat = normalize_quat(rq);
    for (int k = 0; k < 3; ++k) a.scale[k] = std::exp(out(i, 7 + k) + field.static_log_scale_offset);
    a.opacity = sigmoid(out(i, 10) + field.static_opacity_offset);
    for (int k = 0; k < 3; ++k) a.color[k] = sigmoid(out(i, 11 + k));
  }
  return batch;
}

struct StaticAttribGrads {
  std::vector<Vec3> d_mean;
  std::vector<Eigen::Vector4d> d_quat;
  std::vector<Vec3> d_scale;
  std::vector<double> d_opacity;
  std::vector<Vec3> d_color;

  explicit StaticAttribGrads(int n)
      : d_mean(n, Vec3::Zero()),
        d_quat(n, Eigen::Vector4d::Zero()),
        d_scale(n, Vec3::Zero()),
        d_opacity(n, 0.0),
        d_color(n, Vec3::Zero()) {}
};

struct FieldGrads {
  std::array<std::vector<double>, 3> spatial;
  std::vector<std::vector<double>> temporal;
  std::vector<double> static_decoder;
  std::vector<double> dynamic_decoder;

  explicit FieldGrads(const FeatureField& f) {
    for (int i = 0; i < 3; ++i) spatial[i].assign(f.spatial[i].param_count(), 0.0);
    temporal.resize(f.temporal.size());
    for (size_t i = 0; i < f.temporal.size(); ++i) temporal[i].assign(f.temporal[i].param_count(), 0.0);
    static_decoder.assign(f.static_decoder.param_count(), 0.0);
    dynamic_decoder.assign(f.dynamic_decoder.param_count(), 0.0);
  }
};

// Backward through decode_static_batch: accumulates plane and decoder grads
// and the gradient w.r.t. the seed positions.
inline void decode_static_backward(const FeatureField& field, const StaticBatch& batch,
                                   const StaticAttribGrads& grads, FieldGrads& fg,
                                   std::vector<Vec3>& d_positions) {
  const int n = static_cast<int>(batch.attribs.size());
  const int c = field.channels();
  MatrixXd d_out = MatrixXd::Zero(n, kStaticHeadDim);
  for (int i = 0; i < n; ++i) {
    const StaticAttribs& a = batch.attribs[i];
    for (int k = 0; k < 3; ++k) d_out(i, k) = grads.d_mean[i][k];
    const Eigen::Vector4d gq =
        normalize_quat_backward(batch.tape.raw_quat.row(i).transpose(), grads.d_quat[i]);
    for (int k = 0; k < 4; ++k) d_out(i, 3 + k) = gq[k];
    for (int k = 0; k < 3; ++k) d_out(i, 7 + k) = grads.d_scale[i][k] * a.scale[k];
    d_out(i, 10) = grads.d_opacity[i] * a.opacity * (1.0 - a.opacity);
    for (int k = 0; k < 3; ++k)
      d_out(i, 11 + k) = grads.d_color[i][k] * a.color[k] * (1.0 - a.color[k]);
  }
  const RowMat d_feats =
      decoder_backward(field.static_decoder, batch.tape.mlp, d_out, fg.static_decoder);
  const Vec3 inv_extent = field.bounds.extent().cwiseInverse();
  for (int i = 0; i < n; ++i) {
    Vec3 d_n = Vec3::Zero();
    const Vec3& nn = batch.tape.normalized[i];
    for (int pl = 0; pl < 3; ++pl) {
      double u, v, du, dv;
      FeatureField::plane_coords(field.spatial[pl].axis_pair, nn, 0.0, u, v);
      interp_backward(field.spatial[pl], u, v, d_feats.row(i).data() + pl * c, fg.spatial[pl], du, dv);
      FeatureField::accumulate_coord_grad(field.spatial[pl].axis_pair, du, dv, d_n);
    }
    d_positions[i] += grads.d_mean[i] + d_n.cwiseProduct(inv_extent);
  }
}

// Single-point convenience wrapper (the unit-test surface).
inline StaticAttribs decode_static(const Vec3& p, const FeatureField& field) {
  return decode_static_batch({p}, field).attribs.front();
}

struct DynamicDeltas {
  std::vector<Vec3> d_mu;                  // position delta per gaussian
  std::vector<Eigen::Vector4d> d_q;        // quaternion delta per gaussian
};

struct DynamicDecodeTape {
  RowMat feats;    // N x 6C
  DecoderTape mlp;
  std::vector<Vec3> normalized;
  double t = 0.0;
};

struct DynamicBatch {
  DynamicDeltas deltas;
  DynamicDecodeTape tape;
};

// Evaluates the deformation deltas for canonical positions at time t. The
// six planes are read in the fixed order xy, xz, yz, xt, yt, zt.
inline DynamicBatch decode_dynamic_batch(const std::vector<Vec3>& canonical_mu, double t,
                                         const FeatureField& field) {
  if (!field.has_temporal())
    throw usage_error("decode_dynamic: field has no temporal planes");
  const int n = static_cast<int>(canonical_mu.size());
  const int c = field.channels();
  DynamicBatch batch;
  batch.tape.t = t;
  batch.tape.normalized.resize(n);
  batch.tape.feats.resize(n, 6 * c);
  for (int i = 0; i < n; ++i) {
    const Vec3 nn = field.bounds.normalize(canonical_mu[i]);
    batch.tape.normalized[i] = nn;
    for (int pl = 0; pl < 3; ++pl) {
      double u, v;
      FeatureField::plane_coords(field.spatial[pl].axis_pair, nn, t, u, v);
      interp(field.spatial[pl], u, v, batch.tape.feats.row(i).data() + pl * c);
    }
    for (int pl = 0; pl < 3; ++pl) {
      double u, v;
      FeatureField::plane_coords(field.temporal[pl].axis_pair, nn, t, u, v);
      interp(field.temporal[pl], u, v, batch.tape.feats.row(i).data() + (3 + pl) * c);
    }
  }
  decoder_forward(field.dynamic_decoder, batch.tape.feats, batch.tape.mlp);
  const MatrixXd& out = batch.tape.mlp.out;
  batch.deltas.d_mu.resize(n);
  batch.deltas.d_q.resize(n);
  for (int i = 0; i < n; ++i) {
    batch.deltas.d_mu[i] = Vec3(out(i, 0), out(i, 1), out(i, 2));
    batch.deltas.d_q[i] = Eigen::Vector4d(out(i, 3), out(i, 4), out(i, 5), out(i, 6));
  }
  return batch;
}

// Backward for the deltas; d_canonical_mu picks up the interpolation-query
// path (moving a canonical mean moves its plane samples).
inline void decode_dynamic_backward(const FeatureField& field, const DynamicBatch& batch,
                                    const std::vector<Vec3>& d_dmu,
                                    const std::vector<Eigen::Vector4d>& d_dq, FieldGrads& fg,
                                    std::vector<Vec3>& d_canonical_mu) {
  const int n = static_cast<int>(batch.deltas.d_mu.size());
  const int c = field.channels();
  MatrixXd d_out(n, kDynamicHeadDim);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) d_out(i, k) = d_dmu[i][k];
    for (int k = 0; k < 4; ++k) d_out(i, 3 + k) = d_dq[i][k];
  }
  const RowMat d_feats =
      decoder_backward(field.dynamic_decoder, batch.tape.mlp, d_out, fg.dynamic_decoder);
  const Vec3 inv_extent = field.bounds.extent().cwiseInverse();
  const double t = batch.tape.t;
  for (int i = 0; i < n; ++i) {
    Vec3 d_n = Vec3::Zero();
    const Vec3& nn = batch.tape.normalized[i];
    for (int pl = 0; pl < 3; ++pl) {
      double u, v, du, dv;
      FeatureField::plane_coords(field.spatial[pl].axis_pair, nn, t, u, v);
      interp_backward(field.spatial[pl], u, v, d_feats.row(i).data() + pl * c, fg.spatial[pl], du, dv);
      FeatureField::accumulate_coord_grad(field.spatial[pl].axis_pair, du, dv, d_n);
    }
    for (int pl = 0; pl < 3; ++pl) {
      double u, v, du, dv;
      FeatureField::plane_coords(field.temporal[pl].axis_pair, nn, t, u, v);
      interp_backward(field.temporal[pl], u, v, d_feats.row(i).data() + (3 + pl) * c,
                      fg.temporal[pl], du, dv);
      FeatureField::accumulate_coord_grad(field.temporal[pl].axis_pair, du, dv, d_n);
    }
    d_canonical_mu[i] += d_n.cwiseProduct(inv_extent);
  }
}

// Mean squared difference of adjacent entries along both grid axes of the
// temporal planes (the baseline feature-plane regularizer).
inline double temporal_smoothness(const FeatureField& field) {
  double sum = 0.0;
  size_t count = 0;
  for (const auto& plane : field.temporal) {
    for (int i = 0; i < plane.res_u; ++i)
      for (int j = 0; j < plane.res_v; ++j)
        for (int c = 0; c < plane.channels; ++c) {
          const double v = plane.node(i, j)[c];
          if (i + 1 < plane.res_u) {
            const double d = plane.node(i + 1, j)[c] - v;
            sum += d * d;
            ++count;
          }
          if (j + 1 < plane.res_v) {
            const double d = plane.node(i, j + 1)[c] - v;
            sum += d * d;
            ++count;
          }
        }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

inline void temporal_smoothness_backward(const FeatureField& field, double d_loss, FieldGrads& fg) {
  size_t count = 0;
  for (const auto& plane : field.temporal)
    count += static_cast<size_t>(plane.channels) *
             ((plane.res_u - 1) * plane.res_v + plane.res_u * (plane.res_v - 1));
  if (!count) return;
  const double scale = 2.0 * d_loss / static_cast<double>(count);
  for (size_t pl = 0; pl < field.temporal.size(); ++pl) {
    const auto& plane = field.temporal[pl];
    auto& grad = fg.temporal[pl];
    auto gnode = [&](int i, int j) {
      return grad.data() + (static_cast<size_t>(i) * plane.res_v + j) * plane.channels;
    };
    for (int i = 0; i < plane.res_u; ++i)
      for (int j = 0; j < plane.res_v; ++j)
        for (int c = 0; c < plane.channels; ++c) {
          const double v = plane.node(i, j)[c];
          if (i + 1 < plane.res_u) {
            const double d = plane.node(i + 1, j)[c] - v;
            gnode(i + 1, j)[c] += scale * d;
            gnode(i, j)[c] -= scale * d;
          }
          if (j + 1 < plane.res_v) {
            const double d = plane.node(i, j + 1)[c] - v;
            gnode(i, j + 1)[c] += scale * d;
            gnode(i, j)[c] -= scale * d;
          }
        }
  }
}

}  // namespace reflow::field

#endif  // REFLOW_FIELD_HPP
