#ifndef REFLOW_IO_HPP
#define REFLOW_IO_HPP

#include <png.h>
#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "reflow/core.hpp"
#include "reflow/flowrender.hpp"
#include "reflow/geometry.hpp"
#include "reflow/harness.hpp"
#include "reflow/pipeline.hpp"
#include "reflow/warploss.hpp"

namespace reflow::io {

namespace fs = std::filesystem;
using flowrender::FlowField;
using geometry::Camera;
using geometry::Intrinsics;
using geometry::Pose;
using geometry::Vec3;
using warploss::Image;
using warploss::Mask;

// ---------------------------------------------------------------------------
// PNG (8-bit, via libpng)

inline void write_png_rgb(const std::string& path, const Image& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw io_error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("libpng write failure: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[x * 3 + c] = static_cast<std::uint8_t>(std::lround(clamp01(img.at(x, y, c)) * 255.0));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline void write_png_gray(const std::string& path, const Mask& mask, std::uint8_t on = 255) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw io_error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("libpng write failure: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, mask.width, mask.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) row[x] = mask.at(x, y) ? on : 0;
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

struct PngData {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved
};

inline PngData read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw io_error("cannot open: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw io_error("libpng read failure: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  PngData out;
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.pixels.resize(static_cast<size_t>(out.width) * out.height * out.channels);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y)
    rows[y] = out.pixels.data() + static_cast<size_t>(y) * out.width * out.channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

inline Image read_png_image(const std::string& path) {
  const PngData d = read_png(path);
  Image img(d.width, d.height);
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int sc = d.channels >= 3 ? c : 0;
        img.at(x, y, c) =
            d.pixels[(static_cast<size_t>(y) * d.width + x) * d.channels + sc] / 255.0;
      }
  return img;
}

// Masks: any value >= 128 counts as dynamic (files use 255).
inline Mask read_png_mask(const std::string& path) {
  const PngData d = read_png(path);
  Mask mask(d.width, d.height, 0);
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      mask.at(x, y) = d.pixels[(static_cast<size_t>(y) * d.width + x) * d.channels] >= 128 ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------------------
// PFM (grayscale float32, bottom-up rows, little-endian scale -1)

inline void write_pfm(const std::string& path, const GridD& grid) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "Pf\n" << grid.width << " " << grid.height << "\n-1.0\n";
  for (int y = grid.height - 1; y >= 0; --y)
    for (int x = 0; x < grid.width; ++x) {
      const float v = static_cast<float>(grid.at(x, y));
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  if (!f) throw io_error("write failed: " + path);
}

inline GridD read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  std::string magic;
  int w, h;
  double scale;
  f >> magic >> w >> h >> scale;
  if (magic != "Pf") throw io_error("not a grayscale PFM: " + path);
  f.get();  // single whitespace after the header
  GridD grid(w, h, 0.0);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x) {
      float v;
      f.read(reinterpret_cast<char*>(&v), 4);
      grid.at(x, y) = v;
    }
  if (!f) throw io_error("truncated PFM: " + path);
  return grid;
}

// ---------------------------------------------------------------------------
// Middlebury .flo; invalid pixels carry the 1e9 sentinel.

constexpr float kFloSentinel = 1e9f;

inline void write_flo(const std::string& path, const FlowField& flow) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  f.write("PIEH", 4);
  const std::int32_t w = flow.width, h = flow.height;
  f.write(reinterpret_cast<const char*>(&w), 4);
  f.write(reinterpret_cast<const char*>(&h), 4);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t p = static_cast<size_t>(y) * w + x;
      const float u = flow.valid.data[p] ? static_cast<float>(flow.du.data[p]) : kFloSentinel;
      const float v = flow.valid.data[p] ? static_cast<float>(flow.dv.data[p]) : kFloSentinel;
      f.write(reinterpret_cast<const char*>(&u), 4);
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  if (!f) throw io_error("write failed: " + path);
}

inline FlowField read_flo(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "PIEH", 4) != 0) throw io_error("not a .flo file: " + path);
  std::int32_t w, h;
  f.read(reinterpret_cast<char*>(&w), 4);
  f.read(reinterpret_cast<char*>(&h), 4);
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16) throw io_error("bad .flo header: " + path);
  FlowField flow(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float u, v;
      f.read(reinterpret_cast<char*>(&u), 4);
      f.read(reinterpret_cast<char*>(&v), 4);
      const size_t p = static_cast<size_t>(y) * w + x;
      if (std::abs(u) >= 1e8f || std::abs(v) >= 1e8f) continue;
      flow.du.data[p] = u;
      flow.dv.data[p] = v;
      flow.valid.data[p] = 1;
    }
  if (!f) throw io_error("truncated .flo: " + path);
  return flow;
}

// Middlebury-style flow color wheel; magnitude normalized per image.
inline Image flow_to_color(const FlowField& flow, double* max_mag_out = nullptr) {
  double max_mag = 1e-9;
  for (size_t p = 0; p < flow.du.data.size(); ++p)
    if (flow.valid.data[p])
      max_mag = std::max(max_mag, std::hypot(flow.du.data[p], flow.dv.data[p]));
  if (max_mag_out) *max_mag_out = max_mag;

  static const int kRing[6] = {15, 6, 4, 11, 13, 6};  // RY YG GC CB BM MR
  const int total = 55;
  auto wheel_color = [&](double angle01) {
    const double fk = angle01 * total;
    int k0 = static_cast<int>(fk) % total;
    int k1 = (k0 + 1) % total;
    const double f = fk - std::floor(fk);
    auto seg_color = [&](int k, double rgb[3]) {
      int idx = k, seg = 0;
      while (idx >= kRing[seg]) {
        idx -= kRing[seg];
        ++seg;
      }
      const double t = static_cast<double>(idx) / kRing[seg];
      switch (seg) {
        case 0: rgb[0] = 1; rgb[1] = t; rgb[2] = 0; break;
        case 1: rgb[0] = 1 - t; rgb[1] = 1; rgb[2] = 0; break;
        case 2: rgb[0] = 0; rgb[1] = 1; rgb[2] = t; break;
        case 3: rgb[0] = 0; rgb[1] = 1 - t; rgb[2] = 1; break;
        case 4: rgb[0] = t; rgb[1] = 0; rgb[2] = 1; break;
        default: rgb[0] = 1; rgb[1] = 0; rgb[2] = 1 - t; break;
      }
    };
    double c0[3], c1[3], out[3];
    seg_color(k0, c0);
    seg_color(k1, c1);
    for (int c = 0; c < 3; ++c) out[c] = (1 - f) * c0[c] + f * c1[c];
    return Vec3(out[0], out[1], out[2]);
  };

  Image img(flow.width, flow.height, 0.0);
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const size_t p = static_cast<size_t>(y) * flow.width + x;
      if (!flow.valid.data[p]) continue;
      const double u = flow.du.data[p], v = flow.dv.data[p];
      const double mag = std::hypot(u, v) / max_mag;
      const double angle = (std::atan2(-v, -u) / M_PI + 1.0) / 2.0;  // [0, 1)
      const Vec3 base = wheel_color(angle);
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = clamp01(1.0 - mag * (1.0 - base[c]));
    }
  return img;
}

// ---------------------------------------------------------------------------
// ASCII PLY clouds: x y z r g b flag

struct CloudPoint {
  Vec3 position = Vec3::Zero();
  Vec3 color = Vec3::Constant(0.5);
  std::uint8_t flag = 0;  // 1 = dynamic
};

inline void write_ply(const std::string& path, const std::vector<CloudPoint>& points) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "ply\nformat ascii 1.0\nelement vertex " << points.size()
    << "\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar "
       "green\nproperty uchar blue\nproperty uchar flag\nend_header\n";
  char line[256];
  for (const auto& p : points) {
    std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %d %d %d %d\n", p.position.x(), p.position.y(),
                  p.position.z(), static_cast<int>(std::lround(clamp01(p.color.x()) * 255)),
                  static_cast<int>(std::lround(clamp01(p.color.y()) * 255)),
                  static_cast<int>(std::lround(clamp01(p.color.z()) * 255)), p.flag ? 1 : 0);
    f << line;
  }
  if (!f) throw io_error("write failed: " + path);
}

inline std::vector<CloudPoint> read_ply(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  std::string line;
  size_t count = 0;
  bool header_done = false;
  while (std::getline(f, line)) {
    if (line.rfind("element vertex", 0) == 0) count = std::stoull(line.substr(15));
    if (line == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw io_error("bad PLY header: " + path);
  std::vector<CloudPoint> points(count);
  for (auto& p : points) {
    int r, g, b, flag;
    f >> p.position.x() >> p.position.y() >> p.position.z() >> r >> g >> b >> flag;
    p.color = Vec3(r / 255.0, g / 255.0, b / 255.0);
    p.flag = flag ? 1 : 0;
  }
  if (!f) throw io_error("truncated PLY: " + path);
  return points;
}

// ---------------------------------------------------------------------------
// cameras.txt: per frame one K row "fx fy cx cy width height" followed by one
// 3x4 row-major world-to-camera matrix on a single line.

inline void write_cameras(const std::string& path, const std::vector<Camera>& cams) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f.precision(17);
  for (const auto& cam : cams) {
    const auto& k = cam.intrinsics;
    f << k.fx << " " << k.fy << " " << k.cx << " " << k.cy << " " << k.width << " " << k.height
      << "\n";
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) f << cam.pose.rotation(r, c) << " ";
      f << cam.pose.translation[r] << (r == 2 ? "\n" : " ");
    }
  }
  if (!f) throw io_error("write failed: " + path);
}

inline std::vector<Camera> read_cameras(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  std::vector<Camera> cams;
  double fx, fy, cx, cy;
  int w, h;
  while (f >> fx >> fy >> cx >> cy >> w >> h) {
    geometry::Mat3 rot;
    Vec3 t;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c)
        if (!(f >> rot(r, c))) throw io_error("truncated cameras.txt: " + path);
      if (!(f >> t[r])) throw io_error("truncated cameras.txt: " + path);
    }
    cams.push_back(Camera{Intrinsics::make(fx, fy, cx, cy, w, h), Pose::make(rot, t), 0.0});
  }
  // timestamps are normalized frame indices
  for (size_t i = 0; i < cams.size(); ++i)
    cams[i].timestamp = cams.size() > 1 ? static_cast<double>(i) / (cams.size() - 1) : 0.0;
  return cams;
}

// ---------------------------------------------------------------------------
// Flat key = value config files; '#' starts a comment.

inline std::map<std::string, std::string> parse_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config: " + path);
  std::map<std::string, std::string> out;
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(f, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw usage_error("config line without '=': " + line);
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene directories (the harness on-disk format).

struct SceneData {
  std::vector<Image> frames;
  std::vector<GridD> depths;
  std::vector<Mask> masks;
  std::vector<Camera> cameras;
  std::vector<FlowField> flows;  // adjacent pairs, may be empty
  Vec3 background = Vec3::Constant(0.08);
};

inline std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return buf;
}

inline void save_scene(const std::string& dir, const harness::GroundTruth& gt) {
  fs::create_directories(fs::path(dir) / "frames");
  fs::create_directories(fs::path(dir) / "depth");
  fs::create_directories(fs::path(dir) / "mask");
  fs::create_directories(fs::path(dir) / "flow");
  const int n = static_cast<int>(gt.frames.size());
  for (int i = 0; i < n; ++i) {
    write_png_rgb((fs::path(dir) / "frames" / (frame_name(i) + ".png")).string(), gt.frames[i]);
    write_pfm((fs::path(dir) / "depth" / (frame_name(i) + ".pfm")).string(), gt.depths[i]);
    write_png_gray((fs::path(dir) / "mask" / (frame_name(i) + ".png")).string(), gt.masks[i]);
  }
  for (size_t i = 0; i < gt.flows.size(); ++i)
    write_flo((fs::path(dir) / "flow" / (frame_name(static_cast<int>(i)) + ".flo")).string(),
              gt.flows[i]);
  write_cameras((fs::path(dir) / "cameras.txt").string(), gt.cameras);
  std::ofstream spec((fs::path(dir) / "scene.txt").string());
  spec.precision(17);
  spec << "n_frames = " << gt.spec.n_frames << "\nwidth = " << gt.spec.width
       << "\nheight = " << gt.spec.height << "\nfocal = " << gt.spec.focal
       << "\nseed = " << gt.spec.seed << "\nbackground = " << gt.spec.background.x() << " "
       << gt.spec.background.y() << " " << gt.spec.background.z() << "\n";
}

inline SceneData load_scene(const std::string& dir) {
  SceneData data;
  data.cameras = read_cameras((fs::path(dir) / "cameras.txt").string());
  const int n = static_cast<int>(data.cameras.size());
  if (n == 0) throw io_error("scene has no cameras: " + dir);
  for (int i = 0; i < n; ++i) {
    data.frames.push_back(read_png_image((fs::path(dir) / "frames" / (frame_name(i) + ".png")).string()));
    const auto depth_path = fs::path(dir) / "depth" / (frame_name(i) + ".pfm");
    if (fs::exists(depth_path)) data.depths.push_back(read_pfm(depth_path.string()));
    const auto mask_path = fs::path(dir) / "mask" / (frame_name(i) + ".png");
    data.masks.push_back(fs::exists(mask_path)
                             ? read_png_mask(mask_path.string())
                             : Mask(data.frames.back().width, data.frames.back().height, 0));
  }
  for (int i = 0; i + 1 < n; ++i) {
    const auto flow_path = fs::path(dir) / "flow" / (frame_name(i) + ".flo");
    if (fs::exists(flow_path)) data.flows.push_back(read_flo(flow_path.string()));
  }
  const auto scene_txt = fs::path(dir) / "scene.txt";
  if (fs::exists(scene_txt)) {
    const auto kv = parse_key_values(scene_txt.string());
    if (auto it = kv.find("background"); it != kv.end()) {
      std::istringstream ss(it->second);
      ss >> data.background.x() >> data.background.y() >> data.background.z();
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary, magic RFLW, float64 payloads, trailing
// CRC32 of everything before it.

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
  std::vector<std::uint8_t> bytes;
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) { raw(v.data(), v.size() * 8); }
};

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  size_t at = 0;
  void raw(void* p, size_t n) {
    if (at + n > bytes.size()) throw io_error("checkpoint truncated");
    std::memcpy(p, bytes.data() + at, n);
    at += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const size_t n = u64();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void doubles(std::vector<double>& v, size_t n) {
    v.resize(n);
    raw(v.data(), n * 8);
  }
};

inline void span_out(ByteWriter& w, const std::vector<std::uint64_t>& dims,
                     const std::vector<double>& data) {
  w.u64(dims.size());
  for (auto d : dims) w.u64(d);
  w.u64(data.size());
  w.doubles(data);
}

}  // namespace detail

struct Checkpoint {
  pipeline::SplatModel model;
  std::uint64_t step = 0;
  std::string config_echo;
};

inline void save_checkpoint(const std::string& path, const pipeline::SplatModel& m,
                            std::uint64_t step, const std::string& config_echo) {
  detail::ByteWriter w;
  w.raw("RFLW", 4);
  w.u32(kCheckpointVersion);
  w.u64(step);
  w.str(config_echo);
  w.u64(static_cast<std::uint64_t>(m.n_static));
  w.u64(static_cast<std::uint64_t>(m.n_dynamic));
  for (int a = 0; a < 3; ++a) w.f64(m.field.bounds.min[a]);
  for (int a = 0; a < 3; ++a) w.f64(m.field.bounds.max[a]);
  w.f64(m.field.static_log_scale_offset);
  w.f64(m.field.static_opacity_offset);
  w.f64(m.lambda_tv);
  for (int a = 0; a < 3; ++a) w.f64(m.background[a]);

  const auto plane_dims = [](const field::FeaturePlane& p) {
    return std::vector<std::uint64_t>{static_cast<std::uint64_t>(p.res_u),
                                      static_cast<std::uint64_t>(p.res_v),
                                      static_cast<std::uint64_t>(p.channels)};
  };
  const auto decoder_dims = [](const field::Decoder& d) {
    std::vector<std::uint64_t> out;
    for (int v : d.dims) out.push_back(static_cast<std::uint64_t>(v));
    return out;
  };

  struct GroupSpec {
    std::string name;
    std::vector<std::pair<std::vector<std::uint64_t>, const std::vector<double>*>> spans;
  };
  std::vector<GroupSpec> groups;
  groups.push_back({"gaussian_means", {{{static_cast<std::uint64_t>(m.n_total()), 3}, &m.means}}});
  groups.push_back(
      {"gaussian_rotations", {{{static_cast<std::uint64_t>(m.n_dynamic), 4}, &m.rotations}}});
  groups.push_back({"gaussian_scales", {{{static_cast<std::uint64_t>(m.n_dynamic), 3}, &m.scales}}});
  groups.push_back(
      {"gaussian_opacities", {{{static_cast<std::uint64_t>(m.n_dynamic)}, &m.opacities}}});
  groups.push_back({"gaussian_colors", {{{static_cast<std::uint64_t>(m.n_dynamic), 3}, &m.colors}}});
  GroupSpec spatial{"spatial_planes", {}};
  for (const auto& p : m.field.spatial) spatial.spans.push_back({plane_dims(p), &p.data});
  groups.push_back(spatial);
  GroupSpec temporal{"temporal_planes", {}};
  for (const auto& p : m.field.temporal) temporal.spans.push_back({plane_dims(p), &p.data});
  groups.push_back(temporal);
  groups.push_back({"decoder_weights",
                    {{decoder_dims(m.field.static_decoder), &m.field.static_decoder.weights},
                     {decoder_dims(m.field.dynamic_decoder), &m.field.dynamic_decoder.weights}}});

  w.u64(groups.size());
  for (const auto& g : groups) {
    w.str(g.name);
    w.u64(g.spans.size());
    for (const auto& [dims, data] : g.spans) detail::span_out(w, dims, *data);
  }

  const std::uint32_t crc =
      static_cast<std::uint32_t>(::crc32(0, w.bytes.data(), static_cast<uInt>(w.bytes.size())));
  w.u32(crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
  if (!f) throw io_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw io_error("checkpoint too small: " + path);
  const std::uint32_t stored_crc = *reinterpret_cast<const std::uint32_t*>(bytes.data() + bytes.size() - 4);
  const std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != crc) throw io_error("checkpoint CRC mismatch: " + path);
  bytes.resize(bytes.size() - 4);

  detail::ByteReader r{bytes};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "RFLW", 4) != 0) throw io_error("not a checkpoint: " + path);
  if (r.u32() != kCheckpointVersion) throw io_error("unsupported checkpoint version: " + path);

  Checkpoint ck;
  ck.step = r.u64();
  ck.config_echo = r.str();
  pipeline::SplatModel& m = ck.model;
  m.n_static = static_cast<int>(r.u64());
  m.n_dynamic = static_cast<int>(r.u64());
  for (int a = 0; a < 3; ++a) m.field.bounds.min[a] = r.f64();
  for (int a = 0; a < 3; ++a) m.field.bounds.max[a] = r.f64();
  m.field.static_log_scale_offset = r.f64();
  m.field.static_opacity_offset = r.f64();
  m.lambda_tv = r.f64();
  for (int a = 0; a < 3; ++a) m.background[a] = r.f64();

  const size_t n_groups = r.u64();
  for (size_t gi = 0; gi < n_groups; ++gi) {
    const std::string name = r.str();
    const size_t n_spans = r.u64();
    std::vector<std::vector<std::uint64_t>> dims(n_spans);
    std::vector<std::vector<double>> payloads(n_spans);
    for (size_t s = 0; s < n_spans; ++s) {
      const size_t nd = r.u64();
      dims[s].resize(nd);
      for (auto& d : dims[s]) d = r.u64();
      const size_t len = r.u64();
      r.doubles(payloads[s], len);
    }
    auto as_plane = [&](size_t s, field::AxisPair ap) {
      field::FeaturePlane p(static_cast<int>(dims[s][0]), static_cast<int>(dims[s][1]),
                            static_cast<int>(dims[s][2]), ap);
      p.data = std::move(payloads[s]);
      return p;
    };
    if (name == "gaussian_means") m.means = std::move(payloads[0]);
    else if (name == "gaussian_rotations") m.rotations = std::move(payloads[0]);
    else if (name == "gaussian_scales") m.scales = std::move(payloads[0]);
    else if (name == "gaussian_opacities") m.opacities = std::move(payloads[0]);
    else if (name == "gaussian_colors") m.colors = std::move(payloads[0]);
    else if (name == "spatial_planes") {
      m.field.spatial = {as_plane(0, field::AxisPair::XY), as_plane(1, field::AxisPair::XZ),
                         as_plane(2, field::AxisPair::YZ)};
    } else if (name == "temporal_planes") {
      m.field.temporal.clear();
      const field::AxisPair aps[3] = {field::AxisPair::XT, field::AxisPair::YT, field::AxisPair::ZT};
      for (size_t s = 0; s < n_spans; ++s) m.field.temporal.push_back(as_plane(s, aps[s]));
    } else if (name == "decoder_weights") {
      auto as_decoder = [&](size_t s) {
        std::vector<int> layer_dims;
        for (auto d : dims[s]) layer_dims.push_back(static_cast<int>(d));
        field::Decoder dec(layer_dims);
        dec.weights = std::move(payloads[s]);
        return dec;
      };
      m.field.static_decoder = as_decoder(0);
      m.field.dynamic_decoder = as_decoder(1);
    } else {
      throw io_error("unknown checkpoint group: " + name);
    }
  }
  return ck;
}

// Per-step metrics CSV with stable formatting (%.17g) so identical runs are
// byte-identical.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) : f_(path) {
    if (!f_) throw io_error("cannot open for writing: " + path);
    f_ << header << "\n";
  }
  void row(const std::vector<double>& values) {
    char buf[32];
    for (size_t i = 0; i < values.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
      f_ << (i ? "," : "") << buf;
    }
    f_ << "\n";
  }
  void flush() { f_.flush(); }

 private:
  std::ofstream f_;
};

}  // namespace reflow::io

#endif  // REFLOW_IO_HPP
