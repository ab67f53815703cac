#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "chadet/image_io.hpp"
#include "chadet/losses.hpp"
#include "chadet/nn.hpp"

namespace chadet::synth {

struct SphereObj {
  Eigen::Vector3d center;
  double radius;
  Eigen::Vector3d albedo;
};

struct RectObj {
  Eigen::Vector2d corner;  // (x, y) of the lower corner, meters
  Eigen::Vector2d extent;
  double depth;
  Eigen::Vector3d albedo;
};

struct Scene {
  double background_depth = 10.0;
  Eigen::Vector3d background_albedo{0.5, 0.5, 0.55};
  std::vector<SphereObj> spheres;
  std::vector<RectObj> rects;
  Eigen::Vector3d light{0.3, -0.5, 0.8};  // direction light travels, unit
};

struct SynthConfig {
  int height = 64;
  int width = 64;
  DepthRange range{0.5, 20.0};
  int n_points = 1500;
  double max_rotation_deg = 3.0;
  double max_translation = 0.15;
};

struct Sample {
  Tensor<float> rgb0;    // (1, 3, h, w)
  Tensor<float> rgb1;    // second view
  Tensor<float> sparse;  // (1, 1, h, w), 0 = no measurement
  Tensor<float> gt;      // dense ground truth depth, meters
  Pose pose;             // frame t -> frame t+1
  Intrinsics intr;
};

inline Scene generate_scene(std::uint64_t seed,
                            const DepthRange& range = DepthRange{0.5, 20.0}) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Scene sc;
  sc.background_depth = range.min_d + (0.45 + 0.45 * uni(rng)) *
                                          (range.max_d - range.min_d);
  sc.background_albedo = {0.35 + 0.3 * uni(rng), 0.35 + 0.3 * uni(rng),
                          0.35 + 0.3 * uni(rng)};
  Eigen::Vector3d l{uni(rng) - 0.5, uni(rng) - 0.5, 0.8 + 0.4 * uni(rng)};
  sc.light = l.normalized();
  int n_objects = 1 + static_cast<int>(uni(rng) * 7.999);
  for (int i = 0; i < n_objects; ++i) {
    double zmin = range.min_d + 0.3;
    double zmax = sc.background_depth - 0.3;
    double z = zmin + uni(rng) * (zmax - zmin);
    double lateral = 0.45 * z;  // stays roughly inside the frustum
    Eigen::Vector3d albedo{0.1 + 0.9 * uni(rng), 0.1 + 0.9 * uni(rng),
                           0.1 + 0.9 * uni(rng)};
    if (uni(rng) < 0.5) {
      SphereObj s;
      s.radius = 0.15 + 0.35 * uni(rng);
      double zc = std::min(z + s.radius, sc.background_depth - 0.1);
      zc = std::max(zc, range.min_d + s.radius + 0.1);
      s.center = {(uni(rng) * 2 - 1) * lateral, (uni(rng) * 2 - 1) * lateral,
                  zc};
      s.albedo = albedo;
      sc.spheres.push_back(s);
    } else {
      RectObj r;
      r.depth = z;
      r.extent = {0.4 + 1.6 * uni(rng), 0.4 + 1.6 * uni(rng)};
      r.corner = {(uni(rng) * 2 - 1) * lateral - r.extent.x() / 2,
                  (uni(rng) * 2 - 1) * lateral - r.extent.y() / 2};
      r.albedo = albedo;
      sc.rects.push_back(r);
    }
  }
  return sc;
}

// Ray cast in the frame-t world; `pose` maps frame-t coordinates into the
// rendered camera's frame. Depth is the z coordinate in the camera frame.
inline std::pair<Tensor<float>, Tensor<float>> render_view(
    const Scene& sc, const Pose& pose, const Intrinsics& intr, int h, int w) {
  pose.validate();
  Tensor<float> rgb(Shape4{1, 3, h, w});
  Tensor<float> depth(Shape4{1, 1, h, w});
  Eigen::Matrix3d Rt = pose.rotation.transpose();
  Eigen::Vector3d origin = -(Rt * pose.translation);  // camera center, world
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      Eigen::Vector3d d_cam{(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy,
                            1.0};
      Eigen::Vector3d d = Rt * d_cam;  // param s along d equals camera depth
      double best_s = std::numeric_limits<double>::infinity();
      Eigen::Vector3d albedo = sc.background_albedo;
      Eigen::Vector3d normal{0, 0, -1};
      if (d.z() > 1e-9) {
        double s = (sc.background_depth - origin.z()) / d.z();
        if (s > 0) best_s = s;
      }
      for (const auto& r : sc.rects) {
        if (std::abs(d.z()) < 1e-9) continue;
        double s = (r.depth - origin.z()) / d.z();
        if (s <= 0 || s >= best_s) continue;
        Eigen::Vector3d p = origin + s * d;
        if (p.x() >= r.corner.x() && p.x() <= r.corner.x() + r.extent.x() &&
            p.y() >= r.corner.y() && p.y() <= r.corner.y() + r.extent.y()) {
          best_s = s;
          albedo = r.albedo;
          normal = {0, 0, -1};
        }
      }
      for (const auto& sp : sc.spheres) {
        Eigen::Vector3d oc = origin - sp.center;
        double a = d.squaredNorm();
        double b = 2.0 * oc.dot(d);
        double cq = oc.squaredNorm() - sp.radius * sp.radius;
        double disc = b * b - 4 * a * cq;
        if (disc < 0) continue;
        double sq = std::sqrt(disc);
        double s = (-b - sq) / (2 * a);
        if (s <= 0) s = (-b + sq) / (2 * a);
        if (s <= 0 || s >= best_s) continue;
        best_s = s;
        Eigen::Vector3d p = origin + s * d;
        normal = (p - sp.center).normalized();
        albedo = sp.albedo;
      }
      double shade = 0.3 + 0.7 * std::max(0.0, normal.dot(-sc.light));
      for (int c = 0; c < 3; ++c)
        rgb.at(0, c, y, x) =
            static_cast<float>(std::clamp(albedo(c) * shade, 0.0, 1.0));
      depth.at(0, 0, y, x) = static_cast<float>(best_s);
    }
  return {rgb, depth};
}

// Uniform random pixel subset without replacement.
inline Tensor<float> sample_sparse(const Tensor<float>& dense, int n_points,
                                   std::uint64_t seed) {
  const Shape4& s = dense.shape();
  std::int64_t total = std::int64_t(s[2]) * s[3];
  require(n_points >= 0 && n_points <= total,
          "sample_sparse: point budget exceeds pixel count");
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::vector<std::int64_t> idx(static_cast<size_t>(total));
  for (std::int64_t i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < n_points; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, total - 1);
    std::swap(idx[static_cast<size_t>(i)],
              idx[static_cast<size_t>(pick(rng))]);
  }
  Tensor<float> sparse(Shape4{s[0], 1, s[2], s[3]});
  for (int i = 0; i < n_points; ++i) {
    std::int64_t p = idx[static_cast<size_t>(i)];
    sparse.data()[p] = dense.data()[p];
  }
  return sparse;
}

inline Pose random_small_pose(std::uint64_t seed, const SynthConfig& cfg) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Eigen::Vector3d axis{uni(rng), uni(rng), uni(rng)};
  if (axis.norm() < 1e-9) axis = {0, 0, 1};
  axis.normalize();
  double angle = uni(rng) * cfg.max_rotation_deg * M_PI / 180.0;
  Pose p;
  p.rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  p.translation = {uni(rng) * cfg.max_translation,
                   uni(rng) * cfg.max_translation,
                   uni(rng) * cfg.max_translation};
  return p;
}

inline Sample make_sample(std::uint64_t seed, const SynthConfig& cfg) {
  Scene sc = generate_scene(seed, cfg.range);
  Sample s;
  s.intr = Intrinsics::canonical(cfg.height, cfg.width);
  s.pose = random_small_pose(seed * 2654435761u + 1, cfg);
  auto [rgb0, gt] = render_view(sc, Pose{}, s.intr, cfg.height, cfg.width);
  auto [rgb1, gt1] = render_view(sc, s.pose, s.intr, cfg.height, cfg.width);
  s.rgb0 = rgb0;
  s.rgb1 = rgb1;
  s.gt = gt;
  s.sparse = sample_sparse(gt, cfg.n_points, seed * 2654435761u + 2);
  return s;
}

inline std::string sample_prefix(const std::filesystem::path& dir, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return (dir / buf).string();
}

inline void write_sample(const std::filesystem::path& dir, int index,
                         const Sample& s) {
  std::filesystem::create_directories(dir);
  std::string pre = sample_prefix(dir, index);
  write_ppm(pre + "_rgb0.ppm", s.rgb0);
  write_ppm(pre + "_rgb1.ppm", s.rgb1);
  write_pfm(pre + "_sparse.pfm", s.sparse);
  write_pfm(pre + "_gt.pfm", s.gt);
  std::ofstream meta(pre + "_meta.txt");
  if (!meta) throw IoError("cannot open " + pre + "_meta.txt for writing");
  meta.precision(17);
  meta << "fx=" << s.intr.fx << "\nfy=" << s.intr.fy << "\ncx=" << s.intr.cx
       << "\ncy=" << s.intr.cy << "\npose=";
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) meta << s.pose.rotation(r, c) << " ";
    meta << s.pose.translation(r);
    if (r < 2) meta << " ";
  }
  meta << "\n";
}

inline Sample read_sample(const std::filesystem::path& dir, int index) {
  std::string pre = sample_prefix(dir, index);
  Sample s;
  s.rgb0 = read_ppm(pre + "_rgb0.ppm");
  s.rgb1 = read_ppm(pre + "_rgb1.ppm");
  s.sparse = read_pfm(pre + "_sparse.pfm");
  s.gt = read_pfm(pre + "_gt.pfm");
  std::ifstream meta(pre + "_meta.txt");
  if (!meta) throw IoError("cannot open " + pre + "_meta.txt");
  std::string line;
  while (std::getline(meta, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    if (key == "fx") s.intr.fx = std::stod(val);
    else if (key == "fy") s.intr.fy = std::stod(val);
    else if (key == "cx") s.intr.cx = std::stod(val);
    else if (key == "cy") s.intr.cy = std::stod(val);
    else if (key == "pose") {
      std::istringstream ps(val);
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) ps >> s.pose.rotation(r, c);
        ps >> s.pose.translation(r);
      }
      if (!ps) throw MalformedHeaderError(pre + "_meta.txt: bad pose line");
    }
  }
  return s;
}

inline int count_samples(const std::filesystem::path& dir) {
  int n = 0;
  while (std::filesystem::exists(sample_prefix(dir, n) + "_meta.txt")) ++n;
  return n;
}

// Deterministic in (seed, config): sample i uses seed + i.
inline void generate_dataset(const std::filesystem::path& root,
                             const std::string& split, int count,
                             std::uint64_t seed, const SynthConfig& cfg) {
  for (int i = 0; i < count; ++i)
    write_sample(root / split, i, make_sample(seed + static_cast<std::uint64_t>(i), cfg));
}

}  // namespace chadet::synth
