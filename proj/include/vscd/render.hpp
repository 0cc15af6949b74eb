#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "vscd/errors.hpp"
#include "vscd/image.hpp"
#include "vscd/rng.hpp"

namespace vscd {

// Column raycaster over a 2-D floor plan. Walls and object footprints stand
// as vertical prisms on a textured floor; a pinhole camera at fixed eye
// height projects them with painter's-algorithm compositing per column, which
// gives pose-dependent occlusion without a 3-D engine.

enum class PrimitiveKind { Rectangle, Ellipse, Triangle };

struct Pose2 {
  double x = 0, y = 0, orientation = 0;
  bool operator==(const Pose2& o) const = default;
};

struct ShapeSpec {
  PrimitiveKind kind = PrimitiveKind::Rectangle;
  double size_a = 0.4;  // half extents (rect/ellipse) or circumradius (triangle)
  double size_b = 0.4;
  double height = 0.6;
  std::array<double, 3> color{0.8, 0.2, 0.2};
};

struct ObjectInstance {
  int id = 0;
  int class_label = 0;
  Pose2 pose;
  ShapeSpec shape;

  double bounding_radius() const {
    return shape.kind == PrimitiveKind::Triangle ? shape.size_a
                                                 : std::hypot(shape.size_a, shape.size_b);
  }
};

struct Wall {  // axis-aligned box footprint, full room height
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct Layout {
  int id = 0;
  double extent = 10.0;  // world is [0, extent]^2
  std::vector<Wall> walls;
  uint64_t texture_seed = 0;
};

struct Illumination {
  double brightness = 1.0;
  double light_dir = 0.8;  // radians in the plan
};

struct CameraPose {
  double x = 0, y = 0, heading = 0;
  double fov = 1.2;  // horizontal, radians
};

namespace render_detail {

constexpr double kWallHeight = 1.0;
constexpr double kEyeHeight = 0.5;
constexpr double kAmbient = 0.55;
constexpr double kDiffuse = 0.45;
constexpr double kFloorShade = 0.92;
constexpr double kMaxDepth = 1e6;

struct Hit {
  double depth = 0;  // perpendicular depth along the camera forward axis
  double nx = 0, ny = 0;
  int entity = -1;  // index into the render list; -1 for walls
  bool is_wall = false;
};

// Ray p(s) = o + s*d against an axis-aligned box; slab method.
inline std::optional<std::pair<double, std::pair<double, double>>> ray_box(
    double ox, double oy, double dx, double dy, const Wall& b) {
  double tmin = -kMaxDepth, tmax = kMaxDepth;
  double nx = 0, ny = 0;
  if (std::fabs(dx) < 1e-12) {
    if (ox < b.x0 || ox > b.x1) return std::nullopt;
  } else {
    double t1 = (b.x0 - ox) / dx, t2 = (b.x1 - ox) / dx;
    double n = -1;
    if (t1 > t2) {
      std::swap(t1, t2);
      n = 1;
    }
    if (t1 > tmin) {
      tmin = t1;
      nx = n;
      ny = 0;
    }
    tmax = std::min(tmax, t2);
  }
  if (std::fabs(dy) < 1e-12) {
    if (oy < b.y0 || oy > b.y1) return std::nullopt;
  } else {
    double t1 = (b.y0 - oy) / dy, t2 = (b.y1 - oy) / dy;
    double n = -1;
    if (t1 > t2) {
      std::swap(t1, t2);
      n = 1;
    }
    if (t1 > tmin) {
      tmin = t1;
      nx = 0;
      ny = n;
    }
    tmax = std::min(tmax, t2);
  }
  if (tmax < tmin || tmax < 0) return std::nullopt;
  double t = tmin >= 0 ? tmin : tmax;
  return std::make_pair(t, std::make_pair(nx, ny));
}

inline std::optional<std::pair<double, std::pair<double, double>>> ray_shape(
    double ox, double oy, double dx, double dy, const ObjectInstance& obj) {
  // transform the ray into the object frame
  double c = std::cos(-obj.pose.orientation), s = std::sin(-obj.pose.orientation);
  double lox = ox - obj.pose.x, loy = oy - obj.pose.y;
  double rox = c * lox - s * loy, roy = s * lox + c * loy;
  double rdx = c * dx - s * dy, rdy = s * dx + c * dy;
  const double a = obj.shape.size_a, b = obj.shape.size_b;

  auto to_world_normal = [&](double nx, double ny) {
    double cw = std::cos(obj.pose.orientation), sw = std::sin(obj.pose.orientation);
    double wx = cw * nx - sw * ny, wy = sw * nx + cw * ny;
    double len = std::hypot(wx, wy);
    return std::make_pair(wx / len, wy / len);
  };

  switch (obj.shape.kind) {
    case PrimitiveKind::Rectangle: {
      Wall box{-a, -b, a, b};
      auto hit = ray_box(rox, roy, rdx, rdy, box);
      if (!hit) return std::nullopt;
      auto [t, n] = *hit;
      if (t < 0) return std::nullopt;
      auto [wx, wy] = to_world_normal(n.first, n.second);
      return std::make_pair(t, std::make_pair(wx, wy));
    }
    case PrimitiveKind::Ellipse: {
      // scale to a unit circle; the ray parameter is affine-invariant
      double sox = rox / a, soy = roy / b, sdx = rdx / a, sdy = rdy / b;
      double qa = sdx * sdx + sdy * sdy;
      double qb = 2 * (sox * sdx + soy * sdy);
      double qc = sox * sox + soy * soy - 1.0;
      double disc = qb * qb - 4 * qa * qc;
      if (disc < 0 || qa < 1e-18) return std::nullopt;
      double sq = std::sqrt(disc);
      double t = (-qb - sq) / (2 * qa);
      if (t < 0) t = (-qb + sq) / (2 * qa);
      if (t < 0) return std::nullopt;
      double hx = rox + t * rdx, hy = roy + t * rdy;
      auto [wx, wy] = to_world_normal(hx / (a * a), hy / (b * b));
      return std::make_pair(t, std::make_pair(wx, wy));
    }
    case PrimitiveKind::Triangle: {
      // equilateral triangle with circumradius a, apex along +x
      std::array<std::pair<double, double>, 3> v;
      for (int i = 0; i < 3; ++i) {
        double ang = 2.0 * M_PI * i / 3.0;
        v[static_cast<size_t>(i)] = {a * std::cos(ang), a * std::sin(ang)};
      }
      double best = kMaxDepth;
      double bnx = 0, bny = 0;
      for (int i = 0; i < 3; ++i) {
        auto [x1, y1] = v[static_cast<size_t>(i)];
        auto [x2, y2] = v[static_cast<size_t>((i + 1) % 3)];
        double ex = x2 - x1, ey = y2 - y1;
        double denom = rdx * ey - rdy * ex;
        if (std::fabs(denom) < 1e-14) continue;
        double t = ((x1 - rox) * ey - (y1 - roy) * ex) / denom;
        double u = (rdx * (y1 - roy) - rdy * (x1 - rox)) / (-denom);
        if (t >= 0 && u >= 0 && u <= 1 && t < best) {
          best = t;
          bnx = ey;
          bny = -ex;  // outward for counter-clockwise winding
        }
      }
      if (best >= kMaxDepth) return std::nullopt;
      auto [wx, wy] = to_world_normal(bnx, bny);
      return std::make_pair(best, std::make_pair(wx, wy));
    }
  }
  return std::nullopt;
}

inline double hash01(uint64_t seed, int64_t ix, int64_t iy) {
  uint64_t h = seed;
  h = fnv1a64(&ix, sizeof(ix), h);
  h = fnv1a64(&iy, sizeof(iy), h);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline std::array<double, 3> floor_color(const Layout& layout, double x, double y) {
  int64_t cx = static_cast<int64_t>(std::floor(x * 2.0));
  int64_t cy = static_cast<int64_t>(std::floor(y * 2.0));
  double base = ((cx + cy) & 1) ? 0.40 : 0.52;
  base += 0.12 * hash01(layout.texture_seed, cx, cy);
  int64_t fx = static_cast<int64_t>(std::floor(x * 13.0));
  int64_t fy = static_cast<int64_t>(std::floor(y * 13.0));
  base += 0.05 * (hash01(layout.texture_seed ^ 0x9e37u, fx, fy) - 0.5);
  return {base * 0.9, base * 0.85, base * 0.8};
}

inline uint8_t quantize(double v) {
  int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  return static_cast<uint8_t>(std::clamp(q, 0, 255));
}

}  // namespace render_detail

// Renders the plan through a camera pose. `entities` are the object prisms to
// draw; when `mask_mode` is set, output is a change mask: entities flagged in
// `changed` paint white, walls paint black occluders, background is black.
inline Image render_view(const Layout& layout, const std::vector<ObjectInstance>& entities,
                         const Illumination& illum, const CameraPose& cam, int frame_h,
                         int frame_w, bool mask_mode = false,
                         const std::vector<bool>* changed = nullptr) {
  using namespace render_detail;
  Image img(frame_h, frame_w, mask_mode ? 1 : 3);
  const double fx = std::cos(cam.heading), fy = std::sin(cam.heading);
  const double rx = -fy, ry = fx;
  const double half_span = std::tan(cam.fov / 2.0);
  const double focal_px = (frame_w / 2.0) / half_span;
  const double horizon = frame_h / 2.0;
  const double lx = std::cos(illum.light_dir), ly = std::sin(illum.light_dir);

  for (int u = 0; u < frame_w; ++u) {
    double cx = (2.0 * (u + 0.5) / frame_w - 1.0) * half_span;
    double dx = fx + rx * cx, dy = fy + ry * cx;  // s along this ray == perp depth

    // background: sky above the horizon, floor cast below it
    if (!mask_mode) {
      for (int yx = 0; yx < frame_h; ++yx) {
        double row = yx + 0.5;
        if (row < horizon) {
          double fade = 0.75 + 0.15 * (row / horizon);
          img.at(yx, u, 0) = quantize(0.62 * fade * illum.brightness);
          img.at(yx, u, 1) = quantize(0.66 * fade * illum.brightness);
          img.at(yx, u, 2) = quantize(0.72 * fade * illum.brightness);
        } else {
          double depth = kEyeHeight * focal_px / (row - horizon);
          double wx = cam.x + dx * depth, wy = cam.y + dy * depth;
          auto col = floor_color(layout, wx, wy);
          double att = 1.0 / (1.0 + 0.02 * depth * depth);
          for (int c = 0; c < 3; ++c)
            img.at(yx, u, c) = quantize(col[static_cast<size_t>(c)] * kFloorShade * att *
                                        illum.brightness);
        }
      }
    }

    // gather hits, then paint far-to-near
    std::vector<Hit> hits;
    for (size_t i = 0; i < layout.walls.size(); ++i) {
      auto hit = ray_box(cam.x, cam.y, dx, dy, layout.walls[i]);
      if (hit && hit->first > 1e-9)
        hits.push_back(Hit{hit->first, hit->second.first, hit->second.second, -1, true});
    }
    for (size_t i = 0; i < entities.size(); ++i) {
      auto hit = ray_shape(cam.x, cam.y, dx, dy, entities[i]);
      if (hit && hit->first > 1e-9)
        hits.push_back(
            Hit{hit->first, hit->second.first, hit->second.second, static_cast<int>(i), false});
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.depth > b.depth; });

    for (const Hit& h : hits) {
      double top_h = h.is_wall ? kWallHeight : entities[static_cast<size_t>(h.entity)].shape.height;
      int y_top = static_cast<int>(std::ceil(horizon - (top_h - kEyeHeight) * focal_px / h.depth - 0.5));
      int y_bot = static_cast<int>(std::floor(horizon + kEyeHeight * focal_px / h.depth - 0.5));
      y_top = std::max(y_top, 0);
      y_bot = std::min(y_bot, frame_h - 1);
      if (mask_mode) {
        uint8_t v = (!h.is_wall && changed && (*changed)[static_cast<size_t>(h.entity)]) ? 255 : 0;
        for (int yy = y_top; yy <= y_bot; ++yy) img.at(yy, u) = v;
      } else {
        std::array<double, 3> base =
            h.is_wall ? std::array<double, 3>{0.58, 0.55, 0.50}
                      : entities[static_cast<size_t>(h.entity)].shape.color;
        double shade = kAmbient + kDiffuse * std::max(0.0, h.nx * lx + h.ny * ly);
        double att = 1.0 / (1.0 + 0.02 * h.depth * h.depth);
        for (int c = 0; c < 3; ++c) {
          double v = base[static_cast<size_t>(c)] * shade * att * illum.brightness;
          for (int yy = y_top; yy <= y_bot; ++yy) img.at(yy, u, c) = quantize(v);
        }
      }
    }
  }
  return img;
}

}  // namespace vscd
