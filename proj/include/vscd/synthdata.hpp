#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vscd/errors.hpp"
#include "vscd/image.hpp"
#include "vscd/render.hpp"
#include "vscd/rng.hpp"

namespace vscd {

using json = nlohmann::json;

struct Scene {
  int layout_id = 0;
  int scene_index = 0;
  std::vector<ObjectInstance> instances;
  Illumination illum;
};

struct Trajectory {
  std::vector<CameraPose> poses;
  int frame_count() const { return static_cast<int>(poses.size()); }
};

struct VideoClip {
  std::vector<Image> frames;
  std::string source_id;
};

// Occupancy-level change set; a moved instance shows up on both sides.
struct ChangeSet {
  std::vector<ObjectInstance> appeared;
  std::vector<ObjectInstance> disappeared;
  int count() const { return static_cast<int>(appeared.size() + disappeared.size()); }
};

struct ChangeBin {
  int lo = 0, hi = 0;
  double weight = 1.0;
};

struct GenConfig {
  int layouts = 6;
  int scenes_per_layout = 4;
  int frame_h = 128, frame_w = 128;
  int traj_len_min = 24, traj_len_max = 40;
  std::vector<ChangeBin> change_bins{{2, 4, 1.0}, {5, 8, 1.0}, {9, 12, 1.0}};
  int permanent_min = 2, permanent_max = 4;
  int max_objects_per_layout = 30;
  double move_fraction = 0.3;
  double brightness_min = 0.6, brightness_max = 1.0;
  double camera_fov = 1.2;
  int test_layouts = 2;
  uint64_t seed = 0;

  void validate() const {
    if (layouts < 1) throw ConfigError("gen: layouts must be >= 1");
    if (scenes_per_layout < 2) throw ConfigError("gen: need at least 2 scenes per layout");
    if (frame_h < 16 || frame_w < 16 || frame_h != frame_w)
      throw ConfigError("gen: frames must be square and >= 16");
    if (traj_len_min < 1 || traj_len_max < traj_len_min) throw ConfigError("gen: bad trajectory lengths");
    if (change_bins.empty()) throw ConfigError("gen: need at least one change bin");
    for (const auto& b : change_bins)
      if (b.lo < 0 || b.hi < b.lo || b.weight < 0) throw ConfigError("gen: malformed change bin");
    if (test_layouts < 0 || test_layouts > layouts) throw ConfigError("gen: bad test_layouts");
    if (brightness_min <= 0 || brightness_max < brightness_min)
      throw ConfigError("gen: bad brightness range");
  }
};

// ---- core set operations ----

inline bool same_occupancy(const ObjectInstance& a, const ObjectInstance& b) {
  return a.id == b.id && a.pose == b.pose;
}

// Occupancy-level symmetric difference; relocation = disappearance at the old
// pose plus appearance at the new pose.
inline ChangeSet symmetric_difference(const Scene& ref, const Scene& query) {
  if (ref.layout_id != query.layout_id)
    throw InputError("symmetric_difference: scenes from different layouts");
  ChangeSet cs;
  for (const auto& q : query.instances) {
    bool found = false;
    for (const auto& r : ref.instances)
      if (same_occupancy(q, r)) {
        found = true;
        break;
      }
    if (!found) cs.appeared.push_back(q);
  }
  for (const auto& r : ref.instances) {
    bool found = false;
    for (const auto& q : query.instances)
      if (same_occupancy(r, q)) {
        found = true;
        break;
      }
    if (!found) cs.disappeared.push_back(r);
  }
  return cs;
}

// Directed cycle 0->1, 1->2, ..., n-1->0: every scene is the query exactly once.
inline std::vector<std::pair<int, int>> make_pairs(int n_scenes) {
  if (n_scenes < 2) throw ConfigError("make_pairs: need at least 2 scenes");
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n_scenes; ++i) out.emplace_back(i, (i + 1) % n_scenes);
  return out;
}

// ---- rendering entry points ----

inline Image render_frame(const Layout& layout, const Scene& scene, const CameraPose& cam,
                          int frame_h, int frame_w) {
  return render_view(layout, scene.instances, scene.illum, cam, frame_h, frame_w);
}

inline VideoClip render_clip(const Layout& layout, const Scene& scene, const Trajectory& traj,
                             int frame_h, int frame_w, const std::string& source_id) {
  VideoClip clip;
  clip.source_id = source_id;
  for (const auto& pose : traj.poses)
    clip.frames.push_back(render_frame(layout, scene, pose, frame_h, frame_w));
  return clip;
}

// Replays the query trajectory over walls + changed occupancies only; the
// visible changed surfaces paint white, static geometry occludes.
inline std::vector<Image> render_change_masks(const Layout& layout, const ChangeSet& delta,
                                              const Trajectory& query_traj, int frame_h,
                                              int frame_w) {
  std::vector<ObjectInstance> entities;
  for (const auto& o : delta.appeared) entities.push_back(o);
  for (const auto& o : delta.disappeared) entities.push_back(o);
  std::vector<bool> changed(entities.size(), true);
  Illumination flat;
  std::vector<Image> masks;
  for (const auto& pose : query_traj.poses)
    masks.push_back(render_view(layout, entities, flat, pose, frame_h, frame_w, true, &changed));
  return masks;
}

// ---- procedural content ----

namespace gen_detail {

inline Layout build_layout(int layout_id, Rng& rng) {
  Layout lay;
  lay.id = layout_id;
  lay.extent = 10.0;
  lay.texture_seed = rng.next_u64();
  const double e = lay.extent, th = 0.3;
  lay.walls.push_back({0, 0, e, th});
  lay.walls.push_back({0, e - th, e, e});
  lay.walls.push_back({0, 0, th, e});
  lay.walls.push_back({e - th, 0, e, e});
  int interior = rng.uniform_int(1, 3);
  for (int i = 0; i < interior; ++i) {
    bool horizontal = rng.uniform() < 0.5;
    double len = rng.uniform(1.5, 4.0);
    double cx = rng.uniform(2.0, e - 2.0), cy = rng.uniform(2.0, e - 2.0);
    if (horizontal)
      lay.walls.push_back({cx - len / 2, cy - th / 2, cx + len / 2, cy + th / 2});
    else
      lay.walls.push_back({cx - th / 2, cy - len / 2, cx + th / 2, cy + len / 2});
  }
  return lay;
}

inline double wall_clearance(const Layout& lay, double x, double y) {
  double best = 1e9;
  for (const auto& w : lay.walls) {
    double dx = std::max({w.x0 - x, 0.0, x - w.x1});
    double dy = std::max({w.y0 - y, 0.0, y - w.y1});
    best = std::min(best, std::hypot(dx, dy));
  }
  return best;
}

inline ShapeSpec sample_shape(int class_label, Rng& rng) {
  ShapeSpec s;
  s.kind = static_cast<PrimitiveKind>(class_label % 3);
  s.size_a = rng.uniform(0.30, 0.52);
  s.size_b = s.kind == PrimitiveKind::Triangle ? s.size_a : rng.uniform(0.30, 0.52);
  s.height = rng.uniform(0.35, 0.85);
  static constexpr std::array<std::array<double, 3>, 4> hues{{{0.85, 0.20, 0.15},
                                                              {0.15, 0.70, 0.25},
                                                              {0.20, 0.35, 0.85},
                                                              {0.85, 0.75, 0.15}}};
  auto base = hues[static_cast<size_t>((class_label / 3) % 4)];
  for (int c = 0; c < 3; ++c)
    s.color[static_cast<size_t>(c)] =
        std::clamp(base[static_cast<size_t>(c)] + rng.uniform(-0.08, 0.08), 0.05, 0.95);
  return s;
}

// Global non-overlapping placement keeps every scene of the layout valid.
inline std::optional<Pose2> place_object(const Layout& lay, double radius,
                                         const std::vector<std::pair<Pose2, double>>& taken,
                                         Rng& rng) {
  for (int attempt = 0; attempt < 500; ++attempt) {
    Pose2 p;
    p.x = rng.uniform(1.0, lay.extent - 1.0);
    p.y = rng.uniform(1.0, lay.extent - 1.0);
    p.orientation = rng.uniform(0.0, 6.283185307179586);
    if (wall_clearance(lay, p.x, p.y) < radius + 0.25) continue;
    bool ok = true;
    for (const auto& [q, r] : taken)
      if (std::hypot(p.x - q.x, p.y - q.y) < radius + r + 0.1) {
        ok = false;
        break;
      }
    if (ok) return p;
  }
  return std::nullopt;
}

inline Trajectory sample_trajectory(const Layout& lay, int frames, double fov, Rng& rng) {
  Trajectory tr;
  CameraPose cam;
  cam.fov = fov;
  for (int attempt = 0; attempt < 100; ++attempt) {
    cam.x = rng.uniform(1.2, lay.extent - 1.2);
    cam.y = rng.uniform(1.2, lay.extent - 1.2);
    if (wall_clearance(lay, cam.x, cam.y) > 0.8) break;
  }
  cam.heading = rng.uniform(0.0, 6.283185307179586);
  double wx = rng.uniform(1.5, lay.extent - 1.5), wy = rng.uniform(1.5, lay.extent - 1.5);
  const double speed = 0.22;
  for (int t = 0; t < frames; ++t) {
    tr.poses.push_back(cam);
    if (std::hypot(wx - cam.x, wy - cam.y) < 1.2) {
      wx = rng.uniform(1.5, lay.extent - 1.5);
      wy = rng.uniform(1.5, lay.extent - 1.5);
    }
    double target = std::atan2(wy - cam.y, wx - cam.x);
    double diff = std::remainder(target - cam.heading, 6.283185307179586);
    cam.heading += std::clamp(diff, -0.25, 0.25) + rng.normal(0.0, 0.05);
    double nx = cam.x + speed * std::cos(cam.heading);
    double ny = cam.y + speed * std::sin(cam.heading);
    for (int tries = 0; tries < 8 && wall_clearance(lay, nx, ny) < 0.6; ++tries) {
      cam.heading += 0.787;
      nx = cam.x + speed * std::cos(cam.heading);
      ny = cam.y + speed * std::sin(cam.heading);
    }
    if (wall_clearance(lay, nx, ny) >= 0.6) {
      cam.x = nx;
      cam.y = ny;
    }
  }
  return tr;
}

// One object lifetime on the scene cycle: appears at pair `appear_pair` and
// disappears at pair `vanish_pair`, i.e. present in scenes (appear, vanish].
struct Arc {
  int appear_pair = 0;
  int vanish_pair = 0;
  ObjectInstance obj;

  bool present_in(int scene, int n) const {
    int offset = (scene - (appear_pair + 1) % n + n) % n;
    int span = (vanish_pair - appear_pair + n) % n;
    return offset < span;
  }
};

// Greedy endpoint matching: realizes exact per-pair change counts as arcs.
// Throws when the requested counts cannot be realized (self-loops would be
// required, which correspond to no observable change).
inline std::vector<std::pair<int, int>> match_endpoints(std::vector<int> degree) {
  const int n = static_cast<int>(degree.size());
  std::vector<std::pair<int, int>> edges;
  while (true) {
    int first = -1, second = -1;
    for (int j = 0; j < n; ++j)
      if (degree[static_cast<size_t>(j)] > 0 &&
          (first < 0 || degree[static_cast<size_t>(j)] > degree[static_cast<size_t>(first)]))
        first = j;
    if (first < 0) break;
    for (int j = 0; j < n; ++j)
      if (j != first && degree[static_cast<size_t>(j)] > 0 &&
          (second < 0 || degree[static_cast<size_t>(j)] > degree[static_cast<size_t>(second)]))
        second = j;
    if (second < 0)
      throw ConfigError("unreachable change strata: per-pair change counts cannot close the cycle");
    --degree[static_cast<size_t>(first)];
    --degree[static_cast<size_t>(second)];
    edges.emplace_back(first, second);
  }
  return edges;
}

}  // namespace gen_detail

// ---- serialization ----

inline json to_json(const Pose2& p) { return json{{"x", p.x}, {"y", p.y}, {"o", p.orientation}}; }
inline Pose2 pose_from_json(const json& j) { return Pose2{j.at("x"), j.at("y"), j.at("o")}; }

inline json to_json(const ShapeSpec& s) {
  return json{{"kind", static_cast<int>(s.kind)}, {"a", s.size_a},      {"b", s.size_b},
              {"height", s.height},               {"r", s.color[0]},    {"g", s.color[1]},
              {"bcol", s.color[2]}};
}
inline ShapeSpec shape_from_json(const json& j) {
  ShapeSpec s;
  s.kind = static_cast<PrimitiveKind>(j.at("kind").get<int>());
  s.size_a = j.at("a");
  s.size_b = j.at("b");
  s.height = j.at("height");
  s.color = {j.at("r"), j.at("g"), j.at("bcol")};
  return s;
}

inline json to_json(const ObjectInstance& o) {
  return json{{"id", o.id}, {"class", o.class_label}, {"pose", to_json(o.pose)},
              {"shape", to_json(o.shape)}};
}
inline ObjectInstance instance_from_json(const json& j) {
  ObjectInstance o;
  o.id = j.at("id");
  o.class_label = j.at("class");
  o.pose = pose_from_json(j.at("pose"));
  o.shape = shape_from_json(j.at("shape"));
  return o;
}

inline json to_json(const Scene& s) {
  json inst = json::array();
  for (const auto& o : s.instances) inst.push_back(to_json(o));
  return json{{"layout_id", s.layout_id},
              {"scene_index", s.scene_index},
              {"instances", inst},
              {"brightness", s.illum.brightness},
              {"light_dir", s.illum.light_dir}};
}
inline Scene scene_from_json(const json& j) {
  Scene s;
  s.layout_id = j.at("layout_id");
  s.scene_index = j.at("scene_index");
  for (const auto& o : j.at("instances")) s.instances.push_back(instance_from_json(o));
  s.illum.brightness = j.at("brightness");
  s.illum.light_dir = j.at("light_dir");
  return s;
}

inline json to_json(const Layout& l) {
  json walls = json::array();
  for (const auto& w : l.walls) walls.push_back(json::array({w.x0, w.y0, w.x1, w.y1}));
  return json{{"id", l.id}, {"extent", l.extent}, {"walls", walls},
              {"texture_seed", l.texture_seed}};
}
inline Layout layout_from_json(const json& j) {
  Layout l;
  l.id = j.at("id");
  l.extent = j.at("extent");
  for (const auto& w : j.at("walls")) l.walls.push_back(Wall{w[0], w[1], w[2], w[3]});
  l.texture_seed = j.at("texture_seed");
  return l;
}

inline json to_json(const Trajectory& t) {
  json poses = json::array();
  for (const auto& p : t.poses) poses.push_back(json::array({p.x, p.y, p.heading, p.fov}));
  return poses;
}
inline Trajectory trajectory_from_json(const json& j) {
  Trajectory t;
  for (const auto& p : j) t.poses.push_back(CameraPose{p[0], p[1], p[2], p[3]});
  return t;
}

// ---- dataset on disk ----

struct PairRecord {
  int pair_id = 0;
  int layout_id = 0;
  int ref_scene = 0, query_scene = 0;
  int n_changes = 0;
  int t_ref = 0, t_query = 0;
  std::string split;
  double viewpoint_overlap = 0.0;
  uint64_t content_hash = 0;
};

struct DatasetPair {
  PairRecord meta;
  Layout layout;
  Scene ref_scene, query_scene;
  Trajectory ref_traj, query_traj;
  VideoClip ref, query;
  std::vector<Image> masks;
};

inline std::string pair_dir_name(int pair_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair_%05d", pair_id);
  return buf;
}

inline std::string frame_file_name(const char* stem, int t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05d.%s", stem, t, ext);
  return buf;
}

inline double viewpoint_overlap_stat(const Trajectory& ref, const Trajectory& query) {
  if (query.poses.empty() || ref.poses.empty()) return 0.0;
  int hits = 0;
  for (const auto& q : query.poses) {
    bool close = false;
    for (const auto& r : ref.poses) {
      double d = std::hypot(q.x - r.x, q.y - r.y);
      double dh = std::fabs(std::remainder(q.heading - r.heading, 6.283185307179586));
      if (d < 2.5 && dh < 1.3) {
        close = true;
        break;
      }
    }
    if (close) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(query.poses.size());
}

inline uint64_t hash_images(const std::vector<Image>& images, uint64_t h = 0xcbf29ce484222325ULL) {
  for (const auto& img : images) h = fnv1a64(img.data.data(), img.data.size(), h);
  return h;
}

// Generation result handed back to the CLI for summary printing.
struct GenResult {
  std::string manifest_hash;
  int pairs = 0;
  std::map<std::string, int> change_histogram;
};

GenResult generate_dataset(const GenConfig& cfg, const std::string& out_dir);

std::vector<PairRecord> load_manifest(const std::string& dataset_dir, json* full = nullptr);
DatasetPair load_pair(const std::string& dataset_dir, int pair_id, bool load_frames = true);

// ---- implementation ----

inline GenResult generate_dataset(const GenConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  using namespace gen_detail;
  cfg.validate();

  const int n = cfg.scenes_per_layout;
  const int total_pairs = cfg.layouts * n;

  // Assign a change bin to every (layout, pair) slot by largest-remainder
  // apportionment, then a concrete count within each bin.
  double weight_sum = 0;
  for (const auto& b : cfg.change_bins) weight_sum += b.weight;
  if (weight_sum <= 0) throw ConfigError("gen: change bin weights sum to zero");
  std::vector<int> bin_counts(cfg.change_bins.size(), 0);
  std::vector<double> remainders(cfg.change_bins.size());
  int assigned = 0;
  for (size_t i = 0; i < cfg.change_bins.size(); ++i) {
    double exact = cfg.change_bins[i].weight / weight_sum * total_pairs;
    bin_counts[i] = static_cast<int>(std::floor(exact));
    remainders[i] = exact - bin_counts[i];
    assigned += bin_counts[i];
  }
  while (assigned < total_pairs) {
    size_t best = 0;
    for (size_t i = 1; i < remainders.size(); ++i)
      if (remainders[i] > remainders[best]) best = i;
    ++bin_counts[best];
    remainders[best] = -1;
    ++assigned;
  }
  std::vector<int> slot_bins;
  for (size_t i = 0; i < bin_counts.size(); ++i)
    slot_bins.insert(slot_bins.end(), static_cast<size_t>(bin_counts[i]), static_cast<int>(i));
  Rng master(cfg.seed);
  Rng shuffle_rng = master.fork(0x5105);
  for (int i = static_cast<int>(slot_bins.size()) - 1; i > 0; --i)
    std::swap(slot_bins[static_cast<size_t>(i)],
              slot_bins[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

  // ---- plan all layouts up front so invalid strata fail before any IO ----
  struct LayoutPlan {
    Layout layout;
    std::vector<Scene> scenes;
    std::vector<Trajectory> trajectories;
    std::vector<int> pair_changes;
    std::vector<int> pair_bins;
  };
  std::vector<LayoutPlan> plans;

  for (int li = 0; li < cfg.layouts; ++li) {
    Rng lrng = master.fork(1000 + static_cast<uint64_t>(li));
    LayoutPlan plan;
    plan.layout = build_layout(li, lrng);

    plan.pair_bins.assign(static_cast<size_t>(n), 0);
    plan.pair_changes.assign(static_cast<size_t>(n), 0);
    for (int j = 0; j < n; ++j) {
      int bin = slot_bins[static_cast<size_t>(li * n + j)];
      plan.pair_bins[static_cast<size_t>(j)] = bin;
      const auto& b = cfg.change_bins[static_cast<size_t>(bin)];
      plan.pair_changes[static_cast<size_t>(j)] = lrng.uniform_int(b.lo, b.hi);
    }
    // Arc realizability: the endpoint total must be even and no single pair
    // may demand more changes than all others combined (a self-loop arc has
    // no observable change). Rebalance within the assigned bins only.
    auto bin_of = [&](int j) -> const ChangeBin& {
      return cfg.change_bins[static_cast<size_t>(plan.pair_bins[static_cast<size_t>(j)])];
    };
    for (int guard = 0;; ++guard) {
      if (guard > 1000)
        throw ConfigError("unreachable change strata: cannot realize per-pair counts on the cycle");
      int total = 0, mx = 0;
      for (int j = 0; j < n; ++j) {
        total += plan.pair_changes[static_cast<size_t>(j)];
        if (plan.pair_changes[static_cast<size_t>(j)] >
            plan.pair_changes[static_cast<size_t>(mx)])
          mx = j;
      }
      int others = total - plan.pair_changes[static_cast<size_t>(mx)];
      bool balanced = plan.pair_changes[static_cast<size_t>(mx)] <= others || total == 0;
      if (balanced && total % 2 == 0) break;
      bool moved = false;
      if (!balanced) {
        for (int j = 0; j < n && !moved; ++j)
          if (j != mx && plan.pair_changes[static_cast<size_t>(j)] < bin_of(j).hi) {
            ++plan.pair_changes[static_cast<size_t>(j)];
            moved = true;
          }
        if (!moved && plan.pair_changes[static_cast<size_t>(mx)] > bin_of(mx).lo) {
          --plan.pair_changes[static_cast<size_t>(mx)];
          moved = true;
        }
      } else {  // parity only
        for (int j = 0; j < n && !moved; ++j) {
          if (plan.pair_changes[static_cast<size_t>(j)] + 1 <= bin_of(j).hi &&
              (j == mx || plan.pair_changes[static_cast<size_t>(j)] + 1 <= others)) {
            ++plan.pair_changes[static_cast<size_t>(j)];
            moved = true;
          } else if (plan.pair_changes[static_cast<size_t>(j)] - 1 >= bin_of(j).lo) {
            --plan.pair_changes[static_cast<size_t>(j)];
            moved = true;
          }
        }
      }
      if (!moved)
        throw ConfigError("unreachable change strata: cannot realize per-pair counts on the cycle");
    }
    auto edges = match_endpoints(plan.pair_changes);

    // materialize arcs as placed objects
    int n_permanent = lrng.uniform_int(cfg.permanent_min, cfg.permanent_max);
    if (n_permanent + static_cast<int>(edges.size()) > cfg.max_objects_per_layout)
      throw ConfigError("unreachable change strata: required objects exceed max_objects_per_layout");

    std::vector<std::pair<Pose2, double>> taken;
    std::vector<ObjectInstance> permanents;
    int next_id = 0;
    auto make_object = [&](int class_label) -> ObjectInstance {
      ObjectInstance o;
      o.id = next_id++;
      o.class_label = class_label;
      o.shape = sample_shape(class_label, lrng);
      auto pose = place_object(plan.layout, o.bounding_radius(), taken, lrng);
      if (!pose)
        throw ConfigError("unreachable change strata: object placement failed (layout too dense)");
      o.pose = *pose;
      taken.emplace_back(*pose, o.bounding_radius());
      return o;
    };
    for (int i = 0; i < n_permanent; ++i) permanents.push_back(make_object(lrng.uniform_int(0, 11)));

    std::vector<Arc> arcs;
    for (auto [j1, j2] : edges) {
      Arc arc;
      if (lrng.uniform() < 0.5) {
        arc.appear_pair = j1;
        arc.vanish_pair = j2;
      } else {
        arc.appear_pair = j2;
        arc.vanish_pair = j1;
      }
      arc.obj = make_object(lrng.uniform_int(0, 11));
      arcs.push_back(arc);
    }

    // merge (disappear@j, appear@j) arc pairs into relocations of one id
    for (int j = 0; j < n; ++j) {
      std::vector<Arc*> appearing, vanishing;
      for (auto& a : arcs) {
        if (a.appear_pair == j) appearing.push_back(&a);
        if (a.vanish_pair == j) vanishing.push_back(&a);
      }
      for (size_t i = 0; i < appearing.size() && i < vanishing.size(); ++i) {
        if (appearing[i] == vanishing[i]) continue;
        if (lrng.uniform() < cfg.move_fraction) {
          appearing[i]->obj.id = vanishing[i]->obj.id;
          appearing[i]->obj.class_label = vanishing[i]->obj.class_label;
          appearing[i]->obj.shape = vanishing[i]->obj.shape;
        }
      }
    }

    for (int si = 0; si < n; ++si) {
      Scene sc;
      sc.layout_id = li;
      sc.scene_index = si;
      sc.illum.brightness = lrng.uniform(cfg.brightness_min, cfg.brightness_max);
      sc.illum.light_dir = lrng.uniform(0.0, 6.283185307179586);
      sc.instances = permanents;
      for (const auto& a : arcs)
        if (a.present_in(si, n)) sc.instances.push_back(a.obj);
      plan.scenes.push_back(std::move(sc));
      plan.trajectories.push_back(sample_trajectory(
          plan.layout, lrng.uniform_int(cfg.traj_len_min, cfg.traj_len_max), cfg.camera_fov, lrng));
    }

    // the arc algebra must reproduce the planned counts exactly
    for (int j = 0; j < n; ++j) {
      auto delta = symmetric_difference(plan.scenes[static_cast<size_t>(j)],
                                        plan.scenes[static_cast<size_t>((j + 1) % n)]);
      if (delta.count() != plan.pair_changes[static_cast<size_t>(j)])
        throw InputError("internal: arc plan does not reproduce requested change counts");
    }
    plans.push_back(std::move(plan));
  }

  // ---- render and write ----
  fs::create_directories(fs::path(out_dir) / "pairs");
  json manifest;
  manifest["seed"] = cfg.seed;
  manifest["frame_h"] = cfg.frame_h;
  manifest["frame_w"] = cfg.frame_w;
  manifest["layouts"] = cfg.layouts;
  manifest["scenes_per_layout"] = n;
  json pairs_json = json::array();
  std::map<std::string, int> histogram;

  int pair_id = 0;
  for (int li = 0; li < cfg.layouts; ++li) {
    const auto& plan = plans[static_cast<size_t>(li)];
    std::vector<VideoClip> clips;
    for (int si = 0; si < n; ++si)
      clips.push_back(render_clip(plan.layout, plan.scenes[static_cast<size_t>(si)],
                                  plan.trajectories[static_cast<size_t>(si)], cfg.frame_h,
                                  cfg.frame_w,
                                  "layout" + std::to_string(li) + "_scene" + std::to_string(si)));

    for (auto [ri, qi] : make_pairs(n)) {
      PairRecord rec;
      rec.pair_id = pair_id;
      rec.layout_id = li;
      rec.ref_scene = ri;
      rec.query_scene = qi;
      rec.split = li >= cfg.layouts - cfg.test_layouts ? "test" : "train";

      const Scene& rs = plan.scenes[static_cast<size_t>(ri)];
      const Scene& qs = plan.scenes[static_cast<size_t>(qi)];
      auto delta = symmetric_difference(rs, qs);
      rec.n_changes = delta.count();
      rec.t_ref = plan.trajectories[static_cast<size_t>(ri)].frame_count();
      rec.t_query = plan.trajectories[static_cast<size_t>(qi)].frame_count();
      rec.viewpoint_overlap = viewpoint_overlap_stat(plan.trajectories[static_cast<size_t>(ri)],
                                                     plan.trajectories[static_cast<size_t>(qi)]);
      auto masks = render_change_masks(plan.layout, delta,
                                       plan.trajectories[static_cast<size_t>(qi)], cfg.frame_h,
                                       cfg.frame_w);

      fs::path pdir = fs::path(out_dir) / "pairs" / pair_dir_name(pair_id);
      fs::create_directories(pdir / "ref");
      fs::create_directories(pdir / "query");
      fs::create_directories(pdir / "masks");
      const auto& ref_clip = clips[static_cast<size_t>(ri)];
      const auto& query_clip = clips[static_cast<size_t>(qi)];
      for (int t = 0; t < rec.t_ref; ++t)
        write_ppm((pdir / "ref" / frame_file_name("frame", t, "ppm")).string(),
                  ref_clip.frames[static_cast<size_t>(t)]);
      for (int t = 0; t < rec.t_query; ++t)
        write_ppm((pdir / "query" / frame_file_name("frame", t, "ppm")).string(),
                  query_clip.frames[static_cast<size_t>(t)]);
      for (int t = 0; t < rec.t_query; ++t) {
        Image mask8 = masks[static_cast<size_t>(t)];
        write_pgm((pdir / "masks" / frame_file_name("mask", t, "pgm")).string(), mask8);
      }
      rec.content_hash = hash_images(query_clip.frames, hash_images(ref_clip.frames));
      rec.content_hash = hash_images(masks, rec.content_hash);

      json pj;
      pj["pair_id"] = rec.pair_id;
      pj["layout"] = to_json(plan.layout);
      pj["ref_scene"] = to_json(rs);
      pj["query_scene"] = to_json(qs);
      pj["ref_trajectory"] = to_json(plan.trajectories[static_cast<size_t>(ri)]);
      pj["query_trajectory"] = to_json(plan.trajectories[static_cast<size_t>(qi)]);
      pj["n_changes"] = rec.n_changes;
      pj["t_ref"] = rec.t_ref;
      pj["t_query"] = rec.t_query;
      pj["split"] = rec.split;
      pj["viewpoint_overlap"] = rec.viewpoint_overlap;
      pj["seed"] = cfg.seed;
      {
        std::ofstream f(pdir / "pair.json");
        f << pj.dump(2) << "\n";
      }

      json mrec;
      mrec["pair_id"] = rec.pair_id;
      mrec["layout_id"] = rec.layout_id;
      mrec["ref_scene"] = rec.ref_scene;
      mrec["query_scene"] = rec.query_scene;
      mrec["n_changes"] = rec.n_changes;
      mrec["t_ref"] = rec.t_ref;
      mrec["t_query"] = rec.t_query;
      mrec["split"] = rec.split;
      mrec["viewpoint_overlap"] = rec.viewpoint_overlap;
      mrec["content_hash"] = rec.content_hash;
      pairs_json.push_back(mrec);

      for (size_t bi = 0; bi < cfg.change_bins.size(); ++bi) {
        const auto& b = cfg.change_bins[bi];
        if (rec.n_changes >= b.lo && rec.n_changes <= b.hi) {
          std::string key = "bin" + std::to_string(bi) + "_" + std::to_string(b.lo) + "_" +
                            std::to_string(b.hi);
          ++histogram[key];
          break;
        }
      }
      ++pair_id;
    }
  }

  manifest["pairs"] = pairs_json;
  json hist_json;
  for (const auto& [k, v] : histogram) hist_json[k] = v;
  manifest["change_histogram"] = hist_json;

  std::string canonical = manifest.dump();
  uint64_t mh = fnv1a64(canonical.data(), canonical.size());
  char hex[24];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(mh));
  manifest["manifest_hash"] = hex;
  {
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    f << manifest.dump(2) << "\n";
  }

  GenResult res;
  res.manifest_hash = hex;
  res.pairs = pair_id;
  res.change_histogram = histogram;
  return res;
}

inline std::vector<PairRecord> load_manifest(const std::string& dataset_dir, json* full) {
  std::ifstream f(std::filesystem::path(dataset_dir) / "manifest.json");
  if (!f) throw DataError("load_manifest: missing manifest.json in " + dataset_dir);
  json m = json::parse(f);
  std::vector<PairRecord> out;
  for (const auto& p : m.at("pairs")) {
    PairRecord r;
    r.pair_id = p.at("pair_id");
    r.layout_id = p.at("layout_id");
    r.ref_scene = p.at("ref_scene");
    r.query_scene = p.at("query_scene");
    r.n_changes = p.at("n_changes");
    r.t_ref = p.at("t_ref");
    r.t_query = p.at("t_query");
    r.split = p.at("split");
    r.viewpoint_overlap = p.at("viewpoint_overlap");
    r.content_hash = p.at("content_hash");
    out.push_back(r);
  }
  if (full) *full = std::move(m);
  return out;
}

inline DatasetPair load_pair(const std::string& dataset_dir, int pair_id, bool load_frames) {
  namespace fs = std::filesystem;
  fs::path pdir = fs::path(dataset_dir) / "pairs" / pair_dir_name(pair_id);
  std::ifstream f(pdir / "pair.json");
  if (!f) throw DataError("load_pair: missing pair.json in " + pdir.string());
  json pj = json::parse(f);

  DatasetPair dp;
  dp.meta.pair_id = pj.at("pair_id");
  dp.meta.n_changes = pj.at("n_changes");
  dp.meta.t_ref = pj.at("t_ref");
  dp.meta.t_query = pj.at("t_query");
  dp.meta.split = pj.at("split");
  dp.meta.viewpoint_overlap = pj.at("viewpoint_overlap");
  dp.layout = layout_from_json(pj.at("layout"));
  dp.meta.layout_id = dp.layout.id;
  dp.ref_scene = scene_from_json(pj.at("ref_scene"));
  dp.query_scene = scene_from_json(pj.at("query_scene"));
  dp.meta.ref_scene = dp.ref_scene.scene_index;
  dp.meta.query_scene = dp.query_scene.scene_index;
  dp.ref_traj = trajectory_from_json(pj.at("ref_trajectory"));
  dp.query_traj = trajectory_from_json(pj.at("query_trajectory"));

  if (load_frames) {
    for (int t = 0; t < dp.meta.t_ref; ++t)
      dp.ref.frames.push_back(read_pnm((pdir / "ref" / frame_file_name("frame", t, "ppm")).string()));
    for (int t = 0; t < dp.meta.t_query; ++t)
      dp.query.frames.push_back(
          read_pnm((pdir / "query" / frame_file_name("frame", t, "ppm")).string()));
    for (int t = 0; t < dp.meta.t_query; ++t) {
      Image m = read_pnm((pdir / "masks" / frame_file_name("mask", t, "pgm")).string());
      if (m.channels != 1) throw DataError("load_pair: mask is not a PGM");
      dp.masks.push_back(std::move(m));
    }
  }
  dp.ref.source_id = pair_dir_name(pair_id) + std::string("/ref");
  dp.query.source_id = pair_dir_name(pair_id) + std::string("/query");
  return dp;
}

}  // namespace vscd
