#include "td3d/scene_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "td3d/errors.hpp"
#include "td3d/text_io.hpp"

namespace td3d {
namespace {

constexpr int kPlacementRetries = 1000;
constexpr const char* kSceneMagic = "TD3D-SCENE v1";

std::string describe(const SceneConfig& c) {
  std::ostringstream os;
  os << "SceneConfig{room=" << c.room_extent.x() << "x" << c.room_extent.y() << "x"
     << c.room_extent.z() << ", objects=[" << c.object_count_range.first << ","
     << c.object_count_range.second << "], min_gap=" << c.min_object_gap << ", seed=" << c.seed
     << "}";
  return os.str();
}

bool separated(const Box3D& a, const Box3D& b, double gap) {
  const Vec3 amin = a.min(), amax = a.max(), bmin = b.min(), bmax = b.max();
  for (int k = 0; k < 3; ++k) {
    if (bmin[k] - amax[k] >= gap || amin[k] - bmax[k] >= gap) return true;
  }
  return false;
}

// (dx, dy) rotated into the primitive's own frame.
std::pair<double, double> to_local(const Primitive& prim, double dx, double dy) {
  if (prim.yaw == 0.0) return {dx, dy};
  const double c = std::cos(prim.yaw), s = std::sin(prim.yaw);
  return {c * dx + s * dy, -s * dx + c * dy};
}

bool inside_footprint(const Primitive& prim, double x, double y) {
  const double dx = x - prim.extent.center.x();
  const double dy = y - prim.extent.center.y();
  const Vec3 half = 0.5 * prim.size;
  if (prim.kind == ShapeKind::kBox) {
    const auto [u, v] = to_local(prim, dx, dy);
    return std::abs(u) <= half.x() && std::abs(v) <= half.y();
  }
  return dx * dx + dy * dy <= half.x() * half.x();
}

}  // namespace

bool inside_primitive(const Primitive& prim, const Vec3& p) {
  const Vec3 d = p - prim.extent.center;
  const Vec3 half = 0.5 * prim.size;
  switch (prim.kind) {
    case ShapeKind::kBox: {
      const auto [u, v] = to_local(prim, d.x(), d.y());
      return std::abs(u) <= half.x() && std::abs(v) <= half.y() && std::abs(d.z()) <= half.z();
    }
    case ShapeKind::kSphere:
      return d.squaredNorm() <= half.x() * half.x();
    case ShapeKind::kCylinder:
      return d.head<2>().squaredNorm() <= half.x() * half.x() && std::abs(d.z()) <= half.z();
  }
  return false;
}

const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kBox: return "box";
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kCylinder: return "cylinder";
  }
  return "?";
}

ShapeKind shape_from_name(const std::string& name) {
  if (name == "box") return ShapeKind::kBox;
  if (name == "sphere") return ShapeKind::kSphere;
  if (name == "cylinder") return ShapeKind::kCylinder;
  throw ConfigError("unknown shape kind '" + name + "'");
}

int PointCloud::num_instances() const {
  int k = 0;
  for (int id : instance_ids) k = std::max(k, id + 1);
  return k;
}

void PointCloud::validate() const {
  const std::size_t n = points.size();
  if (n == 0) throw DataError("point cloud is empty");
  if (semantic_ids.size() != n || instance_ids.size() != n) {
    throw DataError("label arrays do not match point count");
  }
  const int k = num_instances();
  std::vector<int> instance_class(static_cast<std::size_t>(k), -2);
  for (std::size_t i = 0; i < n; ++i) {
    if (!points[i].allFinite()) throw DataError("non-finite coordinate at point " + std::to_string(i));
    const int sem = semantic_ids[i], inst = instance_ids[i];
    if (sem < -1 || sem >= num_classes) throw DataError("semantic id out of range at point " + std::to_string(i));
    if (inst < -1) throw DataError("instance id out of range at point " + std::to_string(i));
    if (inst >= 0) {
      if (sem < 0) throw DataError("instance point without class at point " + std::to_string(i));
      int& cls = instance_class[static_cast<std::size_t>(inst)];
      if (cls == -2) cls = sem;
      if (cls != sem) throw DataError("instance " + std::to_string(inst) + " has mixed classes");
    }
  }
  for (int id = 0; id < k; ++id) {
    if (instance_class[static_cast<std::size_t>(id)] == -2) {
      throw DataError("instance ids are not contiguous: id " + std::to_string(id) + " is missing");
    }
  }
}

void SceneConfig::validate() const {
  if (!(room_extent.array() > 0).all()) throw ConfigError("room_extent must be strictly positive");
  if (object_count_range.first < 0 || object_count_range.first > object_count_range.second) {
    throw ConfigError("object_count_range is empty or negative");
  }
  if (object_count_range.second < 1) throw ConfigError("object_count_range admits no objects");
  if (shape_catalog.empty()) throw ConfigError("shape_catalog is empty");
  if (size_range.size() != 3) throw ConfigError("size_range needs one entry per shape kind");
  for (const auto& r : size_range) {
    if (!(r.min > 0) || r.min > r.max) throw ConfigError("size range must satisfy 0 < min <= max");
  }
  if (points_per_object_range.first < 2 || points_per_object_range.first > points_per_object_range.second) {
    throw ConfigError("points_per_object_range must satisfy 2 <= min <= max");
  }
  if (floor_wall_point_count < 0) throw ConfigError("floor_wall_point_count must be >= 0");
  if (!(min_object_gap >= 0)) throw ConfigError("min_object_gap must be >= 0");
  if (!(background_thickness >= 0)) throw ConfigError("background_thickness must be >= 0");
}

Scene generate_scene(const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const Vec3 room = config.room_extent;
  const int count = uniform_int(config.object_count_range.first, config.object_count_range.second);

  Scene scene;
  for (int obj = 0; obj < count; ++obj) {
    const ShapeKind kind =
        config.shape_catalog[static_cast<std::size_t>(uniform_int(0, config.num_classes() - 1))];
    const SizeRange range = config.size_for(kind);
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      Vec3 size;
      switch (kind) {
        case ShapeKind::kBox:
          size = {uniform(range.min, range.max), uniform(range.min, range.max), uniform(range.min, range.max)};
          break;
        case ShapeKind::kSphere: {
          const double d = uniform(range.min, range.max);
          size = {d, d, d};
          break;
        }
        case ShapeKind::kCylinder: {
          const double d = uniform(range.min, range.max);
          size = {d, d, uniform(range.min, range.max)};
          break;
        }
      }
      double yaw = 0.0;
      Vec3 bound = size;
      if (kind == ShapeKind::kBox && config.rotate_boxes) {
        yaw = uniform(0.0, 0.5 * std::numbers::pi);
        const double c = std::abs(std::cos(yaw)), s = std::abs(std::sin(yaw));
        bound = {c * size.x() + s * size.y(), s * size.x() + c * size.y(), size.z()};
      }
      if (bound.x() > room.x() || bound.y() > room.y() || bound.z() > room.z() + 1e-12) continue;
      const Vec3 center{uniform(0.5 * bound.x(), room.x() - 0.5 * bound.x()),
                        uniform(0.5 * bound.y(), room.y() - 0.5 * bound.y()), 0.5 * bound.z()};
      const Box3D extent{center, bound};
      const bool clear = std::all_of(scene.primitives.begin(), scene.primitives.end(), [&](const Primitive& p) {
        return separated(p.extent, extent, config.min_object_gap);
      });
      if (clear) {
        scene.primitives.push_back({kind, extent, yaw, size});
        placed = true;
      }
    }
    if (!placed) {
      throw ConfigError("scene infeasible: could not place object " + std::to_string(obj) + " after " +
                        std::to_string(kPlacementRetries) + " attempts for " + describe(config));
    }
  }

  PointCloud& cloud = scene.cloud;
  cloud.num_classes = config.num_classes();
  for (std::size_t inst = 0; inst < scene.primitives.size(); ++inst) {
    const Primitive& prim = scene.primitives[inst];
    const int cls = static_cast<int>(
        std::find(config.shape_catalog.begin(), config.shape_catalog.end(), prim.kind) - config.shape_catalog.begin());
    const int n = uniform_int(config.points_per_object_range.first, config.points_per_object_range.second);
    const Vec3 lo = prim.extent.min(), hi = prim.extent.max();
    Vec3 bmin = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 bmax = -bmin;
    for (int i = 0; i < n;) {
      const Vec3 p{uniform(lo.x(), hi.x()), uniform(lo.y(), hi.y()), uniform(lo.z(), hi.z())};
      if (!inside_primitive(prim, p)) continue;
      cloud.points.push_back(p);
      cloud.semantic_ids.push_back(cls);
      cloud.instance_ids.push_back(static_cast<int>(inst));
      bmin = bmin.cwiseMin(p);
      bmax = bmax.cwiseMax(p);
      ++i;
    }
    scene.boxes.push_back({Box3D::from_bounds(bmin, bmax), cls});
  }

  // Background: a thin floor slab at z in [0, t] and two wall slabs behind the
  // x = 0 and y = 0 planes, split by area. Floor under an object is occluded.
  const double floor_area = room.x() * room.y();
  const double wall_x_area = room.y() * room.z();
  const double wall_y_area = room.x() * room.z();
  const double total_area = floor_area + wall_x_area + wall_y_area;
  const int total = config.floor_wall_point_count;
  const int n_floor = static_cast<int>(std::lround(total * floor_area / total_area));
  const int n_wall_x = static_cast<int>(std::lround(total * wall_x_area / total_area));
  const int n_wall_y = std::max(0, total - n_floor - n_wall_x);
  auto add_background = [&cloud](const Vec3& p) {
    cloud.points.push_back(p);
    cloud.semantic_ids.push_back(-1);
    cloud.instance_ids.push_back(-1);
  };
  for (int i = 0; i < n_floor; ++i) {
    const Vec3 p{uniform(0.0, room.x()), uniform(0.0, room.y()), uniform(0.0, config.background_thickness)};
    const bool occluded = std::any_of(scene.primitives.begin(), scene.primitives.end(),
                                      [&](const Primitive& prim) { return inside_footprint(prim, p.x(), p.y()); });
    if (!occluded) add_background(p);
  }
  for (int i = 0; i < n_wall_x; ++i) {
    add_background({uniform(-config.background_thickness, 0.0), uniform(0.0, room.y()), uniform(0.0, room.z())});
  }
  for (int i = 0; i < n_wall_y; ++i) {
    add_background({uniform(0.0, room.x()), uniform(-config.background_thickness, 0.0), uniform(0.0, room.z())});
  }
  return scene;
}

std::vector<GroundTruthBox> boxes_from_labels(const PointCloud& cloud) {
  const int k = cloud.num_instances();
  std::vector<Vec3> lo(static_cast<std::size_t>(k), Vec3::Constant(std::numeric_limits<double>::infinity()));
  std::vector<Vec3> hi(static_cast<std::size_t>(k), Vec3::Constant(-std::numeric_limits<double>::infinity()));
  std::vector<int> cls(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int inst = cloud.instance_ids[i];
    if (inst < 0) continue;
    const auto u = static_cast<std::size_t>(inst);
    lo[u] = lo[u].cwiseMin(cloud.points[i]);
    hi[u] = hi[u].cwiseMax(cloud.points[i]);
    cls[u] = cloud.semantic_ids[i];
  }
  std::vector<GroundTruthBox> out;
  for (std::size_t u = 0; u < static_cast<std::size_t>(k); ++u) out.push_back({Box3D::from_bounds(lo[u], hi[u]), cls[u]});
  return out;
}

std::vector<std::vector<int>> instance_point_sets(const PointCloud& cloud) {
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(cloud.num_instances()));
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.instance_ids[i] >= 0) sets[static_cast<std::size_t>(cloud.instance_ids[i])].push_back(static_cast<int>(i));
  }
  return sets;
}

void write_scene(const PointCloud& cloud, const std::filesystem::path& path) {
  cloud.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  std::string buf;
  buf.reserve(cloud.size() * 64 + 64);
  buf += kSceneMagic;
  buf += '\n';
  buf += std::to_string(cloud.size()) + ' ' + std::to_string(cloud.num_classes) + '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    buf += text::format_double(p.x()) + ' ' + text::format_double(p.y()) + ' ' + text::format_double(p.z()) + ' ' +
           std::to_string(cloud.semantic_ids[i]) + ' ' + std::to_string(cloud.instance_ids[i]) + '\n';
  }
  out << buf;
  if (!out) throw DataError("write failed for " + path.string());
}

PointCloud read_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open scene file " + path.string());
  const std::string src = path.string();
  text::LineReader reader(in);
  std::string line;
  if (!reader.next(line)) throw ParseError(src, 1, "empty file");
  if (line != kSceneMagic) throw ParseError(src, 1, "bad header, expected '" + std::string(kSceneMagic) + "'");
  if (!reader.next(line)) throw ParseError(src, 2, "missing 'N C' line");
  auto head = text::split_ws(line);
  long long n = 0, c = 0;
  if (head.size() != 2 || !text::parse_int(head[0], n) || !text::parse_int(head[1], c) || n < 1 || c < 1) {
    throw ParseError(src, reader.line_number(), "malformed 'N C' line");
  }
  PointCloud cloud;
  cloud.num_classes = static_cast<int>(c);
  cloud.points.reserve(static_cast<std::size_t>(n));
  cloud.semantic_ids.reserve(static_cast<std::size_t>(n));
  cloud.instance_ids.reserve(static_cast<std::size_t>(n));
  std::vector<int> instance_class;
  std::vector<std::size_t> first_line;
  for (long long i = 0; i < n; ++i) {
    if (!reader.next(line)) throw ParseError(src, reader.line_number() + 1, "unexpected end of file");
    auto tok = text::split_ws(line);
    double x, y, z;
    long long sem, inst;
    if (tok.size() != 5 || !text::parse_double(tok[0], x) || !text::parse_double(tok[1], y) ||
        !text::parse_double(tok[2], z) || !text::parse_int(tok[3], sem) || !text::parse_int(tok[4], inst)) {
      throw ParseError(src, reader.line_number(), "expected 'x y z sem inst'");
    }
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
      throw ParseError(src, reader.line_number(), "non-finite coordinate");
    }
    if (sem < -1 || sem >= c) throw ParseError(src, reader.line_number(), "semantic id out of range");
    if (inst < -1 || inst > n) throw ParseError(src, reader.line_number(), "instance id out of range");
    if (inst >= 0) {
      if (sem < 0) throw ParseError(src, reader.line_number(), "instance point without class");
      const auto u = static_cast<std::size_t>(inst);
      if (u >= instance_class.size()) {
        instance_class.resize(u + 1, -2);
        first_line.resize(u + 1, 0);
      }
      if (instance_class[u] == -2) {
        instance_class[u] = static_cast<int>(sem);
        first_line[u] = reader.line_number();
      } else if (instance_class[u] != sem) {
        throw ParseError(src, reader.line_number(), "instance " + std::to_string(inst) + " has mixed classes");
      }
    }
    cloud.points.emplace_back(x, y, z);
    cloud.semantic_ids.push_back(static_cast<int>(sem));
    cloud.instance_ids.push_back(static_cast<int>(inst));
  }
  for (std::size_t id = 0; id < instance_class.size(); ++id) {
    if (instance_class[id] != -2) continue;
    // Report the first line that uses an id beyond the gap.
    std::size_t bad_line = 0;
    for (std::size_t j = id + 1; j < instance_class.size(); ++j) {
      if (instance_class[j] != -2 && (bad_line == 0 || first_line[j] < bad_line)) bad_line = first_line[j];
    }
    throw ParseError(src, bad_line, "non-contiguous instance ids: id " + std::to_string(id) + " is missing");
  }
  while (reader.next(line)) {
    if (!text::split_ws(line).empty()) throw ParseError(src, reader.line_number(), "trailing content after points");
  }
  return cloud;
}

void write_boxes(const std::vector<GroundTruthBox>& boxes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << boxes.size() << '\n';
  for (const auto& b : boxes) {
    for (int k = 0; k < 3; ++k) out << text::format_double(b.box.center[k]) << ' ';
    for (int k = 0; k < 3; ++k) out << text::format_double(b.box.size[k]) << ' ';
    out << b.class_id << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<GroundTruthBox> read_boxes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open boxes file " + path.string());
  const std::string src = path.string();
  text::LineReader reader(in);
  std::string line;
  long long k = 0;
  if (!reader.next(line)) throw ParseError(src, 1, "empty file");
  auto head = text::split_ws(line);
  if (head.size() != 1 || !text::parse_int(head[0], k) || k < 0) throw ParseError(src, 1, "expected box count");
  std::vector<GroundTruthBox> boxes;
  for (long long i = 0; i < k; ++i) {
    if (!reader.next(line)) throw ParseError(src, reader.line_number() + 1, "unexpected end of file");
    auto tok = text::split_ws(line);
    double v[6];
    long long cls = 0;
    bool ok = tok.size() == 7 && text::parse_int(tok[6], cls);
    for (int j = 0; ok && j < 6; ++j) ok = text::parse_double(tok[static_cast<std::size_t>(j)], v[j]) && std::isfinite(v[j]);
    if (!ok) throw ParseError(src, reader.line_number(), "expected 'cx cy cz sx sy sz class'");
    GroundTruthBox b{{Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5])}, static_cast<int>(cls)};
    if (!b.box.valid() || cls < 0) throw ParseError(src, reader.line_number(), "invalid box");
    boxes.push_back(b);
  }
  return boxes;
}

std::filesystem::path boxes_path_for(const std::filesystem::path& scene_path) {
  auto p = scene_path;
  p.replace_extension(".boxes");
  return p;
}

}  // namespace td3d
