#include "td3d/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "td3d/errors.hpp"
#include "td3d/hashing.hpp"
#include "td3d/text_io.hpp"

namespace td3d {
namespace {

std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': expected " + expected + ", got '" + std::string(value) + "'");
}

std::vector<std::string_view> split_commas(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0;
  if (!text::parse_double(v, out) || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

long long to_int(std::string_view key, std::string_view v) {
  long long out = 0;
  if (!text::parse_int(v, out)) bad_value(key, v, "an integer");
  return out;
}

int to_int32(std::string_view key, std::string_view v) {
  const long long x = to_int(key, v);
  if (x < -(1LL << 31) || x >= (1LL << 31)) bad_value(key, v, "a 32-bit integer");
  return static_cast<int>(x);
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

std::vector<int> to_int_list(std::string_view key, std::string_view v) {
  std::vector<int> out;
  for (auto part : split_commas(v)) out.push_back(to_int32(key, part));
  return out;
}

std::vector<double> to_double_list(std::string_view key, std::string_view v) {
  std::vector<double> out;
  for (auto part : split_commas(v)) out.push_back(to_double(key, part));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += fmt(xs[i]);
  }
  return out;
}

std::string int_list(const std::vector<int>& xs) {
  return join(xs, [](int x) { return std::to_string(x); });
}
std::string double_list(const std::vector<double>& xs) { return join(xs, shortest); }

std::pair<int, int> to_int_pair(std::string_view key, std::string_view v) {
  const auto xs = to_int_list(key, v);
  if (xs.size() != 2) bad_value(key, v, "two comma-separated integers");
  return {xs[0], xs[1]};
}

SizeRange to_range(std::string_view key, std::string_view v) {
  const auto xs = to_double_list(key, v);
  if (xs.size() != 2) bad_value(key, v, "two comma-separated numbers");
  return {xs[0], xs[1]};
}

std::string range_text(const SizeRange& r) { return shortest(r.min) + "," + shortest(r.max); }

struct Entry {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
};

template <typename Get, typename Set>
Entry entry(Get g, Set s) {
  return {g, s};
}

#define TD3D_DOUBLE(field) \
  entry([](const RunConfig& c) { return shortest(c.field); }, \
        [](RunConfig& c, std::string_view k, std::string_view v) { c.field = to_double(k, v); })
#define TD3D_INT(field) \
  entry([](const RunConfig& c) { return std::to_string(c.field); }, \
        [](RunConfig& c, std::string_view k, std::string_view v) { c.field = to_int32(k, v); })
#define TD3D_BOOL(field) \
  entry([](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
        [](RunConfig& c, std::string_view k, std::string_view v) { c.field = to_bool(k, v); })

const std::map<std::string, Entry, std::less<>>& registry() {
  static const std::map<std::string, Entry, std::less<>> r = [] {
    std::map<std::string, Entry, std::less<>> m;
    m["seed"] = entry([](const RunConfig& c) { return std::to_string(c.seed); },
                      [](RunConfig& c, std::string_view k, std::string_view v) {
                        const long long x = to_int(k, v);
                        if (x < 0) bad_value(k, v, "a non-negative integer");
                        c.seed = static_cast<std::uint64_t>(x);
                      });

    m["scene.room_extent"] = entry(
        [](const RunConfig& c) {
          return shortest(c.scene.room_extent.x()) + "," + shortest(c.scene.room_extent.y()) + "," +
                 shortest(c.scene.room_extent.z());
        },
        [](RunConfig& c, std::string_view k, std::string_view v) {
          const auto xs = to_double_list(k, v);
          if (xs.size() != 3) bad_value(k, v, "three comma-separated numbers");
          c.scene.room_extent = Vec3(xs[0], xs[1], xs[2]);
        });
    m["scene.object_count"] = entry(
        [](const RunConfig& c) {
          return std::to_string(c.scene.object_count_range.first) + "," + std::to_string(c.scene.object_count_range.second);
        },
        [](RunConfig& c, std::string_view k, std::string_view v) { c.scene.object_count_range = to_int_pair(k, v); });
    m["scene.points_per_object"] = entry(
        [](const RunConfig& c) {
          return std::to_string(c.scene.points_per_object_range.first) + "," +
                 std::to_string(c.scene.points_per_object_range.second);
        },
        [](RunConfig& c, std::string_view k, std::string_view v) { c.scene.points_per_object_range = to_int_pair(k, v); });
    m["scene.shapes"] = entry(
        [](const RunConfig& c) { return join(c.scene.shape_catalog, [](ShapeKind s) { return std::string(shape_name(s)); }); },
        [](RunConfig& c, std::string_view k, std::string_view v) {
          std::vector<ShapeKind> shapes;
          for (auto part : split_commas(v)) {
            try {
              shapes.push_back(shape_from_name(std::string(part)));
            } catch (const ConfigError&) {
              bad_value(k, v, "a comma-separated list of box, sphere, cylinder");
            }
          }
          c.scene.shape_catalog = shapes;
          c.model.detector.num_classes = static_cast<int>(shapes.size());
        });
    const char* kinds[] = {"box", "sphere", "cylinder"};
    for (std::size_t i = 0; i < 3; ++i) {
      m[std::string("scene.") + kinds[i] + "_size"] = entry(
          [i](const RunConfig& c) { return range_text(c.scene.size_range[i]); },
          [i](RunConfig& c, std::string_view k, std::string_view v) { c.scene.size_range[i] = to_range(k, v); });
    }
    m["scene.floor_wall_points"] = TD3D_INT(scene.floor_wall_point_count);
    m["scene.min_object_gap"] = TD3D_DOUBLE(scene.min_object_gap);
    m["scene.background_thickness"] = TD3D_DOUBLE(scene.background_thickness);
    m["scene.rotate_boxes"] = TD3D_BOOL(scene.rotate_boxes);

    m["data.n_train"] = TD3D_INT(data.n_train);
    m["data.n_val"] = TD3D_INT(data.n_val);
    m["data.seed"] = entry([](const RunConfig& c) { return std::to_string(c.data.seed); },
                           [](RunConfig& c, std::string_view k, std::string_view v) {
                             const long long x = to_int(k, v);
                             if (x < 0) bad_value(k, v, "a non-negative integer");
                             c.data.seed = static_cast<std::uint64_t>(x);
                           });

    m["detector.voxel_size"] = TD3D_DOUBLE(model.detector.voxel_size);
    m["detector.widths"] = entry(
        [](const RunConfig& c) {
          return int_list(std::vector<int>(c.model.detector.widths.begin(), c.model.detector.widths.end()));
        },
        [](RunConfig& c, std::string_view k, std::string_view v) {
          const auto xs = to_int_list(k, v);
          if (xs.size() != DetectorConfig::kNumLevels) bad_value(k, v, "four comma-separated integers");
          std::copy(xs.begin(), xs.end(), c.model.detector.widths.begin());
        });
    m["detector.head_levels"] = entry([](const RunConfig& c) { return int_list(c.model.detector.head_levels); },
                                      [](RunConfig& c, std::string_view k, std::string_view v) {
                                        c.model.detector.head_levels = to_int_list(k, v);
                                      });
    m["detector.k_max"] = TD3D_INT(model.detector.k_max);
    m["detector.focal_alpha"] = TD3D_DOUBLE(model.detector.focal_alpha);
    m["detector.focal_gamma"] = TD3D_DOUBLE(model.detector.focal_gamma);
    m["detector.ref_size_factor"] = TD3D_DOUBLE(model.detector.ref_size_factor);

    m["nms.score_threshold"] = TD3D_DOUBLE(model.nms.score_threshold);
    m["nms.iou"] = TD3D_DOUBLE(model.nms.nms_iou);
    m["nms.max_proposals"] = TD3D_INT(model.nms.max_proposals);

    m["refiner.levels"] = TD3D_INT(model.refiner.levels);
    m["refiner.base_channels"] = TD3D_INT(model.refiner.base_channels);
    m["refiner.iou_match_threshold"] = TD3D_DOUBLE(model.refiner.iou_match_threshold);
    m["refiner.fg_threshold"] = TD3D_DOUBLE(model.refiner.fg_threshold);
    m["refiner.label_rule"] = entry(
        [](const RunConfig& c) {
          return std::string(c.model.refiner.label_rule == VoxelLabelRule::kAny ? "any" : "majority");
        },
        [](RunConfig& c, std::string_view k, std::string_view v) {
          if (v == "any") {
            c.model.refiner.label_rule = VoxelLabelRule::kAny;
          } else if (v == "majority") {
            c.model.refiner.label_rule = VoxelLabelRule::kMajority;
          } else {
            bad_value(k, v, "any or majority");
          }
        });

    m["train.epochs"] = TD3D_INT(train.epochs);
    m["train.batch_size"] = TD3D_INT(train.batch_size);
    m["train.lr"] = TD3D_DOUBLE(train.lr);
    m["train.lr_drop_epochs"] = entry(
        [](const RunConfig& c) {
          const auto [a, b] = c.train.lr_drop_epochs;
          if (a <= 0 && b <= 0) return std::string("auto");
          return std::to_string(a) + "," + std::to_string(b);
        },
        [](RunConfig& c, std::string_view k, std::string_view v) {
          if (v == "auto") {
            c.train.lr_drop_epochs = {0, 0};
            return;
          }
          const auto p = to_int_pair(k, v);
          if (p.first <= 0 || p.second <= 0) bad_value(k, v, "auto or two positive epochs");
          c.train.lr_drop_epochs = p;
        });
    m["train.lr_drop_factor"] = TD3D_DOUBLE(train.lr_drop_factor);
    m["train.weight_decay"] = TD3D_DOUBLE(train.weight_decay);
    m["train.grad_clip"] = TD3D_DOUBLE(train.grad_clip);
    m["train.gt_warmup"] = TD3D_BOOL(train.gt_warmup);
    m["train.warmup_fraction"] = TD3D_DOUBLE(train.warmup_fraction);
    m["train.augment"] = TD3D_BOOL(train.augment);
    m["train.val_every"] = TD3D_INT(train.val_every);

    m["eval.min_mask_size"] = TD3D_INT(eval_min_mask_size);
    m["bench.repeats"] = TD3D_INT(bench_repeats);

    m["ablate.unet_levels"] = entry([](const RunConfig& c) { return int_list(c.ablate.unet_levels); },
                                    [](RunConfig& c, std::string_view k, std::string_view v) {
                                      c.ablate.unet_levels = to_int_list(k, v);
                                    });
    m["ablate.proposal_targets"] = entry([](const RunConfig& c) { return int_list(c.ablate.proposal_targets); },
                                         [](RunConfig& c, std::string_view k, std::string_view v) {
                                           c.ablate.proposal_targets = to_int_list(k, v);
                                         });
    m["ablate.score_grid"] = entry([](const RunConfig& c) { return double_list(c.ablate.score_grid); },
                                   [](RunConfig& c, std::string_view k, std::string_view v) {
                                     c.ablate.score_grid = to_double_list(k, v);
                                   });
    m["ablate.nms_iou_grid"] = entry([](const RunConfig& c) { return double_list(c.ablate.nms_iou_grid); },
                                     [](RunConfig& c, std::string_view k, std::string_view v) {
                                       c.ablate.nms_iou_grid = to_double_list(k, v);
                                     });
    return m;
  }();
  return r;
}

#undef TD3D_DOUBLE
#undef TD3D_INT
#undef TD3D_BOOL

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto& r = registry();
  auto it = r.find(key);
  if (it == r.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second.set(*this, key, trim(value));
}

std::string RunConfig::get(std::string_view key) const {
  const auto& r = registry();
  auto it = r.find(key);
  if (it == r.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return it->second.get(*this);
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, e] : registry()) out.push_back(k);
  return out;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

std::string RunConfig::canonical_text() const {
  std::string out;
  for (const auto& [k, e] : registry()) out += k + " = " + e.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const { return sha256_hex(canonical_text()); }

void RunConfig::validate() const {
  SceneConfig sc = scene;
  sc.validate();
  if (data.n_train < 1 || data.n_val < 0) throw ConfigError("data: n_train must be >= 1 and n_val >= 0");
  if (model.detector.num_classes != scene.num_classes()) {
    throw ConfigError("detector class count differs from the scene shape catalog");
  }
  model.validate();
  if (model.nms.score_threshold < 0 || model.nms.score_threshold > 1 || model.nms.nms_iou < 0 || model.nms.nms_iou > 1 ||
      model.nms.max_proposals < 1) {
    throw ConfigError("nms: thresholds must be in [0, 1] and max_proposals >= 1");
  }
  train.validate();
  if (eval_min_mask_size < 1) throw ConfigError("eval.min_mask_size must be >= 1");
  if (bench_repeats < 3) throw ConfigError("bench.repeats must be >= 3");
  for (int l : ablate.unet_levels) {
    if (l < 0 || l > 4) throw ConfigError("ablate.unet_levels entries must be in [0, 4]");
  }
  for (int t : ablate.proposal_targets) {
    if (t < 1) throw ConfigError("ablate.proposal_targets entries must be >= 1");
  }
  if (ablate.score_grid.empty() || ablate.nms_iou_grid.empty()) throw ConfigError("ablate grids must be non-empty");
}

RunConfig RunConfig::from_text(std::string_view text, const std::string& source) {
  RunConfig c;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return from_text(os.str(), path.string());
}

}  // namespace td3d
