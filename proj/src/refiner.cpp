#include "td3d/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "td3d/errors.hpp"

namespace td3d {
namespace {

std::string name_of(const char* stem, int i) { return std::string("refiner.") + stem + std::to_string(i); }

void add_conv(nn::ParameterSet& params, const std::string& name, int taps, int cin, int cout, std::mt19937_64& rng) {
  nn::init_he_normal(params.add(name + ".w", taps * cin, cout), taps * cin, rng);
  params.add(name + ".b", 1, cout);
}

nn::Var conv(nn::Graph& g, nn::ParameterSet& params, const std::string& name, nn::Var x,
             const std::shared_ptr<const nn::KernelMap>& map) {
  return nn::sparse_conv(g, x, map, g.parameter(params.get(name + ".w")), g.parameter(params.get(name + ".b")));
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

void RefinerConfig::validate() const {
  if (levels < 0 || levels > 4) throw ConfigError("refiner: levels must be in [0, 4]");
  if (base_channels < 1) throw ConfigError("refiner: base_channels must be >= 1");
  if (!(iou_match_threshold >= 0 && iou_match_threshold < 1)) {
    throw ConfigError("refiner: iou_match_threshold must be in [0, 1)");
  }
  if (!(fg_threshold > 0 && fg_threshold < 1)) throw ConfigError("refiner: fg_threshold must be in (0, 1)");
}

MatchResult match_for_training(const std::vector<GroundTruthBox>& gt, const std::vector<Proposal>& proposals,
                               double threshold) {
  MatchResult result;
  std::vector<bool> claimed(proposals.size(), false);
  for (std::size_t j = 0; j < gt.size(); ++j) {
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (claimed[i]) continue;
      const double d = (proposals[i].box.center - gt[j].box.center).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = static_cast<int>(i);
      }
    }
    if (best < 0) {
      result.unmatched_gt.push_back(static_cast<int>(j));
      continue;
    }
    const double iou = box_iou(gt[j].box, proposals[static_cast<std::size_t>(best)].box);
    if (iou > threshold) {
      claimed[static_cast<std::size_t>(best)] = true;
      result.pairs.push_back({static_cast<int>(j), best, iou});
    } else {
      result.unmatched_gt.push_back(static_cast<int>(j));
    }
  }
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (!claimed[i]) result.unmatched_proposals.push_back(static_cast<int>(i));
  }
  return result;
}

void add_refiner_parameters(nn::ParameterSet& params, const RefinerConfig& config, int feature_channels,
                            std::mt19937_64& rng) {
  if (config.levels == 0) return;
  const int in = feature_channels + kRoiPositionChannels;
  auto ch = [&](int i) { return config.base_channels << i; };
  add_conv(params, name_of("enc", 0), 27, in, ch(0), rng);
  for (int i = 1; i <= config.levels; ++i) {
    add_conv(params, name_of("down", i), 8, ch(i - 1), ch(i), rng);
    add_conv(params, name_of("enc", i), 27, ch(i), ch(i), rng);
  }
  for (int i = config.levels - 1; i >= 0; --i) {
    add_conv(params, name_of("up", i), 8, ch(i + 1), ch(i), rng);
    add_conv(params, name_of("dec", i), 27, ch(i), ch(i), rng);
  }
  nn::init_he_normal(params.add("refiner.out.w", ch(0), 1), ch(0), rng);
  params.add("refiner.out.b", 1, 1);
}

nn::Matrix roi_positions(const SparseGrid& grid, const RoI& roi) {
  const Box3D& box = roi.proposal.box;
  nn::Matrix pos(static_cast<Eigen::Index>(roi.voxel_indices.size()), kRoiPositionChannels);
  for (std::size_t i = 0; i < roi.voxel_indices.size(); ++i) {
    const Vec3 c = voxel_center(grid.coords[static_cast<std::size_t>(roi.voxel_indices[i])], grid.voxel_size);
    pos.row(static_cast<Eigen::Index>(i)) = (2.0 * (c - box.center).cwiseQuotient(box.size)).transpose();
  }
  return pos;
}

nn::Var roi_input(nn::Graph& g, nn::Var scene_features, const SparseGrid& grid, const RoI& roi) {
  nn::Var feats = nn::gather_rows(g, scene_features, roi.voxel_indices);
  return nn::concat_cols(g, feats, g.constant(roi_positions(grid, roi)));
}

nn::Var unet_forward(nn::Graph& g, std::span<const Coord> roi_coords, nn::Var input, const RefinerConfig& config,
                     nn::ParameterSet& params) {
  const auto n = static_cast<Eigen::Index>(roi_coords.size());
  if (config.levels == 0) {
    return g.constant(nn::Matrix::Constant(n, 1, std::numeric_limits<double>::infinity()));
  }
  if (n == 0) return g.constant(nn::Matrix::Zero(0, 1));
  const int L = config.levels;
  nn::Pyramid pyr = nn::build_pyramid(std::vector<Coord>(roi_coords.begin(), roi_coords.end()), L + 1);
  std::vector<nn::Var> enc(static_cast<std::size_t>(L + 1));
  enc[0] = nn::relu(g, conv(g, params, name_of("enc", 0), input, pyr.subm[0]));
  for (int i = 1; i <= L; ++i) {
    const auto u = static_cast<std::size_t>(i);
    nn::Var t = nn::relu(g, conv(g, params, name_of("down", i), enc[u - 1], pyr.down[u - 1]));
    enc[u] = nn::relu(g, conv(g, params, name_of("enc", i), t, pyr.subm[u]));
  }
  nn::Var y = enc[static_cast<std::size_t>(L)];
  for (int i = L - 1; i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    nn::Var up = nn::relu(g, conv(g, params, name_of("up", i), y, pyr.up[u]));
    y = nn::relu(g, conv(g, params, name_of("dec", i), nn::add(g, up, enc[u]), pyr.subm[u]));
  }
  return nn::linear(g, y, g.parameter(params.get("refiner.out.w")), g.parameter(params.get("refiner.out.b")));
}

std::vector<bool> instance_voxel_labels(const SparseGrid& grid, const PointCloud& cloud, int instance,
                                        VoxelLabelRule rule) {
  const std::size_t m = grid.coords.size();
  std::vector<int> hits(m, 0), total(m, 0);
  for (std::size_t p = 0; p < grid.point_to_voxel.size(); ++p) {
    const auto v = static_cast<std::size_t>(grid.point_to_voxel[p]);
    ++total[v];
    if (cloud.instance_ids[p] == instance) ++hits[v];
  }
  std::vector<bool> labels(m);
  for (std::size_t v = 0; v < m; ++v) {
    labels[v] = rule == VoxelLabelRule::kAny ? hits[v] > 0 : 2 * hits[v] > total[v];
  }
  return labels;
}

double seg_loss(const std::vector<nn::Matrix>& logits, const std::vector<std::vector<bool>>& labels,
                std::vector<nn::Matrix>* grads) {
  std::size_t count = 0;
  for (const auto& l : logits) count += static_cast<std::size_t>(l.rows());
  const double norm = static_cast<double>(std::max<std::size_t>(1, count));
  double sum = 0.0;
  if (grads) grads->clear();
  for (std::size_t r = 0; r < logits.size(); ++r) {
    const nn::Matrix& x = logits[r];
    nn::Matrix grad = nn::Matrix::Zero(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double raw = x(i, 0);
      const double z = std::clamp(raw, -kSegLogitClamp, kSegLogitClamp);
      const double t = labels[r][static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      // log(1 + e^-z) for foreground, log(1 + e^z) for background.
      sum += t > 0.0 ? softplus(-z) : softplus(z);
      if (raw > -kSegLogitClamp && raw < kSegLogitClamp) grad(i, 0) = (sigmoid(z) - t) / norm;
    }
    if (grads) grads->push_back(std::move(grad));
  }
  return sum / norm;
}

nn::Var seg_loss(nn::Graph& g, const std::vector<nn::Var>& logits, const std::vector<std::vector<bool>>& labels) {
  if (logits.empty()) return g.constant(nn::Matrix::Zero(1, 1));
  std::vector<nn::Matrix> values;
  for (nn::Var v : logits) values.push_back(g.value(v));
  std::vector<nn::Matrix> grads;
  const double loss = seg_loss(values, labels, &grads);
  nn::Var stacked = nn::concat_rows(g, logits);
  nn::Matrix d(g.value(stacked).rows(), 1);
  Eigen::Index r = 0;
  for (const auto& gr : grads) {
    d.middleRows(r, gr.rows()) = gr;
    r += gr.rows();
  }
  return nn::scalar_with_grad(g, stacked, loss, std::move(d));
}

std::vector<InstanceMask> predict_masks(const SparseGrid& feature_grid, const std::vector<Proposal>& proposals,
                                        const RefinerConfig& config, nn::ParameterSet& params) {
  std::vector<InstanceMask> masks;
  const double logit_threshold = std::log(config.fg_threshold / (1.0 - config.fg_threshold));
  std::vector<bool> voxel_fg(feature_grid.coords.size(), false);
  std::vector<Coord> roi_coords;
  for (const Proposal& proposal : proposals) {
    RoI roi = extract_roi(feature_grid, proposal);
    if (roi.voxel_indices.empty()) continue;
    nn::Matrix logits;
    if (config.levels == 0) {
      logits = nn::Matrix::Constant(static_cast<Eigen::Index>(roi.voxel_indices.size()), 1,
                                    std::numeric_limits<double>::infinity());
    } else {
      nn::Graph g(false);
      roi_coords.clear();
      for (int v : roi.voxel_indices) roi_coords.push_back(feature_grid.coords[static_cast<std::size_t>(v)]);
      nn::Var input = nn::concat_cols(g, g.constant(roi.features), g.constant(roi_positions(feature_grid, roi)));
      logits = g.value(unet_forward(g, roi_coords, input, config, params));
    }
    bool any = false;
    for (std::size_t i = 0; i < roi.voxel_indices.size(); ++i) {
      const bool fg = logits(static_cast<Eigen::Index>(i), 0) > logit_threshold;
      voxel_fg[static_cast<std::size_t>(roi.voxel_indices[i])] = fg;
      any = any || fg;
    }
    if (any) {
      InstanceMask mask;
      mask.point_mask = devoxelize_mask(feature_grid, voxel_fg);
      mask.class_id = proposal.class_id;
      mask.score = proposal.score;
      masks.push_back(std::move(mask));
    }
    for (int v : roi.voxel_indices) voxel_fg[static_cast<std::size_t>(v)] = false;
  }
  return masks;
}

}  // namespace td3d
