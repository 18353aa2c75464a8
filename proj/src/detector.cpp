#include "td3d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "td3d/errors.hpp"

namespace td3d {
namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::string level_name(const char* prefix, int level) { return std::string(prefix) + std::to_string(level); }

void add_conv(nn::ParameterSet& params, const std::string& name, int taps, int cin, int cout, std::mt19937_64& rng) {
  nn::init_he_normal(params.add(name + ".w", taps * cin, cout), taps * cin, rng);
  params.add(name + ".b", 1, cout);
}

nn::Var conv(nn::Graph& g, nn::ParameterSet& params, const std::string& name, nn::Var x,
             const std::shared_ptr<const nn::KernelMap>& map) {
  return nn::sparse_conv(g, x, map, g.parameter(params.get(name + ".w")), g.parameter(params.get(name + ".b")));
}

}  // namespace

void DetectorConfig::validate() const {
  if (num_classes < 1) throw ConfigError("detector: num_classes must be >= 1");
  if (in_channels < 1) throw ConfigError("detector: in_channels must be >= 1");
  for (int w : widths) {
    if (w < 1) throw ConfigError("detector: widths must be >= 1");
  }
  if (head_levels.empty()) throw ConfigError("detector: head_levels is empty");
  for (int l : head_levels) {
    if (l < 0 || l >= kNumLevels) throw ConfigError("detector: head level out of range");
  }
  if (!(voxel_size > 0)) throw ConfigError("detector: voxel_size must be positive");
  if (k_max < 1) throw ConfigError("detector: k_max must be >= 1");
  if (!(focal_alpha > 0 && focal_alpha < 1) || focal_gamma < 0) throw ConfigError("detector: bad focal parameters");
  if (!(ref_size_factor > 0)) throw ConfigError("detector: ref_size_factor must be positive");
}

void add_detector_parameters(nn::ParameterSet& params, const DetectorConfig& config, std::mt19937_64& rng) {
  const auto& w = config.widths;
  add_conv(params, "backbone.enc0", 27, config.in_channels, w[0], rng);
  for (int l = 1; l < DetectorConfig::kNumLevels; ++l) {
    add_conv(params, level_name("backbone.down", l), 8, w[static_cast<std::size_t>(l - 1)], w[static_cast<std::size_t>(l)], rng);
    add_conv(params, level_name("backbone.enc", l), 27, w[static_cast<std::size_t>(l)], w[static_cast<std::size_t>(l)], rng);
  }
  for (int l = DetectorConfig::kNumLevels - 2; l >= 0; --l) {
    add_conv(params, level_name("backbone.up", l), 8, w[static_cast<std::size_t>(l + 1)], w[static_cast<std::size_t>(l)], rng);
    add_conv(params, level_name("backbone.dec", l), 27, w[static_cast<std::size_t>(l)], w[static_cast<std::size_t>(l)], rng);
  }
  // Heads start near zero: uniform low class prior, reference-size boxes.
  std::normal_distribution<double> small(0.0, 0.01);
  const double prior_bias = -std::log((1.0 - 0.01) / 0.01);
  for (int l : config.head_levels) {
    const int c = w[static_cast<std::size_t>(l)];
    auto& cw = params.add(level_name("head", l) + ".cls.w", c, config.num_classes);
    for (Eigen::Index i = 0; i < cw.value.size(); ++i) cw.value.data()[i] = small(rng);
    params.add(level_name("head", l) + ".cls.b", 1, config.num_classes).value.setConstant(prior_bias);
    auto& rw = params.add(level_name("head", l) + ".reg.w", c, 6);
    for (Eigen::Index i = 0; i < rw.value.size(); ++i) rw.value.data()[i] = small(rng);
    params.add(level_name("head", l) + ".reg.b", 1, 6);
  }
}

BackboneOutput backbone_forward(nn::Graph& g, const SparseGrid& grid, nn::ParameterSet& params,
                                const DetectorConfig& config) {
  if (grid.coords.empty()) throw DataError("backbone_forward: empty grid");
  if (grid.features.cols() != config.in_channels) throw DataError("backbone_forward: grid has the wrong channel count");
  constexpr int L = DetectorConfig::kNumLevels;
  nn::Pyramid pyr = nn::build_pyramid(grid.coords, L);
  std::vector<nn::Var> enc(L);
  nn::Var x = g.constant(grid.features);
  enc[0] = nn::relu(g, conv(g, params, "backbone.enc0", x, pyr.subm[0]));
  for (int l = 1; l < L; ++l) {
    const auto u = static_cast<std::size_t>(l);
    nn::Var t = nn::relu(g, conv(g, params, level_name("backbone.down", l), enc[u - 1], pyr.down[u - 1]));
    enc[u] = nn::relu(g, conv(g, params, level_name("backbone.enc", l), t, pyr.subm[u]));
  }
  std::vector<nn::Var> dec(L);
  dec[L - 1] = enc[L - 1];
  for (int l = L - 2; l >= 0; --l) {
    const auto u = static_cast<std::size_t>(l);
    nn::Var up = nn::relu(g, conv(g, params, level_name("backbone.up", l), dec[u + 1], pyr.up[u]));
    dec[u] = nn::relu(g, conv(g, params, level_name("backbone.dec", l), nn::add(g, up, enc[u]), pyr.subm[u]));
  }
  BackboneOutput out;
  for (int l = 0; l < L; ++l) {
    const auto u = static_cast<std::size_t>(l);
    out.levels.push_back({l, 1 << l, std::move(pyr.coords[u]), dec[u]});
  }
  return out;
}

std::vector<HeadOutput> head_forward(nn::Graph& g, const BackboneOutput& bb, nn::ParameterSet& params,
                                     const DetectorConfig& config) {
  std::vector<HeadOutput> heads;
  for (int l : config.head_levels) {
    const FeatureLevel& fl = bb.levels.at(static_cast<std::size_t>(l));
    const std::string name = level_name("head", l);
    HeadOutput h;
    h.level = l;
    h.stride = fl.stride;
    h.coords = fl.coords;
    h.class_logits = nn::linear(g, fl.features, g.parameter(params.get(name + ".cls.w")),
                                g.parameter(params.get(name + ".cls.b")));
    h.box_deltas = nn::linear(g, fl.features, g.parameter(params.get(name + ".reg.w")),
                              g.parameter(params.get(name + ".reg.b")));
    heads.push_back(std::move(h));
  }
  return heads;
}

std::vector<LevelPrediction> detach(const nn::Graph& g, const std::vector<HeadOutput>& heads) {
  std::vector<LevelPrediction> out;
  for (const auto& h : heads) out.push_back({h.level, h.coords, g.value(h.class_logits), g.value(h.box_deltas)});
  return out;
}

BoxAnchor make_anchor(const DetectorConfig& config, int level, const Coord& coord) {
  const double step = (1 << level) * config.voxel_size;
  return {voxel_center(coord, step), step, config.ref_size(level)};
}

Box3D decode_box(const BoxAnchor& anchor, const Eigen::Ref<const nn::RowVector>& deltas) {
  Box3D b;
  for (int k = 0; k < 3; ++k) {
    b.center[k] = anchor.center[k] + deltas(k) * anchor.step;
    b.size[k] = std::exp(std::clamp(deltas(3 + k), -kMaxLogSize, kMaxLogSize)) * anchor.ref_size;
  }
  return b;
}

int DetectionTargets::num_positives() const {
  int n = 0;
  for (const auto& l : levels) n += static_cast<int>(std::count(l.label.begin(), l.label.end(), VoxelLabel::kPositive));
  return n;
}

DetectionTargets assign_targets(const std::vector<GroundTruthBox>& gt, const std::vector<HeadLevelOccupancy>& levels,
                                const DetectorConfig& config) {
  DetectionTargets targets;
  for (const auto& occ : levels) {
    const std::size_t m = occ.coords.size();
    LevelTargets t;
    t.level = occ.level;
    t.label.assign(m, VoxelLabel::kNegative);
    t.class_id.assign(m, -1);
    t.gt_index.assign(m, -1);
    t.regression = nn::Matrix::Zero(static_cast<Eigen::Index>(m), 6);
    std::vector<BoxAnchor> anchors(m);
    std::vector<std::vector<int>> members(gt.size());
    for (std::size_t i = 0; i < m; ++i) {
      anchors[i] = make_anchor(config, occ.level, occ.coords[i]);
      int best = -1;
      for (std::size_t j = 0; j < gt.size(); ++j) {
        if (!gt[j].box.contains(anchors[i].center)) continue;
        if (best < 0 || gt[j].box.volume() < gt[static_cast<std::size_t>(best)].box.volume()) best = static_cast<int>(j);
      }
      if (best >= 0) members[static_cast<std::size_t>(best)].push_back(static_cast<int>(i));
    }
    for (std::size_t j = 0; j < gt.size(); ++j) {
      auto& mem = members[j];
      const Vec3 c = gt[j].box.center;
      std::stable_sort(mem.begin(), mem.end(), [&](int a, int b) {
        return (anchors[static_cast<std::size_t>(a)].center - c).squaredNorm() <
               (anchors[static_cast<std::size_t>(b)].center - c).squaredNorm();
      });
      for (std::size_t r = 0; r < mem.size(); ++r) {
        const auto i = static_cast<std::size_t>(mem[r]);
        if (r >= static_cast<std::size_t>(config.k_max)) {
          t.label[i] = VoxelLabel::kIgnored;
          continue;
        }
        t.label[i] = VoxelLabel::kPositive;
        t.class_id[i] = gt[j].class_id;
        t.gt_index[i] = static_cast<int>(j);
        const BoxAnchor& a = anchors[i];
        for (int k = 0; k < 3; ++k) {
          t.regression(static_cast<Eigen::Index>(i), k) = (c[k] - a.center[k]) / a.step;
          t.regression(static_cast<Eigen::Index>(i), 3 + k) = std::log(gt[j].box.size[k] / a.ref_size);
        }
      }
    }
    targets.levels.push_back(std::move(t));
  }
  return targets;
}

double focal_loss(const nn::Matrix& logits, const std::vector<int>& labels, FocalParams params, nn::Matrix* grad) {
  const double a = params.alpha, gamma = params.gamma;
  if (grad) *grad = nn::Matrix::Zero(logits.rows(), logits.cols());
  double sum = 0.0;
  int positives = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label == -2) continue;
    if (label >= 0) ++positives;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double x = logits(i, c);
      const double p = sigmoid(x);
      const double log_p = -softplus(-x);
      const double log_1mp = -softplus(x);
      if (label == c) {
        const double w = std::pow(1.0 - p, gamma);
        sum += -a * w * log_p;
        if (grad) (*grad)(i, c) = a * w * (gamma * p * log_p - (1.0 - p));
      } else {
        const double w = std::pow(p, gamma);
        sum += -(1.0 - a) * w * log_1mp;
        if (grad) (*grad)(i, c) = (1.0 - a) * w * (p - gamma * (1.0 - p) * log_1mp);
      }
    }
  }
  const double norm = std::max(1, positives);
  if (grad) *grad /= norm;
  return sum / norm;
}

double iou_loss(const std::vector<Box3D>& pred, const std::vector<Box3D>& gt, nn::Matrix* grad) {
  const std::size_t n = pred.size();
  if (grad) *grad = nn::Matrix::Zero(static_cast<Eigen::Index>(n), 6);
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Box3D& a = pred[i];
    const Box3D& b = gt[i];
    const Vec3 amin = a.min(), amax = a.max(), bmin = b.min(), bmax = b.max();
    Vec3 overlap;
    Vec3 d_center, d_size;  // d(overlap_k)/d(center_k), d(overlap_k)/d(size_k)
    bool disjoint = false;
    for (int k = 0; k < 3; ++k) {
      const bool hi_from_a = amax[k] < bmax[k];
      const bool lo_from_a = amin[k] > bmin[k];
      overlap[k] = (hi_from_a ? amax[k] : bmax[k]) - (lo_from_a ? amin[k] : bmin[k]);
      if (overlap[k] <= 0.0) disjoint = true;
      d_center[k] = (hi_from_a ? 1.0 : 0.0) - (lo_from_a ? 1.0 : 0.0);
      d_size[k] = 0.5 * ((hi_from_a ? 1.0 : 0.0) + (lo_from_a ? 1.0 : 0.0));
    }
    if (disjoint) {
      sum += 1.0;
      continue;
    }
    const double inter = overlap.prod();
    const double va = a.volume();
    const double uni = va + b.volume() - inter;
    sum += 1.0 - inter / uni;
    if (!grad) continue;
    const double d_inter = (uni + inter) / (uni * uni);
    const double d_va = -inter / (uni * uni);
    for (int k = 0; k < 3; ++k) {
      const double di_dk = inter / overlap[k];
      (*grad)(static_cast<Eigen::Index>(i), k) = -(d_inter * di_dk * d_center[k]);
      (*grad)(static_cast<Eigen::Index>(i), 3 + k) = -(d_inter * di_dk * d_size[k] + d_va * va / a.size[k]);
    }
  }
  if (grad) *grad /= static_cast<double>(n);
  return sum / static_cast<double>(n);
}

double iou_loss_from_deltas(const nn::Matrix& deltas, const std::vector<BoxAnchor>& anchors,
                            const std::vector<Box3D>& gt, nn::Matrix* grad) {
  std::vector<Box3D> pred(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) pred[i] = decode_box(anchors[i], deltas.row(static_cast<Eigen::Index>(i)));
  nn::Matrix g_box;
  const double loss = iou_loss(pred, gt, grad ? &g_box : nullptr);
  if (grad) {
    *grad = nn::Matrix::Zero(deltas.rows(), 6);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      for (int k = 0; k < 3; ++k) {
        (*grad)(r, k) = g_box(r, k) * anchors[i].step;
        const double d = deltas(r, 3 + k);
        if (d > -kMaxLogSize && d < kMaxLogSize) (*grad)(r, 3 + k) = g_box(r, 3 + k) * pred[i].size[k];
      }
    }
  }
  return loss;
}

DetectionLosses detection_losses(nn::Graph& g, const std::vector<HeadOutput>& heads, const DetectionTargets& targets,
                                 const std::vector<GroundTruthBox>& gt, const DetectorConfig& config) {
  std::vector<nn::Var> logit_parts, delta_parts;
  std::vector<int> labels;
  std::vector<int> pos_rows;
  std::vector<BoxAnchor> anchors;
  std::vector<Box3D> pos_gt;
  int row = 0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const HeadOutput& head = heads[h];
    const LevelTargets& t = targets.levels.at(h);
    logit_parts.push_back(head.class_logits);
    delta_parts.push_back(head.box_deltas);
    for (std::size_t i = 0; i < head.coords.size(); ++i, ++row) {
      switch (t.label[i]) {
        case VoxelLabel::kIgnored: labels.push_back(-2); break;
        case VoxelLabel::kNegative: labels.push_back(-1); break;
        case VoxelLabel::kPositive:
          labels.push_back(t.class_id[i]);
          pos_rows.push_back(row);
          anchors.push_back(make_anchor(config, head.level, head.coords[i]));
          pos_gt.push_back(gt[static_cast<std::size_t>(t.gt_index[i])].box);
          break;
      }
    }
  }
  nn::Var logits = nn::concat_rows(g, logit_parts);
  nn::Matrix d_logits;
  const double l_cls = focal_loss(g.value(logits), labels, {config.focal_alpha, config.focal_gamma}, &d_logits);
  DetectionLosses out;
  out.cls = nn::scalar_with_grad(g, logits, l_cls, std::move(d_logits));
  nn::Var pos_deltas = nn::gather_rows(g, nn::concat_rows(g, delta_parts), pos_rows);
  nn::Matrix d_deltas;
  const double l_reg = iou_loss_from_deltas(g.value(pos_deltas), anchors, pos_gt, &d_deltas);
  out.reg = nn::scalar_with_grad(g, pos_deltas, l_reg, std::move(d_deltas));
  return out;
}

std::vector<ScoredBox> greedy_nms(std::vector<ScoredBox> candidates, double nms_iou, std::size_t max_keep) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.proposal.score != b.proposal.score) return a.proposal.score > b.proposal.score;
    if (a.coord != b.coord) return a.coord < b.coord;
    return a.level < b.level;
  });
  std::vector<ScoredBox> kept;
  for (const auto& c : candidates) {
    if (kept.size() >= max_keep) break;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const ScoredBox& k) {
      return box_iou(k.proposal.box, c.proposal.box) >= nms_iou;
    });
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

std::vector<Proposal> decode_proposals(const std::vector<LevelPrediction>& heads, const DetectorConfig& config,
                                       const NmsSettings& nms) {
  std::vector<ScoredBox> candidates;
  for (const auto& h : heads) {
    for (std::size_t i = 0; i < h.coords.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      Eigen::Index cls = 0;
      const double max_logit = h.class_logits.row(r).maxCoeff(&cls);
      const double score = sigmoid(max_logit);
      if (score < nms.score_threshold) continue;
      const Box3D box = decode_box(make_anchor(config, h.level, h.coords[i]), h.box_deltas.row(r));
      candidates.push_back({{box, static_cast<int>(cls), score}, h.level, h.coords[i]});
    }
  }
  auto kept = greedy_nms(std::move(candidates), nms.nms_iou, static_cast<std::size_t>(std::max(0, nms.max_proposals)));
  std::vector<Proposal> out;
  for (std::size_t i = 0; i < kept.size() && i < static_cast<std::size_t>(nms.max_proposals); ++i) {
    out.push_back(kept[i].proposal);
  }
  return out;
}

}  // namespace td3d
