#include "posekey/skeleton.hpp"

#include <cmath>
#include <numeric>
#include <set>

#include <torch/torch.h>

#include "posekey/errors.hpp"

namespace posekey {

SkeletonTopology::SkeletonTopology(std::vector<std::string> joint_names, std::vector<Bone> bones,
                                   std::vector<AngleTriple> angle_triples, int torso_edge)
    : joint_names_(std::move(joint_names)),
      bones_(std::move(bones)),
      angle_triples_(std::move(angle_triples)),
      torso_edge_(torso_edge) {
  const int k = joint_count();
  if (k < 2) throw ArgumentError("topology needs at least two joints");
  auto in_range = [k](int i) { return i >= 0 && i < k; };

  std::set<std::pair<int, int>> seen;
  parent_bone_.assign(k, -1);
  for (size_t b = 0; b < bones_.size(); ++b) {
    const auto [p, c] = bones_[b];
    if (!in_range(p) || !in_range(c) || p == c)
      throw ArgumentError("bone " + std::to_string(b) + " has an invalid joint index");
    if (!seen.insert({std::min(p, c), std::max(p, c)}).second)
      throw ArgumentError("duplicate bone " + std::to_string(b));
    if (parent_bone_[c] != -1)
      throw ArgumentError("joint " + joint_names_[c] + " has two parents");
    parent_bone_[c] = static_cast<int>(b);
  }
  if (static_cast<int>(bones_.size()) != k - 1)
    throw ArgumentError("bone graph must be a tree (|bones| = K-1)");
  int roots = 0;
  for (int j = 0; j < k; ++j)
    if (parent_bone_[j] == -1) {
      root_ = j;
      ++roots;
    }
  if (roots != 1) throw ArgumentError("bone graph must have exactly one root");

  // Breadth-first order from the root; also proves connectivity.
  std::vector<bool> reached(k, false);
  std::vector<int> frontier{root_};
  reached[root_] = true;
  while (!frontier.empty()) {
    std::vector<int> next;
    for (int j : frontier)
      for (size_t b = 0; b < bones_.size(); ++b)
        if (bones_[b].parent == j && !reached[bones_[b].child]) {
          reached[bones_[b].child] = true;
          bone_order_.push_back(static_cast<int>(b));
          next.push_back(bones_[b].child);
        }
    frontier = std::move(next);
  }
  if (static_cast<int>(bone_order_.size()) != k - 1)
    throw ArgumentError("bone graph is not connected");

  if (torso_edge_ < 0 || torso_edge_ >= static_cast<int>(bones_.size()))
    throw ArgumentError("torso_edge does not name an existing bone");
  for (const auto& t : angle_triples_)
    if (!in_range(t.a) || !in_range(t.pivot) || !in_range(t.b) || t.a == t.pivot ||
        t.b == t.pivot)
      throw ArgumentError("angle triple has an invalid joint index");
}

const SkeletonTopology& SkeletonTopology::dance15() {
  static const SkeletonTopology topo(
      {"pelvis", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow",
       "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle"},
      {{0, 1}, {1, 2}, {1, 3}, {3, 4}, {4, 5}, {1, 6}, {6, 7}, {7, 8},
       {0, 9}, {9, 10}, {10, 11}, {0, 12}, {12, 13}, {13, 14}},
      {{3, 4, 5}, {6, 7, 8}, {9, 10, 11}, {12, 13, 14},
       {1, 3, 4}, {1, 6, 7}, {0, 9, 10}, {0, 12, 13}},
      0);
  return topo;
}

int SkeletonTopology::joint_index(const std::string& name) const {
  for (int j = 0; j < joint_count(); ++j)
    if (joint_names_[j] == name) return j;
  throw ArgumentError("unknown joint '" + name + "'");
}

Pose Pose::from_points(const std::vector<std::array<double, 2>>& points, CoordSpace space) {
  return from_points(points, std::vector<bool>(points.size(), true), space);
}

Pose Pose::from_points(const std::vector<std::array<double, 2>>& points,
                       const std::vector<bool>& visible, CoordSpace space) {
  if (points.size() != visible.size())
    throw ArgumentError("points and visibility lengths differ");
  const auto k = static_cast<int64_t>(points.size());
  Pose p;
  p.coords = torch::empty({k, 2}, torch::kFloat64);
  p.visible = torch::empty({k}, torch::kBool);
  auto c = p.coords.accessor<double, 2>();
  auto v = p.visible.accessor<bool, 1>();
  for (int64_t i = 0; i < k; ++i) {
    c[i][0] = points[i][0];
    c[i][1] = points[i][1];
    v[i] = visible[i];
  }
  p.space = space;
  return p;
}

std::array<double, 2> Pose::point(int joint) const {
  auto row = coords[joint].to(torch::kFloat64);
  return {row[0].item<double>(), row[1].item<double>()};
}

bool Pose::is_visible(int joint) const { return visible[joint].item<bool>(); }

namespace {

void require_dims(ImageDims dims) {
  if (dims.width <= 0 || dims.height <= 0)
    throw ArgumentError("image dimensions must be positive");
}

torch::Tensor dims_tensor(ImageDims dims, const torch::Tensor& like) {
  return torch::tensor({static_cast<double>(dims.width), static_cast<double>(dims.height)},
                       like.options());
}

torch::Tensor safe_norm(const torch::Tensor& v) {
  return (v * v).sum(-1).clamp_min(kDegenerateLength * kDegenerateLength).sqrt();
}

}  // namespace

NormalizeResult normalize_keypoints(const Pose& pose, ImageDims dims) {
  require_dims(dims);
  if (pose.space != CoordSpace::pixel) throw ArgumentError("normalize_keypoints expects pixel space");
  auto scaled = pose.coords / dims_tensor(dims, pose.coords);
  auto outside = ((scaled < 0) | (scaled > 1)).any(-1) & pose.visible;
  NormalizeResult r;
  r.clamped = static_cast<int>(outside.sum().item<int64_t>());
  auto vis = pose.visible.unsqueeze(-1);
  r.pose.coords = torch::where(vis, scaled.clamp(0.0, 1.0), scaled);
  r.pose.visible = pose.visible.clone();
  r.pose.space = CoordSpace::normalized;
  return r;
}

Pose denormalize_keypoints(const Pose& pose, ImageDims dims) {
  require_dims(dims);
  if (pose.space != CoordSpace::normalized)
    throw ArgumentError("denormalize_keypoints expects normalized space");
  return {pose.coords * dims_tensor(dims, pose.coords), pose.visible.clone(), CoordSpace::pixel};
}

Pose normalize_by_torso(const Pose& pose, const SkeletonTopology& topo) {
  if (pose.joint_count() != topo.joint_count()) throw ArgumentError("pose/topology joint count mismatch");
  const auto& torso = topo.torso();
  auto origin = pose.coords[torso.parent];
  const double len = (pose.coords[torso.child] - origin).norm().item<double>();
  if (!(len >= kDegenerateLength)) throw DegeneratePoseError("torso length is degenerate");
  return {(pose.coords - origin) / len, pose.visible.clone(), CoordSpace::torso};
}

torch::Tensor keypoint_loss(const torch::Tensor& gen, const torch::Tensor& gt,
                            const torch::Tensor& mask) {
  if (gen.sizes() != gt.sizes() || gen.size(-1) != 2)
    throw ArgumentError("keypoint tensors must have identical [..., K, 2] shapes");
  if (mask.sizes() != gen.sizes().slice(0, gen.dim() - 1))
    throw ArgumentError("mask must be shaped [..., K]");
  auto m = mask.to(gen.scalar_type());
  auto sq = (gen - gt).pow(2).sum(-1) * m;
  return sq.sum(-1) / m.sum(-1).clamp_min(1.0);
}

KeypointLossResult keypoint_loss(const Pose& gen, const Pose& gt) {
  if (gen.joint_count() != gt.joint_count()) throw ArgumentError("pose topology mismatch");
  if (gen.space != gt.space) throw ArgumentError("poses are in different coordinate spaces");
  auto mask = gen.visible & gt.visible;
  KeypointLossResult r;
  r.defined = mask.any().item<bool>();
  r.value = r.defined ? keypoint_loss(gen.coords, gt.coords, mask).item<double>() : 0.0;
  return r;
}

RelativePoseFeatures relative_pose_features(const torch::Tensor& coords,
                                            const torch::Tensor& visible,
                                            const SkeletonTopology& topo) {
  if (coords.size(-2) != topo.joint_count() || coords.size(-1) != 2)
    throw ArgumentError("coords must be shaped [..., K, 2] for the topology");
  const auto& bones = topo.bones();
  const auto& triples = topo.angle_triples();
  auto idx = [&](auto getter, const auto& items) {
    std::vector<int64_t> v;
    v.reserve(items.size());
    for (const auto& it : items) v.push_back(getter(it));
    return torch::tensor(v, torch::kLong).to(coords.device());
  };
  auto parents = idx([](const Bone& b) { return b.parent; }, bones);
  auto children = idx([](const Bone& b) { return b.child; }, bones);

  auto vec = coords.index_select(-2, children) - coords.index_select(-2, parents);
  auto raw_len = (vec * vec).sum(-1).sqrt().detach();
  auto len = safe_norm(vec);
  auto torso_len = len.select(-1, topo.torso_edge()).unsqueeze(-1);
  auto torso_ok = raw_len.select(-1, topo.torso_edge()).unsqueeze(-1) >= kDegenerateLength;
  auto ends_visible = visible.index_select(-1, parents) & visible.index_select(-1, children);
  const auto& torso = topo.torso();
  auto torso_visible = (visible.select(-1, torso.parent) & visible.select(-1, torso.child)).unsqueeze(-1);

  RelativePoseFeatures f;
  f.ratio_valid = ends_visible & torso_visible & torso_ok;
  f.bone_length_ratios = torch::where(f.ratio_valid, len / torso_len, torch::zeros_like(len));

  auto ia = idx([](const AngleTriple& t) { return t.a; }, triples);
  auto ip = idx([](const AngleTriple& t) { return t.pivot; }, triples);
  auto ib = idx([](const AngleTriple& t) { return t.b; }, triples);
  auto pivot = coords.index_select(-2, ip);
  auto u = coords.index_select(-2, ia) - pivot;
  auto w = coords.index_select(-2, ib) - pivot;
  auto arms_ok = ((u * u).sum(-1).sqrt() >= kDegenerateLength) &
                 ((w * w).sum(-1).sqrt() >= kDegenerateLength);
  auto angle_visible = visible.index_select(-1, ia) & visible.index_select(-1, ip) &
                       visible.index_select(-1, ib);
  // Substitute a fixed unit vector on degenerate arms so atan2 never sees (0, 0).
  auto unit = torch::zeros_like(u);
  unit.select(-1, 0).fill_(1.0);
  auto ok = arms_ok.detach().unsqueeze(-1);
  auto us = torch::where(ok, u, unit);
  auto ws = torch::where(ok, w, unit);
  auto cross = us.select(-1, 0) * ws.select(-1, 1) - us.select(-1, 1) * ws.select(-1, 0);
  auto dot = (us * ws).sum(-1);
  auto angle = torch::atan2(cross.abs(), dot);
  f.angle_valid = arms_ok & angle_visible;
  f.joint_angles = torch::where(f.angle_valid, angle, torch::zeros_like(angle));
  return f;
}

RelativePoseFeatures relative_pose_features(const Pose& pose, const SkeletonTopology& topo) {
  if (pose.joint_count() != topo.joint_count()) throw ArgumentError("pose/topology joint count mismatch");
  const auto& torso = topo.torso();
  const double len = (pose.coords[torso.child] - pose.coords[torso.parent]).norm().item<double>();
  if (!std::isfinite(len)) throw ArgumentError("pose coordinates must be finite");
  if (len < kDegenerateLength) throw DegeneratePoseError("torso length is degenerate");
  return relative_pose_features(pose.coords, pose.visible, topo);
}

torch::Tensor pose_consistency_loss(const RelativePoseFeatures& gen,
                                    const RelativePoseFeatures& gt) {
  if (gen.bone_length_ratios.sizes() != gt.bone_length_ratios.sizes() ||
      gen.joint_angles.sizes() != gt.joint_angles.sizes())
    throw ArgumentError("relative feature layouts differ");
  auto rm = (gen.ratio_valid & gt.ratio_valid).to(gen.bone_length_ratios.scalar_type());
  auto am = (gen.angle_valid & gt.angle_valid).to(gen.joint_angles.scalar_type());
  auto r = (gen.bone_length_ratios - gt.bone_length_ratios).pow(2) * rm;
  auto a = (gen.joint_angles - gt.joint_angles).pow(2) * am;
  return r.sum(-1) + a.sum(-1);
}

void LossWeights::validate() const {
  if (!std::isfinite(lambda_kp) || !std::isfinite(lambda_pose) || lambda_kp < 0 || lambda_pose < 0)
    throw ArgumentError("loss weights must be finite and non-negative");
}

Pose translate(const Pose& pose, double dx, double dy) {
  auto shift = torch::tensor({dx, dy}, pose.coords.options());
  return {pose.coords + shift, pose.visible.clone(), pose.space};
}

Pose rotate_about_centroid(const Pose& pose, double radians) {
  auto centroid = pose.coords.mean(0, true);
  const double c = std::cos(radians), s = std::sin(radians);
  auto rot = torch::tensor({c, s, -s, c}, pose.coords.options()).view({2, 2});
  return {torch::matmul(pose.coords - centroid, rot) + centroid, pose.visible.clone(), pose.space};
}

Pose scale_about_centroid(const Pose& pose, double factor) {
  auto centroid = pose.coords.mean(0, true);
  return {(pose.coords - centroid) * factor + centroid, pose.visible.clone(), pose.space};
}

}  // namespace posekey
