#pragma once

#include <array>
#include <string>
#include <vector>

#include <torch/types.h>

namespace posekey {

/// Lower bound on bone and angle-arm lengths, in the units of the pose.
inline constexpr double kDegenerateLength = 1e-6;

enum class CoordSpace { pixel, normalized, torso };

struct ImageDims {
  int width = 0;
  int height = 0;
  bool operator==(const ImageDims&) const = default;
};

struct Bone {
  int parent = 0;
  int child = 0;
  bool operator==(const Bone&) const = default;
};

/// Unsigned angle measured at `pivot` between the arms pivot->a and pivot->b.
struct AngleTriple {
  int a = 0;
  int pivot = 0;
  int b = 0;
  bool operator==(const AngleTriple&) const = default;
};

/// A rooted kinematic tree over K named joints. Bones are directed
/// parent -> child; the constructor rejects anything that is not a tree.
class SkeletonTopology {
 public:
  SkeletonTopology(std::vector<std::string> joint_names, std::vector<Bone> bones,
                   std::vector<AngleTriple> angle_triples, int torso_edge);

  /// The 15-joint figure used by the synthetic dataset: pelvis root, neck,
  /// head, shoulders, elbows, wrists, hips, knees, ankles. Torso = pelvis->neck.
  static const SkeletonTopology& dance15();

  int joint_count() const { return static_cast<int>(joint_names_.size()); }
  int feature_count() const {
    return static_cast<int>(bones_.size() + angle_triples_.size());
  }
  const std::vector<std::string>& joint_names() const { return joint_names_; }
  const std::vector<Bone>& bones() const { return bones_; }
  const std::vector<AngleTriple>& angle_triples() const { return angle_triples_; }
  int torso_edge() const { return torso_edge_; }
  const Bone& torso() const { return bones_[torso_edge_]; }
  int root() const { return root_; }
  /// Bone indices ordered so that every bone appears after the bone that
  /// ends at its parent joint.
  const std::vector<int>& bone_order() const { return bone_order_; }
  /// Index of the bone ending at `joint`, or -1 for the root.
  int parent_bone(int joint) const { return parent_bone_[joint]; }
  int joint_index(const std::string& name) const;

  bool operator==(const SkeletonTopology& o) const {
    return joint_names_ == o.joint_names_ && bones_ == o.bones_ &&
           angle_triples_ == o.angle_triples_ && torso_edge_ == o.torso_edge_;
  }

 private:
  std::vector<std::string> joint_names_;
  std::vector<Bone> bones_;
  std::vector<AngleTriple> angle_triples_;
  int torso_edge_ = 0;
  int root_ = 0;
  std::vector<int> bone_order_;
  std::vector<int> parent_bone_;
};

/// K 2D keypoints. `coords` is a [K,2] tensor (x, y), `visible` a [K] bool tensor.
struct Pose {
  torch::Tensor coords;
  torch::Tensor visible;
  CoordSpace space = CoordSpace::pixel;

  int joint_count() const { return static_cast<int>(coords.size(0)); }

  static Pose from_points(const std::vector<std::array<double, 2>>& points,
                          CoordSpace space = CoordSpace::pixel);
  static Pose from_points(const std::vector<std::array<double, 2>>& points,
                          const std::vector<bool>& visible, CoordSpace space);
  std::array<double, 2> point(int joint) const;
  bool is_visible(int joint) const;
};

struct NormalizeResult {
  Pose pose;
  int clamped = 0;  // visible keypoints that were outside the frame
};

/// Divides x by W and y by H. Visible out-of-frame keypoints are clamped into
/// [0,1] and counted.
NormalizeResult normalize_keypoints(const Pose& pose, ImageDims dims);
Pose denormalize_keypoints(const Pose& pose, ImageDims dims);

/// Alternate normalization: offsets from the torso's parent joint divided by
/// torso length. Throws DegeneratePoseError when the torso has collapsed.
Pose normalize_by_torso(const Pose& pose, const SkeletonTopology& topo);

struct KeypointLossResult {
  double value = 0.0;
  bool defined = false;  // false when no joint is visible in both poses
};

/// Mean squared distance over joints visible in both poses.
KeypointLossResult keypoint_loss(const Pose& gen, const Pose& gt);

/// Tensor form. `gen`, `gt`: [..., K, 2]; `mask`: [..., K] bool.
/// Returns the per-pose loss [...] (0 where the mask is empty); differentiable
/// in both coordinate tensors.
torch::Tensor keypoint_loss(const torch::Tensor& gen, const torch::Tensor& gt,
                            const torch::Tensor& mask);

struct RelativePoseFeatures {
  torch::Tensor bone_length_ratios;  // [..., B]
  torch::Tensor joint_angles;        // [..., A], radians in [0, pi]
  torch::Tensor ratio_valid;         // [..., B] bool
  torch::Tensor angle_valid;         // [..., A] bool

  int64_t feature_count() const {
    return bone_length_ratios.size(-1) + joint_angles.size(-1);
  }
};

/// Single-pose features. Throws DegeneratePoseError when the torso bone is
/// shorter than kDegenerateLength.
RelativePoseFeatures relative_pose_features(const Pose& pose, const SkeletonTopology& topo);

/// Batched, non-throwing features for coords [..., K, 2] and visibility
/// [..., K]. A degenerate torso invalidates every ratio of that pose.
RelativePoseFeatures relative_pose_features(const torch::Tensor& coords,
                                            const torch::Tensor& visible,
                                            const SkeletonTopology& topo);

/// Sum of squared feature differences over features valid on both sides.
/// Returns a tensor shaped like the leading batch dimensions.
torch::Tensor pose_consistency_loss(const RelativePoseFeatures& gen,
                                    const RelativePoseFeatures& gt);

struct LossWeights {
  double lambda_kp = 1.0;
  double lambda_pose = 1.0;
  void validate() const;
};

/// Rigid transforms used by the invariance tests and the synthetic renderer.
Pose translate(const Pose& pose, double dx, double dy);
Pose rotate_about_centroid(const Pose& pose, double radians);
Pose scale_about_centroid(const Pose& pose, double factor);

}  // namespace posekey
