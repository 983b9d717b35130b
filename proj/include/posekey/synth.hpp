#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/types.h>

#include "posekey/skeleton.hpp"

namespace posekey {

/// A codified key posture: absolute bone orientations (radians, image axes
/// with y pointing down) and bone lengths in normalized units, hung from a
/// root joint anchored at `root_position`.
struct PostureSpec {
  int class_id = 0;
  std::string name;
  std::vector<double> canonical_angles;
  std::vector<double> bone_lengths;
  std::array<double, 2> root_position{0.5, 0.5};
  bool symmetric = false;
};

/// Forward kinematics in normalized coordinates. `joint_jitter` (one entry
/// per bone, optional) rotates each bone and its whole subtree about the
/// bone's parent joint.
Pose forward_kinematics(const PostureSpec& spec, const SkeletonTopology& topo,
                        const std::vector<double>& joint_jitter = {});

/// Deterministic bank of `count` well-separated postures for dance15.
/// Even class ids are bilaterally symmetric, odd ones asymmetric.
std::vector<PostureSpec> make_posture_bank(int count, uint64_t seed);

/// Minimum pairwise separations the bank guarantees.
inline constexpr double kBankMinFeatureDistance = 0.1;   // pose consistency loss
inline constexpr double kBankMinKeypointDistance = 0.003;  // keypoint loss, normalized
inline constexpr double kBankMinJointSpacing = 0.08;       // within one posture
inline constexpr double kBankMargin = 0.05;

/// Per-joint disc color in [-1,1]^3. Colors are pairwise at least 1 apart and
/// all have a saturated (=1) channel, so none is near the background or bone
/// colors.
const std::vector<std::array<float, 3>>& joint_colors();
inline constexpr std::array<float, 3> kBackgroundColor{-1.0f, -1.0f, -1.0f};
inline constexpr std::array<float, 3> kBoneColor{-0.3f, -0.3f, -0.3f};

double joint_radius_px(ImageDims dims);

struct RenderResult {
  torch::Tensor image;  // [3,H,W] float32 in [-1,1]
  Pose keypoints;       // pixel space
  int frame_warnings = 0;
};

/// Draws anti-aliased bones and per-joint color-coded discs on a black
/// canvas. Deterministic in `seed`.
RenderResult render_posture(const PostureSpec& spec, double jitter_std, uint64_t seed,
                            ImageDims dims);

/// Draws an explicit pixel-space pose (no kinematics, no jitter).
torch::Tensor render_pose(const Pose& pixel_pose, ImageDims dims);

/// Order-independent per-sample seed.
uint64_t derive_seed(uint64_t seed, uint64_t index);

enum class Split { train, eval };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string image_path;  // relative to the manifest root
  int class_id = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::filesystem::path pose_file;  // poses.jsonl

  std::filesystem::path manifest_file() const { return root / "manifest.csv"; }
  int class_count() const;
  size_t count(Split s) const;

  /// Reads root/manifest.csv and checks every image and annotation exists.
  static DatasetManifest read(const std::filesystem::path& root);
  void write() const;
};

struct BankFile {
  std::vector<PostureSpec> bank;
  ImageDims dims;
  double jitter_std = 0.0;
  uint64_t seed = 0;
};
void write_bank(const std::filesystem::path& file, const BankFile& bank);
BankFile read_bank(const std::filesystem::path& file);

/// Renders bank.size() * per_class images into out_dir/images, plus
/// poses.jsonl, manifest.csv and bank.json. 90/10 train/eval split per class.
DatasetManifest generate_dataset(const std::vector<PostureSpec>& bank, int per_class,
                                 double jitter_std, ImageDims dims,
                                 const std::filesystem::path& out_dir, uint64_t seed);

/// SHA-256 over manifest.csv, poses.jsonl and every image, in manifest order.
std::string manifest_hash(const DatasetManifest& manifest);

struct Sample {
  torch::Tensor image;  // [3,H,W]
  int class_id = 0;
  Pose keypoints;       // pixel space
};

struct Batch {
  torch::Tensor images;     // [B,3,H,W]
  torch::Tensor labels;     // [B] int64
  torch::Tensor keypoints;  // [B,K,2] float32, pixels
  torch::Tensor visible;    // [B,K] bool
  // extractor output on `images` when the dataset caches it, else undefined
  torch::Tensor ref_coords;
  torch::Tensor ref_visible;
};

/// Decoded dataset held in memory.
class Dataset {
 public:
  Dataset() = default;
  Dataset(torch::Tensor images, torch::Tensor labels, torch::Tensor keypoints,
          torch::Tensor visible, std::vector<std::string> paths);

  size_t size() const { return paths_.size(); }
  ImageDims dims() const;
  Sample get(size_t i) const;
  Batch gather(const std::vector<int64_t>& indices) const;
  /// Batches over a permutation fixed by `shuffle_seed`; the last batch may be short.
  std::vector<std::vector<int64_t>> batch_indices(int batch_size, uint64_t shuffle_seed) const;
  std::vector<Batch> batches(int batch_size, uint64_t shuffle_seed) const;

  const torch::Tensor& images() const { return images_; }
  const torch::Tensor& labels() const { return labels_; }
  const torch::Tensor& keypoints() const { return keypoints_; }
  const torch::Tensor& visible() const { return visible_; }
  const std::vector<std::string>& paths() const { return paths_; }

  /// Attaches per-image reference poses ([N,K,2], [N,K]) that gather() copies into batches.
  void set_reference_poses(torch::Tensor coords, torch::Tensor visible);

 private:
  torch::Tensor images_, labels_, keypoints_, visible_;
  torch::Tensor ref_coords_, ref_visible_;
  std::vector<std::string> paths_;
};

/// Loads the entries of `split` (or all entries when `split` is empty),
/// decoding images to [-1,1].
Dataset load_dataset(const DatasetManifest& manifest, std::optional<Split> split = std::nullopt,
                     const SkeletonTopology& topo = SkeletonTopology::dance15());

}  // namespace posekey
