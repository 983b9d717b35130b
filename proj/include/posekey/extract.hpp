#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/types.h>

#include "posekey/skeleton.hpp"

namespace posekey {

struct ExtractorConfig {
  double temperature = 0.05;          // in color-match score units
  double visibility_threshold = 0.5;  // heatmap mass in the best window
  int visibility_window = 5;          // pixels
};

/// Color-match score -||I(p) - c_j||^2 for every joint color c_j.
/// images: [3,H,W] or [B,3,H,W]; returns [K,H,W] or [B,K,H,W].
torch::Tensor color_match_scores(const torch::Tensor& images,
                                 const SkeletonTopology& topo = SkeletonTopology::dance15());

/// Per-joint spatial softmax of score / temperature. Each [H,W] map sums to 1.
torch::Tensor joint_heatmaps(const torch::Tensor& images,
                             const SkeletonTopology& topo = SkeletonTopology::dance15(),
                             const ExtractorConfig& cfg = {});

struct SoftArgmaxResult {
  torch::Tensor coords;   // [..., K, 2] pixels, differentiable
  torch::Tensor visible;  // [..., K] bool
};

/// Expected pixel position under each heatmap ([..., K, H, W]). A joint is
/// visible when some window holds at least `visibility_threshold` of its mass.
SoftArgmaxResult soft_argmax_extract(const torch::Tensor& heatmaps, const ExtractorConfig& cfg = {});

class PoseExtractor {
 public:
  virtual ~PoseExtractor() = default;
  virtual const SkeletonTopology& topology() const = 0;
  virtual bool differentiable() const = 0;
  /// image: [3,H,W] in [-1,1]. Returns a pixel-space pose.
  virtual Pose extract(const torch::Tensor& image) = 0;
};

/// Heatmap + soft-argmax extractor keyed on the synthetic joint colors.
class SoftArgmaxExtractor final : public PoseExtractor {
 public:
  explicit SoftArgmaxExtractor(ExtractorConfig cfg = {},
                               const SkeletonTopology& topo = SkeletonTopology::dance15())
      : cfg_(cfg), topo_(&topo) {}

  const SkeletonTopology& topology() const override { return *topo_; }
  bool differentiable() const override { return true; }
  Pose extract(const torch::Tensor& image) override;
  /// images: [B,3,H,W]; gradients flow from coords back to the pixels.
  SoftArgmaxResult extract_batch(const torch::Tensor& images) const;
  const ExtractorConfig& config() const { return cfg_; }

 private:
  ExtractorConfig cfg_;
  const SkeletonTopology* topo_;
};

/// Declares an out-of-process keypoint detector.
struct AdapterConfig {
  std::string command;          // run through /bin/sh -c
  int joint_count = 0;          // keypoints per detector record
  std::vector<int> index_map;   // internal joint -> detector joint, -1 = unmapped
  std::chrono::milliseconds timeout{30000};

  /// Identity map for a detector that already emits the internal topology.
  static AdapterConfig identity(std::string command, const SkeletonTopology& topo);
  /// 33-landmark MediaPipe layout onto dance15; pelvis and neck have no
  /// landmark and stay invisible.
  static AdapterConfig mediapipe33(std::string command);
};

/// Long-lived detector subprocess. Requests are "<path>\n"; each response is
/// one JSON line {"image": ..., "keypoints": [[x, y, v], ...]}. A handle owns
/// its process and must not be shared between threads.
class ExternalDetector final : public PoseExtractor {
 public:
  explicit ExternalDetector(AdapterConfig cfg,
                            const SkeletonTopology& topo = SkeletonTopology::dance15());
  ~ExternalDetector() override;
  ExternalDetector(const ExternalDetector&) = delete;
  ExternalDetector& operator=(const ExternalDetector&) = delete;

  const SkeletonTopology& topology() const override { return *topo_; }
  bool differentiable() const override { return false; }
  Pose detect(const std::filesystem::path& image_path);
  /// Writes the image to a temporary PNG and detects on it.
  Pose extract(const torch::Tensor& image) override;

 private:
  void start();
  void stop();
  std::string read_line();

  AdapterConfig cfg_;
  const SkeletonTopology* topo_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string pending_;
};

/// Maps one detector record onto the internal topology.
Pose parse_detector_record(const std::string& line, const AdapterConfig& cfg,
                           const SkeletonTopology& topo);

/// One-shot convenience: start the detector, query a single image, stop.
Pose external_detect(const std::filesystem::path& image_path, const AdapterConfig& cfg,
                     const SkeletonTopology& topo = SkeletonTopology::dance15());

}  // namespace posekey
