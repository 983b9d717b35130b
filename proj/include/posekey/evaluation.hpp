#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/pimpl.h>
#include <torch/types.h>

#include "posekey/config.hpp"
#include "posekey/extract.hpp"
#include "posekey/synth.hpp"

namespace posekey {

/// Deterministic image -> F-vector map used for FID.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int dim() const = 0;
  virtual std::string source() const = 0;  // "pretrained-classifier" or "trained-on-synthetic"
  /// images [N,3,H,W] in [-1,1] -> [N,F] float64
  virtual torch::Tensor features(const torch::Tensor& images) = 0;
};

class ConvClassifierImpl : public torch::nn::Module {
 public:
  ConvClassifierImpl(int num_classes, int feature_dim);
  torch::Tensor features(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ConvClassifier);

/// Small convolutional classifier trained on the synthetic train split; its
/// penultimate activations (F = 256) are the FID features.
class ClassifierFeatureExtractor final : public FeatureExtractor {
 public:
  static constexpr int kFeatureDim = 256;

  explicit ClassifierFeatureExtractor(int num_classes);
  static ClassifierFeatureExtractor train(const Dataset& train_set, int num_classes, uint64_t seed,
                                          int epochs = 3);

  int dim() const override { return kFeatureDim; }
  std::string source() const override { return "trained-on-synthetic"; }
  torch::Tensor features(const torch::Tensor& images) override;
  double accuracy(const Dataset& ds);
  int num_classes() const { return num_classes_; }

  void save(const std::filesystem::path& file) const;
  static ClassifierFeatureExtractor load(const std::filesystem::path& file);

 private:
  int num_classes_;
  ConvClassifier net_{nullptr};
};

struct GaussianStats {
  torch::Tensor mean;        // [F] float64
  torch::Tensor covariance;  // [F,F] float64, unbiased
};

/// features: [N,F] with N >= 2.
GaussianStats gaussian_stats(const torch::Tensor& features);

/// Fréchet distance between two Gaussians. Covariances are symmetrized;
/// eigenvalues below -1e-6 (relative to the largest magnitude, floor 1)
/// raise NumericError.
double fid(const GaussianStats& a, const GaussianStats& b);

inline constexpr int kMsSsimMaxScales = 5;

struct MsSsimResult {
  torch::Tensor value;  // [N] float64 in [0,1]
  int scales = kMsSsimMaxScales;
  bool reduced = false;  // fewer scales than requested because the images are small
};

/// Largest scale count <= `requested` whose coarsest level still fits the
/// 11-pixel window.
int ms_ssim_scales_for(int height, int width, int requested = kMsSsimMaxScales);

/// MS-SSIM over image pairs in [-1,1] ([3,H,W] or [N,3,H,W]); computed per
/// channel on [0,1] data and averaged over channels.
MsSsimResult ms_ssim_batch(const torch::Tensor& a, const torch::Tensor& b,
                           int scales = kMsSsimMaxScales);
double ms_ssim(const torch::Tensor& a, const torch::Tensor& b, int scales = kMsSsimMaxScales);

struct KeypointErrorReport {
  double mean_px = 0.0;  // over all scored samples
  std::vector<double> per_class_px;
  std::vector<int> per_class_scored;
  int missing = 0;  // samples where extraction failed or found no joint
  double visible_fraction = 0.0;
};

/// Per sample: extract the pose and average the pixel distance over its
/// visible joints to the closest reference pose of its class; references are
/// pixel-space poses, one list per class.
KeypointErrorReport mean_keypoint_error(const torch::Tensor& images, const torch::Tensor& labels,
                                        PoseExtractor& extractor,
                                        const std::vector<std::vector<Pose>>& references);
/// References are the canonical poses of `bank` scaled to the image size.
KeypointErrorReport mean_keypoint_error(const torch::Tensor& images, const torch::Tensor& labels,
                                        PoseExtractor& extractor,
                                        const std::vector<PostureSpec>& bank);

struct ClassMetrics {
  int class_id = 0;
  double fid = 0.0;
  double ms_ssim = 0.0;
  double mean_kp_err = 0.0;
};

struct MetricReport {
  std::string model;  // model kind name, or "reference"
  double lambda_kp = 0.0;
  double lambda_pose = 0.0;
  uint64_t seed = 0;         // training seed
  uint64_t sample_seed = 0;  // seed of the evaluated samples
  double fid = 0.0;
  double ms_ssim = 0.0;
  double mean_kp_err = 0.0;
  int kp_missing = 0;
  std::vector<ClassMetrics> per_class;
  int n_samples_per_class = 0;
  int ms_ssim_scales = 0;
  std::string feature_source;
  std::string config_hash;
  std::string dataset_hash;
  std::vector<std::string> caveats;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

/// "neither", "kp-only", "pose-only" or "both" from the applied λ weights.
std::string ablation_variant(const MetricReport& r);

/// Scores `generated` (labels class-major or arbitrary) against all real
/// images of `real`: global and per-class FID, MS-SSIM to the nearest real
/// exemplar of the same class, and keypoint error against the bank.
MetricReport evaluate_samples(const torch::Tensor& generated, const torch::Tensor& labels,
                              const Dataset& real, const std::vector<PostureSpec>& bank,
                              FeatureExtractor& features, PoseExtractor& pose_extractor);

/// Loads a checkpoint, samples n_samples images per class with `seed` and
/// scores them against the whole dataset.
MetricReport evaluate_run(const std::filesystem::path& checkpoint, const DatasetManifest& manifest,
                          FeatureExtractor& features, int n_samples, uint64_t seed,
                          PoseExtractor* pose_extractor = nullptr);

/// Recommended minimum samples per class; fewer is allowed but noted as a caveat.
inline constexpr int kRecommendedSamplesPerClass = 100;

/// Writes table1.csv, table2.csv, table3.csv, per-class CSVs, one bar chart
/// per metric and metadata.json under out_dir. Output is byte-deterministic.
void emit_report(const std::vector<MetricReport>& reports, const std::filesystem::path& out_dir);

/// Writes per_class_metrics.csv for a single report.
void write_per_class_csv(const MetricReport& r, const std::filesystem::path& file);

}  // namespace posekey
