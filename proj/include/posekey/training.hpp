#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/optim/adam.h>
#include <torch/types.h>

#include "posekey/config.hpp"
#include "posekey/diffusion.hpp"
#include "posekey/extract.hpp"
#include "posekey/gan.hpp"
#include "posekey/skeleton.hpp"
#include "posekey/synth.hpp"

namespace posekey {

inline constexpr const char* kCheckpointHeader = "posekey-ckpt-v1\n";

struct StepRecord {
  int64_t step = 0;
  int epoch = 0;
  double l_main = 0.0;  // adversarial (generator side) or reconstruction loss
  double l_kp = 0.0;
  double l_pose = 0.0;
  double l_total = 0.0;
  double wall_ms = 0.0;
};

struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<StepRecord> evals;  // eval-split snapshots, wall_ms unused

  void append(const StepRecord& r);
  /// "step,epoch,l_adv_or_recon,l_kp,l_pose,l_total,wall_ms"
  std::string steps_csv() const;
  /// Same columns without wall_ms.
  std::string evals_csv() const;
  static RunLog from_csv(const std::string& steps_csv, const std::string& evals_csv);
  void write(const std::filesystem::path& dir) const;
};

/// λ weights actually applied: non-pose model kinds always train with (0, 0).
LossWeights effective_weights(const TrainConfig& cfg);

/// L_adv + λ_kp L_kp + λ_pose L_pose. A term with zero weight is skipped.
/// Non-finite components raise DivergenceError naming the component.
double composite_gan_objective(double l_adv, double l_kp, double l_pose, const LossWeights& w);
double composite_diffusion_objective(double l_recon, double l_kp, double l_pose, const LossWeights& w);
torch::Tensor composite_gan_objective(const torch::Tensor& l_adv, const torch::Tensor& l_kp,
                                      const torch::Tensor& l_pose, const LossWeights& w);
torch::Tensor composite_diffusion_objective(const torch::Tensor& l_recon, const torch::Tensor& l_kp,
                                            const torch::Tensor& l_pose, const LossWeights& w);

struct PoseTerms {
  torch::Tensor kp;    // scalar
  torch::Tensor pose;  // scalar
};

/// Extracts poses from generated and paired real images (same batch index,
/// same class) and returns the batch-mean keypoint and pose-consistency
/// losses on normalized coordinates. Terms whose weight is zero are returned
/// as exact zeros without being computed. Only the generated side carries
/// gradients; joints count when visible in both extractions.
/// Optional per-sample weights ([B]) scale each pair's losses before the
/// batch mean. A precomputed extraction of `real` may be passed as `reference`.
PoseTerms pose_supervision(const torch::Tensor& generated, const torch::Tensor& real,
                           const SoftArgmaxExtractor& extractor, const LossWeights& w,
                           const torch::Tensor& sample_weights = {},
                           const std::optional<SoftArgmaxResult>& reference = std::nullopt);

/// Runs `extractor` over every image of `ds` once and stores the result, so
/// batches gathered afterwards carry it as their pose reference.
void cache_reference_poses(Dataset& ds, const SoftArgmaxExtractor& extractor);

struct TrainContext {
  const TrainConfig& config;
  const SoftArgmaxExtractor& extractor;
  torch::Generator& rng;
  int64_t step = 0;
  int epoch = 0;
};

/// One discriminator update followed by one generator update. The
/// combined keypoint and pose-term gradient is capped per sample (see pose_grad_bound).
StepRecord gan_train_step(GanPair& pair, torch::optim::Adam& g_opt, torch::optim::Adam& d_opt,
                          const Batch& batch, const TrainContext& ctx);

/// One optimizer step on L_recon plus pose terms evaluated on x̂0. Each
/// sample's pose terms are weighted by alpha_bar_t. With pose_grad_bound > 0
/// the combined keypoint and pose-term gradient reaching a sample's noise prediction is
/// rescaled to at most pose_grad_bound times that sample's L_recon gradient norm.
StepRecord diffusion_train_step(DiffusionUNet& model, torch::optim::Adam& opt,
                                const DiffusionSchedule& sched, const Batch& batch,
                                const TrainContext& ctx);

/// Model, optimizer and RNG state of one training run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, int num_classes);

  const TrainConfig& config() const { return cfg_; }
  ModelKind kind() const { return cfg_.model; }
  int num_classes() const { return num_classes_; }
  int64_t global_step() const { return step_; }
  int epoch() const { return epoch_; }
  int64_t batch_in_epoch() const { return batch_in_epoch_; }
  RunLog& log() { return log_; }
  const RunLog& log() const { return log_; }

  /// Adjusts the run length of a resumed run.
  void set_budget(int epochs, int64_t max_steps);

  StepRecord step(const Batch& batch);
  const SoftArgmaxExtractor& extractor() const { return extractor_; }
  void finish_epoch();
  /// Unweighted and weighted losses on (up to eval_max_images of) `eval_set`
  /// with a fixed noise stream; appended to the eval log.
  StepRecord evaluate(const Dataset& eval_set);

  /// Class-conditional samples in [-1, 1], deterministic in `seed`.
  torch::Tensor generate(const torch::Tensor& labels, uint64_t seed);

  DiffusionUNet* unet() { return unet_ ? &*unet_ : nullptr; }
  GanPair* gan() { return gan_ ? &*gan_ : nullptr; }
  const DiffusionSchedule& schedule() const { return sched_; }

  void save(const std::filesystem::path& file) const;
  static Trainer load(const std::filesystem::path& file);

 private:
  TrainConfig cfg_;
  int num_classes_;
  std::optional<GanPair> gan_;
  std::optional<DiffusionUNet> unet_;
  DiffusionSchedule sched_;
  std::unique_ptr<torch::optim::Adam> opt_, d_opt_;
  torch::Generator rng_;
  SoftArgmaxExtractor extractor_;
  int64_t step_ = 0;
  int epoch_ = 0;
  int64_t batch_in_epoch_ = 0;
  RunLog log_;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  RunLog log;
  bool stopped_early = false;  // max_steps reached before the last epoch
};

/// Full run over the train split of cfg.manifest (a dataset directory or its
/// manifest.csv). Writes config.toml, runlog.csv, eval_log.csv and
/// checkpoints (checkpoint_eNNNN.ckpt every checkpoint_every epochs plus
/// checkpoint.ckpt, always the latest) under out_dir. With `resume`, state
/// is restored from that checkpoint and training continues to cfg.epochs.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

std::filesystem::path resolve_manifest_root(const std::string& manifest);

}  // namespace posekey
