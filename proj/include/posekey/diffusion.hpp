#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/embedding.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>
#include <torch/nn/pimpl.h>
#include <torch/types.h>

#include "posekey/skeleton.hpp"

namespace posekey {

/// Linear-beta DDPM noise schedule. All tensors are float64 of length T.
struct DiffusionSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  torch::Tensor beta;
  torch::Tensor alpha;
  torch::Tensor alpha_bar;

  double alpha_bar_at(int t) const;
};

DiffusionSchedule make_beta_schedule(int steps, double beta_start, double beta_end);

/// Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_i = 10000^(-2i/dim).
torch::Tensor sinusoidal_time_embedding(int64_t t, int dim);
/// Batched form over integer steps `t` ([B]); returns [B, dim] float32.
torch::Tensor sinusoidal_time_embedding(const torch::Tensor& t, int dim);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. `t` is a scalar step or a [B] tensor.
torch::Tensor forward_diffuse(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                              const DiffusionSchedule& sched);
torch::Tensor forward_diffuse(const torch::Tensor& x0, const torch::Tensor& t,
                              const torch::Tensor& eps, const DiffusionSchedule& sched);

/// Inverse of forward_diffuse given a noise estimate. The `_unclamped` form
/// is the exact algebraic inverse; predict_x0 clamps into [-1, 1].
torch::Tensor predict_x0_unclamped(const torch::Tensor& x_t, const torch::Tensor& eps_pred,
                                   const torch::Tensor& t, const DiffusionSchedule& sched);
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_pred,
                         const torch::Tensor& t, const DiffusionSchedule& sched);
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_pred, int64_t t,
                         const DiffusionSchedule& sched);

struct UNetConfig {
  int image_size = 64;
  int num_classes = 10;
  int base_channels = 64;
  int stages = 4;
  std::vector<int> attention_resolutions{16, 8};
  int groups = 8;
  // When non-empty (one ᾱ per timestep) the network output n is mixed with
  // its input as sqrt(ᾱ_t)·n + sqrt(1−ᾱ_t)·x_t, so at high noise the
  // prediction starts from x_t itself.
  std::vector<double> skip_alpha_bar;
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_ch, int out_ch, int emb_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear emb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Single-head spatial self-attention with a residual connection.
class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(int channels, int groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(SelfAttention);

/// Noise predictor eps(x_t, y, t): `stages` encoder stages of two residual
/// blocks plus strided-conv downsampling, a residual bottleneck, and mirrored
/// decoder stages (nearest 2x upsampling + conv, skip concatenation).
/// Sinusoidal time and learned class embeddings are summed and injected into
/// every residual block. Label index `num_classes` is the null label.
class DiffusionUNetImpl : public torch::nn::Module {
 public:
  explicit DiffusionUNetImpl(UNetConfig cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& y);
  const UNetConfig& config() const { return cfg_; }
  int null_label() const { return cfg_.num_classes; }

 private:
  struct Stage {
    ResBlock block1{nullptr}, block2{nullptr};
    SelfAttention attn{nullptr};
    torch::nn::Conv2d resample{nullptr};
  };

  UNetConfig cfg_;
  int time_dim_;
  torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
  torch::nn::Embedding class_emb{nullptr};
  torch::nn::Conv2d stem{nullptr};
  std::vector<Stage> down_, up_;
  ResBlock mid{nullptr};
  SelfAttention mid_attn{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
  torch::nn::Conv2d out_conv{nullptr};
  torch::Tensor skip_abar_;
};
TORCH_MODULE(DiffusionUNet);

/// eps_theta(x_t, t, y) as a plain callable, so samplers and losses also
/// accept analytic stand-ins.
using NoiseModel = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t,
                                               const torch::Tensor& y)>;
NoiseModel as_noise_model(DiffusionUNet model);

/// Pieces of one noise-prediction pass, shared by the loss and the trainer.
struct DiffusionPass {
  torch::Tensor t;  // [B] int64
  torch::Tensor eps;
  torch::Tensor x_t;
  torch::Tensor eps_pred;
  torch::Tensor recon;  // scalar MSE
};

/// Samples t ~ U[0,T) and eps ~ N(0,I) from `gen`, returns the MSE between
/// eps and the model's prediction along with the intermediates.
DiffusionPass diffusion_pass(const NoiseModel& model, const torch::Tensor& x0,
                             const torch::Tensor& y, const DiffusionSchedule& sched,
                             torch::Generator& gen);
torch::Tensor diffusion_recon_loss(const NoiseModel& model, const torch::Tensor& x0,
                                   const torch::Tensor& y, const DiffusionSchedule& sched,
                                   torch::Generator& gen);

struct SampleShape {
  int channels = 3;
  int height = 64;
  int width = 64;
};

/// Ancestral DDPM sampling from pure noise for labels `y` ([B]). With
/// guidance_scale s > 0 the noise estimate is (1+s) eps(y) - s eps(null).
/// Output is clamped to [-1, 1].
torch::Tensor ddpm_sample(const NoiseModel& model, const torch::Tensor& y, int64_t null_label,
                          SampleShape shape, const DiffusionSchedule& sched, uint64_t seed,
                          double guidance_scale = 0.0);
torch::Tensor ddpm_sample(DiffusionUNet& model, const torch::Tensor& y,
                          const DiffusionSchedule& sched, uint64_t seed, double guidance_scale = 0.0);

torch::Generator make_generator(uint64_t seed);

}  // namespace posekey
