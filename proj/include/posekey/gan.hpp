#pragma once

#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/container/sequential.h>
#include <torch/nn/modules/embedding.h>
#include <torch/nn/pimpl.h>
#include <torch/types.h>

namespace posekey {

struct GanConfig {
  int image_size = 64;
  int num_classes = 10;
  int z_dim = 128;
  int label_dim = 64;
  std::vector<int> hidden{256, 512, 1024};
};

/// (z, y) -> image: the label embedding is concatenated with z and passed
/// through fully connected layers; tanh bounds the output to [-1, 1].
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GanConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& y);

 private:
  int image_size_;
  torch::nn::Embedding label_emb{nullptr};
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(Generator);

/// (image, y) -> real/fake logit. Mirrors the generator's widths.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const GanConfig& cfg);
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& y);

 private:
  torch::nn::Embedding label_emb{nullptr};
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(Discriminator);

struct GanPair {
  GanConfig config;
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};

  explicit GanPair(const GanConfig& cfg);
};

torch::Tensor gan_generate(GanPair& pair, const torch::Tensor& z, const torch::Tensor& y);

struct AdversarialLosses {
  torch::Tensor generator;      // -mean log sigma(D(fake))
  torch::Tensor discriminator;  // -mean log sigma(D(real)) - mean log(1 - sigma(D(fake)))
};

/// Non-saturating logistic losses from raw discriminator logits.
AdversarialLosses adversarial_losses_from_logits(const torch::Tensor& real_logits,
                                                 const torch::Tensor& fake_logits);
AdversarialLosses gan_adversarial_losses(GanPair& pair, const torch::Tensor& real_batch,
                                         const torch::Tensor& fake_batch, const torch::Tensor& y);

}  // namespace posekey
