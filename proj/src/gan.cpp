#include "posekey/gan.hpp"

#include <torch/torch.h>

#include "posekey/errors.hpp"

namespace posekey {

namespace F = torch::nn::functional;

namespace {

torch::nn::Sequential mlp(int in, const std::vector<int>& widths, int out) {
  torch::nn::Sequential seq;
  for (int w : widths) {
    seq->push_back(torch::nn::Linear(in, w));
    seq->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    in = w;
  }
  seq->push_back(torch::nn::Linear(in, out));
  return seq;
}

void validate(const GanConfig& cfg) {
  if (cfg.image_size < 1 || cfg.num_classes < 1 || cfg.z_dim < 1 || cfg.label_dim < 1 ||
      cfg.hidden.empty())
    throw ArgumentError("invalid GAN config");
}

}  // namespace

GeneratorImpl::GeneratorImpl(const GanConfig& cfg) : image_size_(cfg.image_size) {
  validate(cfg);
  label_emb = register_module("label_emb", torch::nn::Embedding(cfg.num_classes, cfg.label_dim));
  body = register_module("body", mlp(cfg.z_dim + cfg.label_dim, cfg.hidden,
                                     3 * cfg.image_size * cfg.image_size));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& z, const torch::Tensor& y) {
  auto h = torch::cat({z, label_emb(y.to(torch::kLong))}, 1);
  return torch::tanh(body->forward(h)).view({-1, 3, image_size_, image_size_});
}

DiscriminatorImpl::DiscriminatorImpl(const GanConfig& cfg) {
  validate(cfg);
  label_emb = register_module("label_emb", torch::nn::Embedding(cfg.num_classes, cfg.label_dim));
  std::vector<int> widths(cfg.hidden.rbegin(), cfg.hidden.rend());
  body = register_module("body", mlp(3 * cfg.image_size * cfg.image_size + cfg.label_dim, widths, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& image, const torch::Tensor& y) {
  auto h = torch::cat({image.flatten(1), label_emb(y.to(torch::kLong))}, 1);
  return body->forward(h).squeeze(1);
}

GanPair::GanPair(const GanConfig& cfg)
    : config(cfg), generator(Generator(cfg)), discriminator(Discriminator(cfg)) {}

torch::Tensor gan_generate(GanPair& pair, const torch::Tensor& z, const torch::Tensor& y) {
  if (z.dim() != 2 || z.size(1) != pair.config.z_dim) throw ArgumentError("z must be [B, z_dim]");
  if (y.size(0) != z.size(0)) throw ArgumentError("z and y batch sizes differ");
  return pair.generator->forward(z, y);
}

AdversarialLosses adversarial_losses_from_logits(const torch::Tensor& real_logits,
                                                 const torch::Tensor& fake_logits) {
  // -log sigma(x) = softplus(-x); -log(1 - sigma(x)) = softplus(x)
  AdversarialLosses l;
  l.discriminator = F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean();
  l.generator = F::softplus(-fake_logits).mean();
  return l;
}

AdversarialLosses gan_adversarial_losses(GanPair& pair, const torch::Tensor& real_batch,
                                         const torch::Tensor& fake_batch, const torch::Tensor& y) {
  if (real_batch.sizes() != fake_batch.sizes() || real_batch.size(0) != y.size(0))
    throw ArgumentError("real, fake and label batches must agree");
  return adversarial_losses_from_logits(pair.discriminator->forward(real_batch, y),
                                        pair.discriminator->forward(fake_batch, y));
}

}  // namespace posekey
