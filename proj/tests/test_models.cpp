#include <cmath>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "posekey/diffusion.hpp"
#include "posekey/errors.hpp"
#include "posekey/gan.hpp"

using namespace posekey;

namespace {

DiffusionSchedule fixed_abar(std::vector<double> abar) {
  DiffusionSchedule s;
  s.steps = static_cast<int>(abar.size());
  s.alpha_bar = torch::tensor(abar, torch::kFloat64);
  s.alpha = s.alpha_bar.clone();
  s.beta = 1.0 - s.alpha;
  return s;
}

UNetConfig small_unet(int size, int classes = 3) {
  UNetConfig c;
  c.image_size = size;
  c.num_classes = classes;
  c.base_channels = 8;
  return c;
}

GanConfig small_gan() {
  GanConfig c;
  c.image_size = 32;
  c.num_classes = 4;
  c.z_dim = 16;
  c.label_dim = 8;
  c.hidden = {32, 64};
  return c;
}

// Plain ancestral sampler written out independently of the library.
torch::Tensor reference_sample(const NoiseModel& model, const torch::Tensor& y, SampleShape shape,
                               const DiffusionSchedule& s, uint64_t seed) {
  torch::NoGradGuard ng;
  auto gen = make_generator(seed);
  auto x = torch::randn({y.size(0), shape.channels, shape.height, shape.width}, gen, torch::kFloat32);
  for (int t = s.steps - 1; t >= 0; --t) {
    const double ab = s.alpha_bar[t].item<double>();
    auto eps = model(x, torch::full({y.size(0)}, t, torch::kLong), y);
    auto x0 = ((x - std::sqrt(1 - ab) * eps) / std::sqrt(ab)).clamp(-1, 1);
    if (t == 0) return x0.clamp(-1, 1);
    const double abp = s.alpha_bar[t - 1].item<double>();
    const double b = s.beta[t].item<double>(), a = s.alpha[t].item<double>();
    auto mean = b * std::sqrt(abp) / (1 - ab) * x0 + (1 - abp) * std::sqrt(a) / (1 - ab) * x;
    x = mean + std::sqrt(b * (1 - abp) / (1 - ab)) * torch::randn(x.sizes(), gen, x.options());
  }
  return x;
}

}  // namespace

TEST(Schedule, HandProducts) {
  auto s1 = make_beta_schedule(1, 0.1, 0.1);
  ASSERT_EQ(s1.alpha_bar.numel(), 1);
  EXPECT_NEAR(s1.alpha_bar[0].item<double>(), 0.9, 1e-15);
  auto s2 = make_beta_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(s2.alpha_bar[0].item<double>(), 0.9, 1e-15);
  EXPECT_NEAR(s2.alpha_bar[1].item<double>(), 0.72, 1e-15);
}

TEST(Schedule, DefaultEndsNearZero) {
  auto s = make_beta_schedule(1000, 1e-4, 0.02);
  EXPECT_LT(s.alpha_bar_at(999), 1e-4);
  EXPECT_GT(s.alpha_bar_at(0), 0.99);
  auto d = s.alpha_bar.slice(0, 1) - s.alpha_bar.slice(0, 0, -1);
  EXPECT_TRUE((d < 0).all().item<bool>());
}

TEST(Schedule, Preconditions) {
  EXPECT_THROW(make_beta_schedule(0, 1e-4, 0.02), ArgumentError);
  EXPECT_THROW(make_beta_schedule(10, 0.0, 0.02), ArgumentError);
  EXPECT_THROW(make_beta_schedule(10, 0.03, 0.02), ArgumentError);
  EXPECT_THROW(make_beta_schedule(10, 1e-4, 1.0), ArgumentError);
  EXPECT_THROW(make_beta_schedule(10, 1e-4, 0.02).alpha_bar_at(10), ArgumentError);
}

TEST(TimeEmbedding, ZeroStep) {
  auto e = sinusoidal_time_embedding(0, 8);
  ASSERT_EQ(e.numel(), 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(e[2 * i].item<float>(), 0.0f);
    EXPECT_EQ(e[2 * i + 1].item<float>(), 1.0f);
  }
}

TEST(TimeEmbedding, FrequenciesAndErrors) {
  auto e = sinusoidal_time_embedding(7, 6);
  for (int i = 0; i < 3; ++i) {
    const double w = std::pow(10000.0, -2.0 * i / 6.0);
    EXPECT_NEAR(e[2 * i].item<float>(), std::sin(7 * w), 1e-6);
    EXPECT_NEAR(e[2 * i + 1].item<float>(), std::cos(7 * w), 1e-6);
  }
  EXPECT_THROW(sinusoidal_time_embedding(3, 7), ArgumentError);
  auto batch = sinusoidal_time_embedding(torch::tensor({0, 7}, torch::kLong), 6);
  EXPECT_TRUE(torch::allclose(batch[1], e));
}

TEST(ForwardDiffuse, Examples) {
  auto one = fixed_abar({1.0});
  auto x0 = torch::randn({2, 3, 4, 4}, torch::kFloat64);
  auto eps = torch::randn({2, 3, 4, 4}, torch::kFloat64);
  EXPECT_TRUE(torch::equal(forward_diffuse(x0, 0, eps, one), x0));

  auto quarter = fixed_abar({0.25});
  auto ones = torch::ones({3, 4, 4}, torch::kFloat64);
  auto zeros = torch::zeros({3, 4, 4}, torch::kFloat64);
  EXPECT_TRUE(torch::allclose(forward_diffuse(ones, 0, zeros, quarter), torch::full_like(ones, 0.5)));
  EXPECT_TRUE(torch::allclose(forward_diffuse(zeros, 0, ones, quarter),
                              torch::full_like(ones, std::sqrt(0.75)), 0, 1e-15));
  EXPECT_NEAR(forward_diffuse(zeros, 0, ones, quarter)[0][0][0].item<double>(), 0.8660, 1e-4);
  EXPECT_THROW(forward_diffuse(ones, 1, zeros, quarter), ArgumentError);
  EXPECT_THROW(forward_diffuse(ones, 0, torch::zeros({3}), quarter), ArgumentError);
}

TEST(PredictX0, ExamplesAndClamp) {
  auto quarter = fixed_abar({0.25});
  auto xt = torch::full({3, 2, 2}, 0.5, torch::kFloat64);
  auto x0 = predict_x0(xt, torch::zeros_like(xt), 0, quarter);
  EXPECT_TRUE(torch::allclose(x0, torch::ones_like(xt), 0, 1e-15));
  auto big = predict_x0(torch::full({3, 2, 2}, 0.9, torch::kFloat64), torch::zeros_like(xt), 0, quarter);
  EXPECT_TRUE(torch::equal(big, torch::ones_like(xt)));
  auto raw = predict_x0_unclamped(torch::full({3, 2, 2}, 0.9, torch::kFloat64), torch::zeros_like(xt),
                                  torch::tensor(0, torch::kLong), quarter);
  EXPECT_NEAR(raw[0][0][0].item<double>(), 1.8, 1e-12);
}

TEST(PredictX0, RoundTripAllSteps) {
  auto s = make_beta_schedule(200, 5e-4, 0.1);
  auto x0 = torch::rand({4, 3, 8, 8}) * 2 - 1;
  auto eps = torch::randn({4, 3, 8, 8});
  for (int t : {0, 100, 199}) {
    auto xt = forward_diffuse(x0, t, eps, s);
    auto back = predict_x0_unclamped(xt, eps, torch::tensor(t, torch::kLong), s);
    const double tol = 1e-6 / std::sqrt(s.alpha_bar_at(t));
    EXPECT_LT((back - x0).abs().max().item<float>(), tol) << "t=" << t;
  }
  auto d = make_beta_schedule(1000, 1e-4, 0.02);
  auto x64 = x0.to(torch::kFloat64), e64 = eps.to(torch::kFloat64);
  for (int t : {0, 500, 999}) {
    auto xt = forward_diffuse(x64, t, e64, d);
    auto back = predict_x0_unclamped(xt, e64, torch::tensor(t, torch::kLong), d);
    EXPECT_LT((back - x64).abs().max().item<double>(), 1e-9) << "t=" << t;
  }
  auto tb = torch::tensor({0, 50, 150, 199}, torch::kLong);
  auto back = predict_x0_unclamped(forward_diffuse(x0, tb, eps, s), eps, tb, s);
  EXPECT_LT((back - x0).abs().max().item<float>(), 1e-3);
}

TEST(ForwardDiffuse, VariancePreservation) {
  auto s = make_beta_schedule(1000, 1e-4, 0.02);
  auto gen = make_generator(3);
  auto x0 = torch::randn({200000}, gen, torch::kFloat64);
  auto eps = torch::randn({200000}, gen, torch::kFloat64);
  for (int t : {0, 1, 250, 500, 750, 999}) {
    const double v = forward_diffuse(x0, t, eps, s).var().item<double>();
    EXPECT_NEAR(v, 1.0, 0.05) << "t=" << t;
  }
}

TEST(ReconLoss, OracleAndZeroModel) {
  auto s = make_beta_schedule(100, 1e-4, 0.02);
  auto x0 = torch::rand({64, 3, 8, 8}) * 2 - 1;
  auto y = torch::zeros({64}, torch::kLong);
  // the oracle recovers eps from x_t and x0 exactly, up to rounding
  NoiseModel oracle = [&](const torch::Tensor& xt, const torch::Tensor& t, const torch::Tensor&) {
    auto ab = s.alpha_bar.index_select(0, t).view({-1, 1, 1, 1});
    return ((xt.to(torch::kFloat64) - ab.sqrt() * x0.to(torch::kFloat64)) / (1 - ab).sqrt())
        .to(torch::kFloat32);
  };
  auto g1 = make_generator(1);
  EXPECT_LT(diffusion_recon_loss(oracle, x0, y, s, g1).item<float>(), 1e-8);
  NoiseModel zero = [](const torch::Tensor& xt, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(xt);
  };
  auto g2 = make_generator(2);
  EXPECT_NEAR(diffusion_recon_loss(zero, x0, y, s, g2).item<float>(), 1.0, 0.05);
}

TEST(ReconLoss, PassIsSeedDeterministic) {
  auto s = make_beta_schedule(50, 1e-4, 0.02);
  auto x0 = torch::zeros({4, 3, 8, 8});
  NoiseModel zero = [](const torch::Tensor& xt, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(xt);
  };
  auto y = torch::zeros({4}, torch::kLong);
  auto ga = make_generator(9), gb = make_generator(9);
  auto a = diffusion_pass(zero, x0, y, s, ga), b = diffusion_pass(zero, x0, y, s, gb);
  EXPECT_TRUE(torch::equal(a.t, b.t));
  EXPECT_TRUE(torch::equal(a.eps, b.eps));
  EXPECT_GE(a.t.min().item<int64_t>(), 0);
  EXPECT_LT(a.t.max().item<int64_t>(), 50);
}

TEST(UNet, ShapesAcrossResolutions) {
  torch::manual_seed(0);
  for (int size : {32, 64, 128}) {
    DiffusionUNet net(small_unet(size));
    auto x = torch::randn({2, 3, size, size});
    auto out = net->forward(x, torch::tensor({0, 5}, torch::kLong), torch::tensor({0, 3}, torch::kLong));
    EXPECT_EQ(out.sizes(), x.sizes()) << size;
  }
  EXPECT_THROW(DiffusionUNet(small_unet(40)), ArgumentError);
}

TEST(UNet, ClassConditioningReachesOutput) {
  torch::manual_seed(1);
  DiffusionUNet net(small_unet(32));
  torch::NoGradGuard ng;
  auto x = torch::randn({1, 3, 32, 32});
  auto t = torch::tensor({10}, torch::kLong);
  auto a = net->forward(x, t, torch::tensor({0}, torch::kLong));
  auto b = net->forward(x, t, torch::tensor({1}, torch::kLong));
  EXPECT_GT((a - b).abs().max().item<float>(), 1e-6);
  auto c = net->forward(x, torch::tensor({50}, torch::kLong), torch::tensor({0}, torch::kLong));
  EXPECT_GT((a - c).abs().max().item<float>(), 1e-6);
}

TEST(UNet, OutputSkipMixesInputBySchedule) {
  torch::manual_seed(4);
  DiffusionUNet plain(small_unet(32));
  auto cfg = small_unet(32);
  cfg.skip_alpha_bar = {1.0, 0.25, 0.0};
  DiffusionUNet mixed(cfg);
  torch::NoGradGuard ng;
  auto src = plain->parameters(), dst = mixed->parameters();
  ASSERT_EQ(src.size(), dst.size());
  for (size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
  auto x = torch::randn({3, 3, 32, 32});
  auto y = torch::tensor({0, 1, 2}, torch::kLong);
  auto t = torch::tensor({0, 1, 2}, torch::kLong);
  auto n = plain->forward(x, t, y);
  auto m = mixed->forward(x, t, y);
  EXPECT_TRUE(torch::allclose(m[0], n[0], 0, 1e-6));
  EXPECT_TRUE(torch::allclose(m[1], 0.5 * n[1] + std::sqrt(0.75) * x[1], 0, 1e-5));
  EXPECT_TRUE(torch::allclose(m[2], x[2], 0, 1e-6));
}

TEST(Sampling, DeterministicAndMatchesReference) {
  torch::manual_seed(2);
  DiffusionUNet net(small_unet(32));
  net->eval();
  auto s = make_beta_schedule(8, 1e-3, 0.2);
  auto y = torch::tensor({0, 2}, torch::kLong);
  auto a = ddpm_sample(net, y, s, 77);
  auto b = ddpm_sample(net, y, s, 77);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_EQ(a.sizes(), (torch::IntArrayRef{2, 3, 32, 32}));
  EXPECT_LE(a.abs().max().item<float>(), 1.0f);
  auto ref = reference_sample(as_noise_model(net), y, {3, 32, 32}, s, 77);
  EXPECT_LT((a - ref).abs().max().item<float>(), 1e-5);
  EXPECT_FALSE(torch::equal(a, ddpm_sample(net, y, s, 78)));
}

TEST(Sampling, GuidanceZeroIsPlainConditional) {
  torch::manual_seed(3);
  DiffusionUNet net(small_unet(32));
  auto s = make_beta_schedule(5, 1e-3, 0.2);
  auto y = torch::tensor({1}, torch::kLong);
  auto model = as_noise_model(net);
  auto plain = reference_sample(model, y, {3, 32, 32}, s, 5);
  auto g0 = ddpm_sample(model, y, net->null_label(), {3, 32, 32}, s, 5, 0.0);
  EXPECT_LT((plain - g0).abs().max().item<float>(), 1e-5);
  auto g2 = ddpm_sample(model, y, net->null_label(), {3, 32, 32}, s, 5, 2.0);
  EXPECT_GT((g2 - g0).abs().max().item<float>(), 1e-6);
  EXPECT_THROW(ddpm_sample(model, y, net->null_label(), {3, 32, 32}, s, 5, -1.0), ArgumentError);
}

TEST(Sampling, GuidanceWithLabelBlindModelIsNeutral) {
  NoiseModel blind = [](const torch::Tensor& x, const torch::Tensor&, const torch::Tensor&) {
    return 0.5 * x;
  };
  auto s = make_beta_schedule(6, 1e-3, 0.2);
  auto y = torch::tensor({0, 1}, torch::kLong);
  auto a = ddpm_sample(blind, y, 2, {3, 8, 8}, s, 1, 0.0);
  auto b = ddpm_sample(blind, y, 2, {3, 8, 8}, s, 1, 3.0);
  EXPECT_LT((a - b).abs().max().item<float>(), 1e-5);
}

TEST(Gan, HandLosses) {
  auto zero = torch::zeros({8});
  auto l = adversarial_losses_from_logits(zero, zero);
  EXPECT_NEAR(l.discriminator.item<float>(), 2 * std::log(2.0), 1e-6);
  EXPECT_NEAR(l.generator.item<float>(), std::log(2.0), 1e-6);
  auto sep = adversarial_losses_from_logits(torch::full({8}, 20.0, torch::kFloat64),
                                            torch::full({8}, -20.0, torch::kFloat64));
  EXPECT_LT(sep.discriminator.item<double>(), 1e-8);
  EXPECT_NEAR(sep.generator.item<double>(), 20.0, 1e-6);
}

TEST(Gan, ShapesRangeAndDeterminism) {
  torch::manual_seed(4);
  GanPair pair(small_gan());
  auto z = torch::randn({3, 16});
  auto y = torch::tensor({0, 1, 3}, torch::kLong);
  auto a = gan_generate(pair, z, y);
  auto b = gan_generate(pair, z, y);
  EXPECT_EQ(a.sizes(), (torch::IntArrayRef{3, 3, 32, 32}));
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_LE(a.abs().max().item<float>(), 1.0f);
  EXPECT_EQ(pair.discriminator->forward(a, y).numel(), 3);
  auto other = gan_generate(pair, z, torch::tensor({2, 1, 3}, torch::kLong));
  EXPECT_GT((other[0] - a[0]).abs().max().item<float>(), 1e-6);
  EXPECT_THROW(gan_generate(pair, torch::randn({3, 5}), y), ArgumentError);
  EXPECT_THROW(gan_generate(pair, z, torch::tensor({0}, torch::kLong)), ArgumentError);
}

TEST(Gan, ModuleLosses) {
  torch::manual_seed(5);
  GanPair pair(small_gan());
  auto y = torch::tensor({0, 1}, torch::kLong);
  auto real = torch::rand({2, 3, 32, 32}) * 2 - 1;
  auto fake = gan_generate(pair, torch::randn({2, 16}), y);
  auto l = gan_adversarial_losses(pair, real, fake, y);
  auto ref = adversarial_losses_from_logits(pair.discriminator->forward(real, y),
                                            pair.discriminator->forward(fake, y));
  EXPECT_NEAR(l.discriminator.item<float>(), ref.discriminator.item<float>(), 1e-6);
  EXPECT_NEAR(l.generator.item<float>(), ref.generator.item<float>(), 1e-6);
}
