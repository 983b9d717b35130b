#include "posekey/diffusion.hpp"

#include <cmath>
#include <numeric>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "posekey/errors.hpp"

namespace posekey {

namespace F = torch::nn::functional;

torch::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

double DiffusionSchedule::alpha_bar_at(int t) const {
  if (t < 0 || t >= steps) throw ArgumentError("timestep out of range");
  return alpha_bar[t].item<double>();
}

DiffusionSchedule make_beta_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ArgumentError("schedule needs at least one step");
  if (!(beta_start > 0) || !(beta_start <= beta_end) || !(beta_end < 1))
    throw ArgumentError("betas must satisfy 0 < beta_start <= beta_end < 1");
  DiffusionSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta = steps == 1 ? torch::full({1}, beta_start, torch::kFloat64)
                      : torch::linspace(beta_start, beta_end, steps, torch::kFloat64);
  s.alpha = 1.0 - s.beta;
  s.alpha_bar = torch::cumprod(s.alpha, 0);
  return s;
}

torch::Tensor sinusoidal_time_embedding(const torch::Tensor& t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ArgumentError("time embedding dimension must be even");
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) *
                          torch::arange(half, torch::kFloat64) / static_cast<double>(half));
  auto args = t.to(torch::kFloat64).unsqueeze(-1) * freqs;  // [B, half]
  // interleave: [sin w0, cos w0, sin w1, cos w1, ...]
  return torch::stack({torch::sin(args), torch::cos(args)}, -1).flatten(-2).to(torch::kFloat32);
}

torch::Tensor sinusoidal_time_embedding(int64_t t, int dim) {
  if (t < 0) throw ArgumentError("timestep must be non-negative");
  return sinusoidal_time_embedding(torch::tensor({t}, torch::kLong), dim).squeeze(0);
}

namespace {

torch::Tensor check_steps(const torch::Tensor& t, const DiffusionSchedule& sched) {
  auto steps = t.to(torch::kLong);
  if (steps.numel() > 0 &&
      (steps.min().item<int64_t>() < 0 || steps.max().item<int64_t>() >= sched.steps))
    throw ArgumentError("timestep out of range");
  return steps;
}

// abar gathered per batch element and shaped to broadcast against `like`.
torch::Tensor gather_abar(const torch::Tensor& t, const DiffusionSchedule& sched,
                          const torch::Tensor& like) {
  auto ab = sched.alpha_bar.index_select(0, check_steps(t, sched).flatten());
  std::vector<int64_t> shape(like.dim(), 1);
  if (t.dim() > 0) shape[0] = t.size(0);
  return ab.view(shape).to(like.scalar_type());
}

}  // namespace

torch::Tensor forward_diffuse(const torch::Tensor& x0, const torch::Tensor& t,
                              const torch::Tensor& eps, const DiffusionSchedule& sched) {
  if (eps.sizes() != x0.sizes()) throw ArgumentError("eps must have the shape of x0");
  auto ab = gather_abar(t, sched, x0);
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                              const DiffusionSchedule& sched) {
  return forward_diffuse(x0, torch::tensor(t, torch::kLong), eps, sched);
}

torch::Tensor predict_x0_unclamped(const torch::Tensor& x_t, const torch::Tensor& eps_pred,
                                   const torch::Tensor& t, const DiffusionSchedule& sched) {
  auto ab = gather_abar(t, sched, x_t);
  return (x_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt();
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_pred,
                         const torch::Tensor& t, const DiffusionSchedule& sched) {
  return predict_x0_unclamped(x_t, eps_pred, t, sched).clamp(-1.0, 1.0);
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_pred, int64_t t,
                         const DiffusionSchedule& sched) {
  return predict_x0(x_t, eps_pred, torch::tensor(t, torch::kLong), sched);
}

namespace {

int group_count(int groups, int channels) { return std::gcd(groups, channels); }

torch::nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int emb_dim, int groups) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(group_count(groups, in_ch), in_ch));
  conv1 = register_module("conv1", conv3x3(in_ch, out_ch));
  emb_proj = register_module("emb_proj", torch::nn::Linear(emb_dim, out_ch));
  norm2 = register_module("norm2", torch::nn::GroupNorm(group_count(groups, out_ch), out_ch));
  conv2 = register_module("conv2", conv3x3(out_ch, out_ch));
  if (in_ch != out_ch)
    skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1(F::silu(norm1(x)));
  h = h + emb_proj(F::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(F::silu(norm2(h)));
  return h + (skip ? skip(x) : x);
}

SelfAttentionImpl::SelfAttentionImpl(int channels, int groups) {
  norm = register_module("norm", torch::nn::GroupNorm(group_count(groups, channels), channels));
  qkv = register_module("qkv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 3 * channels, 1)));
  proj = register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto parts = qkv(norm(x)).reshape({b, 3, c, h * w}).unbind(1);
  auto q = parts[0].transpose(1, 2);  // [B, HW, C]
  auto k = parts[1];                  // [B, C, HW]
  auto v = parts[2].transpose(1, 2);  // [B, HW, C]
  auto attn = torch::softmax(torch::bmm(q, k) / std::sqrt(static_cast<double>(c)), -1);
  auto out = torch::bmm(attn, v).transpose(1, 2).reshape({b, c, h, w});
  return x + proj(out);
}

DiffusionUNetImpl::DiffusionUNetImpl(UNetConfig cfg) : cfg_(std::move(cfg)) {
  const int divisor = 1 << cfg_.stages;
  if (cfg_.stages < 1 || cfg_.image_size % divisor != 0)
    throw ArgumentError("image size must be divisible by 2^stages");
  if (cfg_.base_channels < 1 || cfg_.num_classes < 1) throw ArgumentError("invalid U-Net config");
  const int base = cfg_.base_channels;
  time_dim_ = 4 * base;
  time_fc1 = register_module("time_fc1", torch::nn::Linear(base, time_dim_));
  time_fc2 = register_module("time_fc2", torch::nn::Linear(time_dim_, time_dim_));
  class_emb = register_module("class_emb", torch::nn::Embedding(cfg_.num_classes + 1, time_dim_));
  stem = register_module("stem", conv3x3(3, base));

  auto wants_attn = [&](int res) {
    return std::find(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end(), res) !=
           cfg_.attention_resolutions.end();
  };
  std::vector<int> ch(cfg_.stages);
  for (int s = 0; s < cfg_.stages; ++s) ch[s] = base << s;

  int cur = base;
  for (int s = 0; s < cfg_.stages; ++s) {
    const std::string p = "down" + std::to_string(s) + "_";
    const int res = cfg_.image_size >> s;
    Stage st;
    st.block1 = register_module(p + "block1", ResBlock(cur, ch[s], time_dim_, cfg_.groups));
    st.block2 = register_module(p + "block2", ResBlock(ch[s], ch[s], time_dim_, cfg_.groups));
    if (wants_attn(res)) st.attn = register_module(p + "attn", SelfAttention(ch[s], cfg_.groups));
    st.resample = register_module(p + "down", conv3x3(ch[s], ch[s], 2));
    down_.push_back(st);
    cur = ch[s];
  }
  mid = register_module("mid", ResBlock(cur, cur, time_dim_, cfg_.groups));
  if (wants_attn(cfg_.image_size >> cfg_.stages))
    mid_attn = register_module("mid_attn", SelfAttention(cur, cfg_.groups));
  for (int s = cfg_.stages - 1; s >= 0; --s) {
    const std::string p = "up" + std::to_string(s) + "_";
    const int res = cfg_.image_size >> s;
    Stage st;
    st.resample = register_module(p + "up", conv3x3(cur, ch[s]));
    st.block1 = register_module(p + "block1", ResBlock(2 * ch[s], ch[s], time_dim_, cfg_.groups));
    st.block2 = register_module(p + "block2", ResBlock(ch[s], ch[s], time_dim_, cfg_.groups));
    if (wants_attn(res)) st.attn = register_module(p + "attn", SelfAttention(ch[s], cfg_.groups));
    up_.push_back(st);
    cur = ch[s];
  }
  out_norm = register_module("out_norm", torch::nn::GroupNorm(group_count(cfg_.groups, cur), cur));
  out_conv = register_module("out_conv", conv3x3(cur, 3));
  if (!cfg_.skip_alpha_bar.empty())
    skip_abar_ = torch::tensor(cfg_.skip_alpha_bar, torch::kFloat64);
}

torch::Tensor DiffusionUNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                         const torch::Tensor& y) {
  auto emb = time_fc2(F::silu(time_fc1(sinusoidal_time_embedding(t, cfg_.base_channels))));
  emb = emb + class_emb(y.to(torch::kLong));

  auto h = stem(x);
  std::vector<torch::Tensor> skips;
  for (auto& st : down_) {
    h = st.block2(st.block1(h, emb), emb);
    if (st.attn) h = st.attn(h);
    skips.push_back(h);
    h = st.resample(h);
  }
  h = mid(h, emb);
  if (mid_attn) h = mid_attn(h);
  for (auto& st : up_) {
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kNearest));
    h = st.resample(h);
    h = torch::cat({h, skips.back()}, 1);
    skips.pop_back();
    h = st.block2(st.block1(h, emb), emb);
    if (st.attn) h = st.attn(h);
  }
  auto out = out_conv(F::silu(out_norm(h)));
  if (!skip_abar_.defined()) return out;
  auto ab = skip_abar_.index_select(0, t.to(torch::kLong).reshape({-1})).to(out.scalar_type()).view({-1, 1, 1, 1});
  return ab.sqrt() * out + (1 - ab).sqrt() * x;
}

NoiseModel as_noise_model(DiffusionUNet model) {
  return [model](const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& y) mutable {
    return model->forward(x, t, y);
  };
}

DiffusionPass diffusion_pass(const NoiseModel& model, const torch::Tensor& x0,
                             const torch::Tensor& y, const DiffusionSchedule& sched,
                             torch::Generator& gen) {
  DiffusionPass p;
  const auto b = x0.size(0);
  p.t = torch::randint(0, sched.steps, {b}, gen, torch::TensorOptions().dtype(torch::kLong));
  p.eps = torch::randn(x0.sizes(), gen, x0.options());
  p.x_t = forward_diffuse(x0, p.t, p.eps, sched);
  p.eps_pred = model(p.x_t, p.t, y);
  p.recon = F::mse_loss(p.eps_pred, p.eps);
  return p;
}

torch::Tensor diffusion_recon_loss(const NoiseModel& model, const torch::Tensor& x0,
                                   const torch::Tensor& y, const DiffusionSchedule& sched,
                                   torch::Generator& gen) {
  return diffusion_pass(model, x0, y, sched, gen).recon;
}

torch::Tensor ddpm_sample(const NoiseModel& model, const torch::Tensor& y, int64_t null_label,
                          SampleShape shape, const DiffusionSchedule& sched, uint64_t seed,
                          double guidance_scale) {
  if (!(guidance_scale >= 0)) throw ArgumentError("guidance scale must be non-negative");
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  const auto b = y.size(0);
  auto x = torch::randn({b, shape.channels, shape.height, shape.width}, gen, torch::kFloat32);
  auto labels = y.to(torch::kLong);
  auto null = torch::full({b}, null_label, torch::kLong);
  const auto* beta = sched.beta.data_ptr<double>();
  const auto* alpha = sched.alpha.data_ptr<double>();
  const auto* abar = sched.alpha_bar.data_ptr<double>();

  for (int t = sched.steps - 1; t >= 0; --t) {
    auto steps = torch::full({b}, t, torch::kLong);
    torch::Tensor eps;
    if (guidance_scale > 0) {
      auto both = model(torch::cat({x, x}), torch::cat({steps, steps}), torch::cat({labels, null}));
      auto parts = both.chunk(2);
      eps = (1.0 + guidance_scale) * parts[0] - guidance_scale * parts[1];
    } else {
      eps = model(x, steps, labels);
    }
    auto x0 = ((x - std::sqrt(1.0 - abar[t]) * eps) / std::sqrt(abar[t])).clamp(-1.0, 1.0);
    if (t == 0) {
      x = x0;
      break;
    }
    const double ab_prev = abar[t - 1];
    const double c0 = beta[t] * std::sqrt(ab_prev) / (1.0 - abar[t]);
    const double ct = (1.0 - ab_prev) * std::sqrt(alpha[t]) / (1.0 - abar[t]);
    const double var = beta[t] * (1.0 - ab_prev) / (1.0 - abar[t]);
    x = c0 * x0 + ct * x + std::sqrt(var) * torch::randn(x.sizes(), gen, x.options());
  }
  return x.clamp(-1.0, 1.0);
}

torch::Tensor ddpm_sample(DiffusionUNet& model, const torch::Tensor& y,
                          const DiffusionSchedule& sched, uint64_t seed, double guidance_scale) {
  const int s = model->config().image_size;
  return ddpm_sample(as_noise_model(model), y, model->null_label(), {3, s, s}, sched, seed,
                     guidance_scale);
}

}  // namespace posekey
