#include "posekey/training.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>

#include <torch/torch.h>

#include "posekey/errors.hpp"

namespace posekey {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string fmt_ms(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::vector<StepRecord> parse_records(const std::string& csv, bool with_wall) {
  std::vector<StepRecord> out;
  std::istringstream in(csv);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() != (with_wall ? 7u : 6u)) throw LoadError("malformed run log line: " + line);
    StepRecord r;
    try {
      r.step = std::stoll(cols[0]);
      r.epoch = std::stoi(cols[1]);
      r.l_main = std::stod(cols[2]);
      r.l_kp = std::stod(cols[3]);
      r.l_pose = std::stod(cols[4]);
      r.l_total = std::stod(cols[5]);
      if (with_wall) r.wall_ms = std::stod(cols[6]);
    } catch (const std::exception&) {
      throw LoadError("malformed run log line: " + line);
    }
    out.push_back(r);
  }
  return out;
}

void check_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw DivergenceError(std::string(name) + " is not finite (" + fmt(v) + ")");
}

void check_finite(const torch::Tensor& v, const char* name, int64_t step) {
  const double x = v.item<double>();
  if (!std::isfinite(x))
    throw DivergenceError(std::string(name) + " is not finite (" + fmt(x) + ") at step " +
                          std::to_string(step));
}

void check_gradients(const std::vector<torch::Tensor>& params, const char* what, int64_t step) {
  for (const auto& p : params) {
    const auto& g = p.grad();
    if (g.defined() && !torch::isfinite(g).all().item<bool>())
      throw DivergenceError(std::string("non-finite ") + what + " gradient at step " +
                            std::to_string(step));
  }
}

torch::Tensor composite(const torch::Tensor& main, const char* main_name, const torch::Tensor& kp,
                        const torch::Tensor& pose, const LossWeights& w, int64_t step) {
  check_finite(main, main_name, step);
  auto total = main;
  if (w.lambda_kp != 0) {
    check_finite(kp, "l_kp", step);
    total = total + w.lambda_kp * kp;
  }
  if (w.lambda_pose != 0) {
    check_finite(pose, "l_pose", step);
    total = total + w.lambda_pose * pose;
  }
  return total;
}

double composite(double main, const char* main_name, double kp, double pose, const LossWeights& w) {
  w.validate();
  check_finite(main, main_name);
  double total = main;
  if (w.lambda_kp != 0) {
    check_finite(kp, "l_kp");
    total += w.lambda_kp * kp;
  }
  if (w.lambda_pose != 0) {
    check_finite(pose, "l_pose");
    total += w.lambda_pose * pose;
  }
  return total;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void RunLog::append(const StepRecord& r) {
  if (!steps.empty() && r.step <= steps.back().step)
    throw ArgumentError("run log steps must increase monotonically");
  steps.push_back(r);
}

std::string RunLog::steps_csv() const {
  std::string out = "step,epoch,l_adv_or_recon,l_kp,l_pose,l_total,wall_ms\n";
  for (const auto& r : steps)
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt(r.l_main) + "," +
           fmt(r.l_kp) + "," + fmt(r.l_pose) + "," + fmt(r.l_total) + "," + fmt_ms(r.wall_ms) + "\n";
  return out;
}

std::string RunLog::evals_csv() const {
  std::string out = "step,epoch,l_adv_or_recon,l_kp,l_pose,l_total\n";
  for (const auto& r : evals)
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt(r.l_main) + "," +
           fmt(r.l_kp) + "," + fmt(r.l_pose) + "," + fmt(r.l_total) + "\n";
  return out;
}

RunLog RunLog::from_csv(const std::string& steps_csv, const std::string& evals_csv) {
  RunLog log;
  log.steps = parse_records(steps_csv, true);
  log.evals = parse_records(evals_csv, false);
  return log;
}

void RunLog::write(const fs::path& dir) const {
  fs::create_directories(dir);
  std::ofstream(dir / "runlog.csv", std::ios::binary) << steps_csv();
  std::ofstream(dir / "eval_log.csv", std::ios::binary) << evals_csv();
}

LossWeights effective_weights(const TrainConfig& cfg) {
  if (!uses_pose(cfg.model)) return {0.0, 0.0};
  LossWeights w{cfg.lambda_kp, cfg.lambda_pose};
  w.validate();
  return w;
}

double composite_gan_objective(double l_adv, double l_kp, double l_pose, const LossWeights& w) {
  return composite(l_adv, "l_adv", l_kp, l_pose, w);
}

double composite_diffusion_objective(double l_recon, double l_kp, double l_pose, const LossWeights& w) {
  return composite(l_recon, "l_recon", l_kp, l_pose, w);
}

torch::Tensor composite_gan_objective(const torch::Tensor& l_adv, const torch::Tensor& l_kp,
                                      const torch::Tensor& l_pose, const LossWeights& w) {
  w.validate();
  return composite(l_adv, "l_adv", l_kp, l_pose, w, -1);
}

torch::Tensor composite_diffusion_objective(const torch::Tensor& l_recon, const torch::Tensor& l_kp,
                                            const torch::Tensor& l_pose, const LossWeights& w) {
  w.validate();
  return composite(l_recon, "l_recon", l_kp, l_pose, w, -1);
}

PoseTerms pose_supervision(const torch::Tensor& generated, const torch::Tensor& real,
                           const SoftArgmaxExtractor& extractor, const LossWeights& w,
                           const torch::Tensor& sample_weights, const std::optional<SoftArgmaxResult>& reference) {
  auto zero = torch::zeros({}, generated.options());
  PoseTerms out{zero, zero};
  if (w.lambda_kp == 0 && w.lambda_pose == 0) return out;
  if (generated.sizes() != real.sizes()) throw ArgumentError("generated and real batches differ in shape");

  const auto& topo = extractor.topology();
  auto gen = extractor.extract_batch(generated);
  SoftArgmaxResult ref;
  if (reference) {
    ref = *reference;
  } else {
    torch::NoGradGuard ng;
    ref = extractor.extract_batch(real);
  }
  auto scale = torch::tensor({1.0 / static_cast<double>(generated.size(-1)),
                              1.0 / static_cast<double>(generated.size(-2))},
                             gen.coords.options());
  auto g = gen.coords * scale;
  auto r = ref.coords * scale;
  auto reduce = [&](const torch::Tensor& per_sample) {
    return sample_weights.defined() ? (per_sample * sample_weights.to(per_sample.dtype())).mean()
                                    : per_sample.mean();
  };
  if (w.lambda_kp != 0) out.kp = reduce(keypoint_loss(g, r, gen.visible & ref.visible));
  if (w.lambda_pose != 0) {
    auto fg = relative_pose_features(g, gen.visible, topo);
    auto fr = relative_pose_features(r, ref.visible, topo);
    out.pose = reduce(pose_consistency_loss(fg, fr));
  }
  return out;
}

namespace {

// Identity on x whose backward pass rescales each sample's incoming gradient
// to at most k times the norm of the matching sample of main_grad.
torch::Tensor bounded_aux_input(const torch::Tensor& x, const torch::Tensor& main_grad, double k) {
  if (k <= 0) return x;
  auto out = x * 1.0;
  auto bound = k * main_grad.detach().flatten(1).norm(2, 1);
  out.register_hook([bound](torch::Tensor g) {
    auto scale = torch::clamp_max(bound / g.flatten(1).norm(2, 1).clamp_min(1e-30), 1.0);
    return g * scale.view({-1, 1, 1, 1}).to(g.scalar_type());
  });
  return out;
}

std::optional<SoftArgmaxResult> cached_reference(const Batch& batch) {
  if (!batch.ref_coords.defined()) return std::nullopt;
  return SoftArgmaxResult{batch.ref_coords, batch.ref_visible};
}

}  // namespace

StepRecord gan_train_step(GanPair& pair, torch::optim::Adam& g_opt, torch::optim::Adam& d_opt,
                          const Batch& batch, const TrainContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = effective_weights(ctx.config);
  const auto& real = batch.images;
  const auto& y = batch.labels;
  const int64_t b = real.size(0);

  auto z = torch::randn({b, pair.config.z_dim}, ctx.rng, torch::kFloat32);
  auto fake = gan_generate(pair, z, y);

  d_opt.zero_grad();
  auto l_d = adversarial_losses_from_logits(pair.discriminator->forward(real, y),
                                            pair.discriminator->forward(fake.detach(), y))
                 .discriminator;
  check_finite(l_d, "l_disc", ctx.step);
  l_d.backward();
  check_gradients(pair.discriminator->parameters(), "discriminator", ctx.step);
  d_opt.step();

  g_opt.zero_grad();
  auto l_adv = F::softplus(-pair.discriminator->forward(fake, y)).mean();
  auto zero = torch::zeros({}, l_adv.options());
  PoseTerms terms{zero, zero};
  if (w.lambda_kp != 0 || w.lambda_pose != 0) {
    auto image = fake;
    if (ctx.config.pose_grad_bound > 0)
      image = bounded_aux_input(fake, torch::autograd::grad({l_adv}, {fake}, {}, true)[0], ctx.config.pose_grad_bound);
    terms = pose_supervision(image, real, ctx.extractor, w, {}, cached_reference(batch));
  }
  auto total = composite(l_adv, "l_adv", terms.kp, terms.pose, w, ctx.step);
  total.backward();
  check_gradients(pair.generator->parameters(), "generator", ctx.step);
  g_opt.step();

  StepRecord r;
  r.step = ctx.step;
  r.epoch = ctx.epoch;
  r.l_main = l_adv.item<double>();
  r.l_kp = terms.kp.item<double>();
  r.l_pose = terms.pose.item<double>();
  r.l_total = total.item<double>();
  r.wall_ms = ms_since(t0);
  return r;
}

namespace {

torch::Tensor drop_labels(const torch::Tensor& y, double p, int64_t null_label, torch::Generator& rng) {
  if (p <= 0) return y;
  auto u = torch::rand({y.size(0)}, rng, torch::kFloat64);
  return torch::where(u < p, torch::full_like(y, null_label), y);
}

}  // namespace

StepRecord diffusion_train_step(DiffusionUNet& model, torch::optim::Adam& opt,
                                const DiffusionSchedule& sched, const Batch& batch,
                                const TrainContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = effective_weights(ctx.config);
  auto y = drop_labels(batch.labels, ctx.config.label_dropout, model->null_label(), ctx.rng);

  opt.zero_grad();
  auto pass = diffusion_pass(as_noise_model(model), batch.images, y, sched, ctx.rng);
  auto zero = torch::zeros({}, pass.recon.options());
  PoseTerms terms{zero, zero};
  if (w.lambda_kp != 0 || w.lambda_pose != 0) {
    auto recon_grad = (2.0 / pass.eps_pred.numel()) * (pass.eps_pred - pass.eps);
    auto eps = bounded_aux_input(pass.eps_pred, recon_grad, ctx.config.pose_grad_bound);
    auto x0_hat = predict_x0(pass.x_t, eps, pass.t, sched);
    terms = pose_supervision(x0_hat, batch.images, ctx.extractor, w, sched.alpha_bar.index_select(0, pass.t),
                             cached_reference(batch));
  }
  auto total = composite(pass.recon, "l_recon", terms.kp, terms.pose, w, ctx.step);
  total.backward();
  check_gradients(model->parameters(), "model", ctx.step);
  if (ctx.config.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->parameters(), ctx.config.grad_clip);
  opt.step();

  StepRecord r;
  r.step = ctx.step;
  r.epoch = ctx.epoch;
  r.l_main = pass.recon.item<double>();
  r.l_kp = terms.kp.item<double>();
  r.l_pose = terms.pose.item<double>();
  r.l_total = total.item<double>();
  r.wall_ms = ms_since(t0);
  return r;
}

namespace {

torch::optim::AdamOptions adam_options(const TrainConfig& cfg) {
  return torch::optim::AdamOptions(cfg.learning_rate).betas({cfg.adam_beta1, cfg.adam_beta2});
}

UNetConfig unet_config(const TrainConfig& cfg, int num_classes) {
  UNetConfig u;
  u.image_size = cfg.image_size;
  u.num_classes = num_classes;
  u.base_channels = cfg.unet_channels;
  u.attention_resolutions = cfg.attention_resolutions;
  const auto sched = make_beta_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
  u.skip_alpha_bar.assign(sched.alpha_bar.data_ptr<double>(), sched.alpha_bar.data_ptr<double>() + sched.steps);
  return u;
}

GanConfig gan_config(const TrainConfig& cfg, int num_classes) {
  GanConfig g;
  g.image_size = cfg.image_size;
  g.num_classes = num_classes;
  g.z_dim = cfg.z_dim;
  g.label_dim = cfg.label_dim;
  g.hidden = cfg.gan_hidden;
  return g;
}

constexpr uint64_t kTrainStream = 0x7a11;
constexpr uint64_t kEvalStream = 0xe7a1;
constexpr uint64_t kShuffleStream = 0x5401;

}  // namespace

Trainer::Trainer(TrainConfig cfg, int num_classes)
    : cfg_(std::move(cfg)), num_classes_(num_classes), rng_(make_generator(0)) {
  cfg_.validate();
  if (num_classes_ < 1) throw ConfigError("dataset has no classes");
  torch::manual_seed(cfg_.seed);
  rng_ = make_generator(derive_seed(cfg_.seed, kTrainStream));
  if (is_diffusion(cfg_.model)) {
    unet_.emplace(unet_config(cfg_, num_classes_));
    sched_ = make_beta_schedule(cfg_.timesteps, cfg_.beta_start, cfg_.beta_end);
    opt_ = std::make_unique<torch::optim::Adam>((*unet_)->parameters(), adam_options(cfg_));
  } else {
    gan_.emplace(gan_config(cfg_, num_classes_));
    opt_ = std::make_unique<torch::optim::Adam>(gan_->generator->parameters(), adam_options(cfg_));
    d_opt_ = std::make_unique<torch::optim::Adam>(gan_->discriminator->parameters(), adam_options(cfg_));
  }
}

void Trainer::set_budget(int epochs, int64_t max_steps) {
  if (epochs < 0 || max_steps < 0) throw ConfigError("training budget must be non-negative");
  cfg_.epochs = epochs;
  cfg_.max_steps = max_steps;
}

StepRecord Trainer::step(const Batch& batch) {
  if (batch.images.dim() != 4 || batch.images.size(2) != cfg_.image_size ||
      batch.images.size(3) != cfg_.image_size)
    throw ArgumentError("batch images do not match the configured image size");
  TrainContext ctx{cfg_, extractor_, rng_, step_ + 1, epoch_};
  StepRecord r = unet_ ? diffusion_train_step(*unet_, *opt_, sched_, batch, ctx)
                       : gan_train_step(*gan_, *opt_, *d_opt_, batch, ctx);
  ++step_;
  ++batch_in_epoch_;
  log_.append(r);
  return r;
}

void Trainer::finish_epoch() {
  ++epoch_;
  batch_in_epoch_ = 0;
}

StepRecord Trainer::evaluate(const Dataset& eval_set) {
  torch::NoGradGuard ng;
  const auto w = effective_weights(cfg_);
  const LossWeights all{1.0, 1.0};
  auto gen = make_generator(derive_seed(cfg_.seed, kEvalStream));
  const int64_t n = std::min<int64_t>(static_cast<int64_t>(eval_set.size()), cfg_.eval_max_images);
  double s_main = 0, s_kp = 0, s_pose = 0;
  const int64_t chunk = 50;
  for (int64_t i = 0; i < n; i += chunk) {
    std::vector<int64_t> idx;
    for (int64_t j = i; j < std::min(n, i + chunk); ++j) idx.push_back(j);
    auto batch = eval_set.gather(idx);
    const double m = static_cast<double>(idx.size());
    torch::Tensor generated, main, weights;
    if (unet_) {
      auto pass = diffusion_pass(as_noise_model(*unet_), batch.images, batch.labels, sched_, gen);
      generated = predict_x0(pass.x_t, pass.eps_pred, pass.t, sched_);
      weights = sched_.alpha_bar.index_select(0, pass.t);
      main = pass.recon;
    } else {
      auto z = torch::randn({batch.images.size(0), gan_->config.z_dim}, gen, torch::kFloat32);
      generated = gan_generate(*gan_, z, batch.labels);
      main = F::softplus(-gan_->discriminator->forward(generated, batch.labels)).mean();
    }
    auto terms = pose_supervision(generated, batch.images, extractor_, all, weights);
    s_main += m * main.item<double>();
    s_kp += m * terms.kp.item<double>();
    s_pose += m * terms.pose.item<double>();
  }
  StepRecord r;
  r.step = step_;
  r.epoch = epoch_;
  if (n > 0) {
    r.l_main = s_main / n;
    r.l_kp = s_kp / n;
    r.l_pose = s_pose / n;
    r.l_total = composite(r.l_main, "l_main", r.l_kp, r.l_pose, w);
  }
  log_.evals.push_back(r);
  return r;
}

torch::Tensor Trainer::generate(const torch::Tensor& labels, uint64_t seed) {
  torch::NoGradGuard ng;
  auto y = labels.to(torch::kLong);
  if (y.dim() != 1) throw ArgumentError("labels must be a 1-D tensor");
  if (y.numel() == 0) return torch::empty({0, 3, cfg_.image_size, cfg_.image_size});
  if (y.min().item<int64_t>() < 0 || y.max().item<int64_t>() >= num_classes_)
    throw ArgumentError("label out of range for this model");
  const int64_t chunk = 50;
  std::vector<torch::Tensor> parts;
  if (unet_) {
    for (int64_t i = 0, c = 0; i < y.size(0); i += chunk, ++c)
      parts.push_back(ddpm_sample(*unet_, y.slice(0, i, std::min(y.size(0), i + chunk)), sched_,
                                  derive_seed(seed, c), cfg_.guidance_scale));
  } else {
    auto gen = make_generator(seed);
    auto z = torch::randn({y.size(0), gan_->config.z_dim}, gen, torch::kFloat32);
    for (int64_t i = 0; i < y.size(0); i += chunk) {
      const int64_t e = std::min(y.size(0), i + chunk);
      parts.push_back(gan_generate(*gan_, z.slice(0, i, e), y.slice(0, i, e)));
    }
  }
  return torch::cat(parts, 0);
}

void Trainer::save(const fs::path& file) const {
  torch::serialize::OutputArchive ar;
  ar.write("meta/config", c10::IValue(cfg_.to_text()));
  ar.write("meta/num_classes", c10::IValue(static_cast<int64_t>(num_classes_)));
  ar.write("meta/step", c10::IValue(step_));
  ar.write("meta/epoch", c10::IValue(static_cast<int64_t>(epoch_)));
  ar.write("meta/batch_in_epoch", c10::IValue(batch_in_epoch_));
  ar.write("meta/runlog", c10::IValue(log_.steps_csv()));
  ar.write("meta/evallog", c10::IValue(log_.evals_csv()));
  {
    auto gen = rng_;
    std::lock_guard<std::mutex> lock(gen.mutex());
    ar.write("rng/state", gen.get_state(), true);
  }
  if (unet_) {
    torch::serialize::OutputArchive m, o;
    (*unet_)->save(m);
    opt_->save(o);
    ar.write("model", m);
    ar.write("optim", o);
    ar.write("schedule/beta", sched_.beta, true);
    ar.write("schedule/steps", c10::IValue(static_cast<int64_t>(sched_.steps)));
    ar.write("schedule/beta_start", c10::IValue(sched_.beta_start));
    ar.write("schedule/beta_end", c10::IValue(sched_.beta_end));
  } else {
    torch::serialize::OutputArchive g, d, og, od;
    gan_->generator->save(g);
    gan_->discriminator->save(d);
    opt_->save(og);
    d_opt_->save(od);
    ar.write("generator", g);
    ar.write("discriminator", d);
    ar.write("optim", og);
    ar.write("optim_d", od);
  }
  std::string blob = kCheckpointHeader;
  ar.save_to([&](const void* data, size_t n) {
    blob.append(static_cast<const char*>(data), n);
    return n;
  });
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
  }
  fs::rename(tmp, file);
}

Trainer Trainer::load(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + file.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = kCheckpointHeader;
  if (blob.compare(0, header.size(), header) != 0)
    throw LoadError(file.string() + " is not a posekey-ckpt-v1 checkpoint");
  try {
    torch::serialize::InputArchive ar;
    ar.load_from(blob.data() + header.size(), blob.size() - header.size());
    c10::IValue v;
    ar.read("meta/config", v);
    TrainConfig cfg = parse_config(v.toStringRef());
    ar.read("meta/num_classes", v);
    Trainer t(cfg, static_cast<int>(v.toInt()));
    ar.read("meta/step", v);
    t.step_ = v.toInt();
    ar.read("meta/epoch", v);
    t.epoch_ = static_cast<int>(v.toInt());
    ar.read("meta/batch_in_epoch", v);
    t.batch_in_epoch_ = v.toInt();
    c10::IValue runlog, evallog;
    ar.read("meta/runlog", runlog);
    ar.read("meta/evallog", evallog);
    t.log_ = RunLog::from_csv(runlog.toStringRef(), evallog.toStringRef());
    torch::Tensor state;
    ar.read("rng/state", state, true);
    {
      std::lock_guard<std::mutex> lock(t.rng_.mutex());
      t.rng_.set_state(state);
    }
    torch::serialize::InputArchive sub;
    if (t.unet_) {
      torch::Tensor beta;
      ar.read("schedule/beta", beta, true);
      if (!beta.sizes().equals(t.sched_.beta.sizes()) || !torch::equal(beta, t.sched_.beta))
        throw LoadError("checkpoint schedule does not match its config");
      ar.read("model", sub);
      (*t.unet_)->load(sub);
      torch::serialize::InputArchive o;
      ar.read("optim", o);
      t.opt_->load(o);
    } else {
      torch::serialize::InputArchive g, d, og, od;
      ar.read("generator", g);
      ar.read("discriminator", d);
      ar.read("optim", og);
      ar.read("optim_d", od);
      t.gan_->generator->load(g);
      t.gan_->discriminator->load(d);
      t.opt_->load(og);
      t.d_opt_->load(od);
    }
    return t;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError("cannot load checkpoint " + file.string() + ": " + e.what());
  }
}

fs::path resolve_manifest_root(const std::string& manifest) {
  if (manifest.empty()) throw ConfigError("no dataset manifest configured");
  fs::path p(manifest);
  if (fs::is_regular_file(p)) return p.parent_path().empty() ? fs::path(".") : p.parent_path();
  return p;
}

void cache_reference_poses(Dataset& ds, const SoftArgmaxExtractor& extractor) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> coords, visible;
  const int64_t n = static_cast<int64_t>(ds.size());
  for (int64_t i = 0; i < n; i += 100) {
    auto r = extractor.extract_batch(ds.images().slice(0, i, std::min(n, i + 100)));
    coords.push_back(r.coords);
    visible.push_back(r.visible);
  }
  if (n > 0) ds.set_reference_poses(torch::cat(coords), torch::cat(visible));
}

TrainResult train(const TrainConfig& cfg_in, const fs::path& out_dir,
                  const std::optional<fs::path>& resume) {
  cfg_in.validate();
  const auto manifest = DatasetManifest::read(resolve_manifest_root(cfg_in.manifest));
  auto train_set = load_dataset(manifest, Split::train);
  const auto eval_set = load_dataset(manifest, Split::eval);
  if (train_set.size() == 0) throw ConfigError("dataset has no training images");
  const auto dims = train_set.dims();
  if (dims.width != cfg_in.image_size || dims.height != cfg_in.image_size)
    throw ConfigError("dataset images are " + std::to_string(dims.width) + "x" +
                      std::to_string(dims.height) + " but image_size is " +
                      std::to_string(cfg_in.image_size));

  std::optional<Trainer> holder;
  if (resume) {
    holder.emplace(Trainer::load(*resume));
    const auto& c = holder->config();
    if (c.model != cfg_in.model || c.image_size != cfg_in.image_size ||
        holder->num_classes() != manifest.class_count())
      throw LoadError("checkpoint " + resume->string() + " does not match the run configuration");
    holder->set_budget(cfg_in.epochs, cfg_in.max_steps);
  } else {
    holder.emplace(cfg_in, manifest.class_count());
  }
  Trainer& tr = *holder;
  const auto& cfg = tr.config();
  if (uses_pose(cfg.model)) cache_reference_poses(train_set, tr.extractor());

  fs::create_directories(out_dir);
  std::ofstream(out_dir / "config.toml", std::ios::binary) << cfg.to_text();

  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.ckpt";
  auto persist = [&](bool numbered) {
    if (numbered) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_e%04d.ckpt", tr.epoch());
      tr.save(out_dir / name);
    }
    tr.save(result.checkpoint);
    tr.log().write(out_dir);
  };

  if (cfg.epochs == 0 || tr.epoch() >= cfg.epochs) {
    persist(false);
    result.log = tr.log();
    return result;
  }

  for (int epoch = tr.epoch(); epoch < cfg.epochs; ++epoch) {
    const auto order = train_set.batch_indices(cfg.batch_size, derive_seed(cfg.seed, kShuffleStream + epoch));
    for (auto b = static_cast<size_t>(tr.batch_in_epoch()); b < order.size(); ++b) {
      if (cfg.max_steps > 0 && tr.global_step() >= cfg.max_steps) {
        persist(false);
        result.log = tr.log();
        result.stopped_early = true;
        return result;
      }
      tr.step(train_set.gather(order[b]));
    }
    tr.finish_epoch();
    if (tr.epoch() % cfg.checkpoint_every == 0 || tr.epoch() == cfg.epochs) {
      if (eval_set.size() > 0) tr.evaluate(eval_set);
      persist(true);
    }
  }
  result.log = tr.log();
  return result;
}

}  // namespace posekey
