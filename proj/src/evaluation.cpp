#include "posekey/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "posekey/errors.hpp"
#include "posekey/image_io.hpp"
#include "posekey/training.hpp"

namespace posekey {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;
using json = nlohmann::json;

ConvClassifierImpl::ConvClassifierImpl(int num_classes, int feature_dim) {
  using torch::nn::Conv2dOptions;
  conv1 = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(3, 32, 4).stride(2).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(32, 64, 4).stride(2).padding(1)));
  conv3 = register_module("conv3", torch::nn::Conv2d(Conv2dOptions(64, 128, 4).stride(2).padding(1)));
  fc1 = register_module("fc1", torch::nn::Linear(128 * 4 * 4, feature_dim));
  fc2 = register_module("fc2", torch::nn::Linear(feature_dim, num_classes));
}

torch::Tensor ConvClassifierImpl::features(const torch::Tensor& x) {
  auto h = F::leaky_relu(conv1->forward(x), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::leaky_relu(conv2->forward(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::leaky_relu(conv3->forward(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions({4, 4}));
  return torch::relu(fc1->forward(h.flatten(1)));
}

torch::Tensor ConvClassifierImpl::forward(const torch::Tensor& x) { return fc2->forward(features(x)); }

ClassifierFeatureExtractor::ClassifierFeatureExtractor(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 1) throw ArgumentError("classifier needs at least one class");
  net_ = ConvClassifier(num_classes, kFeatureDim);
}

ClassifierFeatureExtractor ClassifierFeatureExtractor::train(const Dataset& train_set, int num_classes,
                                                             uint64_t seed, int epochs) {
  if (train_set.size() == 0) throw ArgumentError("cannot train the feature classifier on no images");
  torch::manual_seed(seed);
  ClassifierFeatureExtractor fx(num_classes);
  torch::optim::Adam opt(fx.net_->parameters(), torch::optim::AdamOptions(1e-3));
  for (int e = 0; e < epochs; ++e) {
    for (const auto& idx : train_set.batch_indices(32, derive_seed(seed, 0xfea7 + e))) {
      auto b = train_set.gather(idx);
      opt.zero_grad();
      auto loss = F::cross_entropy(fx.net_->forward(b.images), b.labels);
      loss.backward();
      opt.step();
    }
  }
  return fx;
}

torch::Tensor ClassifierFeatureExtractor::features(const torch::Tensor& images) {
  torch::NoGradGuard ng;
  if (images.dim() != 4 || images.size(1) != 3) throw ArgumentError("images must be [N,3,H,W]");
  // One image at a time so a feature never depends on its batch neighbours.
  std::vector<torch::Tensor> out;
  out.reserve(images.size(0));
  for (int64_t i = 0; i < images.size(0); ++i)
    out.push_back(net_->features(images.slice(0, i, i + 1).to(torch::kFloat32)));
  if (out.empty()) return torch::empty({0, kFeatureDim}, torch::kFloat64);
  return torch::cat(out, 0).to(torch::kFloat64);
}

double ClassifierFeatureExtractor::accuracy(const Dataset& ds) {
  torch::NoGradGuard ng;
  if (ds.size() == 0) return 0.0;
  int64_t correct = 0;
  for (int64_t i = 0; i < static_cast<int64_t>(ds.size()); i += 100) {
    const int64_t e = std::min<int64_t>(ds.size(), i + 100);
    auto pred = net_->forward(ds.images().slice(0, i, e)).argmax(1);
    correct += (pred == ds.labels().slice(0, i, e)).sum().item<int64_t>();
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

void ClassifierFeatureExtractor::save(const fs::path& file) const {
  torch::serialize::OutputArchive ar;
  ar.write("num_classes", c10::IValue(static_cast<int64_t>(num_classes_)));
  torch::serialize::OutputArchive m;
  net_->save(m);
  ar.write("net", m);
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  ar.save_to(file.string());
}

ClassifierFeatureExtractor ClassifierFeatureExtractor::load(const fs::path& file) {
  try {
    torch::serialize::InputArchive ar;
    ar.load_from(file.string());
    c10::IValue v;
    ar.read("num_classes", v);
    ClassifierFeatureExtractor fx(static_cast<int>(v.toInt()));
    torch::serialize::InputArchive m;
    ar.read("net", m);
    fx.net_->load(m);
    return fx;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError("cannot load feature extractor " + file.string() + ": " + e.what());
  }
}

GaussianStats gaussian_stats(const torch::Tensor& features) {
  if (features.dim() != 2) throw ArgumentError("features must be [N,F]");
  if (features.size(0) < 2) throw ArgumentError("gaussian_stats needs at least 2 samples");
  auto f = features.to(torch::kFloat64);
  GaussianStats s;
  s.mean = f.mean(0);
  auto c = f - s.mean;
  s.covariance = c.t().matmul(c) / static_cast<double>(f.size(0) - 1);
  return s;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return Eigen::Map<const RowMat>(c.data_ptr<double>(), c.size(0), c.size(1));
}

Eigen::VectorXd to_eigen_vec(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return Eigen::Map<const Eigen::VectorXd>(c.data_ptr<double>(), c.numel());
}

double psd_tolerance(const Eigen::VectorXd& eig) {
  return 1e-6 * std::max(1.0, eig.cwiseAbs().maxCoeff());
}

Eigen::VectorXd checked_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es,
                                    const char* what) {
  if (es.info() != Eigen::Success) throw NumericError(std::string("eigen decomposition failed for ") + what);
  const auto& ev = es.eigenvalues();
  if (ev.size() > 0 && ev.minCoeff() < -psd_tolerance(ev))
    throw NumericError(std::string(what) + " is not positive semi-definite (eigenvalue " +
                       std::to_string(ev.minCoeff()) + ")");
  return ev.cwiseMax(0.0);
}

}  // namespace

double fid(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.numel() != b.mean.numel() || a.covariance.dim() != 2 || b.covariance.dim() != 2 ||
      a.covariance.size(0) != a.mean.numel() || b.covariance.size(0) != b.mean.numel() ||
      a.covariance.size(1) != a.mean.numel() || b.covariance.size(1) != b.mean.numel())
    throw ArgumentError("gaussian stats dimensions do not match");
  Eigen::MatrixXd s1 = to_eigen(a.covariance);
  Eigen::MatrixXd s2 = to_eigen(b.covariance);
  s1 = 0.5 * (s1 + s1.transpose());
  s2 = 0.5 * (s2 + s2.transpose());
  const Eigen::VectorXd diff = to_eigen_vec(a.mean) - to_eigen_vec(b.mean);

  // Tr sqrt(S1 S2) = Tr sqrt(R S2 R) with R = S1^(1/2); the latter is symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
  const Eigen::VectorXd ev1 = checked_eigenvalues(es1, "first covariance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(s2, Eigen::EigenvaluesOnly);
  checked_eigenvalues(es2, "second covariance");
  const Eigen::MatrixXd root =
      es1.eigenvectors() * ev1.cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();
  Eigen::MatrixXd m = root * s2 * root;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esm(m, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd evm = checked_eigenvalues(esm, "covariance product");
  const double tr_sqrt = evm.cwiseSqrt().sum();
  const double d = diff.squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

namespace {

constexpr double kMsSsimWeights[kMsSsimMaxScales] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

torch::Tensor gaussian_window(int channels) {
  auto g = torch::empty({kSsimWindow}, torch::kFloat64);
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    g[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
  }
  g = g / g.sum();
  auto w2 = torch::outer(g, g);
  return w2.view({1, 1, kSsimWindow, kSsimWindow}).repeat({channels, 1, 1, 1});
}

}  // namespace

int ms_ssim_scales_for(int height, int width, int requested) {
  if (requested < 1 || requested > kMsSsimMaxScales) throw ArgumentError("MS-SSIM scale count must be 1..5");
  const int side = std::min(height, width);
  if (side < kSsimWindow) throw ArgumentError("images are smaller than the 11-pixel SSIM window");
  int m = requested;
  while (m > 1 && (side >> (m - 1)) < kSsimWindow) --m;
  return m;
}

MsSsimResult ms_ssim_batch(const torch::Tensor& a, const torch::Tensor& b, int scales) {
  if (!a.sizes().equals(b.sizes())) throw ArgumentError("MS-SSIM inputs differ in shape");
  auto x = a.dim() == 3 ? a.unsqueeze(0) : a;
  auto y = b.dim() == 3 ? b.unsqueeze(0) : b;
  if (x.dim() != 4) throw ArgumentError("MS-SSIM inputs must be [C,H,W] or [N,C,H,W]");
  torch::NoGradGuard ng;
  x = (x.to(torch::kFloat64) + 1.0) / 2.0;
  y = (y.to(torch::kFloat64) + 1.0) / 2.0;
  const int64_t ch = x.size(1);

  MsSsimResult r;
  r.scales = ms_ssim_scales_for(static_cast<int>(x.size(2)), static_cast<int>(x.size(3)), scales);
  r.reduced = r.scales < scales;
  double wsum = 0;
  for (int s = 0; s < r.scales; ++s) wsum += kMsSsimWeights[s];

  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto win = gaussian_window(static_cast<int>(ch));
  auto filt = [&](const torch::Tensor& t) {
    return F::conv2d(t, win, F::Conv2dFuncOptions().groups(ch));
  };
  auto value = torch::ones({x.size(0), ch}, torch::kFloat64);
  for (int s = 0; s < r.scales; ++s) {
    auto mx = filt(x), my = filt(y);
    auto sxx = filt(x * x) - mx * mx;
    auto syy = filt(y * y) - my * my;
    auto sxy = filt(x * y) - mx * my;
    auto cs_map = (2 * sxy + c2) / (sxx + syy + c2);
    const double w = kMsSsimWeights[s] / wsum;
    if (s + 1 < r.scales) {
      value = value * torch::relu(cs_map.mean({2, 3})).pow(w);
      x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2).stride(2));
      y = F::avg_pool2d(y, F::AvgPool2dFuncOptions(2).stride(2));
    } else {
      auto l_map = (2 * mx * my + c1) / (mx * mx + my * my + c1);
      value = value * torch::relu((l_map * cs_map).mean({2, 3})).pow(w);
    }
  }
  r.value = value.mean(1).clamp(0.0, 1.0);
  return r;
}

double ms_ssim(const torch::Tensor& a, const torch::Tensor& b, int scales) {
  if (a.dim() != 3) throw ArgumentError("ms_ssim takes single [C,H,W] images");
  return ms_ssim_batch(a, b, scales).value[0].item<double>();
}

KeypointErrorReport mean_keypoint_error(const torch::Tensor& images, const torch::Tensor& labels,
                                        PoseExtractor& extractor,
                                        const std::vector<std::vector<Pose>>& references) {
  if (images.dim() != 4 || labels.dim() != 1 || images.size(0) != labels.size(0))
    throw ArgumentError("images must be [N,3,H,W] with one label each");
  const int k = extractor.topology().joint_count();
  const auto n_classes = references.size();
  KeypointErrorReport r;
  r.per_class_px.assign(n_classes, 0.0);
  r.per_class_scored.assign(n_classes, 0);
  auto lab = labels.to(torch::kLong).contiguous();
  double total = 0;
  int scored = 0;
  int64_t visible_joints = 0;
  for (int64_t i = 0; i < images.size(0); ++i) {
    const int64_t c = lab[i].item<int64_t>();
    if (c < 0 || c >= static_cast<int64_t>(n_classes) || references[c].empty())
      throw ArgumentError("no reference pose for class " + std::to_string(c));
    Pose p;
    try {
      p = extractor.extract(images[i]);
    } catch (const DetectorError&) {
      ++r.missing;
      continue;
    }
    if (p.joint_count() != k) throw ArgumentError("extractor returned the wrong joint count");
    auto pc = p.coords.to(torch::kFloat64);
    auto pv = p.visible.to(torch::kBool);
    const int64_t nvis = pv.sum().item<int64_t>();
    if (nvis == 0) {
      ++r.missing;
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& ref : references[c]) {
      auto mask = pv & ref.visible.to(torch::kBool);
      const auto m = mask.sum().item<int64_t>();
      if (m == 0) continue;
      auto d = (pc - ref.coords.to(torch::kFloat64)).norm(2, 1);
      best = std::min(best, d.masked_select(mask).mean().item<double>());
    }
    if (!std::isfinite(best)) {
      ++r.missing;
      continue;
    }
    visible_joints += nvis;
    total += best;
    ++scored;
    r.per_class_px[c] += best;
    ++r.per_class_scored[c];
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.mean_px = scored ? total / scored : nan;
  for (size_t c = 0; c < n_classes; ++c)
    r.per_class_px[c] = r.per_class_scored[c] ? r.per_class_px[c] / r.per_class_scored[c] : nan;
  r.visible_fraction = scored ? static_cast<double>(visible_joints) / (static_cast<double>(scored) * k) : 0.0;
  return r;
}

KeypointErrorReport mean_keypoint_error(const torch::Tensor& images, const torch::Tensor& labels,
                                        PoseExtractor& extractor,
                                        const std::vector<PostureSpec>& bank) {
  if (images.dim() != 4) throw ArgumentError("images must be [N,3,H,W]");
  const ImageDims dims{static_cast<int>(images.size(3)), static_cast<int>(images.size(2))};
  std::vector<std::vector<Pose>> refs;
  for (const auto& spec : bank)
    refs.push_back({denormalize_keypoints(forward_kinematics(spec, extractor.topology()), dims)});
  return mean_keypoint_error(images, labels, extractor, refs);
}

std::string ablation_variant(const MetricReport& r) {
  const bool kp = r.lambda_kp > 0, pose = r.lambda_pose > 0;
  if (kp && pose) return "both";
  if (kp) return "kp-only";
  if (pose) return "pose-only";
  return "neither";
}

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string MetricReport::to_json() const {
  json j;
  j["model"] = model;
  j["lambda_kp"] = lambda_kp;
  j["lambda_pose"] = lambda_pose;
  j["seed"] = seed;
  j["sample_seed"] = sample_seed;
  j["fid"] = num(fid);
  j["ms_ssim"] = num(ms_ssim);
  j["mean_kp_err"] = num(mean_kp_err);
  j["kp_missing"] = kp_missing;
  j["n_samples_per_class"] = n_samples_per_class;
  j["ms_ssim_scales"] = ms_ssim_scales;
  j["feature_source"] = feature_source;
  j["config_hash"] = config_hash;
  j["dataset_hash"] = dataset_hash;
  j["caveats"] = caveats;
  json pc = json::array();
  for (const auto& c : per_class)
    pc.push_back({{"class_id", c.class_id}, {"fid", num(c.fid)}, {"ms_ssim", num(c.ms_ssim)},
                  {"mean_kp_err", num(c.mean_kp_err)}});
  j["per_class"] = pc;
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricReport r;
    r.model = j.at("model").get<std::string>();
    r.lambda_kp = j.at("lambda_kp").get<double>();
    r.lambda_pose = j.at("lambda_pose").get<double>();
    r.seed = j.at("seed").get<uint64_t>();
    r.sample_seed = j.at("sample_seed").get<uint64_t>();
    r.fid = num_from(j.at("fid"));
    r.ms_ssim = num_from(j.at("ms_ssim"));
    r.mean_kp_err = num_from(j.at("mean_kp_err"));
    r.kp_missing = j.at("kp_missing").get<int>();
    r.n_samples_per_class = j.at("n_samples_per_class").get<int>();
    r.ms_ssim_scales = j.at("ms_ssim_scales").get<int>();
    r.feature_source = j.at("feature_source").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.dataset_hash = j.at("dataset_hash").get<std::string>();
    r.caveats = j.at("caveats").get<std::vector<std::string>>();
    for (const auto& c : j.at("per_class"))
      r.per_class.push_back({c.at("class_id").get<int>(), num_from(c.at("fid")),
                             num_from(c.at("ms_ssim")), num_from(c.at("mean_kp_err"))});
    return r;
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed metric report: ") + e.what());
  }
}

MetricReport evaluate_samples(const torch::Tensor& generated, const torch::Tensor& labels,
                              const Dataset& real, const std::vector<PostureSpec>& bank,
                              FeatureExtractor& features, PoseExtractor& pose_extractor) {
  torch::NoGradGuard ng;
  if (generated.dim() != 4 || labels.dim() != 1 || generated.size(0) != labels.size(0))
    throw ArgumentError("generated images must be [N,3,H,W] with one label each");
  if (real.size() < 2) throw ArgumentError("need at least two real images");
  if (generated.size(2) != real.images().size(2) || generated.size(3) != real.images().size(3))
    throw ArgumentError("generated and real images differ in size");
  const int n_classes = static_cast<int>(bank.size());
  auto gen_labels = labels.to(torch::kLong);
  const auto& real_labels = real.labels();
  if (gen_labels.numel() > 0 && gen_labels.max().item<int64_t>() >= n_classes)
    throw ArgumentError("sample label outside the posture bank");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  MetricReport rep;
  rep.feature_source = features.source();
  auto f_real = features.features(real.images());
  auto f_gen = features.features(generated);
  rep.fid = generated.size(0) >= 2 ? fid(gaussian_stats(f_real), gaussian_stats(f_gen)) : nan;

  std::vector<double> ssim_values(generated.size(0), nan);
  int min_count = std::numeric_limits<int>::max();
  auto kp = mean_keypoint_error(generated, gen_labels, pose_extractor, bank);
  rep.mean_kp_err = kp.mean_px;
  rep.kp_missing = kp.missing;
  for (int c = 0; c < n_classes; ++c) {
    ClassMetrics cm;
    cm.class_id = c;
    auto gi = torch::nonzero(gen_labels == c).flatten();
    auto ri = torch::nonzero(real_labels == c).flatten();
    min_count = std::min(min_count, static_cast<int>(gi.numel()));
    cm.fid = gi.numel() >= 2 && ri.numel() >= 2
                 ? fid(gaussian_stats(f_real.index_select(0, ri)), gaussian_stats(f_gen.index_select(0, gi)))
                 : nan;
    cm.ms_ssim = nan;
    if (gi.numel() > 0 && ri.numel() > 0) {
      auto g = generated.index_select(0, gi).to(torch::kFloat64);
      auto rimg = real.images().index_select(0, ri).to(torch::kFloat64);
      auto nearest = torch::cdist(g.flatten(1), rimg.flatten(1)).argmin(1);
      auto res = ms_ssim_batch(g, rimg.index_select(0, nearest));
      rep.ms_ssim_scales = res.scales;
      cm.ms_ssim = res.value.mean().item<double>();
      auto gi_acc = gi.accessor<int64_t, 1>();
      for (int64_t k = 0; k < gi.numel(); ++k) ssim_values[gi_acc[k]] = res.value[k].item<double>();
    }
    cm.mean_kp_err = kp.per_class_px[c];
    rep.per_class.push_back(cm);
  }
  double s = 0;
  int n = 0;
  for (double v : ssim_values)
    if (std::isfinite(v)) {
      s += v;
      ++n;
    }
  rep.ms_ssim = n ? s / n : nan;
  rep.n_samples_per_class = min_count == std::numeric_limits<int>::max() ? 0 : min_count;
  if (rep.n_samples_per_class < kRecommendedSamplesPerClass)
    rep.caveats.push_back("n_samples_per_class=" + std::to_string(rep.n_samples_per_class) +
                          " is below the recommended " + std::to_string(kRecommendedSamplesPerClass) +
                          "; per-class FID carries small-sample bias");
  if (rep.ms_ssim_scales > 0 && rep.ms_ssim_scales < kMsSsimMaxScales)
    rep.caveats.push_back("MS-SSIM computed with " + std::to_string(rep.ms_ssim_scales) +
                          " scales (image side below 176 px), weights renormalized");
  if (kp.missing > 0)
    rep.caveats.push_back(std::to_string(kp.missing) + " samples had no extractable pose");
  return rep;
}

MetricReport evaluate_run(const fs::path& checkpoint, const DatasetManifest& manifest,
                          FeatureExtractor& features, int n_samples, uint64_t seed,
                          PoseExtractor* pose_extractor) {
  if (n_samples < 1) throw ArgumentError("n_samples must be positive");
  Trainer tr = Trainer::load(checkpoint);
  const auto real = load_dataset(manifest);
  if (tr.num_classes() != manifest.class_count())
    throw LoadError("checkpoint has " + std::to_string(tr.num_classes()) + " classes, dataset has " +
                    std::to_string(manifest.class_count()));
  if (real.dims().width != tr.config().image_size || real.dims().height != tr.config().image_size)
    throw LoadError("checkpoint image size does not match the dataset");
  const auto bank = read_bank(manifest.root / "bank.json").bank;
  if (static_cast<int>(bank.size()) != manifest.class_count())
    throw LoadError("bank.json does not match the manifest's class count");

  auto labels = torch::arange(tr.num_classes(), torch::kLong).repeat_interleave(n_samples);
  auto images = tr.generate(labels, seed);
  SoftArgmaxExtractor default_extractor;
  PoseExtractor& pe = pose_extractor ? *pose_extractor : default_extractor;
  MetricReport rep = evaluate_samples(images, labels, real, bank, features, pe);
  rep.model = to_string(tr.kind());
  const auto w = effective_weights(tr.config());
  rep.lambda_kp = w.lambda_kp;
  rep.lambda_pose = w.lambda_pose;
  rep.seed = tr.config().seed;
  rep.sample_seed = seed;
  rep.config_hash = sha256_hex(tr.config().to_text());
  rep.dataset_hash = manifest_hash(manifest);
  return rep;
}

namespace {

std::string f6(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

int kind_rank(const std::string& model) {
  static const std::vector<std::string> order{"cgan", "cgan_pose", "cdiff", "cdiff_pose"};
  auto it = std::find(order.begin(), order.end(), model);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

int variant_rank(const std::string& v) {
  static const std::vector<std::string> order{"neither", "kp-only", "pose-only", "both"};
  return static_cast<int>(std::find(order.begin(), order.end(), v) - order.begin());
}

bool canonical_variant(const MetricReport& r) {
  const auto v = ablation_variant(r);
  return (r.model == "cgan" || r.model == "cdiff") ? v == "neither" : v == "both";
}

std::string family(const std::string& model) {
  return model.rfind("cgan", 0) == 0 ? "gan" : model.rfind("cdiff", 0) == 0 ? "diffusion" : model;
}

std::string series_label(const MetricReport& r) {
  return canonical_variant(r) ? r.model : r.model + "-" + ablation_variant(r);
}

double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + file.string());
}

std::string fmt_lambda(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void bar_chart(const fs::path& file, const std::string& title, const std::vector<std::string>& series,
               const std::vector<std::vector<double>>& values, int n_classes) {
  const int group_w = std::max(24, static_cast<int>(series.size()) * 12 + 12);
  const int left = 70, right = 20, top = 50, bottom = 60;
  const int plot_h = 300;
  const int width = std::max(640, left + right + n_classes * group_w);
  const int height = top + plot_h + bottom + 18 * static_cast<int>(series.size());
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  double vmax = 0;
  for (const auto& s : values)
    for (double v : s)
      if (std::isfinite(v)) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1;
  vmax *= 1.1;
  static const cv::Scalar palette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                                       {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};
  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  cv::putText(img, title, {left, 30}, font, 0.6, {0, 0, 0}, 1, cv::LINE_8);
  const int y0 = top + plot_h;
  cv::line(img, {left, top}, {left, y0}, {0, 0, 0}, 1);
  cv::line(img, {left, y0}, {width - right, y0}, {0, 0, 0}, 1);
  for (int t = 0; t <= 4; ++t) {
    const double v = vmax * t / 4;
    const int y = y0 - static_cast<int>(std::lround(plot_h * t / 4.0));
    cv::line(img, {left - 4, y}, {left, y}, {0, 0, 0}, 1);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    cv::putText(img, buf, {5, y + 4}, font, 0.35, {0, 0, 0}, 1, cv::LINE_8);
  }
  for (int c = 0; c < n_classes; ++c) {
    const int gx = left + c * group_w + 6;
    for (size_t s = 0; s < series.size(); ++s) {
      const double v = values[s][c];
      if (!std::isfinite(v)) continue;
      const int h = static_cast<int>(std::lround(plot_h * v / vmax));
      const int x = gx + static_cast<int>(s) * 12;
      cv::rectangle(img, {x, y0 - h}, {x + 10, y0}, palette[s % 8], cv::FILLED);
    }
    cv::putText(img, std::to_string(c), {gx, y0 + 16}, font, 0.4, {0, 0, 0}, 1, cv::LINE_8);
  }
  cv::putText(img, "key posture (class id)", {left, y0 + 36}, font, 0.45, {0, 0, 0}, 1, cv::LINE_8);
  for (size_t s = 0; s < series.size(); ++s) {
    const int y = y0 + 50 + 18 * static_cast<int>(s);
    cv::rectangle(img, {left, y - 10}, {left + 12, y}, palette[s % 8], cv::FILLED);
    cv::putText(img, series[s], {left + 18, y}, font, 0.45, {0, 0, 0}, 1, cv::LINE_8);
  }
  if (!cv::imwrite(file.string(), img)) throw IoError("cannot write " + file.string());
}

}  // namespace

void write_per_class_csv(const MetricReport& r, const fs::path& file) {
  std::string out = "class_id,fid,ms_ssim,mean_kp_err\n";
  for (const auto& c : r.per_class)
    out += std::to_string(c.class_id) + "," + f6(c.fid) + "," + f6(c.ms_ssim) + "," + f6(c.mean_kp_err) + "\n";
  write_text(file, out);
}

void emit_report(const std::vector<MetricReport>& reports_in, const fs::path& out_dir) {
  if (reports_in.empty()) throw ArgumentError("no metric reports to emit");
  fs::create_directories(out_dir);
  auto reports = reports_in;
  std::stable_sort(reports.begin(), reports.end(), [](const MetricReport& a, const MetricReport& b) {
    const auto ka = std::make_tuple(kind_rank(a.model), a.model, variant_rank(ablation_variant(a)),
                                    a.lambda_kp, a.lambda_pose, a.seed, a.sample_seed);
    const auto kb = std::make_tuple(kind_rank(b.model), b.model, variant_rank(ablation_variant(b)),
                                    b.lambda_kp, b.lambda_pose, b.seed, b.sample_seed);
    return ka < kb;
  });

  // table1.csv: the four canonical configurations, median over seeds.
  std::string t1 = "model,fid,ms_ssim\n";
  for (const std::string kind : {"cgan", "cgan_pose", "cdiff", "cdiff_pose"}) {
    std::vector<double> f, s;
    for (const auto& r : reports)
      if (r.model == kind && canonical_variant(r)) {
        f.push_back(r.fid);
        s.push_back(r.ms_ssim);
      }
    if (!f.empty()) t1 += kind + "," + f6(median(f)) + "," + f6(median(s)) + "\n";
  }
  write_text(out_dir / "table1.csv", t1);

  // table2.csv: λ-switch ablation per model family.
  std::string t2 = "family,variant,lambda_kp,lambda_pose,runs,fid,ms_ssim,mean_kp_err\n";
  for (const std::string fam : {"gan", "diffusion"}) {
    for (const std::string var : {"neither", "kp-only", "pose-only", "both"}) {
      std::vector<double> f, s, k;
      const MetricReport* first = nullptr;
      for (const auto& r : reports)
        if (family(r.model) == fam && ablation_variant(r) == var) {
          if (!first) first = &r;
          f.push_back(r.fid);
          s.push_back(r.ms_ssim);
          k.push_back(r.mean_kp_err);
        }
      if (!first) continue;
      t2 += fam + "," + var + "," + fmt_lambda(first->lambda_kp) + "," + fmt_lambda(first->lambda_pose) +
            "," + std::to_string(f.size()) + "," + f6(median(f)) + "," + f6(median(s)) + "," +
            f6(median(k)) + "\n";
    }
  }
  write_text(out_dir / "table2.csv", t2);

  // table3.csv: every run.
  std::string t3 =
      "label,model,variant,lambda_kp,lambda_pose,seed,sample_seed,n_samples_per_class,fid,ms_ssim,"
      "mean_kp_err,kp_missing\n";
  std::map<std::string, int> label_count;
  for (const auto& r : reports) ++label_count[series_label(r)];
  std::vector<std::string> run_labels;
  for (const auto& r : reports) {
    std::string label = series_label(r);
    if (label_count[label] > 1) label += "_s" + std::to_string(r.seed);
    run_labels.push_back(label);
    t3 += label + "," + r.model + "," + ablation_variant(r) + "," + fmt_lambda(r.lambda_kp) + "," +
          fmt_lambda(r.lambda_pose) + "," + std::to_string(r.seed) + "," + std::to_string(r.sample_seed) +
          "," + std::to_string(r.n_samples_per_class) + "," + f6(r.fid) + "," + f6(r.ms_ssim) + "," +
          f6(r.mean_kp_err) + "," + std::to_string(r.kp_missing) + "\n";
  }
  write_text(out_dir / "table3.csv", t3);

  if (reports.size() == 1) {
    write_per_class_csv(reports[0], out_dir / "per_class_metrics.csv");
  } else {
    for (size_t i = 0; i < reports.size(); ++i)
      write_per_class_csv(reports[i], out_dir / ("per_class_metrics_" + run_labels[i] + ".csv"));
  }

  // Per-class bar charts, one series per configuration (median over seeds).
  int n_classes = 0;
  for (const auto& r : reports) n_classes = std::max(n_classes, static_cast<int>(r.per_class.size()));
  std::vector<std::string> series;
  for (const auto& r : reports)
    if (std::find(series.begin(), series.end(), series_label(r)) == series.end())
      series.push_back(series_label(r));
  auto per_class_series = [&](auto getter) {
    std::vector<std::vector<double>> out;
    for (const auto& s : series) {
      std::vector<double> row;
      for (int c = 0; c < n_classes; ++c) {
        std::vector<double> v;
        for (const auto& r : reports)
          if (series_label(r) == s && c < static_cast<int>(r.per_class.size())) v.push_back(getter(r.per_class[c]));
        row.push_back(median(v));
      }
      out.push_back(row);
    }
    return out;
  };
  bar_chart(out_dir / "fid_per_class.png", "FID per key posture (lower is better)", series,
            per_class_series([](const ClassMetrics& c) { return c.fid; }), n_classes);
  bar_chart(out_dir / "ms_ssim_per_class.png", "MS-SSIM per key posture (higher is better)", series,
            per_class_series([](const ClassMetrics& c) { return c.ms_ssim; }), n_classes);
  bar_chart(out_dir / "mean_kp_err_per_class.png", "Mean keypoint error per key posture (px)", series,
            per_class_series([](const ClassMetrics& c) { return c.mean_kp_err; }), n_classes);

  json meta;
  meta["aggregation"] = "table1 and table2 report the median over runs sharing model and loss weights";
  meta["ms_ssim_pairing"] = "each generated image against its nearest (L2) real image of the same class";
  meta["fid_reference"] = "all dataset images of the class (global FID: all images)";
  meta["keypoint_error"] =
      "soft-argmax extraction vs the class's canonical posture, mean pixel distance over visible joints";
  json runs = json::array();
  for (size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    runs.push_back({{"label", run_labels[i]},
                    {"model", r.model},
                    {"variant", ablation_variant(r)},
                    {"lambda_kp", r.lambda_kp},
                    {"lambda_pose", r.lambda_pose},
                    {"seed", r.seed},
                    {"sample_seed", r.sample_seed},
                    {"n_samples_per_class", r.n_samples_per_class},
                    {"ms_ssim_scales", r.ms_ssim_scales},
                    {"feature_source", r.feature_source},
                    {"config_hash", r.config_hash},
                    {"dataset_hash", r.dataset_hash},
                    {"caveats", r.caveats}});
  }
  meta["runs"] = runs;
  write_text(out_dir / "metadata.json", meta.dump(2) + "\n");
}

}  // namespace posekey
