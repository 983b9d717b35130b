#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "posekey/config.hpp"
#include "posekey/diffusion.hpp"
#include "posekey/evaluation.hpp"
#include "posekey/extract.hpp"
#include "posekey/image_io.hpp"
#include "posekey/skeleton.hpp"
#include "posekey/synth.hpp"
#include "posekey/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace posekey;
using namespace posekey::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Hyperparameters shared by the diffusion runs below: a narrow U-Net and a
// 200-step schedule so that CPU budgets hold.
TrainConfig diffusion_config(ModelKind kind, uint64_t seed) {
  TrainConfig c;
  c.model = kind;
  c.seed = seed;
  c.image_size = 64;
  c.batch_size = 10;
  c.unet_channels = 8;
  c.timesteps = 200;
  c.beta_start = 5e-4;
  c.beta_end = 0.1;
  c.learning_rate = 1e-3;
  c.adam_beta1 = 0.9;
  c.checkpoint_every = 1000;
  return c;
}

TrainConfig gan_config(ModelKind kind, uint64_t seed) {
  TrainConfig c;
  c.model = kind;
  c.seed = seed;
  c.image_size = 64;
  c.batch_size = 10;
  c.checkpoint_every = 1000;
  return c;
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1: metric oracles ------------------------------------------------------

Outcome metrics_against_oracles(const fs::path&) {
  Outcome o;
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(2, 64);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst_rel = 0.0, worst_self = 0.0;
  for (int i = 0; i < 50; ++i) {
    const int n = dim(rng);
    Eigen::MatrixXd s1 = random_psd(rng, n, n + 3), s2 = random_psd(rng, n, n + 3);
    Eigen::VectorXd m1(n), m2(n);
    for (int k = 0; k < n; ++k) m1(k) = g(rng), m2(k) = 0.5 * g(rng);
    const double expect = closed_form_fid(m1, s1, m2, s2);
    const auto a = stats(m1, s1), b = stats(m2, s2);
    worst_rel = std::max(worst_rel, std::abs(fid(a, b) - expect) / std::abs(expect));
    worst_self = std::max({worst_self, fid(a, a), fid(b, b)});
  }
  o.check(worst_rel < 1e-6, "fid vs closed form on 50 PSD pairs, max rel err " + fmt("%.2e", worst_rel));
  o.check(worst_self <= 1e-8, "fid(A,A) max " + fmt("%.2e", worst_self));

  torch::manual_seed(12);
  auto bank = make_posture_bank(8, 12);
  double worst_id = 0.0, worst_ref = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int size = i < 12 ? 64 : 128;
    auto x = render_posture(bank[i % 8], 0.05, i, {size, size}).image;
    worst_id = std::max(worst_id, std::abs(ms_ssim(x, x) - 1.0));
    auto y = i % 2 ? render_posture(bank[(i + 3) % 8], 0.05, 100 + i, {size, size}).image
                   : (x + 0.4 * torch::randn_like(x)).clamp(-1, 1);
    worst_ref = std::max(worst_ref, std::abs(ms_ssim(x, y) - reference_ms_ssim(x, y)));
  }
  o.check(worst_id <= 1e-6, "ms_ssim(x,x) max |1 - v| " + fmt("%.2e", worst_id));
  o.check(worst_ref < 1e-4, "ms_ssim vs loop reference on 20 pairs, max abs err " + fmt("%.2e", worst_ref));
  return o;
}

// ---- 2: losses and gradients ------------------------------------------------

Outcome losses_and_gradients(const fs::path&) {
  Outcome o;
  auto square = Pose::from_points({{0, 0}, {0, 1}, {1, 1}, {1, 0}}, CoordSpace::normalized);
  auto one = Pose::from_points({{0.1, 0}, {0, 1}, {1, 1}, {1, 0}}, CoordSpace::normalized);
  o.check(keypoint_loss(square, square).value == 0.0, "keypoint_loss identity = 0");
  o.check(std::abs(keypoint_loss(one, square).value - 0.0025) < 1e-12, "keypoint_loss one joint offset = 0.0025");
  o.check(std::abs(keypoint_loss(translate(square, 0.1, 0.1), square).value - 0.02) < 1e-12,
          "keypoint_loss all joints offset = 0.02");

  auto feats = [](std::vector<double> r, std::vector<double> a) {
    RelativePoseFeatures f;
    f.bone_length_ratios = torch::tensor(r, torch::kFloat64);
    f.joint_angles = torch::tensor(a, torch::kFloat64);
    f.ratio_valid = torch::ones({static_cast<int64_t>(r.size())}, torch::kBool);
    f.angle_valid = torch::ones({static_cast<int64_t>(a.size())}, torch::kBool);
    return f;
  };
  const double pc = pose_consistency_loss(feats({1, 1, 1.2}, {0.5, 1.0}), feats({1, 1, 1}, {0.6, 1.0})).item<double>();
  o.check(std::abs(pc - 0.05) < 1e-12, "pose_consistency_loss ratio 0.2 + angle 0.1 = 0.05");
  const SkeletonTopology chain({"a", "b", "c", "d"}, {{0, 1}, {1, 2}, {2, 3}}, {{0, 1, 2}, {1, 2, 3}}, 0);
  auto sq = relative_pose_features(square, chain);
  o.check(torch::allclose(sq.bone_length_ratios, torch::ones({3}, torch::kFloat64)) &&
              torch::allclose(sq.joint_angles, torch::full({2}, std::numbers::pi / 2, torch::kFloat64)),
          "square chain ratios 1, angles pi/2");

  std::mt19937_64 rng(21);
  const auto& topo = SkeletonTopology::dance15();
  auto all = torch::ones({15}, torch::kBool);
  double kp_err = 0.0, pose_err = 0.0;
  for (int i = 0; i < 20; ++i) {
    auto gt = uniform_pose_coords(rng);
    auto gen = uniform_pose_coords(rng);
    kp_err = std::max(kp_err, gradient_error([&](const torch::Tensor& x) { return keypoint_loss(x, gt, all); }, gen));
    auto gtf = relative_pose_features(gt, all, topo);
    pose_err = std::max(pose_err, gradient_error(
        [&](const torch::Tensor& x) { return pose_consistency_loss(relative_pose_features(x, all, topo), gtf); },
        gen));
  }
  o.check(kp_err < 1e-3, "keypoint_loss gradient vs central FD, 20 poses, max rel err " + fmt("%.2e", kp_err));
  o.check(pose_err < 1e-3, "pose_consistency_loss gradient vs central FD, 20 poses, max rel err " + fmt("%.2e", pose_err));

  // Through the soft-argmax extractor on 64x64 renders, probing the pixels
  // with the largest analytic gradient plus random ones.
  SoftArgmaxExtractor ex;
  auto bank = make_posture_bank(4, 21);
  torch::manual_seed(21);
  double worst = 0.0;
  for (int i = 0; i < 4; ++i) {
    auto r = render_posture(bank[i], 0.05, i, {64, 64});
    auto img = r.image.to(torch::kFloat64);
    auto ref = render_posture(bank[(i + 1) % 4], 0.05, 50 + i, {64, 64});
    auto gt = ref.keypoints.coords / 64.0;
    auto gtf = relative_pose_features(ref.keypoints.coords, all, topo);
    for (int which = 0; which < 2; ++which) {
      auto f = [&](const torch::Tensor& x) {
        auto c = ex.extract_batch(x.unsqueeze(0)).coords[0];
        return which == 0 ? keypoint_loss(c / 64.0, gt, all)
                          : pose_consistency_loss(relative_pose_features(c, all, topo), gtf);
      };
      auto x = img.clone().requires_grad_(true);
      f(x).backward();
      auto grad = x.grad().view(-1);
      auto probes = torch::cat({std::get<1>(grad.abs().topk(30)),
                                torch::randint(0, grad.numel(), {10}, torch::TensorOptions().dtype(torch::kLong))});
      auto flat = img.clone().view(-1);
      const double h = 1e-5;
      double max_err = 0.0, max_ref = 0.0;
      for (int64_t k = 0; k < probes.numel(); ++k) {
        const int64_t p = probes[k].item<int64_t>();
        const double v = flat[p].item<double>();
        flat[p] = v + h;
        const double up = f(flat.view(img.sizes())).item<double>();
        flat[p] = v - h;
        const double down = f(flat.view(img.sizes())).item<double>();
        flat[p] = v;
        const double numeric = (up - down) / (2 * h);
        max_err = std::max(max_err, std::abs(numeric - grad[p].item<double>()));
        max_ref = std::max(max_ref, std::abs(numeric));
      }
      worst = std::max(worst, max_ref > 0 ? max_err / max_ref : 1.0);
    }
  }
  o.check(worst < 1e-2, "both losses through soft-argmax at 64x64 vs central FD, max rel err " + fmt("%.2e", worst));
  return o;
}

// ---- 3: invariances ---------------------------------------------------------

Outcome invariances(const fs::path&) {
  Outcome o;
  const auto& topo = SkeletonTopology::dance15();
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  auto loss = [&](const Pose& a, const Pose& b) {
    return pose_consistency_loss(relative_pose_features(a, topo), relative_pose_features(b, topo)).item<double>();
  };
  for (int i = 0; i < 100; ++i) {
    auto p = random_pose(rng);
    worst = std::max({worst, loss(p, translate(p, 3 * u(rng), 3 * u(rng))),
                      loss(p, rotate_about_centroid(p, std::numbers::pi * u(rng))),
                      loss(p, scale_about_centroid(p, 1.0 + 0.9 * u(rng)))});
  }
  o.check(worst < 1e-8, "pose loss under translation/rotation/scale, 100 poses, max " + fmt("%.2e", worst));

  SoftArgmaxExtractor ex;
  auto bank = make_posture_bank(10, 31);
  std::uniform_int_distribution<int> shift(-4, 4);
  double worst_px = 0.0;
  for (int i = 0; i < 20; ++i) {
    auto r = render_posture(bank[i % 10], 0.05, derive_seed(31, i), {64, 64});
    const int dx = shift(rng), dy = shift(rng);
    auto a = ex.extract(r.image), b = ex.extract(torch::roll(r.image, {dy, dx}, {1, 2}));
    auto expect = a.coords + torch::tensor({double(dx), double(dy)}, torch::kFloat64);
    worst_px = std::max(worst_px, (b.coords - expect).abs().max().item<double>());
  }
  o.check(worst_px < 0.5, "soft-argmax translation equivariance, 20 shifted renders, max " + fmt("%.3f", worst_px) + " px");

  double worst_rt = 0.0;
  for (int T : {200, 1000}) {
    auto sched = make_beta_schedule(T, T == 200 ? 5e-4 : 1e-4, T == 200 ? 0.1 : 0.02);
    torch::manual_seed(T);
    auto x0 = torch::rand({4, 3, 32, 32}) * 1.8 - 0.9;
    for (int64_t t : {int64_t{0}, int64_t{T / 2}, int64_t{T - 1}}) {
      auto eps = torch::randn_like(x0);
      auto tt = torch::full({4}, t, torch::kLong);
      auto back = predict_x0_unclamped(forward_diffuse(x0, tt, eps, sched), eps, tt, sched);
      // float32 rounding of x_t is amplified by 1/sqrt(alpha_bar) when inverting
      const double tol = 1e-5 / std::sqrt(sched.alpha_bar_at(static_cast<int>(t)));
      const double err = (back - x0).abs().max().item<double>();
      worst_rt = std::max(worst_rt, err / tol);
    }
  }
  o.check(worst_rt < 1.0, "forward_diffuse/predict_x0 roundtrip at t in {0, T/2, T-1}, worst err/tol " +
                              fmt("%.3f", worst_rt));
  return o;
}

// ---- 4: extractor accuracy --------------------------------------------------

Outcome extractor_accuracy(const fs::path&) {
  Outcome o;
  SoftArgmaxExtractor ex;
  auto per_joint = torch::zeros({15}, torch::kFloat64);
  int n = 0, invisible = 0;
  for (uint64_t bank_seed = 0; bank_seed < 10; ++bank_seed) {
    auto bank = make_posture_bank(20, 400 + bank_seed);
    for (const auto& spec : bank) {
      auto r = render_posture(spec, 0.0, derive_seed(bank_seed, spec.class_id), {128, 128});
      auto p = ex.extract(r.image);
      invisible += 15 - static_cast<int>(p.visible.sum().item<int64_t>());
      per_joint += (p.coords - r.keypoints.coords).pow(2).sum(-1).sqrt();
      ++n;
    }
  }
  per_joint /= n;
  const double worst = per_joint.max().item<double>();
  o.check(n == 200, "renders scored: " + std::to_string(n));
  o.check(worst < 1.0, "mean extraction error per joint at 128x128, worst joint " + fmt("%.3f", worst) +
                           " px, overall " + fmt("%.3f", per_joint.mean().item<double>()) + " px");
  o.check(invisible == 0, "joints reported invisible: " + std::to_string(invisible));
  return o;
}

// ---- 5: overfit runs --------------------------------------------------------

Outcome overfit(const fs::path& work) {
  Outcome o;
  auto bank = make_posture_bank(10, 5);
  auto manifest = generate_dataset(bank, 1, 0.05, {64, 64}, work / "ten", 5);
  auto ds = load_dataset(manifest);
  cache_reference_poses(ds, SoftArgmaxExtractor{});
  std::vector<int64_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  auto batch = ds.gather(all);

  {
    Trainer tr(gan_config(ModelKind::cgan_pose, 5), 10);
    std::vector<double> kp;
    for (int s = 0; s < 500; ++s) kp.push_back(tr.step(batch).l_kp);
    const double tail = std::accumulate(kp.end() - 10, kp.end(), 0.0) / 10;
    o.check(tail < 0.5 * kp.front(), "cgan_pose 500 steps on 10 images: L_kp step 1 " + fmt("%.5f", kp.front()) +
                                         ", mean of last 10 steps " + fmt("%.5f", tail));
  }
  {
    Trainer tr(diffusion_config(ModelKind::cdiff_pose, 5), 10);
    for (int s = 0; s < 2000; ++s) tr.step(batch);
    auto samples = tr.generate(batch.labels, 5);
    std::vector<std::vector<Pose>> refs(10);
    for (size_t i = 0; i < ds.size(); ++i) refs[ds.get(i).class_id].push_back(ds.get(i).keypoints);
    SoftArgmaxExtractor ex;
    auto err = mean_keypoint_error(samples, batch.labels, ex, refs);
    write_png(work / "overfit_samples.png", tile_images(samples, 10));
    o.check(err.missing == 0 && err.mean_px < 5.0,
            "cdiff_pose 2000 steps on 10 images: sampled mean keypoint error " + fmt("%.3f", err.mean_px) +
                " px (missing " + std::to_string(err.missing) + ")");
  }
  return o;
}

// ---- 6: pose supervision vs plain diffusion ---------------------------------

Outcome pose_vs_plain(const fs::path& work) {
  Outcome o;
  constexpr int kEpochs = 16;
  constexpr int kSamples = 10;
  const auto manifest = generate_dataset(make_posture_bank(10, 6), 200, 0.05, {64, 64}, work / "data", 6);
  const auto train_split = load_dataset(manifest, Split::train);
  auto fx = ClassifierFeatureExtractor::train(train_split, 10, 1234);
  std::map<std::string, std::vector<double>> kp, fd;
  std::vector<MetricReport> reports;
  for (uint64_t seed : {1, 2, 3}) {
    for (auto kind : {ModelKind::cdiff, ModelKind::cdiff_pose}) {
      auto cfg = diffusion_config(kind, seed);
      cfg.epochs = kEpochs;
      cfg.manifest = (work / "data").string();
      const auto name = to_string(kind);
      auto res = train(cfg, work / (name + "_s" + std::to_string(seed)));
      auto rep = evaluate_run(res.checkpoint, manifest, fx, kSamples, 100 + seed);
      kp[name].push_back(rep.mean_kp_err);
      fd[name].push_back(rep.fid);
      std::cout << "  " << name << " seed " << seed << ": fid " << fmt("%.3f", rep.fid) << ", mean kp err "
                << fmt("%.3f", rep.mean_kp_err) << " px" << std::endl;
      reports.push_back(std::move(rep));
    }
  }
  emit_report(reports, work / "report");
  const double kp_pose = median(kp["cdiff_pose"]), kp_plain = median(kp["cdiff"]);
  const double fid_pose = median(fd["cdiff_pose"]), fid_plain = median(fd["cdiff"]);
  o.check(kp_pose <= kp_plain, "median kp err cdiff_pose " + fmt("%.3f", kp_pose) + " <= cdiff " + fmt("%.3f", kp_plain));
  o.check(fid_pose <= fid_plain + 0.5,
          "median FID cdiff_pose " + fmt("%.3f", fid_pose) + " <= cdiff " + fmt("%.3f", fid_plain) + " + 0.5");
  return o;
}

// ---- 7: determinism ---------------------------------------------------------

Outcome determinism(const fs::path& work) {
  Outcome o;
  auto bank = make_posture_bank(3, 7);
  auto m1 = generate_dataset(bank, 12, 0.05, {64, 64}, work / "a", 7);
  auto m2 = generate_dataset(bank, 12, 0.05, {64, 64}, work / "b", 7);
  auto fa = files_under(work / "a"), fb = files_under(work / "b");
  bool same = fa == fb;
  for (size_t i = 0; same && i < fa.size(); ++i) same = read_file(work / "a" / fa[i]) == read_file(work / "b" / fa[i]);
  o.check(same, "two dataset generations are byte-identical (" + std::to_string(fa.size()) + " files)");

  auto fx = ClassifierFeatureExtractor::train(load_dataset(m1, Split::train), 3, 1234);
  double worst = 0.0;
  bool csv_same = true;
  for (auto kind : {ModelKind::cgan, ModelKind::cgan_pose, ModelKind::cdiff, ModelKind::cdiff_pose}) {
    const bool gan = kind == ModelKind::cgan || kind == ModelKind::cgan_pose;
    auto cfg = gan ? gan_config(kind, 7) : diffusion_config(kind, 7);
    cfg.epochs = 2;
    cfg.batch_size = 6;
    std::vector<MetricReport> reps;
    std::vector<RunLog> logs;
    for (const char* side : {"a", "b"}) {
      cfg.manifest = (work / side).string();
      const auto run_dir = work / (std::string("run_") + side + "_" + to_string(kind));
      auto res = train(cfg, run_dir);
      logs.push_back(res.log);
      reps.push_back(evaluate_run(res.checkpoint, side[0] == 'a' ? m1 : m2, fx, 4, 9));
      emit_report({reps.back()}, run_dir / "report");
    }
    if (logs[0].steps.size() != logs[1].steps.size()) {
      worst = INFINITY;
      continue;
    }
    for (size_t i = 0; i < logs[0].steps.size(); ++i) {
      const auto &x = logs[0].steps[i], &y = logs[1].steps[i];
      worst = std::max({worst, std::abs(x.l_main - y.l_main), std::abs(x.l_kp - y.l_kp),
                        std::abs(x.l_pose - y.l_pose), std::abs(x.l_total - y.l_total)});
    }
    const auto ra = work / ("run_a_" + to_string(kind)) / "report", rb = work / ("run_b_" + to_string(kind)) / "report";
    for (const auto& f : files_under(ra))
      if (f.extension() == ".csv" && read_file(ra / f) != read_file(rb / f)) csv_same = false;
  }
  o.check(worst <= 1e-6, "RunLog losses of repeated runs, all four kinds, max diff " + fmt("%.2e", worst));
  o.check(csv_same, "report CSVs of repeated runs are byte-identical");
  return o;
}

// ---- 8: loss switch ablation ------------------------------------------------

Outcome loss_switches(const fs::path& work) {
  Outcome o;
  auto manifest = generate_dataset(make_posture_bank(3, 8), 12, 0.05, {64, 64}, work / "data", 8);
  auto fx = ClassifierFeatureExtractor::train(load_dataset(manifest, Split::train), 3, 1234);
  std::vector<MetricReport> reports;
  const std::vector<std::pair<double, double>> switches{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (auto kind : {ModelKind::cgan_pose, ModelKind::cdiff_pose}) {
    const bool gan = kind == ModelKind::cgan_pose;
    for (auto [kpw, posew] : switches) {
      auto cfg = gan ? gan_config(kind, 8) : diffusion_config(kind, 8);
      cfg.epochs = 2;
      cfg.batch_size = 6;
      cfg.lambda_kp = kpw;
      cfg.lambda_pose = posew;
      cfg.manifest = (work / "data").string();
      const auto dir = work / (to_string(kind) + "_" + fmt("%g", kpw) + "_" + fmt("%g", posew));
      auto res = train(cfg, dir);
      reports.push_back(evaluate_run(res.checkpoint, manifest, fx, 4, 8));
      const auto log = RunLog::from_csv(read_file(dir / "runlog.csv"), read_file(dir / "eval_log.csv"));
      bool kp_nonzero = false, pose_nonzero = false;
      for (const auto& s : log.steps) {
        kp_nonzero |= s.l_kp != 0.0;
        pose_nonzero |= s.l_pose != 0.0;
      }
      const std::string label = to_string(kind) + " (" + fmt("%g", kpw) + "," + fmt("%g", posew) + ")";
      o.check(kp_nonzero == (kpw > 0) && pose_nonzero == (posew > 0),
              label + " nonzero auxiliary columns: " + (kp_nonzero ? "l_kp " : "") + (pose_nonzero ? "l_pose" : ""));
    }
  }
  emit_report(reports, work / "report");
  std::istringstream t2(read_file(work / "report" / "table2.csv"));
  std::set<std::string> rows;
  std::string line;
  std::getline(t2, line);
  while (std::getline(t2, line)) rows.insert(line.substr(0, line.find(',', line.find(',') + 1)));
  const std::set<std::string> expect{"gan,neither", "gan,kp-only", "gan,pose-only", "gan,both",
                                     "diffusion,neither", "diffusion,kp-only", "diffusion,pose-only",
                                     "diffusion,both"};
  o.check(rows == expect, "table2.csv holds all four switch settings for both families (" +
                              std::to_string(rows.size()) + " rows)");
  return o;
}

struct Criterion {
  int id;
  std::string name;
  double limit_s;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"posekey acceptance suite"};
  std::vector<int> only;
  std::string work_dir;
  app.add_option("--criterion", only, "Run only these criteria (repeatable)");
  app.add_option("--work-dir", work_dir, "Directory for run artifacts (default: a fresh temp dir)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "FID and MS-SSIM match independent oracles", 60, metrics_against_oracles},
      {2, "loss examples and finite-difference gradients", 120, losses_and_gradients},
      {3, "invariance suite", 60, invariances},
      {4, "soft-argmax extraction accuracy on clean renders", 120, extractor_accuracy},
      {5, "overfit sanity runs", 900, overfit},
      {6, "pose-supervised diffusion vs plain diffusion", 7200, pose_vs_plain},
      {7, "determinism of data, training and reports", 900, determinism},
      {8, "loss switch ablation end to end", 900, loss_switches},
  };
  const fs::path root = work_dir.empty() ? fs::temp_directory_path() / ("posekey_acceptance_" + std::to_string(::getpid()))
                                         : fs::path(work_dir);
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto dir = root / ("criterion" + std::to_string(c.id));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(dir);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.check(secs < c.limit_s, "runtime " + fmt("%.1f", secs) + " s (limit " + fmt("%.0f", c.limit_s) + " s)");
    for (const auto& n : o.notes) std::cout << "  " << n << "\n";
    std::cout << "criterion " << c.id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << std::endl;
    if (!o.pass) ++failures;
    if (work_dir.empty()) fs::remove_all(dir);
  }
  if (work_dir.empty()) fs::remove_all(root);
  return failures == 0 ? 0 : 1;
}
