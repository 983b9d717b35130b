#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "posekey/config.hpp"
#include "posekey/errors.hpp"
#include "posekey/evaluation.hpp"
#include "posekey/extract.hpp"
#include "posekey/image_io.hpp"
#include "posekey/synth.hpp"
#include "posekey/training.hpp"

namespace fs = std::filesystem;
using namespace posekey;

namespace {

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error("usage", w) {}
};

fs::path default_out_dir() {
  if (const char* env = std::getenv("POSEKEY_OUT_DIR"); env && *env) return env;
  return "posekey-out";
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + file.string());
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

// ---- synth-data ----------------------------------------------------------

struct SynthArgs {
  fs::path out_dir;
  uint64_t seed = 0;
  int classes = 10;
  int per_class = 200;
  int image_size = 64;
  double jitter = 0.05;
};

int run_synth_data(const SynthArgs& a) {
  if (a.per_class < 1) throw UsageError("--per-class must be positive");
  if (a.image_size < 32) throw UsageError("--image-size must be at least 32");
  if (!(a.jitter >= 0)) throw UsageError("--jitter must be non-negative");
  const auto bank = make_posture_bank(a.classes, a.seed);
  const auto manifest =
      generate_dataset(bank, a.per_class, a.jitter, {a.image_size, a.image_size}, a.out_dir, a.seed);
  std::ostringstream snap;
  snap << "classes = " << a.classes << "\nper_class = " << a.per_class << "\nimage_size = " << a.image_size
       << "\njitter = " << a.jitter << "\nseed = " << a.seed << "\n";
  write_text(a.out_dir / "synth_config.toml", snap.str());
  const auto hash = manifest_hash(manifest);
  write_text(a.out_dir / "manifest.sha256", hash + "\n");
  std::cout << manifest.manifest_file().string() << "\n" << "manifest_hash " << hash << "\n";
  return 0;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config;
  fs::path out_dir;
  std::optional<uint64_t> seed;
  std::optional<std::string> model;
  std::optional<int> image_size;
  std::optional<double> lambda_kp, lambda_pose;
  std::optional<int> epochs;
  std::optional<std::string> checkpoint;
  std::optional<std::string> manifest;
  std::vector<std::string> overrides;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    require_file(a.config, "config file");
    cfg = load_config(a.config);
  }
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.model) cfg.model = model_kind_from_string(*a.model);
  if (a.seed) cfg.seed = *a.seed;
  if (a.image_size) cfg.image_size = *a.image_size;
  if (a.lambda_kp) cfg.lambda_kp = *a.lambda_kp;
  if (a.lambda_pose) cfg.lambda_pose = *a.lambda_pose;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.manifest) cfg.manifest = *a.manifest;
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  const TrainConfig cfg = resolve_train_config(a);
  if (cfg.manifest.empty()) throw UsageError("no dataset given (use --manifest or the manifest config key)");
  require_file(cfg.manifest, "dataset manifest");
  std::optional<fs::path> resume;
  if (a.checkpoint) {
    require_file(*a.checkpoint, "checkpoint");
    resume = fs::path(*a.checkpoint);
  }
  const auto result = train(cfg, a.out_dir, resume);
  std::cout << result.checkpoint.string() << "\n";
  if (!result.log.steps.empty()) {
    const auto& last = result.log.steps.back();
    std::cout << "steps " << last.step << " final_loss " << last.l_total << "\n";
  }
  return 0;
}

// ---- sample --------------------------------------------------------------

struct SampleArgs {
  std::string config;
  fs::path out_dir;
  uint64_t seed = 0;
  std::vector<std::string> checkpoints;
  int n_samples = 4;
};

std::string checkpoint_stem(const fs::path& ckpt, size_t index, size_t total) {
  if (total == 1) return "";
  std::string parent = ckpt.parent_path().filename().string();
  if (parent.empty()) parent = "run";
  return parent + "_" + std::to_string(index) + "_";
}

int run_sample(const SampleArgs& a) {
  if (a.checkpoints.empty()) throw UsageError("--checkpoint is required");
  if (a.n_samples < 1) throw UsageError("--n-samples must be positive");
  if (!a.config.empty()) require_file(a.config, "config file");
  for (const auto& c : a.checkpoints) require_file(c, "checkpoint");
  fs::create_directories(a.out_dir);
  std::string snapshot = "seed = " + std::to_string(a.seed) + "\nn_samples = " + std::to_string(a.n_samples) + "\n";
  for (size_t i = 0; i < a.checkpoints.size(); ++i) {
    Trainer tr = Trainer::load(a.checkpoints[i]);
    if (!a.config.empty()) {
      // Only sampling-time keys of the config apply to a trained model.
      const auto over = load_config(a.config, tr.config());
      if (over.guidance_scale != tr.config().guidance_scale)
        std::cerr << "note: guidance_scale from --config is ignored; it is fixed at training time\n";
    }
    const int c = tr.num_classes();
    const int n = a.n_samples;
    auto labels = torch::arange(c, torch::kLong).repeat_interleave(n);
    auto images = tr.generate(labels, a.seed);
    auto grid_order = images.view({c, n, 3, images.size(2), images.size(3)}).transpose(0, 1).reshape(
        {c * n, 3, images.size(2), images.size(3)});
    const std::string stem = checkpoint_stem(a.checkpoints[i], i, a.checkpoints.size());
    const fs::path grid = a.out_dir / (stem + "grid.png");
    write_png(grid, tile_images(grid_order, c));
    const fs::path sdir = a.out_dir / (stem + "samples");
    fs::create_directories(sdir);
    for (int cls = 0; cls < c; ++cls)
      for (int k = 0; k < n; ++k) {
        char name[64];
        std::snprintf(name, sizeof name, "c%02d_%04d.png", cls, k);
        write_png(sdir / name, images[cls * n + k]);
      }
    snapshot += "# checkpoint " + a.checkpoints[i] + "\n" + tr.config().to_text();
    std::cout << grid.string() << "\n";
  }
  write_text(a.out_dir / "resolved_config.toml", snapshot);
  return 0;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string config;
  fs::path out_dir;
  uint64_t seed = 0;
  std::vector<std::string> checkpoints;
  std::string manifest;
  int n_samples = kRecommendedSamplesPerClass;
  std::string adapter_cmd;
  std::string adapter_layout = "internal";
  std::string feature_model;
};

ClassifierFeatureExtractor feature_extractor_for(const DatasetManifest& manifest, const fs::path& file) {
  if (fs::exists(file)) {
    auto fx = ClassifierFeatureExtractor::load(file);
    if (fx.num_classes() != manifest.class_count())
      throw LoadError("feature model " + file.string() + " was trained for a different class count");
    return fx;
  }
  const auto train_split = load_dataset(manifest, Split::train);
  auto fx = ClassifierFeatureExtractor::train(train_split, manifest.class_count(), 1234);
  fx.save(file);
  return fx;
}

int run_eval(const EvalArgs& a) {
  if (a.checkpoints.empty()) throw UsageError("--checkpoint is required");
  if (a.n_samples < 1) throw UsageError("--n-samples must be positive");
  for (const auto& c : a.checkpoints) require_file(c, "checkpoint");
  std::string manifest_path = a.manifest;
  if (!a.config.empty()) {
    require_file(a.config, "config file");
    if (manifest_path.empty()) manifest_path = load_config(a.config).manifest;
  }
  if (manifest_path.empty()) manifest_path = Trainer::load(a.checkpoints.front()).config().manifest;
  if (manifest_path.empty()) throw UsageError("no dataset given (use --manifest)");
  require_file(manifest_path, "dataset manifest");
  const auto manifest = DatasetManifest::read(resolve_manifest_root(manifest_path));

  fs::create_directories(a.out_dir);
  const fs::path fx_file = a.feature_model.empty() ? a.out_dir / "feature_extractor.pt" : fs::path(a.feature_model);
  auto fx = feature_extractor_for(manifest, fx_file);

  std::unique_ptr<PoseExtractor> pose;
  if (!a.adapter_cmd.empty()) {
    AdapterConfig ac;
    if (a.adapter_layout == "internal")
      ac = AdapterConfig::identity(a.adapter_cmd, SkeletonTopology::dance15());
    else if (a.adapter_layout == "mediapipe33")
      ac = AdapterConfig::mediapipe33(a.adapter_cmd);
    else
      throw UsageError("--adapter-layout must be internal or mediapipe33");
    pose = std::make_unique<ExternalDetector>(ac);
  } else {
    pose = std::make_unique<SoftArgmaxExtractor>();
  }

  if (a.n_samples < kRecommendedSamplesPerClass)
    std::cerr << "warning: --n-samples " << a.n_samples << " is below the recommended "
              << kRecommendedSamplesPerClass << " per class; noted in the report metadata\n";

  std::vector<MetricReport> reports;
  std::map<std::string, int> used;
  std::string snapshot = "seed = " + std::to_string(a.seed) + "\nn_samples = " + std::to_string(a.n_samples) +
                         "\nmanifest = \"" + manifest_path + "\"\nfeature_model = \"" + fx_file.string() + "\"\n";
  for (const auto& c : a.checkpoints) {
    auto rep = evaluate_run(c, manifest, fx, a.n_samples, a.seed, pose.get());
    std::string name = "report_" + rep.model + "-" + ablation_variant(rep) + "-s" + std::to_string(rep.seed);
    if (int k = used[name]++; k > 0) name += "-" + std::to_string(k);
    write_text(a.out_dir / (name + ".json"), rep.to_json());
    snapshot += "# checkpoint " + c + "\n";
    std::cout << name << " fid " << rep.fid << " ms_ssim " << rep.ms_ssim << " mean_kp_err " << rep.mean_kp_err
              << "\n";
    reports.push_back(std::move(rep));
  }
  write_text(a.out_dir / "resolved_config.toml", snapshot);
  emit_report(reports, a.out_dir);
  return 0;
}

// ---- report --------------------------------------------------------------

struct ReportArgs {
  fs::path out_dir;
  std::vector<std::string> inputs;
};

int run_report(const ReportArgs& a) {
  if (a.inputs.empty()) throw UsageError("--reports is required");
  std::vector<fs::path> files;
  for (const auto& in : a.inputs) {
    require_file(in, "report input");
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && name.rfind("report_", 0) == 0 && e.path().extension() == ".json")
          found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }
  if (files.empty()) throw UsageError("no report_*.json files found");
  std::vector<MetricReport> reports;
  std::string snapshot;
  for (const auto& f : files) {
    reports.push_back(MetricReport::from_json(read_file(f)));
    snapshot += "report = \"" + f.string() + "\"\n";
  }
  fs::create_directories(a.out_dir);
  write_text(a.out_dir / "resolved_config.toml", snapshot);
  emit_report(reports, a.out_dir);
  std::cout << (a.out_dir / "table1.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"posekey: pose-supervised key posture synthesis"};
  app.require_subcommand(1);
  const fs::path out_default = default_out_dir();

  SynthArgs sa;
  sa.out_dir = out_default;
  auto* synth = app.add_subcommand("synth-data", "Render a synthetic key-posture dataset");
  synth->add_option("--out-dir", sa.out_dir, "Output directory (default: $POSEKEY_OUT_DIR or ./posekey-out)");
  synth->add_option("--seed", sa.seed, "Bank and render seed")->capture_default_str();
  synth->add_option("--classes", sa.classes, "Number of key postures")->capture_default_str();
  synth->add_option("--per-class", sa.per_class, "Images per posture")->capture_default_str();
  synth->add_option("--image-size", sa.image_size, "Square image side in pixels")->capture_default_str();
  synth->add_option("--jitter", sa.jitter, "Per-bone angle jitter std (radians)")->capture_default_str();

  TrainArgs ta;
  ta.out_dir = out_default;
  auto* tr = app.add_subcommand("train", "Train one of cgan, cgan_pose, cdiff, cdiff_pose");
  tr->add_option("--config", ta.config, "Flat key = value config file");
  tr->add_option("--out-dir", ta.out_dir, "Run directory (default: $POSEKEY_OUT_DIR or ./posekey-out)");
  tr->add_option("--seed", ta.seed, "Training seed");
  tr->add_option("--model", ta.model, "Model kind")
      ->check(CLI::IsMember({"cgan", "cgan_pose", "cdiff", "cdiff_pose"}));
  tr->add_option("--image-size", ta.image_size, "Image side; must match the dataset");
  tr->add_option("--lambda-kp", ta.lambda_kp, "Keypoint loss weight (pose models only)");
  tr->add_option("--lambda-pose", ta.lambda_pose, "Pose consistency loss weight (pose models only)");
  tr->add_option("--epochs", ta.epochs, "Epochs over the train split");
  tr->add_option("--checkpoint", ta.checkpoint, "Resume from this checkpoint");
  tr->add_option("--manifest", ta.manifest, "Dataset directory or its manifest.csv");
  tr->add_option("--set", ta.overrides, "Override any config key, key=value (repeatable)");

  SampleArgs sp;
  sp.out_dir = out_default;
  auto* sample = app.add_subcommand("sample", "Write an n x C sample grid per checkpoint");
  sample->add_option("--config", sp.config, "Config file (sampling keys only)");
  sample->add_option("--out-dir", sp.out_dir, "Output directory (default: $POSEKEY_OUT_DIR or ./posekey-out)");
  sample->add_option("--seed", sp.seed, "Sampling seed")->capture_default_str();
  sample->add_option("--checkpoint", sp.checkpoints, "Checkpoint file (repeatable)");
  sample->add_option("--n-samples", sp.n_samples, "Samples per class")->capture_default_str();

  EvalArgs ea;
  ea.out_dir = out_default;
  auto* ev = app.add_subcommand("eval", "Score checkpoints (FID, MS-SSIM, keypoint error) and write tables");
  ev->add_option("--config", ea.config, "Config file (supplies the manifest)");
  ev->add_option("--out-dir", ea.out_dir, "Output directory (default: $POSEKEY_OUT_DIR or ./posekey-out)");
  ev->add_option("--seed", ea.seed, "Sampling seed")->capture_default_str();
  ev->add_option("--checkpoint", ea.checkpoints, "Checkpoint file (repeatable)");
  ev->add_option("--manifest", ea.manifest, "Dataset directory or its manifest.csv");
  ev->add_option("--n-samples", ea.n_samples, "Generated samples per class")->capture_default_str();
  ev->add_option("--adapter-cmd", ea.adapter_cmd, "External keypoint detector command for pose scoring");
  ev->add_option("--adapter-layout", ea.adapter_layout, "Detector keypoint layout: internal or mediapipe33")
      ->capture_default_str();
  ev->add_option("--feature-model", ea.feature_model,
                 "FID feature classifier file; trained and saved there when missing");

  ReportArgs ra;
  ra.out_dir = out_default;
  auto* rep = app.add_subcommand("report", "Combine eval reports into tables and plots");
  rep->add_option("--out-dir", ra.out_dir, "Output directory (default: $POSEKEY_OUT_DIR or ./posekey-out)");
  rep->add_option("--reports", ra.inputs, "report_*.json files or directories holding them");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*synth) return run_synth_data(sa);
    if (*tr) return run_train(ta);
    if (*sample) return run_sample(sp);
    if (*ev) return run_eval(ea);
    if (*rep) return run_report(ra);
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << one_line(e.what()) << "\n";
    const bool usage = e.category() == "usage" || e.category() == "config";
    return usage ? 2 : 1;
  } catch (const c10::Error& e) {
    std::cerr << "error: torch: " << one_line(e.what_without_backtrace()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 2;
}
