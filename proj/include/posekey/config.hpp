#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace posekey {

enum class ModelKind { cgan, cgan_pose, cdiff, cdiff_pose };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);
inline bool is_diffusion(ModelKind k) { return k == ModelKind::cdiff || k == ModelKind::cdiff_pose; }
inline bool uses_pose(ModelKind k) { return k == ModelKind::cgan_pose || k == ModelKind::cdiff_pose; }

struct TrainConfig {
  ModelKind model = ModelKind::cdiff_pose;
  int batch_size = 10;
  double learning_rate = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int epochs = 30;
  int64_t max_steps = 0;  // 0 = no cap
  double lambda_kp = 1.0;
  double lambda_pose = 1.0;
  uint64_t seed = 0;
  int image_size = 64;
  // diffusion
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double guidance_scale = 0.0;
  double label_dropout = 0.1;
  double grad_clip = 1.0;  // global gradient-norm clip for diffusion updates, 0 = off
  // Per-sample cap on the combined keypoint and pose-term gradient reaching the model output
  // (the generated image or the noise prediction), as a multiple of the norm
  // of that sample's adversarial or denoising gradient; 0 = off.
  double pose_grad_bound = 1.0;
  int unet_channels = 64;
  std::vector<int> attention_resolutions{16, 8};
  // gan
  int z_dim = 128;
  int label_dim = 64;
  std::vector<int> gan_hidden{256, 512, 1024};
  // data and bookkeeping
  std::string manifest;
  int checkpoint_every = 1;
  int eval_max_images = 200;

  void validate() const;
  /// Flat key = value document listing every field in a fixed order.
  std::string to_text() const;
};

/// Applies one key/value pair; unknown keys and malformed values throw ConfigError.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Parses a flat TOML-style document: `key = value` lines, `#` comments,
/// optional double quotes around values.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});

/// Names accepted by set_config_value, in to_text() order.
const std::vector<std::string>& config_keys();

}  // namespace posekey
