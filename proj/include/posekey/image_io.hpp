#pragma once

#include <filesystem>
#include <string>

#include <torch/types.h>

namespace posekey {

/// Lossless 8-bit RGB PNG. Tensors are [3,H,W] float in [-1,1]; values are
/// quantized to the nearest of 256 levels.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_png(const std::filesystem::path& path);

/// [3,H,W] in [-1,1] <-> [H,W,3] uint8 (RGB order).
torch::Tensor to_rgb8(const torch::Tensor& image);
torch::Tensor from_rgb8(const torch::Tensor& rgb);

/// Tiles [N,3,H,W] images into a rows x cols grid with `pad` pixels of gap.
torch::Tensor tile_images(const torch::Tensor& images, int cols, int pad = 2);

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);

}  // namespace posekey
