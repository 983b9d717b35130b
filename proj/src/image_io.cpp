#include "posekey/image_io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "posekey/errors.hpp"

namespace posekey {

torch::Tensor to_rgb8(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ArgumentError("image must be shaped [3,H,W]");
  auto x = image.detach().to(torch::kFloat32).clamp(-1.0, 1.0);
  return ((x + 1.0) * 127.5).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
}

torch::Tensor from_rgb8(const torch::Tensor& rgb) {
  return rgb.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  auto rgb = to_rgb8(image);
  const int h = static_cast<int>(rgb.size(0)), w = static_cast<int>(rgb.size(1));
  cv::Mat mat(h, w, CV_8UC3, rgb.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(mat, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image " + path.string());
}

torch::Tensor read_png(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return from_rgb8(t);
}

torch::Tensor tile_images(const torch::Tensor& images, int cols, int pad) {
  const int64_t n = images.size(0), h = images.size(2), w = images.size(3);
  const int64_t rows = (n + cols - 1) / cols;
  auto grid = torch::full({3, rows * (h + pad) + pad, cols * (w + pad) + pad}, 1.0f);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols, c = i % cols;
    grid.narrow(1, pad + r * (h + pad), h).narrow(2, pad + c * (w + pad), w)
        .copy_(images[i].detach().to(torch::kFloat32));
  }
  return grid;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace posekey
