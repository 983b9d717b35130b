#include "posekey/extract.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <mutex>
#include <random>

#include <json.hpp>
#include <torch/torch.h>

#include "posekey/errors.hpp"
#include "posekey/image_io.hpp"
#include "posekey/synth.hpp"

namespace posekey {

namespace F = torch::nn::functional;

torch::Tensor color_match_scores(const torch::Tensor& images, const SkeletonTopology& topo) {
  const bool single = images.dim() == 3;
  auto x = single ? images.unsqueeze(0) : images;
  if (x.dim() != 4 || x.size(1) != 3) throw ArgumentError("images must be [3,H,W] or [B,3,H,W]");
  const auto& colors = joint_colors();
  if (topo.joint_count() > static_cast<int>(colors.size()))
    throw ArgumentError("no color coding for a topology this large");
  std::vector<float> flat;
  for (int j = 0; j < topo.joint_count(); ++j) flat.insert(flat.end(), colors[j].begin(), colors[j].end());
  auto c = torch::from_blob(flat.data(), {topo.joint_count(), 3}, torch::kFloat32).to(x.dtype()).clone();
  // ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2
  auto xx = (x * x).sum(1, true);
  auto xc = torch::einsum("bchw,kc->bkhw", {x, c});
  auto cc = (c * c).sum(1).view({1, -1, 1, 1});
  auto scores = -(xx - 2 * xc + cc);
  return single ? scores.squeeze(0) : scores;
}

torch::Tensor joint_heatmaps(const torch::Tensor& images, const SkeletonTopology& topo,
                             const ExtractorConfig& cfg) {
  if (!(cfg.temperature > 0)) throw ArgumentError("temperature must be positive");
  auto s = color_match_scores(images, topo) / cfg.temperature;
  auto sizes = s.sizes().vec();
  auto flat = s.flatten(-2);
  return torch::softmax(flat, -1).view(sizes);
}

SoftArgmaxResult soft_argmax_extract(const torch::Tensor& heatmaps, const ExtractorConfig& cfg) {
  if (heatmaps.dim() < 3) throw ArgumentError("heatmaps must be [..., K, H, W]");
  const int64_t h = heatmaps.size(-2), w = heatmaps.size(-1);
  auto opts = heatmaps.options();
  auto xs = torch::arange(w, opts);
  auto ys = torch::arange(h, opts);
  auto x = (heatmaps.sum(-2) * xs).sum(-1);
  auto y = (heatmaps.sum(-1) * ys).sum(-1);

  SoftArgmaxResult r;
  r.coords = torch::stack({x, y}, -1);
  {
    torch::NoGradGuard ng;
    auto lead = heatmaps.sizes().slice(0, heatmaps.dim() - 2).vec();
    auto maps = heatmaps.detach().reshape({-1, 1, h, w});
    const int win = cfg.visibility_window;
    auto mass = F::avg_pool2d(maps, F::AvgPool2dFuncOptions(win).stride(1).padding(win / 2)
                                        .count_include_pad(true)) * static_cast<double>(win * win);
    auto best = std::get<0>(mass.flatten(1).max(1));
    r.visible = (best >= cfg.visibility_threshold).view(lead);
  }
  return r;
}

SoftArgmaxResult SoftArgmaxExtractor::extract_batch(const torch::Tensor& images) const {
  return soft_argmax_extract(joint_heatmaps(images, *topo_, cfg_), cfg_);
}

Pose SoftArgmaxExtractor::extract(const torch::Tensor& image) {
  auto r = extract_batch(image.unsqueeze(0));
  return {r.coords[0].detach().to(torch::kFloat64), r.visible[0], CoordSpace::pixel};
}

AdapterConfig AdapterConfig::identity(std::string command, const SkeletonTopology& topo) {
  AdapterConfig c;
  c.command = std::move(command);
  c.joint_count = topo.joint_count();
  c.index_map.resize(topo.joint_count());
  for (int j = 0; j < topo.joint_count(); ++j) c.index_map[j] = j;
  return c;
}

AdapterConfig AdapterConfig::mediapipe33(std::string command) {
  AdapterConfig c;
  c.command = std::move(command);
  c.joint_count = 33;
  // pelvis, neck, head(nose), l_sh, l_el, l_wr, r_sh, r_el, r_wr, l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle
  c.index_map = {-1, -1, 0, 11, 13, 15, 12, 14, 16, 23, 25, 27, 24, 26, 28};
  return c;
}

Pose parse_detector_record(const std::string& line, const AdapterConfig& cfg,
                           const SkeletonTopology& topo) {
  using json = nlohmann::json;
  if (static_cast<int>(cfg.index_map.size()) != topo.joint_count())
    throw ArgumentError("adapter index map must have one entry per internal joint");
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DetectorError(std::string("malformed detector output: ") + e.what(), line);
  }
  if (!j.is_object() || !j.contains("keypoints") || !j["keypoints"].is_array())
    throw DetectorError("detector record has no keypoints array", line);
  const auto& kps = j["keypoints"];
  if (static_cast<int>(kps.size()) != cfg.joint_count)
    throw DetectorError("detector returned " + std::to_string(kps.size()) + " keypoints, expected " +
                            std::to_string(cfg.joint_count),
                        line);
  std::vector<std::array<double, 2>> pts(topo.joint_count(), {0.0, 0.0});
  std::vector<bool> vis(topo.joint_count(), false);
  try {
    for (int i = 0; i < topo.joint_count(); ++i) {
      const int src = cfg.index_map[i];
      if (src < 0) continue;
      if (src >= cfg.joint_count) throw ArgumentError("adapter index map entry out of range");
      const auto& p = kps.at(src);
      pts[i] = {p.at(0).get<double>(), p.at(1).get<double>()};
      vis[i] = p.size() < 3 || p.at(2).get<double>() > 0;
    }
  } catch (const json::exception& e) {
    throw DetectorError(std::string("malformed keypoint entry: ") + e.what(), line);
  }
  return Pose::from_points(pts, vis, CoordSpace::pixel);
}

ExternalDetector::ExternalDetector(AdapterConfig cfg, const SkeletonTopology& topo)
    : cfg_(std::move(cfg)), topo_(&topo) {
  if (cfg_.command.empty()) throw ArgumentError("adapter command is empty");
  if (static_cast<int>(cfg_.index_map.size()) != topo.joint_count())
    throw ArgumentError("adapter index map must have one entry per internal joint");
  start();
}

ExternalDetector::~ExternalDetector() { stop(); }

void ExternalDetector::start() {
  static std::once_flag ignore_sigpipe;
  std::call_once(ignore_sigpipe, [] { ::signal(SIGPIPE, SIG_IGN); });
  int in_pipe[2], out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0 || ::pipe2(out_pipe, O_CLOEXEC) != 0)
    throw DetectorError(std::string("pipe failed: ") + std::strerror(errno), "");
  pid_ = ::fork();
  if (pid_ < 0) throw DetectorError(std::string("fork failed: ") + std::strerror(errno), "");
  if (pid_ == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", cfg_.command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
}

void ExternalDetector::stop() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    int status = 0;
    // Closing stdin asks the detector to exit; give it a moment, then kill.
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        return;
      }
      ::usleep(2000);
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
}

std::string ExternalDetector::read_line() {
  using clock = std::chrono::steady_clock;
  const auto deadline = clock::now() + cfg_.timeout;
  for (;;) {
    if (auto nl = pending_.find('\n'); nl != std::string::npos) {
      std::string line = pending_.substr(0, nl);
      pending_.erase(0, nl + 1);
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
    if (left.count() <= 0) throw DetectorError("detector timed out", pending_);
    pollfd pfd{from_child_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
    if (rc < 0 && errno == EINTR) continue;
    if (rc == 0) throw DetectorError("detector timed out", pending_);
    char buf[4096];
    const ssize_t n = ::read(from_child_, buf, sizeof buf);
    if (n <= 0) throw DetectorError("detector process exited", pending_);
    pending_.append(buf, static_cast<size_t>(n));
  }
}

Pose ExternalDetector::detect(const std::filesystem::path& image_path) {
  if (to_child_ < 0) throw DetectorError("detector is not running", "");
  const std::string req = image_path.string() + "\n";
  size_t off = 0;
  while (off < req.size()) {
    const ssize_t n = ::write(to_child_, req.data() + off, req.size() - off);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw DetectorError("detector process is not accepting input", "");
    off += static_cast<size_t>(n);
  }
  return parse_detector_record(read_line(), cfg_, *topo_);
}

Pose ExternalDetector::extract(const torch::Tensor& image) {
  std::random_device rd;
  auto path = std::filesystem::temp_directory_path() /
              ("posekey-detect-" + std::to_string(::getpid()) + "-" + std::to_string(rd()) + ".png");
  write_png(path, image);
  try {
    Pose p = detect(path);
    std::filesystem::remove(path);
    return p;
  } catch (...) {
    std::filesystem::remove(path);
    throw;
  }
}

Pose external_detect(const std::filesystem::path& image_path, const AdapterConfig& cfg,
                     const SkeletonTopology& topo) {
  ExternalDetector det(cfg, topo);
  return det.detect(image_path);
}

}  // namespace posekey
