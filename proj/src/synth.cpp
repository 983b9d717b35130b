#include "posekey/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>
#include <torch/torch.h>

#include "posekey/errors.hpp"
#include "posekey/image_io.hpp"

namespace posekey {

namespace {

using json = nlohmann::json;
constexpr double kPi = std::numbers::pi;

// dance15 bone indices, see SkeletonTopology::dance15().
enum BoneId {
  kTorso, kHead, kLShoulder, kLUpperArm, kLForearm, kRShoulder, kRUpperArm, kRForearm,
  kLPelvis, kLThigh, kLShin, kRPelvis, kRThigh, kRShin, kBoneCount
};

constexpr std::array<double, kBoneCount> kBaseLengths{
    0.26, 0.10, 0.09, 0.13, 0.12, 0.09, 0.13, 0.12, 0.08, 0.18, 0.17, 0.08, 0.18, 0.17};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Mirror an absolute orientation across the vertical axis.
double mirror(double angle) { return kPi - angle; }

PostureSpec sample_posture(std::mt19937_64& rng, bool symmetric) {
  PostureSpec s;
  s.symmetric = symmetric;
  s.canonical_angles.assign(kBoneCount, 0.0);
  s.bone_lengths.assign(kBaseLengths.begin(), kBaseLengths.end());
  auto& a = s.canonical_angles;
  auto& len = s.bone_lengths;

  const double up = -kPi / 2;
  const double torso = symmetric ? up : up + uniform(rng, -0.35, 0.35);
  a[kTorso] = torso;
  a[kHead] = symmetric ? torso : torso + uniform(rng, -0.4, 0.4);
  a[kLShoulder] = torso - kPi / 2;
  a[kRShoulder] = torso + kPi / 2;
  a[kLPelvis] = torso - kPi / 2;
  a[kRPelvis] = torso + kPi / 2;

  // Limbs on the left side; the right side either mirrors them or is drawn anew.
  auto draw_arm = [&](int upper, int fore) {
    a[upper] = uniform(rng, -kPi, kPi);
    a[fore] = a[upper] + uniform(rng, -2.4, 2.4);
    len[upper] *= uniform(rng, 0.85, 1.0);
    len[fore] *= uniform(rng, 0.85, 1.0);
  };
  auto draw_leg = [&](int thigh, int shin, double side) {
    a[thigh] = kPi / 2 + side * uniform(rng, -0.3, 1.1);
    a[shin] = a[thigh] + uniform(rng, -1.3, 1.3);
    len[thigh] *= uniform(rng, 0.85, 1.0);
    len[shin] *= uniform(rng, 0.85, 1.0);
  };
  // Left limbs hang on the -x side of the figure.
  draw_arm(kLUpperArm, kLForearm);
  draw_leg(kLThigh, kLShin, +1.0);
  if (symmetric) {
    a[kRUpperArm] = mirror(a[kLUpperArm]);
    a[kRForearm] = mirror(a[kLForearm]);
    a[kRThigh] = mirror(a[kLThigh]);
    a[kRShin] = mirror(a[kLShin]);
    for (auto [l, r] : {std::pair{kLUpperArm, kRUpperArm}, {kLForearm, kRForearm},
                        {kLThigh, kRThigh}, {kLShin, kRShin}})
      len[r] = len[l];
  } else {
    draw_arm(kRUpperArm, kRForearm);
    draw_leg(kRThigh, kRShin, -1.0);
  }
  return s;
}

std::vector<std::array<double, 2>> fk_points(const PostureSpec& spec, const SkeletonTopology& topo,
                                             const std::vector<double>& jitter) {
  std::vector<std::array<double, 2>> pts(topo.joint_count());
  std::vector<double> rot(topo.joint_count(), 0.0);  // accumulated jitter at each joint
  pts[topo.root()] = spec.root_position;
  for (int b : topo.bone_order()) {
    const auto& bone = topo.bones()[b];
    const double extra = rot[bone.parent] + (jitter.empty() ? 0.0 : jitter[b]);
    rot[bone.child] = extra;
    const double angle = spec.canonical_angles[b] + extra;
    pts[bone.child] = {pts[bone.parent][0] + spec.bone_lengths[b] * std::cos(angle),
                       pts[bone.parent][1] + spec.bone_lengths[b] * std::sin(angle)};
  }
  return pts;
}

struct Box {
  double x0, y0, x1, y1;
};

Box bounds(const std::vector<std::array<double, 2>>& pts) {
  Box b{1e9, 1e9, -1e9, -1e9};
  for (const auto& p : pts) {
    b.x0 = std::min(b.x0, p[0]);
    b.y0 = std::min(b.y0, p[1]);
    b.x1 = std::max(b.x1, p[0]);
    b.y1 = std::max(b.y1, p[1]);
  }
  return b;
}

double min_spacing(const std::vector<std::array<double, 2>>& pts) {
  double best = 1e9;
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = i + 1; j < pts.size(); ++j)
      best = std::min(best, std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]));
  return best;
}

// Coverage of a pixel whose center lies `dist` from a shape of half-width `r`.
float coverage(double dist, double r) {
  return static_cast<float>(std::clamp(r + 0.5 - dist, 0.0, 1.0));
}

class Canvas {
 public:
  explicit Canvas(ImageDims dims) : dims_(dims), px_(3 * dims.width * dims.height) {
    for (int i = 0; i < dims.width * dims.height; ++i)
      for (int c = 0; c < 3; ++c) px_[3 * i + c] = kBackgroundColor[c];
  }

  void disc(double cx, double cy, double r, const std::array<float, 3>& color) {
    paint(cx - r - 1, cy - r - 1, cx + r + 1, cy + r + 1, color,
          [&](double x, double y) { return coverage(std::hypot(x - cx, y - cy), r); });
  }

  void capsule(double ax, double ay, double bx, double by, double r,
               const std::array<float, 3>& color) {
    const double dx = bx - ax, dy = by - ay, l2 = dx * dx + dy * dy;
    paint(std::min(ax, bx) - r - 1, std::min(ay, by) - r - 1, std::max(ax, bx) + r + 1,
          std::max(ay, by) + r + 1, color, [&](double x, double y) {
            double t = l2 > 0 ? ((x - ax) * dx + (y - ay) * dy) / l2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            return coverage(std::hypot(x - ax - t * dx, y - ay - t * dy), r);
          });
  }

  torch::Tensor to_tensor() const {
    auto hwc = torch::from_blob(const_cast<float*>(px_.data()), {dims_.height, dims_.width, 3},
                                torch::kFloat32);
    return hwc.permute({2, 0, 1}).contiguous();
  }

 private:
  template <typename F>
  void paint(double x0, double y0, double x1, double y1, const std::array<float, 3>& color,
             F&& cover) {
    const int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
    const int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
    const int ix1 = std::min(dims_.width - 1, static_cast<int>(std::ceil(x1)));
    const int iy1 = std::min(dims_.height - 1, static_cast<int>(std::ceil(y1)));
    for (int y = iy0; y <= iy1; ++y)
      for (int x = ix0; x <= ix1; ++x) {
        const float a = cover(static_cast<double>(x), static_cast<double>(y));
        if (a <= 0.0f) continue;
        float* p = &px_[3 * (y * dims_.width + x)];
        for (int c = 0; c < 3; ++c) p[c] = p[c] * (1.0f - a) + color[c] * a;
      }
  }

  ImageDims dims_;
  std::vector<float> px_;
};

json spec_to_json(const PostureSpec& s) {
  return {{"class_id", s.class_id},
          {"name", s.name},
          {"symmetric", s.symmetric},
          {"canonical_angles", s.canonical_angles},
          {"bone_lengths", s.bone_lengths},
          {"root_position", s.root_position}};
}

PostureSpec spec_from_json(const json& j) {
  PostureSpec s;
  s.class_id = j.at("class_id").get<int>();
  s.name = j.at("name").get<std::string>();
  s.symmetric = j.value("symmetric", false);
  s.canonical_angles = j.at("canonical_angles").get<std::vector<double>>();
  s.bone_lengths = j.at("bone_lengths").get<std::vector<double>>();
  s.root_position = j.at("root_position").get<std::array<double, 2>>();
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

Pose forward_kinematics(const PostureSpec& spec, const SkeletonTopology& topo,
                        const std::vector<double>& joint_jitter) {
  if (spec.canonical_angles.size() != topo.bones().size() ||
      spec.bone_lengths.size() != topo.bones().size())
    throw ArgumentError("posture spec does not match topology bone count");
  if (!joint_jitter.empty() && joint_jitter.size() != topo.bones().size())
    throw ArgumentError("jitter must have one entry per bone");
  return Pose::from_points(fk_points(spec, topo, joint_jitter), CoordSpace::normalized);
}

std::vector<PostureSpec> make_posture_bank(int count, uint64_t seed) {
  if (count < 2) throw ArgumentError("posture bank needs at least 2 classes");
  const auto& topo = SkeletonTopology::dance15();
  std::mt19937_64 rng(seed);
  std::vector<PostureSpec> bank;
  std::vector<RelativePoseFeatures> feats;
  std::vector<Pose> poses;
  constexpr int kMaxAttempts = 5000;

  for (int c = 0; c < count; ++c) {
    const bool symmetric = c % 2 == 0;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      PostureSpec spec = sample_posture(rng, symmetric);
      spec.root_position = {0.0, 0.0};
      auto pts = fk_points(spec, topo, {});
      const Box box = bounds(pts);
      const double w = box.x1 - box.x0, h = box.y1 - box.y0;
      const double room = 1.0 - 2 * kBankMargin;
      if (w > room || h > room) continue;
      if (min_spacing(pts) < kBankMinJointSpacing) continue;
      // Center the figure, then shift it within the remaining slack.
      const double sx = (room - w) / 2, sy = (room - h) / 2;
      const double ox = symmetric ? 0.0 : uniform(rng, -sx, sx) * 0.5;
      const double oy = uniform(rng, -sy, sy) * 0.5;
      spec.root_position = {kBankMargin + sx + ox - box.x0, kBankMargin + sy + oy - box.y0};

      Pose pose = forward_kinematics(spec, topo);
      RelativePoseFeatures f = relative_pose_features(pose, topo);
      bool separated = true;
      for (size_t o = 0; o < bank.size() && separated; ++o) {
        const double dfeat = pose_consistency_loss(f, feats[o]).item<double>();
        const double dkp = keypoint_loss(pose, poses[o]).value;
        separated = dfeat >= kBankMinFeatureDistance && dkp >= kBankMinKeypointDistance;
      }
      if (!separated) continue;
      spec.class_id = c;
      std::ostringstream name;
      name << "kp" << std::setw(2) << std::setfill('0') << c
           << (symmetric ? "-symmetric" : "-asymmetric");
      spec.name = name.str();
      bank.push_back(spec);
      feats.push_back(f);
      poses.push_back(pose);
      placed = true;
    }
    if (!placed)
      throw GenerationError("could not place posture class " + std::to_string(c) +
                            " with the required separation");
  }
  return bank;
}

const std::vector<std::array<float, 3>>& joint_colors() {
  static const std::vector<std::array<float, 3>> colors = [] {
    std::vector<std::array<float, 3>> all;
    for (int zeros = 0; zeros <= 1; ++zeros)
      for (int r = -1; r <= 1; ++r)
        for (int g = -1; g <= 1; ++g)
          for (int b = -1; b <= 1; ++b) {
            const int nz = (r == 0) + (g == 0) + (b == 0);
            if (nz != zeros || std::max({r, g, b}) != 1) continue;
            all.push_back({static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)});
          }
    all.resize(15);
    return all;
  }();
  return colors;
}

double joint_radius_px(ImageDims dims) {
  return std::max(1.5, 0.025 * std::min(dims.width, dims.height));
}

torch::Tensor render_pose(const Pose& pixel_pose, ImageDims dims) {
  const auto& topo = SkeletonTopology::dance15();
  if (pixel_pose.joint_count() != topo.joint_count())
    throw ArgumentError("render_pose expects a dance15 pose");
  const double r = joint_radius_px(dims);
  Canvas canvas(dims);
  auto c = pixel_pose.coords.to(torch::kFloat64).contiguous();
  auto acc = c.accessor<double, 2>();
  auto vis = pixel_pose.visible.accessor<bool, 1>();
  for (const auto& bone : topo.bones()) {
    if (!vis[bone.parent] || !vis[bone.child]) continue;
    canvas.capsule(acc[bone.parent][0], acc[bone.parent][1], acc[bone.child][0],
                   acc[bone.child][1], 0.35 * r, kBoneColor);
  }
  const auto& colors = joint_colors();
  for (int j = 0; j < topo.joint_count(); ++j)
    if (vis[j]) canvas.disc(acc[j][0], acc[j][1], r, colors[j]);
  return canvas.to_tensor();
}

RenderResult render_posture(const PostureSpec& spec, double jitter_std, uint64_t seed,
                            ImageDims dims) {
  if (dims.width < 32 || dims.height < 32) throw ArgumentError("render dims must be at least 32x32");
  if (!(jitter_std >= 0)) throw ArgumentError("jitter_std must be non-negative");
  const auto& topo = SkeletonTopology::dance15();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto in_frame = [&](const std::vector<std::array<double, 2>>& pts) {
    for (const auto& p : pts) {
      const double x = p[0] * dims.width, y = p[1] * dims.height;
      if (x < 0 || y < 0 || x > dims.width - 1 || y > dims.height - 1) return false;
    }
    return true;
  };

  RenderResult out;
  std::vector<double> jitter(topo.bones().size(), 0.0);
  std::vector<std::array<double, 2>> pts;
  constexpr int kFrameRetries = 10;
  for (int attempt = 0;; ++attempt) {
    if (jitter_std > 0)
      for (auto& j : jitter) j = jitter_std * normal(rng);
    pts = fk_points(spec, topo, jitter);
    if (in_frame(pts)) break;
    if (attempt + 1 >= kFrameRetries) {
      out.frame_warnings = 1;
      break;
    }
  }
  for (auto& p : pts) {
    p[0] = std::clamp(p[0] * dims.width, 0.0, dims.width - 1.0);
    p[1] = std::clamp(p[1] * dims.height, 0.0, dims.height - 1.0);
  }
  out.keypoints = Pose::from_points(pts, CoordSpace::pixel);
  out.image = render_pose(out.keypoints, dims);
  return out;
}

uint64_t derive_seed(uint64_t seed, uint64_t index) {
  // splitmix64 finalizer over the pair
  uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "eval") return Split::eval;
  throw LoadError("unknown split '" + s + "'");
}

int DatasetManifest::class_count() const {
  int c = 0;
  for (const auto& e : entries) c = std::max(c, e.class_id + 1);
  return c;
}

size_t DatasetManifest::count(Split s) const {
  return static_cast<size_t>(
      std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
}

void DatasetManifest::write() const {
  std::ostringstream os;
  os << "image_path,class_id,split\n";
  for (const auto& e : entries) os << e.image_path << ',' << e.class_id << ',' << to_string(e.split) << '\n';
  write_text(manifest_file(), os.str());
}

namespace {

std::map<std::string, json> read_annotations(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("missing pose annotations " + file.string());
  std::map<std::string, json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw LoadError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const auto image = j.at("image").get<std::string>();
    if (out.count(image)) throw LoadError("duplicate annotation for " + image);
    out.emplace(image, std::move(j));
  }
  return out;
}

}  // namespace

DatasetManifest DatasetManifest::read(const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  m.pose_file = root / "poses.jsonl";
  std::ifstream in(m.manifest_file());
  if (!in) throw LoadError("missing manifest " + m.manifest_file().string());
  std::string line;
  std::getline(in, line);
  if (line != "image_path,class_id,split") throw LoadError("unexpected manifest header: " + line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path, cls, split;
    if (!std::getline(ls, path, ',') || !std::getline(ls, cls, ',') || !std::getline(ls, split))
      throw LoadError("malformed manifest row: " + line);
    ManifestEntry e;
    e.image_path = path;
    try {
      e.class_id = std::stoi(cls);
    } catch (const std::exception&) {
      throw LoadError("bad class_id in manifest row: " + line);
    }
    if (e.class_id < 0) throw LoadError("negative class_id for " + path);
    e.split = split_from_string(split);
    if (!std::filesystem::exists(root / path)) throw LoadError("missing image " + path);
    m.entries.push_back(std::move(e));
  }
  const auto ann = read_annotations(m.pose_file);
  for (const auto& e : m.entries)
    if (!ann.count(e.image_path)) throw LoadError("missing annotation for " + e.image_path);
  return m;
}

void write_bank(const std::filesystem::path& file, const BankFile& bank) {
  json j;
  j["dims"] = {bank.dims.width, bank.dims.height};
  j["jitter_std"] = bank.jitter_std;
  j["seed"] = bank.seed;
  j["postures"] = json::array();
  for (const auto& s : bank.bank) j["postures"].push_back(spec_to_json(s));
  write_text(file, j.dump(2) + "\n");
}

BankFile read_bank(const std::filesystem::path& file) {
  BankFile b;
  try {
    const json j = json::parse(read_file(file));
    const auto dims = j.at("dims").get<std::array<int, 2>>();
    b.dims = {dims[0], dims[1]};
    b.jitter_std = j.at("jitter_std").get<double>();
    b.seed = j.at("seed").get<uint64_t>();
    for (const auto& s : j.at("postures")) b.bank.push_back(spec_from_json(s));
  } catch (const json::exception& e) {
    throw LoadError("malformed bank file " + file.string() + ": " + e.what());
  }
  return b;
}

DatasetManifest generate_dataset(const std::vector<PostureSpec>& bank, int per_class,
                                 double jitter_std, ImageDims dims,
                                 const std::filesystem::path& out_dir, uint64_t seed) {
  if (per_class < 1) throw ArgumentError("per_class must be positive");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  m.pose_file = out_dir / "poses.jsonl";
  const int n_eval = per_class / 10;
  std::ostringstream poses;
  for (size_t c = 0; c < bank.size(); ++c) {
    for (int i = 0; i < per_class; ++i) {
      const uint64_t index = c * static_cast<uint64_t>(per_class) + i;
      auto r = render_posture(bank[c], jitter_std, derive_seed(seed, index), dims);
      std::ostringstream name;
      name << "images/c" << std::setw(2) << std::setfill('0') << c << '_' << std::setw(4) << i
           << ".png";
      write_png(out_dir / name.str(), r.image);
      json kp = json::array();
      for (int j = 0; j < r.keypoints.joint_count(); ++j) {
        const auto p = r.keypoints.point(j);
        kp.push_back({p[0], p[1], 1});
      }
      poses << json{{"image", name.str()}, {"keypoints", kp}}.dump() << '\n';
      m.entries.push_back({name.str(), bank[c].class_id,
                           i < per_class - n_eval ? Split::train : Split::eval});
    }
  }
  write_text(m.pose_file, poses.str());
  m.write();
  write_bank(out_dir / "bank.json", {bank, dims, jitter_std, seed});
  return m;
}

std::string manifest_hash(const DatasetManifest& manifest) {
  std::string acc = read_file(manifest.manifest_file()) + read_file(manifest.pose_file);
  for (const auto& e : manifest.entries) acc += file_sha256(manifest.root / e.image_path);
  return sha256_hex(acc);
}

Dataset::Dataset(torch::Tensor images, torch::Tensor labels, torch::Tensor keypoints,
                 torch::Tensor visible, std::vector<std::string> paths)
    : images_(std::move(images)),
      labels_(std::move(labels)),
      keypoints_(std::move(keypoints)),
      visible_(std::move(visible)),
      paths_(std::move(paths)) {}

ImageDims Dataset::dims() const {
  if (!images_.defined() || images_.size(0) == 0) return {};
  return {static_cast<int>(images_.size(3)), static_cast<int>(images_.size(2))};
}

Sample Dataset::get(size_t i) const {
  const auto idx = static_cast<int64_t>(i);
  return {images_[idx], static_cast<int>(labels_[idx].item<int64_t>()),
          Pose{keypoints_[idx].to(torch::kFloat64), visible_[idx].clone(), CoordSpace::pixel}};
}

Batch Dataset::gather(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kLong);
  Batch b{images_.index_select(0, idx), labels_.index_select(0, idx), keypoints_.index_select(0, idx),
          visible_.index_select(0, idx)};
  if (ref_coords_.defined()) {
    b.ref_coords = ref_coords_.index_select(0, idx);
    b.ref_visible = ref_visible_.index_select(0, idx);
  }
  return b;
}

void Dataset::set_reference_poses(torch::Tensor coords, torch::Tensor visible) {
  if (coords.size(0) != static_cast<int64_t>(size()) || visible.size(0) != static_cast<int64_t>(size()))
    throw ArgumentError("reference poses must have one entry per image");
  ref_coords_ = std::move(coords);
  ref_visible_ = std::move(visible);
}

std::vector<std::vector<int64_t>> Dataset::batch_indices(int batch_size,
                                                         uint64_t shuffle_seed) const {
  if (batch_size < 1) throw ArgumentError("batch_size must be positive");
  std::vector<int64_t> order(size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(shuffle_seed);
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<std::vector<int64_t>> out;
  for (size_t s = 0; s < order.size(); s += batch_size)
    out.emplace_back(order.begin() + s, order.begin() + std::min(order.size(), s + batch_size));
  return out;
}

std::vector<Batch> Dataset::batches(int batch_size, uint64_t shuffle_seed) const {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(batch_size, shuffle_seed)) out.push_back(gather(idx));
  return out;
}

Dataset load_dataset(const DatasetManifest& manifest, std::optional<Split> split,
                     const SkeletonTopology& topo) {
  const auto ann = read_annotations(manifest.pose_file);
  std::vector<torch::Tensor> images;
  std::vector<int64_t> labels;
  std::vector<std::string> paths;
  const int k = topo.joint_count();
  std::vector<float> kps;
  std::vector<uint8_t> vis;
  for (const auto& e : manifest.entries) {
    if (split && e.split != *split) continue;
    auto it = ann.find(e.image_path);
    if (it == ann.end()) throw LoadError("missing annotation for " + e.image_path);
    torch::Tensor img;
    try {
      img = read_png(manifest.root / e.image_path);
    } catch (const LoadError&) {
      throw LoadError("missing or unreadable image for entry " + e.image_path);
    }
    if (!images.empty() && img.sizes() != images.front().sizes())
      throw LoadError("image " + e.image_path + " has different dimensions");
    const auto& points = it->second.at("keypoints");
    if (static_cast<int>(points.size()) != k)
      throw LoadError("annotation for " + e.image_path + " has " + std::to_string(points.size()) +
                      " keypoints, expected " + std::to_string(k));
    for (const auto& p : points) {
      kps.push_back(p.at(0).get<float>());
      kps.push_back(p.at(1).get<float>());
      vis.push_back(p.size() > 2 ? static_cast<uint8_t>(p.at(2).get<double>() > 0) : 1);
    }
    images.push_back(img);
    labels.push_back(e.class_id);
    paths.push_back(e.image_path);
  }
  const auto n = static_cast<int64_t>(paths.size());
  if (n == 0) return Dataset(torch::empty({0, 3, 0, 0}), torch::empty({0}, torch::kLong),
                             torch::empty({0, k, 2}), torch::empty({0, k}, torch::kBool), {});
  return Dataset(torch::stack(images), torch::tensor(labels, torch::kLong),
                 torch::from_blob(kps.data(), {n, k, 2}, torch::kFloat32).clone(),
                 torch::from_blob(vis.data(), {n, k}, torch::kUInt8).to(torch::kBool),
                 std::move(paths));
}

}  // namespace posekey
