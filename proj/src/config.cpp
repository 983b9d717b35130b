#include "posekey/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "posekey/errors.hpp"

namespace posekey {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::cgan: return "cgan";
    case ModelKind::cgan_pose: return "cgan_pose";
    case ModelKind::cdiff: return "cdiff";
    case ModelKind::cdiff_pose: return "cdiff_pose";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (auto k : {ModelKind::cgan, ModelKind::cgan_pose, ModelKind::cdiff, ModelKind::cdiff_pose})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown model kind '" + s + "' (expected cgan, cgan_pose, cdiff or cdiff_pose)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || v.empty())
    throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

std::vector<int> parse_int_list(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_number<int>(key, item));
  }
  return out;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
  bool quoted = false;
};

#define POSEKEY_NUM(name, type)                                                              \
  Field {                                                                                    \
    #name, [](TrainConfig& c, const std::string& v) { c.name = parse_number<type>(#name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.name); }                          \
  }
#define POSEKEY_DBL(name)                                                                     \
  Field {                                                                                     \
    #name, [](TrainConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); }, \
        [](const TrainConfig& c) { return fmt_double(c.name); }                               \
  }
#define POSEKEY_LIST(name)                                                                   \
  Field {                                                                                    \
    #name, [](TrainConfig& c, const std::string& v) { c.name = parse_int_list(#name, v); },   \
        [](const TrainConfig& c) { return fmt_int_list(c.name); }, true                      \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{"model", [](TrainConfig& c, const std::string& v) { c.model = model_kind_from_string(v); },
            [](const TrainConfig& c) { return to_string(c.model); }, true},
      POSEKEY_NUM(batch_size, int),
      POSEKEY_DBL(learning_rate),
      POSEKEY_DBL(adam_beta1),
      POSEKEY_DBL(adam_beta2),
      POSEKEY_NUM(epochs, int),
      POSEKEY_NUM(max_steps, int64_t),
      POSEKEY_DBL(lambda_kp),
      POSEKEY_DBL(lambda_pose),
      POSEKEY_NUM(seed, uint64_t),
      POSEKEY_NUM(image_size, int),
      POSEKEY_NUM(timesteps, int),
      POSEKEY_DBL(beta_start),
      POSEKEY_DBL(beta_end),
      POSEKEY_DBL(guidance_scale),
      POSEKEY_DBL(label_dropout),
      POSEKEY_DBL(grad_clip),
      POSEKEY_DBL(pose_grad_bound),
      POSEKEY_NUM(unet_channels, int),
      POSEKEY_LIST(attention_resolutions),
      POSEKEY_NUM(z_dim, int),
      POSEKEY_NUM(label_dim, int),
      POSEKEY_LIST(gan_hidden),
      Field{"manifest", [](TrainConfig& c, const std::string& v) { c.manifest = v; },
            [](const TrainConfig& c) { return c.manifest; }, true},
      POSEKEY_NUM(checkpoint_every, int),
      POSEKEY_NUM(eval_max_images, int),
  };
  return f;
}

#undef POSEKEY_NUM
#undef POSEKEY_DBL
#undef POSEKEY_LIST

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::validate() const {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (!(lambda_kp >= 0) || !(lambda_pose >= 0)) throw ConfigError("lambda weights must be >= 0");
  if (image_size < 32) throw ConfigError("image_size must be at least 32");
  if (timesteps < 1) throw ConfigError("timesteps must be at least 1");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end))
    throw ConfigError("beta schedule must satisfy 0 < beta_start <= beta_end < 1");
  if (!(guidance_scale >= 0)) throw ConfigError("guidance_scale must be >= 0");
  if (!(label_dropout >= 0 && label_dropout < 1)) throw ConfigError("label_dropout must lie in [0, 1)");
  if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be >= 0");
  if (!(pose_grad_bound >= 0)) throw ConfigError("pose_grad_bound must be >= 0");
  if (unet_channels < 1) throw ConfigError("unet_channels must be positive");
  if (z_dim < 1 || label_dim < 1) throw ConfigError("z_dim and label_dim must be positive");
  if (gan_hidden.empty()) throw ConfigError("gan_hidden must list at least one width");
  for (int h : gan_hidden)
    if (h < 1) throw ConfigError("gan_hidden widths must be positive");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  if (eval_max_images < 0) throw ConfigError("eval_max_images must be non-negative");
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) {
    const std::string v = f.get(*this);
    out += f.key + " = " + (f.quoted ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = line;
    bool in_quote = false;
    for (size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') in_quote = !in_quote;
      if (s[i] == '#' && !in_quote) {
        s.resize(i);
        break;
      }
    }
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace posekey
