#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "tfsdiff/pipeline.hpp"

namespace tfsdiff {

NetworkConfig TrainConfig::network() const {
  NetworkConfig n;
  n.widths = widths;
  n.reduction = reduction;
  n.tmfa_enabled = tmfa_enabled;
  n.embed_scale = embed_scale;
  return n;
}

LossWeights TrainConfig::loss_weights() const {
  LossWeights w;
  w.lambda1 = lambda1;
  w.lambda2 = lambda2;
  w.psf_enabled = psf_enabled;
  w.diffusion_weight = diffusion_weight;
  return w;
}

NoiseSchedule TrainConfig::schedule() const {
  return build_schedule(diffusion_steps, beta_start, beta_end);
}

void TrainConfig::validate() const {
  loss_weights().validate();
  require(diffusion_steps >= 1, ErrorCode::kConfig, "diffusion_steps must be >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorCode::kConfig,
          "beta endpoints must satisfy 0 < beta_start <= beta_end < 1");
  require(learning_rate > 0.0, ErrorCode::kConfig, "learning_rate must be > 0");
  require(batch_size >= 1, ErrorCode::kConfig, "batch_size must be >= 1");
  require(!widths.empty(), ErrorCode::kConfig, "widths must list at least one level");
  require(reduction >= 1, ErrorCode::kConfig, "reduction must be >= 1");
  require(embed_scale > 0.0, ErrorCode::kConfig, "embed_scale must be > 0");
  require(scale == 2 || scale == 4 || scale == 8, ErrorCode::kConfig,
          "scale must be 2, 4 or 8, got " + std::to_string(scale));
  require(eval_split == "train" || eval_split == "val" || eval_split == "test", ErrorCode::kConfig,
          "eval_split must be train, val or test");
}

TrainConfig config_profile(const std::string& name) {
  TrainConfig c;
  c.profile = name;
  if (name == "paper") return c;
  require(name == "desk" || name == "toy", ErrorCode::kConfig,
          "unknown profile '" + name + "' (expected desk, toy or paper)");
  c.diffusion_steps = 50;
  c.beta_start = 1e-4;
  c.beta_end = 0.1;
  c.batch_size = 4;
  c.train_steps = 2000;
  if (name == "toy") {
    c.widths = {8, 16, 16, 16};
    c.eval_split = "train";
  }
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  require(ec == std::errc() && ptr == text.data() + text.size(), ErrorCode::kConfig,
          "invalid value for " + key + ": '" + text + "'");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  fail(ErrorCode::kConfig, "invalid boolean for " + key + ": '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  require(!out.empty(), ErrorCode::kConfig, key + " must not be empty");
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::pair<std::string, std::string>> entries(const TrainConfig& c) {
  std::string widths;
  for (std::size_t w : c.widths) widths += (widths.empty() ? "" : ",") + std::to_string(w);
  return {{"profile", c.profile},
          {"diffusion_steps", std::to_string(c.diffusion_steps)},
          {"beta_start", format_double(c.beta_start)},
          {"beta_end", format_double(c.beta_end)},
          {"lambda1", format_double(c.lambda1)},
          {"lambda2", format_double(c.lambda2)},
          {"psf_enabled", c.psf_enabled ? "true" : "false"},
          {"tmfa_enabled", c.tmfa_enabled ? "true" : "false"},
          {"diffusion_weight", format_double(c.diffusion_weight)},
          {"learning_rate", format_double(c.learning_rate)},
          {"batch_size", std::to_string(c.batch_size)},
          {"train_steps", std::to_string(c.train_steps)},
          {"seed", std::to_string(c.seed)},
          {"widths", widths},
          {"reduction", std::to_string(c.reduction)},
          {"embed_scale", format_double(c.embed_scale)},
          {"scale", std::to_string(c.scale)},
          {"eval_split", c.eval_split},
          {"checkpoint_every", std::to_string(c.checkpoint_every)}};
}

}  // namespace

void apply_config_override(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "profile") {
    c = config_profile(value);
  } else if (key == "diffusion_steps") {
    c.diffusion_steps = parse_number<std::size_t>(key, value);
  } else if (key == "beta_start") {
    c.beta_start = parse_number<double>(key, value);
  } else if (key == "beta_end") {
    c.beta_end = parse_number<double>(key, value);
  } else if (key == "lambda1") {
    c.lambda1 = parse_number<double>(key, value);
  } else if (key == "lambda2") {
    c.lambda2 = parse_number<double>(key, value);
  } else if (key == "psf_enabled") {
    c.psf_enabled = parse_bool(key, value);
  } else if (key == "tmfa_enabled") {
    c.tmfa_enabled = parse_bool(key, value);
  } else if (key == "diffusion_weight") {
    c.diffusion_weight = parse_number<double>(key, value);
  } else if (key == "learning_rate") {
    c.learning_rate = parse_number<double>(key, value);
  } else if (key == "batch_size") {
    c.batch_size = parse_number<std::size_t>(key, value);
  } else if (key == "train_steps") {
    c.train_steps = parse_number<std::size_t>(key, value);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "widths") {
    c.widths = parse_list(key, value);
  } else if (key == "reduction") {
    c.reduction = parse_number<std::size_t>(key, value);
  } else if (key == "embed_scale") {
    c.embed_scale = parse_number<double>(key, value);
  } else if (key == "scale") {
    c.scale = parse_number<std::size_t>(key, value);
  } else if (key == "eval_split") {
    c.eval_split = value;
  } else if (key == "checkpoint_every") {
    c.checkpoint_every = parse_number<std::size_t>(key, value);
  } else {
    fail(ErrorCode::kConfig, "unknown config key '" + key + "'");
  }
}

TrainConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> items;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::string profile = "desk";
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kConfig,
            "config line " + std::to_string(line_no) + " is not key = value: '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "profile") {
      profile = value;
    } else {
      items.emplace_back(key, value);
    }
  }
  TrainConfig c = config_profile(profile);
  for (const auto& [k, v] : items) apply_config_override(c, k, v);
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, v] : entries(config)) out += k + " = " + v + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, v] : entries(TrainConfig{})) keys.push_back(k);
  return keys;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) { return entries(a) == entries(b); }

std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b) {
  std::vector<std::string> keys;
  const auto ea = entries(a), eb = entries(b);
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].second != eb[i].second) keys.push_back(ea[i].first);
  }
  return keys;
}

}  // namespace tfsdiff
