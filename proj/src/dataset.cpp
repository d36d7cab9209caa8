#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tfsdiff/image.hpp"
#include "tfsdiff/pipeline.hpp"

namespace tfsdiff {

const std::vector<std::string>& modality_configs() {
  static const std::vector<std::string> names{"MR-T2/MR-Gad/PET", "CT/MR-T2/SPECT",
                                              "MR-T1/MR-T2/PET", "MR-T2/MR-Gad/SPECT",
                                              "MR-T1/MR-T2/SPECT"};
  return names;
}

TrainingBatch prepare_batch(const std::vector<TriModalSample>& samples,
                            const std::vector<std::size_t>& indices) {
  require(!indices.empty(), ErrorCode::kInvalidArgument, "prepare_batch: empty batch");
  std::vector<Tensor> mods, targets;
  for (std::size_t i : indices) {
    require(i < samples.size(), ErrorCode::kOutOfRange, "prepare_batch: index out of range");
    const TriModalSample& s = samples[i];
    require(s.gt.defined(), ErrorCode::kMissingInput, "sample " + s.id + " has no ground truth");
    const std::size_t H = s.gt.dim(1), W = s.gt.dim(2);
    require(H == s.x.dim(1) * s.scale && W == s.x.dim(2) * s.scale, ErrorCode::kShape,
            "sample " + s.id + ": ground truth is not the low-resolution size times the scale");
    mods.push_back(conditioning_stack(s.x, s.y, s.s, H, W));
    targets.push_back(reshape(add_scalar(scale(s.gt, 2.0), -1.0), {1, 3, H, W}));
  }
  return {concat(mods, 0), concat(targets, 0)};
}

namespace {

// Soft-edged ellipse in [0,1].
double ellipse(double x, double y, double cx, double cy, double rx, double ry, double soft) {
  const double d = std::sqrt((x - cx) * (x - cx) / (rx * rx) + (y - cy) * (y - cy) / (ry * ry));
  return 1.0 / (1.0 + std::exp((d - 1.0) / soft));
}

Tensor phantom(std::size_t n, Rng& rng, bool anatomical) {
  const double N = static_cast<double>(n);
  struct Blob {
    double cx, cy, sigma, amp;
  };
  std::vector<Blob> blobs(2 + rng.below(3));
  for (auto& b : blobs) {
    b.cx = N * (0.25 + 0.5 * rng.uniform());
    b.cy = N * (0.25 + 0.5 * rng.uniform());
    b.sigma = N * (0.08 + 0.12 * rng.uniform());
    b.amp = (anatomical ? 0.25 : 0.5) + 0.4 * rng.uniform();
  }
  const double rx = N * (0.3 + 0.1 * rng.uniform()), ry = N * (0.35 + 0.1 * rng.uniform());
  const double level = 0.2 + 0.2 * rng.uniform();
  std::vector<double> v(n * n);
  for (std::size_t yi = 0; yi < n; ++yi) {
    for (std::size_t xi = 0; xi < n; ++xi) {
      const double x = static_cast<double>(xi) + 0.5, y = static_cast<double>(yi) + 0.5;
      double value = anatomical ? level * ellipse(x, y, N / 2, N / 2, rx, ry, 0.08) : 0.0;
      for (const auto& b : blobs) {
        value += b.amp * std::exp(-((x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy)) /
                                  (2 * b.sigma * b.sigma));
      }
      v[yi * n + xi] = std::clamp(value, 0.0, 1.0);
    }
  }
  return quantize_8bit(Tensor::from_data({1, n, n}, std::move(v)));
}

}  // namespace

std::vector<std::string> generate_synthetic_source(const std::filesystem::path& dir,
                                                   const SyntheticOptions& options) {
  require(options.size >= 8, ErrorCode::kInvalidArgument, "synthetic images must be >= 8 px");
  Rng rng(options.seed);
  std::vector<std::string> ids;
  const int digits = std::max<int>(3, static_cast<int>(std::to_string(options.count).size()));
  for (std::size_t i = 0; i < options.count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case%0*zu", digits, i);
    const auto sample_dir = dir / id;
    const Tensor x = phantom(options.size, rng, true);
    const Tensor y = phantom(options.size, rng, true);
    const Tensor s = phantom(options.size, rng, false);
    std::vector<double> fused(x.numel());
    for (std::size_t k = 0; k < fused.size(); ++k) {
      fused[k] = std::max({x.data()[k], y.data()[k], s.data()[k]});
    }
    const Tensor gt = to_rgb(Tensor::from_data(x.shape(), std::move(fused)));
    write_file_if_changed(sample_dir / "x.png", encode_png(x));
    write_file_if_changed(sample_dir / "y.png", encode_png(y));
    write_file_if_changed(sample_dir / "s.png", encode_png(s));
    write_file_if_changed(sample_dir / "gt.png", encode_png(gt));
    const std::string modality = modality_configs()[i % modality_configs().size()] + "\n";
    write_file_if_changed(sample_dir / "modality.txt",
                          std::vector<unsigned char>(modality.begin(), modality.end()));
    ids.emplace_back(id);
  }
  return ids;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatio& ratio) {
  const std::size_t total = ratio.train + ratio.val + ratio.test;
  require(total > 0, ErrorCode::kConfig, "split ratio must not be all zero");
  const std::array<std::size_t, 3> parts{ratio.train, ratio.val, ratio.test};
  std::array<std::size_t, 3> sizes{};
  std::array<std::size_t, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    sizes[i] = n * parts[i] / total;
    remainder[i] = n * parts[i] % total;
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  fail(ErrorCode::kInvalidArgument, "unknown split '" + name + "' (expected train, val or test)");
}

std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot read " + path.string());
  std::uint64_t h = 14695981039346656037ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["schema_version"] = DatasetManifest::kSchemaVersion;
  j["kind"] = "tfsdiff.manifest";
  j["seed"] = m.seed;
  j["ratio"] = {m.ratio.train, m.ratio.val, m.ratio.test};
  j["scales"] = m.scales;
  j["splits"]["train"] = m.train;
  j["splits"]["val"] = m.val;
  j["splits"]["test"] = m.test;
  nlohmann::ordered_json samples = nlohmann::ordered_json::object();
  for (const auto& [id, sums] : m.checksums) {
    nlohmann::ordered_json s;
    s["modality_config"] = m.modality.count(id) ? m.modality.at(id) : "";
    if (m.gt_size.count(id)) s["gt_size"] = m.gt_size.at(id);
    s["checksums"] = sums;
    samples[id] = s;
  }
  j["samples"] = samples;
  j["rejected"] = nlohmann::ordered_json::array();
  for (const auto& [id, reason] : m.rejected) j["rejected"].push_back({{"id", id}, {"reason", reason}});
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("manifest is not valid JSON: ") + e.what());
  }
  require(j.value("schema_version", 0) == DatasetManifest::kSchemaVersion, ErrorCode::kFormat,
          "unsupported manifest schema version");
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto ratio = j.at("ratio").get<std::vector<std::size_t>>();
    require(ratio.size() == 3, ErrorCode::kFormat, "manifest ratio must have three entries");
    m.ratio = {ratio[0], ratio[1], ratio[2]};
    m.scales = j.at("scales").get<std::vector<std::size_t>>();
    m.train = j.at("splits").at("train").get<std::vector<std::string>>();
    m.val = j.at("splits").at("val").get<std::vector<std::string>>();
    m.test = j.at("splits").at("test").get<std::vector<std::string>>();
    for (const auto& [id, s] : j.at("samples").items()) {
      m.checksums[id] = s.at("checksums").get<std::map<std::string, std::string>>();
      m.modality[id] = s.value("modality_config", "");
      if (s.contains("gt_size")) m.gt_size[id] = s.at("gt_size").get<std::array<std::size_t, 2>>();
    }
    for (const auto& r : j.at("rejected")) {
      m.rejected.emplace_back(r.at("id").get<std::string>(), r.at("reason").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir) {
  const auto path = dataset_dir / "manifest.json";
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return manifest_from_json(buf.str());
}

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  std::string s = buf.str();
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

std::filesystem::path scale_dir(const std::filesystem::path& out, std::size_t scale) {
  return out / ("x" + std::to_string(scale));
}

}  // namespace

DatasetManifest build_dataset(const std::filesystem::path& src, const std::filesystem::path& out,
                              const BuildOptions& options) {
  require(std::filesystem::is_directory(src), ErrorCode::kIo,
          "source directory not found: " + src.string());
  require(!options.scales.empty(), ErrorCode::kConfig, "at least one scale is required");
  for (std::size_t s : options.scales) {
    require(s == 2 || s == 4 || s == 8, ErrorCode::kConfig,
            "scale must be 2, 4 or 8, got " + std::to_string(s));
  }
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(src)) {
    if (entry.is_directory()) ids.push_back(entry.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());

  DatasetManifest m;
  m.seed = options.seed;
  m.ratio = options.ratio;
  m.scales = options.scales;
  std::vector<std::string> accepted;
  for (const std::string& id : ids) {
    const auto dir = src / id;
    std::string missing;
    for (const char* f : {"x.png", "y.png", "s.png", "gt.png"}) {
      if (!std::filesystem::is_regular_file(dir / f)) missing += (missing.empty() ? "" : ", ") + std::string(f);
    }
    if (!missing.empty()) {
      m.rejected.emplace_back(id, "missing " + missing);
      continue;
    }
    Tensor gt, mods[3];
    try {
      gt = to_rgb(load_png(dir / "gt.png"));
      const char* names[3] = {"x.png", "y.png", "s.png"};
      for (int k = 0; k < 3; ++k) mods[k] = to_luminance(load_png(dir / names[k]));
    } catch (const Error& e) {
      m.rejected.emplace_back(id, e.what());
      continue;
    }
    const std::size_t H = gt.dim(1), W = gt.dim(2);
    std::string problem;
    for (const Tensor& t : mods) {
      if (t.dim(1) != H || t.dim(2) != W) problem = "modality size differs from ground truth size";
    }
    for (std::size_t s : options.scales) {
      if (problem.empty() && (H % s != 0 || W % s != 0)) {
        problem = "ground truth " + std::to_string(H) + "x" + std::to_string(W) +
                  " is not divisible by scale " + std::to_string(s);
      }
    }
    if (!problem.empty()) {
      m.rejected.emplace_back(id, problem);
      continue;
    }
    for (const char* f : {"x.png", "y.png", "s.png", "gt.png"}) m.checksums[id][f] = file_checksum(dir / f);
    m.modality[id] = std::filesystem::exists(dir / "modality.txt") ? read_text(dir / "modality.txt") : "";
    m.gt_size[id] = {H, W};

    write_file_if_changed(out / "gt" / (id + ".png"), encode_png(gt));
    for (std::size_t s : options.scales) {
      const char* names[3] = {"x.png", "y.png", "s.png"};
      for (int k = 0; k < 3; ++k) {
        const Tensor low = quantize_8bit(bicubic_resample(mods[k], H / s, W / s));
        write_file_if_changed(scale_dir(out, s) / id / names[k], encode_png(low));
      }
    }
    accepted.push_back(id);
  }

  // Seeded Fisher-Yates over the sorted ids, then contiguous split ranges.
  Rng rng(options.seed);
  for (std::size_t i = accepted.size(); i > 1; --i) {
    std::swap(accepted[i - 1], accepted[rng.below(i)]);
  }
  const auto sizes = split_sizes(accepted.size(), options.ratio);
  m.train.assign(accepted.begin(), accepted.begin() + sizes[0]);
  m.val.assign(accepted.begin() + sizes[0], accepted.begin() + sizes[0] + sizes[1]);
  m.test.assign(accepted.begin() + sizes[0] + sizes[1], accepted.end());

  const std::string json = manifest_to_json(m);
  write_file_if_changed(out / "manifest.json", std::vector<unsigned char>(json.begin(), json.end()));
  return m;
}

std::vector<TriModalSample> load_split(const std::filesystem::path& dataset_dir,
                                       const std::string& split, std::size_t scale) {
  const DatasetManifest m = load_manifest(dataset_dir);
  require(std::find(m.scales.begin(), m.scales.end(), scale) != m.scales.end(),
          ErrorCode::kMissingInput,
          "dataset was not built for scale " + std::to_string(scale));
  std::vector<TriModalSample> samples;
  for (const std::string& id : m.split(split)) {
    TriModalSample s;
    s.id = id;
    s.scale = scale;
    const auto dir = scale_dir(dataset_dir, scale) / id;
    s.x = load_png(dir / "x.png");
    s.y = load_png(dir / "y.png");
    s.s = load_png(dir / "s.png");
    s.gt = to_rgb(load_png(dataset_dir / "gt" / (id + ".png")));
    s.modality_config = m.modality.count(id) ? m.modality.at(id) : "";
    require(s.gt.dim(1) == s.x.dim(1) * scale && s.gt.dim(2) == s.x.dim(2) * scale,
            ErrorCode::kShape, "sample " + id + ": inconsistent sizes on disk");
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace tfsdiff
