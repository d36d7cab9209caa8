#include "tfsdiff/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include "tfsdiff/image.hpp"
#include "tfsdiff/ops.hpp"

namespace tfsdiff {

namespace {

void require_pair(const Tensor& a, const Tensor& b, const char* metric) {
  require(a.shape() == b.shape(), ErrorCode::kShape,
          std::string(metric) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

std::vector<Plane> planes_of(const Tensor& image) {
  require(image.rank() >= 2, ErrorCode::kShape, "image needs at least [H,W]");
  const Shape& s = image.shape();
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
  const std::size_t count = image.numel() / (H * W);
  auto d = image.data();
  std::vector<Plane> out(count);
  for (std::size_t c = 0; c < count; ++c) {
    out[c].h = H;
    out[c].w = W;
    out[c].v.assign(d.begin() + c * H * W, d.begin() + (c + 1) * H * W);
  }
  return out;
}

}  // namespace

double average_gradient(const Tensor& image) {
  const auto planes = planes_of(image);
  require(planes[0].h >= 2 && planes[0].w >= 2, ErrorCode::kShape,
          "average_gradient: image must be at least 2x2");
  double total = 0.0;
  for (const Plane& p : planes) {
    double acc = 0.0;
    for (std::size_t y = 0; y + 1 < p.h; ++y) {
      for (std::size_t x = 0; x + 1 < p.w; ++x) {
        const double gx = p.at(y, x + 1) - p.at(y, x);
        const double gy = p.at(y + 1, x) - p.at(y, x);
        acc += std::sqrt((gx * gx + gy * gy) / 2.0);
      }
    }
    total += acc / static_cast<double>((p.h - 1) * (p.w - 1));
  }
  return total / static_cast<double>(planes.size());
}

double mse(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "mse");
  auto x = a.data(), y = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  return acc / static_cast<double>(x.size());
}

double mae(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "mae");
  auto x = a.data(), y = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - y[i]);
  return acc / static_cast<double>(x.size());
}

double rmse(const Tensor& a, const Tensor& b) { return std::sqrt(mse(a, b)); }

double psnr(const Tensor& a, const Tensor& b, double range) {
  require(range > 0.0, ErrorCode::kInvalidArgument, "psnr: range must be positive");
  const double e = mse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / e);
}

double ssim_metric(const Tensor& a, const Tensor& b, double range, const SsimWindow& window) {
  require_pair(a, b, "ssim");
  require(range > 0.0, ErrorCode::kInvalidArgument, "ssim: range must be positive");
  const auto pa = planes_of(a), pb = planes_of(b);
  const std::size_t H = pa[0].h, W = pa[0].w, n = window.size;
  require(H >= n && W >= n, ErrorCode::kShape,
          "ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " smaller than the " +
              std::to_string(n) + "x" + std::to_string(n) + " window");
  const auto win = gaussian_window(window);
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < pa.size(); ++c) {
    for (std::size_t y = 0; y + n <= H; ++y) {
      for (std::size_t x = 0; x + n <= W; ++x) {
        double mu_a = 0, mu_b = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t wy = 0; wy < n; ++wy) {
          for (std::size_t wx = 0; wx < n; ++wx) {
            const double w = win[wy * n + wx];
            const double va = pa[c].at(y + wy, x + wx), vb = pb[c].at(y + wy, x + wx);
            mu_a += w * va;
            mu_b += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        }
        const double var_a = saa - mu_a * mu_a, var_b = sbb - mu_b * mu_b, cov = sab - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

namespace {

std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  // Half-sample symmetric: d c b a | a b c d | d c b a
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

std::vector<double> gaussian_1d(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double centre = static_cast<double>(n / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - centre;
    total += w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (double& v : w) v /= total;
  return w;
}

// Same-size separable filtering with symmetric boundary extension.
Plane filter_same(const Plane& p, const std::vector<double>& k) {
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto H = static_cast<std::ptrdiff_t>(p.h), W = static_cast<std::ptrdiff_t>(p.w);
  Plane tmp{p.h, p.w, std::vector<double>(p.v.size())};
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t j = -r; j <= r; ++j) acc += k[j + r] * p.v[y * W + reflect_index(x + j, W)];
      tmp.v[y * W + x] = acc;
    }
  }
  Plane out{p.h, p.w, std::vector<double>(p.v.size())};
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t j = -r; j <= r; ++j) acc += k[j + r] * tmp.v[reflect_index(y + j, H) * W + x];
      out.v[y * W + x] = acc;
    }
  }
  return out;
}

Plane decimate(const Plane& p) {
  Plane out{(p.h + 1) / 2, (p.w + 1) / 2, {}};
  out.v.reserve(out.h * out.w);
  for (std::size_t y = 0; y < p.h; y += 2) {
    for (std::size_t x = 0; x < p.w; x += 2) out.v.push_back(p.at(y, x));
  }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out{a.h, a.w, std::vector<double>(a.v.size())};
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
  return out;
}

}  // namespace

double vif(const Tensor& reference, const Tensor& distorted, const VifOptions& options) {
  require_pair(reference, distorted, "vif");
  require(options.scales >= 1, ErrorCode::kInvalidArgument, "vif: need at least one scale");
  auto refs = planes_of(reference), dists = planes_of(distorted);
  const std::size_t min_dim = std::size_t{1} << (options.scales + 1);
  require(std::min(refs[0].h, refs[0].w) >= min_dim, ErrorCode::kShape,
          "vif: images must be at least " + std::to_string(min_dim) + "x" +
              std::to_string(min_dim) + " for " + std::to_string(options.scales) + " scales");
  constexpr double kTiny = 1e-10;
  const double sn = options.noise_variance;
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < refs.size(); ++c) {
    Plane r = refs[c], d = dists[c];
    for (std::size_t scale = 1; scale <= options.scales; ++scale) {
      const std::size_t n = (std::size_t{1} << (options.scales - scale + 1)) + 1;
      const auto win = gaussian_1d(n, static_cast<double>(n) / 5.0);
      if (scale > 1) {
        r = decimate(filter_same(r, win));
        d = decimate(filter_same(d, win));
      }
      const Plane mu1 = filter_same(r, win), mu2 = filter_same(d, win);
      const Plane e11 = filter_same(product(r, r), win);
      const Plane e22 = filter_same(product(d, d), win);
      const Plane e12 = filter_same(product(r, d), win);
      for (std::size_t i = 0; i < r.v.size(); ++i) {
        double s1 = std::max(0.0, e11.v[i] - mu1.v[i] * mu1.v[i]);
        const double s2 = std::max(0.0, e22.v[i] - mu2.v[i] * mu2.v[i]);
        const double s12 = e12.v[i] - mu1.v[i] * mu2.v[i];
        double g = s12 / (s1 + kTiny);
        double sv = s2 - g * s12;
        if (s1 < kTiny) {
          g = 0.0;
          sv = s2;
          s1 = 0.0;
        }
        if (s2 < kTiny) {
          g = 0.0;
          sv = 0.0;
        }
        if (g < 0.0) {
          sv = s2;
          g = 0.0;
        }
        sv = std::max(sv, kTiny);
        num += std::log2(1.0 + g * g * s1 / (sv + sn));
        den += std::log2(1.0 + s1 / sn);
      }
    }
  }
  if (den == 0.0) {
    // Flat reference carries no information; identical inputs still score 1.
    return num == 0.0 && mse(reference, distorted) == 0.0 ? 1.0 : 0.0;
  }
  return num / den;
}

MetricsRecord evaluate_pair(const std::string& id, const Tensor& result, const Tensor& truth,
                            double range) {
  MetricsRecord r;
  r.id = id;
  r.mse = mse(result, truth);
  r.mae = mae(result, truth);
  r.rmse = std::sqrt(r.mse);
  r.psnr = psnr(result, truth, range);
  r.ssim = ssim_metric(result, truth, range);
  // VIF's noise model is calibrated on [0,255]; other ranges are rescaled.
  const double to_8bit = 255.0 / range;
  r.vif = range == 255.0 ? vif(truth, result) : vif(scale(truth, to_8bit), scale(result, to_8bit));
  r.ag = average_gradient(result);
  return r;
}

MetricsRecord aggregate(const std::vector<MetricsRecord>& records) {
  MetricsRecord m;
  m.id = "mean";
  if (records.empty()) return m;
  const double n = static_cast<double>(records.size());
  bool all_lpips = true;
  double lpips = 0.0;
  for (const auto& r : records) {
    m.mse += r.mse / n;
    m.vif += r.vif / n;
    m.ssim += r.ssim / n;
    m.psnr += r.psnr / n;
    m.mae += r.mae / n;
    m.rmse += r.rmse / n;
    m.ag += r.ag / n;
    if (r.lpips) {
      lpips += *r.lpips / n;
    } else {
      all_lpips = false;
    }
  }
  if (all_lpips) m.lpips = lpips;
  return m;
}

double run_lpips_plugin(const std::string& command, const std::filesystem::path& a,
                        const std::filesystem::path& b) {
  auto quote = [](const std::string& s) {
    std::string out = "'";
    for (char ch : s) {
      if (ch == '\'') {
        out += "'\\''";
      } else {
        out += ch;
      }
    }
    return out + "'";
  };
  const std::string cmd = command + " " + quote(a.string()) + " " + quote(b.string());
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  require(pipe != nullptr, ErrorCode::kPlugin, "cannot start LPIPS plug-in: " + command);
  std::string output;
  std::array<char, 256> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe.get())) output += buf.data();
  const int status = pclose(pipe.release());
  require(status == 0, ErrorCode::kPlugin,
          "LPIPS plug-in exited with status " + std::to_string(status));
  std::istringstream in(output);
  double value = 0.0;
  in >> value;
  require(!in.fail() && std::isfinite(value), ErrorCode::kPlugin,
          "LPIPS plug-in printed no number: '" + output + "'");
  return value;
}

namespace {

std::map<std::string, std::filesystem::path> png_files(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::kIo,
          "not a directory: " + dir.string());
  std::map<std::string, std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      files[entry.path().filename().string()] = entry.path();
    }
  }
  return files;
}

Tensor match_channels(const Tensor& image, std::size_t channels) {
  return channels == 3 ? to_rgb(image) : image;
}

}  // namespace

MetricsReport evaluate_set(const std::filesystem::path& results_dir,
                           const std::filesystem::path& gt_dir, const EvalOptions& options) {
  require(options.range > 0.0, ErrorCode::kInvalidArgument, "pixel range must be positive");
  const auto results = png_files(results_dir);
  const auto truths = png_files(gt_dir);
  MetricsReport report;
  report.pixel_range = options.range;
  for (const auto& [name, _] : results) {
    if (!truths.count(name)) report.unmatched.push_back(name);
  }
  for (const auto& [name, _] : truths) {
    if (!results.count(name)) report.unmatched.push_back(name);
  }
  if (!report.unmatched.empty() && !options.allow_partial) {
    std::string list;
    for (const auto& n : report.unmatched) list += (list.empty() ? "" : ", ") + n;
    fail(ErrorCode::kMissingInput, "unmatched files between result and ground-truth sets: " + list);
  }
  for (const auto& [name, path] : results) {
    auto it = truths.find(name);
    if (it == truths.end()) continue;
    Tensor result = load_png(path), truth = load_png(it->second);
    const std::size_t channels = std::max(result.dim(0), truth.dim(0));
    result = scale(match_channels(result, channels), options.range);
    truth = scale(match_channels(truth, channels), options.range);
    MetricsRecord rec = evaluate_pair(std::filesystem::path(name).stem().string(), result, truth,
                                      options.range);
    if (!options.lpips_command.empty()) {
      rec.lpips = run_lpips_plugin(options.lpips_command, path, it->second);
    }
    report.records.push_back(std::move(rec));
  }
  require(!report.records.empty(), ErrorCode::kMissingInput, "no matching image pairs to evaluate");
  report.mean = aggregate(report.records);
  return report;
}

namespace {

using nlohmann::json;

json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double read_number(const json& j) {
  if (j.is_string()) {
    return j.get<std::string>() == "-inf" ? -std::numeric_limits<double>::infinity()
                                          : std::numeric_limits<double>::infinity();
  }
  return j.get<double>();
}

json record_json(const MetricsRecord& r) {
  json j;
  j["id"] = r.id;
  j["mse"] = number(r.mse);
  j["vif"] = number(r.vif);
  j["ssim"] = number(r.ssim);
  j["psnr"] = number(r.psnr);
  j["lpips"] = r.lpips ? json(*r.lpips) : json(nullptr);
  j["mae"] = number(r.mae);
  j["rmse"] = number(r.rmse);
  j["ag"] = number(r.ag);
  return j;
}

MetricsRecord record_from(const json& j) {
  MetricsRecord r;
  r.id = j.at("id").get<std::string>();
  r.mse = read_number(j.at("mse"));
  r.vif = read_number(j.at("vif"));
  r.ssim = read_number(j.at("ssim"));
  r.psnr = read_number(j.at("psnr"));
  if (!j.at("lpips").is_null()) r.lpips = j.at("lpips").get<double>();
  r.mae = read_number(j.at("mae"));
  r.rmse = read_number(j.at("rmse"));
  r.ag = read_number(j.at("ag"));
  return r;
}

}  // namespace

std::string report_to_json(const MetricsReport& report) {
  json j;
  j["schema_version"] = MetricsReport::kSchemaVersion;
  j["kind"] = "tfsdiff.metrics";
  j["label"] = report.label;
  j["pixel_range"] = report.pixel_range;
  j["columns"] = {"mse", "vif", "ssim", "psnr", "lpips", "mae", "rmse", "ag"};
  j["records"] = json::array();
  for (const auto& r : report.records) j["records"].push_back(record_json(r));
  j["mean"] = record_json(report.mean);
  j["unmatched"] = report.unmatched;
  if (!report.config.empty()) j["config"] = report.config;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("metrics report is not valid JSON: ") + e.what());
  }
  require(j.value("schema_version", 0) == MetricsReport::kSchemaVersion, ErrorCode::kFormat,
          "unsupported metrics report schema version");
  MetricsReport r;
  r.label = j.value("label", "");
  r.pixel_range = j.at("pixel_range").get<double>();
  for (const auto& rec : j.at("records")) r.records.push_back(record_from(rec));
  r.mean = record_from(j.at("mean"));
  r.unmatched = j.value("unmatched", std::vector<std::string>{});
  r.config = j.value("config", "");
  return r;
}

std::string report_to_table(const MetricsReport& report) {
  std::ostringstream out;
  std::size_t id_width = 5;
  for (const auto& r : report.records) id_width = std::max(id_width, r.id.size());
  auto cell = [&](double v, int precision) {
    std::ostringstream c;
    if (std::isinf(v)) {
      c << "inf";
    } else {
      c << std::fixed << std::setprecision(precision) << v;
    }
    out << std::setw(12) << c.str();
  };
  auto row = [&](const MetricsRecord& r) {
    out << std::left << std::setw(static_cast<int>(id_width)) << r.id << std::right;
    cell(r.mse, 3);
    cell(r.vif, 3);
    cell(r.ssim, 3);
    cell(r.psnr, 2);
    if (r.lpips) {
      cell(*r.lpips, 3);
    } else {
      out << std::setw(12) << "";
    }
    cell(r.mae, 2);
    cell(r.rmse, 2);
    cell(r.ag, 3);
    out << '\n';
  };
  out << "# pixel range [0," << report.pixel_range << "]";
  if (!report.label.empty()) out << "  " << report.label;
  out << '\n';
  out << std::left << std::setw(static_cast<int>(id_width)) << "image" << std::right;
  for (const char* h : {"MSE", "VIF", "SSIM", "PSNR", "LPIPS*", "MAE", "RMSE", "AG"}) {
    out << std::setw(12) << h;
  }
  out << '\n';
  for (const auto& r : report.records) row(r);
  row(report.mean);
  return out.str();
}

}  // namespace tfsdiff
