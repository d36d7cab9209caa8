#include <json.hpp>

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tfsdiff/image.hpp"
#include "tfsdiff/pipeline.hpp"

namespace tfsdiff {

Tensor fuse_images(const FusionNet& net, const TrainConfig& config, const Tensor& x, const Tensor& y,
                   const Tensor& s, const FuseOptions& options) {
  require(x.defined() && y.defined() && s.defined(), ErrorCode::kMissingInput,
          "fuse: all three modalities are required");
  require(x.rank() == 3 && x.dim(0) == 1, ErrorCode::kShape, "fuse: modalities must be [1,h,w]");
  const std::size_t H = x.dim(1) * config.scale, W = x.dim(2) * config.scale;
  const std::size_t m = net.size_multiple();
  if (H % m != 0 || W % m != 0) {
    const std::size_t step = m / std::gcd(m, config.scale);
    fail(ErrorCode::kShape, "fuse: output " + std::to_string(H) + "x" + std::to_string(W) +
                                " is not a multiple of " + std::to_string(m) +
                                "; pad or crop the inputs to a multiple of " + std::to_string(step) +
                                " pixels per side");
  }
  Rng rng(options.seed);
  SamplerOptions sampler;
  sampler.scale = config.scale;
  auto last = std::chrono::steady_clock::now();
  if (options.on_step) {
    sampler.on_step = [&](std::size_t t) {
      const auto now = std::chrono::steady_clock::now();
      options.on_step(t, std::chrono::duration<double>(now - last).count());
      last = now;
    };
  }
  return sample_fusion(x, y, s, net, config.schedule(), rng, sampler);
}

void fuse_files(const std::filesystem::path& checkpoint, const std::filesystem::path& x,
                const std::filesystem::path& y, const std::filesystem::path& s,
                const std::filesystem::path& output, const FuseOptions& options) {
  for (const auto& p : {x, y, s}) {
    require(std::filesystem::is_regular_file(p), ErrorCode::kMissingInput,
            "input not found: " + p.string());
  }
  const Checkpoint c = load_checkpoint(checkpoint);
  const TrainConfig config = parse_config(c.config_text);
  const FusionNet net = restore_network(c);
  const Tensor fused = fuse_images(net, config, to_luminance(load_png(x)), to_luminance(load_png(y)),
                                   to_luminance(load_png(s)), options);
  write_file_if_changed(output, encode_png(fused));
}

MetricsReport evaluate_samples(const FusionNet& net, const TrainConfig& config,
                               const std::vector<TriModalSample>& samples, std::uint64_t seed,
                               const std::filesystem::path& save_dir) {
  require(!samples.empty(), ErrorCode::kMissingInput, "no samples to evaluate");
  std::vector<MetricsRecord> records;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const TriModalSample& s = samples[i];
    require(s.gt.defined(), ErrorCode::kMissingInput, "sample " + s.id + " has no ground truth");
    FuseOptions fo;
    fo.seed = seed + i;
    const Tensor fused = quantize_8bit(fuse_images(net, config, s.x, s.y, s.s, fo));
    if (!save_dir.empty()) write_file_if_changed(save_dir / (s.id + ".png"), encode_png(fused));
    records.push_back(
        evaluate_pair(s.id, scale(fused, 255.0), scale(quantize_8bit(to_rgb(s.gt)), 255.0), 255.0));
  }
  MetricsReport report;
  report.pixel_range = 255.0;
  report.label = config.profile;
  report.config = serialize_config(config);
  report.mean = aggregate(records);
  report.records = std::move(records);
  return report;
}

std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base) {
  TrainConfig no_tmfa = base, no_psf = base;
  no_tmfa.tmfa_enabled = false;
  no_psf.psf_enabled = false;
  return {{"TFS-Diff", base}, {"w/o TMFA", no_tmfa}, {"w/o PSF", no_psf}};
}

namespace {

struct Column {
  const char* name;
  double MetricsRecord::*field;
};

// Reporting order for the study summary.
const Column kColumns[] = {{"VIF", &MetricsRecord::vif},   {"SSIM", &MetricsRecord::ssim},
                           {"PSNR", &MetricsRecord::psnr}, {"AG", &MetricsRecord::ag},
                           {"MSE", &MetricsRecord::mse},   {"MAE", &MetricsRecord::mae},
                           {"RMSE", &MetricsRecord::rmse}};

std::string cell(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(4);
  s << v;
  return s.str();
}

}  // namespace

AblationResult ablate(const TrainConfig& base, const std::vector<TriModalSample>& train_samples,
                      const std::vector<TriModalSample>& eval_samples) {
  AblationResult result;
  for (auto& [name, config] : ablation_variants(base)) {
    TrainResult trained = train(config, train_samples);
    AblationRun run{name, config, evaluate_samples(trained.net, config, eval_samples, config.seed),
                    std::move(trained.log)};
    run.report.label = name;
    result.runs.push_back(std::move(run));
  }

  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["kind"] = "tfsdiff.ablation";
  j["pixel_range"] = 255;
  j["runs"] = nlohmann::ordered_json::array();
  std::string table = "# pixel range [0,255]\nvariant";
  for (const auto& c : kColumns) {
    table += "\t";
    table += c.name;
    if (std::string(c.name) == "MSE") table += "\tLPIPS*";
  }
  table += "\n";
  for (const auto& run : result.runs) {
    nlohmann::ordered_json r;
    r["variant"] = run.name;
    r["config_diff"] = config_diff(base, run.config);
    table += run.name;
    for (const auto& c : kColumns) {
      const double v = run.report.mean.*c.field;
      r["mean"][c.name] = std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json("inf");
      table += "\t" + cell(v);
      if (std::string(c.name) == "MSE") {
        if (run.report.mean.lpips) {
          r["mean"]["LPIPS*"] = *run.report.mean.lpips;
          table += "\t" + cell(*run.report.mean.lpips);
        } else {
          r["mean"]["LPIPS*"] = nullptr;
          table += "\t-";
        }
      }
    }
    r["config"] = serialize_config(run.config);
    r["final_loss"] = run.log.empty() ? 0.0 : run.log.back().total;
    table += "\n";
    j["runs"].push_back(r);
  }
  result.summary_json = j.dump(2) + "\n";
  result.summary_table = table;
  return result;
}

}  // namespace tfsdiff
