#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tfsdiff/objectives.hpp"
#include "tfsdiff/tensor.hpp"

namespace tfsdiff {

// Full-reference and sharpness metrics over [C,H,W] images whose values are
// expressed in the pixel range passed to each function (255 for 8-bit files).

/// Average gradient from forward differences, averaged over channels.
double average_gradient(const Tensor& image);

double mse(const Tensor& a, const Tensor& b);
double mae(const Tensor& a, const Tensor& b);
double rmse(const Tensor& a, const Tensor& b);
/// 10 log10(range^2 / MSE); +infinity for identical images.
double psnr(const Tensor& a, const Tensor& b, double range);

/// Direct-summation SSIM; same definition as ssim_index, no autodiff.
double ssim_metric(const Tensor& a, const Tensor& b, double range, const SsimWindow& window = {});

struct VifOptions {
  /// Visual noise variance in squared pixel units of [0,255] images.
  double noise_variance = 2.0;
  std::size_t scales = 4;
};

/// Pixel-domain VIF. Reference first; the measure is not symmetric.
/// Multi-channel inputs pool numerator and denominator over channels.
double vif(const Tensor& reference, const Tensor& distorted, const VifOptions& options = {});

struct MetricsRecord {
  std::string id;
  double mse = 0.0, vif = 0.0, ssim = 0.0, psnr = 0.0, mae = 0.0, rmse = 0.0, ag = 0.0;
  std::optional<double> lpips;
};

struct MetricsReport {
  static constexpr int kSchemaVersion = 1;
  double pixel_range = 255.0;
  std::string label;
  std::vector<MetricsRecord> records;
  MetricsRecord mean;
  /// Files present on only one side (populated with --allow-partial).
  std::vector<std::string> unmatched;
  /// Configuration text of the run that produced the results, if any.
  std::string config;
};

/// Metrics of one result/ground-truth pair (both in pixel range units).
MetricsRecord evaluate_pair(const std::string& id, const Tensor& result, const Tensor& truth,
                            double range);

/// Arithmetic means of every metric across records.
MetricsRecord aggregate(const std::vector<MetricsRecord>& records);

struct EvalOptions {
  double range = 255.0;
  bool allow_partial = false;
  /// External LPIPS scorer invoked as `<command> <result.png> <gt.png>`; it
  /// must print one decimal number. Empty: LPIPS reported as absent.
  std::string lpips_command;
};

/// Scores every PNG in `results_dir` against the same-named file in `gt_dir`.
MetricsReport evaluate_set(const std::filesystem::path& results_dir,
                           const std::filesystem::path& gt_dir, const EvalOptions& options = {});

/// Runs the LPIPS plug-in on one pair.
double run_lpips_plugin(const std::string& command, const std::filesystem::path& a,
                        const std::filesystem::path& b);

/// Versioned JSON rendering.
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
/// Aligned table in the column order MSE, VIF, SSIM, PSNR, LPIPS, MAE, RMSE, AG.
std::string report_to_table(const MetricsReport& report);

}  // namespace tfsdiff
