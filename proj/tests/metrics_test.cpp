#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "gradcheck.hpp"
#include "metrics_oracle_values.hpp"
#include "tfsdiff/error.hpp"
#include "tfsdiff/image.hpp"
#include "tfsdiff/metrics.hpp"
#include "tfsdiff/objectives.hpp"

using namespace tfsdiff;
using tfsdiff::testing::random_tensor;

namespace {

// Same generators as the Python oracle script.
std::vector<double> lcg_normals(std::uint64_t state, std::size_t n) {
  std::vector<double> out;
  while (out.size() < n) {
    double u[2];
    for (double& v : u) {
      state = state * 6364136223846793005ULL + 1442695040888963407ULL;
      v = (static_cast<double>(state >> 11) + 0.5) / 9007199254740992.0;
    }
    const double r = std::sqrt(-2.0 * std::log(u[0]));
    out.push_back(r * std::cos(2.0 * M_PI * u[1]));
    out.push_back(r * std::sin(2.0 * M_PI * u[1]));
  }
  out.resize(n);
  return out;
}

Tensor scene(std::size_t h, std::size_t w, double phase = 0.0) {
  std::vector<double> v(h * w);
  for (std::size_t yi = 0; yi < h; ++yi) {
    for (std::size_t xi = 0; xi < w; ++xi) {
      const double x = static_cast<double>(xi), y = static_cast<double>(yi);
      const double base = 110 + 55 * std::sin(x / 3.1 + phase) * std::cos(y / 4.7) + 35 * std::cos((x + 2 * y) / 7.3);
      const double texture = 12 * (static_cast<double>((7 * xi + 13 * yi) % 11) / 10.0 - 0.5);
      v[yi * w + xi] = std::clamp(base + texture, 0.0, 255.0);
    }
  }
  return Tensor::from_data({1, h, w}, v);
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  const int radius = static_cast<int>(4 * sigma);
  std::vector<double> k;
  double total = 0;
  for (int d = -radius; d <= radius; ++d) total += k.emplace_back(std::exp(-d * d / (2 * sigma * sigma)));
  for (double& v : k) v /= total;
  const int H = static_cast<int>(img.dim(1)), W = static_cast<int>(img.dim(2));
  auto src = img.data();
  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * src[y * W + std::clamp(x + d, 0, W - 1)];
      tmp[y * W + x] = acc;
    }
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * tmp[std::clamp(y + d, 0, H - 1) * W + x];
      out[y * W + x] = acc;
    }
  }
  return Tensor::from_data(img.shape(), out);
}

Tensor affine_distortion(const Tensor& ref) {
  const std::size_t H = ref.dim(1), W = ref.dim(2);
  std::vector<double> v(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      v[y * W + x] = 0.7 * ref.data()[y * W + x] + 30 + static_cast<double>((y * 5 + x * 3) % 9) - 4;
    }
  }
  return Tensor::from_data(ref.shape(), v);
}

}  // namespace

TEST_CASE("oracle generators agree") {
  const auto n = lcg_normals(2024, 3);
  CHECK(n[0] == doctest::Approx(oracle::kNoiseSample0).epsilon(1e-15));
  CHECK(n[2] == doctest::Approx(oracle::kNoiseSample2).epsilon(1e-15));
}

TEST_CASE("average gradient") {
  CHECK(average_gradient(Tensor::full({3, 5, 4}, 7.0)) == 0.0);
  std::vector<double> ramp(6 * 9);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<double>(i % 9);
  CHECK(std::abs(average_gradient(Tensor::from_data({1, 6, 9}, ramp)) - std::sqrt(0.5)) <= 1e-9);
  std::mt19937_64 gen(1);
  const Tensor img = random_tensor({2, 7, 6}, gen, 0, 255, false);
  CHECK(average_gradient(add_scalar(img, 17.0)) == doctest::Approx(average_gradient(img)).epsilon(1e-12));
  const Tensor s = scene(32, 32);
  CHECK(average_gradient(s) == doctest::Approx(oracle::kAgScene).epsilon(1e-12));
  CHECK(average_gradient(gaussian_blur(s, 2.0)) == doctest::Approx(oracle::kAgBlur).epsilon(1e-12));
  CHECK_THROWS_AS(average_gradient(Tensor::zeros({1, 1, 5})), Error);
}

TEST_CASE("pixel error metrics") {
  std::mt19937_64 gen(2);
  const Tensor p = random_tensor({3, 4, 4}, gen, 0, 255, false);
  CHECK(mse(p, p) == 0.0);
  CHECK(mae(p, p) == 0.0);
  CHECK(rmse(p, p) == 0.0);
  CHECK(psnr(p, p, 255.0) == std::numeric_limits<double>::infinity());
  const Tensor a = Tensor::zeros({1, 1, 4}), b = Tensor::full({1, 1, 4}, 0.1);
  CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-14));
  CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-12));
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor x = random_tensor({1, 3, 5}, gen, 0, 255, false), y = random_tensor({1, 3, 5}, gen, 0, 255, false);
    REQUIRE(mae(x, y) <= rmse(x, y) + 1e-12);
    REQUIRE(std::abs(rmse(x, y) * rmse(x, y) - mse(x, y)) <= 1e-9 * std::max(1.0, mse(x, y)));
    REQUIRE(mse(x, y) == mse(y, x));
  }
  CHECK_THROWS_AS(mse(a, Tensor::zeros({1, 2, 2})), Error);
  CHECK_THROWS_AS(psnr(a, b, 0.0), Error);
}

TEST_CASE("ssim metric") {
  std::mt19937_64 gen(3);
  const Tensor p = random_tensor({3, 13, 17}, gen, 0, 255, false);
  CHECK(std::abs(ssim_metric(p, p, 255.0) - 1.0) <= 1e-9);
  CHECK(ssim_metric(Tensor::zeros({1, 11, 11}), Tensor::full({1, 11, 11}, 1.0), 1.0) ==
        doctest::Approx(1e-4 / (1 + 1e-4)).epsilon(1e-10));
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({2, 12, 15}, gen, 0, 1, false), b = random_tensor({2, 12, 15}, gen, 0, 1, false);
    CHECK(std::abs(ssim_metric(a, b, 1.0) - ssim_index(a, b, 1.0).item()) <= 1e-9);
    CHECK(std::abs(ssim_metric(a, b, 1.0) - ssim_metric(b, a, 1.0)) <= 1e-12);
  }
  const Tensor ref = scene(32, 32);
  const Tensor noisy = add(ref, scale(Tensor::from_data({1, 32, 32}, lcg_normals(2024, 1024)), 50.0));
  CHECK(ssim_metric(ref, gaussian_blur(ref, 2.0), 255.0) == doctest::Approx(oracle::kSsimBlur).epsilon(1e-10));
  CHECK(ssim_metric(ref, noisy, 255.0) == doctest::Approx(oracle::kSsimNoise).epsilon(1e-10));
  const Tensor tall = scene(48, 40, 0.4);
  CHECK(ssim_metric(tall, affine_distortion(tall), 255.0) == doctest::Approx(oracle::kSsimAffine).epsilon(1e-10));
  CHECK_THROWS_AS(ssim_metric(Tensor::zeros({1, 10, 20}), Tensor::zeros({1, 10, 20}), 1.0), Error);
}

TEST_CASE("vif") {
  const Tensor ref = scene(32, 32);
  CHECK(std::abs(vif(ref, ref) - 1.0) <= 1e-6);
  const double blurred = vif(ref, gaussian_blur(ref, 2.0));
  CHECK((blurred > 0.0 && blurred < 1.0));
  CHECK(blurred == doctest::Approx(oracle::kVifBlur).epsilon(1e-9));
  const Tensor noisy = add(ref, scale(Tensor::from_data({1, 32, 32}, lcg_normals(2024, 1024)), 50.0));
  const double heavy = vif(ref, noisy);
  CHECK(heavy < 0.2);
  CHECK(heavy == doctest::Approx(oracle::kVifNoise).epsilon(1e-9));
  const Tensor tall = scene(48, 40, 0.4);
  CHECK(vif(tall, affine_distortion(tall)) == doctest::Approx(oracle::kVifAffine).epsilon(1e-9));
  // Reference-first: swapping arguments changes the value.
  CHECK(std::abs(vif(gaussian_blur(ref, 2.0), ref) - blurred) > 1e-3);
  CHECK_THROWS_AS(vif(Tensor::zeros({1, 31, 64}), Tensor::zeros({1, 31, 64})), Error);
  CHECK(vif(Tensor::full({1, 32, 32}, 3.0), Tensor::full({1, 32, 32}, 3.0)) == 1.0);
}

TEST_CASE("identities on random shapes") {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t c = 1 + gen() % 3, h = 32 + gen() % 9, w = 32 + gen() % 9;
    const Tensor img = random_tensor({c, h, w}, gen, 0, 255, false);
    CHECK(std::abs(vif(img, img) - 1.0) <= 1e-6);
    CHECK(std::abs(ssim_metric(img, img, 255.0) - 1.0) <= 1e-9);
    CHECK(average_gradient(Tensor::full({c, h, w}, 9.0)) == 0.0);
  }
}

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("evaluate_set") {
  TempDir tmp("tfsdiff_metrics_test");
  const auto gt = tmp.path / "gt", res = tmp.path / "res", same = tmp.path / "same";
  std::mt19937_64 gen(5);
  std::vector<Tensor> truths;
  for (int i = 0; i < 3; ++i) {
    Tensor img = quantize_8bit(random_tensor({3, 32, 32}, gen, 0, 1, false));
    const std::string name = "img" + std::to_string(i) + ".png";
    save_png(gt / name, img);
    save_png(same / name, img);
    truths.push_back(img);
  }
  const MetricsReport ident = evaluate_set(same, gt);
  REQUIRE(ident.records.size() == 3);
  for (const auto& r : ident.records) {
    CHECK(r.mse == 0.0);
    CHECK(std::abs(r.ssim - 1.0) <= 1e-9);
    CHECK(std::abs(r.vif - 1.0) <= 1e-6);
    CHECK(!r.lpips.has_value());
  }

  // One-image set with a planted distortion equals the single-image operations.
  const Tensor distorted = quantize_8bit(clamp(add_scalar(truths[1], 0.05), 0.0, 1.0));
  save_png(res / "img1.png", distorted);
  EvalOptions partial;
  partial.allow_partial = true;
  const MetricsReport one = evaluate_set(res, gt, partial);
  REQUIRE(one.records.size() == 1);
  const Tensor p = scale(distorted, 255.0), t = scale(truths[1], 255.0);
  CHECK(one.records[0].id == "img1");
  CHECK(one.records[0].mse == mse(p, t));
  CHECK(one.records[0].ssim == ssim_metric(p, t, 255.0));
  CHECK(one.records[0].vif == vif(t, p));
  CHECK(one.records[0].ag == average_gradient(p));
  CHECK(one.mean.psnr == one.records[0].psnr);
  CHECK(one.unmatched == std::vector<std::string>{"img0.png", "img2.png"});

  try {
    evaluate_set(res, gt);
    FAIL("expected unmatched files to abort");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingInput);
    CHECK(std::string(e.what()).find("img0.png") != std::string::npos);
  }

  // Mean row is the arithmetic mean of the rows.
  save_png(res / "img0.png", quantize_8bit(clamp(add_scalar(truths[0], -0.1), 0.0, 1.0)));
  save_png(res / "img2.png", quantize_8bit(scale(truths[2], 0.9)));
  const MetricsReport full = evaluate_set(res, gt);
  double mse_sum = 0, ssim_sum = 0, ag_sum = 0;
  for (const auto& r : full.records) {
    mse_sum += r.mse;
    ssim_sum += r.ssim;
    ag_sum += r.ag;
    CHECK(std::abs(r.rmse * r.rmse - r.mse) <= 1e-9);
    CHECK(std::abs(r.psnr - 10 * std::log10(255.0 * 255.0 / r.mse)) <= 1e-9);
  }
  CHECK(std::abs(full.mean.mse - mse_sum / 3) <= 1e-12);
  CHECK(std::abs(full.mean.ssim - ssim_sum / 3) <= 1e-12);
  CHECK(std::abs(full.mean.ag - ag_sum / 3) <= 1e-12);

  const std::string table = report_to_table(full);
  const auto pos = [&](const char* h) { return table.find(h); };
  CHECK(pos("MSE") < pos("VIF"));
  CHECK(pos("VIF") < pos("SSIM"));
  CHECK(pos("SSIM") < pos("PSNR"));
  CHECK(pos("PSNR") < pos("LPIPS*"));
  CHECK(pos("LPIPS*") < pos("MAE"));
  CHECK(pos("MAE") < pos("RMSE"));
  CHECK(pos("RMSE") < pos("AG"));
  CHECK(table.find("[0,255]") != std::string::npos);

  const MetricsReport back = report_from_json(report_to_json(full));
  CHECK(back.records.size() == 3);
  CHECK(back.mean.mse == full.mean.mse);
  CHECK(back.pixel_range == 255.0);
  const MetricsReport inf_back = report_from_json(report_to_json(ident));
  CHECK(std::isinf(inf_back.records[0].psnr));
  CHECK_THROWS_AS(report_from_json("{\"schema_version\": 99}"), Error);
  CHECK_THROWS_AS(report_from_json("not json"), Error);

  EvalOptions unit;
  unit.range = 1.0;
  const MetricsReport unit_report = evaluate_set(res, gt, unit);
  CHECK(unit_report.records[0].mse == doctest::Approx(full.records[0].mse / (255.0 * 255.0)).epsilon(1e-12));
  CHECK(unit_report.records[0].psnr == doctest::Approx(full.records[0].psnr).epsilon(1e-12));
}

TEST_CASE("LPIPS plug-in") {
  TempDir tmp("tfsdiff_lpips_test");
  const auto script = tmp.path / "fake_lpips.sh";
  {
    std::ofstream out(script);
    out << "#!/bin/sh\n[ -f \"$1\" ] && [ -f \"$2\" ] && echo 0.125\n";
  }
  std::filesystem::permissions(script, std::filesystem::perms::owner_all);
  save_png(tmp.path / "gt" / "a.png", Tensor::full({1, 32, 32}, 0.5));
  save_png(tmp.path / "res" / "a.png", Tensor::full({1, 32, 32}, 0.25));
  EvalOptions opts;
  opts.lpips_command = script.string();
  const MetricsReport r = evaluate_set(tmp.path / "res", tmp.path / "gt", opts);
  REQUIRE(r.records[0].lpips.has_value());
  CHECK(*r.records[0].lpips == 0.125);
  CHECK(*r.mean.lpips == 0.125);
  CHECK(report_to_table(r).find("0.125") != std::string::npos);

  opts.lpips_command = "false";
  try {
    evaluate_set(tmp.path / "res", tmp.path / "gt", opts);
    FAIL("expected plug-in failure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kPlugin);
  }
}
