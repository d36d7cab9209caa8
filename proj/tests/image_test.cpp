#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "tfsdiff/error.hpp"
#include "tfsdiff/image.hpp"

using namespace tfsdiff;
using tfsdiff::testing::random_tensor;

TEST_CASE("cubic tap weights") {
  const auto w = cubic_tap_weights(0.5);
  CHECK(w[0] == doctest::Approx(-0.0625).epsilon(1e-15));
  CHECK(w[1] == doctest::Approx(0.5625).epsilon(1e-15));
  CHECK(w[2] == doctest::Approx(0.5625).epsilon(1e-15));
  CHECK(w[3] == doctest::Approx(-0.0625).epsilon(1e-15));
  const auto z = cubic_tap_weights(0.0);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 1.0);
  CHECK(z[2] == 0.0);
  CHECK(z[3] == 0.0);
  for (double f = 0.0; f < 1.0; f += 0.05) {
    const auto t = cubic_tap_weights(f);
    CHECK(t[0] + t[1] + t[2] + t[3] == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(cubic_kernel(2.0) == 0.0);
  CHECK(cubic_kernel(1.0) == 0.0);
}

TEST_CASE("bicubic identity and constant invariance") {
  std::mt19937_64 gen(1);
  const Tensor img = random_tensor({3, 9, 7}, gen, 0, 1, false);
  const Tensor same = bicubic_resample(img, 9, 7);
  for (std::size_t i = 0; i < img.numel(); ++i) REQUIRE(std::abs(same.data()[i] - img.data()[i]) <= 1e-12);
  const Tensor flat = Tensor::full({1, 32, 32}, 0.37);
  for (std::size_t size : {4u, 8u, 16u, 64u, 128u, 256u}) {
    const Tensor r = bicubic_resample(flat, size, size);
    for (double v : r.data()) REQUIRE(std::abs(v - 0.37) <= 1e-12);
  }
  const Tensor noaa = bicubic_resample(flat, 4, 4, {false, true});
  for (double v : noaa.data()) CHECK(std::abs(v - 0.37) <= 1e-12);
}

TEST_CASE("bicubic output stays in the unit range") {
  Tensor step = Tensor::zeros({1, 4, 8});
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 4; x < 8; ++x) step.mutable_data()[y * 8 + x] = 1.0;
  }
  const Tensor up = bicubic_resample(step, 16, 32);
  for (double v : up.data()) CHECK((v >= 0.0 && v <= 1.0));
  const Tensor raw = bicubic_resample(step, 16, 32, {true, false});
  double lo = 1, hi = 0;
  for (double v : raw.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo < 0.0);  // Catmull-Rom overshoots at a step edge
  CHECK(hi > 1.0);
}

TEST_CASE("bicubic doubling interpolates midpoints") {
  // A linear ramp is reproduced exactly away from the clamped borders.
  Tensor ramp = Tensor::zeros({1, 1, 8});
  for (std::size_t x = 0; x < 8; ++x) ramp.mutable_data()[x] = 0.1 * static_cast<double>(x);
  const Tensor up = bicubic_resample(ramp, 1, 16, {true, false});
  // Output centre j maps to input coordinate (j + 0.5) / 2 - 0.5.
  for (std::size_t j = 4; j < 12; ++j) {
    const double u = (static_cast<double>(j) + 0.5) / 2.0 - 0.5;
    CHECK(up.data()[j] == doctest::Approx(0.1 * u).epsilon(1e-12));
  }
}

TEST_CASE("png round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "tfsdiff_image_test";
  std::filesystem::remove_all(dir);
  std::mt19937_64 gen(2);
  const Tensor rgb = quantize_8bit(random_tensor({3, 5, 6}, gen, 0, 1, false));
  save_png(dir / "nested" / "rgb.png", rgb);
  const Tensor back = load_png(dir / "nested" / "rgb.png");
  CHECK(back.shape() == rgb.shape());
  for (std::size_t i = 0; i < rgb.numel(); ++i) CHECK(back.data()[i] == rgb.data()[i]);
  const Tensor gray = quantize_8bit(random_tensor({1, 4, 3}, gen, 0, 1, false));
  save_png(dir / "g.png", gray);
  CHECK(load_png(dir / "g.png").to_vector() == gray.to_vector());
  CHECK_THROWS_AS(load_png(dir / "missing.png"), Error);
  CHECK_THROWS_AS(save_png(dir / "bad.png", Tensor::zeros({2, 3, 3})), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("luminance and channel replication") {
  const Tensor rgb = Tensor::from_data({3, 1, 1}, {1.0, 0.0, 0.0});
  CHECK(to_luminance(rgb).item() == doctest::Approx(0.299));
  const Tensor g = Tensor::full({1, 2, 2}, 0.4);
  CHECK(to_rgb(g).shape() == Shape{3, 2, 2});
  CHECK(to_luminance(g).to_vector() == g.to_vector());
  CHECK(quantize_8bit(Tensor::full({1}, 0.5)).item() == 128.0 / 255.0);
}
