#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "tfsdiff/error.hpp"
#include "tfsdiff/network.hpp"
#include "tfsdiff/objectives.hpp"

using namespace tfsdiff;
using tfsdiff::testing::check_gradients;
using tfsdiff::testing::random_tensor;

TEST_CASE("mse examples and gradient") {
  CHECK(mse_loss(Tensor::from_data({2}, {0, 0}), Tensor::from_data({2}, {1, 3})).item() == 5.0);
  std::mt19937_64 gen(1);
  const Tensor p = random_tensor({3, 4}, gen), t = random_tensor({3, 4}, gen, -1, 1, false);
  CHECK(mse_loss(p, p).item() == 0.0);
  mse_loss(p, t).backward();
  for (std::size_t i = 0; i < p.numel(); ++i) {
    CHECK(p.grad()[i] == doctest::Approx(2.0 * (p.data()[i] - t.data()[i]) / 12.0).epsilon(1e-12));
  }
  const auto r = check_gradients([&] { return mse_loss(p, t); }, {p});
  CHECK(r.max_error <= 1e-4);
  CHECK_THROWS_AS(mse_loss(p, Tensor::zeros({4, 3})), Error);
}

TEST_CASE("ssim examples") {
  std::mt19937_64 gen(2);
  const Tensor p = random_tensor({2, 16, 14}, gen, 0, 1, false);
  CHECK(std::abs(ssim_index(p, p, 1.0).item() - 1.0) <= 1e-9);
  const double closed = 1e-4 / (1.0 + 1e-4);
  const double v = ssim_index(Tensor::zeros({1, 11, 11}), Tensor::full({1, 11, 11}, 1.0), 1.0).item();
  CHECK(std::abs(v - closed) <= 1e-12);
  CHECK(v == doctest::Approx(9.999e-5).epsilon(1e-4));
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({1, 12, 13}, gen, -1, 1, false), b = random_tensor({1, 12, 13}, gen, -1, 1, false);
    CHECK(std::abs(ssim_index(a, b, 2.0).item() - ssim_index(b, a, 2.0).item()) <= 1e-12);
  }
  CHECK_THROWS_AS(ssim_index(Tensor::zeros({10, 10}), Tensor::zeros({10, 10}), 1.0), Error);
  CHECK_THROWS_AS(ssim_index(Tensor::zeros({11, 11}), Tensor::zeros({11, 12}), 1.0), Error);
}

TEST_CASE("gaussian window") {
  const auto w = gaussian_window({});
  double total = 0;
  for (double v : w) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w[5 * 11 + 5] > w[5 * 11 + 6]);
  CHECK(w[0] == doctest::Approx(w[120]).epsilon(1e-15));
  // Ratio between neighbours follows exp(-d^2 / (2 sigma^2)).
  CHECK(w[5 * 11 + 6] / w[5 * 11 + 5] == doctest::Approx(std::exp(-1.0 / 4.5)).epsilon(1e-12));
}

TEST_CASE("psf loss examples") {
  LossWeights unit{1.0, 1.0};
  const double v = psf_loss(Tensor::zeros({1, 11, 11}), Tensor::full({1, 11, 11}, 1.0), unit, 1.0).item();
  CHECK(v == doctest::Approx(1.0 + 1.0 - 1e-4 / (1.0 + 1e-4)).epsilon(1e-12));
  CHECK(v == doctest::Approx(1.9999).epsilon(1e-5));
  std::mt19937_64 gen(3);
  const Tensor p = random_tensor({3, 12, 12}, gen, -1, 1, false);
  CHECK(std::abs(psf_loss(p, p, LossWeights{}).item()) <= 1e-9);
}

TEST_CASE("psf loss grows with small pixelwise error") {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 40; ++trial) {
    const Tensor t = random_tensor({1, 12, 12}, gen, -0.5, 0.5, false);
    const Tensor dir = random_tensor({1, 12, 12}, gen, -1, 1, false);
    const LossWeights w{0.2 + 0.8 * (trial % 5) / 4.0, 1.0 - 0.8 * (trial % 3) / 2.0};
    double previous = -1.0;
    for (double k = 0.0; k <= 0.25; k += 0.01) {
      const double l = psf_loss(add(t, scale(dir, k)), t, w).item();
      REQUIRE(l >= previous - 1e-12);
      previous = l;
    }
  }
}

TEST_CASE("psf loss is not monotone along every large error ray") {
  // The structural term can fall faster than the MSE term rises once the
  // error swamps the pattern, so monotonicity only holds for small errors.
  std::mt19937_64 gen(4);
  bool witnessed = false;
  for (int trial = 0; trial < 200 && !witnessed; ++trial) {
    const Tensor t = random_tensor({1, 12, 12}, gen, -0.5, 0.5, false);
    const Tensor dir = random_tensor({1, 12, 12}, gen, -1, 1, false);
    double previous = -1.0;
    for (double k = 0.0; k <= 2.0; k += 0.05) {
      const double l = psf_loss(add(t, scale(dir, k)), t, LossWeights{0.2, 1.0}).item();
      witnessed |= l < previous;
      previous = l;
    }
  }
  CHECK(witnessed);
}

TEST_CASE("loss weights validation") {
  CHECK_NOTHROW(LossWeights{}.validate());
  CHECK_THROWS_AS((LossWeights{0.0, 0.5}.validate()), Error);
  CHECK_THROWS_AS((LossWeights{0.5, 1.5}.validate()), Error);
  try {
    LossWeights{-1.0, 0.5}.validate();
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
  }
}

namespace {

class OracleDenoiser : public NoisePredictor {
 public:
  explicit OracleDenoiser(Tensor clean) : clean_(std::move(clean)) {}
  Tensor condition(const Tensor& m) const override { return m; }
  Tensor predict_noise(const Tensor&, const Tensor& noisy, std::span<const double> gamma) const override {
    const std::size_t per = noisy.numel() / gamma.size();
    std::vector<double> eps(noisy.numel());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const double g = gamma[i / per];
      eps[i] = (noisy.data()[i] - std::sqrt(g) * clean_.data()[i]) / std::sqrt(1.0 - g);
    }
    return Tensor::from_data(noisy.shape(), eps);
  }

 private:
  Tensor clean_;
};

NetworkConfig tiny() {
  NetworkConfig c;
  c.widths = {4, 4, 4, 4};
  return c;
}

}  // namespace

TEST_CASE("training loss without PSF equals the diffusion objective bit for bit") {
  const FusionNet net(tiny(), 3);
  std::mt19937_64 gen(5);
  const TrainingBatch batch{random_tensor({2, 3, 16, 16}, gen, -1, 1, false),
                            random_tensor({2, 3, 16, 16}, gen, -1, 1, false)};
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.3);
  LossWeights off;
  off.psf_enabled = false;
  Rng a(77), b(77);
  const TrainingLoss l = training_loss(net, batch, s, off, a);
  const double direct = tfs_objective(net, batch, s, b).item();
  CHECK(l.total.item() == direct);
  CHECK(l.psf == 0.0);
  CHECK(a.state() == b.state());
}

TEST_CASE("oracle denoiser gives zero total loss") {
  std::mt19937_64 gen(6);
  const TrainingBatch batch{random_tensor({2, 3, 12, 12}, gen, -1, 1, false),
                            random_tensor({2, 3, 12, 12}, gen, -0.9, 0.9, false)};
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.3);
  const OracleDenoiser oracle(batch.target);
  Rng rng(1);
  const TrainingLoss l = training_loss(oracle, batch, s, LossWeights{}, rng);
  CHECK(std::abs(l.total.item()) <= 1e-9);
}

TEST_CASE("composite gradient on 16x16") {
  FusionNet net(tiny(), 8);
  std::mt19937_64 gen(9);
  for (const auto& p : net.parameters()) {
    Tensor t = p.value;
    if (p.name.find("head") != std::string::npos) {
      for (double& v : t.mutable_data()) v = std::uniform_real_distribution<double>(-0.2, 0.2)(gen);
    }
  }
  const TrainingBatch batch{random_tensor({1, 3, 16, 16}, gen, -1, 1),
                            random_tensor({1, 3, 16, 16}, gen, -0.8, 0.8, false)};
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.3);
  auto loss = [&] {
    Rng rng(31);
    return training_loss(net, batch, s, LossWeights{}, rng).total;
  };
  std::vector<Tensor> inputs{batch.modalities};
  for (const auto& p : net.parameters()) inputs.push_back(p.value);
  const auto r = check_gradients(loss, inputs, 1e-5, 4);
  MESSAGE("checked " << r.checked << " coordinates, max rel err " << r.max_error);
  CHECK(r.max_error <= 1e-3);
}
