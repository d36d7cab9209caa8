#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tfsdiff/image.hpp"
#include "tfsdiff/ops.hpp"
#include "tfsdiff/pipeline.hpp"

using namespace tfsdiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("tfsdiff_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kShape;
}

// Small enough to train a few steps in well under a second.
TrainConfig tiny_config() {
  TrainConfig c = config_profile("toy");
  c.widths = {4, 4, 4, 4};
  c.diffusion_steps = 10;
  c.beta_end = 0.2;
  c.batch_size = 2;
  c.train_steps = 6;
  c.seed = 3;
  return c;
}

std::vector<TriModalSample> tiny_samples(const fs::path& dir, std::size_t count = 2,
                                         std::size_t size = 16) {
  generate_synthetic_source(dir / "src", {count, size, 5});
  BuildOptions b;
  b.scales = {4};
  b.ratio = {1, 0, 0};
  build_dataset(dir / "src", dir / "ds", b);
  return load_split(dir / "ds", "train", 4);
}

}  // namespace

TEST_CASE("config profiles keep the published settings") {
  const TrainConfig paper = config_profile("paper");
  CHECK(paper.learning_rate == 1e-4);
  CHECK(paper.diffusion_steps == 4000);
  CHECK(paper.batch_size == 32);
  CHECK(paper.lambda1 == 0.5);
  CHECK(paper.lambda2 == 0.5);
  const TrainConfig toy = config_profile("toy");
  CHECK(toy.diffusion_steps == 50);
  CHECK(toy.widths == std::vector<std::size_t>{8, 16, 16, 16});
  CHECK(toy.learning_rate == 1e-4);
  CHECK(toy.train_steps == 2000);
  CHECK(code_of([] { config_profile("huge"); }) == ErrorCode::kConfig);
}

TEST_CASE("config text round trip and errors") {
  TrainConfig c = config_profile("toy");
  c.beta_end = 0.123456789012345;
  c.psf_enabled = false;
  c.seed = 18446744073709551615ULL;
  CHECK(parse_config(serialize_config(c)) == c);
  CHECK(serialize_config(parse_config(serialize_config(c))) == serialize_config(c));

  const TrainConfig p = parse_config("# comment\nprofile = toy\nlambda1 = 0.25  # trailing\n\nwidths = 4, 8,8,8\n");
  CHECK(p.lambda1 == 0.25);
  CHECK(p.widths == std::vector<std::size_t>{4, 8, 8, 8});
  CHECK(p.diffusion_steps == 50);
  CHECK(parse_config("").profile == "desk");

  CHECK(code_of([] { parse_config("colour = red"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_config("lambda1 = 1.5"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_config("lambda2 = 0"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_config("batch_size = four"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_config("scale = 3"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_config("just words"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_config("beta_start = 0.5\nbeta_end = 0.1"); }) == ErrorCode::kConfig);

  TrainConfig d = c;
  d.lambda2 = 0.75;
  CHECK(config_diff(c, d) == std::vector<std::string>{"lambda2"});
  CHECK(config_diff(c, c).empty());
}

TEST_CASE("ablation variants differ in exactly one field") {
  const auto variants = ablation_variants(config_profile("toy"));
  REQUIRE(variants.size() == 3);
  CHECK(config_diff(variants[0].second, variants[0].second).empty());
  CHECK(variants[1].first == "w/o TMFA");
  CHECK(config_diff(variants[0].second, variants[1].second) == std::vector<std::string>{"tmfa_enabled"});
  CHECK(variants[2].first == "w/o PSF");
  CHECK(config_diff(variants[0].second, variants[2].second) == std::vector<std::string>{"psf_enabled"});
}

TEST_CASE("split sizes") {
  const auto s = split_sizes(119, {});
  CHECK(s == std::array<std::size_t, 3>{84, 10, 25});
  for (std::size_t n = 0; n < 300; ++n) {
    const auto t = split_sizes(n, {});
    CHECK(t[0] + t[1] + t[2] == n);
    // Largest remainder keeps every part within one of its exact quota.
    CHECK(std::abs(static_cast<double>(t[0]) - n * 84.0 / 119.0) < 1.0);
    CHECK(std::abs(static_cast<double>(t[2]) - n * 25.0 / 119.0) < 1.0);
  }
  CHECK(split_sizes(5, {1, 1, 1}) == std::array<std::size_t, 3>{2, 2, 1});
  CHECK(code_of([] { split_sizes(3, {0, 0, 0}); }) == ErrorCode::kConfig);
}

TEST_CASE("build_dataset splits, sizes, determinism and idempotence") {
  TempDir tmp("build");
  generate_synthetic_source(tmp.path / "src", {119, 16, 2});
  BuildOptions opts;
  opts.seed = 42;
  const DatasetManifest m = build_dataset(tmp.path / "src", tmp.path / "a", opts);
  CHECK(m.train.size() == 84);
  CHECK(m.val.size() == 10);
  CHECK(m.test.size() == 25);
  std::set<std::string> all(m.train.begin(), m.train.end());
  all.insert(m.val.begin(), m.val.end());
  all.insert(m.test.begin(), m.test.end());
  CHECK(all.size() == 119);
  CHECK(m.rejected.empty());

  for (std::size_t s : {2, 4, 8}) {
    const Tensor x = load_png(tmp.path / "a" / ("x" + std::to_string(s)) / m.test[0] / "x.png");
    CHECK(x.shape() == Shape{1, 16 / s, 16 / s});
  }
  CHECK(load_png(tmp.path / "a" / "gt" / (m.train[0] + ".png")).shape() == Shape{3, 16, 16});

  const auto manifest_a = slurp(tmp.path / "a" / "manifest.json");
  build_dataset(tmp.path / "src", tmp.path / "b", opts);
  CHECK(slurp(tmp.path / "b" / "manifest.json") == manifest_a);

  // A different seed gives a different split of the same sizes.
  opts.seed = 43;
  const DatasetManifest other = build_dataset(tmp.path / "src", tmp.path / "c", opts);
  CHECK(other.train.size() == 84);
  CHECK(other.train != m.train);

  // Rebuilding in place leaves every file untouched.
  opts.seed = 42;
  std::map<fs::path, fs::file_time_type> stamps;
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "a")) {
    if (e.is_regular_file()) stamps[e.path()] = e.last_write_time();
  }
  build_dataset(tmp.path / "src", tmp.path / "a", opts);
  std::size_t seen = 0;
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "a")) {
    if (!e.is_regular_file()) continue;
    ++seen;
    CHECK(stamps.at(e.path()) == e.last_write_time());
  }
  CHECK(seen == stamps.size());
  CHECK(slurp(tmp.path / "a" / "manifest.json") == manifest_a);

  // Checksums match the source bytes.
  const auto& id = m.val[0];
  CHECK(m.checksums.at(id).at("gt.png") == file_checksum(tmp.path / "src" / id / "gt.png"));
}

TEST_CASE("build_dataset rejects incomplete samples and reports why") {
  TempDir tmp("reject");
  generate_synthetic_source(tmp.path / "src", {4, 16, 9});
  fs::remove(tmp.path / "src" / "case001" / "s.png");
  fs::remove(tmp.path / "src" / "case002" / "gt.png");
  BuildOptions opts;
  opts.ratio = {1, 0, 1};
  const DatasetManifest m = build_dataset(tmp.path / "src", tmp.path / "out", opts);
  REQUIRE(m.rejected.size() == 2);
  CHECK(m.rejected[0].first == "case001");
  CHECK(m.rejected[0].second.find("s.png") != std::string::npos);
  CHECK(m.rejected[1].first == "case002");
  CHECK(m.rejected[1].second.find("gt.png") != std::string::npos);
  CHECK(m.train.size() + m.val.size() + m.test.size() == 2);

  const DatasetManifest back = load_manifest(tmp.path / "out");
  CHECK(manifest_to_json(back) == manifest_to_json(m));
  CHECK(code_of([] { manifest_from_json("{\"schema_version\": 99}"); }) == ErrorCode::kFormat);
  CHECK(code_of([] { manifest_from_json("not json"); }) == ErrorCode::kFormat);
  CHECK(code_of([&] { load_split(tmp.path / "out", "train", 3); }) == ErrorCode::kMissingInput);
  CHECK(code_of([&] { load_split(tmp.path / "out", "holdout", 4); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("256 pixel ground truth at scale 8 gives 32 pixel inputs") {
  TempDir tmp("large");
  generate_synthetic_source(tmp.path / "src", {1, 256, 4});
  BuildOptions opts;
  opts.scales = {8};
  opts.ratio = {1, 0, 0};
  build_dataset(tmp.path / "src", tmp.path / "out", opts);
  const auto samples = load_split(tmp.path / "out", "train", 8);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].x.shape() == Shape{1, 32, 32});
  CHECK(samples[0].gt.shape() == Shape{3, 256, 256});
}

TEST_CASE("prepare_batch maps ground truth to [-1,1]") {
  TempDir tmp("batch");
  const auto samples = tiny_samples(tmp.path);
  const TrainingBatch b = prepare_batch(samples, {1, 0, 1});
  CHECK(b.modalities.shape() == Shape{3, 3, 16, 16});
  CHECK(b.target.shape() == Shape{3, 3, 16, 16});
  const auto gt = samples[1].gt.data();
  const auto t = b.target.data();
  for (std::size_t i = 0; i < gt.size(); ++i) CHECK(t[i] == doctest::Approx(2 * gt[i] - 1).epsilon(1e-15));
  for (const auto& sample : samples) {
    const std::size_t index = std::stoul(sample.id.substr(4));
    CHECK(sample.modality_config == modality_configs()[index % 5]);
  }
  CHECK(code_of([&] { prepare_batch(samples, {}); }) == ErrorCode::kInvalidArgument);
  auto broken = samples;
  broken[0].gt = Tensor();
  CHECK(code_of([&] { prepare_batch(broken, {0}); }) == ErrorCode::kMissingInput);
}

TEST_CASE("adam first step moves each weight by the learning rate") {
  Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  Adam adam({w}, 0.01);
  const Tensor target = Tensor::from_data({3}, {0.0, 0.0, 0.5});
  sum(square(sub(w, target))).backward();
  adam.step();
  // Bias-corrected m/sqrt(v) = g/|g| on the first step; a zero gradient stays put.
  CHECK(w.data()[0] == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(w.data()[1] == doctest::Approx(-1.99).epsilon(1e-9));
  CHECK(w.data()[2] == 0.5);

  // Second step by hand.
  const double w1 = w.data()[0];
  adam.zero_grad();
  sum(square(sub(w, target))).backward();
  const double g1 = 2.0, g2 = 2 * w1;
  const double m = 0.9 * 0.1 * g1 + 0.1 * g2, v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  adam.step();
  CHECK(w.data()[0] == doctest::Approx(w1 - 0.01 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("checkpoint save, load, save is byte identical") {
  TempDir tmp("ckpt");
  const auto samples = tiny_samples(tmp.path);
  TrainOptions opts;
  opts.checkpoint_path = tmp.path / "a.ckpt";
  const TrainResult r = train(tiny_config(), samples, opts);
  const Checkpoint loaded = load_checkpoint(tmp.path / "a.ckpt");
  save_checkpoint(tmp.path / "b.ckpt", loaded);
  CHECK(slurp(tmp.path / "a.ckpt") == slurp(tmp.path / "b.ckpt"));
  CHECK(loaded.step == 6);
  CHECK(loaded.adam.step == 6);
  CHECK(loaded.values == r.final_checkpoint.values);
  CHECK(loaded.adam.m == r.final_checkpoint.adam.m);
  CHECK(loaded.adam.v == r.final_checkpoint.adam.v);
  CHECK(loaded.rng_state == r.final_checkpoint.rng_state);
  CHECK(loaded.config_text == serialize_config(tiny_config()));

  const FusionNet net = restore_network(loaded);
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    CHECK(net.parameters()[i].value.to_vector() == loaded.values[i]);
  }

  std::string bytes = slurp(tmp.path / "a.ckpt");
  {
    std::ofstream out(tmp.path / "cut.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK(code_of([&] { load_checkpoint(tmp.path / "cut.ckpt"); }) == ErrorCode::kFormat);
  bytes[0] = 'X';
  {
    std::ofstream out(tmp.path / "bad.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK(code_of([&] { load_checkpoint(tmp.path / "bad.ckpt"); }) == ErrorCode::kFormat);
  CHECK(code_of([&] { load_checkpoint(tmp.path / "none.ckpt"); }) == ErrorCode::kIo);
}

TEST_CASE("training is deterministic and resume reproduces the loss log") {
  TempDir tmp("resume");
  const auto samples = tiny_samples(tmp.path, 3);
  const TrainConfig c = tiny_config();
  const TrainResult full = train(c, samples);
  REQUIRE(full.log.size() == 6);
  CHECK(format_loss_log(train(c, samples).log) == format_loss_log(full.log));

  TrainOptions first;
  first.stop_at = 2;
  const TrainResult part = train(c, samples, first);
  CHECK(part.log.size() == 2);
  TrainOptions second;
  second.resume = part.final_checkpoint;
  const TrainResult rest = train(c, samples, second);
  REQUIRE(rest.log.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(rest.log[i].step == full.log[i + 2].step);
    CHECK(rest.log[i].total == full.log[i + 2].total);
    CHECK(rest.log[i].diffusion == full.log[i + 2].diffusion);
    CHECK(rest.log[i].psf == full.log[i + 2].psf);
  }
  CHECK(rest.final_checkpoint.values == full.final_checkpoint.values);

  TrainConfig changed = c;
  changed.lambda1 = 0.9;
  CHECK(code_of([&] { train(changed, samples, second); }) == ErrorCode::kConfig);
}

TEST_CASE("training errors") {
  TempDir tmp("trainerr");
  const auto samples = tiny_samples(tmp.path);
  CHECK(code_of([&] { train(tiny_config(), std::vector<TriModalSample>{}); }) == ErrorCode::kMissingInput);
  TrainConfig wrong_scale = tiny_config();
  wrong_scale.scale = 2;
  CHECK(code_of([&] { train(wrong_scale, samples); }) == ErrorCode::kConfig);

  // An absurd learning rate drives the weights to infinity.
  TrainConfig blowup = tiny_config();
  blowup.learning_rate = 1e300;
  blowup.train_steps = 50;
  try {
    train(blowup, samples);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNonFinite);
    const std::string what = e.what();
    CHECK(what.find("step") != std::string::npos);
    CHECK(what.find("gamma") != std::string::npos);
    CHECK(what.find("diffusion") != std::string::npos);
    CHECK(what.find("psf") != std::string::npos);
  }
}

TEST_CASE("fuse determinism, output size and size hints") {
  TempDir tmp("fuse");
  const auto samples = tiny_samples(tmp.path);
  TrainOptions opts;
  opts.checkpoint_path = tmp.path / "m.ckpt";
  train(tiny_config(), samples, opts);
  const fs::path in = tmp.path / "ds" / "x4" / samples[0].id;
  FuseOptions fo;
  fo.seed = 11;
  std::size_t steps = 0;
  fo.on_step = [&](std::size_t, double seconds) {
    ++steps;
    CHECK(seconds >= 0.0);
  };
  fuse_files(opts.checkpoint_path, in / "x.png", in / "y.png", in / "s.png", tmp.path / "a.png", fo);
  CHECK(steps == 10);
  fuse_files(opts.checkpoint_path, in / "x.png", in / "y.png", in / "s.png", tmp.path / "b.png", fo);
  CHECK(slurp(tmp.path / "a.png") == slurp(tmp.path / "b.png"));
  fo.seed = 12;
  fuse_files(opts.checkpoint_path, in / "x.png", in / "y.png", in / "s.png", tmp.path / "c.png", fo);
  CHECK(slurp(tmp.path / "a.png") != slurp(tmp.path / "c.png"));
  CHECK(load_png(tmp.path / "a.png").shape() == Shape{3, 16, 16});

  const Checkpoint c = load_checkpoint(opts.checkpoint_path);
  const FusionNet net = restore_network(c);
  const Tensor odd = Tensor::full({1, 3, 3}, 0.5);
  try {
    fuse_images(net, tiny_config(), odd, odd, odd);
    FAIL("expected a size error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
    CHECK(std::string(e.what()).find("multiple of 2") != std::string::npos);
  }
  CHECK(code_of([&] {
          fuse_files(opts.checkpoint_path, in / "x.png", in / "y.png", in / "missing.png",
                     tmp.path / "d.png", {});
        }) == ErrorCode::kMissingInput);
}

TEST_CASE("evaluate_samples scores against quantized ground truth") {
  TempDir tmp("evalsamples");
  const auto samples = tiny_samples(tmp.path, 2, 32);
  TrainConfig c = tiny_config();
  const TrainResult r = train(c, samples);
  const MetricsReport rep = evaluate_samples(r.net, c, samples, 0, tmp.path / "out");
  REQUIRE(rep.records.size() == 2);
  CHECK(rep.pixel_range == 255.0);
  CHECK(rep.config == serialize_config(c));
  CHECK(fs::exists(tmp.path / "out" / (samples[0].id + ".png")));
  // The saved images rescore to the same numbers through the directory path.
  const MetricsReport again = evaluate_set(tmp.path / "out", tmp.path / "ds" / "gt", {});
  CHECK(again.records.size() == 2);
  for (const auto& rec : rep.records) {
    const auto it = std::find_if(again.records.begin(), again.records.end(),
                                 [&](const MetricsRecord& o) { return o.id == rec.id; });
    REQUIRE(it != again.records.end());
    CHECK(it->mse == doctest::Approx(rec.mse).epsilon(1e-12));
    CHECK(it->ssim == doctest::Approx(rec.ssim).epsilon(1e-12));
  }
}
