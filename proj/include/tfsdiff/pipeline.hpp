#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tfsdiff/diffusion.hpp"
#include "tfsdiff/metrics.hpp"
#include "tfsdiff/network.hpp"
#include "tfsdiff/objectives.hpp"

namespace tfsdiff {

// ---------------------------------------------------------------------------
// Configuration

/// Training/sampling configuration. Field defaults are the published
/// settings; the desk and toy profiles override the scale-dependent ones.
struct TrainConfig {
  std::string profile = "paper";
  std::size_t diffusion_steps = 4000;
  double beta_start = 1e-6;
  double beta_end = 1e-2;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  bool psf_enabled = true;
  bool tmfa_enabled = true;
  double diffusion_weight = 1.0;
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t train_steps = 800000;
  std::uint64_t seed = 0;
  std::vector<std::size_t> widths{16, 32, 64, 64};
  std::size_t reduction = 16;
  /// gamma_t multiplier ahead of the sinusoidal noise-level embedding.
  double embed_scale = 1000.0;
  std::size_t scale = 4;
  /// Split used by `ablate` for evaluation.
  std::string eval_split = "test";
  /// 0 disables periodic checkpoints.
  std::size_t checkpoint_every = 0;

  NetworkConfig network() const;
  LossWeights loss_weights() const;
  NoiseSchedule schedule() const;
  /// Throws kConfig on out-of-range values.
  void validate() const;
};

/// Named presets: "paper" (the field defaults), "desk" and "toy" (T=50,
/// batch 4, 2000 steps, sized for 32x32 targets).
TrainConfig config_profile(const std::string& name);
/// Parses key=value text (one `key = value` per line, `#` comments) on top
/// of the profile named by its `profile` key (default "desk"). Unknown keys
/// are rejected.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
/// Canonical key=value text; parse_config(serialize_config(c)) == c.
std::string serialize_config(const TrainConfig& config);
/// Applies one `key=value` override.
void apply_config_override(TrainConfig& config, const std::string& key, const std::string& value);
bool operator==(const TrainConfig& a, const TrainConfig& b);
/// Every config key, in canonical order.
std::vector<std::string> config_keys();
/// Keys whose values differ.
std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b);

// ---------------------------------------------------------------------------
// Data

/// The five registered source triplets; the order of names is (x, y, s).
const std::vector<std::string>& modality_configs();

struct TriModalSample {
  std::string id;
  Tensor x, y, s;  // [1,h,w] in [0,1]
  Tensor gt;       // [3,h*scale,w*scale] in [0,1]
  std::size_t scale = 4;
  std::string modality_config;
};

/// Network-ready batch of samples in the given order.
TrainingBatch prepare_batch(const std::vector<TriModalSample>& samples,
                            const std::vector<std::size_t>& indices);

struct SyntheticOptions {
  std::size_t count = 4;
  std::size_t size = 32;
  std::uint64_t seed = 1;
};

/// Writes smooth synthetic modality phantoms and a stand-in ground truth
/// (per-pixel max of the three modalities in all three channels) as
/// src/<id>/{x,y,s,gt}.png plus modality.txt. Test data only.
std::vector<std::string> generate_synthetic_source(const std::filesystem::path& dir,
                                                   const SyntheticOptions& options);

struct SplitRatio {
  std::size_t train = 84, val = 10, test = 25;
};

/// Largest-remainder apportionment of n samples to the ratio.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatio& ratio);

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;
  std::uint64_t seed = 0;
  SplitRatio ratio;
  std::vector<std::size_t> scales;
  std::vector<std::string> train, val, test;
  /// id -> file name -> FNV-1a 64 hex digest of the source bytes.
  std::map<std::string, std::map<std::string, std::string>> checksums;
  std::map<std::string, std::string> modality;
  std::map<std::string, std::array<std::size_t, 2>> gt_size;
  /// Rejected sample ids with the reason.
  std::vector<std::pair<std::string, std::string>> rejected;

  const std::vector<std::string>& split(const std::string& name) const;
};

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);
DatasetManifest load_manifest(const std::filesystem::path& dataset_dir);

struct BuildOptions {
  std::vector<std::size_t> scales{2, 4, 8};
  SplitRatio ratio;
  std::uint64_t seed = 0;
};

/// Downsamples every complete source sample at each scale into
/// out/x<scale>/<id>/{x,y,s}.png, copies ground truth to out/gt/<id>.png and
/// writes out/manifest.json. Files whose bytes would not change are left
/// untouched.
DatasetManifest build_dataset(const std::filesystem::path& src, const std::filesystem::path& out,
                              const BuildOptions& options);

/// Loads the named split at one scale from a built dataset.
std::vector<TriModalSample> load_split(const std::filesystem::path& dataset_dir,
                                       const std::string& split, std::size_t scale);

/// FNV-1a 64 digest of a file, as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Optimization and persistence

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double learning_rate);
  void step();
  void zero_grad();
  const AdamState& state() const { return state_; }
  void set_state(AdamState state);

 private:
  std::vector<Tensor> params_;
  double lr_;
  AdamState state_;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_text;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;
  AdamState adam;
  std::uint64_t step = 0;
  std::string rng_state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of a network's parameters, optimizer and rng.
Checkpoint make_checkpoint(const TrainConfig& config, const FusionNet& net, const Adam& adam,
                           std::uint64_t step, const Rng& rng);
/// Rebuilds the network described by a checkpoint and loads its values.
FusionNet restore_network(const Checkpoint& checkpoint);

// ---------------------------------------------------------------------------
// Training

struct LossRecord {
  std::uint64_t step = 0;
  double total = 0.0, diffusion = 0.0, psf = 0.0;
};

struct TrainOptions {
  std::string split = "train";
  /// Periodic checkpoints go here when config.checkpoint_every > 0; the final
  /// checkpoint is always written when non-empty.
  std::filesystem::path checkpoint_path;
  std::optional<Checkpoint> resume;
  /// Stop after this many optimizer steps in total (0: config.train_steps).
  std::uint64_t stop_at = 0;
  std::function<void(const LossRecord&)> on_step;
};

struct TrainResult {
  FusionNet net;
  Checkpoint final_checkpoint;
  std::vector<LossRecord> log;
};

TrainResult train(const TrainConfig& config, const std::vector<TriModalSample>& samples,
                  const TrainOptions& options = {});
TrainResult train(const TrainConfig& config, const std::filesystem::path& dataset_dir,
                  const TrainOptions& options = {});

/// One line per record: step total diffusion psf (round-trip precision).
std::string format_loss_log(const std::vector<LossRecord>& log);

// ---------------------------------------------------------------------------
// Inference and studies

struct FuseOptions {
  std::uint64_t seed = 0;
  /// Receives (step, seconds spent on it).
  std::function<void(std::size_t, double)> on_step;
};

/// Samples a fusion for one low-resolution triple with a trained network.
Tensor fuse_images(const FusionNet& net, const TrainConfig& config, const Tensor& x,
                   const Tensor& y, const Tensor& s, const FuseOptions& options = {});

/// File form: loads the checkpoint and inputs, writes an 8-bit RGB PNG.
void fuse_files(const std::filesystem::path& checkpoint, const std::filesystem::path& x,
                const std::filesystem::path& y, const std::filesystem::path& s,
                const std::filesystem::path& output, const FuseOptions& options = {});

/// Fuses every sample of a list and scores the results against ground truth
/// (8-bit quantized, range 255).
MetricsReport evaluate_samples(const FusionNet& net, const TrainConfig& config,
                               const std::vector<TriModalSample>& samples, std::uint64_t seed,
                               const std::filesystem::path& save_dir = {});

struct AblationRun {
  std::string name;
  TrainConfig config;
  MetricsReport report;
  std::vector<LossRecord> log;
};

/// The baseline and the two single-switch variants: "w/o TMFA", "w/o PSF".
std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base);

struct AblationResult {
  std::vector<AblationRun> runs;  // baseline first
  std::string summary_json;
  std::string summary_table;
};

AblationResult ablate(const TrainConfig& base, const std::vector<TriModalSample>& train_samples,
                      const std::vector<TriModalSample>& eval_samples);

}  // namespace tfsdiff
