#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tfsdiff/pipeline.hpp"

namespace tfsdiff {

Adam::Adam(std::vector<Tensor> params, double learning_rate)
    : params_(std::move(params)), lr_(learning_rate) {
  require(learning_rate > 0.0, ErrorCode::kConfig, "learning rate must be > 0");
  for (const Tensor& p : params_) {
    state_.m.emplace_back(p.numel(), 0.0);
    state_.v.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++state_.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto g = params_[i].grad();
    if (g.empty()) continue;  // parameter did not take part in the loss
    auto w = params_[i].mutable_data();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Adam::set_state(AdamState state) {
  require(state.m.size() == params_.size() && state.v.size() == params_.size(), ErrorCode::kFormat,
          "optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    require(state.m[i].size() == params_[i].numel() && state.v[i].size() == params_[i].numel(),
            ErrorCode::kFormat, "optimizer state size mismatch at parameter " + std::to_string(i));
  }
  state_ = std::move(state);
}

// ---------------------------------------------------------------------------
// Checkpoint file: "TFSDCKPT", u32 version, then length-prefixed fields.
// Integers are u64 and doubles are raw IEEE-754, both little-endian.

namespace {

constexpr char kMagic[8] = {'T', 'F', 'S', 'D', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& d) {
    u64(d.size());
    raw(d.data(), d.size() * sizeof(double));
  }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::string bytes;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = count(1);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> d(count(sizeof(double)));
    raw(d.data(), d.size() * sizeof(double));
    return d;
  }
  void raw(void* p, std::size_t n) {
    require(pos_ + n <= bytes_.size(), ErrorCode::kFormat, "checkpoint is truncated");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::uint64_t count(std::size_t unit) {
    const std::uint64_t n = u64();
    require(n <= (bytes_.size() - pos_) / unit, ErrorCode::kFormat, "checkpoint field length is corrupt");
    return n;
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(Checkpoint::kVersion);
  w.str(c.config_text);
  w.u64(c.names.size());
  for (std::size_t i = 0; i < c.names.size(); ++i) {
    w.str(c.names[i]);
    w.u64(c.shapes[i].size());
    for (std::size_t d : c.shapes[i]) w.u64(d);
    w.doubles(c.values[i]);
  }
  w.u64(c.adam.step);
  w.u64(c.adam.m.size());
  for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
    w.doubles(c.adam.m[i]);
    w.doubles(c.adam.v[i]);
  }
  w.u64(c.step);
  w.str(c.rng_state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write checkpoint " + path.string());
  out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
  require(out.good(), ErrorCode::kIo, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot read checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  Reader r(buf.str());
  char magic[8];
  r.raw(magic, sizeof magic);
  require(std::memcmp(magic, kMagic, sizeof magic) == 0, ErrorCode::kFormat,
          path.string() + " is not a checkpoint");
  const std::uint32_t version = r.u32();
  require(version == Checkpoint::kVersion, ErrorCode::kFormat,
          "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_text = r.str();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    c.names.push_back(r.str());
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    c.shapes.push_back(shape);
    c.values.push_back(r.doubles());
  }
  c.adam.step = r.u64();
  const std::uint64_t na = r.u64();
  require(na == 0 || na == n, ErrorCode::kFormat, "optimizer state count mismatch");
  for (std::uint64_t i = 0; i < na; ++i) {
    c.adam.m.push_back(r.doubles());
    c.adam.v.push_back(r.doubles());
  }
  c.step = r.u64();
  c.rng_state = r.str();
  require(r.done(), ErrorCode::kFormat, "trailing bytes in checkpoint");
  return c;
}

Checkpoint make_checkpoint(const TrainConfig& config, const FusionNet& net, const Adam& adam,
                           std::uint64_t step, const Rng& rng) {
  Checkpoint c;
  c.config_text = serialize_config(config);
  for (const auto& p : net.parameters()) {
    c.names.push_back(p.name);
    c.shapes.push_back(p.value.shape());
    c.values.push_back(p.value.to_vector());
  }
  c.adam = adam.state();
  c.step = step;
  c.rng_state = rng.state();
  return c;
}

FusionNet restore_network(const Checkpoint& c) {
  const TrainConfig config = parse_config(c.config_text);
  FusionNet net(config.network(), config.seed);
  const auto& params = net.parameters();
  require(params.size() == c.names.size(), ErrorCode::kFormat,
          "checkpoint holds " + std::to_string(c.names.size()) + " tensors, network has " +
              std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].name == c.names[i] && params[i].value.shape() == c.shapes[i] &&
                c.values[i].size() == params[i].value.numel(),
            ErrorCode::kFormat, "checkpoint tensor " + c.names[i] + " does not match the network");
    Tensor t = params[i].value;
    std::copy(c.values[i].begin(), c.values[i].end(), t.mutable_data().begin());
  }
  return net;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Tensor> parameter_tensors(const FusionNet& net) {
  std::vector<Tensor> out;
  for (const auto& p : net.parameters()) out.push_back(p.value);
  return out;
}

std::string format_value(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<TriModalSample>& samples,
                  const TrainOptions& options) {
  config.validate();
  require(!samples.empty(), ErrorCode::kMissingInput, "no training samples");
  for (const auto& s : samples) {
    require(s.scale == config.scale, ErrorCode::kConfig,
            "sample " + s.id + " has scale " + std::to_string(s.scale) + ", config expects " +
                std::to_string(config.scale));
  }
  const NoiseSchedule schedule = config.schedule();
  const LossWeights weights = config.loss_weights();

  std::uint64_t step = 0;
  // The training stream is kept apart from the initialization stream.
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  FusionNet net(config.network(), config.seed);
  Adam adam(parameter_tensors(net), config.learning_rate);
  if (options.resume) {
    const Checkpoint& c = *options.resume;
    const TrainConfig saved = parse_config(c.config_text);
    std::vector<std::string> differing;
    for (const auto& key : config_diff(saved, config)) {
      if (key != "train_steps" && key != "checkpoint_every") differing.push_back(key);
    }
    std::string keys;
    for (const auto& k : differing) keys += (keys.empty() ? "" : ", ") + k;
    require(differing.empty(), ErrorCode::kConfig, "resume config differs from checkpoint: " + keys);
    net = restore_network(c);
    adam = Adam(parameter_tensors(net), config.learning_rate);
    adam.set_state(c.adam);
    rng.set_state(c.rng_state);
    step = c.step;
  }

  const std::uint64_t stop = options.stop_at ? options.stop_at : config.train_steps;
  TrainResult result{std::move(net), {}, {}};
  FusionNet& model = result.net;
  std::vector<std::size_t> indices(config.batch_size);
  while (step < stop) {
    for (auto& i : indices) i = static_cast<std::size_t>(rng.below(samples.size()));
    const TrainingBatch batch = prepare_batch(samples, indices);
    const Rng before = rng;
    adam.zero_grad();
    TrainingLoss loss;
    try {
      loss = training_loss(model, batch, schedule, weights, rng);
      const double total = loss.total.item();
      require(std::isfinite(total), ErrorCode::kNonFinite, "loss is not finite");
      loss.total.backward();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFinite) throw;
      // Replay the timestep draws so the diagnostics name the gammas involved.
      Rng replay = before;
      std::string gammas;
      for (std::size_t n = 0; n < indices.size(); ++n) {
        const std::size_t t = 1 + static_cast<std::size_t>(replay.below(schedule.steps()));
        gammas += (gammas.empty() ? "" : ",") + format_value(schedule.gamma(t));
      }
      fail(ErrorCode::kNonFinite,
           "training diverged at step " + std::to_string(step + 1) + " (gamma " + gammas +
               ", diffusion " + format_value(loss.diffusion) + ", psf " + format_value(loss.psf) +
               "): " + e.what());
    }
    adam.step();
    ++step;
    const LossRecord record{step, loss.total.item(), loss.diffusion, loss.psf};
    result.log.push_back(record);
    if (options.on_step) options.on_step(record);
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 &&
        !options.checkpoint_path.empty()) {
      save_checkpoint(options.checkpoint_path, make_checkpoint(config, model, adam, step, rng));
    }
  }
  result.final_checkpoint = make_checkpoint(config, model, adam, step, rng);
  if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, result.final_checkpoint);
  return result;
}

TrainResult train(const TrainConfig& config, const std::filesystem::path& dataset_dir,
                  const TrainOptions& options) {
  return train(config, load_split(dataset_dir, options.split, config.scale), options);
}

std::string format_loss_log(const std::vector<LossRecord>& log) {
  std::string out = "# step total diffusion psf\n";
  for (const auto& r : log) {
    out += std::to_string(r.step) + " " + format_value(r.total) + " " + format_value(r.diffusion) +
           " " + format_value(r.psf) + "\n";
  }
  return out;
}

}  // namespace tfsdiff
