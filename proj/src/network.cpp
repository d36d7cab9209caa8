#include "tfsdiff/network.hpp"

#include <cmath>
#include <numeric>

namespace tfsdiff {

Tensor concat_modalities(const Tensor& x, const Tensor& y, const Tensor& s) {
  for (const Tensor* m : {&x, &y, &s}) {
    require(m->defined() && m->rank() == 3 && m->dim(0) == 1, ErrorCode::kShape,
            "concat_modalities: each modality must be [1,H,W]");
  }
  require(x.shape() == y.shape() && x.shape() == s.shape(), ErrorCode::kShape,
          "concat_modalities: mismatched sizes " + shape_str(x.shape()) + ", " +
              shape_str(y.shape()) + ", " + shape_str(s.shape()));
  return concat({x, y, s}, 0);
}

std::array<Tensor, 3> split_modalities(const Tensor& stacked) {
  require(stacked.rank() == 3 && stacked.dim(0) == 3, ErrorCode::kShape,
          "split_modalities: expected [3,H,W], got " + shape_str(stacked.shape()));
  return {slice(stacked, 0, 0, 1), slice(stacked, 0, 1, 2), slice(stacked, 0, 2, 3)};
}

TmfaBlock::TmfaBlock(std::size_t channels, std::size_t reduction, Rng& rng)
    : channels_(channels), hidden_(0) {
  require(channels >= 1 && reduction >= 1, ErrorCode::kInvalidArgument,
          "TMFA: channels and reduction must be positive");
  hidden_ = (channels + reduction - 1) / reduction;
  fc1_weight = kaiming_init({hidden_, channels_}, channels_, rng);
  fc1_bias = Tensor::zeros({hidden_}, true);
  fc2_weight = kaiming_init({channels_, hidden_}, hidden_, rng);
  fc2_bias = Tensor::zeros({channels_}, true);
}

Tensor TmfaBlock::attention_weights(const Tensor& input) const {
  require(input.rank() == 4 && input.dim(1) == channels_, ErrorCode::kShape,
          "TMFA: expected [N," + std::to_string(channels_) + ",H,W], got " +
              shape_str(input.shape()));
  Tensor squeezed = global_avg_pool(input);
  return sigmoid(dense(relu(dense(squeezed, fc1_weight, fc1_bias)), fc2_weight, fc2_bias));
}

Tensor TmfaBlock::forward(const Tensor& input) const {
  return mul_channelwise(input, attention_weights(input));
}

std::vector<NamedParameter> TmfaBlock::parameters() const {
  return {{"tmfa.fc1.weight", fc1_weight},
          {"tmfa.fc1.bias", fc1_bias},
          {"tmfa.fc2.weight", fc2_weight},
          {"tmfa.fc2.bias", fc2_bias}};
}

std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Tensor gamma_embedding(std::span<const double> gamma, std::size_t dim, double scale) {
  require(dim >= 2 && dim % 2 == 0, ErrorCode::kInvalidArgument,
          "gamma embedding dimension must be even and >= 2");
  const std::size_t half = dim / 2;
  std::vector<double> out(gamma.size() * dim);
  for (std::size_t n = 0; n < gamma.size(); ++n) {
    const double level = scale * gamma[n];
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                   static_cast<double>(half));
      out[n * dim + k] = std::sin(level * freq);
      out[n * dim + half + k] = std::cos(level * freq);
    }
  }
  return Tensor::from_data({gamma.size(), dim}, std::move(out));
}

namespace {

class Registry {
 public:
  explicit Registry(Rng& rng) : rng_(rng) {}

  Tensor kaiming(const std::string& name, Shape shape, std::size_t fan_in) {
    return add(name, kaiming_init(shape, fan_in, rng_));
  }
  Tensor constant(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::full(std::move(shape), value, true));
  }
  Tensor add(const std::string& name, Tensor t) {
    params_.push_back({name, t});
    return t;
  }
  std::vector<NamedParameter>& params() { return params_; }

 private:
  Rng& rng_;
  std::vector<NamedParameter> params_;
};

struct Conv {
  Tensor weight, bias;
  std::size_t stride = 1, pad = 1;

  static Conv make(Registry& reg, const std::string& name, std::size_t in, std::size_t out,
                   std::size_t k, std::size_t stride = 1) {
    Conv c;
    c.weight = reg.kaiming(name + ".weight", {out, in, k, k}, in * k * k);
    c.bias = reg.constant(name + ".bias", {out}, 0.0);
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct Norm {
  Tensor gamma, beta;
  std::size_t groups = 1;

  static Norm make(Registry& reg, const std::string& name, std::size_t channels) {
    return {reg.constant(name + ".gamma", {channels}, 1.0),
            reg.constant(name + ".beta", {channels}, 0.0), norm_groups(channels)};
  }
  Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};

struct Dense {
  Tensor weight, bias;

  static Dense make(Registry& reg, const std::string& name, std::size_t in, std::size_t out) {
    return {reg.kaiming(name + ".weight", {out, in}, in), reg.constant(name + ".bias", {out}, 0.0)};
  }
  Tensor operator()(const Tensor& x) const { return dense(x, weight, bias); }
};

// conv -> GN -> (+gamma embedding) -> swish -> conv -> GN -> swish, plus skip.
struct ResBlock {
  Conv conv1, conv2;
  Norm norm1, norm2;
  Dense embed;
  bool has_skip = false;
  Conv skip;

  static ResBlock make(Registry& reg, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t embed_dim) {
    ResBlock b;
    b.conv1 = Conv::make(reg, name + ".conv1", in, out, 3);
    b.norm1 = Norm::make(reg, name + ".norm1", out);
    b.embed = Dense::make(reg, name + ".embed", embed_dim, out);
    b.conv2 = Conv::make(reg, name + ".conv2", out, out, 3);
    b.norm2 = Norm::make(reg, name + ".norm2", out);
    if (in != out) {
      b.has_skip = true;
      b.skip = Conv::make(reg, name + ".skip", in, out, 1);
    }
    return b;
  }

  Tensor operator()(const Tensor& x, const Tensor& emb) const {
    Tensor h = swish(add_channelwise(norm1(conv1(x)), embed(emb)));
    h = swish(norm2(conv2(h)));
    return add(h, has_skip ? skip(x) : x);
  }
};

struct Attention {
  AttentionParams p;

  static Attention make(Registry& reg, const std::string& name, std::size_t c) {
    Attention a;
    a.p.q_weight = reg.kaiming(name + ".q.weight", {c, c}, c);
    a.p.q_bias = reg.constant(name + ".q.bias", {c}, 0.0);
    a.p.k_weight = reg.kaiming(name + ".k.weight", {c, c}, c);
    a.p.k_bias = reg.constant(name + ".k.bias", {c}, 0.0);
    a.p.v_weight = reg.kaiming(name + ".v.weight", {c, c}, c);
    a.p.v_bias = reg.constant(name + ".v.bias", {c}, 0.0);
    a.p.out_weight = reg.kaiming(name + ".out.weight", {c, c}, c);
    a.p.out_bias = reg.constant(name + ".out.bias", {c}, 0.0);
    return a;
  }
  Tensor operator()(const Tensor& x) const { return self_attention(x, p); }
};

constexpr std::size_t kInputChannels = 6;  // z (3) + I_t (3)
constexpr std::size_t kOutputChannels = 3;

}  // namespace

struct FusionNet::Impl {
  NetworkConfig config;
  std::vector<NamedParameter> params;
  std::unique_ptr<TmfaBlock> tmfa;

  Dense embed_in, embed_out;
  Conv stem;
  std::vector<ResBlock> down_blocks;
  std::vector<Conv> downsamplers;
  Attention attention;
  std::vector<ResBlock> up_blocks;
  std::vector<Conv> upsamplers;
  Conv head;

  std::size_t embed_dim() const { return config.widths.front(); }
};

FusionNet::FusionNet(NetworkConfig config, std::uint64_t seed) : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  Impl& m = *impl_;
  const auto& widths = m.config.widths;
  require(!widths.empty(), ErrorCode::kConfig, "network needs at least one level");
  for (std::size_t w : widths) require(w >= 2, ErrorCode::kConfig, "channel widths must be >= 2");
  require(widths.front() % 2 == 0, ErrorCode::kConfig, "first channel width must be even");
  require(m.config.reduction >= 1, ErrorCode::kConfig, "TMFA reduction must be >= 1");

  Rng rng(seed);
  Registry reg(rng);
  if (m.config.tmfa_enabled) {
    m.tmfa = std::make_unique<TmfaBlock>(3, m.config.reduction, rng);
    for (auto& p : m.tmfa->parameters()) reg.add(p.name, p.value);
  }
  const std::size_t E = m.embed_dim();
  m.embed_in = Dense::make(reg, "embed.fc1", E, 4 * E);
  m.embed_out = Dense::make(reg, "embed.fc2", 4 * E, E);
  m.stem = Conv::make(reg, "stem", kInputChannels, widths.front(), 3);

  const std::size_t levels = widths.size();
  std::size_t ch = widths.front();
  for (std::size_t i = 0; i < levels; ++i) {
    const std::string name = "down" + std::to_string(i);
    m.down_blocks.push_back(ResBlock::make(reg, name + ".res", ch, widths[i], E));
    ch = widths[i];
    if (i + 1 < levels) m.downsamplers.push_back(Conv::make(reg, name + ".downsample", ch, ch, 3, 2));
  }
  m.attention = Attention::make(reg, "mid.attention", ch);
  m.up_blocks.resize(levels);
  m.upsamplers.resize(levels);
  for (std::size_t i = levels; i-- > 0;) {
    const std::string name = "up" + std::to_string(i);
    m.up_blocks[i] = ResBlock::make(reg, name + ".res", ch + widths[i], widths[i], E);
    ch = widths[i];
    if (i > 0) m.upsamplers[i] = Conv::make(reg, name + ".upsample", ch, ch, 3);
  }
  m.head.weight = reg.constant("head.weight", {kOutputChannels, ch, 3, 3}, 0.0);
  m.head.bias = reg.constant("head.bias", {kOutputChannels}, 0.0);
  m.head.pad = 1;
  m.params = std::move(reg.params());
}

FusionNet::~FusionNet() = default;
FusionNet::FusionNet(FusionNet&&) noexcept = default;
FusionNet& FusionNet::operator=(FusionNet&&) noexcept = default;

const NetworkConfig& FusionNet::config() const { return impl_->config; }
const std::vector<NamedParameter>& FusionNet::parameters() const { return impl_->params; }
const TmfaBlock* FusionNet::tmfa() const { return impl_->tmfa.get(); }

std::size_t FusionNet::count_parameters() const {
  std::size_t n = 0;
  for (const auto& p : impl_->params) n += p.value.numel();
  return n;
}

std::size_t FusionNet::size_multiple() const {
  return std::size_t{1} << (impl_->config.widths.size() - 1);
}

void FusionNet::zero_grad() {
  for (auto& p : impl_->params) p.value.zero_grad();
}

Tensor FusionNet::condition(const Tensor& modalities) const {
  require(modalities.rank() == 4 && modalities.dim(1) == 3, ErrorCode::kShape,
          "condition: expected [N,3,H,W], got " + shape_str(modalities.shape()));
  return impl_->tmfa ? impl_->tmfa->forward(modalities) : modalities;
}

Tensor FusionNet::predict_noise(const Tensor& z, const Tensor& noisy,
                                std::span<const double> gamma) const {
  const Impl& m = *impl_;
  require(noisy.rank() == 4 && noisy.dim(1) == kOutputChannels, ErrorCode::kShape,
          "eps_theta: latent must be [N,3,H,W], got " + shape_str(noisy.shape()));
  require(z.rank() == 4 && z.dim(0) == noisy.dim(0) && z.dim(1) == 3 &&
              z.dim(2) == noisy.dim(2) && z.dim(3) == noisy.dim(3),
          ErrorCode::kShape,
          "eps_theta: conditioning " + shape_str(z.shape()) + " does not match latent " +
              shape_str(noisy.shape()));
  require(gamma.size() == noisy.dim(0), ErrorCode::kShape,
          "eps_theta: one gamma value per batch item required");
  for (double g : gamma) {
    require(g > 0.0 && g <= 1.0, ErrorCode::kOutOfRange, "eps_theta: gamma must lie in (0, 1]");
  }
  const std::size_t multiple = size_multiple();
  require(noisy.dim(2) % multiple == 0 && noisy.dim(3) % multiple == 0, ErrorCode::kShape,
          "eps_theta: spatial size " + std::to_string(noisy.dim(2)) + "x" +
              std::to_string(noisy.dim(3)) + " must be a multiple of " + std::to_string(multiple) +
              " for " + std::to_string(m.config.widths.size()) + " resolution levels");

  Tensor emb = gamma_embedding(gamma, m.embed_dim(), m.config.embed_scale);
  emb = m.embed_out(swish(m.embed_in(emb)));

  const std::size_t levels = m.config.widths.size();
  Tensor h = m.stem(concat({z, noisy}, 1));
  std::vector<Tensor> skips;
  for (std::size_t i = 0; i < levels; ++i) {
    h = m.down_blocks[i](h, emb);
    if (i + 1 == levels) h = m.attention(h);
    skips.push_back(h);
    if (i + 1 < levels) h = m.downsamplers[i](h);
  }
  for (std::size_t i = levels; i-- > 0;) {
    h = m.up_blocks[i](concat({h, skips[i]}, 1), emb);
    if (i > 0) h = m.upsamplers[i](upsample_nearest2x(h));
  }
  return m.head(h);
}

Tensor eps_theta(const Tensor& z, const Tensor& noisy, double gamma, const FusionNet& net) {
  require(z.rank() == 3 && noisy.rank() == 3, ErrorCode::kShape,
          "eps_theta: expected [3,H,W] inputs");
  const Shape& s = noisy.shape();
  const double g[] = {gamma};
  Tensor out = net.predict_noise(reshape(z, {1, z.dim(0), z.dim(1), z.dim(2)}),
                                 reshape(noisy, {1, s[0], s[1], s[2]}), g);
  return reshape(out, s);
}

}  // namespace tfsdiff
