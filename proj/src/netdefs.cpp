#include "udaliver/netdefs.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

#include "udaliver/errors.hpp"

namespace udaliver {

namespace nn = torch::nn;

namespace {

nn::Conv2dOptions conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1, int64_t pad = 0) {
  return nn::Conv2dOptions(in, out, k).stride(stride).padding(pad);
}

std::string shape_str(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// SegNetConfig

std::vector<int64_t> SegNetConfig::encoder_channels() const {
  std::vector<int64_t> ch;
  for (int64_t k = 0; k <= depth; ++k) ch.push_back(base_filters << k);
  return ch;
}

void SegNetConfig::validate() const {
  if (base_filters < 1) throw ConfigError("segnet: base_filters must be >= 1");
  if (depth < 1) throw ConfigError("segnet: depth must be >= 1");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("segnet: channel counts must be >= 1");
}

void to_json(nlohmann::json& j, const SegNetConfig& c) {
  j = {{"base_filters", c.base_filters},
       {"in_channels", c.in_channels},
       {"out_channels", c.out_channels},
       {"depth", c.depth}};
}

void from_json(const nlohmann::json& j, SegNetConfig& c) {
  j.at("base_filters").get_to(c.base_filters);
  j.at("in_channels").get_to(c.in_channels);
  j.at("out_channels").get_to(c.out_channels);
  j.at("depth").get_to(c.depth);
}

// ---------------------------------------------------------------------------
// Building blocks

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out) {
  conv1_ = register_module("conv1", nn::Conv2d(conv(in, out, 3, 1, 1)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(out));
  conv2_ = register_module("conv2", nn::Conv2d(conv(out, out, 3, 1, 1)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(out));
}

torch::Tensor ConvBlockImpl::forward(torch::Tensor x) {
  x = torch::relu(bn1_(conv1_(x)));
  return torch::relu(bn2_(conv2_(x)));
}

UpConvImpl::UpConvImpl(int64_t in, int64_t out) {
  conv_ = register_module("conv", nn::Conv2d(conv(in, out, 3, 1, 1)));
  bn_ = register_module("bn", nn::BatchNorm2d(out));
}

torch::Tensor UpConvImpl::forward(torch::Tensor x) {
  x = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions()
             .scale_factor(std::vector<double>{2.0, 2.0})
             .mode(torch::kNearest));
  return torch::relu(bn_(conv_(x)));
}

AttentionGateImpl::AttentionGateImpl(int64_t gate_channels, int64_t skip_channels,
                                     int64_t inter_channels) {
  wg_ = register_module("wg", nn::Conv2d(conv(gate_channels, inter_channels, 1)));
  bng_ = register_module("bng", nn::BatchNorm2d(inter_channels));
  wx_ = register_module("wx", nn::Conv2d(conv(skip_channels, inter_channels, 1)));
  bnx_ = register_module("bnx", nn::BatchNorm2d(inter_channels));
  psi_ = register_module("psi", nn::Conv2d(conv(inter_channels, 1, 1)));
  bnpsi_ = register_module("bnpsi", nn::BatchNorm2d(1));
}

torch::Tensor AttentionGateImpl::coefficients(const torch::Tensor& gate, const torch::Tensor& skip) {
  auto a = torch::relu(bng_(wg_(gate)) + bnx_(wx_(skip)));
  return torch::sigmoid(bnpsi_(psi_(a)));
}

torch::Tensor AttentionGateImpl::forward(const torch::Tensor& gate, const torch::Tensor& skip) {
  return skip * coefficients(gate, skip);
}

// ---------------------------------------------------------------------------
// SegNet

SegNetImpl::SegNetImpl(const SegNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto ch = cfg_.encoder_channels();
  int64_t in = cfg_.in_channels;
  for (int64_t k = 0; k <= cfg_.depth; ++k) {
    encoder_.push_back(register_module("enc" + std::to_string(k), ConvBlock(in, ch[k])));
    in = ch[k];
  }
  // Decoder runs from the coarsest level upward.
  for (int64_t k = cfg_.depth; k >= 1; --k) {
    const int64_t skip = ch[k - 1];
    const auto idx = std::to_string(cfg_.depth - k);
    ups_.push_back(register_module("up" + idx, UpConv(ch[k], skip)));
    gates_.push_back(register_module("gate" + idx, AttentionGate(skip, skip, std::max<int64_t>(skip / 2, 1))));
    decoder_.push_back(register_module("dec" + idx, ConvBlock(2 * skip, skip)));
  }
  head_ = register_module("head", nn::Conv2d(conv(ch[0], cfg_.out_channels, 1)));
}

void SegNetImpl::check_input(const torch::Tensor& x) const {
  if (x.dim() != 4) throw DimensionError("segnet: expected N x C x H x W input, got " + shape_str(x));
  if (x.size(1) != cfg_.in_channels)
    throw DimensionError("segnet: expected " + std::to_string(cfg_.in_channels) +
                         " input channels, got " + shape_str(x));
  const int64_t m = cfg_.size_multiple();
  if (x.size(2) % m != 0 || x.size(3) % m != 0)
    throw DimensionError("segnet: spatial size must be divisible by " + std::to_string(m) +
                         ", got " + shape_str(x));
}

SegNetOutput SegNetImpl::forward_tapped(const torch::Tensor& x) {
  check_input(x);
  SegNetOutput out;
  out.stem_features = encoder_[0](x);
  out.logits = forward_from_stem(out.stem_features, &out.attention);
  return out;
}

torch::Tensor SegNetImpl::forward_from_stem(const torch::Tensor& stem_features,
                                            std::vector<torch::Tensor>* attention) {
  std::vector<torch::Tensor> skips{stem_features};
  auto h = stem_features;
  for (size_t k = 1; k < encoder_.size(); ++k) {
    h = encoder_[k](torch::max_pool2d(h, 2));
    skips.push_back(h);
  }
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const auto& skip = skips[skips.size() - 2 - i];
    auto g = ups_[i](h);
    auto alpha = gates_[i]->coefficients(g, skip);
    if (attention) attention->push_back(alpha);
    h = decoder_[i](torch::cat({skip * alpha, g}, 1));
  }
  return head_(h);
}

bool SegNetImpl::is_stem_name(const std::string& name) { return name.rfind("enc0.", 0) == 0; }

std::vector<torch::Tensor> SegNetImpl::stem_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : named_parameters())
    if (is_stem_name(p.key())) out.push_back(p.value());
  return out;
}

std::vector<torch::Tensor> SegNetImpl::non_stem_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : named_parameters())
    if (!is_stem_name(p.key())) out.push_back(p.value());
  return out;
}

// ---------------------------------------------------------------------------
// Critic

void CriticConfig::validate() const {
  if (n_conv_layers < 2) throw ConfigError("critic: need at least 2 conv layers");
  if (in_channels < 1 || base_channels < 1 || max_channels < 1)
    throw ConfigError("critic: channel counts must be >= 1");
  const int64_t m = min_input_size();
  if (height < m || width < m || height % m != 0 || width % m != 0) {
    std::ostringstream os;
    os << "critic: input " << height << "x" << width << " cannot survive " << (n_conv_layers - 1)
       << " stride-2 reductions; minimum size is " << m << "x" << m
       << " (and a multiple of " << m << ")";
    throw ConfigError(os.str());
  }
}

void to_json(nlohmann::json& j, const CriticConfig& c) {
  j = {{"n_conv_layers", c.n_conv_layers}, {"leaky_slope", c.leaky_slope},
       {"in_channels", c.in_channels},     {"height", c.height},
       {"width", c.width},                 {"base_channels", c.base_channels},
       {"max_channels", c.max_channels}};
}

void from_json(const nlohmann::json& j, CriticConfig& c) {
  j.at("n_conv_layers").get_to(c.n_conv_layers);
  j.at("leaky_slope").get_to(c.leaky_slope);
  j.at("in_channels").get_to(c.in_channels);
  j.at("height").get_to(c.height);
  j.at("width").get_to(c.width);
  j.at("base_channels").get_to(c.base_channels);
  j.at("max_channels").get_to(c.max_channels);
}

CriticImpl::CriticImpl(const CriticConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  body_ = nn::Sequential();
  int64_t in = cfg_.in_channels;
  for (int64_t i = 0; i + 1 < cfg_.n_conv_layers; ++i) {
    const int64_t out = std::min(cfg_.base_channels << i, cfg_.max_channels);
    body_->push_back(nn::Conv2d(conv(in, out, 4, 2, 1)));
    body_->push_back(nn::BatchNorm2d(out));
    body_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(cfg_.leaky_slope)));
    in = out;
  }
  const int64_t shrink = cfg_.min_input_size();
  body_->push_back(nn::Conv2d(
      nn::Conv2dOptions(in, 1, {cfg_.height / shrink, cfg_.width / shrink}).stride(1).padding(0)));
  register_module("body", body_);
}

torch::Tensor CriticImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels || x.size(2) != cfg_.height ||
      x.size(3) != cfg_.width) {
    std::ostringstream os;
    os << "critic: expected N x " << cfg_.in_channels << " x " << cfg_.height << " x " << cfg_.width
       << " input, got " << x.sizes();
    throw DimensionError(os.str());
  }
  return body_->forward(x).reshape({x.size(0), 1});
}

// ---------------------------------------------------------------------------
// Construction helpers

void kaiming_init(nn::Module& module, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard guard;
  for (auto& sub : module.modules(/*include_self=*/true)) {
    if (auto* c = sub->as<nn::Conv2d>()) {
      auto& w = c->weight;
      const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
      w.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
      if (c->bias.defined()) c->bias.zero_();
    } else if (auto* b = sub->as<nn::BatchNorm2d>()) {
      b->weight.fill_(1.0);
      b->bias.zero_();
    }
  }
}

SegNet build_segnet(const SegNetConfig& cfg, uint64_t seed) {
  SegNet net(cfg);
  kaiming_init(*net, seed);
  return net;
}

Critic build_critic(const CriticConfig& cfg, uint64_t seed) {
  Critic net(cfg);
  kaiming_init(*net, seed);
  return net;
}

SegNetOutput forward_tapped(SegNet& model, const torch::Tensor& batch) {
  return model->forward_tapped(batch);
}

int64_t conv_weight_count(nn::Module& module) {
  int64_t n = 0;
  for (auto& sub : module.modules(true))
    if (auto* c = sub->as<nn::Conv2d>()) n += c->weight.numel();
  return n;
}

void copy_state(nn::Module& from, nn::Module& to) {
  torch::NoGradGuard guard;
  auto src_p = from.named_parameters();
  auto dst_p = to.named_parameters();
  auto src_b = from.named_buffers();
  auto dst_b = to.named_buffers();
  if (src_p.size() != dst_p.size() || src_b.size() != dst_b.size())
    throw ConfigError("copy_state: architectures differ");
  auto copy = [](auto& src, auto& dst) {
    for (auto& item : src) {
      auto* target = dst.find(item.key());
      if (!target || !target->sizes().equals(item.value().sizes()))
        throw ConfigError("copy_state: architectures differ at " + item.key());
      target->copy_(item.value());
    }
  };
  copy(src_p, dst_p);
  copy(src_b, dst_b);
}

bool state_equal(nn::Module& a, nn::Module& b) {
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  auto ba = a.named_buffers();
  auto bb = b.named_buffers();
  if (pa.size() != pb.size() || ba.size() != bb.size()) return false;
  auto same = [](auto& x, auto& y) {
    for (auto& item : x) {
      auto* other = y.find(item.key());
      if (!other || !torch::equal(item.value(), *other)) return false;
    }
    return true;
  };
  return same(pa, pb) && same(ba, bb);
}

void set_requires_grad(nn::Module& module, bool flag) {
  for (auto& p : module.parameters()) p.set_requires_grad(flag);
}

}  // namespace udaliver
