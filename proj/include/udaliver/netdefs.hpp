#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace udaliver {

/// Attention U-Net shape. Encoder widths are base_filters * 2^k for k = 0..depth.
struct SegNetConfig {
  int64_t base_filters = 64;
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  int64_t depth = 4;

  std::vector<int64_t> encoder_channels() const;
  int64_t size_multiple() const { return int64_t{1} << depth; }
  void validate() const;

  bool operator==(const SegNetConfig&) const = default;
};

void to_json(nlohmann::json& j, const SegNetConfig& c);
void from_json(const nlohmann::json& j, SegNetConfig& c);

struct SegNetOutput {
  torch::Tensor stem_features;  // N x base x H x W, taken before the first pooling
  torch::Tensor logits;         // N x out_channels x H x W
  std::vector<torch::Tensor> attention;  // gate coefficients, coarsest level first
};

class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(ConvBlock);

// Nearest-neighbour x2 followed by a smoothing 3x3 convolution.
class UpConvImpl : public torch::nn::Module {
 public:
  UpConvImpl(int64_t in, int64_t out);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(UpConv);

// Additive attention gate. The gating signal and skip features are projected
// to inter_channels, summed, rectified and squashed to one coefficient per pixel.
class AttentionGateImpl : public torch::nn::Module {
 public:
  AttentionGateImpl(int64_t gate_channels, int64_t skip_channels, int64_t inter_channels);
  torch::Tensor coefficients(const torch::Tensor& gate, const torch::Tensor& skip);
  torch::Tensor forward(const torch::Tensor& gate, const torch::Tensor& skip);

 private:
  torch::nn::Conv2d wg_{nullptr}, wx_{nullptr}, psi_{nullptr};
  torch::nn::BatchNorm2d bng_{nullptr}, bnx_{nullptr}, bnpsi_{nullptr};
};
TORCH_MODULE(AttentionGate);

class SegNetImpl : public torch::nn::Module {
 public:
  explicit SegNetImpl(const SegNetConfig& cfg);

  const SegNetConfig& config() const { return cfg_; }

  SegNetOutput forward_tapped(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x) { return forward_tapped(x).logits; }
  // Everything after the stem; forward_from_stem(stem(x)) == forward(x).
  torch::Tensor forward_from_stem(const torch::Tensor& stem_features,
                                  std::vector<torch::Tensor>* attention = nullptr);

  ConvBlock& stem() { return encoder_[0]; }
  std::vector<torch::Tensor> stem_parameters();
  std::vector<torch::Tensor> non_stem_parameters();
  // Names of parameters/buffers that belong to the stem ("enc0.").
  static bool is_stem_name(const std::string& name);

  int64_t conv_block_count() const { return static_cast<int64_t>(encoder_.size() + decoder_.size()); }
  int64_t attention_block_count() const { return static_cast<int64_t>(gates_.size()); }
  int64_t pool_count() const { return cfg_.depth; }
  int64_t upsample_count() const { return static_cast<int64_t>(ups_.size()); }

 private:
  void check_input(const torch::Tensor& x) const;

  SegNetConfig cfg_;
  std::vector<ConvBlock> encoder_;
  std::vector<UpConv> ups_;
  std::vector<AttentionGate> gates_;
  std::vector<ConvBlock> decoder_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(SegNet);

/// DCGAN-style critic: n_conv_layers convolutions, the first n-1 with stride 2
/// followed by batch norm and leaky ReLU, the last a valid convolution that
/// collapses the remaining spatial extent to one unbounded score.
struct CriticConfig {
  int64_t n_conv_layers = 7;
  double leaky_slope = 0.2;
  int64_t in_channels = 1;
  int64_t height = 256;
  int64_t width = 256;
  int64_t base_channels = 64;
  int64_t max_channels = 512;

  int64_t min_input_size() const { return int64_t{1} << (n_conv_layers - 1); }
  void validate() const;

  bool operator==(const CriticConfig&) const = default;
};

void to_json(nlohmann::json& j, const CriticConfig& c);
void from_json(const nlohmann::json& j, CriticConfig& c);

class CriticImpl : public torch::nn::Module {
 public:
  explicit CriticImpl(const CriticConfig& cfg);
  const CriticConfig& config() const { return cfg_; }
  // N x C x H x W -> N x 1
  torch::Tensor forward(const torch::Tensor& x);

 private:
  CriticConfig cfg_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Critic);

/// Kaiming-normal (fan-in, ReLU gain) conv weights, zero biases, unit BN scale.
/// Deterministic in seed; does not touch the global torch generator.
void kaiming_init(torch::nn::Module& module, uint64_t seed);

SegNet build_segnet(const SegNetConfig& cfg, uint64_t seed);
Critic build_critic(const CriticConfig& cfg, uint64_t seed);

/// Runs the network on a batch and checks the input contract first.
SegNetOutput forward_tapped(SegNet& model, const torch::Tensor& batch);

/// Number of elements across all convolution weights (biases excluded).
int64_t conv_weight_count(torch::nn::Module& module);

/// Copies every parameter and buffer of `from` into `to`; throws ConfigError
/// when the two modules do not have identical names and shapes.
void copy_state(torch::nn::Module& from, torch::nn::Module& to);

/// Bitwise equality of all parameters and buffers.
bool state_equal(torch::nn::Module& a, torch::nn::Module& b);

void set_requires_grad(torch::nn::Module& module, bool flag);

}  // namespace udaliver
