#pragma once

#include <vector>

#include <torch/torch.h>

#include "crackseq/common.hpp"
#include "json.hpp"

namespace crackseq::nets {

// Mono-temporal baseline: 5-level padded U-Net, ~31M parameters at defaults.
struct UNetSpec {
    int in_channels = 3;
    int out_channels = 1;
    std::vector<int> widths = {64, 128, 256, 512, 1024};

    int n_levels() const { return static_cast<int>(widths.size()); }
    std::int64_t downsample_factor() const { return 1LL << (n_levels() - 1); }
    void validate() const;

    nlohmann::json to_json() const;
    static UNetSpec from_json(const nlohmann::json& j);
};

struct DoubleConvImpl : torch::nn::Module {
    DoubleConvImpl(std::int64_t in_ch, std::int64_t out_ch);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::InstanceNorm2d norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(DoubleConv);

struct UNetImpl : torch::nn::Module {
    explicit UNetImpl(UNetSpec spec);

    // (B, in, H, W) -> logits (B, out, H, W); H and W divisible by 16 at defaults.
    torch::Tensor forward(const torch::Tensor& x);

    UNetSpec spec;
    std::vector<DoubleConv> enc;
    std::vector<torch::nn::ConvTranspose2d> ups;
    std::vector<DoubleConv> dec;
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace crackseq::nets
