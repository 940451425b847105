#include "crackseq/nets/unet.hpp"

namespace crackseq::nets {

void UNetSpec::validate() const {
    if (widths.size() < 2) throw DataError("UNetSpec: need at least 2 levels");
    for (int w : widths)
        if (w <= 0) throw DataError("UNetSpec: widths must be positive");
}

nlohmann::json UNetSpec::to_json() const {
    return {{"in_channels", in_channels}, {"out_channels", out_channels}, {"widths", widths}};
}

UNetSpec UNetSpec::from_json(const nlohmann::json& j) {
    UNetSpec s;
    s.in_channels = j.at("in_channels");
    s.out_channels = j.at("out_channels");
    s.widths = j.at("widths").get<std::vector<int>>();
    return s;
}

DoubleConvImpl::DoubleConvImpl(std::int64_t in_ch, std::int64_t out_ch) {
    conv1 = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
    conv2 = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    norm1 = register_module("norm1", torch::nn::InstanceNorm2d(out_ch));
    norm2 = register_module("norm2", torch::nn::InstanceNorm2d(out_ch));
}

torch::Tensor DoubleConvImpl::forward(const torch::Tensor& x) {
    torch::Tensor h = torch::leaky_relu(norm1(conv1(x)), 0.01);
    return torch::leaky_relu(norm2(conv2(h)), 0.01);
}

UNetImpl::UNetImpl(UNetSpec s) : spec(std::move(s)) {
    spec.validate();
    const int L = spec.n_levels();
    std::int64_t prev = spec.in_channels;
    for (int i = 0; i < L; ++i) {
        auto dc = DoubleConv(prev, spec.widths[i]);
        register_module("enc" + std::to_string(i), dc);
        enc.push_back(dc);
        prev = spec.widths[i];
    }
    for (int i = L - 2; i >= 0; --i) {
        auto up = torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(spec.widths[i + 1], spec.widths[i], 2).stride(2));
        register_module("up" + std::to_string(i), up);
        ups.push_back(up);
        auto dc = DoubleConv(2LL * spec.widths[i], spec.widths[i]);
        register_module("dec" + std::to_string(i), dc);
        dec.push_back(dc);
    }
    head = register_module(
        "head",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(spec.widths[0], spec.out_channels, 1)));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "UNet expects (B, C, H, W)");
    std::int64_t factor = spec.downsample_factor();
    if (x.size(2) % factor != 0 || x.size(3) % factor != 0)
        throw DataError("UNet: spatial dims must be divisible by " + std::to_string(factor));

    std::vector<torch::Tensor> skips;
    torch::Tensor h = x;
    for (int i = 0; i < spec.n_levels(); ++i) {
        if (i > 0) h = torch::max_pool2d(h, 2);
        h = enc[i]->forward(h);
        if (i < spec.n_levels() - 1) skips.push_back(h);
    }
    for (std::size_t k = 0; k < ups.size(); ++k) {
        h = ups[k]->forward(h);
        h = dec[k]->forward(torch::cat({h, skips[skips.size() - 1 - k]}, 1));
    }
    return head(h);
}

}  // namespace crackseq::nets
