#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <vector>

#include <torch/torch.h>

#include "crackseq/common.hpp"
#include "json.hpp"

namespace crackseq::nets {

using Dims3 = std::array<std::int64_t, 3>;

// Temporal shifted-window transformer encoder-decoder. Time is the leading
// volumetric axis; defaults follow the reference configuration the study used.
struct SwinSpec {
    int in_channels = 3;
    int out_channels = 1;
    int feature_size = 24;  // C
    int patch_size = 2;
    Dims3 window = {7, 7, 7};
    std::vector<int> depths = {2, 2, 2, 2};
    std::vector<int> num_heads = {3, 6, 12, 24};
    double mlp_ratio = 4.0;
    double dropout = 0.0;

    int num_stages() const { return static_cast<int>(depths.size()); }
    // Patch embedding plus one merge per stage; 2^5 = 32 for the default.
    std::int64_t downsample_factor() const {
        return std::int64_t(patch_size) << num_stages();
    }
    void validate() const;

    nlohmann::json to_json() const;
    static SwinSpec from_json(const nlohmann::json& j);
};

struct WindowPartition {
    torch::Tensor windows;  // (B * n_windows, prod(window), C)
    Dims3 dims;             // pre-pad grid dims
    Dims3 padded;           // dims after padding to window multiples
};

// Zero-pads each axis up to a window multiple and splits into non-overlapping
// windows. Input layout (B, D, H, W, C).
WindowPartition window_partition(const torch::Tensor& grid, Dims3 window);

torch::Tensor window_reverse(const torch::Tensor& windows, Dims3 window, Dims3 padded,
                             Dims3 dims, std::int64_t batch);

// Additive attention mask (n_windows, N, N) for the cyclically shifted grid:
// -1e4 between tokens on opposite sides of the wrap-around seam (and against
// padding), 0 elsewhere. All-zero for shift 0 on window-aligned grids.
torch::Tensor build_attention_mask(Dims3 dims, Dims3 window, Dims3 shift,
                                   torch::TensorOptions opts = {});

// Multi-head window attention with a learned 3D relative position bias.
struct WindowAttentionImpl : torch::nn::Module {
    WindowAttentionImpl(std::int64_t dim, std::int64_t heads, Dims3 window);

    // x: (B_windows, N, C); mask: (n_windows, N, N) or undefined. `window` is
    // the effective window ({0,0,0} = the configured one); it may be smaller
    // per axis when the grid is, and indexes into the same bias table.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask = {},
                          Dims3 window = {0, 0, 0});

    torch::Tensor rel_index_for(Dims3 window);

    std::int64_t dim_, heads_;
    Dims3 window_;
    torch::nn::Linear qkv{nullptr}, proj{nullptr};
    torch::Tensor rel_bias_table;  // ((2wd-1)(2wh-1)(2ww-1), heads)
    torch::Tensor rel_index;       // (N, N) buffer for the configured window
    std::map<Dims3, torch::Tensor> rel_index_cache_;
};
TORCH_MODULE(WindowAttention);

// Cyclic shift -> partition -> masked window attention -> reverse -> unshift.
// Window/shift collapse to the grid size on axes smaller than the window.
torch::Tensor shifted_window_attention(const torch::Tensor& grid, WindowAttention& attn,
                                       Dims3 window, Dims3 shift);

struct SwinBlockImpl : torch::nn::Module {
    SwinBlockImpl(std::int64_t dim, std::int64_t heads, Dims3 window, bool shifted,
                  double mlp_ratio, double dropout);
    torch::Tensor forward(torch::Tensor x);  // (B, D, H, W, C)

    Dims3 window_;
    bool shifted_;
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    WindowAttention attn{nullptr};
    torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(SwinBlock);

// Concatenates 2x2x2 neighborhoods (replication-padded on odd axes) and
// projects 8*dim -> 2*dim.
struct PatchMergingImpl : torch::nn::Module {
    explicit PatchMergingImpl(std::int64_t dim);
    torch::Tensor forward(const torch::Tensor& x);  // (B,D,H,W,C) -> halved dims

    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerging);

struct PatchEmbedImpl : torch::nn::Module {
    PatchEmbedImpl(std::int64_t in_channels, std::int64_t embed_dim, std::int64_t patch);
    torch::Tensor forward(const torch::Tensor& x);  // (B,C,D,H,W) -> (B,D',H',W',C')

    torch::nn::Conv3d proj{nullptr};
    torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(PatchEmbed);

// Two 3x3x3 convolutions with instance norm and leaky-rectifier nonlinearity
// plus a projection residual; the conv building block of skips and decoder.
struct ResConvBlockImpl : torch::nn::Module {
    ResConvBlockImpl(std::int64_t in_ch, std::int64_t out_ch);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv3d conv1{nullptr}, conv2{nullptr}, res{nullptr};
    torch::nn::InstanceNorm3d norm1{nullptr}, norm2{nullptr}, norm_res{nullptr};
    bool project_ = false;
};
TORCH_MODULE(ResConvBlock);

struct UpBlockImpl : torch::nn::Module {
    UpBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t skip_ch);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

    torch::nn::ConvTranspose3d up{nullptr};
    ResConvBlock block{nullptr};
};
TORCH_MODULE(UpBlock);

struct SwinUNETRImpl : torch::nn::Module {
    explicit SwinUNETRImpl(SwinSpec spec);

    // (B, in, T, H, W) -> logits (B, out, T, H, W). Every volumetric axis must
    // be divisible by the total downsampling factor.
    torch::Tensor forward(const torch::Tensor& x);

    // Encoder hidden states (B, C_i, D_i, H_i, W_i), layer-normalized.
    std::vector<torch::Tensor> encode(const torch::Tensor& x);

    SwinSpec spec;
    PatchEmbed embed{nullptr};
    std::vector<std::vector<SwinBlock>> stages;  // blocks per stage
    std::vector<PatchMerging> merges;
    std::vector<torch::nn::LayerNorm> hidden_norms;
    ResConvBlock enc_input{nullptr};
    std::vector<ResConvBlock> enc_skips;
    ResConvBlock bottleneck{nullptr};
    std::vector<UpBlock> decoders;
    torch::nn::Conv3d head{nullptr};
};
TORCH_MODULE(SwinUNETR);

std::int64_t count_parameters(const torch::nn::Module& m);

// Truncated normal (sigma 0.02) for projection weights, zeros for biases.
void init_transformer_weights(torch::nn::Module& m);

}  // namespace crackseq::nets
