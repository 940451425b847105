#include "crackseq/nets/swin_unetr.hpp"

#include <cmath>

namespace crackseq::nets {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

void trunc_normal_(torch::Tensor t, double std) {
    torch::NoGradGuard g;
    t.normal_(0.0, std).clamp_(-2.0 * std, 2.0 * std);
}

Dims3 grid_dims(const torch::Tensor& grid) {
    return {grid.size(1), grid.size(2), grid.size(3)};
}

// Axes no larger than the window get window=axis and shift=0.
void effective_window(Dims3 dims, Dims3& window, Dims3& shift) {
    for (int i = 0; i < 3; ++i) {
        if (dims[i] <= window[i]) {
            window[i] = dims[i];
            shift[i] = 0;
        }
    }
}

}  // namespace

void SwinSpec::validate() const {
    if (feature_size <= 0) throw DataError("SwinSpec: feature_size must be positive");
    if (patch_size < 1) throw DataError("SwinSpec: patch_size must be >= 1");
    if (depths.empty() || depths.size() != num_heads.size())
        throw DataError("SwinSpec: depths and num_heads must be non-empty and equal-length");
    for (int i = 0; i < num_stages(); ++i) {
        std::int64_t dim = std::int64_t(feature_size) << i;
        if (num_heads[i] <= 0 || dim % num_heads[i] != 0)
            throw DataError("SwinSpec: heads must divide the stage embedding dim");
    }
    for (auto w : window)
        if (w < 1) throw DataError("SwinSpec: window must be >= 1 per axis");
    if (dropout < 0 || dropout >= 1) throw DataError("SwinSpec: dropout out of [0,1)");
}

nlohmann::json SwinSpec::to_json() const {
    return {{"in_channels", in_channels},   {"out_channels", out_channels},
            {"feature_size", feature_size}, {"patch_size", patch_size},
            {"window", window},             {"depths", depths},
            {"num_heads", num_heads},       {"mlp_ratio", mlp_ratio},
            {"dropout", dropout}};
}

SwinSpec SwinSpec::from_json(const nlohmann::json& j) {
    SwinSpec s;
    s.in_channels = j.at("in_channels");
    s.out_channels = j.at("out_channels");
    s.feature_size = j.at("feature_size");
    s.patch_size = j.at("patch_size");
    s.window = j.at("window");
    s.depths = j.at("depths").get<std::vector<int>>();
    s.num_heads = j.at("num_heads").get<std::vector<int>>();
    s.mlp_ratio = j.at("mlp_ratio");
    s.dropout = j.at("dropout");
    return s;
}

WindowPartition window_partition(const torch::Tensor& grid, Dims3 window) {
    TORCH_CHECK(grid.dim() == 5, "window_partition expects (B,D,H,W,C)");
    Dims3 dims = grid_dims(grid);
    Dims3 padded;
    for (int i = 0; i < 3; ++i) padded[i] = (dims[i] + window[i] - 1) / window[i] * window[i];

    torch::Tensor x = grid;
    if (padded != dims) {
        x = F::pad(x, F::PadFuncOptions({0, 0, 0, padded[2] - dims[2], 0, padded[1] - dims[1], 0,
                                         padded[0] - dims[0]}));
    }
    std::int64_t b = x.size(0), c = x.size(4);
    x = x.view({b, padded[0] / window[0], window[0], padded[1] / window[1], window[1],
                padded[2] / window[2], window[2], c});
    x = x.permute({0, 1, 3, 5, 2, 4, 6, 7}).contiguous();
    WindowPartition out;
    out.windows = x.view({-1, window[0] * window[1] * window[2], c});
    out.dims = dims;
    out.padded = padded;
    return out;
}

torch::Tensor window_reverse(const torch::Tensor& windows, Dims3 window, Dims3 padded, Dims3 dims,
                             std::int64_t batch) {
    std::int64_t c = windows.size(2);
    torch::Tensor x = windows.view({batch, padded[0] / window[0], padded[1] / window[1],
                                    padded[2] / window[2], window[0], window[1], window[2], c});
    x = x.permute({0, 1, 4, 2, 5, 3, 6, 7}).contiguous();
    x = x.view({batch, padded[0], padded[1], padded[2], c});
    if (padded != dims)
        x = x.index({Slice(), Slice(0, dims[0]), Slice(0, dims[1]), Slice(0, dims[2]), Slice()});
    return x.contiguous();
}

torch::Tensor build_attention_mask(Dims3 dims, Dims3 window, Dims3 shift,
                                   torch::TensorOptions opts) {
    for (int i = 0; i < 3; ++i) {
        if (shift[i] < 0 || shift[i] >= window[i])
            throw DataError("build_attention_mask: shift must be in [0, window)");
    }
    // Wrap-class id per rolled position: the token at rolled position p came
    // from (p + shift) mod size, so it crossed the wrap-around seam exactly
    // when p >= size - shift. Two tokens in the same window may attend iff
    // their wrap class matches on every axis (their displacement on the
    // original grid then equals the one inside the window).
    auto axis_ids = [](std::int64_t size, std::int64_t sft) {
        torch::Tensor ids = torch::zeros({size}, torch::kLong);
        if (sft > 0)
            for (std::int64_t p = size - sft; p < size; ++p) ids[p] = 1;
        return ids;
    };
    torch::Tensor idd = axis_ids(dims[0], shift[0]);
    torch::Tensor idh = axis_ids(dims[1], shift[1]);
    torch::Tensor idw = axis_ids(dims[2], shift[2]);
    torch::Tensor vol = (idd.view({-1, 1, 1}) * 2 + idh.view({1, -1, 1})) * 2 + idw.view({1, 1, -1});

    Dims3 padded;
    for (int i = 0; i < 3; ++i) padded[i] = (dims[i] + window[i] - 1) / window[i] * window[i];
    if (padded != dims) {
        // Padding tokens carry a unique region id: real tokens never attend them.
        vol = F::pad(vol.unsqueeze(0),
                     F::PadFuncOptions({0, padded[2] - dims[2], 0, padded[1] - dims[1], 0,
                                        padded[0] - dims[0]})
                         .value(-1))
                  .squeeze(0);
    }

    auto part = window_partition(vol.unsqueeze(0).unsqueeze(-1).to(torch::kFloat), window);
    torch::Tensor ids = part.windows.squeeze(-1);  // (nW, N)
    torch::Tensor mask = (ids.unsqueeze(1) != ids.unsqueeze(2)).to(torch::kFloat) * -1e4f;
    if (opts.has_dtype()) mask = mask.to(opts.dtype());
    return mask;
}

WindowAttentionImpl::WindowAttentionImpl(std::int64_t dim, std::int64_t heads, Dims3 window)
    : dim_(dim), heads_(heads), window_(window) {
    TORCH_CHECK(dim % heads == 0, "head count must divide dim");
    qkv = register_module("qkv", torch::nn::Linear(dim, dim * 3));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    std::int64_t table =
        (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
    rel_bias_table = register_parameter("rel_bias_table", torch::zeros({table, heads}));
    trunc_normal_(rel_bias_table, 0.02);

    rel_index = register_buffer("rel_index", rel_index_for(window));
}

// Relative offset -> bias table row. `window` may be smaller than the
// configured one; offsets are shifted into the full table's coordinate range.
torch::Tensor WindowAttentionImpl::rel_index_for(Dims3 window) {
    auto cached = rel_index_cache_.find(window);
    if (cached != rel_index_cache_.end()) return cached->second;

    std::int64_t n = window[0] * window[1] * window[2];
    torch::Tensor coords = torch::zeros({3, n}, torch::kLong);
    std::int64_t idx = 0;
    for (std::int64_t d = 0; d < window[0]; ++d)
        for (std::int64_t h = 0; h < window[1]; ++h)
            for (std::int64_t w = 0; w < window[2]; ++w, ++idx) {
                coords[0][idx] = d;
                coords[1][idx] = h;
                coords[2][idx] = w;
            }
    torch::Tensor rel = coords.unsqueeze(2) - coords.unsqueeze(1);  // (3, N, N)
    rel[0] += window_[0] - 1;
    rel[1] += window_[1] - 1;
    rel[2] += window_[2] - 1;
    torch::Tensor index = rel[0] * (2 * window_[1] - 1) * (2 * window_[2] - 1) +
                          rel[1] * (2 * window_[2] - 1) + rel[2];
    rel_index_cache_[window] = index;
    return index;
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& mask,
                                           Dims3 window) {
    if (window == Dims3{0, 0, 0}) window = window_;
    for (int i = 0; i < 3; ++i)
        TORCH_CHECK(window[i] <= window_[i], "effective window exceeds the configured one");
    std::int64_t bw = x.size(0), n = x.size(1), c = x.size(2);
    TORCH_CHECK(n == window[0] * window[1] * window[2], "token count does not match window");
    std::int64_t hd = c / heads_;
    torch::Tensor t = qkv(x).reshape({bw, n, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
    torch::Tensor q = t[0], k = t[1], v = t[2];
    double scale = 1.0 / std::sqrt((double)hd);
    torch::Tensor attn = torch::matmul(q, k.transpose(-2, -1)) * scale;

    // Module::to(dtype) rewrites buffers, so re-cast the index before lookup.
    torch::Tensor bias = rel_bias_table
                             .index_select(0, rel_index_for(window).reshape(-1).to(torch::kLong))
                             .reshape({n, n, heads_})
                             .permute({2, 0, 1});
    attn = attn + bias.unsqueeze(0);

    if (mask.defined()) {
        std::int64_t nw = mask.size(0);
        attn = attn.view({bw / nw, nw, heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0);
        attn = attn.view({bw, heads_, n, n});
    }
    attn = torch::softmax(attn, -1);
    torch::Tensor out = torch::matmul(attn, v).transpose(1, 2).reshape({bw, n, c});
    return proj(out);
}

torch::Tensor shifted_window_attention(const torch::Tensor& grid, WindowAttention& attn,
                                       Dims3 window, Dims3 shift) {
    Dims3 dims = grid_dims(grid);
    effective_window(dims, window, shift);

    bool any_shift = shift[0] || shift[1] || shift[2];
    torch::Tensor x = grid;
    if (any_shift) x = torch::roll(x, {-shift[0], -shift[1], -shift[2]}, {1, 2, 3});

    auto part = window_partition(x, window);
    torch::Tensor mask;
    if (any_shift || part.padded != dims)
        mask = build_attention_mask(dims, window, shift, grid.options());
    torch::Tensor y = attn->forward(part.windows, mask, window);
    y = window_reverse(y, window, part.padded, dims, grid.size(0));
    if (any_shift) y = torch::roll(y, {shift[0], shift[1], shift[2]}, {1, 2, 3});
    return y;
}

SwinBlockImpl::SwinBlockImpl(std::int64_t dim, std::int64_t heads, Dims3 window, bool shifted,
                             double mlp_ratio, double dropout)
    : window_(window), shifted_(shifted) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", WindowAttention(dim, heads, window));
    std::int64_t hidden = std::int64_t(dim * mlp_ratio);
    mlp = torch::nn::Sequential(torch::nn::Linear(dim, hidden), torch::nn::GELU(),
                                torch::nn::Dropout(dropout), torch::nn::Linear(hidden, dim),
                                torch::nn::Dropout(dropout));
    register_module("mlp", mlp);
}

torch::Tensor SwinBlockImpl::forward(torch::Tensor x) {
    Dims3 shift{0, 0, 0};
    if (shifted_)
        for (int i = 0; i < 3; ++i) shift[i] = window_[i] / 2;
    torch::Tensor h = shifted_window_attention(norm1(x), attn, window_, shift);
    x = x + h;
    x = x + mlp->forward(norm2(x));
    return x;
}

PatchMergingImpl::PatchMergingImpl(std::int64_t dim) {
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({8 * dim})));
    reduction = register_module(
        "reduction", torch::nn::Linear(torch::nn::LinearOptions(8 * dim, 2 * dim).bias(false)));
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x_in) {
    torch::Tensor x = x_in;
    // Replicate the trailing slice on odd axes.
    for (int axis = 1; axis <= 3; ++axis) {
        if (x.size(axis) % 2 == 1) {
            torch::Tensor last = x.narrow(axis, x.size(axis) - 1, 1);
            x = torch::cat({x, last}, axis);
        }
    }
    std::vector<torch::Tensor> parts;
    for (int d = 0; d < 2; ++d)
        for (int h = 0; h < 2; ++h)
            for (int w = 0; w < 2; ++w)
                parts.push_back(x.index({Slice(), Slice(d, torch::indexing::None, 2),
                                         Slice(h, torch::indexing::None, 2),
                                         Slice(w, torch::indexing::None, 2), Slice()}));
    torch::Tensor y = torch::cat(parts, -1);
    return reduction(norm(y));
}

PatchEmbedImpl::PatchEmbedImpl(std::int64_t in_channels, std::int64_t embed_dim,
                               std::int64_t patch) {
    proj = register_module("proj", torch::nn::Conv3d(torch::nn::Conv3dOptions(
                                       in_channels, embed_dim, patch).stride(patch)));
    norm = register_module("norm",
                           torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& x) {
    std::int64_t patch = proj->options.stride()->at(0);
    for (int axis = 2; axis <= 4; ++axis)
        if (x.size(axis) % patch != 0)
            throw DataError("patch_embed: input axis not divisible by patch size");
    torch::Tensor y = proj(x);                         // (B, C, D', H', W')
    y = y.permute({0, 2, 3, 4, 1}).contiguous();       // (B, D', H', W', C)
    return norm(y);
}

ResConvBlockImpl::ResConvBlockImpl(std::int64_t in_ch, std::int64_t out_ch)
    : project_(in_ch != out_ch) {
    conv1 = register_module(
        "conv1", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_ch, out_ch, 3).padding(1)));
    conv2 = register_module(
        "conv2", torch::nn::Conv3d(torch::nn::Conv3dOptions(out_ch, out_ch, 3).padding(1)));
    norm1 = register_module("norm1", torch::nn::InstanceNorm3d(out_ch));
    norm2 = register_module("norm2", torch::nn::InstanceNorm3d(out_ch));
    if (project_) {
        res = register_module("res", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_ch, out_ch, 1)));
        norm_res = register_module("norm_res", torch::nn::InstanceNorm3d(out_ch));
    }
}

torch::Tensor ResConvBlockImpl::forward(const torch::Tensor& x) {
    torch::Tensor h = torch::leaky_relu(norm1(conv1(x)), 0.01);
    h = norm2(conv2(h));
    torch::Tensor r = project_ ? norm_res(res(x)) : x;
    return torch::leaky_relu(h + r, 0.01);
}

UpBlockImpl::UpBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t skip_ch) {
    up = register_module("up", torch::nn::ConvTranspose3d(
                                   torch::nn::ConvTranspose3dOptions(in_ch, out_ch, 2).stride(2)));
    block = register_module("block", ResConvBlock(out_ch + skip_ch, out_ch));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
    torch::Tensor u = up(x);
    // Merge-stage replication padding can overshoot by one; crop to the skip.
    u = u.index({Slice(), Slice(), Slice(0, skip.size(2)), Slice(0, skip.size(3)),
                 Slice(0, skip.size(4))});
    return block(torch::cat({u, skip}, 1));
}

SwinUNETRImpl::SwinUNETRImpl(SwinSpec s) : spec(std::move(s)) {
    spec.validate();
    const int S = spec.num_stages();
    const std::int64_t C = spec.feature_size;

    embed = register_module("embed", PatchEmbed(spec.in_channels, C, spec.patch_size));
    for (int i = 0; i < S; ++i) {
        std::int64_t dim = C << i;
        std::vector<SwinBlock> blocks;
        for (int b = 0; b < spec.depths[i]; ++b) {
            auto blk = SwinBlock(dim, spec.num_heads[i], spec.window, b % 2 == 1, spec.mlp_ratio,
                                 spec.dropout);
            register_module("stage" + std::to_string(i) + "_block" + std::to_string(b), blk);
            blocks.push_back(blk);
        }
        stages.push_back(std::move(blocks));
        auto merge = PatchMerging(dim);
        register_module("merge" + std::to_string(i), merge);
        merges.push_back(merge);
    }
    for (int i = 0; i <= S; ++i) {
        auto n = torch::nn::LayerNorm(torch::nn::LayerNormOptions({C << i}));
        register_module("hidden_norm" + std::to_string(i), n);
        hidden_norms.push_back(n);
    }

    enc_input = register_module("enc_input", ResConvBlock(spec.in_channels, C));
    for (int i = 0; i <= S - 2; ++i) {
        auto blk = ResConvBlock(C << i, C << i);
        register_module("enc_skip" + std::to_string(i), blk);
        enc_skips.push_back(blk);
    }
    bottleneck = register_module("bottleneck", ResConvBlock(C << S, C << S));

    for (int k = 0; k <= S; ++k) {
        std::int64_t in_ch = C << (S - k);
        std::int64_t out_ch = k == S ? C : C << (S - k - 1);
        auto dec = UpBlock(in_ch, out_ch, out_ch);
        register_module("decoder" + std::to_string(k), dec);
        decoders.push_back(dec);
    }
    head = register_module(
        "head", torch::nn::Conv3d(torch::nn::Conv3dOptions(C, spec.out_channels, 1)));

    init_transformer_weights(*this);
}

std::vector<torch::Tensor> SwinUNETRImpl::encode(const torch::Tensor& x) {
    std::vector<torch::Tensor> hidden;
    torch::Tensor g = embed(x);
    auto emit = [&](const torch::Tensor& t, int level) {
        hidden.push_back(hidden_norms[level](t).permute({0, 4, 1, 2, 3}).contiguous());
    };
    emit(g, 0);
    for (int i = 0; i < spec.num_stages(); ++i) {
        for (auto& blk : stages[i]) g = blk->forward(g);
        g = merges[i]->forward(g);
        emit(g, i + 1);
    }
    return hidden;
}

torch::Tensor SwinUNETRImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 5, "SwinUNETR expects (B, C, T, H, W)");
    std::int64_t factor = spec.downsample_factor();
    for (int axis = 2; axis <= 4; ++axis) {
        if (x.size(axis) < factor || x.size(axis) % factor != 0)
            throw DataError("SwinUNETR: input axes must be divisible by " +
                            std::to_string(factor));
    }
    const int S = spec.num_stages();
    auto hidden = encode(x);

    torch::Tensor y = decoders[0]->forward(bottleneck(hidden[S]), hidden[S - 1]);
    for (int k = 1; k <= S - 1; ++k) {
        torch::Tensor skip = enc_skips[S - 1 - k]->forward(hidden[S - 1 - k]);
        y = decoders[k]->forward(y, skip);
    }
    y = decoders[S]->forward(y, enc_input(x));
    return head(y);
}

std::int64_t count_parameters(const torch::nn::Module& m) {
    std::int64_t n = 0;
    for (const auto& p : m.parameters())
        if (p.requires_grad()) n += p.numel();
    return n;
}

void init_transformer_weights(torch::nn::Module& m) {
    for (auto& mod : m.modules(/*include_self=*/false)) {
        if (auto* lin = mod->as<torch::nn::Linear>()) {
            trunc_normal_(lin->weight, 0.02);
            if (lin->bias.defined()) {
                torch::NoGradGuard g;
                lin->bias.zero_();
            }
        }
    }
}

}  // namespace crackseq::nets
