#include "adclick/network.hpp"

#include <cmath>
#include <numeric>

#include "adclick/reference_bank.hpp"
#include "adclick/tensor_utils.hpp"

namespace adclick::network {

namespace F = torch::nn::functional;

std::string to_string(Mode mode) { return mode == Mode::Interactive ? "interactive" : "seg"; }

Mode parse_mode(const std::string& name) {
    if (name == "interactive") return Mode::Interactive;
    if (name == "seg") return Mode::Seg;
    throw Error(ErrorCode::InvalidArgument, "unknown model mode '" + name + "'");
}

ModelConfig ModelConfig::full(Mode mode) {
    ModelConfig c;
    c.mode = mode;
    if (mode == Mode::Seg) c.scales = {8, 4};
    return c;
}

ModelConfig ModelConfig::tiny(Mode mode) {
    ModelConfig c;
    c.mode = mode;
    c.image_size = 64;
    c.image_backbone = "vit-tiny";
    c.vit_patch = 8;
    c.vit_dim = 64;
    c.vit_depth = 2;
    c.vit_heads = 4;
    c.residual_stride = 8;
    c.d_f = 64;
    c.z_dim = 64;
    c.text_dim = 64;
    c.swin_heads = 4;
    c.neck_dim = 32;
    if (mode == Mode::Seg) c.scales = {8, 4};
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, "model config: " + msg); };
    if (image_size <= 0 || vit_patch <= 0 || vit_dim <= 0 || vit_depth < 0 || vit_heads <= 0 || d_f <= 0 ||
        z_dim <= 0 || text_dim <= 0 || swin_heads <= 0 || swin_window <= 0 || neck_dim <= 0 || residual_stride <= 0) {
        fail("dimensions must be positive");
    }
    if (swin_blocks < 1) fail("swin_blocks must be >= 1");
    if (vit_dim % vit_heads != 0) fail("vit_dim must be divisible by vit_heads");
    if (d_f % swin_heads != 0) fail("d_f must be divisible by swin_heads");
    if (scales.empty()) fail("scales must not be empty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (scales[i] <= 0) fail("scale denominators must be positive");
        if (i > 0 && scales[i] >= scales[i - 1]) fail("scales must be strictly increasing (1/32 < 1/16 < ...)");
        if (image_size % scales[i] != 0) fail("image_size must be divisible by every scale denominator");
    }
    if (image_size % vit_patch != 0 || image_size % residual_stride != 0) {
        fail("image_size must be divisible by the patch size and residual stride");
    }
    if (!use_image_branch && !use_residual_branch) fail("at least one branch must be enabled");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"mode", to_string(c.mode)},
                       {"image_size", c.image_size},
                       {"image_backbone", c.image_backbone},
                       {"vit_patch", c.vit_patch},
                       {"vit_dim", c.vit_dim},
                       {"vit_depth", c.vit_depth},
                       {"vit_heads", c.vit_heads},
                       {"vit_mlp_ratio", c.vit_mlp_ratio},
                       {"residual_stride", c.residual_stride},
                       {"d_f", c.d_f},
                       {"z_dim", c.z_dim},
                       {"text_dim", c.text_dim},
                       {"swin_blocks", c.swin_blocks},
                       {"swin_heads", c.swin_heads},
                       {"swin_window", c.swin_window},
                       {"scales", c.scales},
                       {"neck_dim", c.neck_dim},
                       {"use_image_branch", c.use_image_branch},
                       {"use_residual_branch", c.use_residual_branch},
                       {"use_language", c.use_language}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    const Mode mode = parse_mode(j.value("mode", std::string("interactive")));
    const std::string preset = j.value("preset", std::string("full"));
    if (preset == "tiny") {
        c = ModelConfig::tiny(mode);
    } else if (preset == "full") {
        c = ModelConfig::full(mode);
    } else {
        throw Error(ErrorCode::InvalidArgument, "unknown model preset '" + preset + "'");
    }
    c.image_size = j.value("image_size", c.image_size);
    c.image_backbone = j.value("image_backbone", c.image_backbone);
    c.vit_patch = j.value("vit_patch", c.vit_patch);
    c.vit_dim = j.value("vit_dim", c.vit_dim);
    c.vit_depth = j.value("vit_depth", c.vit_depth);
    c.vit_heads = j.value("vit_heads", c.vit_heads);
    c.vit_mlp_ratio = j.value("vit_mlp_ratio", c.vit_mlp_ratio);
    c.residual_stride = j.value("residual_stride", c.residual_stride);
    c.d_f = j.value("d_f", c.d_f);
    c.z_dim = j.value("z_dim", c.z_dim);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.swin_blocks = j.value("swin_blocks", c.swin_blocks);
    c.swin_heads = j.value("swin_heads", c.swin_heads);
    c.swin_window = j.value("swin_window", c.swin_window);
    c.scales = j.value("scales", c.scales);
    c.neck_dim = j.value("neck_dim", c.neck_dim);
    c.use_image_branch = j.value("use_image_branch", c.use_image_branch);
    c.use_residual_branch = j.value("use_residual_branch", c.use_residual_branch);
    c.use_language = j.value("use_language", c.use_language);
}

namespace {

void init_linear(torch::nn::Linear& layer) {
    torch::NoGradGuard no_grad;
    torch::nn::init::normal_(layer->weight, 0.0, 0.02);
    if (layer->options.bias()) layer->bias.zero_();
}

int norm_groups(int channels) { return std::gcd(channels, 8); }

torch::Tensor resize(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
    if (x.size(2) == h && x.size(3) == w) return x;
    if (x.size(2) > h && x.size(3) > w) {
        return F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(std::vector<std::int64_t>{h, w}));
    }
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{h, w})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

}  // namespace

MlpImpl::MlpImpl(int dim, int hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
    init_linear(fc1);
    init_linear(fc2);
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x))); }

VitBlockImpl::VitBlockImpl(int dim, int heads_, double mlp_ratio) : heads(heads_) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    mlp = register_module("mlp", Mlp(dim, static_cast<int>(dim * mlp_ratio)));
    init_linear(qkv);
    init_linear(proj);
}

torch::Tensor VitBlockImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto n = x.size(1);
    const auto c = x.size(2);
    const auto hd = c / heads;
    auto t = qkv(norm1(x)).reshape({b, n, 3, heads, hd}).permute({2, 0, 3, 1, 4});
    auto q = t[0];
    auto k = t[1];
    auto v = t[2];
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
    auto y = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c});
    auto h = x + proj(y);
    return h + mlp(norm2(h));
}

ImageBranchImpl::ImageBranchImpl(const ModelConfig& config) : grid(config.image_size / config.vit_patch) {
    patch_embed = register_module(
        "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(6, config.vit_dim, config.vit_patch).stride(config.vit_patch)));
    {
        torch::NoGradGuard no_grad;
        patch_embed->weight.narrow(1, 3, 3).zero_();
    }
    pos_embed = register_parameter("pos_embed", torch::randn({1, grid * grid, config.vit_dim}) * 0.02);
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < config.vit_depth; ++i) {
        blocks->push_back(VitBlock(config.vit_dim, config.vit_heads, config.vit_mlp_ratio));
    }
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.vit_dim})));
}

torch::Tensor ImageBranchImpl::forward(const torch::Tensor& image, const torch::Tensor& click_maps) {
    auto x = patch_embed(torch::cat({image, click_maps}, 1));
    const auto b = x.size(0);
    const auto d = x.size(1);
    const auto gh = x.size(2);
    const auto gw = x.size(3);
    auto tokens = x.flatten(2).transpose(1, 2);
    auto pos = pos_embed;
    if (gh != grid || gw != grid) {
        pos = pos.reshape({1, grid, grid, d}).permute({0, 3, 1, 2});
        pos = F::interpolate(pos, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{gh, gw})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
        pos = pos.permute({0, 2, 3, 1}).reshape({1, gh * gw, d});
    }
    tokens = tokens + pos;
    for (const auto& block : *blocks) tokens = block->as<VitBlock>()->forward(tokens);
    tokens = norm(tokens);
    return tokens.transpose(1, 2).reshape({b, d, gh, gw});
}

WindowAttentionImpl::WindowAttentionImpl(int dim, int heads_, int window_) : heads(heads_), window(window_) {
    qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    init_linear(qkv);
    init_linear(proj);
    relative_bias = register_parameter("relative_bias", torch::zeros({(2 * window - 1) * (2 * window - 1), heads}));
    torch::NoGradGuard no_grad;
    torch::nn::init::normal_(relative_bias, 0.0, 0.02);
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, int ws, const torch::Tensor& mask) {
    const auto bw = x.size(0);
    const auto n = x.size(1);
    const auto c = x.size(2);
    const auto hd = c / heads;
    auto t = qkv(x).reshape({bw, n, 3, heads, hd}).permute({2, 0, 3, 1, 4});
    auto q = t[0];
    auto k = t[1];
    auto v = t[2];
    auto attn = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));

    std::vector<std::int64_t> index(static_cast<std::size_t>(n * n));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const int dy = i / ws - j / ws + window - 1;
            const int dx = i % ws - j % ws + window - 1;
            index[static_cast<std::size_t>(i * n + j)] = dy * (2 * window - 1) + dx;
        }
    }
    auto idx = torch::tensor(index, torch::TensorOptions().dtype(torch::kInt64).device(x.device()));
    auto bias = relative_bias.index_select(0, idx).reshape({n, n, heads}).permute({2, 0, 1});
    attn = attn + bias.unsqueeze(0);
    if (mask.defined()) {
        const auto nw = mask.size(0);
        attn = attn.reshape({bw / nw, nw, heads, n, n}) + mask.unsqueeze(1).unsqueeze(0);
        attn = attn.reshape({bw, heads, n, n});
    }
    attn = torch::softmax(attn, -1);
    return proj(torch::matmul(attn, v).transpose(1, 2).reshape({bw, n, c}));
}

SwinBlockImpl::SwinBlockImpl(int dim, int heads, int window_, bool shifted_) : window(window_), shifted(shifted_) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", WindowAttention(dim, heads, window));
    mlp = register_module("mlp", Mlp(dim, 4 * dim));
}

namespace {

// [B, H, W, C] -> [B * nW, ws * ws, C]
torch::Tensor window_partition(const torch::Tensor& x, int ws) {
    const auto b = x.size(0);
    const auto h = x.size(1);
    const auto w = x.size(2);
    const auto c = x.size(3);
    return x.reshape({b, h / ws, ws, w / ws, ws, c}).permute({0, 1, 3, 2, 4, 5}).reshape({-1, ws * ws, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, int ws, std::int64_t b, std::int64_t h, std::int64_t w) {
    const auto c = windows.size(2);
    return windows.reshape({b, h / ws, w / ws, ws, ws, c}).permute({0, 1, 3, 2, 4, 5}).reshape({b, h, w, c});
}

}  // namespace

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto h = x.size(1);
    const auto w = x.size(2);
    const auto c = x.size(3);
    const int ws = static_cast<int>(std::min<std::int64_t>({window, h, w}));
    const int shift = (shifted && std::min(h, w) > window) ? ws / 2 : 0;

    auto y = norm1(x);
    const auto pad_h = (ws - h % ws) % ws;
    const auto pad_w = (ws - w % ws) % ws;
    if (pad_h || pad_w) {
        y = F::pad(y.permute({0, 3, 1, 2}), F::PadFuncOptions({0, pad_w, 0, pad_h})).permute({0, 2, 3, 1});
    }
    const auto hp = h + pad_h;
    const auto wp = w + pad_w;

    torch::Tensor mask;
    if (shift > 0) {
        y = torch::roll(y, {-shift, -shift}, {1, 2});
        auto img_mask = torch::zeros({1, hp, wp, 1}, x.options());
        int cnt = 0;
        const std::int64_t hs[4] = {0, hp - ws, hp - shift, hp};
        const std::int64_t wsl[4] = {0, wp - ws, wp - shift, wp};
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                img_mask.narrow(1, hs[i], hs[i + 1] - hs[i]).narrow(2, wsl[j], wsl[j + 1] - wsl[j]).fill_(cnt++);
            }
        }
        auto mw = window_partition(img_mask, ws).squeeze(-1);  // [nW, N]
        mask = (mw.unsqueeze(1) - mw.unsqueeze(2)).ne(0).to(x.dtype()) * -100.0;
    }
    auto windows = attn(window_partition(y, ws), ws, mask);
    y = window_reverse(windows, ws, b, hp, wp);
    if (shift > 0) y = torch::roll(y, {shift, shift}, {1, 2});
    if (pad_h || pad_w) y = y.narrow(1, 0, h).narrow(2, 0, w);
    auto out = x + y;
    (void)c;
    return out + mlp(norm2(out));
}

ResidualBranchImpl::ResidualBranchImpl(const ModelConfig& config) {
    embed = register_module("embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.d_f, config.d_f, 1)));
    click_embed = register_module(
        "click_embed",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(3, config.d_f, config.residual_stride).stride(config.residual_stride)));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < config.swin_blocks; ++i) {
        blocks->push_back(SwinBlock(config.d_f, config.swin_heads, config.swin_window, i % 2 == 1));
    }
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.d_f})));
}

torch::Tensor ResidualBranchImpl::forward(const torch::Tensor& posfar, const torch::Tensor& click_maps) {
    auto clicks = click_embed(click_maps);
    if (clicks.sizes() != posfar.sizes()) {
        throw Error(ErrorCode::ShapeMismatch, "PosFAR grid does not match image resolution / residual stride");
    }
    auto x = (embed(posfar) + clicks).permute({0, 2, 3, 1});
    for (const auto& block : *blocks) x = block->as<SwinBlock>()->forward(x);
    return norm(x).permute({0, 3, 1, 2}).contiguous();
}

ConvNeckImpl::ConvNeckImpl(int in, int out) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
    norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out), out)));
}

torch::Tensor ConvNeckImpl::forward(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
    return resize(torch::gelu(norm(conv(x))), h, w);
}

torch::nn::Conv2d make_zero_conv(int channels) {
    torch::nn::Conv2d conv(torch::nn::Conv2dOptions(channels, channels, 1));
    torch::NoGradGuard no_grad;
    conv->weight.zero_();
    conv->bias.zero_();
    return conv;
}

DecoderImpl::DecoderImpl(int dim) {
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
    norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(dim), dim)));
    norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(dim), dim)));
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, 1, 1)));
}

torch::Tensor DecoderImpl::forward(const std::vector<torch::Tensor>& pyramid) {
    auto y = pyramid.front();
    for (std::size_t i = 1; i < pyramid.size(); ++i) {
        y = resize(y, pyramid[i].size(2), pyramid[i].size(3)) + pyramid[i];
    }
    y = torch::gelu(norm1(conv1(y)));
    y = torch::gelu(norm2(conv2(y)));
    return head(y);
}

AdClickModelImpl::AdClickModelImpl(const ModelConfig& config_) : config(config_) {
    config.validate();
    if (config.use_image_branch) image_branch = register_module("image_branch", ImageBranch(config));
    if (config.use_residual_branch) {
        residual_branch = register_module("residual_branch", ResidualBranch(config));
        if (config.use_language) {
            linguistic_encoder =
                register_module("linguistic_encoder", language::LinguisticEncoder(config.text_dim, config.z_dim));
            cross_attention = register_module("cross_attention", language::CrossAttentionFusion(config.d_f, config.z_dim));
        }
    }
    image_necks = register_module("image_necks", torch::nn::ModuleList());
    residual_necks = register_module("residual_necks", torch::nn::ModuleList());
    zero_convs = register_module("zero_convs", torch::nn::ModuleList());
    for (std::size_t i = 0; i < config.scales.size(); ++i) {
        if (config.use_image_branch) image_necks->push_back(ConvNeck(config.vit_dim, config.neck_dim));
        if (config.use_residual_branch) residual_necks->push_back(ConvNeck(config.d_f, config.neck_dim));
        if (config.use_image_branch && config.use_residual_branch) zero_convs->push_back(make_zero_conv(config.neck_dim));
    }
    decoder = register_module("decoder", Decoder(config.neck_dim));
}

ForwardOutput AdClickModelImpl::forward(const ForwardInputs& in) {
    if (in.image.dim() != 4 || in.image.size(1) != 3) {
        throw Error(ErrorCode::ShapeMismatch, "forward expects a [B, 3, H, W] image");
    }
    const auto b = in.image.size(0);
    const auto h = in.image.size(2);
    const auto w = in.image.size(3);
    const int coarsest = std::max({config.scales.front(), config.vit_patch, config.residual_stride});
    if (h % coarsest != 0 || w % coarsest != 0) {
        throw Error(ErrorCode::ShapeMismatch, "input resolution must be divisible by " + std::to_string(coarsest));
    }
    if (in.click_maps.dim() != 4 || in.click_maps.size(0) != b || in.click_maps.size(1) != 3 ||
        in.click_maps.size(2) != h || in.click_maps.size(3) != w) {
        throw Error(ErrorCode::ShapeMismatch, "click maps must be [B, 3, H, W]");
    }

    torch::Tensor f_n;
    if (config.use_image_branch) f_n = image_branch(in.image, in.click_maps);

    torch::Tensor r;
    if (config.use_residual_branch) {
        if (!in.posfar.defined() || in.posfar.dim() != 4 || in.posfar.size(0) != b || in.posfar.size(1) != config.d_f) {
            throw Error(ErrorCode::ShapeMismatch, "PosFAR input must be [B, d_f, h_f, w_f]");
        }
        r = residual_branch(in.posfar, in.click_maps);
        if (config.use_language) {
            if (!in.text.defined() || in.text.dim() != 3 || in.text.size(0) != b || in.text.size(2) != config.text_dim) {
                throw Error(ErrorCode::ShapeMismatch, "text embedding must be [B, T, text_dim]");
            }
            r = cross_attention(r, linguistic_encoder(in.text), in.text_mask);
        }
    }

    ForwardOutput out;
    for (std::size_t i = 0; i < config.scales.size(); ++i) {
        const auto sh = h / config.scales[i];
        const auto sw = w / config.scales[i];
        torch::Tensor f_img;
        torch::Tensor f_res;
        if (config.use_image_branch) f_img = image_necks[i]->as<ConvNeck>()->forward(f_n, sh, sw);
        if (config.use_residual_branch) f_res = residual_necks[i]->as<ConvNeck>()->forward(r, sh, sw);
        torch::Tensor fused;
        if (f_img.defined() && f_res.defined()) {
            auto* zc = zero_convs[i]->as<torch::nn::Conv2d>();
            fused = config.mode == Mode::Interactive ? f_img + zc->forward(f_res) : zc->forward(f_img) + f_res;
        } else {
            fused = f_img.defined() ? f_img : f_res;
        }
        out.pyramid.image.push_back(f_img);
        out.pyramid.residual.push_back(f_res);
        out.pyramid.fused.push_back(fused);
    }

    auto low = decoder(out.pyramid.fused);
    out.logits = F::interpolate(low, F::InterpolateFuncOptions()
                                         .size(std::vector<std::int64_t>{h, w})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
    require_finite(out.logits, "forward");
    out.probs = torch::sigmoid(out.logits);
    return out;
}

std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> AdClickModelImpl::trainable_submodules() {
    std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> out;
    if (image_branch) {
        out.emplace_back("image_branch", image_branch.ptr());
        out.emplace_back("image_necks", image_necks.ptr());
    }
    if (residual_branch) {
        out.emplace_back("residual_branch", residual_branch.ptr());
        out.emplace_back("residual_necks", residual_necks.ptr());
    }
    if (linguistic_encoder) {
        out.emplace_back("linguistic_encoder", linguistic_encoder.ptr());
        out.emplace_back("W_K", cross_attention->key.ptr());
        out.emplace_back("W_V", cross_attention->value.ptr());
        out.emplace_back("query_conv", cross_attention->query_conv.ptr());
    }
    if (!zero_convs->is_empty()) out.emplace_back("zero_convs", zero_convs.ptr());
    out.emplace_back("decoder", decoder.ptr());
    return out;
}

torch::Tensor click_maps_tensor(const clicks::ClickEncoding& encoding) {
    return torch::stack({map_to_tensor(encoding.positive_map), map_to_tensor(encoding.negative_map),
                         map_to_tensor(encoding.previous_mask)});
}

torch::Tensor normalized_focal_loss(const torch::Tensor& prediction, const torch::Tensor& target, double gamma,
                                    torch::Tensor* weights_out) {
    if (prediction.sizes() != target.sizes()) throw Error(ErrorCode::ShapeMismatch, "focal loss: shapes differ");
    if (gamma < 0.0) throw Error(ErrorCode::InvalidArgument, "focal loss: gamma must be >= 0");
    const auto t = target.to(prediction.dtype());
    auto pt = torch::where(t > 0.5, prediction, 1.0 - prediction).clamp(1e-12, 1.0);
    auto beta = torch::pow(1.0 - pt, gamma);
    auto norm = beta.sum().detach().clamp_min(1e-30);
    auto weights = beta / norm;
    if (weights_out) *weights_out = weights;
    return (weights * -torch::log(pt)).sum();
}

void save_checkpoint(const AdClickModel& model, std::int64_t step, const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive;
    model->save(archive);
    nlohmann::json config = model->config;
    archive.write("adclick.format_version", c10::IValue(kCheckpointFormatVersion));
    archive.write("adclick.config", c10::IValue(config.dump()));
    archive.write("adclick.step", c10::IValue(step));
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    try {
        archive.save_to(path.string());
    } catch (const c10::Error& e) {
        throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
    if (!std::filesystem::is_regular_file(path)) throw Error(ErrorCode::Io, "checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw Error(ErrorCode::Io, "cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    c10::IValue version;
    c10::IValue config_json;
    c10::IValue step;
    if (!archive.try_read("adclick.format_version", version) || version.toInt() != kCheckpointFormatVersion) {
        throw Error(ErrorCode::CheckpointMismatch, "unsupported checkpoint format in " + path.string());
    }
    archive.read("adclick.config", config_json);
    archive.read("adclick.step", step);

    LoadedCheckpoint out;
    out.config = nlohmann::json::parse(config_json.toStringRef()).get<ModelConfig>();
    if (expected && !(*expected == out.config)) {
        throw Error(ErrorCode::CheckpointMismatch, "checkpoint config " + nlohmann::json(out.config).dump() +
                                                       " does not match " + nlohmann::json(*expected).dump());
    }
    out.step = step.toInt();
    out.model = AdClickModel(out.config);
    try {
        out.model->load(archive);
    } catch (const c10::Error& e) {
        throw Error(ErrorCode::CheckpointMismatch, "checkpoint parameters do not match: " + std::string(e.what_without_backtrace()));
    }
    out.model->eval();
    const auto bytes = datasets::binary::read_file(path);
    out.fingerprint = hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
    return out;
}

clicks::AnomalyMask predict_mask(AdClickModel& model, const InferenceInputs& inputs,
                                 std::span<const clicks::Click> click_history, const clicks::AnomalyMask& previous,
                                 int click_radius, float threshold) {
    if (!model) throw Error(ErrorCode::ModelNotLoaded, "no model loaded");
    torch::NoGradGuard no_grad;
    const int h = static_cast<int>(inputs.image.size(1));
    const int w = static_cast<int>(inputs.image.size(2));
    const auto encoding = clicks::encode_clicks(click_history, previous, h, w, click_radius);
    const auto device = model->decoder->head->weight.device();
    ForwardInputs fi;
    fi.image = inputs.image.unsqueeze(0).to(device);
    fi.click_maps = click_maps_tensor(encoding).unsqueeze(0).to(device);
    if (inputs.posfar.defined()) fi.posfar = inputs.posfar.unsqueeze(0).to(device);
    if (inputs.text.defined()) fi.text = inputs.text.unsqueeze(0).to(device);
    auto out = model->forward(fi);
    return clicks::AnomalyMask{tensor_to_scores(out.probs[0][0]), threshold};
}

}  // namespace adclick::network
