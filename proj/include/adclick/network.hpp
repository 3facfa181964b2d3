#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "adclick/clicks.hpp"
#include "adclick/language.hpp"

namespace adclick::network {

enum class Mode { Interactive, Seg };

struct ModelConfig {
    Mode mode = Mode::Interactive;
    int image_size = 1024;

    // Image branch (plain ViT over image + click + previous-mask channels).
    std::string image_backbone = "vit-b";
    int vit_patch = 16;
    int vit_dim = 768;
    int vit_depth = 12;
    int vit_heads = 12;
    double vit_mlp_ratio = 4.0;

    // Residual branch over the PosFAR grid.
    int residual_stride = 8;
    int d_f = 512;
    int z_dim = 512;
    int text_dim = 768;
    int swin_blocks = 2;
    int swin_heads = 32;
    int swin_window = 8;

    /// Pyramid scale denominators, coarsest first: 32, 16, 8, 4 means
    /// 1/32 ... 1/4 of the input resolution.
    std::vector<int> scales{32, 16, 8, 4};
    int neck_dim = 256;

    bool use_image_branch = true;
    bool use_residual_branch = true;
    bool use_language = true;

    /// Full-size defaults for the given mode.
    static ModelConfig full(Mode mode = Mode::Interactive);
    /// 64-dim, 64x64 configuration for desk-scale runs.
    static ModelConfig tiny(Mode mode = Mode::Interactive);

    int residual_grid() const { return image_size / residual_stride; }
    /// Throws InvalidArgument when the invariants do not hold.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);

// ---------------------------------------------------------------------------
// Building blocks

struct MlpImpl : torch::nn::Module {
    MlpImpl(int dim, int hidden);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Mlp);

struct VitBlockImpl : torch::nn::Module {
    VitBlockImpl(int dim, int heads, double mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x);  // [B, N, C]
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Linear qkv{nullptr}, proj{nullptr};
    Mlp mlp{nullptr};
    int heads;
};
TORCH_MODULE(VitBlock);

/// Image branch. Input channels are RGB plus positive-click, negative-click
/// and previous-mask maps; the patch-embedding weights of the three extra
/// channels start at zero.
struct ImageBranchImpl : torch::nn::Module {
    explicit ImageBranchImpl(const ModelConfig& config);
    torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& click_maps);  // -> [B, D, H/p, W/p]
    torch::nn::Conv2d patch_embed{nullptr};
    torch::Tensor pos_embed;
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm norm{nullptr};
    int grid;
};
TORCH_MODULE(ImageBranch);

struct WindowAttentionImpl : torch::nn::Module {
    WindowAttentionImpl(int dim, int heads, int window);
    /// x [B_w, N, C] with N = ws*ws (ws <= window); mask [nW, N, N] or undefined.
    torch::Tensor forward(const torch::Tensor& x, int ws, const torch::Tensor& mask);
    torch::nn::Linear qkv{nullptr}, proj{nullptr};
    torch::Tensor relative_bias;  // [(2*window-1)^2, heads]
    int heads, window;
};
TORCH_MODULE(WindowAttention);

struct SwinBlockImpl : torch::nn::Module {
    SwinBlockImpl(int dim, int heads, int window, bool shifted);
    torch::Tensor forward(const torch::Tensor& x);  // [B, H, W, C]
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    WindowAttention attn{nullptr};
    Mlp mlp{nullptr};
    int window;
    bool shifted;
};
TORCH_MODULE(SwinBlock);

/// Linear embedding of the PosFAR map plus a strided click embedding,
/// followed by alternating regular/shifted Swin blocks.
struct ResidualBranchImpl : torch::nn::Module {
    explicit ResidualBranchImpl(const ModelConfig& config);
    torch::Tensor forward(const torch::Tensor& posfar, const torch::Tensor& click_maps);  // -> [B, d_f, h, w]
    torch::nn::Conv2d embed{nullptr}, click_embed{nullptr};
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(ResidualBranch);

/// 1x1 conv -> GroupNorm -> GELU -> resize to the scale's resolution.
struct ConvNeckImpl : torch::nn::Module {
    ConvNeckImpl(int in, int out);
    torch::Tensor forward(const torch::Tensor& x, std::int64_t h, std::int64_t w);
    torch::nn::Conv2d conv{nullptr};
    torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvNeck);

/// 1x1 conv with weights and bias initialized to exactly zero.
torch::nn::Conv2d make_zero_conv(int channels);

/// Top-down pyramid aggregation (upsample + add), two 3x3 conv layers and a
/// one-channel head.
struct DecoderImpl : torch::nn::Module {
    explicit DecoderImpl(int dim);
    torch::Tensor forward(const std::vector<torch::Tensor>& pyramid);  // coarse to fine -> logits at finest scale
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, head{nullptr};
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(Decoder);

struct ForwardInputs {
    torch::Tensor image;       // [B, 3, H, W] normalized
    torch::Tensor click_maps;  // [B, 3, H, W]: positive, negative, previous mask
    torch::Tensor posfar;      // [B, d_f, h_f, w_f]
    torch::Tensor text;        // [B, T, text_dim]
    torch::Tensor text_mask;   // [B, T] bool, may be undefined
};

struct Pyramid {
    std::vector<torch::Tensor> image;   // F_img_i (undefined when the branch is disabled)
    std::vector<torch::Tensor> residual;
    std::vector<torch::Tensor> fused;
};

struct ForwardOutput {
    torch::Tensor logits;  // [B, 1, H, W]
    torch::Tensor probs;   // [B, 1, H, W] in [0, 1]
    Pyramid pyramid;
};

struct AdClickModelImpl : torch::nn::Module {
    explicit AdClickModelImpl(const ModelConfig& config);

    ForwardOutput forward(const ForwardInputs& inputs);

    /// Submodule name -> module, for per-submodule gradient checks.
    std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> trainable_submodules();

    ModelConfig config;
    ImageBranch image_branch{nullptr};
    ResidualBranch residual_branch{nullptr};
    language::LinguisticEncoder linguistic_encoder{nullptr};
    language::CrossAttentionFusion cross_attention{nullptr};
    torch::nn::ModuleList image_necks{nullptr}, residual_necks{nullptr}, zero_convs{nullptr};
    Decoder decoder{nullptr};
};
TORCH_MODULE(AdClickModel);

/// Builds the three click channels [3, H, W] from an encoding.
torch::Tensor click_maps_tensor(const clicks::ClickEncoding& encoding);

/// Sum over pixels of w_i * -log(p_t,i) with w_i = (1 - p_t,i)^gamma divided
/// by the sum of all focal weights in the tensor (normalizer detached).
/// Equals mean binary cross-entropy at gamma = 0. Writes the weights to
/// `weights_out` when given.
torch::Tensor normalized_focal_loss(const torch::Tensor& prediction, const torch::Tensor& target, double gamma,
                                    torch::Tensor* weights_out = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints: a torch archive with every parameter and buffer plus
// "adclick.format_version", "adclick.config" (JSON) and "adclick.step".

inline constexpr std::int64_t kCheckpointFormatVersion = 1;

void save_checkpoint(const AdClickModel& model, std::int64_t step, const std::filesystem::path& path);

struct LoadedCheckpoint {
    AdClickModel model{nullptr};
    ModelConfig config;
    std::int64_t step = 0;
    std::string fingerprint;  // hash of the archive bytes
};

/// Loads the archive; when `expected` is given its structure must match
/// the stored config (CheckpointMismatch otherwise).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// ---------------------------------------------------------------------------
// Inference

/// Per-image tensors that stay fixed for a whole click session.
struct InferenceInputs {
    torch::Tensor image;   // [3, H, W]
    torch::Tensor posfar;  // [d_f, h_f, w_f]
    torch::Tensor text;    // [T, text_dim]
};

/// Runs one forward pass for the given clicks and previous mask.
clicks::AnomalyMask predict_mask(AdClickModel& model, const InferenceInputs& inputs,
                                 std::span<const clicks::Click> click_history, const clicks::AnomalyMask& previous,
                                 int click_radius, float threshold);

}  // namespace adclick::network
