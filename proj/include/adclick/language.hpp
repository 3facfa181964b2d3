#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "adclick/datasets.hpp"

namespace adclick::language {

/// "Give {count} phrases describing the {defect} defect on a {object}."
std::string render_prompt_template(const std::string& object, const std::string& defect, int count);

/// Lower-cased alphanumeric word tokens.
std::vector<std::string> tokenize(const std::string& text);

/// Frozen text embedding: prompt -> [T, dim] token vectors.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual torch::Tensor embed(const std::string& prompt) const = 0;
    virtual int dim() const = 0;
    virtual std::string fingerprint() const = 0;
};

struct TextEncoderConfig {
    std::string kind = "hashing";  // hashing | table
    int dim = 768;
    int max_tokens = 32;
    std::uint64_t seed = 0;
    std::string path;  // table: precomputed embeddings file
};

/// Each word maps to a fixed pseudo-random vector seeded by its hash. A
/// stand-in for a pretrained encoder at desk scale.
class HashingTextEncoder final : public TextEncoder {
public:
    explicit HashingTextEncoder(const TextEncoderConfig& config) : config_(config) {}
    torch::Tensor embed(const std::string& prompt) const override;
    int dim() const override { return config_.dim; }
    std::string fingerprint() const override;

private:
    TextEncoderConfig config_;
};

/// Precomputed embeddings (e.g. BERT last hidden states) keyed by prompt
/// text, loaded from JSON: {"dim": D, "fingerprint": "...",
/// "entries": {"prompt": [[...], ...]}}. Unknown prompts raise
/// EncoderUnavailable.
class EmbeddingTableTextEncoder final : public TextEncoder {
public:
    explicit EmbeddingTableTextEncoder(const TextEncoderConfig& config);
    torch::Tensor embed(const std::string& prompt) const override;
    int dim() const override { return dim_; }
    std::string fingerprint() const override { return fingerprint_; }

private:
    int dim_ = 0;
    std::string fingerprint_;
    std::map<std::string, torch::Tensor> table_;
};

std::unique_ptr<TextEncoder> make_text_encoder(const TextEncoderConfig& config);

/// Trainable per-token map from the text embedding to the linguistic feature space.
struct LinguisticEncoderImpl : torch::nn::Module {
    LinguisticEncoderImpl(int text_dim, int z_dim);
    torch::Tensor forward(const torch::Tensor& text);  // [B, T, text_dim] -> [B, T, Z]

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(LinguisticEncoder);

/// Language-to-residual cross-attention. Queries come from a 1x1 conv plus
/// channel LayerNorm over the residual map, keys and values from bias-free
/// projections of the tokens; the softmax runs over tokens and the result is
/// added back onto the residual map.
struct CrossAttentionFusionImpl : torch::nn::Module {
    CrossAttentionFusionImpl(int d_f, int z_dim);

    /// residual [B, d_f, h, w], tokens [B, T, Z], token_mask [B, T] (true =
    /// valid, may be undefined). Writes [B, h*w, T] weights to
    /// `attention_out` when given.
    torch::Tensor forward(const torch::Tensor& residual, const torch::Tensor& tokens,
                          const torch::Tensor& token_mask = {}, torch::Tensor* attention_out = nullptr);

    torch::nn::Conv2d query_conv{nullptr};
    torch::nn::LayerNorm query_norm{nullptr};
    torch::nn::Linear key{nullptr}, value{nullptr};
    int d_f;
};
TORCH_MODULE(CrossAttentionFusion);

struct LinguisticFeature {
    torch::Tensor tokens;  // [T, Z]
    std::string source_prompt;
    std::string object;
    std::string defect;
};

LinguisticFeature encode_prompt(const std::string& prompt, const TextEncoder& text_encoder,
                                LinguisticEncoder& linguistic_encoder, const datasets::PromptKey& key = {});

/// [h, w, d_f] residual map fused with a single linguistic feature.
torch::Tensor fuse_language(const torch::Tensor& residual_hwd, const LinguisticFeature& feature,
                            CrossAttentionFusion& params);

struct TokenBatch {
    torch::Tensor tokens;  // [B, T_max, D]
    torch::Tensor mask;    // [B, T_max] bool
};

/// Right-pads a list of [T_i, D] tensors.
TokenBatch pad_tokens(const std::vector<torch::Tensor>& sequences);

/// Masked mean over tokens: [B, T, Z] -> [B, Z].
torch::Tensor mean_pool(const torch::Tensor& tokens, const torch::Tensor& mask);

/// Uniform draw from the phrases of `key`.
std::string select_prompt(const datasets::PromptCorpus& corpus, const datasets::PromptKey& key, std::mt19937_64& rng);

/// Supervised contrastive loss over pooled features: rows sharing a group id
/// are pulled together, others pushed apart. Zero when no row has a partner.
torch::Tensor prompt_contrastive_loss(const torch::Tensor& pooled, const std::vector<int>& groups, double temperature);

}  // namespace adclick::language
