#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "adclick/reference_bank.hpp"

namespace adclick::posfar {

/// Backbone that yields a mid-level and a deep feature map for a batch of
/// normalized images. The mid map sets the PCF grid (H / stride).
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;

    /// [B, 3, H, W] -> {mid [B, C2, H/s, W/s], deep [B, C3, H/2s, W/2s]}
    virtual std::pair<torch::Tensor, torch::Tensor> backbone(const torch::Tensor& images) const = 0;

    virtual int input_size() const = 0;
    virtual int stride() const = 0;
    virtual int dim() const = 0;
    virtual std::string fingerprint() const = 0;

    int grid_size() const { return input_size() / stride(); }
};

struct ExtractorConfig {
    std::string kind = "conv";  // conv | torchscript
    int input_size = 1024;
    int stride = 8;
    int dim = 512;
    int width = 32;             // conv: channels of the first stage
    std::uint64_t seed = 0;     // conv: weight seed
    std::string path;           // torchscript: module file
};

/// Seeded random-weight CNN. Weights come from mt19937_64 so the extractor
/// (and its fingerprint) is reproducible across runs.
class RandomConvExtractor final : public FeatureExtractor {
public:
    explicit RandomConvExtractor(const ExtractorConfig& config);

    std::pair<torch::Tensor, torch::Tensor> backbone(const torch::Tensor& images) const override;
    int input_size() const override { return config_.input_size; }
    int stride() const override { return config_.stride; }
    int dim() const override { return config_.dim; }
    std::string fingerprint() const override;

private:
    ExtractorConfig config_;
    std::vector<torch::Tensor> weights_;
};

/// TorchScript module whose forward returns (mid, deep) feature maps, e.g. a
/// traced WideResNet-50 cut after layer2 and layer3.
class ScriptedExtractor final : public FeatureExtractor {
public:
    explicit ScriptedExtractor(const ExtractorConfig& config);
    ~ScriptedExtractor() override;

    std::pair<torch::Tensor, torch::Tensor> backbone(const torch::Tensor& images) const override;
    int input_size() const override { return config_.input_size; }
    int stride() const override { return config_.stride; }
    int dim() const override { return config_.dim; }
    std::string fingerprint() const override;

private:
    struct Impl;
    ExtractorConfig config_;
    std::string file_hash_;
    std::unique_ptr<Impl> impl_;
};

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& config);

/// Deep map bilinearly aligned to the mid grid, concatenated, 3x3 locally
/// averaged, then channel-pooled to `dim`. Returns [B, dim, h, w].
torch::Tensor aggregate_pcf(const torch::Tensor& mid, const torch::Tensor& deep, int dim);

struct PcfGrid {
    torch::Tensor vectors;  // [h_f, w_f, d_f] float32, CPU, contiguous
    int source_h = 0;
    int source_w = 0;

    int grid_h() const { return static_cast<int>(vectors.size(0)); }
    int grid_w() const { return static_cast<int>(vectors.size(1)); }
    int dim() const { return static_cast<int>(vectors.size(2)); }
};

/// `image` is a normalized [3, H, W] tensor at the extractor's resolution.
PcfGrid extract_pcf(const torch::Tensor& image, const FeatureExtractor& extractor);

/// Batched variant for bank construction: [B, 3, H, W] -> [B, h, w, d].
torch::Tensor extract_pcf_batch(const torch::Tensor& images, const FeatureExtractor& extractor);

struct MatchResult {
    torch::Tensor matched;               // [h_f, w_f, d_f]
    std::vector<std::int64_t> indices;   // bank index per cell, row-major
};

/// Position-constrained nearest neighbour: each cell takes the bank vector
/// with the smallest Euclidean distance among entries whose stored cell lies
/// within Chebyshev distance `window_radius`. Ties go to the lowest index.
MatchResult match_reference(const PcfGrid& pcf, const datasets::ReferenceBank& bank, int window_radius);

struct PosFarTensor {
    torch::Tensor residuals;  // [h_f, w_f, d_f], all entries >= 0
    double theta = 2.0;
    std::vector<std::int64_t> matched_indices;

    int grid_h() const { return static_cast<int>(residuals.size(0)); }
    int grid_w() const { return static_cast<int>(residuals.size(1)); }
    int dim() const { return static_cast<int>(residuals.size(2)); }
    /// [d_f, h_f, w_f] view for convolutional consumers.
    torch::Tensor channels_first() const { return residuals.permute({2, 0, 1}).contiguous(); }
};

/// r_j = |p_j - p*_j| ^ theta, element-wise.
PosFarTensor compute_posfar(const torch::Tensor& pcf, const torch::Tensor& matched, double theta);
PosFarTensor compute_posfar(const PcfGrid& pcf, const MatchResult& match, double theta);

/// extract_pcf -> match_reference -> compute_posfar.
PosFarTensor posfar_for_image(const torch::Tensor& image, const FeatureExtractor& extractor,
                              const datasets::ReferenceBank& bank, int window_radius, double theta);

/// Debug dump in the reference-bank layout with magic "ADCPFAR\0", a theta
/// field (f64) after the header and matched indices (i64) after the vectors.
void save_posfar(const PosFarTensor& posfar, const std::filesystem::path& path);
PosFarTensor load_posfar(const std::filesystem::path& path);

}  // namespace adclick::posfar
