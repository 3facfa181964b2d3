#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "adclick/common.hpp"
#include "adclick/datasets.hpp"
#include "adclick/language.hpp"
#include "adclick/posfar.hpp"
#include "adclick/reference_bank.hpp"

namespace adclick::pipeline {

struct PosFarSettings {
    int window_radius = 1;
    double theta = 2.0;
    double coreset_fraction = 1.0;
};

void to_json(nlohmann::json& j, const PosFarSettings& s);
void from_json(const nlohmann::json& j, PosFarSettings& s);

/// Feature extractor plus the reference banks of every known category.
class ResidualContext {
public:
    ResidualContext(std::shared_ptr<const posfar::FeatureExtractor> extractor, PosFarSettings settings);

    void add_bank(datasets::ReferenceBank bank);
    bool has_bank(const std::string& category) const { return banks_.count(category) != 0; }
    const datasets::ReferenceBank& bank(const std::string& category) const;
    std::vector<std::string> categories() const;

    /// [3, H, W] normalized image -> [d_f, h_f, w_f] residual map. The image is
    /// resized to the extractor resolution when needed.
    torch::Tensor posfar(const torch::Tensor& image, const std::string& category) const;

    const posfar::FeatureExtractor& extractor() const { return *extractor_; }
    const PosFarSettings& settings() const { return settings_; }

private:
    std::shared_ptr<const posfar::FeatureExtractor> extractor_;
    PosFarSettings settings_;
    std::map<std::string, datasets::ReferenceBank> banks_;
};

/// Frozen phrase embeddings, cached per phrase. Safe to share between threads.
class PromptEmbeddings {
public:
    PromptEmbeddings(std::shared_ptr<const language::TextEncoder> encoder, datasets::PromptCorpus corpus);

    torch::Tensor embed(const std::string& phrase) const;
    /// A uniformly drawn phrase of `key`.
    torch::Tensor sample(const datasets::PromptKey& key, std::mt19937_64& rng) const;
    /// The key's first phrase; used wherever inference must be deterministic.
    torch::Tensor canonical(const datasets::PromptKey& key) const;
    const std::string& canonical_phrase(const datasets::PromptKey& key) const;

    const datasets::PromptCorpus& corpus() const { return corpus_; }
    const language::TextEncoder& encoder() const { return *encoder_; }

private:
    std::shared_ptr<const language::TextEncoder> encoder_;
    datasets::PromptCorpus corpus_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, torch::Tensor> cache_;
};

/// Image file -> normalized [3, size, size] tensor.
torch::Tensor load_image_tensor(const std::filesystem::path& path, int size);

/// One image with its pixel labels and click-independent features.
struct LabeledSample {
    std::string id;  // category/defect/stem
    std::string category;
    datasets::PromptKey key;
    torch::Tensor image;   // [3, H, W]
    torch::Tensor posfar;  // [d_f, h_f, w_f]
    BinaryMask mask;       // all zero for good samples
    bool defective = false;
};

std::string sample_id(const datasets::DatasetIndex& index, const datasets::Sample& sample);

/// Loads every sample of `index` (only defective ones when `defective_only`).
/// Prompt keys resolve through the corpus; good samples get the category's
/// first key when one exists.
std::vector<LabeledSample> load_labeled_samples(const datasets::DatasetIndex& index, const ResidualContext& residuals,
                                                const datasets::PromptCorpus& corpus, bool defective_only);

/// Dataset roots: an MVTec root holds one directory per category; a KSDD2
/// root is indexed as the single category "ksdd2".
struct DataSource {
    std::string root;
    std::string layout = "mvtec";
    std::vector<std::string> categories;  // empty: every category directory
    int image_size = 1024;
};

void to_json(nlohmann::json& j, const DataSource& s);
void from_json(const nlohmann::json& j, DataSource& s);

std::vector<std::string> list_categories(const DataSource& source);
datasets::DatasetIndex load_split(const DataSource& source, const std::string& category, datasets::Split split);

/// Builds (or loads from `bank_dir/<category>.bank`) the bank of each
/// category of `source` and registers it in `residuals`.
void ensure_banks(ResidualContext& residuals, const DataSource& source, const std::filesystem::path& bank_dir,
                  std::uint64_t seed, bool rebuild = false);

}  // namespace adclick::pipeline
