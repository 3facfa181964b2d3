#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/common.hpp"

namespace adclick::datasets {

enum class Layout { MVTec, KSDD2 };
enum class Split { Train, Test };

Layout parse_layout(const std::string& name);
Split parse_split(const std::string& name);
std::string to_string(Layout layout);
std::string to_string(Split split);

inline constexpr const char* kGood = "good";

struct Sample {
    std::filesystem::path image_path;
    std::optional<std::filesystem::path> mask_path;
    std::string defect_type;

    bool defective() const { return defect_type != kGood; }
    bool operator==(const Sample&) const = default;
};

struct DatasetIndex {
    std::filesystem::path root;
    std::string category;
    Split split = Split::Train;
    Layout layout = Layout::MVTec;
    int image_size = 1024;
    std::vector<Sample> samples;

    std::size_t count_good() const;
    std::size_t count_defective() const;
    std::vector<std::string> defect_types() const;
    /// One-line "category/split: N good, M defective (types...)".
    std::string summary() const;

    bool operator==(const DatasetIndex&) const = default;
};

void to_json(nlohmann::json& j, const DatasetIndex& index);
void from_json(const nlohmann::json& j, DatasetIndex& index);

/// Indexes one split of a dataset.
///
/// MVTec: `root` is a category directory holding train/, test/ and
/// ground_truth/; the category name is the directory name.
/// KSDD2: `root` holds train/ and test/ with NNNNN.png + NNNNN_GT.png pairs;
/// an image is "good" when its mask is empty, otherwise "defect".
DatasetIndex load_dataset(const std::filesystem::path& root, Layout layout, Split split, int image_size = 1024);

/// (object, defect) key into the prompt corpus.
struct PromptKey {
    std::string object;
    std::string defect;

    auto operator<=>(const PromptKey&) const = default;
    std::string str() const { return object + "/" + defect; }
};

void to_json(nlohmann::json& j, const PromptKey& k);
void from_json(const nlohmann::json& j, PromptKey& k);

class PromptCorpus {
public:
    const std::map<PromptKey, std::vector<std::string>>& entries() const { return entries_; }
    const std::vector<std::string>& phrases(const PromptKey& key) const;
    bool contains(const PromptKey& key) const { return entries_.count(key) != 0; }

    /// Maps (object, defect) to its own entry, or to the object's declared
    /// fallback. Throws UnknownPrompt otherwise.
    PromptKey resolve(const std::string& object, const std::string& defect) const;

    /// All keys whose object matches, in key order.
    std::vector<PromptKey> keys_for(const std::string& object) const;

    std::size_t total_phrases() const;
    /// "N entries; object/defect: U, ..."
    std::string summary() const;

    /// Every defective sample's (category, defect) must resolve.
    void validate_against(const DatasetIndex& index) const;

    void add(const PromptKey& key, std::vector<std::string> phrases);
    void set_fallback(const std::string& object, const std::string& defect);

    nlohmann::json to_json() const;
    static PromptCorpus from_json(const nlohmann::json& j);

private:
    std::map<PromptKey, std::vector<std::string>> entries_;
    std::map<std::string, std::string> fallbacks_;
};

PromptCorpus load_prompt_corpus(const std::filesystem::path& path);
void save_prompt_corpus(const PromptCorpus& corpus, const std::filesystem::path& path);

// Synthetic blob-anomaly data used for desk-scale runs.

struct ToyOptions {
    std::vector<std::string> categories{"stripes", "grain"};
    std::vector<std::string> defect_types{"blob", "stain"};
    int image_size = 64;
    int train_good = 10;
    int test_good = 4;
    int test_defect_per_type = 10;
    std::uint64_t seed = 1;
};

/// Writes an MVTec-layout dataset of procedurally textured images with
/// blob-shaped anomalies under `root`, one directory per category.
void make_toy_dataset(const std::filesystem::path& root, const ToyOptions& options);

/// Prompt corpus matching make_toy_dataset's categories and defect types.
PromptCorpus make_toy_corpus(const ToyOptions& options, int phrases_per_entry = 8);

}  // namespace adclick::datasets
