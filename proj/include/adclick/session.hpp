#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/clicks.hpp"
#include "adclick/network.hpp"
#include "adclick/pipeline.hpp"

namespace adclick::session {

enum class Status { Active, Exported, Abandoned };
std::string to_string(Status status);

struct ImageEntry {
    std::string id;  // category/split/defect/stem
    std::string category;
    std::filesystem::path path;
    std::optional<std::filesystem::path> mask_path;
    std::string defect_type;
};

class ImageCatalog {
public:
    void add_index(const datasets::DatasetIndex& index);
    /// Throws UnknownImage.
    const ImageEntry& find(const std::string& id) const;
    const std::vector<ImageEntry>& entries() const { return entries_; }

private:
    std::vector<ImageEntry> entries_;
    std::map<std::string, std::size_t> by_id_;
};

/// Shared, read-only service state.
struct ServiceContext {
    network::AdClickModel model{nullptr};
    std::string model_fingerprint;
    std::shared_ptr<const pipeline::ResidualContext> residuals;
    std::shared_ptr<const pipeline::PromptEmbeddings> text;
    ImageCatalog images;
    int image_size = 1024;
    int click_radius = 5;
    float threshold = 0.5f;
    std::filesystem::path output_root = "runs";
    std::uint64_t seed = 0;
    bool evaluation_mode = false;  // report IoU against ground truth when available
    std::chrono::seconds idle_timeout{1800};
};

/// Prompt chosen for a session: a corpus key or free text.
struct PromptChoice {
    std::optional<datasets::PromptKey> key;
    std::string text;
};

/// "object/defect" resolves through the corpus (fallbacks included); an
/// empty request takes the category's first key. Throws UnknownPrompt.
PromptChoice resolve_prompt(const ServiceContext& context, const std::string& category, const std::string& request);

/// Image tensor, residual map and text embedding for one image/prompt.
network::InferenceInputs prepare_inputs(const ServiceContext& context, const ImageEntry& image, const PromptChoice& prompt);

/// One click-conditioned model update.
clicks::AnomalyMask refine(const ServiceContext& context, const network::InferenceInputs& inputs,
                           std::span<const clicks::Click> history, const clicks::AnomalyMask& previous,
                           int click_radius, float threshold);

struct SessionState {
    std::string id;
    std::string image_id;
    std::string category;
    PromptChoice prompt;
    std::vector<clicks::Click> clicks;
    std::vector<clicks::AnomalyMask> masks;  // masks[t] follows clicks[t]
    clicks::AnomalyMask initial;             // all-zero M_0
    Status status = Status::Active;
    std::optional<std::filesystem::path> exported_path;
    network::InferenceInputs inputs;
    std::optional<BinaryMask> ground_truth;
    std::chrono::steady_clock::time_point last_access;

    const clicks::AnomalyMask& current() const { return masks.empty() ? initial : masks.back(); }
};

struct ClickResult {
    clicks::AnomalyMask mask;
    std::optional<double> iou;
    std::size_t click_count = 0;
};

/// Copy of the lightweight parts of a session.
struct SessionView {
    std::string id;
    std::string image_id;
    std::string category;
    PromptChoice prompt;
    std::vector<clicks::Click> clicks;
    clicks::AnomalyMask mask;
    Status status = Status::Active;
    std::optional<std::filesystem::path> exported_path;
};

class SessionManager {
public:
    explicit SessionManager(std::shared_ptr<const ServiceContext> context);

    /// Opens a session on `image_id`. `category`, when non-empty, must match
    /// the image. Throws UnknownImage / UnknownPrompt / ModelNotLoaded.
    std::string open(const std::string& image_id, const std::string& category, const std::string& prompt_key);

    ClickResult submit_click(const std::string& id, const clicks::Click& click);
    /// Drops the last click and returns the mask before it.
    clicks::AnomalyMask undo(const std::string& id);
    /// `free_text` false: `prompt` is an "object/defect" key; true: any phrase.
    PromptChoice set_prompt(const std::string& id, const std::string& prompt, bool free_text);
    SessionView view(const std::string& id);
    /// Writes the binarized mask PNG and a JSON sidecar under the output root
    /// (`destination` is relative to it; empty means "labels"). Idempotent.
    std::filesystem::path export_label(const std::string& id, const std::string& destination = "");
    void abandon(const std::string& id);

    /// Drops sessions idle for longer than the configured timeout.
    std::size_t evict_idle(std::chrono::steady_clock::time_point now);
    std::size_t size() const;

    const ServiceContext& context() const { return *context_; }

private:
    struct Entry {
        std::mutex mutex;
        SessionState state;
    };
    std::shared_ptr<Entry> find(const std::string& id);
    std::string new_token();

    std::shared_ptr<const ServiceContext> context_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Entry>> sessions_;
    std::mt19937_64 rng_;
};

/// Click log of an exported label (the JSON sidecar).
struct LabelRecord {
    std::string image_id;
    std::string image_path;
    std::string category;
    PromptChoice prompt;
    std::vector<clicks::Click> clicks;
    float threshold = 0.5f;
    int click_radius = 5;
    std::string model_fingerprint;
    std::string mask_file;
    std::string session_id;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const LabelRecord& record);
LabelRecord label_record_from_json(const nlohmann::json& j);
LabelRecord read_label_record(const std::filesystem::path& path);

/// Re-runs a click log against the context's model and returns the final
/// mask. Throws CheckpointMismatch when the log names a different model.
clicks::AnomalyMask replay(const ServiceContext& context, const LabelRecord& record);

}  // namespace adclick::session
