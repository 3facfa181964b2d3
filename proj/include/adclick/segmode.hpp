#pragma once

#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "adclick/clicks.hpp"
#include "adclick/network.hpp"
#include "adclick/pipeline.hpp"

namespace adclick::segmode {

/// Ordered prompt keys evaluated for one category.
struct DefectTypeSet {
    std::vector<datasets::PromptKey> types;
};

/// Every corpus key of `category`. Throws UnknownPrompt when there is none.
DefectTypeSet defect_types_for(const datasets::PromptCorpus& corpus, const std::string& category);

struct ScoreMapSet {
    std::vector<ScoreMap> maps;  // one per defect type, same order
    ScoreMap aggregate;          // per-pixel max over maps
    double image_score = 0.0;
};

/// Per-pixel maximum. Throws InvalidArgument on an empty set and
/// ShapeMismatch when the maps disagree in size.
ScoreMap aggregate_max(std::span<const ScoreMap> maps);

/// 3x3 box mean (reflected border).
ScoreMap mean_smooth3(const ScoreMap& map);

/// Maximum of the 3x3-smoothed aggregate map.
double image_score(const ScoreMap& aggregate);

/// One click-free forward pass per defect type, then max aggregation.
/// `image` [3, H, W], `posfar` [d_f, h_f, w_f]. Models without a language
/// pathway run a single pass shared by all types.
ScoreMapSet seg_forward(network::AdClickModel& model, const torch::Tensor& image, const torch::Tensor& posfar,
                        const DefectTypeSet& defect_types, const pipeline::PromptEmbeddings* text,
                        std::span<const clicks::Click> clicks = {});

// Training data for the automatic mode.

/// Pastes one random region (ellipse or polygon) with altered appearance
/// (darkened, brightened, tinted or texture-swapped) into `rgb`. Returns the
/// modified image and its pixel mask.
std::pair<cv::Mat, BinaryMask> synthesize_anomaly(const cv::Mat& rgb, std::mt19937_64& rng);

struct SyntheticOptions {
    int count = 200;             // samples in the pool
    double good_fraction = 0.25; // share left unmodified (all-zero target)
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const SyntheticOptions& o);
void from_json(const nlohmann::json& j, SyntheticOptions& o);

/// Synthetic-anomaly samples drawn round-robin from the defect-free training
/// images of every index. Each anomalous sample is tagged with a random
/// prompt key of its category.
std::vector<pipeline::LabeledSample> synthetic_pool(const std::vector<datasets::DatasetIndex>& train_indices,
                                                    const pipeline::ResidualContext& residuals,
                                                    const datasets::PromptCorpus& corpus,
                                                    const SyntheticOptions& options);

/// Samples from exported labels: every `*.json` sidecar in `labels_dir`
/// with its mask PNG next to it.
std::vector<pipeline::LabeledSample> label_pool(const std::filesystem::path& labels_dir,
                                                const pipeline::ResidualContext& residuals,
                                                const datasets::PromptCorpus& corpus, int image_size);

}  // namespace adclick::segmode
