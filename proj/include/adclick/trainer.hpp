#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/network.hpp"
#include "adclick/pipeline.hpp"

namespace adclick::training {

struct TrainOptions {
    std::int64_t steps = 1000;
    int batch_size = 8;
    double lr = 1e-5;
    double weight_decay = 0.05;
    double nfl_gamma = 2.0;
    double lambda_language = 0.05;
    double contrastive_temperature = 0.1;
    int max_prior_clicks = 3;    // interactive mode: simulated clicks before the supervised pass
    double click_jitter = 0.3;
    int click_radius = 5;
    float threshold = 0.5f;
    int fixed_batch_size = 8;
    int fixed_batch_every = 10;  // 0 disables fixed-batch monitoring
    std::int64_t checkpoint_every = 0;
    std::uint64_t seed = 0;
    std::string log_path;         // JSON lines, appended
    std::string checkpoint_path;  // written at the end (and every checkpoint_every steps)
};

void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

struct StepRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double nfl = 0.0;
    double aux = 0.0;
    double lr = 0.0;
};

struct FixedBatchRecord {
    std::int64_t step = 0;  // number of optimizer steps taken before the evaluation
    double loss = 0.0;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<FixedBatchRecord> fixed_batch;
};

/// Assembled tensors for one forward pass.
struct Batch {
    network::ForwardInputs inputs;
    torch::Tensor target;     // [B, 1, H, W] float {0, 1}
    std::vector<int> groups;  // prompt-key id per row, for the contrastive term
};

/// Stacks images, residual maps and text for `samples`; click maps are zero.
Batch make_batch(const std::vector<const pipeline::LabeledSample*>& samples, const std::vector<torch::Tensor>& text,
                 const std::vector<int>& groups);

struct LossTerms {
    torch::Tensor total;
    torch::Tensor nfl;
    torch::Tensor aux;
};

/// Normalized focal loss of the prediction plus lambda times the prompt
/// contrastive term (when the model uses language).
LossTerms training_loss(network::AdClickModel& model, const network::ForwardOutput& output, const Batch& batch,
                        const TrainOptions& options);

/// Runs AdamW over `pool`. Interactive models are trained with simulated
/// click sequences; seg models see no clicks. Throws Divergence when the loss
/// stops being finite.
TrainReport train(network::AdClickModel& model, const std::vector<pipeline::LabeledSample>& pool,
                  const pipeline::PromptEmbeddings* text, const TrainOptions& options);

}  // namespace adclick::training
