#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adclick/common.hpp"

namespace adclick::metrics {

/// Area under the ROC curve as the normalized Mann-Whitney U statistic.
/// Tied scores contribute 1/2 per positive/negative pair.
double auroc(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Step-wise area under the precision-recall curve: sum over descending
/// unique thresholds of (R_k - R_{k-1}) * P_k. Equal scores form one step.
double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Labels 8-connected foreground components of `mask`. Background is 0,
/// components are numbered 1..n in row-major order of their first pixel.
/// Returns n.
int label_components(const BinaryMask& mask, Map2D<int>& labels);

/// Per-region overlap integrated over false-positive rate in [0, fpr_limit]
/// and divided by fpr_limit. The PRO(FPR) curve is treated as a step
/// function: each operating point holds until the next one is reached.
/// Regions are the 8-connected components of every ground-truth mask; the
/// false-positive rate pools the normal pixels of all maps.
double pro(std::span<const ScoreMap> score_maps, std::span<const BinaryMask> gt_masks, double fpr_limit = 0.3);
double pro(const ScoreMap& score_map, const BinaryMask& gt_mask, double fpr_limit = 0.3);

/// |P ∩ G| / |P ∪ G|, with an empty union defined as 1.
double iou(const BinaryMask& prediction, const BinaryMask& ground_truth);
double miou(std::span<const BinaryMask> predictions, std::span<const BinaryMask> ground_truths);

/// 1-based index of the first IoU >= target, or `cap` if it is never reached
/// within the first `cap` entries.
int first_crossing(std::span<const double> trace, double target, int cap);

struct NocSummary {
    double mean_noc = 0.0;
    double fraction_failed = 0.0;
    std::vector<int> per_sample;
};

NocSummary aggregate_noc(const std::vector<std::vector<double>>& traces, double target, int cap);

}  // namespace adclick::metrics
