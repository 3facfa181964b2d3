#include "adclick/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace adclick::metrics {
namespace {

void check_inputs(std::span<const float> scores, std::span<const std::uint8_t> labels, const char* what) {
    if (scores.size() != labels.size()) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": scores and labels differ in length");
    }
    for (float s : scores) {
        if (!std::isfinite(s)) {
            throw Error(ErrorCode::NonFinite, std::string(what) + ": non-finite score");
        }
    }
}

// Indices ordered by descending score; ties keep input order.
std::vector<std::size_t> descending_order(std::span<const float> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

}  // namespace

double auroc(std::span<const float> scores, std::span<const std::uint8_t> labels) {
    check_inputs(scores, labels, "auroc");
    std::size_t n_pos = 0;
    for (auto l : labels) n_pos += l != 0;
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw Error(ErrorCode::SingleClass, "auroc: both classes must be present");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of mid-ranks of the positives. Ranks are half-integers, exact in double.
    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            pos_in_group += labels[order[j]] != 0;
            ++j;
        }
        const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        rank_sum += mid_rank * static_cast<double>(pos_in_group);
        i = j;
    }
    const double p = static_cast<double>(n_pos);
    const double u = rank_sum - p * (p + 1.0) / 2.0;
    return u / (p * static_cast<double>(n_neg));
}

double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels) {
    check_inputs(scores, labels, "average_precision");
    std::size_t n_pos = 0;
    for (auto l : labels) n_pos += l != 0;
    if (n_pos == 0) {
        throw Error(ErrorCode::NoPositives, "average_precision: no positive labels");
    }
    const auto order = descending_order(scores);
    double ap = 0.0;
    std::size_t tp = 0;
    std::size_t seen = 0;
    std::size_t prev_tp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const float t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            tp += labels[order[i]] != 0;
            ++seen;
            ++i;
        }
        if (tp != prev_tp) {
            const double precision = static_cast<double>(tp) / static_cast<double>(seen);
            ap += static_cast<double>(tp - prev_tp) * precision;
            prev_tp = tp;
        }
    }
    return ap / static_cast<double>(n_pos);
}

int label_components(const BinaryMask& mask, Map2D<int>& labels) {
    labels = Map2D<int>(mask.rows(), mask.cols(), 0);
    int next = 0;
    std::vector<std::pair<int, int>> stack;
    for (int r = 0; r < mask.rows(); ++r) {
        for (int c = 0; c < mask.cols(); ++c) {
            if (!mask(r, c) || labels(r, c) != 0) continue;
            ++next;
            labels(r, c) = next;
            stack.emplace_back(r, c);
            while (!stack.empty()) {
                auto [y, x] = stack.back();
                stack.pop_back();
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy;
                        const int nx = x + dx;
                        if (mask.contains(ny, nx) && mask(ny, nx) && labels(ny, nx) == 0) {
                            labels(ny, nx) = next;
                            stack.emplace_back(ny, nx);
                        }
                    }
                }
            }
        }
    }
    return next;
}

double pro(std::span<const ScoreMap> score_maps, std::span<const BinaryMask> gt_masks, double fpr_limit) {
    if (score_maps.size() != gt_masks.size()) {
        throw Error(ErrorCode::ShapeMismatch, "pro: score map and mask counts differ");
    }
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "pro: fpr_limit must lie in (0, 1]");
    }

    // Flatten all pixels with a global region id (0 = normal).
    std::vector<float> scores;
    std::vector<int> region;
    std::vector<double> region_size{0.0};
    for (std::size_t m = 0; m < score_maps.size(); ++m) {
        require_same_shape(score_maps[m], gt_masks[m], "pro");
        Map2D<int> labels;
        const int n = label_components(gt_masks[m], labels);
        const int offset = static_cast<int>(region_size.size()) - 1;
        region_size.resize(region_size.size() + n, 0.0);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const float s = score_maps[m].values()[i];
            if (!std::isfinite(s)) throw Error(ErrorCode::NonFinite, "pro: non-finite score");
            const int l = labels.values()[i];
            scores.push_back(s);
            region.push_back(l == 0 ? 0 : l + offset);
            if (l != 0) region_size[l + offset] += 1.0;
        }
    }
    const std::size_t n_regions = region_size.size() - 1;
    if (n_regions == 0) {
        throw Error(ErrorCode::NoRegion, "pro: ground truth has no anomalous region");
    }
    const double n_neg = static_cast<double>(std::count(region.begin(), region.end(), 0));
    if (n_neg == 0.0) {
        throw Error(ErrorCode::SingleClass, "pro: ground truth has no normal pixels");
    }

    const auto order = descending_order(scores);
    double overlap_sum = 0.0;  // sum over regions of covered fraction
    double fp = 0.0;
    double prev_fpr = 0.0;
    double prev_pro = 0.0;
    double integral = 0.0;
    std::size_t i = 0;
    while (i < order.size() && prev_fpr < fpr_limit) {
        const float t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            const int r = region[order[i]];
            if (r == 0) {
                fp += 1.0;
            } else {
                overlap_sum += 1.0 / region_size[r];
            }
            ++i;
        }
        const double fpr = fp / n_neg;
        integral += prev_pro * (std::min(fpr, fpr_limit) - prev_fpr);
        prev_fpr = std::min(fpr, fpr_limit);
        prev_pro = overlap_sum / static_cast<double>(n_regions);
    }
    // The last operating point holds up to the limit.
    integral += prev_pro * (fpr_limit - prev_fpr);
    return integral / fpr_limit;
}

double pro(const ScoreMap& score_map, const BinaryMask& gt_mask, double fpr_limit) {
    return pro(std::span<const ScoreMap>(&score_map, 1), std::span<const BinaryMask>(&gt_mask, 1), fpr_limit);
}

double iou(const BinaryMask& prediction, const BinaryMask& ground_truth) {
    require_same_shape(prediction, ground_truth, "iou");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const bool p = prediction.values()[i] != 0;
        const bool g = ground_truth.values()[i] != 0;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(std::span<const BinaryMask> predictions, std::span<const BinaryMask> ground_truths) {
    if (predictions.size() != ground_truths.size()) {
        throw Error(ErrorCode::ShapeMismatch, "miou: prediction and ground-truth counts differ");
    }
    if (predictions.empty()) {
        throw Error(ErrorCode::InvalidArgument, "miou: no samples");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) total += iou(predictions[i], ground_truths[i]);
    return total / static_cast<double>(predictions.size());
}

int first_crossing(std::span<const double> trace, double target, int cap) {
    const std::size_t limit = std::min<std::size_t>(trace.size(), static_cast<std::size_t>(std::max(cap, 0)));
    for (std::size_t i = 0; i < limit; ++i) {
        if (trace[i] >= target) return static_cast<int>(i + 1);
    }
    return cap;
}

NocSummary aggregate_noc(const std::vector<std::vector<double>>& traces, double target, int cap) {
    if (traces.empty()) {
        throw Error(ErrorCode::EmptyTraces, "aggregate_noc: no traces");
    }
    NocSummary out;
    std::size_t failed = 0;
    double total = 0.0;
    for (const auto& trace : traces) {
        if (trace.empty()) throw Error(ErrorCode::EmptyTraces, "aggregate_noc: empty trace");
        const int noc = first_crossing(trace, target, cap);
        const bool reached = std::any_of(trace.begin(), trace.begin() + std::min<std::size_t>(trace.size(), cap),
                                         [&](double v) { return v >= target; });
        failed += !reached;
        out.per_sample.push_back(noc);
        total += noc;
    }
    out.mean_noc = total / static_cast<double>(traces.size());
    out.fraction_failed = static_cast<double>(failed) / static_cast<double>(traces.size());
    return out;
}

}  // namespace adclick::metrics
