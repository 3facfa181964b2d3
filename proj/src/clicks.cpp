#include "adclick/clicks.hpp"

#include <algorithm>

#include <opencv2/imgproc.hpp>

#include "adclick/metrics.hpp"

namespace adclick::clicks {

void to_json(nlohmann::json& j, const Click& c) {
    j = nlohmann::json{{"x", c.x}, {"y", c.y}, {"positive", c.positive()}, {"index", c.index}};
}

void from_json(const nlohmann::json& j, Click& c) {
    c.x = j.at("x").get<int>();
    c.y = j.at("y").get<int>();
    c.polarity = j.at("positive").get<bool>() ? Polarity::Positive : Polarity::Negative;
    c.index = j.value("index", 0);
}

AnomalyMask AnomalyMask::zeros(int rows, int cols, float threshold) {
    return AnomalyMask{ScoreMap(rows, cols, 0.0f), threshold};
}

BinaryMask AnomalyMask::binarize() const {
    BinaryMask out(scores.rows(), scores.cols(), 0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out.values()[i] = scores.values()[i] >= threshold ? 1 : 0;
    }
    return out;
}

void check_in_bounds(const Click& click, int rows, int cols) {
    if (click.x < 0 || click.y < 0 || click.x >= cols || click.y >= rows) {
        throw Error(ErrorCode::OutOfBounds, "click (" + std::to_string(click.x) + ", " + std::to_string(click.y) +
                                                ") outside " + std::to_string(cols) + "x" + std::to_string(rows));
    }
}

void stamp_disk(BinaryMask& map, int x, int y, int radius) {
    const int r2 = radius * radius;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            if (dx * dx + dy * dy <= r2 && map.contains(y + dy, x + dx)) map(y + dy, x + dx) = 1;
        }
    }
}

ClickEncoding encode_clicks(std::span<const Click> clicks, const AnomalyMask& previous_mask, int rows, int cols,
                            int radius) {
    if (radius < 0) throw Error(ErrorCode::InvalidArgument, "encode_clicks: negative radius");
    if (previous_mask.rows() != rows || previous_mask.cols() != cols) {
        throw Error(ErrorCode::ShapeMismatch, "encode_clicks: previous mask resolution differs");
    }
    ClickEncoding enc{BinaryMask(rows, cols, 0), BinaryMask(rows, cols, 0), previous_mask.scores};
    for (const auto& c : clicks) {
        check_in_bounds(c, rows, cols);
        stamp_disk(c.positive() ? enc.positive_map : enc.negative_map, c.x, c.y, radius);
    }
    return enc;
}

ScoreMap distance_to_boundary(const BinaryMask& region) {
    cv::Mat padded = cv::Mat::zeros(region.rows() + 2, region.cols() + 2, CV_8U);
    for (int r = 0; r < region.rows(); ++r) {
        for (int c = 0; c < region.cols(); ++c) padded.at<std::uint8_t>(r + 1, c + 1) = region(r, c) ? 255 : 0;
    }
    cv::Mat dist;
    cv::distanceTransform(padded, dist, cv::DIST_L2, cv::DIST_MASK_PRECISE, CV_32F);
    ScoreMap out(region.rows(), region.cols(), 0.0f);
    for (int r = 0; r < region.rows(); ++r) {
        for (int c = 0; c < region.cols(); ++c) out(r, c) = dist.at<float>(r + 1, c + 1);
    }
    return out;
}

std::optional<ErrorRegion> largest_error_region(const BinaryMask& prediction, const BinaryMask& ground_truth) {
    require_same_shape(prediction, ground_truth, "largest_error_region");
    BinaryMask fn(prediction.rows(), prediction.cols(), 0);
    BinaryMask fp(prediction.rows(), prediction.cols(), 0);
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const bool p = prediction.values()[i] != 0;
        const bool g = ground_truth.values()[i] != 0;
        fn.values()[i] = g && !p;
        fp.values()[i] = p && !g;
    }

    std::optional<ErrorRegion> best;
    for (bool false_negative : {true, false}) {
        Map2D<int> labels;
        const int n = metrics::label_components(false_negative ? fn : fp, labels);
        if (n == 0) continue;
        std::vector<std::size_t> area(n + 1, 0);
        for (int l : labels.values()) area[l] += l != 0;
        for (int l = 1; l <= n; ++l) {
            if (best && area[l] <= best->area) continue;
            ErrorRegion region{BinaryMask(prediction.rows(), prediction.cols(), 0), false_negative, area[l]};
            for (std::size_t i = 0; i < labels.size(); ++i) region.pixels.values()[i] = labels.values()[i] == l;
            best = std::move(region);
        }
    }
    return best;
}

namespace {

Click click_at_center(const ErrorRegion& region) {
    const ScoreMap dist = distance_to_boundary(region.pixels);
    int best_r = -1;
    int best_c = -1;
    float best_d = -1.0f;
    for (int r = 0; r < dist.rows(); ++r) {
        for (int c = 0; c < dist.cols(); ++c) {
            if (region.pixels(r, c) && dist(r, c) > best_d) {
                best_d = dist(r, c);
                best_r = r;
                best_c = c;
            }
        }
    }
    return Click{best_c, best_r, region.false_negative ? Polarity::Positive : Polarity::Negative, 0};
}

Click uniform_pixel(const BinaryMask& mask, bool positive, std::mt19937_64& rng) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.values()[i]) idx.push_back(i);
    }
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    const std::size_t i = idx[pick(rng)];
    return Click{static_cast<int>(i % mask.cols()), static_cast<int>(i / mask.cols()),
                 positive ? Polarity::Positive : Polarity::Negative, 0};
}

}  // namespace

std::optional<Click> simulate_next_click(const BinaryMask& prediction, const BinaryMask& ground_truth) {
    auto region = largest_error_region(prediction, ground_truth);
    if (!region) return std::nullopt;
    return click_at_center(*region);
}

std::optional<Click> sample_first_click(const BinaryMask& ground_truth, std::mt19937_64& rng) {
    if (std::none_of(ground_truth.values().begin(), ground_truth.values().end(), [](auto v) { return v != 0; })) {
        return std::nullopt;
    }
    return uniform_pixel(ground_truth, true, rng);
}

std::optional<Click> sample_training_click(const BinaryMask& prediction, const BinaryMask& ground_truth,
                                           std::mt19937_64& rng, double jitter) {
    auto region = largest_error_region(prediction, ground_truth);
    if (!region) return std::nullopt;
    std::bernoulli_distribution use_jitter(jitter);
    if (use_jitter(rng)) return uniform_pixel(region->pixels, region->false_negative, rng);
    return click_at_center(*region);
}

ProtocolResult run_click_protocol(const Predictor& predictor, const BinaryMask& ground_truth, int max_clicks,
                                  double iou_target, float threshold, std::span<const int> keep_after) {
    if (max_clicks < 1) throw Error(ErrorCode::InvalidArgument, "run_click_protocol: max_clicks must be >= 1");
    ProtocolResult result;
    result.kept_masks.resize(keep_after.size());
    AnomalyMask current = AnomalyMask::zeros(ground_truth.rows(), ground_truth.cols(), threshold);
    bool perfect = false;
    for (int k = 1; k <= max_clicks; ++k) {
        if (!perfect) {
            auto click = simulate_next_click(current.binarize(), ground_truth);
            if (click) {
                click->index = k;
                result.clicks.push_back(*click);
                current = predictor(result.clicks, current);
                current.threshold = threshold;
            } else {
                perfect = true;
            }
        }
        result.iou_per_click.push_back(metrics::iou(current.binarize(), ground_truth));
        for (std::size_t i = 0; i < keep_after.size(); ++i) {
            if (keep_after[i] == k) result.kept_masks[i] = current;
        }
    }
    result.noc = metrics::first_crossing(result.iou_per_click, iou_target, max_clicks);
    return result;
}

}  // namespace adclick::clicks
