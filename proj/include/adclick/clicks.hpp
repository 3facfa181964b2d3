#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/common.hpp"

namespace adclick::clicks {

enum class Polarity : std::uint8_t { Negative = 0, Positive = 1 };

/// One annotator interaction. `x` is the pixel column, `y` the row and
/// `index` the 1-based interaction ordinal within a session.
struct Click {
    int x = 0;
    int y = 0;
    Polarity polarity = Polarity::Positive;
    int index = 0;

    bool positive() const noexcept { return polarity == Polarity::Positive; }
    bool operator==(const Click&) const = default;
};

void to_json(nlohmann::json& j, const Click& c);
void from_json(const nlohmann::json& j, Click& c);

/// Dense score map in [0,1] together with the threshold that binarizes it.
struct AnomalyMask {
    ScoreMap scores;
    float threshold = 0.5f;

    static AnomalyMask zeros(int rows, int cols, float threshold = 0.5f);
    int rows() const noexcept { return scores.rows(); }
    int cols() const noexcept { return scores.cols(); }
    /// 1 where score >= threshold.
    BinaryMask binarize() const;
};

struct ClickEncoding {
    BinaryMask positive_map;
    BinaryMask negative_map;
    ScoreMap previous_mask;
};

void check_in_bounds(const Click& click, int rows, int cols);

/// Sets every pixel within Euclidean distance `radius` of (x, y) to 1.
void stamp_disk(BinaryMask& map, int x, int y, int radius);

ClickEncoding encode_clicks(std::span<const Click> clicks, const AnomalyMask& previous_mask, int rows, int cols,
                            int radius);

/// Exact Euclidean distance from every foreground pixel of `region` to the
/// nearest pixel outside it. Pixels beyond the image border count as outside.
ScoreMap distance_to_boundary(const BinaryMask& region);

struct ErrorRegion {
    BinaryMask pixels;
    bool false_negative = false;
    std::size_t area = 0;
};

/// Largest 8-connected component of the false-negative and false-positive
/// sets. Ties go to false negatives, then to the component whose first
/// pixel comes first in row-major order.
std::optional<ErrorRegion> largest_error_region(const BinaryMask& prediction, const BinaryMask& ground_truth);

/// Next click of the simulated annotator: the interior point of the largest
/// error region farthest from its boundary (row-major tie-break). Positive iff
/// the region is a false negative. Returns nullopt when prediction == truth.
std::optional<Click> simulate_next_click(const BinaryMask& prediction, const BinaryMask& ground_truth);

/// Training-time variants. The first click is uniform inside the anomaly;
/// later clicks follow the simulator but land on a uniformly random pixel of
/// the chosen region with probability `jitter`.
std::optional<Click> sample_first_click(const BinaryMask& ground_truth, std::mt19937_64& rng);
std::optional<Click> sample_training_click(const BinaryMask& prediction, const BinaryMask& ground_truth,
                                           std::mt19937_64& rng, double jitter);

using Predictor = std::function<AnomalyMask(std::span<const Click> clicks, const AnomalyMask& previous)>;

struct ProtocolResult {
    std::vector<double> iou_per_click;
    std::vector<Click> clicks;
    int noc = 0;
    /// Masks after the click counts listed in `keep_after`, in that order.
    std::vector<AnomalyMask> kept_masks;
};

/// Alternates simulate_next_click and the predictor from an empty mask for
/// `max_clicks` rounds. Once the prediction is perfect the remaining rounds
/// repeat the final mask. noc is the first 1-based click count with
/// IoU >= iou_target, or max_clicks.
ProtocolResult run_click_protocol(const Predictor& predictor, const BinaryMask& ground_truth, int max_clicks,
                                  double iou_target, float threshold = 0.5f, std::span<const int> keep_after = {});

}  // namespace adclick::clicks
