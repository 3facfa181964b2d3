#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/network.hpp"
#include "adclick/pipeline.hpp"
#include "adclick/segmode.hpp"

namespace adclick::evaluation {

struct PixelMetrics {
    double ap = 0.0;
    double pro = 0.0;
    double pixel_auroc = 0.0;
};

/// AP, PRO and pixel AUROC over all pixels of the given maps. A metric that
/// is undefined for the data (single class, no region) comes back as NaN.
PixelMetrics pixel_metrics(std::span<const ScoreMap> scores, std::span<const BinaryMask> masks, double pro_fpr_limit);

struct IisOptions {
    std::vector<int> budgets{2, 3, 5};
    int max_clicks = 20;
    double iou_target = 0.8;
    float threshold = 0.5f;
    int click_radius = 5;
    double pro_fpr_limit = 0.3;
    std::string averaging = "category";  // category | pooled
};

void to_json(nlohmann::json& j, const IisOptions& o);
void from_json(const nlohmann::json& j, IisOptions& o);

struct BudgetMetrics {
    int clicks = 0;
    PixelMetrics pixel;
    double miou = 0.0;
};

struct IisRow {
    std::string name;
    std::size_t samples = 0;
    std::vector<BudgetMetrics> budgets;
    double noc = 0.0;
    double fraction_failed = 0.0;
};

struct SampleTrace {
    std::string id;
    std::string category;
    std::vector<double> iou_per_click;
    int noc = 0;
};

struct IisReport {
    IisOptions options;
    std::vector<IisRow> rows;  // one per category
    IisRow mean;
    std::vector<SampleTrace> traces;

    /// Markdown table: Category | AP@k | PRO@k | P-AUROC@k | mIoU@k ... | NoC80,
    /// metrics in percent with one decimal.
    std::string markdown() const;
    nlohmann::json to_json() const;
};

/// Click-simulation evaluation over defective samples: each sample runs the
/// protocol to `max_clicks`; the masks after every budget feed the pixel
/// metrics and mIoU; NoC is measured against `iou_target`.
IisReport evaluate_iis(network::AdClickModel& model, const std::vector<pipeline::LabeledSample>& samples,
                       const pipeline::PromptEmbeddings* text, const IisOptions& options);

struct AdOptions {
    double pro_fpr_limit = 0.3;
    std::string averaging = "category";
    std::string maps_dir;  // when set, 16-bit PNG score maps are written here
};

void to_json(nlohmann::json& j, const AdOptions& o);
void from_json(const nlohmann::json& j, AdOptions& o);

struct AdRow {
    std::string name;
    std::size_t samples = 0;
    PixelMetrics pixel;
    double image_auroc = 0.0;
};

struct AdReport {
    std::vector<AdRow> rows;
    AdRow mean;

    /// Markdown table: Category | AP | PRO | P-AUROC | I-AUROC.
    std::string markdown() const;
    nlohmann::json to_json() const;
};

struct AdCategory {
    std::string category;
    std::vector<pipeline::LabeledSample> samples;  // good and defective test images
    segmode::DefectTypeSet defect_types;
};

AdReport evaluate_ad(network::AdClickModel& model, const std::vector<AdCategory>& categories,
                     const pipeline::PromptEmbeddings* text, const AdOptions& options);

/// "96.1" style percentage, "-" for NaN.
std::string percent(double value);

}  // namespace adclick::evaluation
