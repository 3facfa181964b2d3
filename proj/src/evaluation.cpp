#include "adclick/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "adclick/clicks.hpp"
#include "adclick/image_io.hpp"
#include "adclick/metrics.hpp"

namespace fs = std::filesystem;

namespace adclick::evaluation {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename F>
double guarded(F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::SingleClass || e.code() == ErrorCode::NoPositives || e.code() == ErrorCode::NoRegion) {
            return kNaN;
        }
        throw;
    }
}

std::string fixed1(double v) {
    if (std::isnan(v)) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    return os.str();
}

nlohmann::json number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

double nan_mean(const std::vector<double>& values) {
    double sum = 0.0;
    int n = 0;
    for (double v : values) {
        if (!std::isnan(v)) {
            sum += v;
            ++n;
        }
    }
    return n ? sum / n : kNaN;
}

nlohmann::json pixel_json(const PixelMetrics& m) {
    return {{"ap", number(m.ap)}, {"pro", number(m.pro)}, {"pixel_auroc", number(m.pixel_auroc)}};
}

}  // namespace

std::string percent(double value) { return fixed1(value * 100.0); }

PixelMetrics pixel_metrics(std::span<const ScoreMap> scores, std::span<const BinaryMask> masks, double pro_fpr_limit) {
    if (scores.size() != masks.size()) throw Error(ErrorCode::ShapeMismatch, "score map and mask counts differ");
    std::vector<float> s;
    std::vector<std::uint8_t> l;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        require_same_shape(scores[i], masks[i], "pixel_metrics");
        s.insert(s.end(), scores[i].values().begin(), scores[i].values().end());
        for (auto v : masks[i].values()) l.push_back(v ? 1 : 0);
    }
    PixelMetrics m;
    m.ap = guarded([&] { return metrics::average_precision(s, l); });
    m.pixel_auroc = guarded([&] { return metrics::auroc(s, l); });
    m.pro = guarded([&] { return metrics::pro(scores, masks, pro_fpr_limit); });
    return m;
}

void to_json(nlohmann::json& j, const IisOptions& o) {
    j = nlohmann::json{{"budgets", o.budgets},         {"max_clicks", o.max_clicks},     {"iou_target", o.iou_target},
                       {"threshold", o.threshold},     {"click_radius", o.click_radius}, {"pro_fpr_limit", o.pro_fpr_limit},
                       {"averaging", o.averaging}};
}

void from_json(const nlohmann::json& j, IisOptions& o) {
    o.budgets = j.value("budgets", o.budgets);
    o.max_clicks = j.value("max_clicks", o.max_clicks);
    o.iou_target = j.value("iou_target", o.iou_target);
    o.threshold = j.value("threshold", o.threshold);
    o.click_radius = j.value("click_radius", o.click_radius);
    o.pro_fpr_limit = j.value("pro_fpr_limit", o.pro_fpr_limit);
    o.averaging = j.value("averaging", o.averaging);
}

namespace {

struct SampleOutcome {
    const pipeline::LabeledSample* sample;
    clicks::ProtocolResult result;
};

IisRow summarize_iis(const std::string& name, const std::vector<const SampleOutcome*>& outcomes, const IisOptions& options) {
    IisRow row;
    row.name = name;
    row.samples = outcomes.size();
    for (std::size_t b = 0; b < options.budgets.size(); ++b) {
        std::vector<ScoreMap> scores;
        std::vector<BinaryMask> masks;
        std::vector<BinaryMask> binarized;
        for (const auto* o : outcomes) {
            scores.push_back(o->result.kept_masks[b].scores);
            binarized.push_back(o->result.kept_masks[b].binarize());
            masks.push_back(o->sample->mask);
        }
        BudgetMetrics bm;
        bm.clicks = options.budgets[b];
        bm.pixel = pixel_metrics(scores, masks, options.pro_fpr_limit);
        bm.miou = metrics::miou(binarized, masks);
        row.budgets.push_back(bm);
    }
    std::vector<std::vector<double>> traces;
    for (const auto* o : outcomes) traces.push_back(o->result.iou_per_click);
    const auto noc = metrics::aggregate_noc(traces, options.iou_target, options.max_clicks);
    row.noc = noc.mean_noc;
    row.fraction_failed = noc.fraction_failed;
    return row;
}

IisRow mean_of(const std::vector<IisRow>& rows, const IisOptions& options) {
    IisRow mean;
    mean.name = "mean";
    for (const auto& r : rows) mean.samples += r.samples;
    for (std::size_t b = 0; b < options.budgets.size(); ++b) {
        std::vector<double> ap, pro, auroc, miou;
        for (const auto& r : rows) {
            ap.push_back(r.budgets[b].pixel.ap);
            pro.push_back(r.budgets[b].pixel.pro);
            auroc.push_back(r.budgets[b].pixel.pixel_auroc);
            miou.push_back(r.budgets[b].miou);
        }
        mean.budgets.push_back({options.budgets[b], {nan_mean(ap), nan_mean(pro), nan_mean(auroc)}, nan_mean(miou)});
    }
    std::vector<double> noc, failed;
    for (const auto& r : rows) {
        noc.push_back(r.noc);
        failed.push_back(r.fraction_failed);
    }
    mean.noc = nan_mean(noc);
    mean.fraction_failed = nan_mean(failed);
    return mean;
}

}  // namespace

IisReport evaluate_iis(network::AdClickModel& model, const std::vector<pipeline::LabeledSample>& samples,
                       const pipeline::PromptEmbeddings* text, const IisOptions& options) {
    if (!model) throw Error(ErrorCode::ModelNotLoaded, "no model loaded");
    if (options.budgets.empty()) throw Error(ErrorCode::InvalidArgument, "no click budgets");
    for (int b : options.budgets) {
        if (b < 1 || b > options.max_clicks) throw Error(ErrorCode::InvalidArgument, "click budget outside [1, max_clicks]");
    }
    if (options.averaging != "category" && options.averaging != "pooled") {
        throw Error(ErrorCode::InvalidArgument, "averaging must be 'category' or 'pooled'");
    }
    const bool use_text = model->config.use_residual_branch && model->config.use_language;

    std::vector<SampleOutcome> outcomes;
    for (const auto& s : samples) {
        if (!s.defective) continue;
        network::InferenceInputs inputs{s.image, s.posfar, use_text && text ? text->canonical(s.key) : torch::Tensor()};
        clicks::Predictor predictor = [&](std::span<const clicks::Click> history, const clicks::AnomalyMask& previous) {
            return network::predict_mask(model, inputs, history, previous, options.click_radius, options.threshold);
        };
        outcomes.push_back({&s, clicks::run_click_protocol(predictor, s.mask, options.max_clicks, options.iou_target,
                                                           options.threshold, options.budgets)});
    }
    if (outcomes.empty()) throw Error(ErrorCode::InvalidArgument, "no defective samples to evaluate");

    IisReport report;
    report.options = options;
    std::map<std::string, std::vector<const SampleOutcome*>> by_category;
    std::vector<const SampleOutcome*> all;
    for (const auto& o : outcomes) {
        by_category[o.sample->category].push_back(&o);
        all.push_back(&o);
        report.traces.push_back({o.sample->id, o.sample->category, o.result.iou_per_click, o.result.noc});
    }
    for (const auto& [category, list] : by_category) report.rows.push_back(summarize_iis(category, list, options));
    if (options.averaging == "pooled") {
        report.mean = summarize_iis("mean", all, options);
    } else {
        report.mean = mean_of(report.rows, options);
    }
    return report;
}

std::string IisReport::markdown() const {
    std::ostringstream os;
    os << "| Category |";
    for (int b : options.budgets) os << " AP@" << b << " | PRO@" << b << " | P-AUROC@" << b << " | mIoU@" << b << " |";
    os << " NoC" << static_cast<int>(std::lround(options.iou_target * 100)) << " |\n|---|";
    for (std::size_t i = 0; i < options.budgets.size(); ++i) os << "---|---|---|---|";
    os << "---|\n";
    auto line = [&](const IisRow& r) {
        os << "| " << r.name << " |";
        for (const auto& b : r.budgets) {
            os << ' ' << percent(b.pixel.ap) << " | " << percent(b.pixel.pro) << " | " << percent(b.pixel.pixel_auroc)
               << " | " << percent(b.miou) << " |";
        }
        os << ' ' << fixed1(r.noc) << " |\n";
    };
    for (const auto& r : rows) line(r);
    line(mean);
    return os.str();
}

nlohmann::json IisReport::to_json() const {
    auto row_json = [](const IisRow& r) {
        nlohmann::json budgets = nlohmann::json::array();
        for (const auto& b : r.budgets) {
            auto j = pixel_json(b.pixel);
            j["clicks"] = b.clicks;
            j["miou"] = number(b.miou);
            budgets.push_back(j);
        }
        return nlohmann::json{{"name", r.name},
                              {"samples", r.samples},
                              {"budgets", budgets},
                              {"noc", number(r.noc)},
                              {"fraction_failed", number(r.fraction_failed)}};
    };
    nlohmann::json j;
    j["options"] = options;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back(row_json(r));
    j["mean"] = row_json(mean);
    j["traces"] = nlohmann::json::array();
    for (const auto& t : traces) {
        j["traces"].push_back({{"id", t.id}, {"category", t.category}, {"iou_per_click", t.iou_per_click}, {"noc", t.noc}});
    }
    return j;
}

void to_json(nlohmann::json& j, const AdOptions& o) {
    j = nlohmann::json{{"pro_fpr_limit", o.pro_fpr_limit}, {"averaging", o.averaging}, {"maps_dir", o.maps_dir}};
}

void from_json(const nlohmann::json& j, AdOptions& o) {
    o.pro_fpr_limit = j.value("pro_fpr_limit", o.pro_fpr_limit);
    o.averaging = j.value("averaging", o.averaging);
    o.maps_dir = j.value("maps_dir", o.maps_dir);
}

namespace {

struct AdOutcome {
    std::string category;
    ScoreMap map;
    BinaryMask mask;
    double score;
    bool defective;
};

AdRow summarize_ad(const std::string& name, const std::vector<const AdOutcome*>& outcomes, double fpr_limit) {
    AdRow row;
    row.name = name;
    row.samples = outcomes.size();
    std::vector<ScoreMap> maps;
    std::vector<BinaryMask> masks;
    std::vector<float> scores;
    std::vector<std::uint8_t> labels;
    for (const auto* o : outcomes) {
        maps.push_back(o->map);
        masks.push_back(o->mask);
        scores.push_back(static_cast<float>(o->score));
        labels.push_back(o->defective ? 1 : 0);
    }
    row.pixel = pixel_metrics(maps, masks, fpr_limit);
    row.image_auroc = guarded([&] { return metrics::auroc(scores, labels); });
    return row;
}

}  // namespace

AdReport evaluate_ad(network::AdClickModel& model, const std::vector<AdCategory>& categories,
                     const pipeline::PromptEmbeddings* text, const AdOptions& options) {
    if (options.averaging != "category" && options.averaging != "pooled") {
        throw Error(ErrorCode::InvalidArgument, "averaging must be 'category' or 'pooled'");
    }
    std::vector<AdOutcome> outcomes;
    for (const auto& cat : categories) {
        for (const auto& s : cat.samples) {
            auto set = segmode::seg_forward(model, s.image, s.posfar, cat.defect_types, text);
            if (!options.maps_dir.empty()) {
                std::string name = s.id;
                std::replace(name.begin(), name.end(), '/', '_');
                io::save_score_png16(fs::path(options.maps_dir) / (name + ".png"), set.aggregate);
            }
            outcomes.push_back({cat.category, std::move(set.aggregate), s.mask, set.image_score, s.defective});
        }
    }
    if (outcomes.empty()) throw Error(ErrorCode::InvalidArgument, "no samples to evaluate");

    AdReport report;
    std::map<std::string, std::vector<const AdOutcome*>> by_category;
    std::vector<const AdOutcome*> all;
    for (const auto& o : outcomes) {
        by_category[o.category].push_back(&o);
        all.push_back(&o);
    }
    for (const auto& [name, list] : by_category) report.rows.push_back(summarize_ad(name, list, options.pro_fpr_limit));
    if (options.averaging == "pooled") {
        report.mean = summarize_ad("mean", all, options.pro_fpr_limit);
    } else {
        report.mean.name = "mean";
        std::vector<double> ap, pro, pa, ia;
        for (const auto& r : report.rows) {
            report.mean.samples += r.samples;
            ap.push_back(r.pixel.ap);
            pro.push_back(r.pixel.pro);
            pa.push_back(r.pixel.pixel_auroc);
            ia.push_back(r.image_auroc);
        }
        report.mean.pixel = {nan_mean(ap), nan_mean(pro), nan_mean(pa)};
        report.mean.image_auroc = nan_mean(ia);
    }
    return report;
}

std::string AdReport::markdown() const {
    std::ostringstream os;
    os << "| Category | AP | PRO | P-AUROC | I-AUROC |\n|---|---|---|---|---|\n";
    auto line = [&](const AdRow& r) {
        os << "| " << r.name << " | " << percent(r.pixel.ap) << " | " << percent(r.pixel.pro) << " | "
           << percent(r.pixel.pixel_auroc) << " | " << percent(r.image_auroc) << " |\n";
    };
    for (const auto& r : rows) line(r);
    line(mean);
    return os.str();
}

nlohmann::json AdReport::to_json() const {
    auto row_json = [](const AdRow& r) {
        auto j = pixel_json(r.pixel);
        j["name"] = r.name;
        j["samples"] = r.samples;
        j["image_auroc"] = number(r.image_auroc);
        return j;
    };
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back(row_json(r));
    j["mean"] = row_json(mean);
    return j;
}

}  // namespace adclick::evaluation
