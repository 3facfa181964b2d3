#include "adclick/segmode.hpp"

#include <algorithm>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "adclick/image_io.hpp"
#include "adclick/tensor_utils.hpp"

namespace fs = std::filesystem;

namespace adclick::segmode {

DefectTypeSet defect_types_for(const datasets::PromptCorpus& corpus, const std::string& category) {
    DefectTypeSet set{corpus.keys_for(category)};
    if (set.types.empty()) throw Error(ErrorCode::UnknownPrompt, "no prompt entries for category '" + category + "'");
    return set;
}

ScoreMap aggregate_max(std::span<const ScoreMap> maps) {
    if (maps.empty()) throw Error(ErrorCode::InvalidArgument, "aggregation needs at least one map");
    ScoreMap out = maps.front();
    for (std::size_t i = 1; i < maps.size(); ++i) {
        require_same_shape(out, maps[i], "aggregate_max");
        auto dst = out.values();
        auto src = maps[i].values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = std::max(dst[k], src[k]);
    }
    return out;
}

ScoreMap mean_smooth3(const ScoreMap& map) {
    cv::Mat src(map.rows(), map.cols(), CV_32F, const_cast<float*>(map.data()));
    cv::Mat dst;
    cv::blur(src, dst, cv::Size(3, 3), cv::Point(-1, -1), cv::BORDER_REFLECT_101);
    ScoreMap out(map.rows(), map.cols());
    for (int r = 0; r < map.rows(); ++r) {
        for (int c = 0; c < map.cols(); ++c) out(r, c) = dst.at<float>(r, c);
    }
    return out;
}

double image_score(const ScoreMap& aggregate) {
    if (aggregate.size() == 0) throw Error(ErrorCode::InvalidArgument, "empty score map");
    const auto smoothed = mean_smooth3(aggregate);
    const auto v = smoothed.values();
    return std::clamp(static_cast<double>(*std::max_element(v.begin(), v.end())), 0.0, 1.0);
}

ScoreMapSet seg_forward(network::AdClickModel& model, const torch::Tensor& image, const torch::Tensor& posfar,
                        const DefectTypeSet& defect_types, const pipeline::PromptEmbeddings* text,
                        std::span<const clicks::Click> clicks) {
    if (!model) throw Error(ErrorCode::ModelNotLoaded, "no model loaded");
    if (model->config.mode != network::Mode::Seg) {
        throw Error(ErrorCode::InvalidArgument, "seg_forward needs a model trained in seg mode");
    }
    if (!clicks.empty()) throw Error(ErrorCode::ClicksPresent, "automatic mode takes no clicks");
    if (defect_types.types.empty()) throw Error(ErrorCode::InvalidArgument, "defect type set is empty");
    const bool use_text = model->config.use_residual_branch && model->config.use_language;
    if (use_text && !text) throw Error(ErrorCode::EncoderUnavailable, "model uses language but no prompt embeddings were given");

    std::vector<torch::Tensor> tokens;
    for (const auto& key : defect_types.types) {
        if (text && !text->corpus().contains(key)) {
            throw Error(ErrorCode::UnknownPrompt, "unknown defect type '" + key.str() + "'");
        }
        if (use_text) tokens.push_back(text->canonical(key));
    }

    torch::NoGradGuard no_grad;
    const auto device = model->decoder->head->weight.device();
    const std::int64_t passes = use_text ? static_cast<std::int64_t>(tokens.size()) : 1;
    network::ForwardInputs in;
    in.image = image.unsqueeze(0).expand({passes, -1, -1, -1}).to(device);
    in.click_maps = torch::zeros({passes, 3, image.size(1), image.size(2)}, in.image.options());
    if (posfar.defined()) in.posfar = posfar.unsqueeze(0).expand({passes, -1, -1, -1}).to(device);
    if (use_text) {
        auto batch = language::pad_tokens(tokens);
        in.text = batch.tokens.to(device);
        in.text_mask = batch.mask.to(device);
    }
    auto probs = model->forward(in).probs;

    ScoreMapSet out;
    for (std::size_t i = 0; i < defect_types.types.size(); ++i) {
        out.maps.push_back(tensor_to_scores(probs[use_text ? static_cast<std::int64_t>(i) : 0][0]));
    }
    out.aggregate = aggregate_max(out.maps);
    out.image_score = image_score(out.aggregate);
    return out;
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

cv::Mat random_region(int size, std::mt19937_64& rng) {
    cv::Mat mask = cv::Mat::zeros(size, size, CV_8U);
    const double lo = std::max(2.0, size / 16.0);
    const double hi = std::max(lo + 1.0, size / 5.0);
    const cv::Point center(static_cast<int>(uniform(rng, hi, size - hi)), static_cast<int>(uniform(rng, hi, size - hi)));
    if (rng() % 2 == 0) {
        const cv::Size axes(static_cast<int>(uniform(rng, lo, hi)), static_cast<int>(uniform(rng, lo, hi)));
        cv::ellipse(mask, center, axes, uniform(rng, 0.0, 180.0), 0.0, 360.0, cv::Scalar(255), cv::FILLED);
    } else {
        const int vertices = 5 + static_cast<int>(rng() % 4);
        std::vector<cv::Point> poly;
        for (int v = 0; v < vertices; ++v) {
            const double angle = 2.0 * CV_PI * (v + uniform(rng, -0.3, 0.3)) / vertices;
            const double radius = uniform(rng, lo, hi);
            poly.emplace_back(center.x + static_cast<int>(radius * std::cos(angle)),
                              center.y + static_cast<int>(radius * std::sin(angle)));
        }
        cv::fillPoly(mask, std::vector<std::vector<cv::Point>>{poly}, cv::Scalar(255));
    }
    return mask;
}

}  // namespace

std::pair<cv::Mat, BinaryMask> synthesize_anomaly(const cv::Mat& rgb, std::mt19937_64& rng) {
    if (rgb.empty() || rgb.type() != CV_8UC3 || rgb.rows != rgb.cols) {
        throw Error(ErrorCode::InvalidArgument, "synthesize_anomaly expects a square 8-bit RGB image");
    }
    const int size = rgb.rows;
    cv::Mat region;
    do {
        region = random_region(size, rng);
    } while (cv::countNonZero(region) == 0);

    cv::Mat src;
    rgb.convertTo(src, CV_32FC3, 1.0 / 255.0);
    cv::Mat altered;
    switch (rng() % 4) {
        case 0:
            altered = src * uniform(rng, 0.25, 0.65);
            break;
        case 1:
            altered = src * uniform(rng, 1.3, 1.8);
            break;
        case 2: {
            const cv::Scalar color(uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1));
            const double a = uniform(rng, 0.4, 0.8);
            altered = src * (1.0 - a) + cv::Mat(src.size(), src.type(), color) * a;
            break;
        }
        default: {
            cv::Mat flipped;
            cv::flip(src, flipped, static_cast<int>(rng() % 3) - 1);
            const int dx = static_cast<int>(rng() % static_cast<unsigned>(size));
            const int dy = static_cast<int>(rng() % static_cast<unsigned>(size));
            const cv::Mat shift = (cv::Mat_<double>(2, 3) << 1, 0, dx, 0, 1, dy);
            cv::warpAffine(flipped, altered, shift, src.size(), cv::INTER_LINEAR, cv::BORDER_WRAP);
            cv::Mat noise(src.size(), src.type());
            cv::RNG noise_rng(rng());
            noise_rng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(0.08));
            altered = altered * uniform(rng, 0.6, 1.4) + noise;
            break;
        }
    }

    cv::Mat alpha;
    region.convertTo(alpha, CV_32F, 1.0 / 255.0);
    cv::GaussianBlur(alpha, alpha, cv::Size(3, 3), 0.8);
    cv::Mat alpha3;
    cv::merge(std::vector<cv::Mat>{alpha, alpha, alpha}, alpha3);
    cv::Mat blended = src.mul(cv::Scalar::all(1.0) - alpha3) + altered.mul(alpha3);
    cv::Mat out;
    blended.convertTo(out, CV_8UC3, 255.0);

    BinaryMask mask(size, size, 0);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) mask(r, c) = region.at<std::uint8_t>(r, c) ? 1 : 0;
    }
    return {out, mask};
}

void to_json(nlohmann::json& j, const SyntheticOptions& o) {
    j = nlohmann::json{{"count", o.count}, {"good_fraction", o.good_fraction}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, SyntheticOptions& o) {
    o.count = j.value("count", o.count);
    o.good_fraction = j.value("good_fraction", o.good_fraction);
    o.seed = j.value("seed", o.seed);
}

std::vector<pipeline::LabeledSample> synthetic_pool(const std::vector<datasets::DatasetIndex>& train_indices,
                                                    const pipeline::ResidualContext& residuals,
                                                    const datasets::PromptCorpus& corpus,
                                                    const SyntheticOptions& options) {
    struct Source {
        const datasets::DatasetIndex* index;
        const datasets::Sample* sample;
    };
    std::vector<Source> sources;
    for (const auto& index : train_indices) {
        for (const auto& s : index.samples) {
            if (!s.defective()) sources.push_back({&index, &s});
        }
    }
    if (sources.empty()) throw Error(ErrorCode::InvalidArgument, "no defect-free training images for synthesis");
    if (options.count < 1) throw Error(ErrorCode::InvalidArgument, "synthetic pool size must be >= 1");

    std::mt19937_64 rng(options.seed);
    std::vector<pipeline::LabeledSample> pool;
    for (int i = 0; i < options.count; ++i) {
        const auto& src = sources[static_cast<std::size_t>(i) % sources.size()];
        const auto& index = *src.index;
        cv::Mat rgb = io::load_rgb(src.sample->image_path, index.image_size);
        pipeline::LabeledSample ls;
        ls.category = index.category;
        const auto keys = corpus.keys_for(index.category);
        if (!keys.empty()) ls.key = keys[rng() % keys.size()];
        if (uniform(rng, 0.0, 1.0) < options.good_fraction) {
            ls.mask = BinaryMask(rgb.rows, rgb.cols, 0);
            ls.id = index.category + "/synthetic/good/" + std::to_string(i);
        } else {
            auto [img, mask] = synthesize_anomaly(rgb, rng);
            rgb = img;
            ls.mask = std::move(mask);
            ls.defective = true;
            ls.id = index.category + "/synthetic/anomaly/" + std::to_string(i);
        }
        ls.image = image_to_tensor(rgb);
        ls.posfar = residuals.posfar(ls.image, index.category);
        pool.push_back(std::move(ls));
    }
    return pool;
}

std::vector<pipeline::LabeledSample> label_pool(const fs::path& labels_dir, const pipeline::ResidualContext& residuals,
                                                const datasets::PromptCorpus& corpus, int image_size) {
    if (!fs::is_directory(labels_dir)) throw Error(ErrorCode::Io, "label directory not found: " + labels_dir.string());
    std::vector<fs::path> sidecars;
    for (const auto& entry : fs::directory_iterator(labels_dir)) {
        if (entry.path().extension() == ".json") sidecars.push_back(entry.path());
    }
    std::sort(sidecars.begin(), sidecars.end());
    std::vector<pipeline::LabeledSample> pool;
    for (const auto& path : sidecars) {
        std::ifstream in(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::Schema, path.string() + ": " + e.what());
        }
        pipeline::LabeledSample ls;
        try {
            ls.id = j.at("image_id").get<std::string>();
            ls.category = j.at("category").get<std::string>();
            if (j.contains("prompt_key") && !j["prompt_key"].is_null()) {
                ls.key = j["prompt_key"].get<datasets::PromptKey>();
            } else {
                const auto keys = corpus.keys_for(ls.category);
                if (!keys.empty()) ls.key = keys.front();
            }
            ls.image = pipeline::load_image_tensor(j.at("image_path").get<std::string>(), image_size);
            ls.mask = io::load_mask(path.parent_path() / j.at("mask_file").get<std::string>(), image_size);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::Schema, path.string() + ": " + e.what());
        }
        ls.defective = std::any_of(ls.mask.values().begin(), ls.mask.values().end(), [](std::uint8_t v) { return v != 0; });
        ls.posfar = residuals.posfar(ls.image, ls.category);
        pool.push_back(std::move(ls));
    }
    if (pool.empty()) throw Error(ErrorCode::InvalidArgument, "no exported labels in " + labels_dir.string());
    return pool;
}

}  // namespace adclick::segmode
