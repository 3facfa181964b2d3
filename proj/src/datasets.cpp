#include "adclick/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "adclick/image_io.hpp"

namespace fs = std::filesystem;

namespace adclick::datasets {

Layout parse_layout(const std::string& name) {
    if (name == "mvtec") return Layout::MVTec;
    if (name == "ksdd2") return Layout::KSDD2;
    throw Error(ErrorCode::InvalidArgument, "unknown dataset layout '" + name + "' (expected mvtec|ksdd2)");
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "test") return Split::Test;
    throw Error(ErrorCode::InvalidArgument, "unknown split '" + name + "' (expected train|test)");
}

std::string to_string(Layout layout) { return layout == Layout::MVTec ? "mvtec" : "ksdd2"; }
std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::size_t DatasetIndex::count_good() const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return !s.defective(); }));
}

std::size_t DatasetIndex::count_defective() const { return samples.size() - count_good(); }

std::vector<std::string> DatasetIndex::defect_types() const {
    std::set<std::string> types;
    for (const auto& s : samples) {
        if (s.defective()) types.insert(s.defect_type);
    }
    return {types.begin(), types.end()};
}

std::string DatasetIndex::summary() const {
    std::ostringstream os;
    os << category << "/" << to_string(split) << ": " << count_good() << " good, " << count_defective() << " defective";
    const auto types = defect_types();
    if (!types.empty()) {
        os << " (";
        for (std::size_t i = 0; i < types.size(); ++i) os << (i ? ", " : "") << types[i];
        os << ")";
    }
    return os.str();
}

void to_json(nlohmann::json& j, const DatasetIndex& index) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : index.samples) {
        nlohmann::json e{{"image", s.image_path.string()}, {"defect_type", s.defect_type}};
        e["mask"] = s.mask_path ? nlohmann::json(s.mask_path->string()) : nlohmann::json(nullptr);
        samples.push_back(std::move(e));
    }
    j = nlohmann::json{{"root", index.root.string()},       {"category", index.category},
                       {"split", to_string(index.split)},   {"layout", to_string(index.layout)},
                       {"image_size", index.image_size},    {"samples", std::move(samples)}};
}

void from_json(const nlohmann::json& j, DatasetIndex& index) {
    index.root = j.at("root").get<std::string>();
    index.category = j.at("category").get<std::string>();
    index.split = parse_split(j.at("split").get<std::string>());
    index.layout = parse_layout(j.at("layout").get<std::string>());
    index.image_size = j.at("image_size").get<int>();
    index.samples.clear();
    for (const auto& e : j.at("samples")) {
        Sample s;
        s.image_path = e.at("image").get<std::string>();
        s.defect_type = e.at("defect_type").get<std::string>();
        if (!e.at("mask").is_null()) s.mask_path = fs::path(e.at("mask").get<std::string>());
        index.samples.push_back(std::move(s));
    }
}

namespace {

[[noreturn]] void layout_mismatch(const fs::path& root, const std::string& what) {
    throw Error(ErrorCode::LayoutMismatch, "layout mismatch at " + root.string() + ": " + what);
}

std::vector<fs::directory_entry> sorted_entries(const fs::path& dir) {
    std::vector<fs::directory_entry> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().filename().string().starts_with(".")) continue;
        out.push_back(e);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path() < b.path(); });
    return out;
}

bool is_png(const fs::path& p) { return p.extension() == ".png"; }

DatasetIndex load_mvtec(const fs::path& root, Split split, int image_size) {
    DatasetIndex index;
    index.root = root;
    index.category = root.filename().string();
    if (index.category.empty()) index.category = root.parent_path().filename().string();
    index.split = split;
    index.layout = Layout::MVTec;
    index.image_size = image_size;

    for (const auto& e : sorted_entries(root)) {
        const auto name = e.path().filename().string();
        if (e.is_directory() && name != "train" && name != "test" && name != "ground_truth") {
            layout_mismatch(root, "unexpected path " + e.path().string());
        }
    }
    const fs::path split_dir = root / to_string(split);
    if (!fs::is_directory(split_dir)) layout_mismatch(root, "missing directory " + split_dir.string());

    for (const auto& type_dir : sorted_entries(split_dir)) {
        if (!type_dir.is_directory()) layout_mismatch(root, "unexpected path " + type_dir.path().string());
        const std::string defect = type_dir.path().filename().string();
        if (split == Split::Train && defect != kGood) {
            layout_mismatch(root, "unexpected path " + type_dir.path().string());
        }
        for (const auto& f : sorted_entries(type_dir.path())) {
            if (!f.is_regular_file() || !is_png(f.path())) {
                layout_mismatch(root, "unexpected path " + f.path().string());
            }
            Sample s{f.path(), std::nullopt, defect};
            if (defect != kGood) {
                const fs::path mask = root / "ground_truth" / defect / (f.path().stem().string() + "_mask.png");
                if (!fs::is_regular_file(mask)) {
                    throw Error(ErrorCode::MissingMask,
                                "missing ground-truth mask for " + f.path().string() + " (expected " + mask.string() + ")");
                }
                s.mask_path = mask;
            }
            index.samples.push_back(std::move(s));
        }
    }
    if (index.samples.empty()) layout_mismatch(root, "no images under " + split_dir.string());
    return index;
}

DatasetIndex load_ksdd2(const fs::path& root, Split split, int image_size) {
    DatasetIndex index;
    index.root = root;
    index.category = "ksdd2";
    index.split = split;
    index.layout = Layout::KSDD2;
    index.image_size = image_size;

    const fs::path split_dir = root / to_string(split);
    if (!fs::is_directory(split_dir)) layout_mismatch(root, "missing directory " + split_dir.string());
    for (const auto& f : sorted_entries(split_dir)) {
        if (!f.is_regular_file() || !is_png(f.path())) layout_mismatch(root, "unexpected path " + f.path().string());
        const std::string stem = f.path().stem().string();
        if (stem.ends_with("_GT")) continue;
        const fs::path mask = split_dir / (stem + "_GT.png");
        if (!fs::is_regular_file(mask)) {
            throw Error(ErrorCode::MissingMask, "missing ground-truth mask for " + f.path().string());
        }
        const BinaryMask m = io::load_mask(mask);
        const bool defective = std::any_of(m.values().begin(), m.values().end(), [](auto v) { return v != 0; });
        Sample s{f.path(), std::nullopt, defective ? "defect" : kGood};
        if (defective) s.mask_path = mask;
        index.samples.push_back(std::move(s));
    }
    if (index.samples.empty()) layout_mismatch(root, "no images under " + split_dir.string());
    return index;
}

}  // namespace

DatasetIndex load_dataset(const fs::path& root, Layout layout, Split split, int image_size) {
    if (!fs::is_directory(root)) {
        throw Error(ErrorCode::Io, "dataset root does not exist: " + root.string());
    }
    if (image_size <= 0) throw Error(ErrorCode::InvalidArgument, "image_size must be positive");
    return layout == Layout::MVTec ? load_mvtec(root, split, image_size) : load_ksdd2(root, split, image_size);
}

// ---------------------------------------------------------------------------
// Prompt corpus

void to_json(nlohmann::json& j, const PromptKey& k) { j = nlohmann::json{{"object", k.object}, {"defect", k.defect}}; }

void from_json(const nlohmann::json& j, PromptKey& k) {
    k.object = j.at("object").get<std::string>();
    k.defect = j.at("defect").get<std::string>();
}

const std::vector<std::string>& PromptCorpus::phrases(const PromptKey& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw Error(ErrorCode::UnknownPrompt, "unknown prompt key " + key.str());
    return it->second;
}

PromptKey PromptCorpus::resolve(const std::string& object, const std::string& defect) const {
    PromptKey key{object, defect};
    if (contains(key)) return key;
    auto it = fallbacks_.find(object);
    if (it != fallbacks_.end()) return PromptKey{object, it->second};
    throw Error(ErrorCode::UnknownPrompt, "unknown prompt key " + key.str());
}

std::vector<PromptKey> PromptCorpus::keys_for(const std::string& object) const {
    std::vector<PromptKey> out;
    for (const auto& [k, _] : entries_) {
        if (k.object == object) out.push_back(k);
    }
    return out;
}

std::size_t PromptCorpus::total_phrases() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.size();
    return n;
}

std::string PromptCorpus::summary() const {
    std::ostringstream os;
    os << entries_.size() << " entries";
    for (const auto& [k, v] : entries_) os << "; " << k.str() << ": " << v.size();
    return os.str();
}

void PromptCorpus::validate_against(const DatasetIndex& index) const {
    for (const auto& t : index.defect_types()) resolve(index.category, t);
}

void PromptCorpus::add(const PromptKey& key, std::vector<std::string> phrases) {
    if (phrases.empty()) throw Error(ErrorCode::EmptyPhraseList, "empty phrase list for " + key.str());
    if (!entries_.emplace(key, std::move(phrases)).second) {
        throw Error(ErrorCode::Schema, "duplicate prompt key " + key.str());
    }
}

void PromptCorpus::set_fallback(const std::string& object, const std::string& defect) {
    fallbacks_[object] = defect;
}

nlohmann::json PromptCorpus::to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [k, v] : entries_) {
        entries.push_back({{"object", k.object}, {"defect", k.defect}, {"phrases", v}});
    }
    nlohmann::json j{{"version", 1}, {"entries", std::move(entries)}};
    if (!fallbacks_.empty()) j["fallbacks"] = fallbacks_;
    return j;
}

namespace {

const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& path,
                              nlohmann::json::value_t type) {
    if (!j.is_object() || !j.contains(key)) throw Error(ErrorCode::Schema, "schema error at " + path + "/" + key + ": missing");
    const auto& v = j.at(key);
    if (v.type() != type) throw Error(ErrorCode::Schema, "schema error at " + path + "/" + key + ": wrong type");
    return v;
}

}  // namespace

PromptCorpus PromptCorpus::from_json(const nlohmann::json& j) {
    using vt = nlohmann::json::value_t;
    if (!j.is_object()) throw Error(ErrorCode::Schema, "schema error at /: expected object");
    PromptCorpus corpus;
    const auto& entries = require(j, "entries", "", vt::array);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string path = "/entries/" + std::to_string(i);
        const auto& e = entries[i];
        PromptKey key{require(e, "object", path, vt::string).get<std::string>(),
                      require(e, "defect", path, vt::string).get<std::string>()};
        const auto& phrases = require(e, "phrases", path, vt::array);
        std::vector<std::string> list;
        for (std::size_t p = 0; p < phrases.size(); ++p) {
            if (!phrases[p].is_string() || phrases[p].get<std::string>().empty()) {
                throw Error(ErrorCode::Schema, "schema error at " + path + "/phrases/" + std::to_string(p) +
                                                   ": expected non-empty string");
            }
            list.push_back(phrases[p].get<std::string>());
        }
        if (list.empty()) throw Error(ErrorCode::EmptyPhraseList, "empty phrase list at " + path + "/phrases");
        if (corpus.contains(key)) throw Error(ErrorCode::Schema, "schema error at " + path + ": duplicate key " + key.str());
        corpus.add(key, std::move(list));
    }
    if (j.contains("fallbacks")) {
        const auto& fb = require(j, "fallbacks", "", vt::object);
        for (const auto& [object, defect] : fb.items()) {
            if (!defect.is_string()) throw Error(ErrorCode::Schema, "schema error at /fallbacks/" + object);
            PromptKey target{object, defect.get<std::string>()};
            if (!corpus.contains(target)) {
                throw Error(ErrorCode::Schema, "schema error at /fallbacks/" + object + ": no entry " + target.str());
            }
            corpus.set_fallback(object, target.defect);
        }
    }
    return corpus;
}

PromptCorpus load_prompt_corpus(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open prompt corpus " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Schema, "schema error at /: " + std::string(e.what()));
    }
    return PromptCorpus::from_json(j);
}

void save_prompt_corpus(const PromptCorpus& corpus, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << corpus.to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Toy data

namespace {

struct Rgb {
    float r, g, b;
};

Rgb category_tint(std::size_t category_index) {
    static const Rgb tints[] = {{0.75f, 0.78f, 0.82f}, {0.85f, 0.75f, 0.6f}, {0.6f, 0.8f, 0.7f}, {0.8f, 0.7f, 0.85f}};
    return tints[category_index % 4];
}

// Intensity texture in roughly [0.2, 0.8].
cv::Mat texture(std::size_t category_index, int size, std::mt19937_64& rng) {
    std::normal_distribution<float> noise(0.0f, 1.0f);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    cv::Mat t(size, size, CV_32F);
    const float scale = static_cast<float>(size) / 64.0f;
    if (category_index % 2 == 0) {
        const float theta = 0.6f + 0.3f * (unit(rng) - 0.5f);
        const float period = (7.0f + 2.0f * unit(rng)) * scale;
        const float phase = 2.0f * std::numbers::pi_v<float> * unit(rng);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const float u = x * std::cos(theta) + y * std::sin(theta);
                t.at<float>(y, x) = 0.5f + 0.22f * std::sin(2.0f * std::numbers::pi_v<float> * u / period + phase) +
                                    0.04f * noise(rng);
            }
        }
    } else {
        cv::Mat n(size, size, CV_32F);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) n.at<float>(y, x) = noise(rng);
        }
        cv::GaussianBlur(n, n, cv::Size(0, 0), 1.2 * scale);
        cv::Scalar mean, stddev;
        cv::meanStdDev(n, mean, stddev);
        t = 0.5f + 0.15f * (n - mean[0]) / std::max(1e-6, stddev[0]);
    }
    return t;
}

cv::Mat to_rgb8(const cv::Mat& intensity, Rgb tint) {
    cv::Mat out(intensity.rows, intensity.cols, CV_8UC3);
    for (int y = 0; y < intensity.rows; ++y) {
        for (int x = 0; x < intensity.cols; ++x) {
            const float v = intensity.at<float>(y, x);
            auto to8 = [](float f) { return static_cast<std::uint8_t>(std::clamp(f, 0.0f, 1.0f) * 255.0f + 0.5f); };
            out.at<cv::Vec3b>(y, x) = cv::Vec3b(to8(v * tint.r / 0.8f), to8(v * tint.g / 0.8f), to8(v * tint.b / 0.8f));
        }
    }
    return out;
}

// Draws one anomaly of the given kind; returns its ground-truth mask.
cv::Mat add_anomaly(cv::Mat& rgb, std::size_t defect_index, std::mt19937_64& rng) {
    const int size = rgb.rows;
    const float scale = static_cast<float>(size) / 64.0f;
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    cv::Mat mask = cv::Mat::zeros(size, size, CV_8U);
    const int margin = static_cast<int>(14 * scale);
    const cv::Point center(margin + static_cast<int>(unit(rng) * (size - 2 * margin)),
                           margin + static_cast<int>(unit(rng) * (size - 2 * margin)));
    if (defect_index % 2 == 0) {
        const cv::Size axes(static_cast<int>((6 + 7 * unit(rng)) * scale), static_cast<int>((6 + 7 * unit(rng)) * scale));
        cv::ellipse(mask, center, axes, 180.0 * unit(rng), 0, 360, cv::Scalar(255), cv::FILLED);
    } else {
        std::vector<cv::Point> poly;
        const int n = 7;
        const float phase = unit(rng);
        for (int i = 0; i < n; ++i) {
            const float a = 2.0f * std::numbers::pi_v<float> * (i + phase) / n;
            const float r = (7 + 6 * unit(rng)) * scale;
            poly.emplace_back(center.x + static_cast<int>(r * std::cos(a)), center.y + static_cast<int>(r * std::sin(a)));
        }
        cv::fillPoly(mask, std::vector<std::vector<cv::Point>>{poly}, cv::Scalar(255));
    }
    cv::Mat alpha;
    mask.convertTo(alpha, CV_32F, 1.0 / 255.0);
    cv::GaussianBlur(alpha, alpha, cv::Size(0, 0), 0.8 * scale);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const float a = alpha.at<float>(y, x);
            if (a <= 0.0f) continue;
            cv::Vec3b& p = rgb.at<cv::Vec3b>(y, x);
            cv::Vec3f target;
            if (defect_index % 2 == 0) {
                target = cv::Vec3f(p[0] * 0.3f, p[1] * 0.3f, p[2] * 0.35f);
            } else {
                target = cv::Vec3f(std::min(255.0f, p[0] * 0.6f + 110.0f), p[1] * 0.55f, p[2] * 0.45f);
            }
            for (int ch = 0; ch < 3; ++ch) {
                p[ch] = static_cast<std::uint8_t>(std::clamp((1.0f - a) * p[ch] + a * target[ch], 0.0f, 255.0f) + 0.5f);
            }
        }
    }
    return mask;
}

std::string numbered(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d", i);
    return buf;
}

}  // namespace

void make_toy_dataset(const fs::path& root, const ToyOptions& options) {
    for (std::size_t ci = 0; ci < options.categories.size(); ++ci) {
        const std::string& category = options.categories[ci];
        std::mt19937_64 rng(options.seed * 1000003ULL + fnv1a64(category));
        const fs::path cat = root / category;
        const Rgb tint = category_tint(ci);

        for (int i = 0; i < options.train_good; ++i) {
            io::save_rgb(cat / "train" / kGood / (numbered(i) + ".png"), to_rgb8(texture(ci, options.image_size, rng), tint));
        }
        for (int i = 0; i < options.test_good; ++i) {
            io::save_rgb(cat / "test" / kGood / (numbered(i) + ".png"), to_rgb8(texture(ci, options.image_size, rng), tint));
        }
        for (std::size_t di = 0; di < options.defect_types.size(); ++di) {
            const std::string& defect = options.defect_types[di];
            for (int i = 0; i < options.test_defect_per_type; ++i) {
                cv::Mat rgb = to_rgb8(texture(ci, options.image_size, rng), tint);
                cv::Mat mask = add_anomaly(rgb, di, rng);
                io::save_rgb(cat / "test" / defect / (numbered(i) + ".png"), rgb);
                BinaryMask m(mask.rows, mask.cols, 0);
                for (int y = 0; y < mask.rows; ++y) {
                    for (int x = 0; x < mask.cols; ++x) m(y, x) = mask.at<std::uint8_t>(y, x) ? 1 : 0;
                }
                io::save_mask_png(cat / "ground_truth" / defect / (numbered(i) + "_mask.png"), m);
            }
        }
    }
}

PromptCorpus make_toy_corpus(const ToyOptions& options, int phrases_per_entry) {
    static const std::vector<std::vector<std::string>> descriptions = {
        {"a dark round blob", "a dark elliptical spot", "a round dark blotch", "an oval dark mark",
         "a dark circular blob", "a smooth dark spot", "a dark rounded patch", "an elliptical dark blotch",
         "a dim round spot", "a dark blob shaped like an ellipse"},
        {"a reddish irregular stain", "an irregular red discoloration", "a red colored stain", "a jagged reddish patch",
         "an uneven red stain", "a reddish polygonal mark", "a red tinted irregular spot", "a colored irregular stain",
         "a red smear with jagged edges", "an irregular stain with a red tint"},
    };
    PromptCorpus corpus;
    for (const auto& category : options.categories) {
        for (std::size_t di = 0; di < options.defect_types.size(); ++di) {
            const auto& pool = descriptions[di % descriptions.size()];
            std::vector<std::string> phrases;
            for (int p = 0; p < phrases_per_entry; ++p) {
                const auto& d = pool[p % pool.size()];
                phrases.push_back(p % 2 == 0 ? d + " on the " + category + " surface"
                                             : d + " defect on a " + category + " texture");
            }
            corpus.add(PromptKey{category, options.defect_types[di]}, std::move(phrases));
        }
    }
    return corpus;
}

}  // namespace adclick::datasets
