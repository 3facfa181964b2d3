#include "adclick/pipeline.hpp"

#include <algorithm>

#include "adclick/image_io.hpp"
#include "adclick/tensor_utils.hpp"

namespace fs = std::filesystem;

namespace adclick::pipeline {

void to_json(nlohmann::json& j, const PosFarSettings& s) {
    j = nlohmann::json{{"window_radius", s.window_radius}, {"theta", s.theta}, {"coreset_fraction", s.coreset_fraction}};
}

void from_json(const nlohmann::json& j, PosFarSettings& s) {
    s.window_radius = j.value("window_radius", s.window_radius);
    s.theta = j.value("theta", s.theta);
    s.coreset_fraction = j.value("coreset_fraction", s.coreset_fraction);
}

ResidualContext::ResidualContext(std::shared_ptr<const posfar::FeatureExtractor> extractor, PosFarSettings settings)
    : extractor_(std::move(extractor)), settings_(settings) {
    if (!extractor_) throw Error(ErrorCode::InvalidArgument, "residual context needs a feature extractor");
    if (settings_.window_radius < 0) throw Error(ErrorCode::InvalidArgument, "window_radius must be >= 0");
    if (!(settings_.theta > 0.0)) throw Error(ErrorCode::InvalidArgument, "theta must be > 0");
}

void ResidualContext::add_bank(datasets::ReferenceBank bank) {
    bank.validate();
    if (bank.extractor_fingerprint != extractor_->fingerprint()) {
        throw Error(ErrorCode::Schema, "bank for '" + bank.category + "' was built with extractor '" +
                                           bank.extractor_fingerprint + "', expected '" + extractor_->fingerprint() + "'");
    }
    banks_[bank.category] = std::move(bank);
}

const datasets::ReferenceBank& ResidualContext::bank(const std::string& category) const {
    auto it = banks_.find(category);
    if (it == banks_.end()) throw Error(ErrorCode::InvalidArgument, "no reference bank for category '" + category + "'");
    return it->second;
}

std::vector<std::string> ResidualContext::categories() const {
    std::vector<std::string> out;
    for (const auto& [name, bank] : banks_) out.push_back(name);
    return out;
}

torch::Tensor ResidualContext::posfar(const torch::Tensor& image, const std::string& category) const {
    torch::NoGradGuard no_grad;
    auto input = image;
    const int size = extractor_->input_size();
    if (image.size(1) != size || image.size(2) != size) {
        input = torch::nn::functional::interpolate(image.unsqueeze(0),
                                                   torch::nn::functional::InterpolateFuncOptions()
                                                       .size(std::vector<std::int64_t>{size, size})
                                                       .mode(torch::kBilinear)
                                                       .align_corners(false))
                    .squeeze(0);
    }
    return posfar::posfar_for_image(input, *extractor_, bank(category), settings_.window_radius, settings_.theta)
        .channels_first();
}

PromptEmbeddings::PromptEmbeddings(std::shared_ptr<const language::TextEncoder> encoder, datasets::PromptCorpus corpus)
    : encoder_(std::move(encoder)), corpus_(std::move(corpus)) {
    if (!encoder_) throw Error(ErrorCode::EncoderUnavailable, "no text encoder configured");
}

torch::Tensor PromptEmbeddings::embed(const std::string& phrase) const {
    {
        std::lock_guard lock(mutex_);
        auto it = cache_.find(phrase);
        if (it != cache_.end()) return it->second;
    }
    auto t = encoder_->embed(phrase);
    std::lock_guard lock(mutex_);
    return cache_.emplace(phrase, t).first->second;
}

torch::Tensor PromptEmbeddings::sample(const datasets::PromptKey& key, std::mt19937_64& rng) const {
    return embed(language::select_prompt(corpus_, key, rng));
}

const std::string& PromptEmbeddings::canonical_phrase(const datasets::PromptKey& key) const {
    return corpus_.phrases(key).front();
}

torch::Tensor PromptEmbeddings::canonical(const datasets::PromptKey& key) const { return embed(canonical_phrase(key)); }

torch::Tensor load_image_tensor(const fs::path& path, int size) { return image_to_tensor(io::load_rgb(path, size)); }

std::string sample_id(const datasets::DatasetIndex& index, const datasets::Sample& sample) {
    return index.category + "/" + datasets::to_string(index.split) + "/" + sample.defect_type + "/" +
           sample.image_path.stem().string();
}

std::vector<LabeledSample> load_labeled_samples(const datasets::DatasetIndex& index, const ResidualContext& residuals,
                                                const datasets::PromptCorpus& corpus, bool defective_only) {
    std::vector<LabeledSample> out;
    const auto keys = corpus.keys_for(index.category);
    for (const auto& s : index.samples) {
        if (defective_only && !s.defective()) continue;
        LabeledSample ls;
        ls.id = sample_id(index, s);
        ls.category = index.category;
        ls.defective = s.defective();
        if (s.defective()) {
            ls.key = corpus.resolve(index.category, s.defect_type);
        } else if (!keys.empty()) {
            ls.key = keys.front();
        }
        ls.image = load_image_tensor(s.image_path, index.image_size);
        ls.posfar = residuals.posfar(ls.image, index.category);
        if (s.mask_path) {
            ls.mask = io::load_mask(*s.mask_path, index.image_size);
        } else {
            ls.mask = BinaryMask(index.image_size, index.image_size, 0);
        }
        out.push_back(std::move(ls));
    }
    return out;
}

void to_json(nlohmann::json& j, const DataSource& s) {
    j = nlohmann::json{{"root", s.root}, {"layout", s.layout}, {"categories", s.categories}, {"image_size", s.image_size}};
}

void from_json(const nlohmann::json& j, DataSource& s) {
    s.root = j.value("root", s.root);
    s.layout = j.value("layout", s.layout);
    s.categories = j.value("categories", s.categories);
    s.image_size = j.value("image_size", s.image_size);
}

std::vector<std::string> list_categories(const DataSource& source) {
    if (datasets::parse_layout(source.layout) == datasets::Layout::KSDD2) return {"ksdd2"};
    if (!source.categories.empty()) return source.categories;
    if (!fs::is_directory(source.root)) throw Error(ErrorCode::Io, "dataset root not found: " + source.root);
    std::vector<std::string> out;
    for (const auto& entry : fs::directory_iterator(source.root)) {
        if (entry.is_directory()) out.push_back(entry.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw Error(ErrorCode::LayoutMismatch, "no category directories under " + source.root);
    return out;
}

datasets::DatasetIndex load_split(const DataSource& source, const std::string& category, datasets::Split split) {
    const auto layout = datasets::parse_layout(source.layout);
    if (layout == datasets::Layout::KSDD2) return datasets::load_dataset(source.root, layout, split, source.image_size);
    return datasets::load_dataset(fs::path(source.root) / category, layout, split, source.image_size);
}

void ensure_banks(ResidualContext& residuals, const DataSource& source, const fs::path& bank_dir, std::uint64_t seed,
                  bool rebuild) {
    for (const auto& category : list_categories(source)) {
        const fs::path path = bank_dir / (category + ".bank");
        if (!rebuild && fs::exists(path)) {
            auto bank = datasets::load_bank(path);
            if (bank.extractor_fingerprint == residuals.extractor().fingerprint()) {
                residuals.add_bank(std::move(bank));
                continue;
            }
        }
        const auto index = load_split(source, category, datasets::Split::Train);
        datasets::DatasetIndex good = index;
        std::erase_if(good.samples, [](const datasets::Sample& s) { return s.defective(); });
        auto bank = datasets::build_reference_bank(good, residuals.extractor(), residuals.settings().coreset_fraction, seed);
        datasets::save_bank(bank, path);
        residuals.add_bank(std::move(bank));
    }
}

}  // namespace adclick::pipeline
