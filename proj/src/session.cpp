#include "adclick/session.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "adclick/image_io.hpp"
#include "adclick/metrics.hpp"

namespace fs = std::filesystem;

namespace adclick::session {

std::string to_string(Status status) {
    switch (status) {
        case Status::Active: return "active";
        case Status::Exported: return "exported";
        case Status::Abandoned: return "abandoned";
    }
    return "unknown";
}

void ImageCatalog::add_index(const datasets::DatasetIndex& index) {
    for (const auto& s : index.samples) {
        ImageEntry e{pipeline::sample_id(index, s), index.category, s.image_path, s.mask_path, s.defect_type};
        if (by_id_.count(e.id)) continue;
        by_id_[e.id] = entries_.size();
        entries_.push_back(std::move(e));
    }
}

const ImageEntry& ImageCatalog::find(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw Error(ErrorCode::UnknownImage, "unknown image '" + id + "'");
    return entries_[it->second];
}

namespace {

bool uses_language(const ServiceContext& context) {
    return context.model && context.model->config.use_residual_branch && context.model->config.use_language;
}

}  // namespace

PromptChoice resolve_prompt(const ServiceContext& context, const std::string& category, const std::string& request) {
    PromptChoice choice;
    if (!context.text) {
        if (!request.empty()) throw Error(ErrorCode::UnknownPrompt, "no prompt corpus loaded; cannot resolve '" + request + "'");
        return choice;
    }
    const auto& corpus = context.text->corpus();
    if (request.empty()) {
        const auto keys = corpus.keys_for(category);
        if (keys.empty()) {
            if (uses_language(context)) throw Error(ErrorCode::UnknownPrompt, "no prompt entries for category '" + category + "'");
            return choice;
        }
        choice.key = keys.front();
    } else {
        const auto slash = request.find('/');
        if (slash == std::string::npos) throw Error(ErrorCode::UnknownPrompt, "unknown prompt key '" + request + "'");
        try {
            choice.key = corpus.resolve(request.substr(0, slash), request.substr(slash + 1));
        } catch (const Error&) {
            throw Error(ErrorCode::UnknownPrompt, "unknown prompt key '" + request + "'");
        }
    }
    choice.text = context.text->canonical_phrase(*choice.key);
    return choice;
}

network::InferenceInputs prepare_inputs(const ServiceContext& context, const ImageEntry& image, const PromptChoice& prompt) {
    network::InferenceInputs inputs;
    inputs.image = pipeline::load_image_tensor(image.path, context.image_size);
    if (context.model && context.model->config.use_residual_branch) {
        if (!context.residuals) throw Error(ErrorCode::InvalidArgument, "no reference banks loaded");
        inputs.posfar = context.residuals->posfar(inputs.image, image.category);
    }
    if (uses_language(context)) {
        if (!context.text) throw Error(ErrorCode::EncoderUnavailable, "model uses language but no text encoder is loaded");
        inputs.text = context.text->embed(prompt.text);
    }
    return inputs;
}

clicks::AnomalyMask refine(const ServiceContext& context, const network::InferenceInputs& inputs,
                           std::span<const clicks::Click> history, const clicks::AnomalyMask& previous, int click_radius,
                           float threshold) {
    if (!context.model) throw Error(ErrorCode::ModelNotLoaded, "no model loaded");
    auto model = context.model;
    return network::predict_mask(model, inputs, history, previous, click_radius, threshold);
}

SessionManager::SessionManager(std::shared_ptr<const ServiceContext> context) : context_(std::move(context)) {
    if (!context_) throw Error(ErrorCode::InvalidArgument, "session manager needs a context");
    std::random_device rd;
    rng_.seed((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
}

std::string SessionManager::new_token() {
    // Caller holds mutex_.
    while (true) {
        std::ostringstream os;
        os << std::hex << std::setfill('0') << std::setw(16) << rng_() << std::setw(16) << rng_();
        if (!sessions_.count(os.str())) return os.str();
    }
}

std::shared_ptr<SessionManager::Entry> SessionManager::find(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::UnknownSession, "unknown or expired session '" + id + "'");
    return it->second;
}

std::string SessionManager::open(const std::string& image_id, const std::string& category, const std::string& prompt_key) {
    const auto& image = context_->images.find(image_id);
    if (!category.empty() && category != image.category) {
        throw Error(ErrorCode::InvalidArgument, "image '" + image_id + "' belongs to category '" + image.category + "'");
    }
    if (!context_->model) throw Error(ErrorCode::ModelNotLoaded, "no model loaded");
    auto entry = std::make_shared<Entry>();
    auto& s = entry->state;
    s.image_id = image.id;
    s.category = image.category;
    s.prompt = resolve_prompt(*context_, image.category, prompt_key);
    s.inputs = prepare_inputs(*context_, image, s.prompt);
    const int h = static_cast<int>(s.inputs.image.size(1));
    const int w = static_cast<int>(s.inputs.image.size(2));
    s.initial = clicks::AnomalyMask::zeros(h, w, context_->threshold);
    if (context_->evaluation_mode && image.mask_path) s.ground_truth = io::load_mask(*image.mask_path, context_->image_size);
    s.last_access = std::chrono::steady_clock::now();

    std::lock_guard lock(mutex_);
    s.id = new_token();
    sessions_[s.id] = entry;
    return s.id;
}

namespace {

void require_active(const SessionState& s) {
    if (s.status == Status::Exported) throw Error(ErrorCode::ImmutableSession, "session '" + s.id + "' was exported");
    if (s.status != Status::Active) throw Error(ErrorCode::ImmutableSession, "session '" + s.id + "' is not active");
}

}  // namespace

ClickResult SessionManager::submit_click(const std::string& id, const clicks::Click& click) {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    auto& s = entry->state;
    s.last_access = std::chrono::steady_clock::now();
    require_active(s);
    clicks::check_in_bounds(click, s.initial.rows(), s.initial.cols());

    auto history = s.clicks;
    history.push_back(click);
    history.back().index = static_cast<int>(history.size());
    auto mask = refine(*context_, s.inputs, history, s.current(), context_->click_radius, context_->threshold);
    s.clicks = std::move(history);
    s.masks.push_back(mask);

    ClickResult result{mask, std::nullopt, s.clicks.size()};
    if (s.ground_truth) result.iou = metrics::iou(mask.binarize(), *s.ground_truth);
    return result;
}

clicks::AnomalyMask SessionManager::undo(const std::string& id) {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    auto& s = entry->state;
    s.last_access = std::chrono::steady_clock::now();
    require_active(s);
    if (s.clicks.empty()) throw Error(ErrorCode::InvalidArgument, "nothing to undo");
    s.clicks.pop_back();
    s.masks.pop_back();
    return s.current();
}

PromptChoice SessionManager::set_prompt(const std::string& id, const std::string& prompt, bool free_text) {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    auto& s = entry->state;
    s.last_access = std::chrono::steady_clock::now();
    require_active(s);
    PromptChoice choice;
    if (free_text) {
        if (prompt.empty()) throw Error(ErrorCode::InvalidArgument, "prompt text is empty");
        choice.text = prompt;
    } else {
        choice = resolve_prompt(*context_, s.category, prompt);
    }
    if (uses_language(*context_)) s.inputs.text = context_->text->embed(choice.text);
    s.prompt = choice;
    return choice;
}

SessionView SessionManager::view(const std::string& id) {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    const auto& s = entry->state;
    entry->state.last_access = std::chrono::steady_clock::now();
    return SessionView{s.id, s.image_id, s.category, s.prompt, s.clicks, s.current(), s.status, s.exported_path};
}

nlohmann::json to_json(const LabelRecord& r) {
    nlohmann::json j;
    j["format"] = "adclick-label";
    j["version"] = 1;
    j["image_id"] = r.image_id;
    j["image_path"] = r.image_path;
    j["category"] = r.category;
    j["prompt_key"] = r.prompt.key ? nlohmann::json(*r.prompt.key) : nlohmann::json(nullptr);
    j["prompt_text"] = r.prompt.text;
    j["clicks"] = r.clicks;
    j["threshold"] = r.threshold;
    j["click_radius"] = r.click_radius;
    j["model_fingerprint"] = r.model_fingerprint;
    j["mask_file"] = r.mask_file;
    j["session_id"] = r.session_id;
    j["seed"] = r.seed;
    return j;
}

LabelRecord label_record_from_json(const nlohmann::json& j) {
    LabelRecord r;
    try {
        r.image_id = j.at("image_id").get<std::string>();
        r.image_path = j.value("image_path", std::string());
        r.category = j.value("category", std::string());
        if (j.contains("prompt_key") && !j["prompt_key"].is_null()) r.prompt.key = j["prompt_key"].get<datasets::PromptKey>();
        r.prompt.text = j.value("prompt_text", std::string());
        r.clicks = j.at("clicks").get<std::vector<clicks::Click>>();
        r.threshold = j.value("threshold", r.threshold);
        r.click_radius = j.value("click_radius", r.click_radius);
        r.model_fingerprint = j.value("model_fingerprint", std::string());
        r.mask_file = j.value("mask_file", std::string());
        r.session_id = j.value("session_id", std::string());
        r.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Schema, std::string("label record: ") + e.what());
    }
    return r;
}

LabelRecord read_label_record(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
    try {
        return label_record_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::Schema, path.string() + ": " + e.what());
    }
}

namespace {

fs::path resolve_destination(const fs::path& root, const std::string& destination) {
    const fs::path base = fs::weakly_canonical(fs::absolute(root));
    fs::path target = destination.empty() ? base / "labels" : fs::path(destination);
    if (target.is_relative()) target = base / target;
    target = fs::weakly_canonical(fs::absolute(target));
    const auto rel = target.lexically_relative(base);
    if (rel.empty() || *rel.begin() == "..") {
        throw Error(ErrorCode::InvalidArgument, "export destination " + target.string() + " is outside the output root");
    }
    return target;
}

std::string file_stem(const SessionState& s) {
    std::string name = s.image_id;
    std::replace(name.begin(), name.end(), '/', '_');
    return name + "__" + s.id.substr(0, 8);
}

}  // namespace

fs::path SessionManager::export_label(const std::string& id, const std::string& destination) {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    auto& s = entry->state;
    s.last_access = std::chrono::steady_clock::now();
    if (s.status == Status::Exported && s.exported_path) return *s.exported_path;
    require_active(s);
    if (s.clicks.empty()) throw Error(ErrorCode::ZeroClickExport, "session '" + id + "' has no clicks to export");

    const fs::path dir = resolve_destination(context_->output_root, destination);
    const std::string stem = file_stem(s);
    const fs::path mask_path = dir / (stem + ".png");
    const fs::path sidecar_path = dir / (stem + ".json");

    LabelRecord record;
    record.image_id = s.image_id;
    record.image_path = context_->images.find(s.image_id).path.string();
    record.category = s.category;
    record.prompt = s.prompt;
    record.clicks = s.clicks;
    record.threshold = context_->threshold;
    record.click_radius = context_->click_radius;
    record.model_fingerprint = context_->model_fingerprint;
    record.mask_file = mask_path.filename().string();
    record.session_id = s.id;
    record.seed = context_->seed;

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error(ErrorCode::Io, "cannot create export directory " + dir.string());
    const auto png = io::encode_mask_png(s.current().binarize());
    {
        std::ofstream out(mask_path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
        if (!out) throw Error(ErrorCode::Io, "cannot write " + mask_path.string());
    }
    {
        std::ofstream out(sidecar_path);
        out << to_json(record).dump(2) << '\n';
        if (!out) throw Error(ErrorCode::Io, "cannot write " + sidecar_path.string());
    }
    s.status = Status::Exported;
    s.exported_path = mask_path;
    return mask_path;
}

void SessionManager::abandon(const std::string& id) {
    std::shared_ptr<Entry> entry;
    {
        std::lock_guard lock(mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw Error(ErrorCode::UnknownSession, "unknown or expired session '" + id + "'");
        entry = it->second;
        sessions_.erase(it);
    }
    std::lock_guard lock(entry->mutex);
    entry->state.status = Status::Abandoned;
}

std::size_t SessionManager::evict_idle(std::chrono::steady_clock::time_point now) {
    std::lock_guard lock(mutex_);
    std::size_t evicted = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
        std::unique_lock entry_lock(it->second->mutex, std::try_to_lock);
        if (entry_lock.owns_lock() && now - it->second->state.last_access > context_->idle_timeout) {
            it->second->state.status = Status::Abandoned;
            entry_lock.unlock();
            it = sessions_.erase(it);
            ++evicted;
        } else {
            ++it;
        }
    }
    return evicted;
}

std::size_t SessionManager::size() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

clicks::AnomalyMask replay(const ServiceContext& context, const LabelRecord& record) {
    if (!context.model) throw Error(ErrorCode::ModelNotLoaded, "no model loaded");
    if (!record.model_fingerprint.empty() && record.model_fingerprint != context.model_fingerprint) {
        throw Error(ErrorCode::CheckpointMismatch, "label was produced by model " + record.model_fingerprint +
                                                       ", loaded model is " + context.model_fingerprint);
    }
    ImageEntry image;
    try {
        image = context.images.find(record.image_id);
    } catch (const Error&) {
        if (record.image_path.empty()) throw;
        image = ImageEntry{record.image_id, record.category, record.image_path, std::nullopt, ""};
    }
    auto prompt = record.prompt;
    if (!prompt.key && prompt.text.empty()) prompt = resolve_prompt(context, image.category, "");
    auto inputs = prepare_inputs(context, image, prompt);
    clicks::AnomalyMask mask =
        clicks::AnomalyMask::zeros(static_cast<int>(inputs.image.size(1)), static_cast<int>(inputs.image.size(2)), record.threshold);
    std::vector<clicks::Click> history;
    for (const auto& c : record.clicks) {
        clicks::check_in_bounds(c, mask.rows(), mask.cols());
        history.push_back(c);
        mask = refine(context, inputs, history, mask, record.click_radius, record.threshold);
    }
    return mask;
}

}  // namespace adclick::session
