#include "adclick/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

extern char** environ;

namespace fs = std::filesystem;

namespace adclick::posfar {

void to_json(nlohmann::json& j, const ExtractorConfig& c) {
    j = nlohmann::json{{"kind", c.kind},   {"input_size", c.input_size}, {"stride", c.stride}, {"dim", c.dim},
                       {"width", c.width}, {"seed", c.seed},             {"path", c.path}};
}

void from_json(const nlohmann::json& j, ExtractorConfig& c) {
    c.kind = j.value("kind", c.kind);
    c.input_size = j.value("input_size", c.input_size);
    c.stride = j.value("stride", c.stride);
    c.dim = j.value("dim", c.dim);
    c.width = j.value("width", c.width);
    c.seed = j.value("seed", c.seed);
    c.path = j.value("path", c.path);
}

}  // namespace adclick::posfar

namespace adclick::language {

void to_json(nlohmann::json& j, const TextEncoderConfig& c) {
    j = nlohmann::json{{"kind", c.kind}, {"dim", c.dim}, {"max_tokens", c.max_tokens}, {"seed", c.seed}, {"path", c.path}};
}

void from_json(const nlohmann::json& j, TextEncoderConfig& c) {
    c.kind = j.value("kind", c.kind);
    c.dim = j.value("dim", c.dim);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.seed = j.value("seed", c.seed);
    c.path = j.value("path", c.path);
}

}  // namespace adclick::language

namespace adclick::config {

fs::path AppConfig::bank_path() const { return bank_dir.empty() ? output_path() / "banks" : fs::path(bank_dir); }

fs::path AppConfig::checkpoint_path() const {
    return checkpoint.empty() ? output_path() / "checkpoints" / "adclick.pt" : fs::path(checkpoint);
}

fs::path AppConfig::seg_checkpoint_path() const {
    return seg_checkpoint.empty() ? output_path() / "checkpoints" / "adclick_seg.pt" : fs::path(seg_checkpoint);
}

namespace {

nlohmann::json model_keys() {
    nlohmann::json j = network::ModelConfig{};
    j["preset"] = "full";
    return j;
}

bool is_model_path(const std::string& path) { return path == "model" || path == "seg.model"; }

void validate_keys(const nlohmann::json& tree, const nlohmann::json& reference, const std::string& path) {
    if (!tree.is_object()) return;
    for (const auto& [key, value] : tree.items()) {
        const std::string child = path.empty() ? key : path + "." + key;
        if (!reference.contains(key)) throw Error(ErrorCode::Schema, "unknown config key '" + child + "'");
        const auto& ref = reference.at(key);
        if (ref.is_object() && !value.is_object()) {
            throw Error(ErrorCode::Schema, "config key '" + child + "' must be an object");
        }
        validate_keys(value, is_model_path(child) ? model_keys() : ref, child);
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

}  // namespace

nlohmann::json default_tree() {
    AppConfig d;
    nlohmann::json j;
    j["train_data"] = d.train_data;
    j["eval_data"] = d.eval_data;
    j["prompts"] = d.prompts;
    j["text_encoder"] = d.text_encoder;
    j["extractor"] = d.extractor;
    j["posfar"] = d.posfar;
    j["bank_dir"] = d.bank_dir;
    j["model"] = {{"preset", "full"}, {"mode", "interactive"}};
    nlohmann::json train = d.train;
    train.erase("click_radius");
    train.erase("threshold");
    train.erase("seed");
    j["train"] = train;
    j["seg"] = {{"model", {{"preset", "full"}, {"mode", "seg"}}},
                {"train", train},
                {"supervision", d.seg.supervision},
                {"labels_dir", d.seg.labels_dir},
                {"synthetic", {{"count", d.seg.synthetic.count}, {"good_fraction", d.seg.synthetic.good_fraction}}}};
    j["clicks"] = {{"radius", d.clicks.radius}, {"threshold", d.clicks.threshold}};
    nlohmann::json iis = d.iis;
    iis.erase("click_radius");
    iis.erase("threshold");
    j["iis"] = iis;
    j["ad"] = d.ad;
    j["server"] = {{"host", d.server.host}, {"port", d.server.port}, {"idle_timeout_s", d.server.idle_timeout_s}};
    j["output_dir"] = d.output_dir;
    j["seed"] = d.seed;
    j["device"] = d.device;
    j["checkpoint"] = d.checkpoint;
    j["seg_checkpoint"] = d.seg_checkpoint;
    return j;
}

nlohmann::json read_tree(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Schema, "config " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorCode::Schema, "config " + path.string() + ": top level must be an object");
    validate_keys(j, default_tree(), "");
    return j;
}

void merge_tree(nlohmann::json& base, const nlohmann::json& patch) {
    for (const auto& [key, value] : patch.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object()) {
            merge_tree(base[key], value);
        } else {
            base[key] = value;
        }
    }
}

void apply_override(nlohmann::json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(ErrorCode::InvalidArgument, "override '" + assignment + "' is not key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;
    }

    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        parts.push_back(key.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    nlohmann::json patch = value;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
    try {
        validate_keys(patch, default_tree(), "");
    } catch (const Error& e) {
        throw Error(ErrorCode::InvalidArgument, std::string(e.what()));
    }
    merge_tree(tree, patch);
}

std::vector<std::string> process_environment() {
    std::vector<std::string> out;
    for (char** e = environ; e && *e; ++e) out.emplace_back(*e);
    return out;
}

void apply_environment(nlohmann::json& tree, const std::vector<std::string>& environment) {
    const std::string prefix = kEnvPrefix;
    const auto defaults = default_tree();
    for (const auto& entry : environment) {
        if (entry.rfind(prefix, 0) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string name = entry.substr(prefix.size(), eq - prefix.size());
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
        std::string key;
        for (std::size_t i = 0; i < name.size(); ++i) {
            if (name[i] == '_' && i + 1 < name.size() && name[i + 1] == '_') {
                key += '.';
                ++i;
            } else {
                key += name[i];
            }
        }
        try {
            apply_override(tree, key + "=" + entry.substr(eq + 1));
        } catch (const Error&) {
            // Variables that name no config key are left to other consumers.
        }
    }
}

AppConfig materialize(const nlohmann::json& input, const fs::path& base_dir) {
    nlohmann::json tree = default_tree();
    merge_tree(tree, input);
    AppConfig c;
    try {
        c.output_dir = tree.at("output_dir").get<std::string>();
        c.seed = tree.at("seed").get<std::uint64_t>();
        c.device = tree.at("device").get<std::string>();
        c.checkpoint = tree.at("checkpoint").get<std::string>();
        c.seg_checkpoint = tree.at("seg_checkpoint").get<std::string>();
        c.bank_dir = tree.at("bank_dir").get<std::string>();
        c.train_data = tree.at("train_data").get<pipeline::DataSource>();
        c.eval_data = tree.at("eval_data").get<pipeline::DataSource>();
        c.prompts = tree.at("prompts").get<std::string>();
        c.text_encoder = tree.at("text_encoder").get<language::TextEncoderConfig>();
        c.extractor = tree.at("extractor").get<posfar::ExtractorConfig>();
        c.posfar = tree.at("posfar").get<pipeline::PosFarSettings>();
        c.model = tree.at("model").get<network::ModelConfig>();
        c.train = tree.at("train").get<training::TrainOptions>();
        const auto& seg = tree.at("seg");
        c.seg.model = seg.at("model").get<network::ModelConfig>();
        c.seg.train = seg.at("train").get<training::TrainOptions>();
        c.seg.supervision = seg.at("supervision").get<std::string>();
        c.seg.labels_dir = seg.at("labels_dir").get<std::string>();
        c.seg.synthetic = seg.at("synthetic").get<segmode::SyntheticOptions>();
        c.clicks.radius = tree.at("clicks").at("radius").get<int>();
        c.clicks.threshold = tree.at("clicks").at("threshold").get<float>();
        c.iis = tree.at("iis").get<evaluation::IisOptions>();
        c.ad = tree.at("ad").get<evaluation::AdOptions>();
        const auto& server = tree.at("server");
        c.server.host = server.at("host").get<std::string>();
        c.server.port = server.at("port").get<int>();
        c.server.idle_timeout_s = server.at("idle_timeout_s").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Schema, std::string("config: ") + e.what());
    }

    if (c.seg.model.mode != network::Mode::Seg) throw Error(ErrorCode::Schema, "config: seg.model.mode must be 'seg'");
    if (c.model.mode != network::Mode::Interactive) {
        throw Error(ErrorCode::Schema, "config: model.mode must be 'interactive'");
    }
    if (c.seg.supervision != "synthetic" && c.seg.supervision != "labels") {
        throw Error(ErrorCode::Schema, "config: seg.supervision must be 'synthetic' or 'labels'");
    }
    if (c.clicks.radius < 0 || !(c.clicks.threshold > 0.0f && c.clicks.threshold < 1.0f)) {
        throw Error(ErrorCode::Schema, "config: clicks.radius must be >= 0 and clicks.threshold in (0, 1)");
    }

    c.train_data.root = resolve(base_dir, c.train_data.root).string();
    c.eval_data.root = resolve(base_dir, c.eval_data.root).string();
    c.prompts = resolve(base_dir, c.prompts).string();
    c.text_encoder.path = resolve(base_dir, c.text_encoder.path).string();
    c.extractor.path = resolve(base_dir, c.extractor.path).string();
    c.seg.labels_dir = resolve(base_dir, c.seg.labels_dir).string();

    for (auto* t : {&c.train, &c.seg.train}) {
        t->click_radius = c.clicks.radius;
        t->threshold = c.clicks.threshold;
        t->seed = c.seed;
    }
    c.seg.synthetic.seed = c.seed;
    c.iis.click_radius = c.clicks.radius;
    c.iis.threshold = c.clicks.threshold;
    if (c.train.log_path.empty()) c.train.log_path = (c.output_path() / "train_log.jsonl").string();
    if (c.seg.train.log_path.empty()) c.seg.train.log_path = (c.output_path() / "train_seg_log.jsonl").string();
    if (c.train.checkpoint_path.empty()) c.train.checkpoint_path = c.checkpoint_path().string();
    if (c.seg.train.checkpoint_path.empty()) c.seg.train.checkpoint_path = c.seg_checkpoint_path().string();
    return c;
}

}  // namespace adclick::config
