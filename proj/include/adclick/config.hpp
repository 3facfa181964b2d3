#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/evaluation.hpp"
#include "adclick/language.hpp"
#include "adclick/network.hpp"
#include "adclick/pipeline.hpp"
#include "adclick/posfar.hpp"
#include "adclick/segmode.hpp"
#include "adclick/trainer.hpp"

namespace adclick::posfar {
void to_json(nlohmann::json& j, const ExtractorConfig& c);
void from_json(const nlohmann::json& j, ExtractorConfig& c);
}  // namespace adclick::posfar

namespace adclick::language {
void to_json(nlohmann::json& j, const TextEncoderConfig& c);
void from_json(const nlohmann::json& j, TextEncoderConfig& c);
}  // namespace adclick::language

namespace adclick::config {

struct ClickSettings {
    int radius = 5;
    float threshold = 0.5f;
};

struct ServerSettings {
    std::string host = "127.0.0.1";
    int port = 8080;
    int idle_timeout_s = 1800;
};

struct SegSettings {
    network::ModelConfig model = network::ModelConfig::full(network::Mode::Seg);
    training::TrainOptions train;
    std::string supervision = "synthetic";  // synthetic | labels
    std::string labels_dir;
    segmode::SyntheticOptions synthetic;
};

struct AppConfig {
    pipeline::DataSource train_data;
    pipeline::DataSource eval_data;
    std::string prompts;
    language::TextEncoderConfig text_encoder;
    posfar::ExtractorConfig extractor;
    pipeline::PosFarSettings posfar;
    std::string bank_dir;  // default <output_dir>/banks
    network::ModelConfig model;
    training::TrainOptions train;
    SegSettings seg;
    ClickSettings clicks;
    evaluation::IisOptions iis;
    evaluation::AdOptions ad;
    ServerSettings server;
    std::string output_dir = "runs";
    std::uint64_t seed = 0;
    std::string device = "cpu";
    std::string checkpoint;      // interactive model
    std::string seg_checkpoint;  // automatic model

    std::filesystem::path output_path() const { return output_dir; }
    std::filesystem::path bank_path() const;
    std::filesystem::path checkpoint_path() const;
    std::filesystem::path seg_checkpoint_path() const;
};

/// Full default tree; every recognised key appears here.
nlohmann::json default_tree();

/// Reads a JSON config file. Throws Io / Schema.
nlohmann::json read_tree(const std::filesystem::path& path);

/// Recursive merge of `patch` into `base` (objects merge, other values replace).
void merge_tree(nlohmann::json& base, const nlohmann::json& patch);

/// "a.b.c=value": value is parsed as JSON when possible, else taken as a
/// string. Unknown keys are rejected with InvalidArgument.
void apply_override(nlohmann::json& tree, const std::string& assignment);

inline constexpr const char* kEnvPrefix = "ADCLICK_";

/// ADCLICK_SEED=3 sets "seed", ADCLICK_TRAIN__STEPS=10 sets "train.steps"
/// (double underscore nests, names are lower-cased).
void apply_environment(nlohmann::json& tree, const std::vector<std::string>& environment);
std::vector<std::string> process_environment();

/// Converts a merged tree into typed settings. Relative data paths resolve
/// against `base_dir` (the config file's directory).
AppConfig materialize(const nlohmann::json& tree, const std::filesystem::path& base_dir);

}  // namespace adclick::config
