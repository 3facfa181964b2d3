#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "adclick/datasets.hpp"
#include "adclick/network.hpp"
#include "adclick/pipeline.hpp"
#include "adclick/session.hpp"

using namespace adclick;

namespace toy {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& prefix);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

struct Options {
    std::uint64_t seed = 1;
    int defects_per_type = 4;
    int train_good = 6;
};

/// Small synthetic MVTec-layout dataset plus every runtime object needed to
/// run the model on it: banks, prompt embeddings and the data source.
struct World {
    std::filesystem::path root;
    pipeline::DataSource source;
    datasets::ToyOptions toy;
    std::shared_ptr<pipeline::ResidualContext> residuals;
    std::shared_ptr<pipeline::PromptEmbeddings> text;
};

posfar::ExtractorConfig extractor_config();
language::TextEncoderConfig text_config();

World make_world(const std::filesystem::path& root, const Options& options = {});

std::vector<pipeline::LabeledSample> defect_samples(const World& world);
std::vector<pipeline::LabeledSample> test_samples(const World& world, const std::string& category);

network::AdClickModel tiny_model(network::Mode mode, std::uint64_t seed = 0);

/// Service context over the world's test images with `model` loaded.
std::shared_ptr<session::ServiceContext> service_context(const World& world, network::AdClickModel model,
                                                         const std::string& fingerprint,
                                                         const std::filesystem::path& output_root);

}  // namespace toy
