#include "adclick/posfar.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <random>

#include <torch/script.h>

#include "adclick/image_io.hpp"
#include "adclick/tensor_utils.hpp"

namespace adclick::posfar {

namespace F = torch::nn::functional;

namespace {

torch::Tensor seeded_normal(std::vector<std::int64_t> shape, double stddev, std::mt19937_64& rng) {
    auto t = torch::empty(shape, torch::kFloat32);
    float* p = t.data_ptr<float>();
    const auto n = t.numel();
    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (std::int64_t i = 0; i < n; i += 2) {
        // Box-Muller on raw 53-bit uniforms: identical on every standard library.
        const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1)) * stddev;
        p[i] = static_cast<float>(r * std::cos(two_pi * u2));
        if (i + 1 < n) p[i + 1] = static_cast<float>(r * std::sin(two_pi * u2));
    }
    return t;
}

int log2_exact(int v) {
    int n = 0;
    while ((1 << n) < v) ++n;
    return (1 << n) == v ? n : -1;
}

}  // namespace

RandomConvExtractor::RandomConvExtractor(const ExtractorConfig& config) : config_(config) {
    const int stages = log2_exact(config.stride);
    if (stages < 1) throw Error(ErrorCode::InvalidArgument, "extractor stride must be a power of two >= 2");
    if (config.input_size % (2 * config.stride) != 0) {
        throw Error(ErrorCode::InvalidArgument, "extractor input size must be divisible by 2 * stride");
    }
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    int in = 3;
    for (int i = 0; i <= stages; ++i) {
        const int out = config.width << std::min(i, 3);
        weights_.push_back(seeded_normal({out, in, 3, 3}, std::sqrt(2.0 / (in * 9)), rng));
        in = out;
    }
}

std::pair<torch::Tensor, torch::Tensor> RandomConvExtractor::backbone(const torch::Tensor& images) const {
    torch::NoGradGuard no_grad;
    torch::Tensor x = images;
    for (std::size_t i = 0; i + 1 < weights_.size(); ++i) {
        x = torch::relu(F::conv2d(x, weights_[i], F::Conv2dFuncOptions().stride(2).padding(1)));
    }
    torch::Tensor deep = torch::relu(F::conv2d(x, weights_.back(), F::Conv2dFuncOptions().stride(2).padding(1)));
    return {x, deep};
}

std::string RandomConvExtractor::fingerprint() const {
    return "conv-v1:size=" + std::to_string(config_.input_size) + ":stride=" + std::to_string(config_.stride) +
           ":dim=" + std::to_string(config_.dim) + ":width=" + std::to_string(config_.width) +
           ":seed=" + std::to_string(config_.seed);
}

struct ScriptedExtractor::Impl {
    mutable torch::jit::script::Module module;
};

ScriptedExtractor::ScriptedExtractor(const ExtractorConfig& config) : config_(config), impl_(std::make_unique<Impl>()) {
    const auto bytes = datasets::binary::read_file(config.path);
    file_hash_ = hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
    try {
        impl_->module = torch::jit::load(config.path);
    } catch (const c10::Error& e) {
        throw Error(ErrorCode::Io, "cannot load TorchScript extractor " + config.path + ": " + e.what_without_backtrace());
    }
    impl_->module.eval();
}

ScriptedExtractor::~ScriptedExtractor() = default;

std::pair<torch::Tensor, torch::Tensor> ScriptedExtractor::backbone(const torch::Tensor& images) const {
    torch::NoGradGuard no_grad;
    auto out = impl_->module.forward({images});
    if (out.isTuple()) {
        auto elems = out.toTuple()->elements();
        if (elems.size() != 2) throw Error(ErrorCode::ShapeMismatch, "scripted extractor must return two feature maps");
        return {elems[0].toTensor(), elems[1].toTensor()};
    }
    if (out.isList()) {
        auto list = out.toList();
        if (list.size() != 2) throw Error(ErrorCode::ShapeMismatch, "scripted extractor must return two feature maps");
        return {list.get(0).toTensor(), list.get(1).toTensor()};
    }
    throw Error(ErrorCode::ShapeMismatch, "scripted extractor must return (mid, deep)");
}

std::string ScriptedExtractor::fingerprint() const {
    return "torchscript:" + file_hash_ + ":size=" + std::to_string(config_.input_size) +
           ":stride=" + std::to_string(config_.stride) + ":dim=" + std::to_string(config_.dim);
}

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& config) {
    if (config.kind == "conv") return std::make_unique<RandomConvExtractor>(config);
    if (config.kind == "torchscript") return std::make_unique<ScriptedExtractor>(config);
    throw Error(ErrorCode::InvalidArgument, "unknown extractor kind '" + config.kind + "'");
}

torch::Tensor aggregate_pcf(const torch::Tensor& mid, const torch::Tensor& deep, int dim) {
    const auto h = mid.size(2);
    const auto w = mid.size(3);
    auto deep_up = F::interpolate(deep, F::InterpolateFuncOptions()
                                            .size(std::vector<std::int64_t>{h, w})
                                            .mode(torch::kBilinear)
                                            .align_corners(false));
    auto x = torch::cat({mid, deep_up}, 1);
    x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(1).padding(1).count_include_pad(false));
    const auto b = x.size(0);
    const auto c = x.size(1);
    x = x.permute({0, 2, 3, 1}).reshape({b * h * w, 1, c});
    x = F::adaptive_avg_pool1d(x, F::AdaptiveAvgPool1dFuncOptions(dim));
    return x.reshape({b, h, w, dim}).permute({0, 3, 1, 2}).contiguous();
}

torch::Tensor extract_pcf_batch(const torch::Tensor& images, const FeatureExtractor& extractor) {
    if (images.dim() != 4 || images.size(1) != 3) {
        throw Error(ErrorCode::ShapeMismatch, "extract_pcf expects [B, 3, H, W] images");
    }
    if (images.size(2) != extractor.input_size() || images.size(3) != extractor.input_size()) {
        throw Error(ErrorCode::ResolutionMismatch,
                    "image is " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                        ", extractor expects " + std::to_string(extractor.input_size()));
    }
    torch::NoGradGuard no_grad;
    auto [mid, deep] = extractor.backbone(images);
    auto pcf = aggregate_pcf(mid, deep, extractor.dim());
    require_finite(pcf, "extract_pcf");
    return pcf.permute({0, 2, 3, 1}).contiguous();
}

PcfGrid extract_pcf(const torch::Tensor& image, const FeatureExtractor& extractor) {
    if (image.dim() != 3) throw Error(ErrorCode::ShapeMismatch, "extract_pcf expects a [3, H, W] image");
    PcfGrid grid;
    grid.vectors = extract_pcf_batch(image.unsqueeze(0), extractor)[0].contiguous();
    grid.source_h = static_cast<int>(image.size(1));
    grid.source_w = static_cast<int>(image.size(2));
    return grid;
}

MatchResult match_reference(const PcfGrid& pcf, const datasets::ReferenceBank& bank, int window_radius) {
    if (window_radius < 0) throw Error(ErrorCode::InvalidArgument, "window_radius must be >= 0");
    if (pcf.dim() != bank.dim) {
        throw Error(ErrorCode::ShapeMismatch, "bank dimension " + std::to_string(bank.dim) + " != PCF dimension " +
                                                  std::to_string(pcf.dim()));
    }
    if (pcf.grid_h() != bank.grid_h || pcf.grid_w() != bank.grid_w) {
        throw Error(ErrorCode::ShapeMismatch, "bank grid does not match the PCF grid");
    }
    const int h = pcf.grid_h();
    const int w = pcf.grid_w();
    const std::size_t d = static_cast<std::size_t>(pcf.dim());

    std::vector<std::vector<std::size_t>> buckets(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < bank.size(); ++i) {
        buckets[bank.positions[i].row * static_cast<std::size_t>(w) + bank.positions[i].col].push_back(i);
    }

    auto query = pcf.vectors.to(torch::kFloat32).contiguous();
    const float* q = query.data_ptr<float>();
    MatchResult result;
    result.matched = torch::empty({h, w, static_cast<std::int64_t>(d)}, torch::kFloat32);
    float* out = result.matched.data_ptr<float>();
    result.indices.resize(static_cast<std::size_t>(h) * w);

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t cell = static_cast<std::size_t>(r) * w + c;
            const float* qv = q + cell * d;
            double best = std::numeric_limits<double>::infinity();
            std::int64_t best_idx = -1;
            for (int rr = std::max(0, r - window_radius); rr <= std::min(h - 1, r + window_radius); ++rr) {
                for (int cc = std::max(0, c - window_radius); cc <= std::min(w - 1, c + window_radius); ++cc) {
                    for (std::size_t idx : buckets[static_cast<std::size_t>(rr) * w + cc]) {
                        const float* bv = bank.features.data() + idx * d;
                        double dist = 0.0;
                        for (std::size_t k = 0; k < d; ++k) {
                            const double diff = static_cast<double>(qv[k]) - bv[k];
                            dist += diff * diff;
                        }
                        const auto sidx = static_cast<std::int64_t>(idx);
                        if (dist < best || (dist == best && sidx < best_idx)) {
                            best = dist;
                            best_idx = sidx;
                        }
                    }
                }
            }
            if (best_idx < 0) {
                throw Error(ErrorCode::NoCandidates, "no reference vector within the window of cell (" +
                                                         std::to_string(r) + ", " + std::to_string(c) + ")");
            }
            result.indices[cell] = best_idx;
            std::memcpy(out + cell * d, bank.features.data() + static_cast<std::size_t>(best_idx) * d, d * sizeof(float));
        }
    }
    return result;
}

PosFarTensor compute_posfar(const torch::Tensor& pcf, const torch::Tensor& matched, double theta) {
    if (!(theta > 0.0)) throw Error(ErrorCode::InvalidArgument, "theta must be positive");
    if (pcf.sizes() != matched.sizes()) throw Error(ErrorCode::ShapeMismatch, "PCF and matched reference shapes differ");
    require_finite(pcf, "compute_posfar");
    require_finite(matched, "compute_posfar");
    PosFarTensor out;
    out.theta = theta;
    out.residuals = (pcf - matched).abs().pow(theta).contiguous();
    return out;
}

PosFarTensor compute_posfar(const PcfGrid& pcf, const MatchResult& match, double theta) {
    auto out = compute_posfar(pcf.vectors, match.matched, theta);
    out.matched_indices = match.indices;
    return out;
}

PosFarTensor posfar_for_image(const torch::Tensor& image, const FeatureExtractor& extractor,
                              const datasets::ReferenceBank& bank, int window_radius, double theta) {
    const auto pcf = extract_pcf(image, extractor);
    if (bank.extractor_fingerprint != extractor.fingerprint()) {
        throw Error(ErrorCode::Schema, "reference bank was built by a different extractor (" +
                                           bank.extractor_fingerprint + " vs " + extractor.fingerprint() + ")");
    }
    return compute_posfar(pcf, match_reference(pcf, bank, window_radius), theta);
}

namespace {
constexpr char kPosfarMagic[8] = {'A', 'D', 'C', 'P', 'F', 'A', 'R', '\0'};
}

void save_posfar(const PosFarTensor& posfar, const std::filesystem::path& path) {
    datasets::binary::Writer w;
    const auto h = posfar.grid_h();
    const auto wd = posfar.grid_w();
    const auto n = static_cast<std::uint64_t>(h) * wd;
    w.raw(kPosfarMagic, sizeof kPosfarMagic);
    w.u32(datasets::kBankFormatVersion);
    w.u32(static_cast<std::uint32_t>(posfar.dim()));
    w.u32(static_cast<std::uint32_t>(h));
    w.u32(static_cast<std::uint32_t>(wd));
    w.u64(n);
    w.str("");
    w.str("");
    w.f64(posfar.theta);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < wd; ++c) {
            w.u32(static_cast<std::uint32_t>(r));
            w.u32(static_cast<std::uint32_t>(c));
        }
    }
    auto v = posfar.residuals.to(torch::kFloat32).contiguous();
    w.raw(v.data_ptr<float>(), static_cast<std::size_t>(v.numel()) * sizeof(float));
    for (std::uint64_t i = 0; i < n; ++i) w.i64(i < posfar.matched_indices.size() ? posfar.matched_indices[i] : -1);
    datasets::binary::write_file(path, w.bytes());
}

PosFarTensor load_posfar(const std::filesystem::path& path) {
    const auto bytes = datasets::binary::read_file(path);
    datasets::binary::Reader r(bytes);
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kPosfarMagic, sizeof magic) != 0) throw Error(ErrorCode::Schema, "not a PosFAR dump");
    if (r.u32() != datasets::kBankFormatVersion) throw Error(ErrorCode::Schema, "unsupported PosFAR dump version");
    const auto d = static_cast<std::int64_t>(r.u32());
    const auto h = static_cast<std::int64_t>(r.u32());
    const auto w = static_cast<std::int64_t>(r.u32());
    const auto n = r.u64();
    r.str();
    r.str();
    PosFarTensor out;
    out.theta = r.f64();
    for (std::uint64_t i = 0; i < n; ++i) {
        r.u32();
        r.u32();
    }
    out.residuals = torch::empty({h, w, d}, torch::kFloat32);
    r.raw(out.residuals.data_ptr<float>(), static_cast<std::size_t>(out.residuals.numel()) * sizeof(float));
    out.matched_indices.resize(n);
    for (auto& idx : out.matched_indices) idx = r.i64();
    return out;
}

}  // namespace adclick::posfar

namespace adclick::datasets {

ReferenceBank build_reference_bank(const DatasetIndex& index, const posfar::FeatureExtractor& extractor,
                                   double coreset_fraction, std::uint64_t seed) {
    if (index.split != Split::Train) throw Error(ErrorCode::InvalidArgument, "reference banks are built from the train split");
    for (const auto& s : index.samples) {
        if (s.defective()) {
            throw Error(ErrorCode::InvalidArgument, "reference bank input contains defective sample " + s.image_path.string());
        }
    }
    if (index.samples.empty()) throw Error(ErrorCode::InvalidArgument, "no training images for the reference bank");

    ReferenceBank bank;
    bank.category = index.category;
    bank.dim = extractor.dim();
    bank.grid_h = extractor.grid_size();
    bank.grid_w = extractor.grid_size();
    bank.extractor_fingerprint = extractor.fingerprint();

    for (const auto& s : index.samples) {
        const auto image = image_to_tensor(io::load_rgb(s.image_path, extractor.input_size()));
        const auto pcf = posfar::extract_pcf(image, extractor);
        const float* p = pcf.vectors.data_ptr<float>();
        bank.features.insert(bank.features.end(), p, p + pcf.vectors.numel());
        for (int r = 0; r < pcf.grid_h(); ++r) {
            for (int c = 0; c < pcf.grid_w(); ++c) {
                bank.positions.push_back(GridPos{static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c)});
            }
        }
    }

    const std::size_t keep = coreset_size(bank.size(), coreset_fraction);
    if (keep < bank.size()) {
        const auto selected = greedy_coreset(bank.features, static_cast<std::size_t>(bank.dim), keep, seed);
        ReferenceBank sub = bank;
        sub.positions.clear();
        sub.features.clear();
        for (std::size_t i : selected) {
            sub.positions.push_back(bank.positions[i]);
            const auto v = bank.vector(i);
            sub.features.insert(sub.features.end(), v.begin(), v.end());
        }
        bank = std::move(sub);
    }
    bank.validate();
    return bank;
}

}  // namespace adclick::datasets
