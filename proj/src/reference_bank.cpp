#include "adclick/reference_bank.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

namespace adclick::datasets {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace binary {

void Writer::u32(std::uint32_t v) { raw(&v, sizeof v); }
void Writer::u64(std::uint64_t v) { raw(&v, sizeof v); }
void Writer::f32(float v) { raw(&v, sizeof v); }
void Writer::f64(double v) { raw(&v, sizeof v); }
void Writer::str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
}
void Writer::raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
}

void Reader::raw(void* out, std::size_t n) {
    if (n > bytes_.size() - pos_) throw Error(ErrorCode::Schema, "binary file truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
}
std::uint32_t Reader::u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
}
std::uint64_t Reader::u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
}
float Reader::f32() {
    float v;
    raw(&v, sizeof v);
    return v;
}
double Reader::f64() {
    double v;
    raw(&v, sizeof v);
    return v;
}
std::string Reader::str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

}  // namespace binary

void ReferenceBank::validate() const {
    if (positions.empty()) throw Error(ErrorCode::Schema, "reference bank is empty");
    if (dim <= 0 || grid_h <= 0 || grid_w <= 0) throw Error(ErrorCode::Schema, "reference bank has invalid dimensions");
    if (features.size() != positions.size() * static_cast<std::size_t>(dim)) {
        throw Error(ErrorCode::Schema, "reference bank feature count does not match N x d_f");
    }
    for (const auto& p : positions) {
        if (p.row >= static_cast<std::uint32_t>(grid_h) || p.col >= static_cast<std::uint32_t>(grid_w)) {
            throw Error(ErrorCode::Schema, "reference bank position outside the feature grid");
        }
    }
}

std::size_t coreset_size(std::size_t n, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "coreset fraction must lie in (0, 1]");
    }
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)), 1, n);
}

std::vector<std::size_t> greedy_coreset(std::span<const float> features, std::size_t dim, std::size_t count,
                                        std::uint64_t seed) {
    const std::size_t n = dim == 0 ? 0 : features.size() / dim;
    if (n == 0 || count == 0) return {};
    count = std::min(count, n);

    auto dist = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            const double d = static_cast<double>(features[a * dim + k]) - features[b * dim + k];
            s += d * d;
        }
        return s;
    };

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> selected{static_cast<std::size_t>(rng() % n)};
    std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
    while (selected.size() < count) {
        const std::size_t last = selected.back();
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            min_dist[i] = std::min(min_dist[i], dist(i, last));
            if (min_dist[i] > best_d) {
                best_d = min_dist[i];
                best = i;
            }
        }
        selected.push_back(best);
    }
    std::sort(selected.begin(), selected.end());
    return selected;
}

namespace {
constexpr char kMagic[8] = {'A', 'D', 'C', 'B', 'A', 'N', 'K', '\0'};
}

std::vector<unsigned char> serialize_bank(const ReferenceBank& bank) {
    bank.validate();
    binary::Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(kBankFormatVersion);
    w.u32(static_cast<std::uint32_t>(bank.dim));
    w.u32(static_cast<std::uint32_t>(bank.grid_h));
    w.u32(static_cast<std::uint32_t>(bank.grid_w));
    w.u64(bank.size());
    w.str(bank.extractor_fingerprint);
    w.str(bank.category);
    for (const auto& p : bank.positions) {
        w.u32(p.row);
        w.u32(p.col);
    }
    w.raw(bank.features.data(), bank.features.size() * sizeof(float));
    return std::move(w.bytes());
}

ReferenceBank deserialize_bank(std::span<const unsigned char> bytes) {
    binary::Reader r(bytes);
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw Error(ErrorCode::Schema, "not a reference bank file");
    const std::uint32_t version = r.u32();
    if (version != kBankFormatVersion) {
        throw Error(ErrorCode::Schema, "unsupported reference bank version " + std::to_string(version));
    }
    ReferenceBank bank;
    bank.dim = static_cast<int>(r.u32());
    bank.grid_h = static_cast<int>(r.u32());
    bank.grid_w = static_cast<int>(r.u32());
    const std::uint64_t n = r.u64();
    bank.extractor_fingerprint = r.str();
    bank.category = r.str();
    bank.positions.resize(n);
    for (auto& p : bank.positions) {
        p.row = r.u32();
        p.col = r.u32();
    }
    bank.features.resize(n * static_cast<std::size_t>(bank.dim));
    r.raw(bank.features.data(), bank.features.size() * sizeof(float));
    if (!r.at_end()) throw Error(ErrorCode::Schema, "trailing bytes in reference bank file");
    bank.validate();
    return bank;
}

void save_bank(const ReferenceBank& bank, const std::filesystem::path& path) {
    binary::write_file(path, serialize_bank(bank));
}

ReferenceBank load_bank(const std::filesystem::path& path) { return deserialize_bank(binary::read_file(path)); }

}  // namespace adclick::datasets
