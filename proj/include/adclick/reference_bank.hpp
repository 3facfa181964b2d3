#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "adclick/datasets.hpp"

namespace adclick::posfar {
class FeatureExtractor;
}

namespace adclick::datasets {

struct GridPos {
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    bool operator==(const GridPos&) const = default;
};

/// Defect-free PCF vectors of one category, each tagged with the feature-grid
/// cell it came from.
struct ReferenceBank {
    std::string category;
    int dim = 0;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<GridPos> positions;
    std::vector<float> features;  // size() x dim, row-major
    std::string extractor_fingerprint;

    std::size_t size() const noexcept { return positions.size(); }
    std::span<const float> vector(std::size_t i) const {
        return std::span<const float>(features).subspan(i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
    }
    /// Throws Schema when the invariants (N > 0, consistent dims, positions
    /// in-grid) do not hold.
    void validate() const;

    bool operator==(const ReferenceBank&) const = default;
};

/// Greedy farthest-point selection of `count` rows. The first row is drawn
/// from a seeded mt19937_64; later picks maximize the Euclidean distance to
/// the selected set, ties to the lowest index. Returned indices are sorted.
std::vector<std::size_t> greedy_coreset(std::span<const float> features, std::size_t dim, std::size_t count,
                                        std::uint64_t seed);

/// Number of rows kept for a coreset fraction in (0, 1]: ceil(fraction * n).
std::size_t coreset_size(std::size_t n, double fraction);

/// Extracts PCF vectors from every (defect-free) training image and keeps
/// all of them or a greedy coreset.
ReferenceBank build_reference_bank(const DatasetIndex& index, const posfar::FeatureExtractor& extractor,
                                   double coreset_fraction = 1.0, std::uint64_t seed = 0);

// Binary layout, little-endian:
//   magic "ADCBANK\0" | u32 version | u32 d_f | u32 h_f | u32 w_f | u64 N |
//   u32 len + extractor fingerprint | u32 len + category |
//   N x (u32 row, u32 col) | N x d_f f32
inline constexpr std::uint32_t kBankFormatVersion = 1;

std::vector<unsigned char> serialize_bank(const ReferenceBank& bank);
ReferenceBank deserialize_bank(std::span<const unsigned char> bytes);
void save_bank(const ReferenceBank& bank, const std::filesystem::path& path);
ReferenceBank load_bank(const std::filesystem::path& path);

namespace binary {

class Writer {
public:
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f32(float v);
    void f64(double v);
    void str(const std::string& s);
    void raw(const void* data, std::size_t n);
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class Reader {
public:
    explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}
    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    float f32();
    double f64();
    std::string str();
    void raw(void* out, std::size_t n);
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    std::span<const unsigned char> bytes_;
    std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);

}  // namespace binary

}  // namespace adclick::datasets
