#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace adclick {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    OutOfBounds,
    NonFinite,
    Io,
    Schema,
    LayoutMismatch,
    MissingMask,
    EmptyPhraseList,
    ResolutionMismatch,
    NoCandidates,
    EncoderUnavailable,
    SingleClass,
    NoPositives,
    NoRegion,
    EmptyTraces,
    Divergence,
    CheckpointMismatch,
    UnknownSession,
    UnknownImage,
    UnknownPrompt,
    ImmutableSession,
    UninitializedSession,
    ZeroClickExport,
    ModelNotLoaded,
    ClicksPresent,
};

std::string_view to_string(ErrorCode code);

/// Library-wide exception. `code()` is stable and machine-parsable; the CLI
/// prints it verbatim on failure.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message);
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Dense row-major 2D map. Used for masks, score maps and click channels so
/// the metric and click code stays independent of the tensor library.
template <typename T>
class Map2D {
public:
    Map2D() = default;
    Map2D(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) {
            throw Error(ErrorCode::InvalidArgument, "Map2D: negative dimensions");
        }
    }
    Map2D(int rows, int cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(rows) * cols) {
            throw Error(ErrorCode::ShapeMismatch, "Map2D: data size does not match rows*cols");
        }
    }

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    bool contains(int r, int c) const noexcept { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }
    bool same_shape(const Map2D<T>& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    template <typename U>
    bool same_shape(const Map2D<U>& o) const noexcept {
        return rows_ == o.rows() && cols_ == o.cols();
    }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    bool operator==(const Map2D& o) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

using ScoreMap = Map2D<float>;
using BinaryMask = Map2D<std::uint8_t>;

template <typename A, typename B>
void require_same_shape(const Map2D<A>& a, const Map2D<B>& b, std::string_view what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(what) + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

/// 64-bit FNV-1a; used for fingerprints and seeding, never for security.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace adclick
