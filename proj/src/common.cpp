#include "adclick/common.hpp"

#include <cstdio>

namespace adclick {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "invalid_argument";
        case ErrorCode::ShapeMismatch: return "shape_mismatch";
        case ErrorCode::OutOfBounds: return "out_of_bounds";
        case ErrorCode::NonFinite: return "non_finite";
        case ErrorCode::Io: return "io";
        case ErrorCode::Schema: return "schema";
        case ErrorCode::LayoutMismatch: return "layout_mismatch";
        case ErrorCode::MissingMask: return "missing_mask";
        case ErrorCode::EmptyPhraseList: return "empty_phrase_list";
        case ErrorCode::ResolutionMismatch: return "resolution_mismatch";
        case ErrorCode::NoCandidates: return "no_candidates";
        case ErrorCode::EncoderUnavailable: return "encoder_unavailable";
        case ErrorCode::SingleClass: return "single_class";
        case ErrorCode::NoPositives: return "no_positives";
        case ErrorCode::NoRegion: return "no_region";
        case ErrorCode::EmptyTraces: return "empty_traces";
        case ErrorCode::Divergence: return "divergence";
        case ErrorCode::CheckpointMismatch: return "checkpoint_mismatch";
        case ErrorCode::UnknownSession: return "unknown_session";
        case ErrorCode::UnknownImage: return "unknown_image";
        case ErrorCode::UnknownPrompt: return "unknown_prompt";
        case ErrorCode::ImmutableSession: return "immutable_session";
        case ErrorCode::UninitializedSession: return "uninitialized_session";
        case ErrorCode::ZeroClickExport: return "zero_click_export";
        case ErrorCode::ModelNotLoaded: return "model_not_loaded";
        case ErrorCode::ClicksPresent: return "clicks_present";
    }
    return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(message), code_(code) {}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace adclick
