#include "adclick/image_io.hpp"

#include <algorithm>
#include <array>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace adclick::io {

namespace {

void ensure_parent(const std::filesystem::path& path) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
}

void write_or_throw(const std::filesystem::path& path, const cv::Mat& mat) {
    ensure_parent(path);
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), mat);
    } catch (const cv::Exception& e) {
        throw Error(ErrorCode::Io, "cannot write " + path.string() + ": " + e.what());
    }
    if (!ok) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

}  // namespace

cv::Mat load_rgb(const std::filesystem::path& path, int size) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error(ErrorCode::Io, "cannot read image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    if (size > 0 && (rgb.rows != size || rgb.cols != size)) {
        cv::resize(rgb, rgb, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
    }
    return rgb;
}

BinaryMask load_mask(const std::filesystem::path& path, int size) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw Error(ErrorCode::Io, "cannot read mask " + path.string());
    if (size > 0 && (m.rows != size || m.cols != size)) {
        cv::resize(m, m, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
    }
    BinaryMask out(m.rows, m.cols, 0);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) out(r, c) = m.at<std::uint8_t>(r, c) > 0 ? 1 : 0;
    }
    return out;
}

namespace {

cv::Mat mask_to_mat(const BinaryMask& mask) {
    cv::Mat m(mask.rows(), mask.cols(), CV_8U);
    for (int r = 0; r < mask.rows(); ++r) {
        for (int c = 0; c < mask.cols(); ++c) m.at<std::uint8_t>(r, c) = mask(r, c) ? 255 : 0;
    }
    return m;
}

}  // namespace

void save_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
    write_or_throw(path, mask_to_mat(mask));
}

std::vector<unsigned char> encode_mask_png(const BinaryMask& mask) {
    std::vector<unsigned char> out;
    cv::imencode(".png", mask_to_mat(mask), out);
    return out;
}

BinaryMask decode_mask_png(const std::vector<unsigned char>& bytes) {
    cv::Mat m = cv::imdecode(bytes, cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw Error(ErrorCode::Io, "cannot decode mask PNG");
    BinaryMask out(m.rows, m.cols, 0);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) out(r, c) = m.at<std::uint8_t>(r, c) > 0 ? 1 : 0;
    }
    return out;
}

std::vector<unsigned char> encode_overlay_png(const BinaryMask& mask) {
    // BGRA for OpenCV; red at half opacity.
    cv::Mat m(mask.rows(), mask.cols(), CV_8UC4, cv::Scalar(0, 0, 0, 0));
    for (int r = 0; r < mask.rows(); ++r) {
        for (int c = 0; c < mask.cols(); ++c) {
            if (mask(r, c)) m.at<cv::Vec4b>(r, c) = cv::Vec4b(0, 0, 255, 128);
        }
    }
    std::vector<unsigned char> out;
    cv::imencode(".png", m, out);
    return out;
}

void save_score_png16(const std::filesystem::path& path, const ScoreMap& scores) {
    cv::Mat m(scores.rows(), scores.cols(), CV_16U);
    for (int r = 0; r < scores.rows(); ++r) {
        for (int c = 0; c < scores.cols(); ++c) {
            const float v = std::clamp(scores(r, c), 0.0f, 1.0f);
            m.at<std::uint16_t>(r, c) = static_cast<std::uint16_t>(std::lround(v * 65535.0f));
        }
    }
    write_or_throw(path, m);
}

ScoreMap load_score_png16(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH);
    if (m.empty() || m.depth() != CV_16U) throw Error(ErrorCode::Io, "cannot read 16-bit map " + path.string());
    ScoreMap out(m.rows, m.cols, 0.0f);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) out(r, c) = m.at<std::uint16_t>(r, c) / 65535.0f;
    }
    return out;
}

void save_rgb(const std::filesystem::path& path, const cv::Mat& rgb) {
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    write_or_throw(path, bgr);
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<unsigned char>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    if (i < bytes.size()) {
        unsigned v = bytes[i] << 16;
        if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
    std::array<int, 256> lut;
    lut.fill(-1);
    for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kAlphabet[i])] = i;
    std::vector<unsigned char> out;
    unsigned buf = 0;
    int bits = 0;
    for (char ch : text) {
        const int v = lut[static_cast<unsigned char>(ch)];
        if (v < 0) continue;
        buf = (buf << 6) | static_cast<unsigned>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buf >> bits) & 0xff));
        }
    }
    return out;
}

}  // namespace adclick::io
