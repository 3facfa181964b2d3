#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "adclick/common.hpp"

namespace adclick::io {

/// Reads an image as 8-bit RGB, resized to size x size (bilinear) when size > 0.
cv::Mat load_rgb(const std::filesystem::path& path, int size = 0);

/// Reads a mask, resized with nearest-neighbour when size > 0; nonzero = anomalous.
BinaryMask load_mask(const std::filesystem::path& path, int size = 0);

/// Single-channel 8-bit PNG, 0 = normal, 255 = anomalous.
void save_mask_png(const std::filesystem::path& path, const BinaryMask& mask);
std::vector<unsigned char> encode_mask_png(const BinaryMask& mask);
BinaryMask decode_mask_png(const std::vector<unsigned char>& bytes);

/// Semi-transparent RGBA overlay of the mask.
std::vector<unsigned char> encode_overlay_png(const BinaryMask& mask);

/// Score map in [0,1] as 16-bit PNG.
void save_score_png16(const std::filesystem::path& path, const ScoreMap& scores);
ScoreMap load_score_png16(const std::filesystem::path& path);

void save_rgb(const std::filesystem::path& path, const cv::Mat& rgb);

std::string base64_encode(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> base64_decode(const std::string& text);

}  // namespace adclick::io
