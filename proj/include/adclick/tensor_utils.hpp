#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include "adclick/common.hpp"

namespace adclick {

/// 8-bit RGB image -> float [3, H, W] normalized with ImageNet statistics.
torch::Tensor image_to_tensor(const cv::Mat& rgb);

template <typename T>
torch::Tensor map_to_tensor(const Map2D<T>& map) {
    auto t = torch::empty({map.rows(), map.cols()}, torch::kFloat32);
    float* out = t.template data_ptr<float>();
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = static_cast<float>(map.values()[i]);
    return t;
}

/// [H, W] tensor -> ScoreMap (copied to CPU float).
ScoreMap tensor_to_scores(const torch::Tensor& t);

/// Throws NonFinite when `t` holds NaN or Inf.
void require_finite(const torch::Tensor& t, const char* what);

}  // namespace adclick
