#include "adclick/tensor_utils.hpp"

namespace adclick {

torch::Tensor image_to_tensor(const cv::Mat& rgb) {
    if (rgb.type() != CV_8UC3) throw Error(ErrorCode::InvalidArgument, "image_to_tensor expects 8-bit RGB");
    cv::Mat contiguous = rgb.isContinuous() ? rgb : rgb.clone();
    auto t = torch::from_blob(contiguous.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(255.0);
    const auto mean = torch::tensor({0.485f, 0.456f, 0.406f}).view({3, 1, 1});
    const auto std = torch::tensor({0.229f, 0.224f, 0.225f}).view({3, 1, 1});
    return ((t - mean) / std).contiguous();
}

ScoreMap tensor_to_scores(const torch::Tensor& t) {
    if (t.dim() != 2) throw Error(ErrorCode::ShapeMismatch, "tensor_to_scores expects a 2D tensor");
    auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    const float* p = c.data_ptr<float>();
    return ScoreMap(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), std::vector<float>(p, p + c.numel()));
}

void require_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw Error(ErrorCode::NonFinite, std::string(what) + ": non-finite values");
    }
}

}  // namespace adclick
