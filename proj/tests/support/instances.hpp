#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "adclick/common.hpp"

namespace instances {

// Scores are either continuous or quantized to a few levels so that ties are
// common; labels always contain both classes.
struct Scored {
    std::vector<float> scores;
    std::vector<std::uint8_t> labels;
};

inline Scored scored(std::mt19937_64& rng, std::size_t n) {
    Scored out;
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    const bool quantized = rng() % 2 == 0;
    const int levels = 2 + static_cast<int>(rng() % 40);
    const double rate = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    std::bernoulli_distribution pos(rate);
    for (std::size_t i = 0; i < n; ++i) {
        const bool y = pos(rng);
        float s = u(rng) + (y ? 0.3f : 0.0f);
        if (quantized) s = static_cast<float>(static_cast<int>(s * levels)) / static_cast<float>(levels);
        out.scores.push_back(s);
        out.labels.push_back(y ? 1 : 0);
    }
    out.labels[0] = 1;
    out.labels[n - 1] = 0;
    return out;
}

// Random rectangles and speckles as ground truth; scores correlated with it.
struct MapSet {
    std::vector<adclick::ScoreMap> maps;
    std::vector<adclick::BinaryMask> masks;
};

inline MapSet map_set(std::mt19937_64& rng, int count, int rows, int cols, int levels) {
    MapSet out;
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int m = 0; m < count; ++m) {
        adclick::BinaryMask gt(rows, cols, 0);
        const int blobs = 1 + static_cast<int>(rng() % 3);
        for (int b = 0; b < blobs; ++b) {
            const int h = 1 + static_cast<int>(rng() % std::max(1, rows / 3));
            const int w = 1 + static_cast<int>(rng() % std::max(1, cols / 3));
            const int r0 = static_cast<int>(rng() % (rows - h + 1));
            const int c0 = static_cast<int>(rng() % (cols - w + 1));
            for (int r = r0; r < r0 + h; ++r) {
                for (int c = c0; c < c0 + w; ++c) gt(r, c) = 1;
            }
        }
        gt(rows / 2, cols / 2) = 1;
        gt(0, 0) = 0;
        adclick::ScoreMap s(rows, cols);
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                float v = 0.6f * u(rng) + (gt(r, c) ? 0.4f : 0.0f);
                if (levels > 0) v = static_cast<float>(static_cast<int>(v * levels)) / static_cast<float>(levels);
                s(r, c) = v;
            }
        }
        out.maps.push_back(std::move(s));
        out.masks.push_back(std::move(gt));
    }
    return out;
}

inline adclick::BinaryMask random_mask(std::mt19937_64& rng, int rows, int cols, double density) {
    adclick::BinaryMask m(rows, cols, 0);
    std::bernoulli_distribution b(density);
    for (auto& v : m.values()) v = b(rng) ? 1 : 0;
    return m;
}

// Non-decreasing IoU trace of random length.
inline std::vector<double> monotone_trace(std::mt19937_64& rng, int max_len) {
    std::uniform_real_distribution<double> step(0.0, 0.25);
    std::vector<double> t;
    double v = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
    const int len = 1 + static_cast<int>(rng() % max_len);
    for (int k = 0; k < len; ++k) {
        t.push_back(std::min(1.0, v));
        v += step(rng);
    }
    return t;
}

}  // namespace instances
