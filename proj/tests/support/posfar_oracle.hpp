#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "adclick/posfar.hpp"

namespace oracle {

inline adclick::datasets::ReferenceBank random_bank(std::mt19937_64& rng, int h, int w, int d, std::size_t n) {
    adclick::datasets::ReferenceBank b;
    b.dim = d;
    b.grid_h = h;
    b.grid_w = w;
    std::normal_distribution<float> g;
    for (std::size_t i = 0; i < n; ++i) {
        b.positions.push_back({static_cast<std::uint32_t>(rng() % h), static_cast<std::uint32_t>(rng() % w)});
        for (int k = 0; k < d; ++k) b.features.push_back(g(rng));
    }
    return b;
}

inline adclick::posfar::PcfGrid random_grid(std::mt19937_64& rng, int h, int w, int d) {
    adclick::posfar::PcfGrid p;
    std::vector<float> v(static_cast<std::size_t>(h) * w * d);
    std::normal_distribution<float> g;
    for (auto& x : v) x = g(rng);
    p.vectors = torch::from_blob(v.data(), {h, w, d}, torch::kFloat32).clone();
    return p;
}

// Exhaustive scan of the whole bank with an explicit Chebyshev test.
inline std::vector<std::int64_t> exhaustive_match(const adclick::posfar::PcfGrid& p, const adclick::datasets::ReferenceBank& b, int radius) {
    std::vector<std::int64_t> out;
    const float* q = p.vectors.data_ptr<float>();
    for (int r = 0; r < p.grid_h(); ++r) {
        for (int c = 0; c < p.grid_w(); ++c) {
            double best = INFINITY;
            std::int64_t arg = -1;
            for (std::size_t i = 0; i < b.size(); ++i) {
                const int dr = std::abs(static_cast<int>(b.positions[i].row) - r);
                const int dc = std::abs(static_cast<int>(b.positions[i].col) - c);
                if (std::max(dr, dc) > radius) continue;
                double dist = 0;
                for (int k = 0; k < b.dim; ++k) {
                    const double diff = static_cast<double>(q[(r * p.grid_w() + c) * b.dim + k]) - b.features[i * b.dim + k];
                    dist += diff * diff;
                }
                if (dist < best) {
                    best = dist;
                    arg = static_cast<std::int64_t>(i);
                }
            }
            out.push_back(arg);
        }
    }
    return out;
}

}  // namespace oracle
