#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "adclick/language.hpp"

namespace oracle {

// Scalar attention: residual [h, w, d], tokens [T, z] -> fused [h, w, d].
inline std::vector<double> attention(const torch::Tensor& residual, const torch::Tensor& tokens,
                                     adclick::language::CrossAttentionFusion& p) {
    auto r = residual.to(torch::kFloat64).contiguous();
    auto l = tokens.to(torch::kFloat64).contiguous();
    auto wq = p->query_conv->weight.to(torch::kFloat64).reshape({p->d_f, p->d_f}).contiguous();
    auto bq = p->query_conv->bias.to(torch::kFloat64).contiguous();
    auto g = p->query_norm->weight.to(torch::kFloat64).contiguous();
    auto bn = p->query_norm->bias.to(torch::kFloat64).contiguous();
    auto wk = p->key->weight.to(torch::kFloat64).contiguous();
    auto wv = p->value->weight.to(torch::kFloat64).contiguous();
    const int h = static_cast<int>(r.size(0)), w = static_cast<int>(r.size(1)), d = static_cast<int>(r.size(2));
    const int t_len = static_cast<int>(l.size(0)), z = static_cast<int>(l.size(1));
    auto R = [&](int y, int x, int c) { return r[y][x][c].item<double>(); };
    std::vector<std::vector<double>> k(t_len, std::vector<double>(d)), v(t_len, std::vector<double>(d));
    for (int t = 0; t < t_len; ++t) {
        for (int c = 0; c < d; ++c) {
            for (int j = 0; j < z; ++j) {
                k[t][c] += wk[c][j].item<double>() * l[t][j].item<double>();
                v[t][c] += wv[c][j].item<double>() * l[t][j].item<double>();
            }
        }
    }
    std::vector<double> out;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::vector<double> q(d);
            for (int c = 0; c < d; ++c) {
                q[c] = bq[c].item<double>();
                for (int j = 0; j < d; ++j) q[c] += wq[c][j].item<double>() * R(y, x, j);
            }
            double mean = 0, var = 0;
            for (double e : q) mean += e / d;
            for (double e : q) var += (e - mean) * (e - mean) / d;
            for (int c = 0; c < d; ++c) q[c] = (q[c] - mean) / std::sqrt(var + 1e-5) * g[c].item<double>() + bn[c].item<double>();
            std::vector<double> s(t_len);
            double mx = -1e300;
            for (int t = 0; t < t_len; ++t) {
                for (int c = 0; c < d; ++c) s[t] += q[c] * k[t][c];
                s[t] /= std::sqrt(static_cast<double>(d));
                mx = std::max(mx, s[t]);
            }
            double sum = 0;
            for (auto& e : s) sum += (e = std::exp(e - mx));
            for (int c = 0; c < d; ++c) {
                double acc = R(y, x, c);
                for (int t = 0; t < t_len; ++t) acc += s[t] / sum * v[t][c];
                out.push_back(acc);
            }
        }
    }
    return out;
}

}  // namespace oracle
