#include "adclick/language.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

#include "adclick/tensor_utils.hpp"

namespace adclick::language {

std::string render_prompt_template(const std::string& object, const std::string& defect, int count) {
    if (object.empty() || defect.empty()) {
        throw Error(ErrorCode::InvalidArgument, "prompt template needs a non-empty object and defect");
    }
    if (count < 1) throw Error(ErrorCode::InvalidArgument, "prompt template needs a positive phrase count");
    return "Give " + std::to_string(count) + " phrases describing the " + defect + " defect on a " + object + ".";
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur += static_cast<char>(std::tolower(ch));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

torch::Tensor HashingTextEncoder::embed(const std::string& prompt) const {
    auto tokens = tokenize(prompt);
    if (tokens.empty()) throw Error(ErrorCode::InvalidArgument, "prompt has no tokens: '" + prompt + "'");
    if (static_cast<int>(tokens.size()) > config_.max_tokens) tokens.resize(static_cast<std::size_t>(config_.max_tokens));
    auto out = torch::empty({static_cast<std::int64_t>(tokens.size()), config_.dim}, torch::kFloat32);
    float* p = out.data_ptr<float>();
    const double scale = 1.0 / std::sqrt(static_cast<double>(config_.dim));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        std::mt19937_64 rng(fnv1a64(tokens[t]) ^ config_.seed);
        for (int k = 0; k < config_.dim; k += 2) {
            const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
            const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            const double r = std::sqrt(-2.0 * std::log(u1));
            p[t * config_.dim + k] = static_cast<float>(scale * r * std::cos(2.0 * std::numbers::pi * u2));
            if (k + 1 < config_.dim) {
                p[t * config_.dim + k + 1] = static_cast<float>(scale * r * std::sin(2.0 * std::numbers::pi * u2));
            }
        }
    }
    return out;
}

std::string HashingTextEncoder::fingerprint() const {
    return "hashing-v1:dim=" + std::to_string(config_.dim) + ":max_tokens=" + std::to_string(config_.max_tokens) +
           ":seed=" + std::to_string(config_.seed);
}

EmbeddingTableTextEncoder::EmbeddingTableTextEncoder(const TextEncoderConfig& config) {
    std::ifstream in(config.path);
    if (!in) throw Error(ErrorCode::EncoderUnavailable, "cannot open text embedding table " + config.path);
    nlohmann::json j;
    try {
        in >> j;
        dim_ = j.at("dim").get<int>();
        fingerprint_ = j.value("fingerprint", "table:" + config.path);
        for (const auto& [prompt, rows] : j.at("entries").items()) {
            const auto t = static_cast<std::int64_t>(rows.size());
            if (t == 0) throw Error(ErrorCode::Schema, "empty embedding for prompt '" + prompt + "'");
            auto tensor = torch::empty({t, dim_}, torch::kFloat32);
            float* p = tensor.data_ptr<float>();
            for (std::int64_t r = 0; r < t; ++r) {
                if (static_cast<int>(rows[r].size()) != dim_) {
                    throw Error(ErrorCode::Schema, "embedding row has wrong width for prompt '" + prompt + "'");
                }
                for (int k = 0; k < dim_; ++k) p[r * dim_ + k] = rows[r][k].get<float>();
            }
            table_.emplace(prompt, tensor);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Schema, "malformed text embedding table: " + std::string(e.what()));
    }
}

torch::Tensor EmbeddingTableTextEncoder::embed(const std::string& prompt) const {
    auto it = table_.find(prompt);
    if (it == table_.end()) {
        throw Error(ErrorCode::EncoderUnavailable, "no precomputed embedding for prompt '" + prompt + "'");
    }
    return it->second;
}

std::unique_ptr<TextEncoder> make_text_encoder(const TextEncoderConfig& config) {
    if (config.kind == "hashing") return std::make_unique<HashingTextEncoder>(config);
    if (config.kind == "table") return std::make_unique<EmbeddingTableTextEncoder>(config);
    throw Error(ErrorCode::InvalidArgument, "unknown text encoder kind '" + config.kind + "'");
}

LinguisticEncoderImpl::LinguisticEncoderImpl(int text_dim, int z_dim) {
    fc1 = register_module("fc1", torch::nn::Linear(text_dim, z_dim));
    fc2 = register_module("fc2", torch::nn::Linear(z_dim, z_dim));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({z_dim})));
}

torch::Tensor LinguisticEncoderImpl::forward(const torch::Tensor& text) {
    return norm(fc2(torch::gelu(fc1(text))));
}

CrossAttentionFusionImpl::CrossAttentionFusionImpl(int d_f_, int z_dim) : d_f(d_f_) {
    query_conv = register_module("query_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(d_f, d_f, 1)));
    query_norm = register_module("query_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_f})));
    key = register_module("key", torch::nn::Linear(torch::nn::LinearOptions(z_dim, d_f).bias(false)));
    value = register_module("value", torch::nn::Linear(torch::nn::LinearOptions(z_dim, d_f).bias(false)));
}

torch::Tensor CrossAttentionFusionImpl::forward(const torch::Tensor& residual, const torch::Tensor& tokens,
                                                const torch::Tensor& token_mask, torch::Tensor* attention_out) {
    if (residual.dim() != 4 || residual.size(1) != d_f) {
        throw Error(ErrorCode::ShapeMismatch, "cross-attention expects a [B, d_f, h, w] residual map");
    }
    if (tokens.dim() != 3 || tokens.size(0) != residual.size(0) || tokens.size(2) != key->options.in_features()) {
        throw Error(ErrorCode::ShapeMismatch, "cross-attention token shape does not match");
    }
    if (tokens.size(1) < 1) throw Error(ErrorCode::ShapeMismatch, "cross-attention needs at least one token");
    const auto b = residual.size(0);
    const auto h = residual.size(2);
    const auto w = residual.size(3);

    auto q = query_conv(residual).flatten(2).transpose(1, 2);  // [B, hw, d_f]
    q = query_norm(q);
    auto k = key(tokens);    // [B, T, d_f]
    auto v = value(tokens);  // [B, T, d_f]
    auto scores = torch::matmul(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(d_f));
    if (token_mask.defined()) {
        scores = scores.masked_fill(token_mask.logical_not().unsqueeze(1), -std::numeric_limits<float>::infinity());
    }
    auto attn = torch::softmax(scores, -1);
    if (attention_out) *attention_out = attn;
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, d_f, h, w});
    return residual + out;
}

LinguisticFeature encode_prompt(const std::string& prompt, const TextEncoder& text_encoder,
                                LinguisticEncoder& linguistic_encoder, const datasets::PromptKey& key) {
    if (prompt.empty()) throw Error(ErrorCode::InvalidArgument, "empty prompt");
    if (!linguistic_encoder) throw Error(ErrorCode::EncoderUnavailable, "linguistic encoder not loaded");
    torch::NoGradGuard no_grad;
    auto v = text_encoder.embed(prompt);
    const auto device = linguistic_encoder->fc1->weight.device();
    auto l = linguistic_encoder->forward(v.to(device).unsqueeze(0))[0].to(torch::kCPU).contiguous();
    require_finite(l, "encode_prompt");
    return LinguisticFeature{l, prompt, key.object, key.defect};
}

torch::Tensor fuse_language(const torch::Tensor& residual_hwd, const LinguisticFeature& feature,
                            CrossAttentionFusion& params) {
    if (residual_hwd.dim() != 3 || feature.tokens.dim() != 2) {
        throw Error(ErrorCode::ShapeMismatch, "fuse_language expects [h, w, d_f] and [T, Z]");
    }
    auto r = residual_hwd.permute({2, 0, 1}).unsqueeze(0);
    auto out = params->forward(r, feature.tokens.unsqueeze(0));
    return out[0].permute({1, 2, 0}).contiguous();
}

TokenBatch pad_tokens(const std::vector<torch::Tensor>& sequences) {
    if (sequences.empty()) throw Error(ErrorCode::InvalidArgument, "pad_tokens: empty batch");
    std::int64_t t_max = 0;
    for (const auto& s : sequences) t_max = std::max(t_max, s.size(0));
    const auto d = sequences.front().size(1);
    const auto b = static_cast<std::int64_t>(sequences.size());
    TokenBatch out{torch::zeros({b, t_max, d}, sequences.front().options()),
                   torch::zeros({b, t_max}, torch::TensorOptions().dtype(torch::kBool).device(sequences.front().device()))};
    for (std::int64_t i = 0; i < b; ++i) {
        const auto t = sequences[static_cast<std::size_t>(i)].size(0);
        out.tokens[i].narrow(0, 0, t).copy_(sequences[static_cast<std::size_t>(i)]);
        out.mask[i].narrow(0, 0, t).fill_(true);
    }
    return out;
}

torch::Tensor mean_pool(const torch::Tensor& tokens, const torch::Tensor& mask) {
    auto m = mask.to(tokens.dtype()).unsqueeze(-1);
    return (tokens * m).sum(1) / m.sum(1).clamp_min(1.0);
}

std::string select_prompt(const datasets::PromptCorpus& corpus, const datasets::PromptKey& key, std::mt19937_64& rng) {
    const auto& phrases = corpus.phrases(key);
    std::uniform_int_distribution<std::size_t> pick(0, phrases.size() - 1);
    return phrases[pick(rng)];
}

torch::Tensor prompt_contrastive_loss(const torch::Tensor& pooled, const std::vector<int>& groups, double temperature) {
    const auto n = pooled.size(0);
    if (static_cast<std::size_t>(n) != groups.size()) {
        throw Error(ErrorCode::ShapeMismatch, "prompt_contrastive_loss: group count differs from batch");
    }
    auto z = torch::nn::functional::normalize(pooled, torch::nn::functional::NormalizeFuncOptions().dim(1));
    auto sim = torch::matmul(z, z.t()) / temperature;
    auto self = torch::eye(n, torch::TensorOptions().dtype(torch::kBool).device(pooled.device()));
    auto logits = sim.masked_fill(self, -std::numeric_limits<float>::infinity());
    auto log_prob = torch::log_softmax(logits, 1);

    auto g = torch::tensor(std::vector<std::int64_t>(groups.begin(), groups.end())).to(pooled.device());
    auto positive = g.unsqueeze(0).eq(g.unsqueeze(1)).logical_and(self.logical_not());
    auto pos_count = positive.sum(1);
    auto has_pos = pos_count.gt(0);
    if (!has_pos.any().item<bool>()) return pooled.sum() * 0.0;
    auto pos_log = log_prob.masked_fill(positive.logical_not(), 0.0).sum(1);
    auto per_anchor = -pos_log / pos_count.clamp_min(1).to(pooled.dtype());
    return per_anchor.masked_select(has_pos).mean();
}

}  // namespace adclick::language
